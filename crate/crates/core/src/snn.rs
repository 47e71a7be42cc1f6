//! Discrete-time leaky integrate-and-fire dynamics.
//!
//! Membrane update per step:
//!
//! ```text
//! ν[n] = α·ν[n−1] + Σ_k ω_k·I_k[n] + b − O[n−1]·θ
//! O[n] = 1 if ν[n] > θ else 0
//! ```
//!
//! Readout layers integrate without firing or resetting. During backward the
//! Heaviside derivative is replaced by the fast-sigmoid surrogate
//! `1 / (1 + k·|ν − θ|)²`.
//!
//! This module is the per-sample reference path over a list of layers. The
//! batched training/attack path lives on the [`Tape`](crate::tape::Tape) and
//! is cross-checked against this one in tests.

use crate::error::{Error, Result};
use crate::tensor::{softmax, softmax_ce, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSpec {
    pub slope: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self { slope: 40.0 }
    }
}

/// Forward spike nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeFn {
    /// Strict `ν > θ` step; the surrogate only appears in backward.
    #[default]
    Heaviside,
    /// Smooth `x / (1 + k|x|)` with `x = ν − θ`, whose exact derivative is the
    /// surrogate. Used for gradient checking.
    Soft,
}

/// How the class posterior is read from output membranes `[T × C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PosteriorMode {
    /// `softmax(Σ_n ν[n])`.
    #[default]
    SummedMembrane,
    /// `mean_n softmax(ν[n])`.
    MeanStepSoftmax,
}

impl PosteriorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PosteriorMode::SummedMembrane => "summed",
            PosteriorMode::MeanStepSoftmax => "mean-step",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "summed" => Ok(Self::SummedMembrane),
            "mean-step" => Ok(Self::MeanStepSoftmax),
            _ => Err(Error::Config(format!("unknown posterior mode `{s}`"))),
        }
    }
}

/// Shared neuron constants of a spiking layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub alpha: f64,
    pub theta: f64,
    pub surrogate: SurrogateSpec,
    pub spike_fn: SpikeFn,
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("decay {} outside [0, 1]", self.alpha)));
        }
        if self.theta.is_nan() || self.theta <= 0.0 {
            return Err(Error::Config(format!("threshold {} must be > 0", self.theta)));
        }
        if self.surrogate.slope.is_nan() || self.surrogate.slope <= 0.0 {
            return Err(Error::Config(format!(
                "surrogate slope {} must be > 0",
                self.surrogate.slope
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn fire(&self, membrane: f64) -> f64 {
        match self.spike_fn {
            SpikeFn::Heaviside => {
                if membrane > self.theta {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFn::Soft => {
                let x = membrane - self.theta;
                x / (1.0 + self.surrogate.slope * x.abs())
            }
        }
    }

    #[inline]
    pub fn spike_grad(&self, membrane: f64) -> f64 {
        surrogate_derivative(membrane, self.theta, self.surrogate)
    }
}

/// Fast-sigmoid surrogate for `dO/dν`.
pub fn surrogate_derivative(membrane: f64, theta: f64, spec: SurrogateSpec) -> f64 {
    let d = 1.0 + spec.slope * (membrane - theta).abs();
    1.0 / (d * d)
}

/// Posterior of a flat `[steps × classes]` membrane sequence.
pub(crate) fn posterior_of(seq: &[f64], steps: usize, classes: usize, mode: PosteriorMode) -> Vec<f64> {
    match mode {
        PosteriorMode::SummedMembrane => {
            let mut sum = vec![0.0; classes];
            for row in seq.chunks(classes).take(steps) {
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            softmax(&sum)
        }
        PosteriorMode::MeanStepSoftmax => {
            let mut mean = vec![0.0; classes];
            for row in seq.chunks(classes).take(steps) {
                mean.iter_mut().zip(softmax(row)).for_each(|(m, p)| *m += p / steps as f64);
            }
            mean
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifLayer {
    /// `[out × in]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub alpha: f64,
    pub theta: f64,
    /// Readout layers (`false`) integrate but never fire or reset.
    pub spiking: bool,
}

impl LifLayer {
    pub fn new(weights: Tensor, bias: Tensor, alpha: f64, theta: f64, spiking: bool) -> Result<Self> {
        let (out, _) = weights.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {out} outputs",
                bias.shape()
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("decay {alpha} outside [0, 1]")));
        }
        if theta.is_nan() || theta <= 0.0 {
            return Err(Error::Config(format!("threshold {theta} must be > 0")));
        }
        Ok(Self {
            weights,
            bias,
            alpha,
            theta,
            spiking,
        })
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    fn currents(&self, input: &[f64]) -> Vec<f64> {
        let k = self.inputs();
        let w = self.weights.data();
        self.bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, b)| b + w[o * k..(o + 1) * k].iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    fn params(&self, spike_fn: SpikeFn, surrogate: SurrogateSpec) -> LifParams {
        LifParams {
            alpha: self.alpha,
            theta: self.theta,
            surrogate,
            spike_fn,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub membrane: Tensor,
    pub last_spike: Tensor,
}

impl LifState {
    pub fn zeros(width: usize) -> Self {
        Self {
            membrane: Tensor::zeros(&[width]),
            last_spike: Tensor::zeros(&[width]),
        }
    }
}

fn step_raw(layer: &LifLayer, params: &LifParams, mem: &[f64], prev: &[f64], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let currents = layer.currents(input);
    let mut out_mem = Vec::with_capacity(currents.len());
    let mut out_spk = Vec::with_capacity(currents.len());
    for ((i, m), o) in currents.iter().zip(mem).zip(prev) {
        if layer.spiking {
            let v = layer.alpha * m + i - o * layer.theta;
            out_spk.push(params.fire(v));
            out_mem.push(v);
        } else {
            out_mem.push(layer.alpha * m + i);
            out_spk.push(0.0);
        }
    }
    (out_mem, out_spk)
}

/// One LIF update on binary input spikes.
pub fn lif_step(layer: &LifLayer, state: &LifState, input_spikes: &Tensor) -> Result<(LifState, Tensor)> {
    if input_spikes.len() != layer.inputs() {
        return Err(Error::Dimension(format!(
            "layer expects {} inputs, got {}",
            layer.inputs(),
            input_spikes.len()
        )));
    }
    if state.membrane.len() != layer.outputs() || state.last_spike.len() != layer.outputs() {
        return Err(Error::Dimension("state width does not match layer".into()));
    }
    if input_spikes.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain("input spikes must be 0 or 1".into()));
    }
    let params = layer.params(SpikeFn::Heaviside, SurrogateSpec::default());
    let (mem, spk) = step_raw(layer, &params, state.membrane.data(), state.last_spike.data(), input_spikes.data());
    let n = mem.len();
    let spikes = Tensor::from_parts(vec![n], spk.clone());
    Ok((
        LifState {
            membrane: Tensor::from_parts(vec![n], mem),
            last_spike: Tensor::from_parts(vec![n], spk),
        },
        spikes,
    ))
}

/// Everything the reverse pass needs from a forward unroll.
#[derive(Debug, Clone)]
pub struct SnnTrace {
    steps: usize,
    layers: Vec<LifLayer>,
    spike_fn: SpikeFn,
    surrogate: SurrogateSpec,
    /// Per layer: inputs `[T × in]`, membranes `[T × out]`, spikes `[T × out]`.
    inputs: Vec<Vec<f64>>,
    membranes: Vec<Vec<f64>>,
    spikes: Vec<Vec<f64>>,
}

impl SnnTrace {
    /// Output-layer membranes `[T × C]`.
    pub fn output_membranes(&self) -> Tensor {
        let c = self.layers.last().map_or(0, LifLayer::outputs);
        Tensor::from_parts(vec![self.steps, c], self.membranes.last().cloned().unwrap_or_default())
    }

    /// Spikes `[T × width]` emitted by layer `i`.
    pub fn layer_spikes(&self, i: usize) -> Tensor {
        Tensor::from_parts(vec![self.steps, self.layers[i].outputs()], self.spikes[i].clone())
    }

    /// Membranes `[T × width]` of layer `i`.
    pub fn layer_membranes(&self, i: usize) -> Tensor {
        Tensor::from_parts(vec![self.steps, self.layers[i].outputs()], self.membranes[i].clone())
    }
}

/// Unrolls the network over `input[T × in]` from a zero state.
pub fn snn_forward(
    network: &[LifLayer],
    input: &Tensor,
    spike_fn: SpikeFn,
    surrogate: SurrogateSpec,
) -> Result<SnnTrace> {
    let (steps, width) = input.dims2()?;
    if steps == 0 {
        return Err(Error::Dimension("need at least one time step".into()));
    }
    if network.is_empty() {
        return Err(Error::Config("empty network".into()));
    }
    let mut w = width;
    for (i, l) in network.iter().enumerate() {
        if l.inputs() != w {
            return Err(Error::Dimension(format!(
                "layer {i} expects {} inputs, previous width is {w}",
                l.inputs()
            )));
        }
        w = l.outputs();
    }
    let mut inputs = Vec::with_capacity(network.len());
    let mut membranes = Vec::with_capacity(network.len());
    let mut spikes = Vec::with_capacity(network.len());
    let mut current = input.data().to_vec();
    for layer in network {
        let params = layer.params(spike_fn, surrogate);
        let (n_in, n_out) = (layer.inputs(), layer.outputs());
        let mut mem_rec = Vec::with_capacity(steps * n_out);
        let mut spk_rec = Vec::with_capacity(steps * n_out);
        let mut mem = vec![0.0; n_out];
        let mut prev = vec![0.0; n_out];
        for t in 0..steps {
            let (m, s) = step_raw(layer, &params, &mem, &prev, &current[t * n_in..(t + 1) * n_in]);
            mem_rec.extend_from_slice(&m);
            spk_rec.extend_from_slice(&s);
            mem = m;
            prev = s;
        }
        inputs.push(std::mem::take(&mut current));
        current = spk_rec.clone();
        membranes.push(mem_rec);
        spikes.push(spk_rec);
    }
    Ok(SnnTrace {
        steps,
        layers: network.to_vec(),
        spike_fn,
        surrogate,
        inputs,
        membranes,
        spikes,
    })
}

#[derive(Debug, Clone)]
pub struct SnnGrads {
    /// Per layer `(dW [out × in], db [out])`.
    pub layers: Vec<(Tensor, Tensor)>,
    /// Dense `[T × in]` input gradient.
    pub input: Tensor,
}

/// BPTT from an adjoint on the output membranes `[T × C]`.
pub fn snn_backward(trace: &SnnTrace, membrane_adjoint: &Tensor) -> Result<SnnGrads> {
    let steps = trace.steps;
    let out_width = trace.layers.last().map_or(0, LifLayer::outputs);
    if membrane_adjoint.shape() != [steps, out_width] {
        return Err(Error::Dimension(format!(
            "adjoint shape {:?} != [{steps}, {out_width}]",
            membrane_adjoint.shape()
        )));
    }
    let mut grads = Vec::with_capacity(trace.layers.len());
    // Adjoint w.r.t. this layer's outputs: membranes for the readout, spikes otherwise.
    let mut upstream = membrane_adjoint.data().to_vec();
    for (li, layer) in trace.layers.iter().enumerate().rev() {
        let params = layer.params(trace.spike_fn, trace.surrogate);
        let (n_in, n_out) = (layer.inputs(), layer.outputs());
        let mems = &trace.membranes[li];
        let ins = &trace.inputs[li];
        let mut a_mem = vec![0.0; steps * n_out];
        let mut next = vec![0.0; n_out];
        for t in (0..steps).rev() {
            for o in 0..n_out {
                let i = t * n_out + o;
                let a = if layer.spiking {
                    let a_spike = upstream[i] - layer.theta * next[o];
                    a_spike * params.spike_grad(mems[i]) + layer.alpha * next[o]
                } else {
                    upstream[i] + layer.alpha * next[o]
                };
                a_mem[i] = a;
                next[o] = a;
            }
        }
        let w = layer.weights.data();
        let mut dw = vec![0.0; n_out * n_in];
        let mut db = vec![0.0; n_out];
        let mut d_in = vec![0.0; steps * n_in];
        for t in 0..steps {
            let x = &ins[t * n_in..(t + 1) * n_in];
            let dx = &mut d_in[t * n_in..(t + 1) * n_in];
            for o in 0..n_out {
                let a = a_mem[t * n_out + o];
                if a == 0.0 {
                    continue;
                }
                db[o] += a;
                let row = &w[o * n_in..(o + 1) * n_in];
                let drow = &mut dw[o * n_in..(o + 1) * n_in];
                for k in 0..n_in {
                    drow[k] += a * x[k];
                    dx[k] += a * row[k];
                }
            }
        }
        grads.push((
            Tensor::from_parts(vec![n_out, n_in], dw),
            Tensor::from_parts(vec![n_out], db),
        ));
        upstream = d_in;
    }
    grads.reverse();
    let n_in = trace.layers[0].inputs();
    Ok(SnnGrads {
        layers: grads,
        input: Tensor::from_parts(vec![steps, n_in], upstream),
    })
}

fn check_membranes(membranes: &Tensor) -> Result<(usize, usize)> {
    let (steps, classes) = membranes.dims2()?;
    if steps == 0 {
        return Err(Error::Dimension("need at least one time step".into()));
    }
    Ok((steps, classes))
}

/// Cumulative softmax cross-entropy over all time steps.
pub fn membrane_ce_loss(membranes: &Tensor, label: usize) -> Result<f64> {
    let (_, classes) = check_membranes(membranes)?;
    membranes
        .data()
        .chunks(classes)
        .map(|row| softmax_ce(&Tensor::from_parts(vec![classes], row.to_vec()), label))
        .sum()
}

/// Gradient of [`membrane_ce_loss`] with respect to the membranes.
pub fn membrane_ce_grad(membranes: &Tensor, label: usize) -> Result<Tensor> {
    let (_, classes) = check_membranes(membranes)?;
    let mut out = Vec::with_capacity(membranes.len());
    for row in membranes.data().chunks(classes) {
        out.extend(crate::tensor::softmax_ce_grad(&Tensor::from_parts(vec![classes], row.to_vec()), label)?.into_data());
    }
    Ok(Tensor::from_parts(membranes.shape().to_vec(), out))
}

/// Class posterior from output membranes `[T × C]`.
pub fn posterior(membranes: &Tensor, mode: PosteriorMode) -> Result<Vec<f64>> {
    let (steps, classes) = check_membranes(membranes)?;
    Ok(posterior_of(membranes.data(), steps, classes, mode))
}
