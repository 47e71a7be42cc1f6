//! Reverse-mode differentiation over a fixed, unrolled computation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. A tape is
//! used for exactly one forward/backward pass.

use crate::error::{Error, Result};
use crate::snn::{LifParams, PosteriorMode};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x[m×k] · wᵀ` for `w[n×k]`.
    MatMulT {
        x: Var,
        w: Var,
    },
    /// `x[outer, channels, inner] + b[channels]`.
    AddBias {
        x: Var,
        b: Var,
        channels: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        images: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    LifScan {
        x: Var,
        batch: usize,
        steps: usize,
        params: LifParams,
        membranes: Vec<f64>,
    },
    LeakyIntegrate {
        x: Var,
        batch: usize,
        steps: usize,
        alpha: f64,
    },
    Reshape {
        x: Var,
    },
    /// `scale · Σ_{b,t} CE(x[b,t,:], label_b)`.
    SequenceCe {
        x: Var,
        labels: Vec<usize>,
        steps: usize,
        scale: f64,
    },
    /// `Σ_b (1 − M_{y_b}(x[b]))`.
    Confidence {
        x: Var,
        targets: Vec<usize>,
        steps: usize,
        mode: PosteriorMode,
        posteriors: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let shape = self.shapes[v.0].clone();
        self.grads[v.0].take().map(|g| Tensor::from_parts(shape, g))
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf (parameters, or inputs under attack).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `x · wᵀ` where `w` is `[out × in]` and `x` is viewed as `[rows × in]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.value(w).dims2()?;
        let xs = self.value(x);
        if k == 0 || xs.len() % k != 0 {
            return Err(Error::Dimension(format!(
                "input of length {} does not split into rows of {k}",
                xs.len()
            )));
        }
        let m = xs.len() / k;
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, xs.data(), (k, 1), self.value(w).data(), (1, k), 0.0, &mut out, (n, 1));
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT { x, w }, ng))
    }

    /// Adds a per-channel bias; `inner` is the number of contiguous values per channel.
    pub fn add_bias(&mut self, x: Var, b: Var, inner: usize) -> Result<Var> {
        let channels = self.value(b).len();
        let xs = self.value(x);
        if channels == 0 || inner == 0 || xs.len() % (channels * inner) != 0 {
            return Err(Error::Dimension(format!(
                "bias of {channels} channels × {inner} does not tile input of length {}",
                xs.len()
            )));
        }
        let bias = self.value(b).data();
        let mut out = xs.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bias[(i / inner) % channels];
        }
        let shape = xs.shape().to_vec();
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::AddBias {
                x,
                b,
                channels,
                inner,
            },
            ng,
        ))
    }

    /// Valid stride-1 convolution of `images` stacked `c_in×h×w` images.
    pub fn conv2d(&mut self, x: Var, k: Var, images: usize, h: usize, w: usize) -> Result<Var> {
        let [c_out, c_in, kh, kw] = self.value(k).shape()[..] else {
            return Err(Error::Dimension("conv kernels must be 4-D".into()));
        };
        if kh > h || kw > w {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w}"
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
        };
        if self.value(x).len() != images * geom.in_len() {
            return Err(Error::Dimension(format!(
                "conv input length {} != {images}×{}",
                self.value(x).len(),
                geom.in_len()
            )));
        }
        let (il, ol) = (geom.in_len(), geom.out_len());
        let mut out = vec![0.0; images * ol];
        {
            let xs = self.value(x).data();
            let ks = self.value(k).data();
            for (img, dst) in out.chunks_mut(ol).enumerate() {
                geom.forward(&xs[img * il..][..il], ks, dst);
            }
        }
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(
            Tensor::from_parts(vec![images, c_out, geom.oh(), geom.ow()], out),
            Op::Conv2d { x, k, geom, images },
            ng,
        ))
    }

    /// 2×2/2 max pool over trailing `h×w` planes.
    pub fn maxpool2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.value(x);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || xs.len() % (h * w) != 0 {
            return Err(Error::Dimension(format!(
                "maxpool needs even planes, got {h}x{w} over length {}",
                xs.len()
            )));
        }
        let planes = xs.len() / (h * w);
        let (out, argmax) = kernels::maxpool_forward(xs.data(), planes, h, w);
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![planes, h / 2, w / 2], out),
            Op::MaxPool2 { x, argmax },
            ng,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let out = xs.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = xs.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid { x }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let out = xs.data().iter().map(|v| v.max(0.0)).collect();
        let shape = xs.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Relu { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, ng))
    }

    fn split_sequence(&self, x: Var, batch: usize, steps: usize) -> Result<usize> {
        let len = self.value(x).len();
        if batch == 0 || steps == 0 || len % (batch * steps) != 0 {
            return Err(Error::Dimension(format!(
                "length {len} is not a [{batch} × {steps} × F] sequence"
            )));
        }
        Ok(len / (batch * steps))
    }

    /// Spiking LIF layer unrolled over time; `x` holds synaptic currents laid out `[batch, steps, F]`.
    ///
    /// Emits spikes with the same layout. Membranes start at zero.
    pub fn lif_scan(&mut self, x: Var, batch: usize, steps: usize, params: LifParams) -> Result<Var> {
        let features = self.split_sequence(x, batch, steps)?;
        let xs = self.value(x).data();
        let mut spikes = vec![0.0; xs.len()];
        let mut membranes = vec![0.0; xs.len()];
        let mut mem = vec![0.0; features];
        let mut prev = vec![0.0; features];
        for b in 0..batch {
            mem.fill(0.0);
            prev.fill(0.0);
            for t in 0..steps {
                let off = (b * steps + t) * features;
                for f in 0..features {
                    let v = params.alpha * mem[f] + xs[off + f] - prev[f] * params.theta;
                    let o = params.fire(v);
                    mem[f] = v;
                    prev[f] = o;
                    membranes[off + f] = v;
                    spikes[off + f] = o;
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(shape, spikes),
            Op::LifScan {
                x,
                batch,
                steps,
                params,
                membranes,
            },
            ng,
        ))
    }

    /// Non-spiking readout: `ν[t] = α·ν[t−1] + x[t]`, layout `[batch, steps, F]`.
    pub fn leaky_integrate(&mut self, x: Var, batch: usize, steps: usize, alpha: f64) -> Result<Var> {
        let features = self.split_sequence(x, batch, steps)?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for b in 0..batch {
            for t in 0..steps {
                let off = (b * steps + t) * features;
                for f in 0..features {
                    let prev = if t == 0 { 0.0 } else { out[off - features + f] };
                    out[off + f] = alpha * prev + xs[off + f];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![batch, steps, features], out),
            Op::LeakyIntegrate {
                x,
                batch,
                steps,
                alpha,
            },
            ng,
        ))
    }

    /// Scaled sum of softmax cross-entropies over every `[b, t]` row of `x[batch, steps, C]`.
    pub fn sequence_ce(&mut self, x: Var, labels: &[usize], steps: usize, scale: f64) -> Result<Var> {
        let batch = labels.len();
        let classes = self.split_sequence(x, batch, steps)?;
        let xs = self.value(x).data();
        let mut total = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            for t in 0..steps {
                let row = Tensor::from_parts(vec![classes], xs[(b * steps + t) * classes..][..classes].to_vec());
                total += crate::tensor::softmax_ce(&row, y)?;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![scale * total]),
            Op::SequenceCe {
                x,
                labels: labels.to_vec(),
                steps,
                scale,
            },
            ng,
        ))
    }

    /// `Σ_b (1 − M_{y_b})` where `M` is the posterior of `x[batch, steps, C]`.
    pub fn confidence_loss(
        &mut self,
        x: Var,
        targets: &[usize],
        steps: usize,
        mode: PosteriorMode,
    ) -> Result<Var> {
        let batch = targets.len();
        let classes = self.split_sequence(x, batch, steps)?;
        let xs = self.value(x).data();
        let mut posteriors = Vec::with_capacity(batch);
        let mut total = 0.0;
        for (b, &y) in targets.iter().enumerate() {
            if y >= classes {
                return Err(Error::Index(format!("class {y} out of range for {classes}")));
            }
            let seq = &xs[b * steps * classes..][..steps * classes];
            let p = crate::snn::posterior_of(seq, steps, classes, mode);
            total += 1.0 - p[y];
            posteriors.push(p);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![total]),
            Op::Confidence {
                x,
                targets: targets.to_vec(),
                steps,
                mode,
                posteriors,
            },
            ng,
        ))
    }

    /// Posterior vectors computed by a `confidence_loss` node.
    pub fn posteriors(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Confidence { posteriors, .. } => Some(posteriors),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar node with unit seed.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage("backward root must be a scalar".into()));
        }
        self.backward_with(root, vec![1.0])
    }

    /// Reverse sweep from `root` seeded with an explicit adjoint.
    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(root).len() {
            return Err(Error::Dimension("seed adjoint shape mismatch".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMulT { x, w } => {
                let (n, k) = (self.value(*w).shape()[0], self.value(*w).shape()[1]);
                let m = g.len() / n;
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, (n, 1), self.value(*w).data(), (k, 1), 0.0, &mut dx, (k, 1));
                    add_into(&mut grads[x.0], dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; n * k];
                    kernels::gemm(n, m, k, g, (1, n), self.value(*x).data(), (k, 1), 0.0, &mut dw, (k, 1));
                    add_into(&mut grads[w.0], dw);
                }
            }
            Op::AddBias {
                x,
                b,
                channels,
                inner,
            } => {
                if self.needs(*x) {
                    add_into(&mut grads[x.0], g.to_vec());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; *channels];
                    for (i, v) in g.iter().enumerate() {
                        db[(i / inner) % channels] += v;
                    }
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Conv2d { x, k, geom, images } => {
                let (il, ol) = (geom.in_len(), geom.out_len());
                let xs = self.value(*x).data();
                let ks = self.value(*k).data();
                let mut dx = self.needs(*x).then(|| vec![0.0; images * il]);
                let mut dk = self.needs(*k).then(|| vec![0.0; ks.len()]);
                for img in 0..*images {
                    geom.backward(
                        &xs[img * il..][..il],
                        ks,
                        &g[img * ol..][..ol],
                        dx.as_mut().map(|d| &mut d[img * il..][..il]),
                        dk.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], dx);
                }
                if let Some(dk) = dk {
                    add_into(&mut grads[k.0], dk);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gv, &i) in g.iter().zip(argmax) {
                    dx[i] += gv;
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Sigmoid { x } => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Reshape { x } => add_into(&mut grads[x.0], g.to_vec()),
            Op::LifScan {
                x,
                batch,
                steps,
                params,
                membranes,
            } => {
                let features = g.len() / (batch * steps);
                let mut dx = vec![0.0; g.len()];
                let mut next = vec![0.0; features];
                for b in 0..*batch {
                    next.fill(0.0);
                    for t in (0..*steps).rev() {
                        let off = (b * steps + t) * features;
                        for f in 0..features {
                            // O[t] feeds ν[t+1] through the −θ·O[t] reset term.
                            let a_spike = g[off + f] - params.theta * next[f];
                            let a_mem = a_spike * params.spike_grad(membranes[off + f])
                                + params.alpha * next[f];
                            dx[off + f] = a_mem;
                            next[f] = a_mem;
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::LeakyIntegrate {
                x,
                batch,
                steps,
                alpha,
            } => {
                let features = g.len() / (batch * steps);
                let mut dx = vec![0.0; g.len()];
                for b in 0..*batch {
                    for t in (0..*steps).rev() {
                        let off = (b * steps + t) * features;
                        for f in 0..features {
                            let carry = if t + 1 < *steps { dx[off + features + f] } else { 0.0 };
                            dx[off + f] = g[off + f] + alpha * carry;
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::SequenceCe {
                x,
                labels,
                steps,
                scale,
            } => {
                let xs = self.value(*x).data();
                let classes = xs.len() / (labels.len() * steps);
                let mut dx = vec![0.0; xs.len()];
                for (b, &y) in labels.iter().enumerate() {
                    for t in 0..*steps {
                        let off = (b * steps + t) * classes;
                        let p = softmax(&xs[off..off + classes]);
                        for c in 0..classes {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            dx[off + c] = g[0] * scale * (p[c] - onehot);
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Confidence {
                x,
                targets,
                steps,
                mode,
                ..
            } => {
                let xs = self.value(*x).data();
                let classes = xs.len() / (targets.len() * steps);
                let mut dx = vec![0.0; xs.len()];
                for (b, &y) in targets.iter().enumerate() {
                    let base = b * steps * classes;
                    match mode {
                        PosteriorMode::SummedMembrane => {
                            let seq = &xs[base..base + steps * classes];
                            let p = crate::snn::posterior_of(seq, *steps, classes, *mode);
                            for t in 0..*steps {
                                for c in 0..classes {
                                    let onehot = if c == y { 1.0 } else { 0.0 };
                                    dx[base + t * classes + c] = -g[0] * p[y] * (onehot - p[c]);
                                }
                            }
                        }
                        PosteriorMode::MeanStepSoftmax => {
                            let inv = 1.0 / *steps as f64;
                            for t in 0..*steps {
                                let off = base + t * classes;
                                let p = softmax(&xs[off..off + classes]);
                                for c in 0..classes {
                                    let onehot = if c == y { 1.0 } else { 0.0 };
                                    dx[off + c] = -g[0] * inv * p[y] * (onehot - p[c]);
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
        }
    }
}
