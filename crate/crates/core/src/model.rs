//! Network architectures shared by the target models and the evaluators.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::snn::{LifLayer, LifParams, PosteriorMode, SpikeFn, SurrogateSpec};
use crate::tape::{Tape, Var};
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SnnMlp,
    AnnMlp,
    SnnCnn,
    AnnCnn,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "snn-mlp" => Ok(Self::SnnMlp),
            "ann-mlp" => Ok(Self::AnnMlp),
            "snn-cnn" => Ok(Self::SnnCnn),
            "ann-cnn" => Ok(Self::AnnCnn),
            _ => Err(Error::Config(format!("unknown model kind `{s}`"))),
        }
    }

    pub fn is_spiking(self) -> bool {
        matches!(self, Self::SnnMlp | Self::SnnCnn)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, Self::SnnCnn | Self::AnnCnn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SnnMlp => "snn-mlp",
            Self::AnnMlp => "ann-mlp",
            Self::SnnCnn => "snn-cnn",
            Self::AnnCnn => "ann-cnn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown scale `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Hidden widths (MLP kinds).
    pub hidden: Vec<usize>,
    /// Filters per conv stage (CNN kinds); each stage is conv → 2×2 pool.
    pub filters: Vec<usize>,
    pub kernel: usize,
    /// Time steps of the spiking input (1 for ANNs).
    pub steps: usize,
    pub alpha: f64,
    pub theta: f64,
    pub slope: f64,
    pub posterior: PosteriorMode,
}

impl ModelSpec {
    /// Architecture presets: one hidden layer of 3000 (300 at desk scale) for
    /// MLPs; conv12-5×5 → pool → conv24-5×5 → pool → dense for CNNs.
    pub fn preset(kind: ModelKind, height: usize, width: usize, classes: usize, scale: Scale) -> Self {
        let hidden = match scale {
            Scale::Desk => 300,
            Scale::Full => 3000,
        };
        Self {
            kind,
            height,
            width,
            classes,
            hidden: if kind.is_conv() { vec![] } else { vec![hidden] },
            filters: if kind.is_conv() { vec![12, 24] } else { vec![] },
            kernel: 5,
            steps: if kind.is_spiking() { 25 } else { 1 },
            alpha: 0.7,
            theta: 1.0,
            slope: 40.0,
            posterior: PosteriorMode::MeanStepSoftmax,
        }
    }

    pub fn features(&self) -> usize {
        self.height * self.width
    }

    /// Flat length of one input: `[T × F]` for SNNs, `[F]` for ANNs.
    pub fn input_len(&self) -> usize {
        self.steps * self.features()
    }

    pub fn lif(&self) -> LifParams {
        LifParams {
            alpha: self.alpha,
            theta: self.theta,
            surrogate: SurrogateSpec { slope: self.slope },
            spike_fn: SpikeFn::Heaviside,
        }
    }

    /// Spatial size after every conv/pool stage.
    fn conv_dims(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut c, mut h, mut w) = (1, self.height, self.width);
        let mut out = Vec::new();
        for &f in &self.filters {
            if self.kernel > h || self.kernel > w {
                return Err(Error::Config(format!(
                    "kernel {} does not fit {h}x{w} feature map",
                    self.kernel
                )));
            }
            let (oh, ow) = (h - self.kernel + 1, w - self.kernel + 1);
            if oh % 2 != 0 || ow % 2 != 0 {
                return Err(Error::Config(format!("conv output {oh}x{ow} is not poolable")));
            }
            out.push((c, h, w));
            c = f;
            h = oh / 2;
            w = ow / 2;
        }
        out.push((c, h, w));
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.features() == 0 || self.steps == 0 {
            return Err(Error::Config("empty input geometry".into()));
        }
        if self.kind.is_spiking() {
            self.lif().validate()?;
        } else if self.steps != 1 {
            return Err(Error::Config("ANN models take a single step".into()));
        }
        if self.kind.is_conv() {
            if self.filters.is_empty() || self.filters.contains(&0) || self.kernel == 0 {
                return Err(Error::Config("conv models need non-empty filter counts".into()));
            }
            self.conv_dims()?;
        } else if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor in declaration order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        let mut shapes = Vec::new();
        if self.kind.is_conv() {
            let dims = self.conv_dims()?;
            for (i, &f) in self.filters.iter().enumerate() {
                shapes.push(vec![f, dims[i].0, self.kernel, self.kernel]);
                shapes.push(vec![f]);
            }
            let (c, h, w) = *dims.last().unwrap_or(&(1, 0, 0));
            shapes.push(vec![self.classes, c * h * w]);
            shapes.push(vec![self.classes]);
        } else {
            let mut fan_in = self.features();
            for &h in self.hidden.iter().chain(std::iter::once(&self.classes)) {
                shapes.push(vec![h, fan_in]);
                shapes.push(vec![h]);
                fan_in = h;
            }
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_shapes()?.iter().map(|s| s.iter().product::<usize>()).sum())
    }

    /// `key = value` rendering used in checkpoints and configs.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("kind".into(), self.kind.to_string()),
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("classes".into(), self.classes.to_string()),
            ("hidden".into(), list(&self.hidden)),
            ("filters".into(), list(&self.filters)),
            ("kernel".into(), self.kernel.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("alpha".into(), format!("{:?}", self.alpha)),
            ("theta".into(), format!("{:?}", self.theta)),
            ("slope".into(), format!("{:?}", self.slope)),
            ("posterior".into(), self.posterior.as_str().into()),
        ]
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("model spec is missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("bad `{k}` in model spec")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Format(format!("bad `{k}` in model spec")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::Format(format!("bad `{k}` in model spec"))))
                .collect()
        };
        let spec = Self {
            kind: ModelKind::parse(get("kind")?)?,
            height: num("height")?,
            width: num("width")?,
            classes: num("classes")?,
            hidden: list("hidden")?,
            filters: list("filters")?,
            kernel: num("kernel")?,
            steps: num("steps")?,
            alpha: real("alpha")?,
            theta: real("theta")?,
            slope: real("slope")?,
            posterior: PosteriorMode::parse(get("posterior")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Tensor>,
}

/// Uniform `±1/√fan_in` initialisation for weights and biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let shapes = spec.param_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(shapes.len());
    for pair in shapes.chunks(2) {
        let fan_in: usize = pair[0][1..].iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        for shape in pair {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::from_parts(shape.clone(), data));
        }
    }
    Ok(Model {
        spec: spec.clone(),
        params,
    })
}

impl Model {
    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s[..] != *p.shape()) {
            return Err(Error::Config("parameter shapes do not match model spec".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn zeroed(spec: &ModelSpec) -> Result<Self> {
        let params = spec.param_shapes()?.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self {
            spec: spec.clone(),
            params,
        })
    }

    pub fn is_spiking(&self) -> bool {
        self.spec.kind.is_spiking()
    }

    /// Builds the forward graph for `batch` stacked inputs already on the tape.
    ///
    /// Returns output membranes `[batch, steps, C]` for SNNs or logits
    /// `[batch, C]` for ANNs.
    pub fn forward(&self, tape: &mut Tape, input: Var, params: &[Var], batch: usize, spike_fn: SpikeFn) -> Result<Var> {
        let spec = &self.spec;
        let steps = spec.steps;
        let lif = LifParams {
            spike_fn,
            ..spec.lif()
        };
        if tape.value(input).len() != batch * spec.input_len() {
            return Err(Error::Dimension(format!(
                "input length {} != {batch} × {}",
                tape.value(input).len(),
                spec.input_len()
            )));
        }
        let mut cur = input;
        let mut p = params.iter();
        let mut next = || p.next().copied().ok_or_else(|| Error::Config("missing parameters".into()));
        let spiking = spec.kind.is_spiking();
        if spec.kind.is_conv() {
            let dims = spec.conv_dims()?;
            let images = batch * steps;
            for stage in 0..spec.filters.len() {
                let (_, h, w) = dims[stage];
                let (oh, ow) = (h - spec.kernel + 1, w - spec.kernel + 1);
                let (k, b) = (next()?, next()?);
                cur = tape.conv2d(cur, k, images, h, w)?;
                cur = tape.add_bias(cur, b, oh * ow)?;
                if spiking {
                    cur = tape.maxpool2(cur, oh, ow)?;
                    cur = tape.lif_scan(cur, batch, steps, lif)?;
                } else {
                    cur = tape.relu(cur);
                    cur = tape.maxpool2(cur, oh, ow)?;
                }
            }
        } else {
            for _ in &spec.hidden {
                let (w, b) = (next()?, next()?);
                cur = tape.matmul_t(cur, w)?;
                cur = tape.add_bias(cur, b, 1)?;
                cur = if spiking {
                    tape.lif_scan(cur, batch, steps, lif)?
                } else {
                    tape.sigmoid(cur)
                };
            }
        }
        let (w, b) = (next()?, next()?);
        cur = tape.matmul_t(cur, w)?;
        cur = tape.add_bias(cur, b, 1)?;
        if spiking {
            cur = tape.leaky_integrate(cur, batch, steps, spec.alpha)?;
        }
        Ok(cur)
    }

    fn tape_with_params(&self, trainable: bool) -> (Tape, Vec<Var>) {
        let mut tape = Tape::new();
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        (tape, vars)
    }

    fn check_batch(&self, inputs: &[f64]) -> Result<usize> {
        let len = self.spec.input_len();
        if inputs.is_empty() || inputs.len() % len != 0 {
            return Err(Error::Dimension(format!(
                "input length {} is not a multiple of {len}",
                inputs.len()
            )));
        }
        Ok(inputs.len() / len)
    }

    /// Posterior vectors for stacked inputs.
    pub fn posteriors(&self, inputs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let batch = self.check_batch(inputs)?;
        let (mut tape, vars) = self.tape_with_params(false);
        let x = tape.constant(Tensor::from_parts(vec![inputs.len()], inputs.to_vec()));
        let out = self.forward(&mut tape, x, &vars, batch, SpikeFn::Heaviside)?;
        let classes = self.spec.classes;
        let steps = self.spec.steps;
        let data = tape.value(out).data();
        Ok((0..batch)
            .map(|b| {
                let seq = &data[b * steps * classes..][..steps * classes];
                if self.is_spiking() {
                    crate::snn::posterior_of(seq, steps, classes, self.spec.posterior)
                } else {
                    softmax(seq)
                }
            })
            .collect())
    }

    /// Posterior of one input (`[T × F]` spikes for SNNs, `[F]` pixels for ANNs).
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.spec.input_len() {
            return Err(Error::Dimension(format!(
                "model expects {} input values, got {}",
                self.spec.input_len(),
                input.len()
            )));
        }
        Ok(self.posteriors(input)?.remove(0))
    }

    /// Mean training loss over a batch and the parameter gradients.
    ///
    /// SNNs use cumulative cross-entropy over every output step; ANNs plain
    /// softmax cross-entropy on the logits.
    pub fn loss_and_grads(&self, inputs: &[f64], labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let batch = self.check_batch(inputs)?;
        if batch != labels.len() {
            return Err(Error::Dimension("label count differs from batch".into()));
        }
        let (mut tape, vars) = self.tape_with_params(true);
        let x = tape.constant(Tensor::from_parts(vec![inputs.len()], inputs.to_vec()));
        let out = self.forward(&mut tape, x, &vars, batch, SpikeFn::Heaviside)?;
        let loss = tape.sequence_ce(out, labels, self.spec.steps, 1.0 / batch as f64)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(&self.params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, g))
    }

    /// Identity-loss gradients `∇_x (1 − M_y(x))` for stacked inputs.
    ///
    /// Returns per-input posteriors and dense per-input gradients.
    pub fn input_gradients(&self, inputs: &[f64], targets: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let batch = self.check_batch(inputs)?;
        if batch != targets.len() {
            return Err(Error::Dimension("target count differs from batch".into()));
        }
        let (mut tape, vars) = self.tape_with_params(false);
        let x = tape.leaf(Tensor::from_parts(vec![inputs.len()], inputs.to_vec()));
        let out = self.forward(&mut tape, x, &vars, batch, SpikeFn::Heaviside)?;
        let mode = if self.is_spiking() {
            self.spec.posterior
        } else {
            PosteriorMode::SummedMembrane
        };
        let loss = tape.confidence_loss(out, targets, self.spec.steps, mode)?;
        let post = tape.posteriors(loss).map(<[_]>::to_vec).unwrap_or_default();
        let mut grads = tape.backward(loss)?;
        let g = grads
            .take(x)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs.len()]);
        let len = self.spec.input_len();
        Ok((post, g.chunks(len).map(<[f64]>::to_vec).collect()))
    }

    /// The MLP parameters as a list of LIF layers (last one non-spiking).
    pub fn lif_layers(&self) -> Result<Vec<LifLayer>> {
        if self.spec.kind != ModelKind::SnnMlp {
            return Err(Error::Config("only spiking MLPs map onto LIF layer lists".into()));
        }
        let n = self.params.len() / 2;
        self.params
            .chunks(2)
            .enumerate()
            .map(|(i, p)| LifLayer::new(p[0].clone(), p[1].clone(), self.spec.alpha, self.spec.theta, i + 1 < n))
            .collect()
    }
}
