//! Differentiable query-document scorers with hand-written backward passes,
//! plus the optimizers that update them.
//!
//! Parameter layout is a flat vector:
//!
//! - linear: `[w (F_pair), b]`
//! - mlp: `[W (H x F_pair, row-major), c (H), v (H), b]`, computing
//!   `v . tanh(W x + c) + b`

use rand::Rng;

use crate::data::{Document, FeatureVector, Query};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

impl Architecture {
    pub fn param_count(self, input_dim: usize) -> usize {
        match self {
            Architecture::Linear => input_dim + 1,
            Architecture::Mlp { hidden } => hidden * (input_dim + 1) + hidden + 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::Mlp { .. } => "mlp",
        }
    }

    fn hidden(self) -> usize {
        match self {
            Architecture::Linear => 0,
            Architecture::Mlp { hidden } => hidden,
        }
    }
}

/// `[q ‖ d ‖ q⊙d]`, length `3F`.
pub fn pair_features(query: &Query, doc: &Document) -> Result<FeatureVector> {
    let (q, d) = (query.features.as_slice(), doc.features.as_slice());
    if q.len() != d.len() {
        return Err(Error::Dimension {
            expected: q.len(),
            actual: d.len(),
        });
    }
    let mut out = Vec::with_capacity(3 * q.len());
    out.extend_from_slice(q);
    out.extend_from_slice(d);
    out.extend(q.iter().zip(d).map(|(a, b)| a * b));
    FeatureVector::new(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiableScorer {
    arch: Architecture,
    input_dim: usize,
    params: Vec<f64>,
}

impl DifferentiableScorer {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` from a seeded
    /// stream.
    pub fn new(arch: Architecture, input_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("scorer input dimension must be >= 1".into()));
        }
        if arch == (Architecture::Mlp { hidden: 0 }) {
            return Err(Error::Config("mlp needs at least one hidden unit".into()));
        }
        let mut rng = rng::stream(seed, &["scorer-init"]);
        let mut uniform = |fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.random_range(-bound..=bound)
        };
        let params = match arch {
            Architecture::Linear => (0..=input_dim).map(|_| uniform(input_dim)).collect(),
            Architecture::Mlp { hidden } => {
                let mut p = Vec::with_capacity(arch.param_count(input_dim));
                p.extend((0..hidden * input_dim + hidden).map(|_| uniform(input_dim)));
                p.extend((0..=hidden).map(|_| uniform(hidden)));
                p
            }
        };
        Ok(DifferentiableScorer {
            arch,
            input_dim,
            params,
        })
    }

    pub fn from_params(arch: Architecture, input_dim: usize, params: Vec<f64>) -> Result<Self> {
        let expected = arch.param_count(input_dim);
        if params.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("scorer parameter".into()));
        }
        Ok(DifferentiableScorer {
            arch,
            input_dim,
            params,
        })
    }

    /// All-zero parameters; scores every input 0.
    pub fn zeros(arch: Architecture, input_dim: usize) -> Self {
        DifferentiableScorer {
            arch,
            input_dim,
            params: vec![0.0; arch.param_count(input_dim)],
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scorer input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureVector) -> Result<f64> {
        self.forward_slice(x.as_slice())
    }

    pub fn forward_slice(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let n = self.input_dim;
        let p = &self.params;
        let out = match self.arch {
            Architecture::Linear => dot(&p[..n], x) + p[n],
            Architecture::Mlp { hidden } => {
                let (w, rest) = p.split_at(hidden * n);
                let (c, rest) = rest.split_at(hidden);
                let (v, b) = rest.split_at(hidden);
                let mut s = b[0];
                for h in 0..hidden {
                    s += v[h] * (dot(&w[h * n..(h + 1) * n], x) + c[h]).tanh();
                }
                s
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite("scorer output".into()));
        }
        Ok(out)
    }

    /// Gradient of `upstream * forward(x)` with respect to the parameters.
    pub fn backward(&self, x: &FeatureVector, upstream: f64) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_grad(x.as_slice(), upstream, &mut grad)?;
        Ok(grad)
    }

    /// Adds the gradient of `upstream * forward(x)` into `grad`.
    pub fn accumulate_grad(&self, x: &[f64], upstream: f64, grad: &mut [f64]) -> Result<()> {
        self.check_input(x)?;
        if grad.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                actual: grad.len(),
            });
        }
        if upstream == 0.0 {
            return Ok(());
        }
        let n = self.input_dim;
        match self.arch {
            Architecture::Linear => {
                for (g, xi) in grad[..n].iter_mut().zip(x) {
                    *g += upstream * xi;
                }
                grad[n] += upstream;
            }
            Architecture::Mlp { hidden } => {
                let p = &self.params;
                let (w, rest) = p.split_at(hidden * n);
                let (c, rest) = rest.split_at(hidden);
                let v = &rest[..hidden];
                let (gw, grest) = grad.split_at_mut(hidden * n);
                let (gc, grest) = grest.split_at_mut(hidden);
                let (gv, gb) = grest.split_at_mut(hidden);
                for h in 0..hidden {
                    let a = (dot(&w[h * n..(h + 1) * n], x) + c[h]).tanh();
                    gv[h] += upstream * a;
                    let delta = upstream * v[h] * (1.0 - a * a);
                    gc[h] += delta;
                    for (g, xi) in gw[h * n..(h + 1) * n].iter_mut().zip(x) {
                        *g += delta * xi;
                    }
                }
                gb[0] += upstream;
            }
        }
        Ok(())
    }

    /// Checkpoint text: header `arch \t F_pair \t H`, then one parameter per
    /// line in shortest round-trip decimal.
    pub fn to_checkpoint(&self) -> String {
        let mut s = format!(
            "{}\t{}\t{}\n",
            self.arch.name(),
            self.input_dim,
            self.arch.hidden()
        );
        for p in &self.params {
            s.push_str(&format!("{p:?}\n"));
        }
        s
    }

    pub fn from_checkpoint(text: &str, file: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::schema(file, 1, "empty checkpoint"))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::schema(file, 1, "header must be `arch\\tF_pair\\tH`"));
        }
        let input_dim: usize = fields[1]
            .parse()
            .map_err(|_| Error::schema(file, 1, "bad F_pair"))?;
        let hidden: usize = fields[2]
            .parse()
            .map_err(|_| Error::schema(file, 1, "bad H"))?;
        let arch = match fields[0] {
            "linear" => Architecture::Linear,
            "mlp" => Architecture::Mlp { hidden },
            other => return Err(Error::schema(file, 1, format!("unknown arch `{other}`"))),
        };
        let mut params = Vec::new();
        for (i, line) in lines {
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|_| Error::schema(file, i + 1, format!("bad parameter `{line}`")))?;
            if !v.is_finite() {
                return Err(Error::schema(file, i + 1, "non-finite parameter"));
            }
            params.push(v);
        }
        Self::from_params(arch, input_dim, params).map_err(|e| Error::schema(file, 0, e.to_string()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    /// Adam-style first/second moment update with bias correction, no
    /// weight decay.
    AdaptiveMoment { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::AdaptiveMoment {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be > 0")));
        }
        if let OptimizerKind::AdaptiveMoment { beta1, beta2, eps } = kind {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::Config("moment coefficients must lie in [0, 1)".into()));
            }
            if !(eps > 0.0) {
                return Err(Error::Config("eps must be > 0".into()));
            }
        }
        Ok(Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One descent step. A non-finite gradient aborts without touching the
    /// parameters.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: self.step,
                detail: format!("non-finite gradient at parameter {i}"),
            });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::AdaptiveMoment { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
