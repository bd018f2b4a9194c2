//! Two-stream encoder/projection-head model.
//!
//! Each modality has its own encoder MLP followed by a linear projection
//! head into the shared `K`-dimensional latent space. The streams share no
//! parameters. The model also owns the learnable temperature (stored as
//! `log tau`) and the MK-MMD kernel weight logits so that a single optimizer
//! sees every trainable quantity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Param, Tape, Var};
use crate::numerics::{Matrix, Rng};

/// Temperature is clamped to this range after exponentiation.
pub const TAU_RANGE: (f64, f64) = (0.01, 100.0);
pub const TAU_INIT: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

/// Layer widths from input to output, e.g. `[24, 64, 64]` is two layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Apply the activation after the last layer as well. Encoders do
    /// (their output feeds the head); projection heads do not.
    #[serde(default)]
    pub activate_output: bool,
}

impl MlpSpec {
    pub fn encoder(input: usize, hidden: &[usize]) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        Self {
            widths,
            activation: Activation::Tanh,
            activate_output: true,
        }
    }

    pub fn linear_head(input: usize, output: usize) -> Self {
        Self {
            widths: vec![input, output],
            activation: Activation::Tanh,
            activate_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidConfig(
                "an MLP needs at least one layer".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("MLP widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec, name: &str, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let bound = glorot_bound(w[0], w[1]);
                let mut lrng = rng.derive(l as u64);
                Layer {
                    weight: Param::new(
                        format!("{name}.{l}.weight"),
                        Matrix::from_fn(w[0], w[1], |_, _| lrng.uniform_range(-bound, bound)),
                    ),
                    bias: Param::new(format!("{name}.{l}.bias"), Matrix::zeros(1, w[1])),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    fn activate(&self, l: usize) -> bool {
        l + 1 < self.layers.len() || self.spec.activate_output
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.spec.input_width() {
            return Err(Error::ShapeMismatch {
                op: "mlp forward",
                left: x.shape(),
                right: (x.rows(), self.spec.input_width()),
            });
        }
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight.value)?;
            let b = layer.bias.value.data();
            for i in 0..h.rows() {
                for (x, bb) in h.row_mut(i).iter_mut().zip(b) {
                    *x += bb;
                }
            }
            if self.activate(l) {
                h = match self.spec.activation {
                    Activation::Tanh => h.map(f64::tanh),
                    Activation::Relu => h.map(|x| x.max(0.0)),
                };
            }
        }
        Ok(h)
    }

    /// `vars` holds the weight and bias nodes, layer by layer.
    pub fn forward_node(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let xs = tape.value(x).shape();
        if xs.1 != self.spec.input_width() {
            return Err(Error::ShapeMismatch {
                op: "mlp forward",
                left: xs,
                right: (xs.0, self.spec.input_width()),
            });
        }
        let mut h = x;
        for (l, wb) in vars.chunks(2).enumerate() {
            let z = tape.matmul(h, wb[0])?;
            h = tape.add_row(z, wb[1])?;
            if self.activate(l) {
                h = match self.spec.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// Architecture of both streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    /// `(encoder, head)` specs for a modality with `input` features.
    pub fn stream_specs(&self, input: usize) -> (MlpSpec, MlpSpec) {
        let mut enc = MlpSpec::encoder(input, &self.hidden);
        enc.activation = self.activation;
        let head_in = self.hidden.last().copied().unwrap_or(input);
        (enc, MlpSpec::linear_head(head_in, self.embed_dim))
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.embed_dim == 0 {
            return Err(Error::InvalidConfig(
                "model needs at least one hidden layer and positive widths".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStreamModel {
    pub encoder_a: Mlp,
    pub head_a: Mlp,
    pub encoder_b: Mlp,
    pub head_b: Mlp,
    pub tau_log: Param,
    pub beta_logits: Param,
}

/// Tape nodes for every parameter of a [`TwoStreamModel`], in
/// [`TwoStreamModel::params`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub all: Vec<Var>,
    enc_a: std::ops::Range<usize>,
    head_a: std::ops::Range<usize>,
    enc_b: std::ops::Range<usize>,
    head_b: std::ops::Range<usize>,
    pub tau_log: Var,
    pub beta_logits: Var,
}

impl TwoStreamModel {
    /// Builds both streams from `(encoder, head)` specs. The two streams and
    /// every layer draw from distinct sub-seeds of `seed`.
    pub fn init(
        spec_a: (&MlpSpec, &MlpSpec),
        spec_b: (&MlpSpec, &MlpSpec),
        n_kernels: usize,
        seed: u64,
    ) -> Result<Self> {
        if spec_a.1.output_width() != spec_b.1.output_width() {
            return Err(Error::InvalidConfig(format!(
                "stream embedding widths differ: {} vs {}",
                spec_a.1.output_width(),
                spec_b.1.output_width()
            )));
        }
        for (enc, head) in [spec_a, spec_b] {
            head.validate()?;
            let enc_out = *enc.widths.last().unwrap_or(&0);
            if enc_out != head.input_width() {
                return Err(Error::InvalidConfig(format!(
                    "encoder output {enc_out} does not feed head input {}",
                    head.input_width()
                )));
            }
        }
        let root = Rng::new(seed);
        Ok(Self {
            encoder_a: Mlp::init(spec_a.0, "a.encoder", &mut root.derive(1))?,
            head_a: Mlp::init(spec_a.1, "a.head", &mut root.derive(2))?,
            encoder_b: Mlp::init(spec_b.0, "b.encoder", &mut root.derive(3))?,
            head_b: Mlp::init(spec_b.1, "b.head", &mut root.derive(4))?,
            tau_log: Param::new("tau_log", Matrix::scalar(TAU_INIT.ln())),
            beta_logits: Param::new("beta_logits", Matrix::zeros(1, n_kernels)),
        })
    }

    /// Model with the default architecture for the given input widths.
    pub fn from_config(
        cfg: &ModelConfig,
        input_a: usize,
        input_b: usize,
        n_kernels: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let (ea, ha) = cfg.stream_specs(input_a);
        let (eb, hb) = cfg.stream_specs(input_b);
        Self::init((&ea, &ha), (&eb, &hb), n_kernels, seed)
    }

    pub fn embed_dim(&self) -> usize {
        self.head_a.spec.output_width()
    }

    pub fn input_widths(&self) -> (usize, usize) {
        (
            self.encoder_a.spec.input_width(),
            self.encoder_b.spec.input_width(),
        )
    }

    pub fn tau(&self) -> f64 {
        self.tau_log
            .value
            .item()
            .exp()
            .clamp(TAU_RANGE.0, TAU_RANGE.1)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        out.extend(self.encoder_a.params());
        out.extend(self.head_a.params());
        out.extend(self.encoder_b.params());
        out.extend(self.head_b.params());
        out.push(&self.tau_log);
        out.push(&self.beta_logits);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        out.extend(self.encoder_a.params_mut());
        out.extend(self.head_a.params_mut());
        out.extend(self.encoder_b.params_mut());
        out.extend(self.head_b.params_mut());
        out.push(&mut self.tau_log);
        out.push(&mut self.beta_logits);
        out
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let mut all = Vec::new();
        let mut span = |mlp: &Mlp, all: &mut Vec<Var>| {
            let start = all.len();
            for p in mlp.params() {
                all.push(tape.leaf(p.value.clone()));
            }
            start..all.len()
        };
        let enc_a = span(&self.encoder_a, &mut all);
        let head_a = span(&self.head_a, &mut all);
        let enc_b = span(&self.encoder_b, &mut all);
        let head_b = span(&self.head_b, &mut all);
        let tau_log = tape.leaf(self.tau_log.value.clone());
        let beta_logits = tape.leaf(self.beta_logits.value.clone());
        all.push(tau_log);
        all.push(beta_logits);
        ModelVars {
            all,
            enc_a,
            head_a,
            enc_b,
            head_b,
            tau_log,
            beta_logits,
        }
    }

    /// Clamped temperature node.
    pub fn tau_node(&self, tape: &mut Tape, vars: &ModelVars) -> Var {
        let t = tape.exp(vars.tau_log);
        tape.clamp(t, TAU_RANGE.0, TAU_RANGE.1)
    }

    pub fn embed_node(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        stream: Stream,
        x: Var,
    ) -> Result<Var> {
        let (enc, head, re, rh) = match stream {
            Stream::A => (&self.encoder_a, &self.head_a, &vars.enc_a, &vars.head_a),
            Stream::B => (&self.encoder_b, &self.head_b, &vars.enc_b, &vars.head_b),
        };
        let h = enc.forward_node(tape, &vars.all[re.clone()], x)?;
        head.forward_node(tape, &vars.all[rh.clone()], h)
    }

    pub fn embed(&self, stream: Stream, x: &Matrix) -> Result<Matrix> {
        let (enc, head) = match stream {
            Stream::A => (&self.encoder_a, &self.head_a),
            Stream::B => (&self.encoder_b, &self.head_b),
        };
        head.forward(&enc.forward(x)?)
    }

    /// `(H_a(F_a(x_a)), H_b(F_b(x_b)))`.
    pub fn forward(&self, x_a: &Matrix, x_b: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.embed(Stream::A, x_a)?, self.embed(Stream::B, x_b)?))
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}

/// Input-space jitter: `x + N(0, (strength * std_j)^2)` per column `j`.
pub fn augment(x: &Matrix, strength: f64, rng: &mut Rng) -> Matrix {
    if strength == 0.0 || x.rows() == 0 {
        return x.clone();
    }
    let n = x.rows() as f64;
    let means = crate::numerics::column_means(x);
    let stds: Vec<f64> = (0..x.cols())
        .map(|j| {
            if x.rows() < 2 {
                return 0.0;
            }
            let ss: f64 = x.row_iter().map(|r| (r[j] - means[j]).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        })
        .collect();
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v += strength * stds[j] * rng.normal();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{check_gradient, FD_STEP};

    fn model(seed: u64) -> TwoStreamModel {
        TwoStreamModel::from_config(&ModelConfig::default(), 24, 32, 2, seed).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(model(3), model(3));
        assert_ne!(model(3), model(4));
    }

    #[test]
    fn weights_within_glorot_bound() {
        let m = model(1);
        for mlp in [&m.encoder_a, &m.head_a, &m.encoder_b, &m.head_b] {
            for layer in &mlp.layers {
                let (fi, fo) = layer.weight.value.shape();
                let bound = glorot_bound(fi, fo);
                assert!(layer.weight.value.max_abs() <= bound);
                assert_eq!(layer.bias.value.max_abs(), 0.0);
            }
        }
        assert!((m.tau() - TAU_INIT).abs() < 1e-15);
    }

    #[test]
    fn streams_use_distinct_sub_seeds() {
        // same widths for both streams so the draws are comparable
        let m = TwoStreamModel::from_config(&ModelConfig::default(), 10, 10, 2, 5).unwrap();
        assert_ne!(
            m.encoder_a.layers[0].weight.value,
            m.encoder_b.layers[0].weight.value
        );
    }

    #[test]
    fn output_shape_contract() {
        let m = model(2);
        for b in [1, 5, 17] {
            let (u, v) = m
                .forward(&Matrix::zeros(b, 24), &Matrix::zeros(b, 32))
                .unwrap();
            assert_eq!(u.shape(), (b, 16));
            assert_eq!(v.shape(), (b, 16));
        }
        assert!(m
            .forward(&Matrix::zeros(2, 23), &Matrix::zeros(2, 32))
            .is_err());
    }

    #[test]
    fn zero_input_with_zero_bias_gives_zero_output() {
        let (u, v) = model(6)
            .forward(&Matrix::zeros(3, 24), &Matrix::zeros(3, 32))
            .unwrap();
        assert_eq!(u.max_abs(), 0.0);
        assert_eq!(v.max_abs(), 0.0);
    }

    #[test]
    fn tape_forward_matches_value_forward() {
        let m = model(7);
        let mut rng = Rng::new(1);
        let x = Matrix::from_fn(5, 24, |_, _| rng.normal());
        let mut t = Tape::new();
        let vars = m.bind(&mut t);
        let xv = t.leaf(x.clone());
        let u = m.embed_node(&mut t, &vars, Stream::A, xv).unwrap();
        let want = m.embed(Stream::A, &x).unwrap();
        assert!(t.value(u).sub(&want).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn first_layer_gradient_matches_finite_differences() {
        let m = model(8);
        let mut rng = Rng::new(2);
        let x = Matrix::from_fn(4, 24, |_, _| rng.normal());
        let w0 = m.encoder_a.layers[0].weight.value.clone();
        let chk = check_gradient(
            |t, w| {
                let mut vars = m.bind(t);
                // route the checked leaf into the first weight slot
                vars.all[0] = w;
                let xv = t.leaf(x.clone());
                let u = m.embed_node(t, &vars, Stream::A, xv)?;
                Ok(t.sum(u))
            },
            &w0,
            FD_STEP,
        )
        .unwrap();
        assert!(chk.max_rel_error < 1e-5, "{:e}", chk.max_rel_error);
    }

    #[test]
    fn streams_do_not_alias() {
        let mut m = model(9);
        let mut rng = Rng::new(3);
        let xb = Matrix::from_fn(4, 32, |_, _| rng.normal());
        let before = m.embed(Stream::B, &xb).unwrap();
        for p in m.encoder_a.params_mut().chain(m.head_a.params_mut()) {
            p.value = p.value.map(|x| x + 1.0);
        }
        assert_eq!(m.embed(Stream::B, &xb).unwrap(), before);
    }

    #[test]
    fn augment_contract() {
        let mut rng = Rng::new(4);
        let x = Matrix::from_fn(100, 100, |_, j| (j as f64 + 1.0) * rng.normal());
        assert_eq!(augment(&x, 0.0, &mut Rng::new(1)), x);
        let a1 = augment(&x, 0.5, &mut Rng::new(1));
        let a2 = augment(&x, 0.5, &mut Rng::new(1));
        assert_eq!(a1, a2);
        // noise std relative to each column's std should be ~0.5
        let stds: Vec<f64> = (0..100)
            .map(|j| {
                let col: Vec<f64> = (0..100).map(|i| x[(i, j)]).collect();
                let m = col.iter().sum::<f64>() / 100.0;
                (col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 99.0).sqrt()
            })
            .collect();
        let mut ss = 0.0;
        for i in 0..100 {
            for j in 0..100 {
                ss += ((a1[(i, j)] - x[(i, j)]) / stds[j]).powi(2);
            }
        }
        let ratio = (ss / 10_000.0).sqrt() / 0.5;
        assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
    }
}
