//! Semi-supervised training: batch composition, Adam over every parameter
//! (encoders, heads, temperature and kernel weights), periodic retrieval
//! evaluation and checkpoint hooks.

mod adam;
mod batch;
mod checkpoint;
mod retrieval;

pub use adam::{Adam, AdamConfig};
pub use batch::{compose_batch, paired_share, unpaired_size, MultimodalBatch};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use retrieval::{evaluate_retrieval, evaluate_retrieval_with, RetrievalReport};

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::losses::{build_objective, EmbeddingVars, LossTerms, ObjectiveConfig};
use crate::model::{augment, ModelConfig, Stream, TwoStreamModel};
use crate::numerics::{Matrix, Rng};

/// Named objective presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Contrastive loss on the pairs only; unpaired data is dropped.
    Clip,
    /// Every loss, paired and unpaired data.
    #[serde(rename = "setclip")]
    SetClip,
    /// Distribution losses only (`alpha = 0`).
    Unsup,
    /// Contrastive, MK-MMD and SDD; no self-supervised term.
    SddOnly,
    /// Contrastive, MK-MMD and self-supervised; no SDD.
    SslOnly,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Clip,
        Mode::SetClip,
        Mode::Unsup,
        Mode::SddOnly,
        Mode::SslOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Clip => "clip",
            Mode::SetClip => "setclip",
            Mode::Unsup => "unsup",
            Mode::SddOnly => "sdd-only",
            Mode::SslOnly => "ssl-only",
        }
    }

    /// Overrides the loss weights and data usage this preset fixes; every
    /// other setting is left alone.
    pub fn apply(self, cfg: &mut TrainConfig) {
        let w = &mut cfg.objective.weights;
        cfg.use_unpaired = self != Mode::Clip;
        match self {
            Mode::Clip => {
                w.delta = 0.0;
                w.eta = 0.0;
                w.mu = 0.0;
            }
            Mode::SetClip => {}
            Mode::Unsup => w.alpha = 0.0,
            Mode::SddOnly => w.mu = 0.0,
            Mode::SslOnly => w.eta = 0.0,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    /// Evaluate (and checkpoint) every this many epochs; the last epoch is
    /// always evaluated.
    pub eval_every: usize,
    pub seed: u64,
    /// Jitter strength for the self-supervised positive views.
    pub augment_strength: f64,
    /// Draw unpaired rows into batches. Off, the pairs are the whole dataset.
    pub use_unpaired: bool,
    pub ks: Vec<usize>,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 50,
            optimizer: AdamConfig::default(),
            eval_every: 5,
            seed: 0,
            augment_strength: 0.5,
            use_unpaired: true,
            ks: vec![1, 5],
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        mode.apply(&mut self);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.model.validate()?;
        self.objective.validate()?;
        let w = self.objective.weights;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.batch_size < 2 && (w.eta > 0.0 || w.delta > 0.0) {
            return Err(Error::InvalidConfig(
                "distribution losses need batch_size >= 2".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be positive".into()));
        }
        if !(self.augment_strength >= 0.0 && self.augment_strength.is_finite()) {
            return Err(Error::InvalidConfig("augment_strength must be >= 0".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidConfig(
                "ks must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    fn ssl_active(&self) -> bool {
        let w = self.objective.weights;
        w.alpha != 0.0 && w.mu != 0.0
    }
}

/// One evaluation point. Losses are measured on a fixed probe batch drawn
/// once per run, recalls on the held-out test pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub step: u64,
    pub l_cl: f64,
    pub l_ssl_u: f64,
    pub l_ssl_v: f64,
    pub l_mkmmd: f64,
    pub l_sdd: f64,
    pub l_total: f64,
    pub tau: f64,
    pub ks: Vec<usize>,
    pub recall_a_to_b: Vec<f64>,
    pub recall_b_to_a: Vec<f64>,
}

impl MetricRecord {
    pub fn recall(&self, k: usize) -> Option<(f64, f64)> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some((self.recall_a_to_b[i], self.recall_b_to_a[i]))
    }

    /// Mean of both retrieval directions at `k`.
    pub fn mean_recall(&self, k: usize) -> Option<f64> {
        self.recall(k).map(|(a, b)| (a + b) / 2.0)
    }
}

/// Writes one JSON object per line.
pub fn write_history<W: Write>(history: &[MetricRecord], mut out: W) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history<R: BufRead>(input: R) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Mutable state of a run, handed to the evaluation hook.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: TwoStreamModel,
    pub optimizer: Adam,
    pub rng: Rng,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TwoStreamModel,
    pub optimizer: Adam,
    pub history: Vec<MetricRecord>,
    /// Some batch was drawn with replacement.
    pub sampled_with_replacement: bool,
}

/// Fresh model sized for `data` under `cfg`.
pub fn init_model(data: &Dataset, cfg: &TrainConfig) -> Result<TwoStreamModel> {
    let (wa, wb) = data.widths();
    TwoStreamModel::from_config(&cfg.model, wa, wb, cfg.objective.kernels.len(), cfg.seed)
}

/// Composed batches per epoch, `ceil((N + M) / B)`.
pub fn steps_per_epoch(data: &Dataset, batch: usize) -> usize {
    (data.n_pairs() + unpaired_size(data)).div_ceil(batch)
}

struct StepInputs {
    xa: Matrix,
    xb: Matrix,
    xa_aug: Option<Matrix>,
    xb_aug: Option<Matrix>,
    n_paired: usize,
}

fn step_inputs(batch: &MultimodalBatch, cfg: &TrainConfig, rng: &mut Rng) -> StepInputs {
    let (xa, xb) = (batch.full_a(), batch.full_b());
    let (xa_aug, xb_aug) = if cfg.ssl_active() {
        (
            Some(augment(&xa, cfg.augment_strength, rng)),
            Some(augment(&xb, cfg.augment_strength, rng)),
        )
    } else {
        (None, None)
    };
    StepInputs {
        xa,
        xb,
        xa_aug,
        xb_aug,
        n_paired: batch.n_paired(),
    }
}

fn record_objective(
    tape: &mut Tape,
    model: &TwoStreamModel,
    inp: &StepInputs,
    cfg: &ObjectiveConfig,
) -> Result<(crate::model::ModelVars, LossTerms<crate::grad::Var>)> {
    let vars = model.bind(tape);
    let embed = |tape: &mut Tape, s: Stream, x: &Matrix| {
        let xv = tape.leaf(x.clone());
        model.embed_node(tape, &vars, s, xv)
    };
    let u = embed(tape, Stream::A, &inp.xa)?;
    let v = embed(tape, Stream::B, &inp.xb)?;
    let u_aug = inp
        .xa_aug
        .as_ref()
        .map(|x| embed(tape, Stream::A, x))
        .transpose()?;
    let v_aug = inp
        .xb_aug
        .as_ref()
        .map(|x| embed(tape, Stream::B, x))
        .transpose()?;
    let tau = model.tau_node(tape, &vars);
    let emb = EmbeddingVars {
        u,
        v,
        u_aug,
        v_aug,
        n_paired: inp.n_paired,
    };
    let terms = build_objective(tape, &emb, tau, vars.beta_logits, cfg)?;
    Ok((vars, terms))
}

fn evaluate(
    model: &TwoStreamModel,
    data: &Dataset,
    probe: &StepInputs,
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
) -> Result<MetricRecord> {
    let mut tape = Tape::new();
    let (_, terms) = record_objective(&mut tape, model, probe, &cfg.objective)?;
    let l = terms.values(&tape);
    let (ra, rb) = if data.test_a.rows() > 0 {
        let (u, v) = model.forward(&data.test_a, &data.test_b)?;
        let r = evaluate_retrieval(&u, &v, &cfg.ks)?;
        (r.a_to_b, r.b_to_a)
    } else {
        (vec![f64::NAN; cfg.ks.len()], vec![f64::NAN; cfg.ks.len()])
    };
    Ok(MetricRecord {
        epoch,
        step,
        l_cl: l.cl,
        l_ssl_u: l.ssl_u,
        l_ssl_v: l.ssl_v,
        l_mkmmd: l.mmd,
        l_sdd: l.sdd,
        l_total: l.total,
        tau: model.tau(),
        ks: cfg.ks.clone(),
        recall_a_to_b: ra,
        recall_b_to_a: rb,
    })
}

fn diverged(step: u64, terms: &LossTerms<f64>, grad_norms: &[(String, f64)]) -> Error {
    let mut detail = format!(
        "cl={:e} ssl_u={:e} ssl_v={:e} mmd={:e} sdd={:e} total={:e}",
        terms.cl, terms.ssl_u, terms.ssl_v, terms.mmd, terms.sdd, terms.total
    );
    for (name, n) in grad_norms {
        detail.push_str(&format!("; |grad {name}|={n:e}"));
    }
    Error::Diverged { step, detail }
}

/// Trains `model` on `data` with no evaluation hook.
pub fn train(data: &Dataset, model: TwoStreamModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, model, cfg, |_, _| Ok(()))
}

/// Runs the full loop. `on_eval` sees every metric record together with the
/// state it was measured on, e.g. to write checkpoints.
///
/// Each step composes a batch, embeds it (plus jittered views when the
/// self-supervised term is active), records the objective, backpropagates
/// and applies one Adam update. A non-finite loss or gradient aborts with
/// the component losses and per-parameter gradient norms.
pub fn train_with<F>(
    data: &Dataset,
    model: TwoStreamModel,
    cfg: &TrainConfig,
    mut on_eval: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&MetricRecord, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    let data = if cfg.use_unpaired {
        std::borrow::Cow::Borrowed(data)
    } else {
        std::borrow::Cow::Owned(data.without_unpaired())
    };
    let data = data.as_ref();
    if data.is_empty() {
        return Err(Error::InvalidConfig(
            "training needs a non-empty dataset".into(),
        ));
    }
    if model.input_widths() != data.widths() {
        return Err(Error::InvalidConfig(format!(
            "model expects widths {:?}, dataset has {:?}",
            model.input_widths(),
            data.widths()
        )));
    }
    let n = paired_share(data.n_pairs(), unpaired_size(data), cfg.batch_size);
    if n == 0 && cfg.objective.weights.alpha != 0.0 {
        log::warn!("batches contain no pairs; the contrastive term contributes 0");
    }

    let root = Rng::new(cfg.seed);
    let mut probe_rng = root.derive(0x9E0B);
    let probe_batch = compose_batch(data, cfg.batch_size, &mut probe_rng)?;
    let probe = step_inputs(&probe_batch, cfg, &mut probe_rng);

    let optimizer = Adam::new(cfg.optimizer, &model.params());
    let mut st = TrainState {
        model,
        optimizer,
        rng: root.derive(0x7EA1),
        epoch: 0,
        step: 0,
    };
    let mut history = Vec::new();
    let mut with_replacement = probe_batch.with_replacement;

    let rec = evaluate(&st.model, data, &probe, cfg, 0, 0)?;
    on_eval(&rec, &st)?;
    history.push(rec);

    let steps = steps_per_epoch(data, cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        for _ in 0..steps {
            let batch = compose_batch(data, cfg.batch_size, &mut st.rng)?;
            with_replacement |= batch.with_replacement;
            let inp = step_inputs(&batch, cfg, &mut st.rng);
            let mut tape = Tape::new();
            let (vars, terms) = record_objective(&mut tape, &st.model, &inp, &cfg.objective)?;
            let values = terms.values(&tape);
            if !values.all_finite() {
                return Err(diverged(st.step, &values, &[]));
            }
            let grads = match tape.backward(terms.total) {
                Ok(g) => g,
                Err(Error::NonFinite(_)) => return Err(diverged(st.step, &values, &[])),
                Err(e) => return Err(e),
            };
            let mut params = st.model.params_mut();
            let mut norms = Vec::with_capacity(params.len());
            for (p, &v) in params.iter_mut().zip(&vars.all) {
                let g = grads.wrt(v);
                norms.push((p.name.clone(), g.frobenius_norm()));
                p.zero_grad();
                p.accumulate_grad(&g);
            }
            if norms.iter().any(|(_, n)| !n.is_finite()) {
                return Err(diverged(st.step, &values, &norms));
            }
            st.optimizer.step(&mut params);
            st.step += 1;
        }
        st.epoch = epoch;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let rec = evaluate(&st.model, data, &probe, cfg, epoch, st.step)?;
            on_eval(&rec, &st)?;
            history.push(rec);
        }
    }
    if with_replacement {
        log::warn!("some batches were drawn with replacement (batch larger than a pool)");
    }
    st.model.zero_grad();
    Ok(TrainOutcome {
        model: st.model,
        optimizer: st.optimizer,
        history,
        sampled_with_replacement: with_replacement,
    })
}
