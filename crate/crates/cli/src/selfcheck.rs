//! Release gate: reverse-mode gradients against central differences, the
//! density and discrepancy estimators against brute-force scalar loops, and
//! the identity/symmetry invariants of the losses.
//!
//! The oracles here are written out longhand on purpose and share no code
//! with the library beyond the matrix container.

use std::f64::consts::PI;
use std::io::Write;

use anyhow::Result;
use serde::Serialize;

use semalign::grad::{value_and_grad, Tape, Var, FD_STEP, REL_ERROR_FLOOR};
use semalign::kernels::{BaseKernel, KernelSpec, MultiKernel};
use semalign::losses::{
    build_objective, clip_contrastive_loss, clip_contrastive_node, gamma_divergence, kde_density,
    mkmmd_loss_with, mkmmd_node, sdd_loss, sdd_loss_counted, sdd_node, ssl_loss, ssl_node,
    Divergence, EmbeddingVars, MmdEstimator, ObjectiveConfig, SddConfig, SslDenominator,
};
use semalign::model::{ModelConfig, Stream, TwoStreamModel};
use semalign::numerics::{batch_variance, finite_diff_grad, max_relative_error};
use semalign::{Matrix, Rng};

pub const GRAD_TOL: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Gradient,
    Oracle,
    Invariant,
    Complexity,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub group: Group,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    fn push(&mut self, group: Group, name: impl Into<String>, measured: f64, tolerance: f64) {
        self.checks.push(Check {
            group,
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(move |c| c.group == group)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One line per check: verdict, name, measured error and tolerance.
    pub fn write_table<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "{:<6}{:<48}{:>12}{:>12}",
            "", "check", "measured", "tolerance"
        )?;
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(
                out,
                "{verdict:<6}{:<48}{:>12.3e}{:>12.1e}",
                c.name, c.measured, c.tolerance
            )?;
        }
        let failed = self.failures().count();
        writeln!(out, "{} checks, {} failed", self.checks.len(), failed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    /// Seeds per gradient and oracle check.
    pub seeds: u64,
    /// Perturb one analytic gradient entry so the gate has something to catch.
    pub inject_fault: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            seeds: 10,
            inject_fault: false,
        }
    }
}

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-2.0, 2.0))
}

fn grad_error<F>(build: F, at: &Matrix, fault: bool) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> semalign::Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone());
    let loss = build(&mut tape, x)?;
    let (_, mut g) = value_and_grad(&tape, loss, &[x])?;
    if fault {
        let e = &mut g[0].data_mut()[0];
        *e += 1e-3 * (1.0 + e.abs());
    }
    let numeric = finite_diff_grad(
        |m| {
            let mut t = Tape::new();
            let x = t.leaf(m.clone());
            build(&mut t, x).map(|l| t.scalar(l)).unwrap_or(f64::NAN)
        },
        at,
        FD_STEP,
    );
    Ok(max_relative_error(&g[0], &numeric, REL_ERROR_FLOOR))
}

fn sdd_label(cfg: &SddConfig) -> String {
    let div = match cfg.divergence {
        Divergence::Kl => "kl",
        Divergence::Mse => "mse",
    };
    let rd = if cfg.use_relative_distance {
        "on"
    } else {
        "off"
    };
    format!("rd={rd} div={div}")
}

fn sdd_variants() -> Vec<SddConfig> {
    let mut out = Vec::new();
    for rd in [true, false] {
        for divergence in [Divergence::Kl, Divergence::Mse] {
            out.push(SddConfig {
                use_relative_distance: rd,
                divergence,
                ..SddConfig::default()
            });
        }
    }
    out
}

fn mmd_specs() -> [KernelSpec; 2] {
    [
        KernelSpec::Gaussian { gamma_sq: 2.0 },
        KernelSpec::Polynomial {
            coef0: 1.0,
            degree: 2,
        },
    ]
}

struct ModelInputs {
    xa: Matrix,
    xb: Matrix,
    xa_aug: Matrix,
    xb_aug: Matrix,
}

fn model_objective() -> ObjectiveConfig {
    // a fixed bandwidth: the median heuristic is a per-batch constant the
    // gradient does not see, so finite differences would disagree with it
    ObjectiveConfig {
        kernels: vec![
            BaseKernel::Gaussian {
                gamma_sq: Some(2.0),
            },
            BaseKernel::Polynomial {
                coef0: 1.0,
                degree: 2,
            },
        ],
        ..ObjectiveConfig::default()
    }
}

/// Total objective of `model` on fixed inputs, with gradients for every
/// parameter in `params()` order.
fn model_total(
    model: &TwoStreamModel,
    inp: &ModelInputs,
    obj: &ObjectiveConfig,
) -> semalign::Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let mut embed = |s: Stream, x: &Matrix| {
        let xv = tape.leaf(x.clone());
        model.embed_node(&mut tape, &vars, s, xv)
    };
    let u = embed(Stream::A, &inp.xa)?;
    let v = embed(Stream::B, &inp.xb)?;
    let u_aug = embed(Stream::A, &inp.xa_aug)?;
    let v_aug = embed(Stream::B, &inp.xb_aug)?;
    let tau = model.tau_node(&mut tape, &vars);
    let emb = EmbeddingVars {
        u,
        v,
        u_aug: Some(u_aug),
        v_aug: Some(v_aug),
        n_paired: 3,
    };
    let terms = build_objective(&mut tape, &emb, tau, vars.beta_logits, obj)?;
    value_and_grad(&tape, terms.total, &vars.all)
}

/// Largest relative gradient error over every parameter of a small
/// two-stream model under the full objective.
fn model_grad_error(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let inp = ModelInputs {
        xa: random(8, 4, &mut rng),
        xb: random(8, 4, &mut rng),
        xa_aug: random(8, 4, &mut rng),
        xb_aug: random(8, 4, &mut rng),
    };
    let cfg = ModelConfig {
        hidden: vec![5],
        embed_dim: 3,
        ..ModelConfig::default()
    };
    let obj = model_objective();
    let model = TwoStreamModel::from_config(&cfg, 4, 4, obj.kernels.len(), seed)?;
    let (_, grads) = model_total(&model, &inp, &obj)?;
    let mut worst: f64 = 0.0;
    for (p, g) in grads.iter().enumerate() {
        let at = model.params()[p].value.clone();
        let numeric = finite_diff_grad(
            |m| {
                let mut probe = model.clone();
                probe.params_mut()[p].value = m.clone();
                model_total(&probe, &inp, &obj)
                    .map(|r| r.0)
                    .unwrap_or(f64::NAN)
            },
            &at,
            FD_STEP,
        );
        worst = worst.max(max_relative_error(g, &numeric, REL_ERROR_FLOOR));
    }
    Ok(worst)
}

fn gradient_checks(report: &mut Report, opts: &Options) -> Result<()> {
    let mut fault = opts.inject_fault;
    for cfg in sdd_variants() {
        let mut worst: f64 = 0.0;
        for seed in 0..opts.seeds {
            let mut rng = Rng::new(seed);
            let (u, v) = (random(8, 4, &mut rng), random(8, 4, &mut rng));
            let e = grad_error(
                |t, x| {
                    let y = t.leaf(v.clone());
                    sdd_node(t, x, y, &cfg)
                },
                &u,
                std::mem::take(&mut fault),
            )?;
            worst = worst.max(e);
        }
        report.push(
            Group::Gradient,
            format!("gradient sdd {}", sdd_label(&cfg)),
            worst,
            GRAD_TOL,
        );
    }

    for est in [MmdEstimator::Biased, MmdEstimator::Unbiased] {
        let (mut wu, mut wb): (f64, f64) = (0.0, 0.0);
        for seed in 0..opts.seeds {
            let mut rng = Rng::new(seed);
            let (u, v) = (random(8, 4, &mut rng), random(8, 4, &mut rng));
            let logits = random(1, 2, &mut rng);
            let specs = mmd_specs();
            wu = wu.max(grad_error(
                |t, x| {
                    let y = t.leaf(v.clone());
                    let l = t.leaf(logits.clone());
                    let beta = t.row_softmax(l);
                    mkmmd_node(t, &specs, beta, x, y, est)
                },
                &u,
                false,
            )?);
            wb = wb.max(grad_error(
                |t, l| {
                    let x = t.leaf(u.clone());
                    let y = t.leaf(v.clone());
                    let beta = t.row_softmax(l);
                    mkmmd_node(t, &specs, beta, x, y, est)
                },
                &logits,
                false,
            )?);
        }
        let name = format!("{est:?}").to_lowercase();
        report.push(
            Group::Gradient,
            format!("gradient mkmmd {name} wrt u"),
            wu,
            GRAD_TOL,
        );
        report.push(
            Group::Gradient,
            format!("gradient mkmmd {name} wrt kernel logits"),
            wb,
            GRAD_TOL,
        );
    }

    let (mut wc, mut wt): (f64, f64) = (0.0, 0.0);
    let mut ws = [0.0f64; 2];
    for seed in 0..opts.seeds {
        let mut rng = Rng::new(seed);
        let (u, v) = (random(8, 4, &mut rng), random(8, 4, &mut rng));
        let tau = Matrix::scalar(0.5);
        wc = wc.max(grad_error(
            |t, x| {
                let y = t.leaf(v.clone());
                let tau = t.leaf(tau.clone());
                clip_contrastive_node(t, x, y, tau)
            },
            &u,
            false,
        )?);
        wt = wt.max(grad_error(
            |t, tau| {
                let x = t.leaf(u.clone());
                let y = t.leaf(v.clone());
                clip_contrastive_node(t, x, y, tau)
            },
            &tau,
            false,
        )?);
        for (i, denom) in [SslDenominator::Literal, SslDenominator::SimClr]
            .into_iter()
            .enumerate()
        {
            ws[i] = ws[i].max(grad_error(
                |t, x| {
                    let y = t.leaf(v.clone());
                    let tau = t.leaf(tau.clone());
                    ssl_node(t, x, y, tau, denom)
                },
                &u,
                false,
            )?);
        }
    }
    report.push(Group::Gradient, "gradient clip wrt u", wc, GRAD_TOL);
    report.push(
        Group::Gradient,
        "gradient clip wrt temperature",
        wt,
        GRAD_TOL,
    );
    report.push(
        Group::Gradient,
        "gradient ssl literal wrt z",
        ws[0],
        GRAD_TOL,
    );
    report.push(
        Group::Gradient,
        "gradient ssl simclr wrt z",
        ws[1],
        GRAD_TOL,
    );

    let mut wm: f64 = 0.0;
    for seed in 0..opts.seeds {
        wm = wm.max(model_grad_error(seed)?);
    }
    report.push(
        Group::Gradient,
        "gradient total objective through model",
        wm,
        GRAD_TOL,
    );
    Ok(())
}

fn sq_dist_loop(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s
}

fn spread_loop(t: &Matrix) -> f64 {
    let (n, d) = t.shape();
    let mut total = 0.0;
    for k in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += t[(i, k)];
        }
        mean /= n as f64;
        for i in 0..n {
            total += (t[(i, k)] - mean).powi(2);
        }
    }
    total / (n - 1) as f64
}

fn kappa_loop(x: &[f64], t: &Matrix, cfg: &SddConfig) -> f64 {
    let b2 = cfg.bandwidth * cfg.bandwidth;
    let s = if cfg.use_relative_distance {
        spread_loop(t).max(cfg.sigma_floor)
    } else {
        1.0
    };
    let mut acc = 0.0;
    for i in 0..t.rows() {
        acc += (-sq_dist_loop(x, t.row(i)) / (b2 * s)).exp();
    }
    acc / (2.0 * t.rows() as f64 * b2 * PI)
}

fn gamma_loop(t: &Matrix, r: &Matrix, cfg: &SddConfig) -> f64 {
    let n = t.rows();
    let p_raw: Vec<f64> = (0..n).map(|i| kappa_loop(t.row(i), t, cfg)).collect();
    let q_raw: Vec<f64> = (0..n).map(|i| kappa_loop(t.row(i), r, cfg)).collect();
    let (ps, qs): (f64, f64) = (p_raw.iter().sum(), q_raw.iter().sum());
    let mut acc = 0.0;
    for i in 0..n {
        let (p, q) = (p_raw[i] / ps, q_raw[i] / qs);
        acc += match cfg.divergence {
            Divergence::Kl => p * (p / q).ln(),
            Divergence::Mse => (p - q) * (p - q),
        };
    }
    acc
}

fn kernel_loop(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    match *spec {
        KernelSpec::Gaussian { gamma_sq } => (-sq_dist_loop(x, y) / (2.0 * gamma_sq)).exp(),
        KernelSpec::Polynomial { coef0, degree } => {
            let mut d = 0.0;
            for k in 0..x.len() {
                d += x[k] * y[k];
            }
            (d + coef0).powi(degree as i32)
        }
    }
}

fn mmd_loop(
    specs: &[KernelSpec],
    logits: &[f64],
    u: &Matrix,
    v: &Matrix,
    est: MmdEstimator,
) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let n = u.rows();
    let mut total = 0.0;
    for (s, spec) in specs.iter().enumerate() {
        let beta = logits[s].exp() / z;
        let (mut uu, mut vv, mut uv) = (0.0, 0.0, 0.0);
        // the unbiased form is the U-statistic over i != j, cross terms included
        for i in 0..n {
            for j in 0..n {
                if i != j || est == MmdEstimator::Biased {
                    uu += kernel_loop(spec, u.row(i), u.row(j));
                    vv += kernel_loop(spec, v.row(i), v.row(j));
                    uv += kernel_loop(spec, u.row(i), v.row(j));
                }
            }
        }
        let pairs = match est {
            MmdEstimator::Biased => (n * n) as f64,
            MmdEstimator::Unbiased => (n * (n - 1)) as f64,
        };
        total += beta * (uu + vv - 2.0 * uv) / pairs;
    }
    total
}

fn cosine_loop(a: &[f64], b: &[f64]) -> f64 {
    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        d += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    d / (na.sqrt() * nb.sqrt())
}

fn clip_loop(u: &Matrix, v: &Matrix, tau: f64) -> f64 {
    let n = u.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let pos = (cosine_loop(u.row(i), v.row(i)) / tau).exp();
        let (mut row, mut col) = (0.0, 0.0);
        for j in 0..n {
            row += (cosine_loop(u.row(i), v.row(j)) / tau).exp();
            col += (cosine_loop(u.row(j), v.row(i)) / tau).exp();
        }
        acc -= (pos / row).ln() + (pos / col).ln();
    }
    acc / (2 * n) as f64
}

fn ssl_loop(z: &Matrix, zp: &Matrix, tau: f64, denom: SslDenominator) -> f64 {
    let n = z.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let pos = (cosine_loop(z.row(i), zp.row(i)) / tau).exp();
        let mut den = if denom == SslDenominator::SimClr {
            pos
        } else {
            0.0
        };
        for j in 0..n {
            if denom == SslDenominator::Literal || j != i {
                den += (cosine_loop(z.row(i), z.row(j)) / tau).exp();
            }
        }
        acc -= (pos / den).ln();
    }
    acc / n as f64
}

fn oracle_checks(report: &mut Report, opts: &Options) -> Result<()> {
    let mut worst = [0.0f64; 8];
    for seed in 0..opts.seeds {
        let mut rng = Rng::new(1000 + seed);
        let b = 2 + (seed as usize % 7);
        let (u, v) = (random(b, 3, &mut rng), random(b, 3, &mut rng));
        let x = random(1, 3, &mut rng);
        for cfg in sdd_variants() {
            let got = kde_density(x.row(0), &u, &cfg)?;
            worst[0] = worst[0].max((got - kappa_loop(x.row(0), &u, &cfg)).abs());
            let got = gamma_divergence(&u, &v, &cfg)?;
            worst[1] = worst[1].max((got - gamma_loop(&u, &v, &cfg)).abs());
        }
        worst[2] = worst[2].max((batch_variance(&u)? - spread_loop(&u)).abs());
        let specs = mmd_specs().to_vec();
        let logits = vec![rng.normal(), rng.normal()];
        let mk = MultiKernel::new(specs.clone(), logits.clone())?;
        for (i, est) in [MmdEstimator::Biased, MmdEstimator::Unbiased]
            .into_iter()
            .enumerate()
        {
            let got = mkmmd_loss_with(&mk, &u, &v, est)?;
            worst[3 + i] = worst[3 + i].max((got - mmd_loop(&specs, &logits, &u, &v, est)).abs());
        }
        let tau = rng.uniform_range(0.05, 1.0);
        worst[5] =
            worst[5].max((clip_contrastive_loss(&u, &v, tau)? - clip_loop(&u, &v, tau)).abs());
        for (i, d) in [SslDenominator::Literal, SslDenominator::SimClr]
            .into_iter()
            .enumerate()
        {
            let got = ssl_loss(&u, &v, tau, d)?;
            worst[6 + i] = worst[6 + i].max((got - ssl_loop(&u, &v, tau, d)).abs());
        }
    }
    let names = [
        "oracle kde density",
        "oracle gamma divergence",
        "oracle batch spread",
        "oracle mkmmd biased",
        "oracle mkmmd unbiased",
        "oracle clip contrastive",
        "oracle ssl literal",
        "oracle ssl simclr",
    ];
    for (name, w) in names.into_iter().zip(worst) {
        report.push(Group::Oracle, name, w, ORACLE_TOL);
    }
    Ok(())
}

fn invariant_checks(report: &mut Report, opts: &Options) -> Result<()> {
    let mk = MultiKernel::uniform(mmd_specs().to_vec())?;
    let (mut self_sdd, mut self_mmd, mut sym, mut shift): (f64, f64, f64, f64) =
        (0.0, 0.0, 0.0, 0.0);
    for seed in 0..opts.seeds {
        let mut rng = Rng::new(2000 + seed);
        let (u, v) = (random(8, 4, &mut rng), random(8, 4, &mut rng));
        for cfg in sdd_variants() {
            self_sdd = self_sdd.max(sdd_loss(&u, &u, &cfg)?.abs());
            sym = sym.max((sdd_loss(&u, &v, &cfg)? - sdd_loss(&v, &u, &cfg)?).abs());
        }
        self_mmd = self_mmd.max(mkmmd_loss_with(&mk, &u, &u, MmdEstimator::Biased)?.abs());
        let offset: Vec<f64> = (0..4).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
        let moved = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |i, k| m[(i, k)] + offset[k]);
        let cfg = SddConfig::default();
        shift =
            shift.max((sdd_loss(&moved(&u), &moved(&v), &cfg)? - sdd_loss(&u, &v, &cfg)?).abs());
    }
    report.push(Group::Invariant, "sdd(U, U) is exactly zero", self_sdd, 0.0);
    report.push(Group::Invariant, "mkmmd(U, U) vanishes", self_mmd, 1e-12);
    report.push(
        Group::Invariant,
        "sdd symmetric in its arguments",
        sym,
        1e-12,
    );
    report.push(
        Group::Invariant,
        "sdd invariant to joint translation",
        shift,
        1e-9,
    );

    let kl = SddConfig::default();
    let mut most_negative: f64 = 0.0;
    let mut rng = Rng::new(3000);
    for _ in 0..1000 {
        let (u, v) = (random(8, 4, &mut rng), random(8, 4, &mut rng));
        most_negative = most_negative.max(-sdd_loss(&u, &v, &kl)?);
    }
    report.push(
        Group::Invariant,
        "kl sdd non-negative (1000 pairs)",
        most_negative,
        1e-10,
    );

    let mut rng = Rng::new(4000);
    let count = |b: usize, rng: &mut Rng| -> Result<u64> {
        let (u, v) = (random(b, 4, rng), random(b, 4, rng));
        Ok(sdd_loss_counted(&u, &v, &kl)?.1)
    };
    let ratio = count(128, &mut rng)? as f64 / count(64, &mut rng)? as f64;
    report.push(
        Group::Complexity,
        "sdd evaluations B=128 / B=64",
        ratio,
        4.5,
    );
    Ok(())
}

/// Runs every check; the report says which ones failed.
pub fn run(opts: &Options) -> Result<Report> {
    let mut report = Report::default();
    gradient_checks(&mut report, opts)?;
    oracle_checks(&mut report, opts)?;
    invariant_checks(&mut report, opts)?;
    Ok(report)
}
