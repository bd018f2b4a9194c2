//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Multi-seed runs use seeds 0..5, with the dataset
//! seed equal to the training seed.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use semalign::data::generate;
use semalign::losses::Divergence;
use semalign::sampling::{sweep, ReferenceDistribution, SweepConfig};
use semalign::stats::wilcoxon_greater;
use semalign::trainer::{init_model, train, Mode};
use semalign_cli::selfcheck::{self, Group, Report};
use semalign_cli::{cmd_train, Overrides, RunConfig};

const SEEDS: u64 = 5;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn group_verdict(
    name: &'static str,
    report: &Report,
    group: Group,
    elapsed: Duration,
    budget: Duration,
) -> Verdict {
    let checks: Vec<_> = report.group(group).collect();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({:.3e} > {:.1e})", c.name, c.measured, c.tolerance))
        .collect();
    let worst = checks
        .iter()
        .map(|c| format!("{}={:.2e}", c.name, c.measured))
        .collect::<Vec<_>>()
        .join("; ");
    let in_time = elapsed <= budget;
    let detail = if failed.is_empty() {
        format!(
            "{} checks within tolerance [{worst}], {:.1}s",
            checks.len(),
            elapsed.as_secs_f64()
        )
    } else {
        format!("failed: {}", failed.join(", "))
    };
    Verdict {
        name,
        pass: failed.is_empty() && !checks.is_empty() && in_time,
        detail,
    }
}

fn sampling_study() -> anyhow::Result<Verdict> {
    let t0 = Instant::now();
    let cfg = SweepConfig {
        trials: 50,
        dims: vec![2, 16, 64],
        reference: ReferenceDistribution::Uniform,
        ..SweepConfig::default()
    };
    let rows = sweep(&cfg)?;
    let elapsed = t0.elapsed();
    let mut pass = elapsed < Duration::from_secs(120);
    let mut parts = Vec::new();
    for &dim in &cfg.dims {
        let col: Vec<_> = rows.iter().filter(|r| r.dim == dim).collect();
        let rises: Vec<f64> = col
            .windows(2)
            .filter(|w| w[1].mean_d > w[0].mean_d)
            .map(|w| (w[1].mean_d - w[0].mean_d) / w[0].mean_d)
            .collect();
        let monotone = rises.is_empty() || (rises.len() == 1 && rises[0] < 0.02);
        let at = |s: usize| {
            col.iter()
                .find(|r| r.size == s)
                .map(|r| r.mean_d)
                .unwrap_or(f64::NAN)
        };
        let ratio = at(64) / at(2);
        pass &= monotone && ratio <= 0.05;
        parts.push(format!(
            "dim {dim}: {} inversions, D(64)/D(2) = {ratio:.4}",
            rises.len()
        ));
    }
    Ok(Verdict {
        name: "sampling-size study",
        pass,
        detail: format!("{}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()),
    })
}

/// Final-epoch test recall at `k`, averaged over both directions.
fn final_recall(mut cfg: RunConfig, ov: Overrides, seed: u64, k: usize) -> anyhow::Result<f64> {
    cfg.seed = seed;
    cfg.data.seed = seed;
    ov.apply(&mut cfg)?;
    let data = generate(&cfg.data)?;
    let tc = cfg.train_config();
    let out = train(&data, init_model(&data, &tc)?, &tc)?;
    let last = out.history.last().expect("at least one record");
    Ok(last.mean_recall(k).expect("k is evaluated"))
}

fn per_seed(cfg: &RunConfig, ov: &Overrides, k: usize) -> anyhow::Result<Vec<f64>> {
    (0..SEEDS)
        .map(|s| final_recall(cfg.clone(), ov.clone(), s, k))
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn fmt(x: &[f64]) -> String {
    x.iter()
        .map(|v| format!("{v:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn with_mode(mode: Mode) -> Overrides {
    Overrides {
        mode: Some(mode),
        ..Overrides::default()
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("acceptance suite aborted: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<bool> {
    let mut verdicts = Vec::new();
    let mut report_line = |v: Verdict| {
        println!(
            "{} {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
        verdicts.push(v.pass);
    };

    let t0 = Instant::now();
    let report = selfcheck::run(&selfcheck::Options {
        seeds: 10,
        inject_fault: false,
    })?;
    let checked = t0.elapsed();
    report_line(group_verdict(
        "gradient correctness",
        &report,
        Group::Gradient,
        checked,
        Duration::from_secs(60),
    ));
    report_line(group_verdict(
        "oracle equivalence",
        &report,
        Group::Oracle,
        checked,
        Duration::from_secs(60),
    ));
    report_line(group_verdict(
        "identity and nullity battery",
        &report,
        Group::Invariant,
        checked,
        Duration::from_secs(60),
    ));

    report_line(sampling_study()?);

    let base = RunConfig::default();
    let t0 = Instant::now();
    let clip = per_seed(&base, &with_mode(Mode::Clip), 1)?;
    let full = per_seed(&base, &with_mode(Mode::SetClip), 1)?;
    let diffs: Vec<f64> = full.iter().zip(&clip).map(|(f, c)| f - c).collect();
    let w = wilcoxon_greater(&diffs)?;
    let elapsed = t0.elapsed();
    report_line(Verdict {
        name: "semi-supervised benefit",
        pass: mean(&full) > mean(&clip) && w.p_value < 0.1 && elapsed < Duration::from_secs(600),
        detail: format!(
            "recall@1 setclip {:.4} [{}] vs clip {:.4} [{}]; Wilcoxon W+ = {}, p = {:.4}; {:.0}s",
            mean(&full),
            fmt(&full),
            mean(&clip),
            fmt(&clip),
            w.w_plus,
            w.p_value,
            elapsed.as_secs_f64()
        ),
    });

    let mut unpaired_only = base.clone();
    unpaired_only.data.n_pairs = 0;
    unpaired_only.data.m_a = 1000;
    unpaired_only.data.m_b = 1000;
    unpaired_only.data.test_pairs = 200;
    let unsup = per_seed(&unpaired_only, &with_mode(Mode::Unsup), 5)?;
    let chance = 5.0 / 200.0;
    report_line(Verdict {
        name: "zero-paired regime",
        pass: mean(&unsup) >= 3.0 * chance,
        detail: format!(
            "unsup recall@5 {:.4} [{}] vs required {:.4} (3x chance {chance})",
            mean(&unsup),
            fmt(&unsup),
            3.0 * chance
        ),
    });

    let rd_off = per_seed(
        &base,
        &Overrides {
            mode: Some(Mode::SetClip),
            sdd_rd: Some(false),
            ..Overrides::default()
        },
        1,
    )?;
    let mse = per_seed(
        &base,
        &Overrides {
            mode: Some(Mode::SetClip),
            sdd_div: Some(Divergence::Mse),
            ..Overrides::default()
        },
        1,
    )?;
    let mut ordering = [
        ("rd-on/kl", mean(&full)),
        ("rd-off/kl", mean(&rd_off)),
        ("rd-on/mse", mean(&mse)),
    ];
    ordering.sort_by(|a, b| b.1.total_cmp(&a.1));
    let ordering = ordering
        .iter()
        .map(|(n, m)| format!("{n} {m:.4}"))
        .collect::<Vec<_>>()
        .join(" > ");
    let best_ablation = mean(&rd_off).max(mean(&mse));
    report_line(Verdict {
        name: "ablation direction",
        pass: mean(&full) >= best_ablation - 0.01,
        detail: format!(
            "seeds 0-{}: {ordering}; per seed rd-on/kl [{}], rd-off/kl [{}], rd-on/mse [{}]; \
             full minus best ablation {:+.4} (hard limit -0.01)",
            SEEDS - 1,
            fmt(&full),
            fmt(&rd_off),
            fmt(&mse),
            mean(&full) - best_ablation
        ),
    });

    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig {
        seed: 7,
        ..RunConfig::default()
    };
    cfg.train.epochs = 10;
    let a = cmd_train(&cfg, None, &dir.path().join("a"))?;
    let b = cmd_train(&cfg, None, &dir.path().join("b"))?;
    let (ha, hb) = (fs::read(&a.metrics)?, fs::read(&b.metrics)?);
    let same_ckpt = fs::read(&a.final_checkpoint)? == fs::read(&b.final_checkpoint)?;
    report_line(Verdict {
        name: "determinism",
        pass: ha == hb && !ha.is_empty() && same_ckpt,
        detail: format!(
            "metric histories {} ({} bytes, {} records), final checkpoints {}",
            if ha == hb { "identical" } else { "differ" },
            ha.len(),
            a.history.len(),
            if same_ckpt { "identical" } else { "differ" }
        ),
    });

    report_line(group_verdict(
        "sdd complexity",
        &report,
        Group::Complexity,
        checked,
        Duration::from_secs(60),
    ));

    let failed = verdicts.iter().filter(|p| !**p).count();
    println!("{} criteria, {} failed", verdicts.len(), failed);
    Ok(failed == 0)
}
