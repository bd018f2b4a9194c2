use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use semalign::data::{self, Dataset};
use semalign::losses::Divergence;
use semalign::sampling::{sweep, write_sweep_csv, SweepRow};
use semalign::trainer::{
    evaluate_retrieval, init_model, train_with, write_history, Checkpoint, MetricRecord, Mode,
    RetrievalReport,
};

use crate::config::{RunConfig, ECHO_FILE};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Command-line adjustments applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub mode: Option<Mode>,
    pub sdd_rd: Option<bool>,
    pub sdd_div: Option<Divergence>,
}

impl Overrides {
    /// Applies the overrides, mode preset first so explicit SDD flags win.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(mode) = self.mode {
            let t = cfg.train_config().with_mode(mode);
            cfg.absorb(&t);
        }
        if let Some(rd) = self.sdd_rd {
            cfg.objective.sdd.use_relative_distance = rd;
        }
        if let Some(div) = self.sdd_div {
            cfg.objective.sdd.divergence = div;
        }
        cfg.validate()
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

/// Generates the synthetic dataset described by `[data]` and writes it to `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let d = data::generate(&cfg.data)?;
    ensure_parent(out)?;
    data::save(&d, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(d)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
    pub history: Vec<MetricRecord>,
    pub sampled_with_replacement: bool,
}

/// Trains on the dataset at `dataset` (or one generated from `[data]`) and
/// writes the config echo, the metric history and checkpoints into `run_dir`.
pub fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>, run_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let d = match dataset {
        Some(p) => data::load(p).with_context(|| format!("loading dataset {}", p.display()))?,
        None => data::generate(&cfg.data)?,
    };
    let tc = cfg.train_config();
    cfg.write_echo(run_dir)?;
    let hash = cfg.hash()?;
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    let metrics = run_dir.join(METRICS_FILE);
    let final_checkpoint = run_dir.join(FINAL_CHECKPOINT);
    let mut out = BufWriter::new(File::create(&metrics)?);

    let model = init_model(&d, &tc)?;
    let outcome = train_with(&d, model, &tc, |rec, state| {
        write_history(std::slice::from_ref(rec), &mut out)?;
        let ckpt = Checkpoint::from_state(state, hash.clone());
        ckpt.save(&ckpt_dir.join(format!("epoch-{:04}.json", rec.epoch)))?;
        if rec.epoch == tc.epochs {
            ckpt.save(&final_checkpoint)?;
        }
        log::info!(
            "epoch {:>4} step {:>6} total {:.5} tau {:.4}",
            rec.epoch,
            rec.step,
            rec.l_total,
            rec.tau
        );
        Ok(())
    })
    .context("training failed")?;
    out.flush()?;
    Ok(TrainSummary {
        run_dir: run_dir.to_path_buf(),
        metrics,
        final_checkpoint,
        history: outcome.history,
        sampled_with_replacement: outcome.sampled_with_replacement,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Empty means the `ks` of the run config, if one is found.
    pub ks: Vec<usize>,
    /// Run config to verify the checkpoint against. Defaults to the echo in
    /// the checkpoint's run directory.
    pub config: Option<PathBuf>,
    pub force: bool,
}

fn find_echo(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .take(2)
        .map(|dir| dir.join(ECHO_FILE))
        .find(|p| p.is_file())
}

/// Recall@k on the dataset's test pairs in both directions.
pub fn cmd_eval(args: &EvalArgs) -> Result<RetrievalReport> {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let cfg_path = args.config.clone().or_else(|| find_echo(&args.checkpoint));
    let cfg = match &cfg_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?)
        }
        None => None,
    };
    match (&cfg, &cfg_path) {
        (Some(c), Some(p)) => {
            let hash = c.hash()?;
            if hash != ckpt.config_hash {
                let msg = format!(
                    "checkpoint config hash {} does not match {} ({})",
                    ckpt.config_hash,
                    p.display(),
                    hash
                );
                if !args.force {
                    bail!("{msg}; pass --force to evaluate anyway");
                }
                log::warn!("{msg}");
            }
        }
        _ if args.force => log::warn!("no run config found; skipping the config hash check"),
        _ => bail!("no run config found next to the checkpoint; pass --config or --force"),
    }
    let ks = if !args.ks.is_empty() {
        args.ks.clone()
    } else {
        cfg.map(|c| c.train.ks).unwrap_or_else(|| vec![1, 5, 10])
    };
    let d = data::load(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    if d.test_a.rows() == 0 {
        bail!("dataset has no test pairs");
    }
    if ckpt.model.input_widths() != d.widths() {
        bail!(
            "checkpoint expects input widths {:?}, dataset has {:?}",
            ckpt.model.input_widths(),
            d.widths()
        );
    }
    let (u, v) = ckpt.model.forward(&d.test_a, &d.test_b)?;
    Ok(evaluate_retrieval(&u, &v, &ks)?)
}

#[derive(Serialize)]
struct JsonReport<'a> {
    queries: usize,
    #[serde(flatten)]
    report: &'a RetrievalReport,
}

/// Writes the report as pretty JSON or as a `k,a_to_b,b_to_a` table.
pub fn write_report<W: Write>(
    report: &RetrievalReport,
    queries: usize,
    format: ReportFormat,
    mut out: W,
) -> Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &JsonReport { queries, report })?;
            writeln!(out)?;
        }
        ReportFormat::Csv => {
            writeln!(out, "k,a_to_b,b_to_a")?;
            for (i, k) in report.ks.iter().enumerate() {
                writeln!(out, "{k},{},{}", report.a_to_b[i], report.b_to_a[i])?;
            }
        }
    }
    Ok(())
}

/// Runs the batch-size sweep of `[sweep]` and writes it as CSV to `out`,
/// with the sweep settings (trial count included) in `<out>.json`.
pub fn cmd_sample_analysis(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let rows = sweep(&cfg.sweep)?;
    ensure_parent(out)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_sweep_csv(&rows, BufWriter::new(file))?;
    fs::write(
        data::sidecar_path(out),
        serde_json::to_vec_pretty(&cfg.sweep)?,
    )?;
    Ok(rows)
}
