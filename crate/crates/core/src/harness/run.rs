//! Experiment dispatch and artifact writing.
//!
//! Every run writes into its output directory:
//! `config.resolved.toml`, one or more CSV files and `summary.json`.
//! CSV contents depend only on the config; `summary.json` also carries the
//! wall-clock time.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{default_alignment, perturbation_eval_toy, spectral_delta_study, update_rank, overlap_table, PerturbationSpec};
use crate::error::{LiftError, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorRecord};
use crate::harness::config::{ExperimentConfig, ExperimentKind, StrategyKind};
use crate::harness::metrics::{MetricsLog, RunMetadata};
use crate::linalg::{Matrix, RankSelection};
use crate::masking::{resolve_budget, BudgetSpec, SelectionStrategy};
use crate::rng::derive_seed;
use crate::toymodel::{backward, make_finetune_dataset, make_pretrain_dataset, pretrain, run_pipeline, ToyNet};

/// Threshold multiplier used for update ranks in summaries.
pub const UPDATE_RANK_MULTIPLIER: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    /// Files written, relative to `output_dir`.
    pub files: Vec<String>,
    pub summary: Value,
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| LiftError::io(&dir, e))?;
        Ok(Writer { dir, files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| LiftError::io(&p, e))
    }

    fn metrics(&mut self, name: &str, log: &MetricsLog) -> Result<()> {
        let p = self.path(name);
        log.write_csv(&p)
    }

    fn table<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| LiftError::io(&p, e))
    }

    fn checkpoint(&mut self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        let p = self.path(name);
        save_checkpoint(ckpt, &p)
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        let p = self.path(name);
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(&p, text + "\n").map_err(|e| LiftError::io(&p, e))
    }
}

/// Runs the configured experiment in [`ExperimentConfig::resolved_output_dir`].
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    run_in(cfg, &cfg.resolved_output_dir())
}

/// Runs the configured experiment, writing into `dir`.
pub fn run_in(cfg: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut out = Writer::new(dir.to_path_buf())?;
    out.text("config.resolved.toml", &cfg.to_toml()?)?;
    let body = match cfg.experiment {
        ExperimentKind::ToyPipeline => toy_pipeline(cfg, &mut out)?,
        ExperimentKind::SpectralStudy => spectral_study(cfg, &mut out)?,
        ExperimentKind::PerturbEval => perturb_eval(cfg, &mut out)?,
        ExperimentKind::MaskInspect => mask_inspect_config(cfg, &mut out)?,
    };
    let metadata = RunMetadata {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    let summary = json!({
        "experiment": cfg.experiment,
        "metadata": metadata,
        "results": body,
    });
    out.json("summary.json", &summary)?;
    Ok(RunReport {
        output_dir: out.dir,
        files: out.files,
        summary,
    })
}

fn net_checkpoint(w: &Matrix, a: &Matrix, states: &[Option<crate::optimizer::SparseOptimizerState>]) -> Checkpoint {
    let state = |i: usize| states.get(i).cloned().flatten();
    Checkpoint {
        tensors: vec![
            TensorRecord {
                name: "W".into(),
                matrix: w.clone(),
                state: state(0),
            },
            TensorRecord {
                name: "a".into(),
                matrix: a.clone(),
                state: state(1),
            },
        ],
    }
}

fn toy_pipeline(cfg: &ExperimentConfig, out: &mut Writer) -> Result<Value> {
    let settings = cfg.pipeline_settings();
    let result = run_pipeline(&settings)?;
    let pre = &result.pretrained;
    out.metrics("metrics_pretrain.csv", &result.pretrain_log)?;
    out.checkpoint("pretrained.ckpt", &net_checkpoint(&pre.w, &pre.a, &[]))?;
    let mut methods = Vec::new();
    for (spec, m) in settings.methods.iter().zip(&result.methods) {
        out.metrics(&format!("metrics_{}.csv", m.name), &m.log)?;
        out.checkpoint(&format!("checkpoint_{}.ckpt", m.name), &net_checkpoint(&m.params[0], &m.params[1], &m.states))?;
        let w = &m.params[0];
        let alignment = default_alignment(&pre.w, w)?;
        methods.push(json!({
            "name": m.name,
            "strategy": spec.strategy.label(),
            "k_w": resolve_budget(spec.budget, pre.w.rows(), pre.w.cols())?,
            "initial_val_loss": m.log.series("val_loss").first().map(|p| p.1),
            "best_val_loss": m.best_val_loss,
            "best_step": m.best_step,
            "steps_run": m.steps_run,
            "final_spectral_norm": m.final_spectral_norm,
            "update_rank_w": update_rank(&pre.w, w, UPDATE_RANK_MULTIPLIER)?,
            "alignment_w": alignment,
        }));
    }
    Ok(json!({
        "pretrain": {
            "best_val_loss": result.pretrain_val_loss,
            "epochs": result.pretrain_log.series("loss").len(),
        },
        "methods": methods,
    }))
}

fn study_strategy(kind: StrategyKind, lift_rank: usize, seed: u64) -> SelectionStrategy {
    kind.build(RankSelection::largest(lift_rank), seed)
}

fn spectral_study(cfg: &ExperimentConfig, out: &mut Writer) -> Result<Value> {
    let ss = &cfg.spectral_study;
    let specs: Vec<PerturbationSpec> = ss
        .strategies
        .iter()
        .map(|&kind| {
            let seed = derive_seed(cfg.seed, &format!("spectral-{kind:?}"));
            PerturbationSpec {
                strategy: study_strategy(kind, ss.lift_rank, seed),
                budget: BudgetSpec::LoraRankEquivalent(ss.lora_rank),
                noise_std: ss.noise_std,
                seed: derive_seed(cfg.seed, &format!("spectral-noise-{kind:?}")),
            }
        })
        .collect();
    let dims: Vec<(usize, usize)> = ss.dims.iter().map(|d| (d[0], d[1])).collect();
    for &(m, n) in &dims {
        if ss.lift_rank > m.min(n) {
            return Err(LiftError::Config(format!(
                "spectral_study.lift_rank: {} exceeds min dimension of {m}x{n}",
                ss.lift_rank
            )));
        }
    }
    let rows = spectral_delta_study(&dims, &specs, ss.trials, cfg.seed)?;
    out.table("spectral_study.csv", &rows)?;
    Ok(serde_json::to_value(&rows)?)
}

fn perturb_eval(cfg: &ExperimentConfig, out: &mut Writer) -> Result<Value> {
    let settings = cfg.pipeline_settings();
    let (net, log, _) = pretrain(&settings)?;
    out.metrics("metrics_pretrain.csv", &log)?;
    let data = make_pretrain_dataset(
        settings.n_pre,
        settings.d,
        derive_seed(settings.seed, "pretrain-data"),
        settings.val_fraction,
    )?;
    let pe = &cfg.perturb_eval;
    let mut specs = Vec::new();
    for s in 0..pe.seeds as u64 {
        for &kind in &pe.strategies {
            specs.push(PerturbationSpec {
                strategy: study_strategy(kind, pe.lift_rank, derive_seed(cfg.seed ^ s, &format!("perturb-{kind:?}"))),
                budget: BudgetSpec::LoraRankEquivalent(pe.lora_rank),
                noise_std: pe.noise_std,
                seed: derive_seed(cfg.seed ^ s, "perturb-noise"),
            });
        }
    }
    let rows = perturbation_eval_toy(&net, &data, &specs)?;
    out.table("perturb_eval.csv", &rows)?;
    Ok(serde_json::to_value(&rows)?)
}

/// Pairwise mask overlaps between strategies on one matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub tensor: String,
    pub k: usize,
    pub strategies: Vec<String>,
    pub table: Vec<Vec<f64>>,
}

impl OverlapReport {
    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        let width = self.strategies.iter().map(|s| s.len()).max().unwrap_or(0).max(8);
        let mut s = format!("tensor {} k={}\n{:width$}", self.tensor, self.k, "");
        for name in &self.strategies {
            s.push_str(&format!(" {name:>width$}"));
        }
        s.push('\n');
        for (name, row) in self.strategies.iter().zip(&self.table) {
            s.push_str(&format!("{name:width$}"));
            for v in row {
                s.push_str(&format!(" {v:>width$.4}"));
            }
            s.push('\n');
        }
        s
    }

    fn rows(&self) -> Vec<OverlapRow> {
        let mut rows = Vec::new();
        for (a, row) in self.strategies.iter().zip(&self.table) {
            for (b, v) in self.strategies.iter().zip(row) {
                rows.push(OverlapRow {
                    a: a.clone(),
                    b: b.clone(),
                    overlap: *v,
                });
            }
        }
        rows
    }
}

#[derive(Serialize)]
struct OverlapRow {
    a: String,
    b: String,
    overlap: f64,
}

/// Overlap report for the named tensor of a checkpoint. Gradient-based
/// strategies need `grad`.
pub fn mask_inspect(
    w: &Matrix,
    grad: Option<&Matrix>,
    tensor: &str,
    strategies: &[(String, SelectionStrategy)],
    k: usize,
) -> Result<OverlapReport> {
    let list: Vec<SelectionStrategy> = strategies.iter().map(|s| s.1).collect();
    Ok(OverlapReport {
        tensor: tensor.to_string(),
        k,
        strategies: strategies.iter().map(|s| s.0.clone()).collect(),
        table: overlap_table(w, grad, &list, k)?,
    })
}

/// Loads `tensor` from the checkpoint at `path`.
pub fn checkpoint_tensor(path: &Path, tensor: &str) -> Result<Matrix> {
    let ckpt = load_checkpoint(path)?;
    ckpt.get(tensor)
        .map(|t| t.matrix.clone())
        .ok_or_else(|| {
            let names: Vec<&str> = ckpt.tensors.iter().map(|t| t.name.as_str()).collect();
            LiftError::Precondition(format!("no tensor `{tensor}` in {} (has {names:?})", path.display()))
        })
}

fn mask_inspect_config(cfg: &ExperimentConfig, out: &mut Writer) -> Result<Value> {
    let mi = &cfg.mask_inspect;
    let (w, grad) = match &mi.checkpoint {
        Some(path) => (checkpoint_tensor(Path::new(path), &mi.tensor)?, None),
        None => {
            let settings = cfg.pipeline_settings();
            let (net, log, _) = pretrain(&settings)?;
            out.metrics("metrics_pretrain.csv", &log)?;
            let data = make_finetune_dataset(
                settings.n_ft,
                settings.d,
                derive_seed(settings.seed, "finetune-data"),
                settings.val_fraction,
            )?;
            let (x, y) = data.train();
            let g = backward(&net, &x, &y)?;
            let ToyNet { w, a, .. } = net;
            match mi.tensor.as_str() {
                "W" => (w, Some(g.w)),
                "a" => (a, Some(g.a)),
                other => {
                    return Err(LiftError::Config(format!(
                        "mask_inspect.tensor: the toy network has tensors W and a, not `{other}`"
                    )))
                }
            }
        }
    };
    let k = resolve_budget(BudgetSpec::LoraRankEquivalent(mi.lora_rank), w.rows(), w.cols())?;
    let rank = mi.lift_rank.min(w.rows().min(w.cols()));
    let strategies: Vec<(String, SelectionStrategy)> = mi
        .strategies
        .iter()
        .map(|&kind| {
            let s = study_strategy(kind, rank, derive_seed(cfg.seed, &format!("inspect-{kind:?}")));
            (s.label().to_string(), s)
        })
        .collect();
    let report = mask_inspect(&w, grad.as_ref(), &mi.tensor, &strategies, k)?;
    out.table("mask_overlap.csv", &report.rows())?;
    Ok(serde_json::to_value(&report)?)
}
