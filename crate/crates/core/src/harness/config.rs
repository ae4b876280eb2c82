//! TOML experiment configuration.
//!
//! Every section and key is optional; omitted values take the documented
//! defaults. Unknown keys, type mismatches and out-of-range values are
//! rejected with a message naming the offending key.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LiftError, Result};
use crate::linalg::{RankSelection, RankVariant};
use crate::masking::{BudgetSpec, SelectionStrategy};
use crate::optimizer::AdamHyperparams;
use crate::rng::derive_seed;
use crate::toymodel::{Activation, EarlyStopConfig, MethodSpec, PipelineSettings};

/// Overrides the directory that relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_ENV: &str = "LIFT_OUTPUT_ROOT";

pub const DEFAULT_LORA_RANK: usize = 8;
pub const DEFAULT_LIFT_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    ToyPipeline,
    SpectralStudy,
    PerturbEval,
    MaskInspect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Every entry trainable.
    Full,
    Lift,
    LiftStructured,
    WeightMagnitude,
    GradientMagnitude,
    Movement,
    Random,
}

impl StrategyKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(StrategyKind::Full),
            "lift" => Ok(StrategyKind::Lift),
            "lift_structured" => Ok(StrategyKind::LiftStructured),
            "weight_magnitude" => Ok(StrategyKind::WeightMagnitude),
            "gradient_magnitude" => Ok(StrategyKind::GradientMagnitude),
            "movement" => Ok(StrategyKind::Movement),
            "random" => Ok(StrategyKind::Random),
            other => Err(LiftError::Config(format!(
                "unknown strategy `{other}` (expected full, lift, lift_structured, weight_magnitude, gradient_magnitude, movement or random)"
            ))),
        }
    }

    fn uses_rank(self) -> bool {
        matches!(self, StrategyKind::Lift | StrategyKind::LiftStructured)
    }

    /// Concrete strategy. `Full` maps to weight magnitude, which under a full
    /// budget selects every entry.
    pub fn build(self, rank: RankSelection, seed: u64) -> SelectionStrategy {
        match self {
            StrategyKind::Full | StrategyKind::WeightMagnitude => SelectionStrategy::WeightMagnitude,
            StrategyKind::Lift => SelectionStrategy::Lift(rank),
            StrategyKind::LiftStructured => SelectionStrategy::LiftStructured(rank),
            StrategyKind::GradientMagnitude => SelectionStrategy::GradientMagnitude,
            StrategyKind::Movement => SelectionStrategy::MovementScore,
            StrategyKind::Random => SelectionStrategy::Random { seed },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankSelectionKind {
    #[default]
    Largest,
    Smallest,
    Random,
    Hybrid,
}

impl RankSelectionKind {
    pub fn build(self, rank: usize, seed: u64) -> RankSelection {
        let variant = match self {
            RankSelectionKind::Largest => RankVariant::Largest,
            RankSelectionKind::Smallest => RankVariant::Smallest,
            RankSelectionKind::Random => RankVariant::Random { seed },
            RankSelectionKind::Hybrid => RankVariant::Hybrid,
        };
        RankSelection { variant, rank }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_pre: usize,
    pub n_ft: usize,
    pub d: usize,
    pub h: usize,
    pub val_fraction: f64,
    pub activation: Activation,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_pre: 5000,
            n_ft: 100,
            d: 512,
            h: 128,
            val_fraction: 0.2,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Fine-tune the output head `a` alongside W, under the same strategy.
    pub train_head: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { train_head: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    pub strategy: StrategyKind,
    /// Rank of the approximation for the LIFT strategies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default)]
    pub rank_selection: RankSelectionKind,
    /// Seed for random selection; derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl MethodConfig {
    pub fn new(name: &str, strategy: StrategyKind) -> Self {
        MethodConfig {
            name: name.into(),
            strategy,
            rank: None,
            rank_selection: RankSelectionKind::Largest,
            seed: None,
            lora_rank: None,
            k: None,
        }
    }

    pub fn budget(&self) -> BudgetSpec {
        match (self.strategy, self.k, self.lora_rank) {
            (StrategyKind::Full, _, _) => BudgetSpec::Full,
            (_, Some(k), _) => BudgetSpec::Exact(k),
            (_, None, Some(rho)) => BudgetSpec::LoraRankEquivalent(rho),
            (_, None, None) => BudgetSpec::LoraRankEquivalent(DEFAULT_LORA_RANK),
        }
    }

    pub fn to_spec(&self, master_seed: u64) -> MethodSpec {
        let seed = self
            .seed
            .unwrap_or_else(|| derive_seed(master_seed, &format!("method-{}", self.name)));
        let rank = self
            .rank_selection
            .build(self.rank.unwrap_or(DEFAULT_LIFT_RANK), seed);
        MethodSpec {
            name: self.name.clone(),
            strategy: self.strategy.build(rank, seed),
            budget: self.budget(),
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        let valid_name = !self.name.is_empty()
            && self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !valid_name {
            return Err(config_err(
                &format!("{key}.name"),
                "must be non-empty and use only ASCII letters, digits, `_` or `-`",
            ));
        }
        if self.k.is_some() && self.lora_rank.is_some() {
            return Err(config_err(&format!("{key}.k"), "give either k or lora_rank, not both"));
        }
        if self.strategy == StrategyKind::Full && (self.k.is_some() || self.lora_rank.is_some()) {
            return Err(config_err(&format!("{key}.strategy"), "full fine-tuning takes no budget"));
        }
        if self.k == Some(0) {
            return Err(config_err(&format!("{key}.k"), "must be ≥ 1"));
        }
        if self.lora_rank == Some(0) {
            return Err(config_err(&format!("{key}.lora_rank"), "must be ≥ 1"));
        }
        if let Some(r) = self.rank {
            if !self.strategy.uses_rank() {
                return Err(config_err(&format!("{key}.rank"), "only the lift strategies take a rank"));
            }
            if r == 0 {
                return Err(config_err(&format!("{key}.rank"), "must be ≥ 1"));
            }
        }
        if self.strategy.uses_rank()
            && self.rank_selection == RankSelectionKind::Hybrid
            && self.rank.unwrap_or(DEFAULT_LIFT_RANK) < 2
        {
            return Err(config_err(&format!("{key}.rank"), "hybrid rank selection needs rank ≥ 2"));
        }
        Ok(())
    }
}

fn default_methods() -> Vec<MethodConfig> {
    vec![
        MethodConfig::new("full", StrategyKind::Full),
        MethodConfig::new("lift", StrategyKind::Lift),
        MethodConfig::new("weight_magnitude", StrategyKind::WeightMagnitude),
        MethodConfig::new("gradient_magnitude", StrategyKind::GradientMagnitude),
        MethodConfig::new("random", StrategyKind::Random),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralStudyConfig {
    pub dims: Vec<[usize; 2]>,
    pub trials: usize,
    pub noise_std: f64,
    pub lora_rank: usize,
    pub lift_rank: usize,
    pub strategies: Vec<StrategyKind>,
}

impl Default for SpectralStudyConfig {
    fn default() -> Self {
        SpectralStudyConfig {
            dims: vec![[256, 256], [512, 512], [1024, 1024]],
            trials: 10,
            noise_std: 0.1,
            lora_rank: 64,
            lift_rank: 64,
            strategies: vec![StrategyKind::Lift, StrategyKind::Random, StrategyKind::WeightMagnitude],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbEvalConfig {
    pub noise_std: f64,
    /// Number of noise seeds per strategy.
    pub seeds: usize,
    pub lora_rank: usize,
    pub lift_rank: usize,
    pub strategies: Vec<StrategyKind>,
}

impl Default for PerturbEvalConfig {
    fn default() -> Self {
        PerturbEvalConfig {
            noise_std: 0.05,
            seeds: 5,
            lora_rank: DEFAULT_LORA_RANK,
            lift_rank: DEFAULT_LIFT_RANK,
            strategies: vec![StrategyKind::Lift, StrategyKind::Random, StrategyKind::WeightMagnitude],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskInspectConfig {
    /// Checkpoint to inspect; the freshly pre-trained toy network when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub tensor: String,
    pub lora_rank: usize,
    pub lift_rank: usize,
    pub strategies: Vec<StrategyKind>,
}

impl Default for MaskInspectConfig {
    fn default() -> Self {
        MaskInspectConfig {
            checkpoint: None,
            tensor: "W".into(),
            lora_rank: DEFAULT_LORA_RANK,
            lift_rank: DEFAULT_LIFT_RANK,
            strategies: vec![
                StrategyKind::Lift,
                StrategyKind::WeightMagnitude,
                StrategyKind::Random,
            ],
        }
    }
}

fn default_pretrain() -> AdamHyperparams {
    AdamHyperparams {
        total_steps: 1000,
        ..AdamHyperparams::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetConfig,
    /// Dense AdamW pre-training; `total_steps` caps the epochs.
    pub pretrain: AdamHyperparams,
    /// Fine-tuning optimizer shared by all methods.
    pub optimizer: AdamHyperparams,
    pub early_stop: EarlyStopConfig,
    pub finetune: FinetuneConfig,
    pub methods: Vec<MethodConfig>,
    pub spectral_study: SpectralStudyConfig,
    pub perturb_eval: PerturbEvalConfig,
    pub mask_inspect: MaskInspectConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::ToyPipeline,
            seed: 0,
            output_dir: "runs/default".into(),
            dataset: DatasetConfig::default(),
            pretrain: default_pretrain(),
            optimizer: AdamHyperparams::default(),
            early_stop: EarlyStopConfig::default(),
            finetune: FinetuneConfig::default(),
            methods: default_methods(),
            spectral_study: SpectralStudyConfig::default(),
            perturb_eval: PerturbEvalConfig::default(),
            mask_inspect: MaskInspectConfig::default(),
        }
    }
}

fn config_err(key: &str, msg: &str) -> LiftError {
    LiftError::Config(format!("{key}: {msg}"))
}

fn hyperparams_err(section: &str, e: LiftError) -> LiftError {
    match e {
        LiftError::Config(msg) | LiftError::Precondition(msg) => LiftError::Config(format!("{section}.{msg}")),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(config_err("seed", "must fit in a signed 64-bit integer"));
        }
        if self.output_dir.is_empty() {
            return Err(config_err("output_dir", "must not be empty"));
        }
        let ds = &self.dataset;
        if ds.d < 69 {
            return Err(config_err("dataset.d", "must be ≥ 69 (the fine-tuning target reads column 68)"));
        }
        if ds.h == 0 {
            return Err(config_err("dataset.h", "must be ≥ 1"));
        }
        if ds.n_pre < 2 {
            return Err(config_err("dataset.n_pre", "must be ≥ 2"));
        }
        if ds.n_ft < 2 {
            return Err(config_err("dataset.n_ft", "must be ≥ 2"));
        }
        if !(ds.val_fraction > 0.0 && ds.val_fraction < 1.0) {
            return Err(config_err("dataset.val_fraction", "must be in (0, 1)"));
        }
        self.pretrain.validate().map_err(|e| hyperparams_err("pretrain", e))?;
        self.optimizer.validate().map_err(|e| hyperparams_err("optimizer", e))?;
        if self.early_stop.patience == 0 {
            return Err(config_err("early_stop.patience", "must be ≥ 1"));
        }
        if !(self.early_stop.min_delta >= 0.0 && self.early_stop.min_delta.is_finite()) {
            return Err(config_err("early_stop.min_delta", "must be a finite value ≥ 0"));
        }
        if self.experiment == ExperimentKind::ToyPipeline && self.methods.is_empty() {
            return Err(config_err("methods", "toy-pipeline needs at least one method"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            m.validate(&format!("methods[{i}]"))?;
            if self.methods[..i].iter().any(|o| o.name == m.name) {
                return Err(config_err(&format!("methods[{i}].name"), "duplicate method name"));
            }
        }
        let ss = &self.spectral_study;
        if ss.dims.iter().any(|d| d[0] == 0 || d[1] == 0) {
            return Err(config_err("spectral_study.dims", "every dimension must be ≥ 1"));
        }
        if ss.trials == 0 {
            return Err(config_err("spectral_study.trials", "must be ≥ 1"));
        }
        check_noise("spectral_study.noise_std", ss.noise_std)?;
        check_positive("spectral_study.lora_rank", ss.lora_rank)?;
        check_positive("spectral_study.lift_rank", ss.lift_rank)?;
        check_strategies("spectral_study.strategies", &ss.strategies, false)?;
        let pe = &self.perturb_eval;
        check_noise("perturb_eval.noise_std", pe.noise_std)?;
        check_positive("perturb_eval.seeds", pe.seeds)?;
        check_positive("perturb_eval.lora_rank", pe.lora_rank)?;
        check_positive("perturb_eval.lift_rank", pe.lift_rank)?;
        check_strategies("perturb_eval.strategies", &pe.strategies, true)?;
        let mi = &self.mask_inspect;
        check_positive("mask_inspect.lora_rank", mi.lora_rank)?;
        check_positive("mask_inspect.lift_rank", mi.lift_rank)?;
        check_strategies("mask_inspect.strategies", &mi.strategies, true)?;
        Ok(())
    }

    pub fn pipeline_settings(&self) -> PipelineSettings {
        PipelineSettings {
            n_pre: self.dataset.n_pre,
            n_ft: self.dataset.n_ft,
            d: self.dataset.d,
            h: self.dataset.h,
            val_fraction: self.dataset.val_fraction,
            activation: self.dataset.activation,
            pretrain: self.pretrain,
            finetune: self.optimizer,
            early_stop: self.early_stop,
            train_head: self.finetune.train_head,
            methods: self.methods.iter().map(|m| m.to_spec(self.seed)).collect(),
            seed: self.seed,
        }
    }

    /// Canonical TOML with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LiftError::Config(format!("cannot serialize config: {e}")))
    }

    /// Hex SHA-256 of [`Self::to_toml`].
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// `output_dir`, resolved against `$LIFT_OUTPUT_ROOT` when that is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(&self.output_dir),
            _ => PathBuf::from(&self.output_dir),
        }
    }
}

fn check_noise(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(key, "must be a finite value > 0"))
    }
}

fn check_positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(config_err(key, "must be ≥ 1"))
    } else {
        Ok(())
    }
}

fn check_strategies(key: &str, s: &[StrategyKind], gradient_ok: bool) -> Result<()> {
    if s.is_empty() {
        return Err(config_err(key, "must list at least one strategy"));
    }
    for (i, k) in s.iter().enumerate() {
        if *k == StrategyKind::Full {
            return Err(config_err(&format!("{key}[{i}]"), "full selects every entry; not a selection strategy here"));
        }
        if !gradient_ok && matches!(k, StrategyKind::GradientMagnitude | StrategyKind::Movement) {
            return Err(config_err(&format!("{key}[{i}]"), "gradient-based strategies need a gradient"));
        }
    }
    Ok(())
}

/// Parses and validates a TOML document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| LiftError::Config(e.to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        if path.is_empty() || path == "." {
            LiftError::Config(msg)
        } else {
            LiftError::Config(format!("{path}: {msg}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| LiftError::io(path, e))?;
    parse_config(&text)
}
