//! Two-layer regression testbed `f(X) = σ(XW)a`.
//!
//! A network is pre-trained on one synthetic task, then fine-tuned on a
//! second, much smaller task with each parameter-selection method in turn.
//! Every run is full-batch, one optimizer step per epoch, with validation
//! based early stopping that restores the best parameters.

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::harness::metrics::MetricsLog;
use crate::linalg::{power_iteration, Matrix};
use crate::masking::{BudgetSpec, SelectionStrategy};
use crate::optimizer::{dense_train, train_loop, AdamHyperparams, Control, Objective, SparseOptimizerState};
use crate::rng::{derive_seed, LiftRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative; ReLU uses 0 at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    /// d × h
    pub w: Matrix,
    /// h × 1
    pub a: Matrix,
    pub activation: Activation,
}

impl ToyNet {
    /// `W ~ N(0, 1/d)`, `a ~ N(0, 1/h)`.
    pub fn init(d: usize, h: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = LiftRng::new(seed);
        let sw = 1.0 / (d as f64).sqrt();
        let sa = 1.0 / (h as f64).sqrt();
        let w = Matrix::from_fn(d, h, |_, _| sw * rng.normal());
        let a = Matrix::from_fn(h, 1, |_, _| sa * rng.normal());
        ToyNet { w, a, activation }
    }

    pub fn from_params(params: &[Matrix], activation: Activation) -> Result<Self> {
        match params {
            [w, a] if w.cols() == a.rows() && a.cols() == 1 => Ok(ToyNet {
                w: w.clone(),
                a: a.clone(),
                activation,
            }),
            _ => Err(LiftError::Shape("toy network needs [W (d×h), a (h×1)]".into())),
        }
    }

    pub fn params(&self) -> Vec<Matrix> {
        vec![self.w.clone(), self.a.clone()]
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.cols()
    }
}

pub fn forward(net: &ToyNet, x: &Matrix) -> Result<Matrix> {
    Ok(forward_parts(net, x)?.2)
}

/// (pre-activations XW, activations σ(XW), predictions)
fn forward_parts(net: &ToyNet, x: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    if x.cols() != net.input_dim() {
        return Err(LiftError::Shape(format!(
            "input has {} features, network expects {}",
            x.cols(),
            net.input_dim()
        )));
    }
    let z = x.matmul(&net.w)?;
    let act = net.activation;
    let h = z.map(|v| act.apply(v));
    let f = h.matmul(&net.a)?;
    Ok((z, h, f))
}

fn check_targets(x: &Matrix, y: &Matrix) -> Result<()> {
    if y.rows() != x.rows() || y.cols() != 1 {
        return Err(LiftError::Shape(format!(
            "targets {}x{} for {} samples",
            y.rows(),
            y.cols(),
            x.rows()
        )));
    }
    Ok(())
}

/// Mean squared error of `net` on `(x, y)`.
pub fn mse_loss(net: &ToyNet, x: &Matrix, y: &Matrix) -> Result<f64> {
    check_targets(x, y)?;
    let f = forward(net, x)?;
    Ok(mse(&f, y))
}

fn mse(f: &Matrix, y: &Matrix) -> f64 {
    let n = f.rows() as f64;
    f.as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Matrix,
    pub a: Matrix,
    pub loss: f64,
}

/// MSE loss and its analytic gradients.
pub fn backward(net: &ToyNet, x: &Matrix, y: &Matrix) -> Result<Gradients> {
    check_targets(x, y)?;
    let (z, h, f) = forward_parts(net, x)?;
    let n = x.rows() as f64;
    let loss = mse(&f, y);
    let df = f.sub(y)?.scale(2.0 / n);
    let da = h.t_matmul(&df)?;
    let dh = df.matmul_t(&net.a)?;
    let act = net.activation;
    let dz_data: Vec<f64> = dh
        .as_slice()
        .iter()
        .zip(z.as_slice())
        .map(|(g, zv)| g * act.derivative(*zv))
        .collect();
    let dz = Matrix::new(dh.rows(), dh.cols(), dz_data)?;
    let dw = x.t_matmul(&dz)?;
    Ok(Gradients { w: dw, a: da, loss })
}

/// Inputs, targets and a disjoint train/validation split of the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    pub x: Matrix,
    pub y: Matrix,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl RegressionDataset {
    fn take(&self, idx: &[usize]) -> (Matrix, Matrix) {
        let d = self.x.cols();
        let mut xs = Vec::with_capacity(idx.len() * d);
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            xs.extend_from_slice(self.x.row(i));
            ys.push(self.y.get(i, 0));
        }
        (
            Matrix::new(idx.len(), d, xs).expect("rows of a valid matrix"),
            Matrix::new(idx.len(), 1, ys).expect("rows of a valid matrix"),
        )
    }

    pub fn train(&self) -> (Matrix, Matrix) {
        self.take(&self.train_idx)
    }

    pub fn validation(&self) -> (Matrix, Matrix) {
        self.take(&self.val_idx)
    }
}

/// `Σ_{j<32} x_j + 0.1 Σ_{32≤j<64} sin(x_j)`
pub fn pretrain_target(row: &[f64]) -> f64 {
    row[..32].iter().sum::<f64>() + 0.1 * row[32..64].iter().map(|v| v.sin()).sum::<f64>()
}

/// `0.2 x₆₄ x₆₅ x₆₆ + 0.1 sin(x₆₇ x₆₈)`
pub fn finetune_target(row: &[f64]) -> f64 {
    0.2 * row[64] * row[65] * row[66] + 0.1 * (row[67] * row[68]).sin()
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

fn make_dataset(
    n: usize,
    d: usize,
    seed: u64,
    val_fraction: f64,
    role: &str,
    target: fn(&[f64]) -> f64,
) -> Result<RegressionDataset> {
    if n < 2 {
        return Err(LiftError::Precondition(format!("{role} dataset needs n ≥ 2, got {n}")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(LiftError::Precondition(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut rng = LiftRng::new(derive_seed(seed, &format!("{role}-x")));
    let x = Matrix::random_normal(n, d, &mut rng);
    let y = Matrix::from_fn(n, 1, |i, _| target(x.row(i)));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    LiftRng::new(derive_seed(seed, &format!("{role}-split"))).shuffle(&mut order);
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(RegressionDataset {
        x,
        y,
        train_idx,
        val_idx,
    })
}

/// Standard-normal inputs under `seed`, targets from [`pretrain_target`].
pub fn make_pretrain_dataset(n: usize, d: usize, seed: u64, val_fraction: f64) -> Result<RegressionDataset> {
    if d < 64 {
        return Err(LiftError::Precondition(format!("pre-training data needs d ≥ 64, got {d}")));
    }
    make_dataset(n, d, seed, val_fraction, "pretrain", pretrain_target)
}

/// Standard-normal inputs under `seed`, targets from [`finetune_target`].
pub fn make_finetune_dataset(n: usize, d: usize, seed: u64, val_fraction: f64) -> Result<RegressionDataset> {
    if d < 69 {
        return Err(LiftError::Precondition(format!("fine-tuning data needs d ≥ 69, got {d}")));
    }
    make_dataset(n, d, seed, val_fraction, "finetune", finetune_target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopConfig {
    pub patience: u64,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            patience: 20,
            min_delta: 0.0,
        }
    }
}

/// Full-batch objective on a training split with validation tracking.
///
/// The training loops log `loss` at step t as the training loss before update
/// t. After every step this logs `val_loss` and `spectral_norm` (of W), keeps the
/// best parameters seen so far and stops once validation loss has not
/// improved by `min_delta` for `patience` consecutive evaluations.
pub struct ToyObjective {
    activation: Activation,
    x_train: Matrix,
    y_train: Matrix,
    x_val: Matrix,
    y_val: Matrix,
    early_stop: Option<EarlyStopConfig>,
    best: Option<(f64, u64, Vec<Matrix>)>,
    since_best: u64,
    spectral_start: Option<Vec<f64>>,
    log_spectral: bool,
}

const SPECTRAL_TOL: f64 = 1e-10;
const SPECTRAL_MAX_ITER: usize = 100_000;

impl ToyObjective {
    pub fn new(data: &RegressionDataset, activation: Activation, early_stop: Option<EarlyStopConfig>) -> Self {
        let (x_train, y_train) = data.train();
        let (x_val, y_val) = data.validation();
        ToyObjective {
            activation,
            x_train,
            y_train,
            x_val,
            y_val,
            early_stop,
            best: None,
            since_best: 0,
            spectral_start: None,
            log_spectral: true,
        }
    }

    pub fn without_spectral_log(mut self) -> Self {
        self.log_spectral = false;
        self
    }

    pub fn validation_loss(&self, params: &[Matrix]) -> Result<f64> {
        let net = ToyNet::from_params(params, self.activation)?;
        mse_loss(&net, &self.x_val, &self.y_val)
    }

    pub fn train_loss(&self, params: &[Matrix]) -> Result<f64> {
        let net = ToyNet::from_params(params, self.activation)?;
        mse_loss(&net, &self.x_train, &self.y_train)
    }

    fn spectral(&mut self, w: &Matrix) -> Result<f64> {
        let pi = power_iteration(w, self.spectral_start.as_deref(), SPECTRAL_TOL, SPECTRAL_MAX_ITER)?;
        self.spectral_start = Some(pi.vector);
        Ok(pi.value)
    }

    /// Records step-0 metrics and seeds the best-parameter tracker.
    pub fn record_initial(&mut self, params: &[Matrix], log: &mut MetricsLog) -> Result<()> {
        let val = self.validation_loss(params)?;
        log.record(0, "val_loss", val)?;
        if self.log_spectral {
            let s = self.spectral(&params[0])?;
            log.record(0, "spectral_norm", s)?;
        }
        self.best = Some((val, 0, params.to_vec()));
        self.since_best = 0;
        Ok(())
    }

    /// Best (validation loss, step, parameters) seen so far.
    pub fn best(&self) -> Option<&(f64, u64, Vec<Matrix>)> {
        self.best.as_ref()
    }
}

impl Objective for ToyObjective {
    fn evaluate(&mut self, params: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
        let net = ToyNet::from_params(params, self.activation)?;
        let g = backward(&net, &self.x_train, &self.y_train)?;
        Ok((g.loss, vec![g.w, g.a]))
    }

    fn after_step(&mut self, step: u64, params: &[Matrix], log: &mut MetricsLog) -> Result<Control> {
        let val = self.validation_loss(params)?;
        log.record(step, "val_loss", val)?;
        if self.log_spectral {
            let s = self.spectral(&params[0])?;
            log.record(step, "spectral_norm", s)?;
        }
        let improved = match &self.best {
            None => true,
            Some((best, _, _)) => val < best - self.early_stop.map_or(0.0, |e| e.min_delta),
        };
        if improved {
            self.best = Some((val, step, params.to_vec()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        match self.early_stop {
            Some(cfg) if self.since_best >= cfg.patience => Ok(Control::Stop),
            _ => Ok(Control::Continue),
        }
    }
}

/// One fine-tuning method: a selection strategy and its per-matrix budget.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub name: String,
    pub strategy: SelectionStrategy,
    pub budget: BudgetSpec,
}

impl MethodSpec {
    pub fn full() -> Self {
        MethodSpec {
            name: "full".into(),
            strategy: SelectionStrategy::WeightMagnitude,
            budget: BudgetSpec::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub n_pre: usize,
    pub n_ft: usize,
    pub d: usize,
    pub h: usize,
    pub val_fraction: f64,
    pub activation: Activation,
    /// `total_steps` is the epoch cap.
    pub pretrain: AdamHyperparams,
    pub finetune: AdamHyperparams,
    pub early_stop: EarlyStopConfig,
    /// Fine-tune the output head `a` as well as `W`.
    pub train_head: bool,
    pub methods: Vec<MethodSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub name: String,
    pub log: MetricsLog,
    /// Best-validation parameters `[W, a]` restored after fine-tuning.
    pub params: Vec<Matrix>,
    pub states: Vec<Option<SparseOptimizerState>>,
    pub best_val_loss: f64,
    pub best_step: u64,
    pub steps_run: u64,
    /// Spectral norm of the restored W.
    pub final_spectral_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub pretrained: ToyNet,
    pub pretrain_log: MetricsLog,
    pub pretrain_val_loss: f64,
    pub methods: Vec<MethodResult>,
}

/// Pre-trains on the pre-training task with dense AdamW, then fine-tunes a
/// copy of the pre-trained network with every configured method.
pub fn pretrain(settings: &PipelineSettings) -> Result<(ToyNet, MetricsLog, f64)> {
    let data = make_pretrain_dataset(settings.n_pre, settings.d, derive_seed(settings.seed, "pretrain-data"), settings.val_fraction)?;
    let init = ToyNet::init(settings.d, settings.h, settings.activation, derive_seed(settings.seed, "init"));
    let mut objective =
        ToyObjective::new(&data, settings.activation, Some(settings.early_stop)).without_spectral_log();
    let mut log = MetricsLog::new();
    let params = init.params();
    objective.record_initial(&params, &mut log)?;
    let (_, train_log, _) = dense_train(params, &[true, true], &mut objective, &settings.pretrain)?;
    log.append(train_log)?;
    let (best_val, _, best) = objective.best().cloned().expect("initial record sets best");
    Ok((ToyNet::from_params(&best, settings.activation)?, log, best_val))
}

pub fn finetune(
    net: &ToyNet,
    data: &RegressionDataset,
    method: &MethodSpec,
    settings: &PipelineSettings,
) -> Result<MethodResult> {
    let mut objective = ToyObjective::new(data, net.activation, Some(settings.early_stop));
    let mut log = MetricsLog::new();
    let params = net.params();
    objective.record_initial(&params, &mut log)?;
    let outcome = train_loop(
        params,
        &[true, settings.train_head],
        &mut objective,
        &method.strategy,
        method.budget,
        &settings.finetune,
    )?;
    log.append(outcome.log)?;
    let (best_val_loss, best_step, best) = objective.best().cloned().expect("initial record sets best");
    let final_spectral_norm = power_iteration(&best[0], None, SPECTRAL_TOL, SPECTRAL_MAX_ITER)?.value;
    Ok(MethodResult {
        name: method.name.clone(),
        log,
        params: best,
        states: outcome.states,
        best_val_loss,
        best_step,
        steps_run: outcome.steps_run,
        final_spectral_norm,
    })
}

pub fn run_pipeline(settings: &PipelineSettings) -> Result<PipelineResult> {
    let (pretrained, pretrain_log, pretrain_val_loss) = pretrain(settings)?;
    let data = make_finetune_dataset(settings.n_ft, settings.d, derive_seed(settings.seed, "finetune-data"), settings.val_fraction)?;
    let methods = settings
        .methods
        .iter()
        .map(|m| finetune(&pretrained, &data, m, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineResult {
        pretrained,
        pretrain_log,
        pretrain_val_loss,
        methods,
    })
}
