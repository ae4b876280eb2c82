//! AdamW restricted to a mask, with first/second moments stored as compact
//! length-k vectors, plus the periodic mask refresh that carries moments over
//! to positions that stay selected.
//!
//! ```text
//! for t = 1..=T:
//!     g  = ∇f(θ)
//!     if t % interval == 0: M_old = M; M = select(θ, g); move m, v from M_old to M
//!     m  = β1 m + (1 - β1) g[M]
//!     v  = β2 v + (1 - β2) g[M]²
//!     θ[M] -= α (m / (1 - β1^t)) / (sqrt(v / (1 - β2^t)) + ε) + α λ θ[M]
//! ```
//!
//! Entries outside the mask are never written.

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::harness::metrics::MetricsLog;
use crate::linalg::Matrix;
use crate::masking::{resolve_budget, select_mask, BudgetSpec, Mask, SelectionStrategy};
use crate::rng::mix64;

/// How often the mask is recomputed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskInterval {
    Every(u64),
    /// Keep the initial mask for the whole run.
    Never,
}

impl MaskInterval {
    pub fn is_refresh_step(&self, t: u64) -> bool {
        match self {
            MaskInterval::Every(n) => *n > 0 && t.is_multiple_of(*n),
            MaskInterval::Never => false,
        }
    }
}

impl Serialize for MaskInterval {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MaskInterval::Every(n) => s.serialize_u64(*n),
            MaskInterval::Never => s.serialize_str("never"),
        }
    }
}

impl<'de> Deserialize<'de> for MaskInterval {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = MaskInterval;

            fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str("a step count or \"never\"")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                Ok(MaskInterval::Every(v))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Self::Value, E> {
                u64::try_from(v)
                    .map(MaskInterval::Every)
                    .map_err(|_| E::custom("update_mask_interval must be ≥ 1"))
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                match v {
                    "never" => Ok(MaskInterval::Never),
                    other => Err(E::custom(format!(
                        "expected a step count or \"never\", got \"{other}\""
                    ))),
                }
            }
        }
        d.deserialize_any(Visitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to masked entries only.
    pub weight_decay: f64,
    pub update_mask_interval: MaskInterval,
    pub total_steps: u64,
}

impl Default for AdamHyperparams {
    fn default() -> Self {
        AdamHyperparams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            update_mask_interval: MaskInterval::Every(200),
            total_steps: 1000,
        }
    }
}

impl AdamHyperparams {
    /// Checks ranges; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LiftError::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad(format!("beta1 must be in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("beta2 must be in [0, 1), got {}", self.beta2));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if self.update_mask_interval == MaskInterval::Every(0) {
            return bad("update_mask_interval must be ≥ 1".into());
        }
        Ok(())
    }

    fn bias_corrections(&self, t: u64) -> (f64, f64) {
        let t = i32::try_from(t).unwrap_or(i32::MAX);
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }
}

/// One AdamW update of a single entry; returns the new parameter value.
#[inline]
fn adamw_entry(theta: f64, g: f64, m: &mut f64, v: &mut f64, hp: &AdamHyperparams, bc: (f64, f64)) -> f64 {
    *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
    *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
    let m_hat = *m / bc.0;
    let v_hat = *v / bc.1;
    theta - hp.lr * m_hat / (v_hat.sqrt() + hp.eps) - hp.lr * hp.weight_decay * theta
}

/// Adam moments for the entries of one mask, in mask order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOptimizerState {
    mask: Mask,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl SparseOptimizerState {
    pub fn new(mask: Mask) -> Self {
        let k = mask.k();
        SparseOptimizerState {
            mask,
            m: vec![0.0; k],
            v: vec![0.0; k],
            step: 0,
        }
    }

    pub fn from_parts(mask: Mask, m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<Self> {
        if m.len() != mask.k() || v.len() != mask.k() {
            return Err(LiftError::Shape(format!(
                "moment lengths {} / {} do not match mask k={}",
                m.len(),
                v.len(),
                mask.k()
            )));
        }
        if let Some(i) = v.iter().position(|x| x.is_nan() || *x < 0.0 || !x.is_finite()) {
            return Err(LiftError::Precondition(format!(
                "second moment at slot {i} must be finite and ≥ 0, got {}",
                v[i]
            )));
        }
        if let Some(i) = m.iter().position(|x| !x.is_finite()) {
            return Err(LiftError::Precondition(format!(
                "first moment at slot {i} is not finite"
            )));
        }
        Ok(SparseOptimizerState { mask, m, v, step })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Entries of `g` at the mask positions, in mask order.
pub fn compact(g: &Matrix, mask: &Mask) -> Result<Vec<f64>> {
    if g.shape() != mask.shape() {
        return Err(LiftError::Shape(format!(
            "compact: matrix {}x{} vs mask {}x{}",
            g.rows(),
            g.cols(),
            mask.rows(),
            mask.cols()
        )));
    }
    let data = g.as_slice();
    Ok(mask.positions().iter().map(|&p| data[p]).collect())
}

/// Inverse of [`compact`]: a dense matrix that is zero off the mask.
pub fn scatter(values: &[f64], mask: &Mask) -> Result<Matrix> {
    if values.len() != mask.k() {
        return Err(LiftError::Shape(format!(
            "scatter: {} values for a mask with k={}",
            values.len(),
            mask.k()
        )));
    }
    let mut out = Matrix::zeros(mask.rows(), mask.cols());
    let data = out.as_mut_slice();
    for (&p, &x) in mask.positions().iter().zip(values) {
        data[p] = x;
    }
    Matrix::new(mask.rows(), mask.cols(), out.into_vec())
}

fn check_finite(g: &Matrix) -> Result<()> {
    if let Some(p) = g.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(LiftError::NonFinite {
            what: "gradient",
            row: p / g.cols(),
            col: p % g.cols(),
            value: g.as_slice()[p],
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    /// Sum of squares of the gradient entries the optimizer consumed.
    pub masked_grad_sq: f64,
    /// Sum of squares of the parameter change.
    pub update_sq: f64,
}

/// One masked AdamW step. Unmasked entries of `theta` are not touched.
pub fn step(
    state: &mut SparseOptimizerState,
    theta: &mut Matrix,
    g: &Matrix,
    hp: &AdamHyperparams,
) -> Result<StepStats> {
    if theta.shape() != state.mask.shape() || g.shape() != state.mask.shape() {
        return Err(LiftError::Shape(format!(
            "step: theta {}x{}, gradient {}x{}, mask {}x{}",
            theta.rows(),
            theta.cols(),
            g.rows(),
            g.cols(),
            state.mask.rows(),
            state.mask.cols()
        )));
    }
    if state.step >= hp.total_steps {
        return Err(LiftError::Precondition(format!(
            "step {} would exceed total_steps {}",
            state.step + 1,
            hp.total_steps
        )));
    }
    check_finite(g)?;
    state.step += 1;
    let bc = hp.bias_corrections(state.step);
    let grads = g.as_slice();
    let params = theta.as_mut_slice();
    let mut stats = StepStats::default();
    for (slot, &p) in state.mask.positions().iter().enumerate() {
        let gi = grads[p];
        let old = params[p];
        let new = adamw_entry(old, gi, &mut state.m[slot], &mut state.v[slot], hp, bc);
        if !new.is_finite() {
            return Err(LiftError::NonFinite {
                what: "parameter after update",
                row: p / state.mask.cols(),
                col: p % state.mask.cols(),
                value: new,
            });
        }
        params[p] = new;
        stats.masked_grad_sq += gi * gi;
        stats.update_sq += (new - old) * (new - old);
    }
    Ok(stats)
}

/// Moves the state onto `new_mask`: moments at positions in both masks are
/// kept, new positions start at zero, dropped positions are discarded.
pub fn transfer_state(state: &mut SparseOptimizerState, new_mask: Mask) -> Result<()> {
    if new_mask.shape() != state.mask.shape() {
        return Err(LiftError::Shape("refresh changed the mask shape".into()));
    }
    let old = state.mask.positions();
    let mut m = vec![0.0; new_mask.k()];
    let mut v = vec![0.0; new_mask.k()];
    let mut i = 0;
    for (slot, &p) in new_mask.positions().iter().enumerate() {
        while i < old.len() && old[i] < p {
            i += 1;
        }
        if i < old.len() && old[i] == p {
            m[slot] = state.m[i];
            v[slot] = state.v[i];
        }
    }
    state.mask = new_mask;
    state.m = m;
    state.v = v;
    Ok(())
}

/// Recomputes the mask from the current parameters (and gradient, for
/// strategies that need one) and carries the moments over.
pub fn refresh_mask(
    state: &mut SparseOptimizerState,
    theta: &Matrix,
    grad: Option<&Matrix>,
    strategy: &SelectionStrategy,
    k: usize,
) -> Result<()> {
    let new_mask = select_mask(theta, grad, strategy, k)?;
    transfer_state(state, new_mask)
}

/// Plain AdamW over every entry of one matrix.
#[derive(Debug, Clone)]
pub struct DenseAdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl DenseAdamW {
    pub fn new(rows: usize, cols: usize) -> Self {
        DenseAdamW {
            m: vec![0.0; rows * cols],
            v: vec![0.0; rows * cols],
            step: 0,
        }
    }

    pub fn step(&mut self, theta: &mut Matrix, g: &Matrix, hp: &AdamHyperparams) -> Result<StepStats> {
        if theta.shape() != g.shape() || theta.len() != self.m.len() {
            return Err(LiftError::Shape("dense step: shape mismatch".into()));
        }
        check_finite(g)?;
        self.step += 1;
        let bc = hp.bias_corrections(self.step);
        let cols = theta.cols();
        let params = theta.as_mut_slice();
        let mut stats = StepStats::default();
        for (p, &gi) in g.as_slice().iter().enumerate() {
            let old = params[p];
            let new = adamw_entry(old, gi, &mut self.m[p], &mut self.v[p], hp, bc);
            if !new.is_finite() {
                return Err(LiftError::NonFinite {
                    what: "parameter after update",
                    row: p / cols,
                    col: p % cols,
                    value: new,
                });
            }
            params[p] = new;
            stats.masked_grad_sq += gi * gi;
            stats.update_sq += (new - old) * (new - old);
        }
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Supplies loss and gradients to the training loops.
pub trait Objective {
    /// Loss and one gradient per parameter matrix, at `params`.
    fn evaluate(&mut self, params: &[Matrix]) -> Result<(f64, Vec<Matrix>)>;

    /// Called after every completed step; may log extra metrics or stop early.
    fn after_step(&mut self, _step: u64, _params: &[Matrix], _log: &mut MetricsLog) -> Result<Control> {
        Ok(Control::Continue)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Vec<Matrix>,
    /// One state per matrix; `None` for frozen matrices (and when no step ran).
    pub states: Vec<Option<SparseOptimizerState>>,
    pub log: MetricsLog,
    pub steps_run: u64,
}

fn checked_grads(params: &[Matrix], grads: &[Matrix]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(LiftError::Shape(format!(
            "objective returned {} gradients for {} matrices",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(LiftError::Shape(format!(
                "gradient {i} is {}x{}, parameter is {}x{}",
                g.rows(),
                g.cols(),
                p.rows(),
                p.cols()
            )));
        }
    }
    Ok(())
}

fn log_step(log: &mut MetricsLog, t: u64, loss: f64, grad_sq: f64, stats: StepStats) -> Result<()> {
    log.record(t, "loss", loss)?;
    log.record(t, "grad_norm", grad_sq.sqrt())?;
    log.record(t, "masked_grad_norm", stats.masked_grad_sq.sqrt())?;
    log.record(t, "update_norm", stats.update_sq.sqrt())
}

/// Strategy seed for matrix `index` at its `refresh`-th mask computation, so
/// random selections differ across matrices and refreshes.
fn strategy_for(strategy: &SelectionStrategy, index: usize, refresh: u64) -> SelectionStrategy {
    strategy.reseeded(|seed| mix64(seed ^ mix64(((index as u64) << 32) ^ refresh)))
}

/// A budget covering every entry selects everything, whatever the strategy.
fn training_mask(theta: &Matrix, grad: &Matrix, strategy: &SelectionStrategy, k: usize) -> Result<Mask> {
    if k == theta.len() {
        return Ok(Mask::full(theta.rows(), theta.cols()));
    }
    select_mask(theta, Some(grad), strategy, k)
}

/// Sparse fine-tuning of `params` for `hp.total_steps` steps.
///
/// Each trainable matrix gets its own mask of size `budget` (resolved against
/// its shape). Masks are built at the first step from the initial parameters
/// and that step's gradient, then rebuilt whenever `t` is a multiple of the
/// refresh interval. A budget covering the whole matrix skips selection.
/// Frozen matrices are never written.
pub fn train_loop(
    mut params: Vec<Matrix>,
    trainable: &[bool],
    objective: &mut dyn Objective,
    strategy: &SelectionStrategy,
    budget: BudgetSpec,
    hp: &AdamHyperparams,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if trainable.len() != params.len() {
        return Err(LiftError::Shape(format!(
            "{} trainable flags for {} matrices",
            trainable.len(),
            params.len()
        )));
    }
    let budgets = params
        .iter()
        .zip(trainable)
        .map(|(p, &on)| if on { resolve_budget(budget, p.rows(), p.cols()) } else { Ok(0) })
        .collect::<Result<Vec<_>>>()?;
    let mut states: Vec<Option<SparseOptimizerState>> = vec![None; params.len()];
    let mut refreshes = vec![0u64; params.len()];
    let mut log = MetricsLog::new();
    let mut steps_run = 0;

    for t in 1..=hp.total_steps {
        let (loss, grads) = objective.evaluate(&params)?;
        checked_grads(&params, &grads)?;
        let mut grad_sq = 0.0;
        let mut stats = StepStats::default();
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            check_finite(&grads[i])?;
            grad_sq += grads[i].as_slice().iter().map(|g| g * g).sum::<f64>();
            match states[i].as_mut() {
                None => {
                    let s = strategy_for(strategy, i, 0);
                    let mask = training_mask(&params[i], &grads[i], &s, budgets[i])?;
                    let mut state = SparseOptimizerState::new(mask);
                    state.step = t - 1;
                    states[i] = Some(state);
                }
                Some(state) if hp.update_mask_interval.is_refresh_step(t) => {
                    refreshes[i] += 1;
                    let s = strategy_for(strategy, i, refreshes[i]);
                    let mask = training_mask(&params[i], &grads[i], &s, budgets[i])?;
                    transfer_state(state, mask)?;
                }
                Some(_) => {}
            }
            let state = states[i].as_mut().expect("initialized above");
            let s = step(state, &mut params[i], &grads[i], hp)?;
            stats.masked_grad_sq += s.masked_grad_sq;
            stats.update_sq += s.update_sq;
        }
        log_step(&mut log, t, loss, grad_sq, stats)?;
        steps_run = t;
        if objective.after_step(t, &params, &mut log)? == Control::Stop {
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        states,
        log,
        steps_run,
    })
}

/// Dense AdamW counterpart of [`train_loop`] with identical logging.
pub fn dense_train(
    mut params: Vec<Matrix>,
    trainable: &[bool],
    objective: &mut dyn Objective,
    hp: &AdamHyperparams,
) -> Result<(Vec<Matrix>, MetricsLog, u64)> {
    hp.validate()?;
    if trainable.len() != params.len() {
        return Err(LiftError::Shape(format!(
            "{} trainable flags for {} matrices",
            trainable.len(),
            params.len()
        )));
    }
    let mut opts: Vec<DenseAdamW> = params.iter().map(|p| DenseAdamW::new(p.rows(), p.cols())).collect();
    let mut log = MetricsLog::new();
    let mut steps_run = 0;
    for t in 1..=hp.total_steps {
        let (loss, grads) = objective.evaluate(&params)?;
        checked_grads(&params, &grads)?;
        let mut grad_sq = 0.0;
        let mut stats = StepStats::default();
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            check_finite(&grads[i])?;
            grad_sq += grads[i].as_slice().iter().map(|g| g * g).sum::<f64>();
            let s = opts[i].step(&mut params[i], &grads[i], hp)?;
            stats.masked_grad_sq += s.masked_grad_sq;
            stats.update_sq += s.update_sq;
        }
        log_step(&mut log, t, loss, grad_sq, stats)?;
        steps_run = t;
        if objective.after_step(t, &params, &mut log)? == Control::Stop {
            break;
        }
    }
    Ok((params, log, steps_run))
}
