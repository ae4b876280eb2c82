//! Diagnostics: masked noise perturbation, spectral/Frobenius deltas,
//! right-singular-subspace alignment and update rank.

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::linalg::{frobenius_norm, numerical_rank, singular_values, svd, Matrix};
use crate::masking::{overlap_ratio, resolve_budget, select_mask, BudgetSpec, Mask, SelectionStrategy};
use crate::rng::{derive_seed, LiftRng};
use crate::toymodel::{backward, mse_loss, RegressionDataset, ToyNet};

/// Gaussian noise of standard deviation `noise_std` on the entries chosen by
/// `strategy` under `budget`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub strategy: SelectionStrategy,
    pub budget: BudgetSpec,
    pub noise_std: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(LiftError::Precondition(format!(
                "noise_std must be a finite positive number, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// `w + N` with `N` supported on the selected mask. Draws are taken in mask
/// order from a generator seeded with `spec.seed`.
pub fn perturb(w: &Matrix, grad: Option<&Matrix>, spec: &PerturbationSpec) -> Result<(Matrix, Mask)> {
    spec.validate()?;
    let k = resolve_budget(spec.budget, w.rows(), w.cols())?;
    let mask = select_mask(w, grad, &spec.strategy, k)?;
    let mut rng = LiftRng::new(spec.seed);
    let mut out = w.clone();
    let data = out.as_mut_slice();
    for &p in mask.positions() {
        data[p] += spec.noise_std * rng.normal();
    }
    Ok((out, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDeltaRow {
    pub rows: usize,
    pub cols: usize,
    pub strategy: String,
    pub k: usize,
    pub trials: usize,
    pub mean_spectral_delta: f64,
    pub std_spectral_delta: f64,
    pub mean_frobenius_delta: f64,
    pub std_frobenius_delta: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// For every shape and spec: draw `trials` standard-normal matrices, perturb
/// each with every spec, and average the change in spectral and Frobenius
/// norm. Trial `i` uses matrix seed `derive_seed(master_seed ^ i, "spectral-matrix")`
/// and noise seed `spec.seed ^ i`; all specs see the same matrices.
/// Gradient-based strategies are not supported here.
pub fn spectral_delta_study(
    dims: &[(usize, usize)],
    specs: &[PerturbationSpec],
    trials: usize,
    master_seed: u64,
) -> Result<Vec<SpectralDeltaRow>> {
    if trials == 0 {
        return Err(LiftError::Precondition("spectral study needs at least one trial".into()));
    }
    for spec in specs {
        spec.validate()?;
        if spec.strategy.needs_gradient() {
            return Err(LiftError::Precondition(format!(
                "{} selection needs a gradient; random matrices have none",
                spec.strategy.label()
            )));
        }
    }
    let mut rows = Vec::new();
    for &(m, n) in dims {
        let mut spec_deltas = vec![(Vec::with_capacity(trials), Vec::with_capacity(trials)); specs.len()];
        for i in 0..trials {
            let mut rng = LiftRng::new(derive_seed(master_seed ^ i as u64, "spectral-matrix"));
            let w = Matrix::random_normal(m, n, &mut rng);
            let s0 = singular_values(&w)?[0];
            let f0 = frobenius_norm(&w);
            for (spec, (sd, fd)) in specs.iter().zip(spec_deltas.iter_mut()) {
                let trial_spec = PerturbationSpec {
                    strategy: spec.strategy.reseeded(|s| s ^ i as u64),
                    seed: spec.seed ^ i as u64,
                    ..spec.clone()
                };
                let (p, _) = perturb(&w, None, &trial_spec)?;
                sd.push(singular_values(&p)?[0] - s0);
                fd.push(frobenius_norm(&p) - f0);
            }
        }
        for (spec, (sd, fd)) in specs.iter().zip(&spec_deltas) {
            let (ms, ss) = mean_std(sd);
            let (mf, sf) = mean_std(fd);
            rows.push(SpectralDeltaRow {
                rows: m,
                cols: n,
                strategy: spec.strategy.label().to_string(),
                k: resolve_budget(spec.budget, m, n)?,
                trials,
                mean_spectral_delta: ms,
                std_spectral_delta: ss,
                mean_frobenius_delta: mf,
                std_frobenius_delta: sf,
            });
        }
    }
    Ok(rows)
}

pub const DEFAULT_ALIGNMENT_TOP: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub score: f64,
    pub n_top: usize,
    /// σ_{n_top} = σ_{n_top+1} in either matrix, so the top subspace is not
    /// uniquely defined.
    pub degenerate: bool,
}

/// Mean over the top `n_top` right singular vectors `v'_i` of `w_after` of
/// `Σ_j (v'_i · v_j)²`, where `v_j` range over the top `n_top` right singular
/// vectors of `w_before`.
pub fn alignment_score(w_before: &Matrix, w_after: &Matrix, n_top: usize) -> Result<f64> {
    Ok(alignment_report(w_before, w_after, n_top)?.score)
}

pub fn alignment_report(w_before: &Matrix, w_after: &Matrix, n_top: usize) -> Result<AlignmentReport> {
    if w_before.shape() != w_after.shape() {
        return Err(LiftError::Shape(format!(
            "alignment of {}x{} against {}x{}",
            w_before.rows(),
            w_before.cols(),
            w_after.rows(),
            w_after.cols()
        )));
    }
    let p = w_before.rows().min(w_before.cols());
    if n_top == 0 || n_top > p {
        return Err(LiftError::Precondition(format!("n_top must be in 1..={p}, got {n_top}")));
    }
    let before = svd(w_before)?;
    let after = svd(w_after)?;
    let n = w_before.cols();
    let vb = Matrix::from_fn(n, n_top, |i, j| before.v.get(i, j));
    let va = Matrix::from_fn(n, n_top, |i, j| after.v.get(i, j));
    let cross = va.t_matmul(&vb)?;
    let total: f64 = cross.as_slice().iter().map(|c| c * c).sum();
    let score = (total / n_top as f64).clamp(0.0, 1.0);
    let at_cut = |sv: &[f64]| n_top < sv.len() && sv[n_top - 1] == sv[n_top];
    Ok(AlignmentReport {
        score,
        n_top,
        degenerate: at_cut(&before.singular_values) || at_cut(&after.singular_values),
    })
}

/// [`alignment_report`] with `n_top` = [`DEFAULT_ALIGNMENT_TOP`] clamped to
/// the smaller dimension.
pub fn default_alignment(w_before: &Matrix, w_after: &Matrix) -> Result<AlignmentReport> {
    let p = w_before.rows().min(w_before.cols());
    alignment_report(w_before, w_after, DEFAULT_ALIGNMENT_TOP.min(p))
}

/// Numerical rank of `w_after − w_before`.
pub fn update_rank(w_before: &Matrix, w_after: &Matrix, threshold_multiplier: f64) -> Result<usize> {
    numerical_rank(&w_after.sub(w_before)?, threshold_multiplier)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbEvalRow {
    pub strategy: String,
    pub k: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub baseline_loss: f64,
    pub perturbed_loss: f64,
}

/// Perturbs W of `net` per spec and reports the validation loss. Gradient
/// strategies use the training-split gradient of W.
pub fn perturbation_eval_toy(
    net: &ToyNet,
    data: &RegressionDataset,
    specs: &[PerturbationSpec],
) -> Result<Vec<PerturbEvalRow>> {
    let (x_val, y_val) = data.validation();
    let baseline_loss = mse_loss(net, &x_val, &y_val)?;
    let grad = if specs.iter().any(|s| s.strategy.needs_gradient()) {
        let (x_train, y_train) = data.train();
        Some(backward(net, &x_train, &y_train)?.w)
    } else {
        None
    };
    specs
        .iter()
        .map(|spec| {
            let (w, mask) = perturb(&net.w, grad.as_ref(), spec)?;
            let perturbed = ToyNet { w, ..net.clone() };
            Ok(PerturbEvalRow {
                strategy: spec.strategy.label().to_string(),
                k: mask.k(),
                noise_std: spec.noise_std,
                seed: spec.seed,
                baseline_loss,
                perturbed_loss: mse_loss(&perturbed, &x_val, &y_val)?,
            })
        })
        .collect()
}

/// Pairwise overlap ratios of the masks each strategy selects on `w`.
/// `table[i][j]` compares strategy `i` with strategy `j`.
pub fn overlap_table(
    w: &Matrix,
    grad: Option<&Matrix>,
    strategies: &[SelectionStrategy],
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let masks = strategies
        .iter()
        .map(|s| select_mask(w, grad, s, k))
        .collect::<Result<Vec<_>>>()?;
    masks
        .iter()
        .map(|a| masks.iter().map(|b| overlap_ratio(a, b)).collect())
        .collect()
}
