//! Fine-tuning masks: which entries of a weight matrix are trainable.
//!
//! The LIFT rule scores entries by their magnitude in a rank-r approximation
//! of the weight matrix and keeps the top k. The baselines (weight magnitude,
//! gradient magnitude, movement score, random) and a 4×4 block-structured
//! variant share the same top-k machinery so budgets are directly comparable.

use std::cmp::Ordering;

use crate::error::{LiftError, Result};
use crate::linalg::{self, Matrix, RankSelection};
use crate::rng::LiftRng;

/// A set of exactly `k` selected positions in a `rows × cols` matrix, kept as
/// sorted row-major flat indices. This order defines the layout of every
/// compacted vector aligned to the mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    positions: Vec<usize>,
}

impl Mask {
    /// Positions need not be sorted; duplicates or out-of-range entries are errors.
    pub fn new(rows: usize, cols: usize, mut positions: Vec<usize>) -> Result<Self> {
        positions.sort_unstable();
        if positions.windows(2).any(|w| w[0] == w[1]) {
            return Err(LiftError::Precondition("mask has duplicate positions".into()));
        }
        if let Some(&last) = positions.last() {
            if last >= rows * cols {
                return Err(LiftError::Precondition(format!(
                    "mask position {last} outside a {rows}x{cols} matrix"
                )));
            }
        }
        Ok(Mask {
            rows,
            cols,
            positions,
        })
    }

    pub fn from_pairs(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        if let Some(&(r, c)) = pairs.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(LiftError::Precondition(format!(
                "mask entry ({r}, {c}) outside a {rows}x{cols} matrix"
            )));
        }
        Mask::new(rows, cols, pairs.iter().map(|&(r, c)| r * cols + c).collect())
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            positions: (0..rows * cols).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn k(&self) -> usize {
        self.positions.len()
    }

    /// Sorted row-major flat indices.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positions.iter().map(|&p| (p / self.cols, p % self.cols))
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.rows
            && col < self.cols
            && self.positions.binary_search(&(row * self.cols + col)).is_ok()
    }

    /// Dense 0/1 indicator matrix.
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        let data = m.as_mut_slice();
        for &p in &self.positions {
            data[p] = 1.0;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    /// Top-k magnitudes of the rank-reduced matrix.
    Lift(RankSelection),
    WeightMagnitude,
    GradientMagnitude,
    /// Top-k of `-w ⊙ g`: weights the gradient pushes away from zero.
    MovementScore,
    Random { seed: u64 },
    /// LIFT scoring, selected in whole 4×4 blocks.
    LiftStructured(RankSelection),
}

impl SelectionStrategy {
    pub fn needs_gradient(&self) -> bool {
        matches!(
            self,
            SelectionStrategy::GradientMagnitude | SelectionStrategy::MovementScore
        )
    }

    pub fn label(&self) -> &'static str {
        match self {
            SelectionStrategy::Lift(_) => "lift",
            SelectionStrategy::WeightMagnitude => "weight_magnitude",
            SelectionStrategy::GradientMagnitude => "gradient_magnitude",
            SelectionStrategy::MovementScore => "movement",
            SelectionStrategy::Random { .. } => "random",
            SelectionStrategy::LiftStructured(_) => "lift_structured",
        }
    }

    /// Same strategy with any random seed replaced by `f(seed)`.
    pub fn reseeded(&self, f: impl Fn(u64) -> u64) -> SelectionStrategy {
        use crate::linalg::RankVariant;
        let reseed_rank = |sel: &RankSelection| match sel.variant {
            RankVariant::Random { seed } => RankSelection {
                variant: RankVariant::Random { seed: f(seed) },
                rank: sel.rank,
            },
            _ => *sel,
        };
        match self {
            SelectionStrategy::Random { seed } => SelectionStrategy::Random { seed: f(*seed) },
            SelectionStrategy::Lift(sel) => SelectionStrategy::Lift(reseed_rank(sel)),
            SelectionStrategy::LiftStructured(sel) => {
                SelectionStrategy::LiftStructured(reseed_rank(sel))
            }
            other => *other,
        }
    }
}

/// Side length of the blocks used by [`SelectionStrategy::LiftStructured`].
pub const STRUCTURED_BLOCK: usize = 4;

/// Trainable-parameter budget for one matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetSpec {
    Exact(usize),
    /// Same parameter count as a rank-ρ LoRA adapter: `ρ · (m + n)`.
    LoraRankEquivalent(usize),
    /// Every entry.
    Full,
}

pub fn resolve_budget(spec: BudgetSpec, rows: usize, cols: usize) -> Result<usize> {
    if rows == 0 || cols == 0 {
        return Err(LiftError::Precondition(format!(
            "budget for a {rows}x{cols} matrix"
        )));
    }
    let total = rows * cols;
    match spec {
        BudgetSpec::Exact(0) | BudgetSpec::LoraRankEquivalent(0) => {
            Err(LiftError::Precondition("budget must be positive".into()))
        }
        BudgetSpec::Exact(k) if k > total => Err(LiftError::Precondition(format!(
            "budget k={k} exceeds the {total} entries of a {rows}x{cols} matrix"
        ))),
        BudgetSpec::Exact(k) => Ok(k),
        BudgetSpec::LoraRankEquivalent(rho) => Ok(rho.saturating_mul(rows + cols).clamp(1, total)),
        BudgetSpec::Full => Ok(total),
    }
}

/// Indices of the `k` largest scores, sorted ascending. Among equal scores the
/// lower index wins.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    assert!(k <= scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let order = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

fn abs_scores(m: &Matrix) -> Vec<f64> {
    m.as_slice().iter().map(|x| x.abs()).collect()
}

pub fn select_mask(
    w: &Matrix,
    grad: Option<&Matrix>,
    strategy: &SelectionStrategy,
    k: usize,
) -> Result<Mask> {
    let (rows, cols) = w.shape();
    if k == 0 || k > rows * cols {
        return Err(LiftError::Precondition(format!(
            "k={k} outside 1..={} for a {rows}x{cols} matrix",
            rows * cols
        )));
    }
    let grad = if strategy.needs_gradient() {
        let g = grad.ok_or_else(|| {
            LiftError::Precondition(format!("{} selection needs a gradient", strategy.label()))
        })?;
        if g.shape() != w.shape() {
            return Err(LiftError::Shape(format!(
                "gradient {}x{} vs weight {rows}x{cols}",
                g.rows(),
                g.cols()
            )));
        }
        Some(g)
    } else {
        None
    };

    let positions = match strategy {
        SelectionStrategy::Lift(sel) => top_k(&abs_scores(&linalg::low_rank_approx(w, sel)?), k),
        SelectionStrategy::WeightMagnitude => top_k(&abs_scores(w), k),
        SelectionStrategy::GradientMagnitude => top_k(&abs_scores(grad.expect("checked")), k),
        SelectionStrategy::MovementScore => {
            let g = grad.expect("checked");
            let scores: Vec<f64> = w
                .as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(w, g)| -w * g)
                .collect();
            top_k(&scores, k)
        }
        SelectionStrategy::Random { seed } => {
            let mut p = LiftRng::new(*seed).sample_indices(rows * cols, k);
            p.sort_unstable();
            p
        }
        SelectionStrategy::LiftStructured(sel) => {
            let reduced = linalg::low_rank_approx(w, sel)?;
            block_select(&reduced, k, STRUCTURED_BLOCK)
        }
    };
    Ok(Mask {
        rows,
        cols,
        positions,
    })
}

/// Greedy block selection on `|scores|`: whole blocks in decreasing order of
/// their summed magnitude until at least `k` entries are covered, then the
/// weakest entries of the last (lowest-scoring) block are dropped to land on
/// exactly `k`.
fn block_select(scores: &Matrix, k: usize, block: usize) -> Vec<usize> {
    let (rows, cols) = scores.shape();
    let (brows, bcols) = (rows.div_ceil(block), cols.div_ceil(block));
    let block_entries = |b: usize| -> Vec<usize> {
        let (bi, bj) = (b / bcols, b % bcols);
        let mut out = Vec::with_capacity(block * block);
        for i in bi * block..((bi + 1) * block).min(rows) {
            for j in bj * block..((bj + 1) * block).min(cols) {
                out.push(i * cols + j);
            }
        }
        out
    };
    let data = scores.as_slice();
    let block_score: Vec<f64> = (0..brows * bcols)
        .map(|b| block_entries(b).iter().map(|&p| data[p].abs()).sum())
        .collect();
    let mut order: Vec<usize> = (0..block_score.len()).collect();
    order.sort_by(|&a, &b| block_score[b].total_cmp(&block_score[a]).then(a.cmp(&b)));

    let mut chosen = Vec::with_capacity(k + block * block);
    for b in order {
        let mut entries = block_entries(b);
        let missing = k - chosen.len();
        if entries.len() > missing {
            entries.sort_by(|&p, &q| data[q].abs().total_cmp(&data[p].abs()).then(p.cmp(&q)));
            entries.truncate(missing);
        }
        chosen.extend(entries);
        if chosen.len() == k {
            break;
        }
    }
    chosen.sort_unstable();
    chosen
}

/// `|a ∩ b| / k` for two masks of equal shape and cardinality.
pub fn overlap_ratio(a: &Mask, b: &Mask) -> Result<f64> {
    if a.shape() != b.shape() || a.k() != b.k() {
        return Err(LiftError::Precondition(format!(
            "overlap needs matching masks, got {}x{} k={} vs {}x{} k={}",
            a.rows,
            a.cols,
            a.k(),
            b.rows,
            b.cols,
            b.k()
        )));
    }
    if a.k() == 0 {
        return Ok(1.0);
    }
    Ok(sorted_intersection_len(&a.positions, &b.positions) as f64 / a.k() as f64)
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}
