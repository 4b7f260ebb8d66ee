//! Low-rank factorization of a single weight matrix and its progressive
//! refinement.
//!
//! `truncated_factor` replaces `w` with a product `w0 · w1` built from the
//! top singular triplets, splitting the singular values symmetrically
//! (`w0 = U'·sqrt(S')`, `w1 = sqrt(S')·V'ᵀ`). `progressive_step` shrinks an
//! existing pair to a smaller rank by re-factoring only the second factor and
//! merging the leading piece into the first, so the layer count never grows.

use crate::error::{Error, Result};
use crate::linalg::{matmul, svd, DenseMatrix};
use crate::planner::compression_ratio_unchecked;

/// A two-layer replacement (`w0: d_in x R`, `w1: R x d_out`) for one dense layer.
#[derive(Debug, Clone)]
pub struct FactoredPair {
    pub w0: DenseMatrix,
    pub w1: DenseMatrix,
    pub rank: usize,
}

impl FactoredPair {
    pub fn d_in(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w1.cols()
    }

    /// `R · (d_in + d_out)`.
    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// Materializes `w0 · w1` (used by tests and traces, never by inference).
    pub fn product(&self) -> DenseMatrix {
        matmul(&self.w0, &self.w1).expect("factored pair shapes always compose")
    }
}

/// Configuration of the progressive loop: initial rank, per-step shrink
/// factor in (0, 1), and the stopping condition.
#[derive(Debug, Clone)]
pub struct ProgressiveConfig {
    pub initial_rank: usize,
    pub reduction_factor: f64,
    pub stop: StopRule,
}

/// When to stop shrinking the rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Stop once the current rank is at or below this target.
    TargetRank(usize),
    /// Stop once the layer compression ratio reaches this value.
    TargetRatio(f64),
}

impl ProgressiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reduction_factor > 0.0 && self.reduction_factor < 1.0) {
            return Err(Error::InvalidInput(format!(
                "reduction factor must lie in (0, 1), got {}",
                self.reduction_factor
            )));
        }
        if self.initial_rank == 0 {
            return Err(Error::InvalidInput("initial rank must be positive".into()));
        }
        Ok(())
    }

    fn stop_satisfied(&self, rank: usize, d_in: usize, d_out: usize) -> bool {
        match self.stop {
            StopRule::TargetRank(target) => rank <= target,
            StopRule::TargetRatio(target) => compression_ratio_unchecked(d_in, d_out, rank) >= target,
        }
    }
}

/// One record per factorization in a progressive run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ProgressTraceStep {
    pub rank: usize,
    pub reconstruction_error: f64,
    pub param_count: usize,
}

/// Final pair plus the per-step trace of a progressive run.
#[derive(Debug, Clone)]
pub struct ProgressiveOutcome {
    pub pair: FactoredPair,
    pub trace: Vec<ProgressTraceStep>,
}

fn check_rank(rank: usize, max: usize, context: &str) -> Result<()> {
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max, context: Some(context.to_string()) });
    }
    Ok(())
}

/// Factors `w` into `(U'·sqrt(S'), sqrt(S')·V'ᵀ)` using the top `rank`
/// singular triplets. The truncation error `‖w − w0·w1‖_F` equals
/// `sqrt(sum_{i>rank} sigma_i²)` up to floating-point noise.
pub fn truncated_factor(w: &DenseMatrix, rank: usize) -> Result<FactoredPair> {
    let max = w.rows().min(w.cols());
    check_rank(rank, max, "truncated_factor")?;
    let f = svd(w)?;
    Ok(split_factors(&f.left, &f.singular, &f.right, rank))
}

fn split_factors(left: &DenseMatrix, singular: &[f64], right: &DenseMatrix, rank: usize) -> FactoredPair {
    let d_in = left.rows();
    let d_out = right.rows();
    let mut w0 = DenseMatrix::zeros(d_in, rank);
    let mut w1 = DenseMatrix::zeros(rank, d_out);
    for j in 0..rank {
        // sigma can be exactly zero inside the kept block; sqrt(0) columns are
        // retained so the shapes stay contractual.
        let root = singular[j].sqrt();
        for i in 0..d_in {
            w0.set(i, j, left.get(i, j) * root);
        }
        for i in 0..d_out {
            w1.set(j, i, right.get(i, j) * root);
        }
    }
    FactoredPair { w0, w1, rank }
}

/// Shrinks a factored pair to `new_rank` by factoring `w1` and merging:
/// `(w0, w1) -> (w0·w1⁰, w1¹)`. The layer count stays at two, and with no
/// intervening training the product equals a single-shot truncation of the
/// original matrix at `new_rank`.
pub fn progressive_step(pair: &FactoredPair, new_rank: usize) -> Result<FactoredPair> {
    check_rank(new_rank, pair.rank, "progressive_step")?;
    let f = svd(&pair.w1)?;
    let inner = split_factors(&f.left, &f.singular, &f.right, new_rank);
    let w0 = matmul(&pair.w0, &inner.w0)?;
    Ok(FactoredPair { w0, w1: inner.w1, rank: new_rank })
}

/// Runs the full progressive loop on one matrix: factor at the initial rank,
/// invoke the recovery callback, then repeatedly shrink `R <- max(1, floor(a·R))`
/// and recover until the stop rule fires or `R` reaches 1.
///
/// The callback receives the pair after each factorization and returns the
/// (possibly retrained) pair to continue from; pass the identity closure for
/// pure-math runs. Callback errors abort the run.
pub fn run_progressive<F>(w: &DenseMatrix, cfg: &ProgressiveConfig, mut recover: F) -> Result<ProgressiveOutcome>
where
    F: FnMut(FactoredPair, usize) -> Result<FactoredPair>,
{
    cfg.validate()?;
    let (d_in, d_out) = (w.rows(), w.cols());
    check_rank(cfg.initial_rank, d_in.min(d_out), "run_progressive")?;

    let mut trace = Vec::new();
    let mut rank = cfg.initial_rank;
    let mut pair = recover(truncated_factor(w, rank)?, 0)?;
    trace.push(trace_step(w, &pair));

    let mut step = 0usize;
    while rank > 1 && !cfg.stop_satisfied(rank, d_in, d_out) {
        rank = ((rank as f64 * cfg.reduction_factor).floor() as usize).max(1);
        step += 1;
        pair = recover(progressive_step(&pair, rank)?, step)?;
        trace.push(trace_step(w, &pair));
    }

    Ok(ProgressiveOutcome { pair, trace })
}

fn trace_step(w: &DenseMatrix, pair: &FactoredPair) -> ProgressTraceStep {
    let err = w.sub(&pair.product()).expect("trace shapes match").frobenius_norm();
    ProgressTraceStep {
        rank: pair.rank,
        reconstruction_error: err,
        param_count: pair.param_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_out_of_bounds() {
        let w = DenseMatrix::identity(3);
        assert!(matches!(truncated_factor(&w, 0), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(truncated_factor(&w, 4), Err(Error::RankOutOfRange { .. })));
    }

    #[test]
    fn progressive_rank_increase_rejected() {
        let w = DenseMatrix::identity(4);
        let pair = truncated_factor(&w, 2).unwrap();
        assert!(matches!(progressive_step(&pair, 3), Err(Error::RankOutOfRange { .. })));
    }

    #[test]
    fn shape_contract() {
        let mut w = DenseMatrix::zeros(8, 10);
        for i in 0..8 {
            for j in 0..10 {
                w.set(i, j, ((i * 10 + j) as f64 * 0.37).sin());
            }
        }
        let pair = truncated_factor(&w, 4).unwrap();
        let stepped = progressive_step(&pair, 2).unwrap();
        assert_eq!((stepped.w0.rows(), stepped.w0.cols()), (8, 2));
        assert_eq!((stepped.w1.rows(), stepped.w1.cols()), (2, 10));
        assert_eq!(stepped.param_count(), 36);
    }

    #[test]
    fn callback_failure_propagates() {
        let w = DenseMatrix::identity(4);
        let cfg = ProgressiveConfig {
            initial_rank: 4,
            reduction_factor: 0.5,
            stop: StopRule::TargetRank(1),
        };
        let out = run_progressive(&w, &cfg, |pair, step| {
            if step == 1 {
                Err(Error::InvalidInput("boom".into()))
            } else {
                Ok(pair)
            }
        });
        assert!(out.is_err());
    }

    #[test]
    fn invalid_reduction_factor() {
        let cfg = ProgressiveConfig { initial_rank: 2, reduction_factor: 1.0, stop: StopRule::TargetRank(1) };
        assert!(cfg.validate().is_err());
    }
}
