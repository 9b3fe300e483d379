//! Facility-location subset selection over gradient estimates: exact and
//! stochastic greedy maximization, nearest-center weights, gradient-norm
//! noise truncation, and the full selection round.
//!
//! The facility-location value of a subset is `sum_j max_{i in S} (c_max -
//! d_ji)` with `c_max` the largest pairwise distance, i.e. `C - sum_j
//! min_{i in S} d_ji` with `C = N * c_max`, which keeps the function
//! nonnegative and monotone with `F(empty) = 0`. Greedy marginal gains are
//! independent of the additive constant, so the maximizer never materializes
//! `c_max`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradest::{estimate_pool, euclidean_distance, EstimateMode, GradientEstimate};
use crate::metalearn::{Algo, InnerLoopConfig, MetaModel};
use crate::nn::DenseVector;
use crate::tasks::TaskPool;

/// Selected pool indices with integer weights, plus tasks removed by the
/// noise filter (with the weights they carried).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedSubset {
    /// Selected indices in selection order.
    pub indices: Vec<usize>,
    /// Weight per selected index; each >= 1 and, before filtering, summing
    /// to the pool size.
    pub weights: Vec<usize>,
    /// Indices truncated by the noise filter, in subset order.
    pub dropped: Vec<usize>,
    /// Weights the dropped tasks carried when they were removed.
    pub dropped_weights: Vec<usize>,
}

impl WeightedSubset {
    pub fn kept(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn total_weight(&self) -> usize {
        self.weights.iter().sum()
    }
}

/// Greedy flavor for the cardinality-constrained maximization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    ExactGreedy,
    StochasticGreedy,
}

impl std::str::FromStr for SelectMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(SelectMode::ExactGreedy),
            "stochastic" => Ok(SelectMode::StochasticGreedy),
            other => Err(Error::Config(format!("unknown selection mode {other:?}"))),
        }
    }
}

/// Which norms the noise threshold is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdSource {
    /// Mean estimate norm over the whole pool (default).
    PoolMean,
    /// Mean estimate norm over the selected subset only.
    SubsetMean,
}

/// Selection-round settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub k_select: usize,
    pub mode: SelectMode,
    pub sg_epsilon: f64,
    pub noise_flag: bool,
    /// Threshold is `multiplier * mean estimate norm`.
    pub threshold_multiplier: f64,
    pub threshold_source: ThresholdSource,
    pub seed: u64,
}

impl SelectionConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.k_select == 0 || self.k_select > pool_size {
            return Err(Error::Config(format!(
                "k_select {} must be in 1..={pool_size}",
                self.k_select
            )));
        }
        if !(self.sg_epsilon > 0.0 && self.sg_epsilon < 1.0) {
            return Err(Error::Config("sg_epsilon must be in (0, 1)".into()));
        }
        if !(self.threshold_multiplier > 0.0) {
            return Err(Error::Config("threshold multiplier must be positive".into()));
        }
        Ok(())
    }
}

/// Facility-location value of a subset given a full pairwise distance
/// matrix: `F(empty) = 0`, otherwise `sum_j (c_max - min_{i in S} d_ji)`
/// with `c_max` the largest matrix entry.
pub fn facility_value(distances: &[Vec<f64>], subset: &[usize]) -> Result<f64> {
    let n = distances.len();
    if distances.iter().any(|row| row.len() != n) {
        return Err(Error::Input("distance matrix must be square".into()));
    }
    let mut c_max = 0.0_f64;
    for (i, row) in distances.iter().enumerate() {
        for (j, &d) in row.iter().enumerate() {
            if d < 0.0 {
                return Err(Error::Input("distances must be nonnegative".into()));
            }
            if i == j && d != 0.0 {
                return Err(Error::Input("distance matrix must have a zero diagonal".into()));
            }
            if distances[j][i] != d {
                return Err(Error::Input("distance matrix must be symmetric".into()));
            }
            c_max = c_max.max(d);
        }
    }
    if subset.is_empty() {
        return Ok(0.0);
    }
    if subset.iter().any(|&i| i >= n) {
        return Err(Error::Index("subset index outside distance matrix".into()));
    }
    let mut value = 0.0;
    for j in 0..n {
        let best = subset
            .iter()
            .map(|&i| c_max - distances[j][i])
            .fold(f64::NEG_INFINITY, f64::max);
        value += best;
    }
    Ok(value)
}

/// Output of a greedy run: selected indices in selection order plus the
/// number of marginal-gain evaluations performed.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    pub indices: Vec<usize>,
    pub candidate_evals: usize,
}

/// Stochastic-greedy sample size `ceil((n/k) ln(1/eps))`.
pub fn stochastic_sample_size(n: usize, k: usize, sg_epsilon: f64) -> usize {
    ((n as f64 / k as f64) * (1.0 / sg_epsilon).ln()).ceil() as usize
}

/// Greedy facility-location maximization under a cardinality constraint.
///
/// Exact mode scans every remaining candidate each step; stochastic mode
/// scores a uniform sample of `ceil((n/k) ln(1/eps))` remaining candidates
/// per step. Both track the current nearest-center distance per pool task,
/// so a candidate evaluation is one O(n) pass. Ties break toward the lowest
/// pool index.
pub fn greedy_select<R: Rng>(
    estimates: &[GradientEstimate],
    k: usize,
    mode: SelectMode,
    sg_epsilon: f64,
    rng: &mut R,
) -> Result<GreedyOutcome> {
    let n = estimates.len();
    if k > n {
        return Err(Error::Config(format!("cannot select {k} from a pool of {n}")));
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let vecs: Vec<&DenseVector> = estimates.iter().map(|e| &e.vec).collect();
    // cur_min[j] = min distance from task j to the selected set; infinity
    // while the set is empty (the additive constant cancels in the argmax).
    let mut cur_min = vec![f64::INFINITY; n];
    let mut selected = Vec::with_capacity(k);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut evals = 0usize;

    // Gain of adding candidate e: sum_j max(0, cur_min[j] - d(j, e)). On the
    // first step every cur_min is infinite and the comparison reduces to
    // minimizing sum_j d(j, e).
    let gain_of = |e: usize, cur_min: &[f64]| -> f64 {
        let mut gain = 0.0;
        for j in 0..n {
            let d = euclidean_distance(vecs[j], vecs[e]);
            if cur_min[j].is_infinite() {
                gain -= d;
            } else if d < cur_min[j] {
                gain += cur_min[j] - d;
            }
        }
        gain
    };

    let sample_size = stochastic_sample_size(n, k, sg_epsilon);
    while selected.len() < k {
        let candidates: Vec<usize> = match mode {
            SelectMode::ExactGreedy => remaining.clone(),
            SelectMode::StochasticGreedy => {
                if sample_size >= remaining.len() {
                    remaining.clone()
                } else {
                    let picks = rand::seq::index::sample(rng, remaining.len(), sample_size);
                    let mut c: Vec<usize> = picks.iter().map(|i| remaining[i]).collect();
                    c.sort_unstable();
                    c
                }
            }
        };
        let mut best: Option<(usize, f64)> = None;
        for &e in &candidates {
            let g = gain_of(e, &cur_min);
            evals += 1;
            let better = match best {
                None => true,
                // Strict improvement required, so ties keep the lowest
                // index (candidates are scanned in ascending order).
                Some((_, bg)) => g > bg,
            };
            if better {
                best = Some((e, g));
            }
        }
        let (chosen, _) = best.expect("candidate set nonempty");
        selected.push(chosen);
        remaining.retain(|&x| x != chosen);
        for j in 0..n {
            let d = euclidean_distance(vecs[j], vecs[chosen]);
            if d < cur_min[j] {
                cur_min[j] = d;
            }
        }
    }
    Ok(GreedyOutcome { indices: selected, candidate_evals: evals })
}

/// Nearest-center assignment weights over arbitrary per-task vectors.
/// Selected tasks always map to themselves (their self-distance is zero);
/// other tasks map to the nearest selected vector, ties toward the lowest
/// pool index. Weights count assignments, so they sum to the pool size.
pub fn nearest_center_weights(vectors: &[DenseVector], selected: &[usize]) -> Result<Vec<usize>> {
    if selected.is_empty() {
        return Err(Error::Input("selection is empty".into()));
    }
    if selected.iter().any(|&i| i >= vectors.len()) {
        return Err(Error::Index("selected index outside pool".into()));
    }
    let mut weights = vec![0usize; selected.len()];
    // Position of each selected pool index within the selection list.
    let position: std::collections::HashMap<usize, usize> =
        selected.iter().enumerate().map(|(pos, &i)| (i, pos)).collect();
    for (j, vec) in vectors.iter().enumerate() {
        if let Some(&pos) = position.get(&j) {
            weights[pos] += 1;
            continue;
        }
        let mut best_pos = 0;
        let mut best_key = (f64::INFINITY, usize::MAX);
        for (pos, &i) in selected.iter().enumerate() {
            let d = euclidean_distance(vec, &vectors[i]);
            let key = (d, i);
            if key.0 < best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
                best_key = key;
                best_pos = pos;
            }
        }
        weights[best_pos] += 1;
    }
    Ok(weights)
}

/// Weights for a selection over gradient estimates.
pub fn compute_weights(estimates: &[GradientEstimate], selected: &[usize]) -> Result<Vec<usize>> {
    let vectors: Vec<DenseVector> = estimates.iter().map(|e| e.vec.clone()).collect();
    nearest_center_weights(&vectors, selected)
}

/// Moves subset tasks whose estimate magnitude reaches the threshold
/// `tau * mean magnitude` into the dropped list. Weights of kept tasks are
/// not recomputed. If everything would be dropped, the lowest-magnitude
/// task is retained.
///
/// The thresholded magnitude is [`GradientEstimate::resid_mass`], the sum of
/// per-example residual norms: the norm of the summed vector is nearly
/// invariant to symmetric label swaps (mislabeled pairs cancel inside the
/// sum), while the per-example mass grows with them.
pub fn filter_noisy(
    pool_estimates: &[GradientEstimate],
    subset: WeightedSubset,
    tau: f64,
    source: ThresholdSource,
) -> Result<WeightedSubset> {
    if !(tau > 0.0) {
        return Err(Error::Config("threshold multiplier must be positive".into()));
    }
    if subset.indices.len() != subset.weights.len() {
        return Err(Error::Input("subset weights not aligned with indices".into()));
    }
    let norms_over: Vec<f64> = match source {
        ThresholdSource::PoolMean => pool_estimates.iter().map(|e| e.resid_mass).collect(),
        ThresholdSource::SubsetMean => subset
            .indices
            .iter()
            .map(|&i| pool_estimates[i].resid_mass)
            .collect(),
    };
    if norms_over.is_empty() {
        return Err(Error::Input("no estimates to threshold over".into()));
    }
    let h = tau * norms_over.iter().sum::<f64>() / norms_over.len() as f64;

    let mut kept = WeightedSubset::default();
    kept.dropped = subset.dropped.clone();
    kept.dropped_weights = subset.dropped_weights.clone();
    for (&i, &w) in subset.indices.iter().zip(&subset.weights) {
        if pool_estimates[i].resid_mass >= h {
            kept.dropped.push(i);
            kept.dropped_weights.push(w);
        } else {
            kept.indices.push(i);
            kept.weights.push(w);
        }
    }
    if kept.indices.is_empty() {
        // Degenerate threshold: keep the single lowest-magnitude task.
        let (pos, _) = subset
            .indices
            .iter()
            .enumerate()
            .min_by(|(_, &a), (_, &b)| {
                pool_estimates[a]
                    .resid_mass
                    .partial_cmp(&pool_estimates[b].resid_mass)
                    .unwrap()
                    .then(a.cmp(&b))
            })
            .expect("subset nonempty");
        let idx = subset.indices[pos];
        log::warn!(
            "noise threshold {h} would drop every selected task; retaining task {idx} with the lowest estimate norm"
        );
        kept.indices = vec![idx];
        kept.weights = vec![subset.weights[pos]];
        kept.dropped = subset.dropped.clone();
        kept.dropped_weights = subset.dropped_weights.clone();
        kept.dropped
            .extend(subset.indices.iter().copied().filter(|&i| i != idx));
        kept.dropped_weights.extend(
            subset
                .indices
                .iter()
                .zip(&subset.weights)
                .filter(|(&i, _)| i != idx)
                .map(|(_, &w)| w),
        );
    }
    Ok(kept)
}

/// One full selection round: estimate every pool task's gradient, greedily
/// select up to `k`, compute nearest-center weights, and apply the noise
/// filter when the noisy-setting flag is on.
pub fn derts_round(
    model: &MetaModel,
    pool: &mut TaskPool,
    sel: &SelectionConfig,
    inner: &InnerLoopConfig,
    algo: Algo,
    mode: EstimateMode,
) -> Result<WeightedSubset> {
    sel.validate(pool.len())?;
    estimate_pool(model, pool, algo, mode, inner)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sel.seed);
    let outcome = greedy_select(&pool.estimates, sel.k_select, sel.mode, sel.sg_epsilon, &mut rng)?;
    let weights = compute_weights(&pool.estimates, &outcome.indices)?;
    let subset = WeightedSubset {
        indices: outcome.indices,
        weights,
        dropped: Vec::new(),
        dropped_weights: Vec::new(),
    };
    if sel.noise_flag {
        filter_noisy(&pool.estimates, subset, sel.threshold_multiplier, sel.threshold_source)
    } else {
        Ok(subset)
    }
}

/// Writes a subset as CSV: `task_id,weight,dropped`.
pub fn subset_to_csv<W: Write>(subset: &WeightedSubset, w: &mut W) -> Result<()> {
    writeln!(w, "task_id,weight,dropped")?;
    for (i, wt) in subset.kept() {
        writeln!(w, "{i},{wt},0")?;
    }
    for (&i, &wt) in subset.dropped.iter().zip(&subset.dropped_weights) {
        writeln!(w, "{i},{wt},1")?;
    }
    Ok(())
}

/// Reads a subset from the CSV format written by [`subset_to_csv`].
pub fn subset_from_csv<R: BufRead>(r: &mut R) -> Result<WeightedSubset> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty subset CSV".into()))?
        .map_err(Error::Io)?;
    if header.trim() != "task_id,weight,dropped" {
        return Err(Error::Parse("unexpected subset CSV header".into()));
    }
    let mut subset = WeightedSubset::default();
    for line in lines {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse("subset CSV rows need 3 columns".into()));
        }
        let id: usize = parts[0].parse().map_err(|_| Error::Parse("bad task_id".into()))?;
        let weight: usize = parts[1].parse().map_err(|_| Error::Parse("bad weight".into()))?;
        match parts[2] {
            "0" => {
                subset.indices.push(id);
                subset.weights.push(weight);
            }
            "1" => {
                subset.dropped.push(id);
                subset.dropped_weights.push(weight);
            }
            other => return Err(Error::Parse(format!("bad dropped flag {other:?}"))),
        }
    }
    Ok(subset)
}

/// Pairwise Euclidean distance matrix of gradient estimates; materialized
/// only for small pools and tests.
pub fn distance_matrix(estimates: &[GradientEstimate]) -> Vec<Vec<f64>> {
    let n = estimates.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = euclidean_distance(&estimates[i].vec, &estimates[j].vec);
        }
    }
    m
}

/// Convenience wrapper used by tests and the CLI to run selection over
/// loaded estimates.
pub fn select_from_estimates(
    estimates: &[GradientEstimate],
    sel: &SelectionConfig,
) -> Result<WeightedSubset> {
    sel.validate(estimates.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(sel.seed);
    let outcome = greedy_select(estimates, sel.k_select, sel.mode, sel.sg_epsilon, &mut rng)?;
    let weights = compute_weights(estimates, &outcome.indices)?;
    let subset = WeightedSubset {
        indices: outcome.indices,
        weights,
        dropped: Vec::new(),
        dropped_weights: Vec::new(),
    };
    if sel.noise_flag {
        filter_noisy(estimates, subset, sel.threshold_multiplier, sel.threshold_source)
    } else {
        Ok(subset)
    }
}
