//! Cheap per-task gradient estimation, the exact-gradient oracle, and the
//! gradient-approximation error diagnostic.
//!
//! The estimate sums, over a task's query set, the gradient of the loss with
//! respect to the score vector (softmax probabilities minus the one-hot
//! label). With an identity output activation this equals the final-layer
//! bias gradient of the summed query loss exactly, at a fraction of a full
//! backward pass.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::metalearn::{adapt, proto_loss, Algo, InnerLoopConfig, MetaModel};
use crate::nn::{self, DenseVector, ParamGrads};
use crate::select::WeightedSubset;
use crate::tasks::{FewShotTask, TaskPool};

/// How scores feeding the estimate are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateMode {
    /// Scores from the current meta-parameters; one forward pass per query
    /// example, no adaptation.
    AtMeta,
    /// Scores from the task-adapted parameters (ANIL only; ProtoNet has no
    /// adaptation step, so this coincides with [`EstimateMode::AtMeta`]).
    AfterAdapt,
}

impl std::str::FromStr for EstimateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "at-meta" => Ok(EstimateMode::AtMeta),
            "after-adapt" => Ok(EstimateMode::AfterAdapt),
            other => Err(Error::Config(format!("unknown estimate mode {other:?}"))),
        }
    }
}

/// Which vectors an approximation-error report was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientSpace {
    ExactGradient,
    Estimate,
}

/// The per-task gradient proxy: a vector of score-space gradients summed
/// over the query set, with its Euclidean norm cached.
///
/// `resid_mass` is the companion magnitude `sum_k ||p_k - onehot(y_k)||`:
/// per-example residual norms summed instead of the norm of the summed
/// vector. Symmetric label swaps cancel pairwise inside the vector sum, so
/// `norm` is nearly blind to label noise; the per-example mass is not, and
/// the noise filter thresholds it. For estimates built directly from a
/// vector it defaults to `norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub vec: DenseVector,
    pub norm: f64,
    pub resid_mass: f64,
    pub task_index: usize,
}

impl GradientEstimate {
    pub fn new(vec: DenseVector, task_index: usize) -> Result<Self> {
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient estimate".into()));
        }
        let norm = euclidean_norm(&vec);
        Ok(GradientEstimate { vec, norm, resid_mass: norm, task_index })
    }

    pub fn with_resid_mass(vec: DenseVector, resid_mass: f64, task_index: usize) -> Result<Self> {
        if !resid_mass.is_finite() {
            return Err(Error::Numeric("non-finite residual mass".into()));
        }
        let mut est = GradientEstimate::new(vec, task_index)?;
        est.resid_mass = resid_mass;
        Ok(est)
    }
}

pub(crate) fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Task scores for one query example: ANIL logits or ProtoNet negative
/// squared distances to the class prototypes.
fn query_scores(model: &MetaModel, task: &FewShotTask, algo: Algo) -> Result<Vec<DenseVector>> {
    match algo {
        Algo::Anil => task
            .query
            .iter()
            .map(|ex| Ok(nn::forward(model.net(), &ex.x)?.logits().clone()))
            .collect(),
        Algo::ProtoNet => {
            let (_, _, scores) = proto_loss(model, task)?;
            Ok(scores)
        }
    }
}

/// The cheap gradient proxy: `sum over query of softmax(scores) - onehot(y)`.
pub fn estimate_task_gradient(
    model: &MetaModel,
    task: &FewShotTask,
    algo: Algo,
    mode: EstimateMode,
    inner: &InnerLoopConfig,
    task_index: usize,
) -> Result<GradientEstimate> {
    if task.query.is_empty() {
        return Err(Error::Input("task has an empty query set".into()));
    }
    let scoring_model;
    let model_ref = match (algo, mode) {
        (Algo::Anil, EstimateMode::AfterAdapt) => {
            scoring_model = adapt(model, &task.support, inner)?;
            &scoring_model
        }
        _ => model,
    };
    let scores = query_scores(model_ref, task, algo)?;
    let width = scores.first().map(|s| s.len()).unwrap_or(0);
    let mut acc = vec![0.0; width];
    let mut resid_mass = 0.0;
    for (ex, s) in task.query.iter().zip(&scores) {
        if ex.y >= width {
            return Err(Error::Index(format!("label {} outside score width {width}", ex.y)));
        }
        let p = nn::softmax(s);
        let mut example_sq = 0.0;
        for (c, (a, &pi)) in acc.iter_mut().zip(&p).enumerate() {
            *a += pi;
            let resid = pi - if c == ex.y { 1.0 } else { 0.0 };
            example_sq += resid * resid;
        }
        acc[ex.y] -= 1.0;
        resid_mass += example_sq.sqrt();
    }
    GradientEstimate::with_resid_mass(acc, resid_mass, task_index)
}

/// Fills the pool's estimate slots, aligned with task indices.
pub fn estimate_pool(
    model: &MetaModel,
    pool: &mut TaskPool,
    algo: Algo,
    mode: EstimateMode,
    inner: &InnerLoopConfig,
) -> Result<()> {
    let mut estimates = Vec::with_capacity(pool.tasks.len());
    for (i, task) in pool.tasks.iter().enumerate() {
        estimates.push(estimate_task_gradient(model, task, algo, mode, inner, i)?);
    }
    pool.estimates = estimates;
    Ok(())
}

/// The exact per-task gradient, summed (not averaged) over the query set.
/// Used as a validation oracle and for the exact-space error diagnostic.
pub fn exact_task_gradient(
    model: &MetaModel,
    task: &FewShotTask,
    algo: Algo,
    inner: &InnerLoopConfig,
) -> Result<ParamGrads> {
    if task.query.is_empty() {
        return Err(Error::Input("task has an empty query set".into()));
    }
    let n_q = task.query.len() as f64;
    match algo {
        Algo::Anil => {
            let adapted = adapt(model, &task.support, inner)?;
            let mut grads = ParamGrads::zeros_like(model.net());
            for ex in &task.query {
                let trace = nn::forward(adapted.net(), &ex.x)?;
                let (_, gl) = nn::softmax_xent(trace.logits(), ex.y)?;
                grads.add_assign(&nn::backward(adapted.net(), &trace, &gl)?);
            }
            Ok(grads)
        }
        Algo::ProtoNet => {
            // proto_loss averages over the query set; rescale to the
            // summation convention.
            let (_, mut grads, _) = proto_loss(model, task)?;
            grads.scale(n_q);
            Ok(grads)
        }
    }
}

/// Exact gradient error of a weighted subset and its nearest-center upper
/// bound, in a given gradient space.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxErrorReport {
    /// `|| sum_pool g_j - sum_subset w_i g_i ||`.
    pub exact_error: f64,
    /// `sum_pool min_subset || g_j - g_i ||`.
    pub upper_bound: f64,
    pub space: GradientSpace,
}

/// Computes both error scalars over per-task vectors in the requested space.
/// The subset's weights are used as given; with nearest-center weights the
/// exact error never exceeds the bound.
pub fn approx_error(
    gradients: &[DenseVector],
    subset: &WeightedSubset,
    space: GradientSpace,
) -> Result<ApproxErrorReport> {
    if subset.indices.is_empty() {
        return Err(Error::Input("subset is empty".into()));
    }
    if subset.indices.iter().any(|&i| i >= gradients.len()) {
        return Err(Error::Index("subset index outside gradient list".into()));
    }
    let dim = gradients.first().map(|g| g.len()).unwrap_or(0);
    let mut pool_sum = vec![0.0; dim];
    for g in gradients {
        for (a, v) in pool_sum.iter_mut().zip(g) {
            *a += v;
        }
    }
    let mut subset_sum = vec![0.0; dim];
    for (&i, &w) in subset.indices.iter().zip(&subset.weights) {
        for (a, v) in subset_sum.iter_mut().zip(&gradients[i]) {
            *a += w as f64 * v;
        }
    }
    let exact_error = euclidean_distance(&pool_sum, &subset_sum);
    let upper_bound = gradients
        .iter()
        .map(|g| {
            subset
                .indices
                .iter()
                .map(|&i| euclidean_distance(g, &gradients[i]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(ApproxErrorReport { exact_error, upper_bound, space })
}

/// Writes estimates as CSV: `task_id,norm,resid_mass,g0..g{C-1}`.
pub fn estimates_to_csv<W: Write>(estimates: &[GradientEstimate], w: &mut W) -> Result<()> {
    let width = estimates.first().map(|e| e.vec.len()).unwrap_or(0);
    let cols: Vec<String> = (0..width).map(|i| format!("g{i}")).collect();
    writeln!(w, "task_id,norm,resid_mass,{}", cols.join(","))?;
    for est in estimates {
        let vals: Vec<String> = est.vec.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{},{}", est.task_index, est.norm, est.resid_mass, vals.join(","))?;
    }
    Ok(())
}

/// Reads estimates from the CSV format written by [`estimates_to_csv`].
pub fn estimates_from_csv<R: BufRead>(r: &mut R) -> Result<Vec<GradientEstimate>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty estimates CSV".into()))?
        .map_err(Error::Io)?;
    if !header.starts_with("task_id,norm,resid_mass") {
        return Err(Error::Parse("unexpected estimates CSV header".into()));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let mut field = |what: &str| {
            it.next().ok_or_else(|| Error::Parse(format!("missing {what}")))
        };
        let task_index: usize = field("task_id")?
            .parse()
            .map_err(|_| Error::Parse("bad task_id".into()))?;
        let stored_norm: f64 = field("norm")?
            .parse()
            .map_err(|_| Error::Parse("bad norm".into()))?;
        let resid_mass: f64 = field("resid_mass")?
            .parse()
            .map_err(|_| Error::Parse("bad resid_mass".into()))?;
        let vec: DenseVector = it
            .map(|v| v.parse::<f64>().map_err(|_| Error::Parse("bad estimate value".into())))
            .collect::<Result<_>>()?;
        let est = GradientEstimate::with_resid_mass(vec, resid_mass, task_index)?;
        if (est.norm - stored_norm).abs() > 1e-9 * (1.0 + est.norm) {
            return Err(Error::Parse(format!(
                "stored norm {stored_norm} inconsistent with vector norm {}",
                est.norm
            )));
        }
        out.push(est);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metalearn::MetaModel;
    use crate::select;
    use crate::tasks::{sample_task, SyntheticDistribution};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn task(seed: u64, way: usize, shots: (usize, usize)) -> FewShotTask {
        let mut r = rng(seed);
        let dist = SyntheticDistribution::new(way + 3, 4, 0.6, &mut r).unwrap();
        sample_task(&dist, way, shots, &mut r).unwrap()
    }

    fn no_adapt() -> InnerLoopConfig {
        InnerLoopConfig { lr: 0.0, steps: 0, head_only: true }
    }

    #[test]
    fn saturated_model_estimate_vanishes() {
        // Hand-built model with an enormous margin on the true class: the
        // identity hidden layer passes the one-hot inputs through and the
        // head scales them by 100, so p -> y and the estimate vanishes.
        use crate::nn::{DenseLayer, DenseMatrix, Mlp};
        let eye = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let head = DenseMatrix::from_rows(&[vec![100.0, 0.0], vec![0.0, 100.0]]).unwrap();
        let net = Mlp::new(vec![
            DenseLayer::new(eye, vec![0.0, 0.0]).unwrap(),
            DenseLayer::new(head, vec![0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let model = MetaModel::from_net(net, Algo::Anil).unwrap();
        let mk = |x: Vec<f64>, y: usize| crate::tasks::LabeledExample { x, y, true_y: y };
        let t = FewShotTask {
            support: vec![mk(vec![1.0, 0.0], 0), mk(vec![0.0, 1.0], 1)],
            query: vec![
                mk(vec![1.0, 0.0], 0),
                mk(vec![1.0, 0.0], 0),
                mk(vec![0.0, 1.0], 1),
                mk(vec![0.0, 1.0], 1),
            ],
            way: 2,
            shots: (1, 2),
            noise_meta: None,
        };
        let est = estimate_task_gradient(&model, &t, Algo::Anil, EstimateMode::AtMeta, &no_adapt(), 0).unwrap();
        assert!(est.norm < 1e-12, "norm {} should approach zero", est.norm);
    }

    #[test]
    fn uniform_model_estimate_cancels_exactly() {
        let mut model = MetaModel::anil(4, &[6], 5, &mut rng(3)).unwrap();
        let net = model.net().clone();
        let mut zeroed = net;
        for layer in zeroed.layers_mut() {
            for w in layer.weights.data_mut() {
                *w = 0.0;
            }
            for b in layer.bias.iter_mut() {
                *b = 0.0;
            }
        }
        model = MetaModel::from_net(zeroed, Algo::Anil).unwrap();
        let t = task(4, 5, (5, 15));
        let est = estimate_task_gradient(&model, &t, Algo::Anil, EstimateMode::AtMeta, &no_adapt(), 0).unwrap();
        // 75 * 0.2 - 15 = 0 per coordinate.
        assert!(est.vec.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn estimate_equals_final_bias_gradient_of_summed_query_loss() {
        for seed in 0..20 {
            let model = MetaModel::anil(4, &[6], 3, &mut rng(500 + seed)).unwrap();
            let t = task(600 + seed, 3, (2, 4));
            let est = estimate_task_gradient(&model, &t, Algo::Anil, EstimateMode::AtMeta, &no_adapt(), 0).unwrap();
            let exact = exact_task_gradient(&model, &t, Algo::Anil, &no_adapt()).unwrap();
            let bias = &exact.layers.last().unwrap().bias;
            for (a, b) in est.vec.iter().zip(bias) {
                assert!((a - b).abs() <= 1e-12, "estimate {a} vs bias gradient {b}");
            }
        }
    }

    #[test]
    fn exact_gradient_without_adaptation_matches_manual_backprop() {
        let model = MetaModel::anil(4, &[5], 3, &mut rng(7)).unwrap();
        let t = task(8, 3, (2, 4));
        let exact = exact_task_gradient(&model, &t, Algo::Anil, &no_adapt()).unwrap();
        let mut manual = ParamGrads::zeros_like(model.net());
        for ex in &t.query {
            let trace = nn::forward(model.net(), &ex.x).unwrap();
            let (_, gl) = nn::softmax_xent(trace.logits(), ex.y).unwrap();
            manual.add_assign(&nn::backward(model.net(), &trace, &gl).unwrap());
        }
        assert_eq!(exact, manual);
    }

    #[test]
    fn duplicating_query_doubles_exact_gradient_norm() {
        let model = MetaModel::anil(4, &[5], 2, &mut rng(9)).unwrap();
        let t = task(10, 2, (2, 3));
        let g1 = exact_task_gradient(&model, &t, Algo::Anil, &no_adapt()).unwrap();
        let mut doubled = t.clone();
        doubled.query.extend(t.query.iter().cloned());
        doubled.shots = (t.shots.0, t.shots.1 * 2);
        let g2 = exact_task_gradient(&model, &doubled, Algo::Anil, &no_adapt()).unwrap();
        let n1 = euclidean_norm(&g1.flatten());
        let n2 = euclidean_norm(&g2.flatten());
        assert!((n2 - 2.0 * n1).abs() < 1e-9 * (1.0 + n2));
    }

    #[test]
    fn protonet_estimate_uses_distance_scores() {
        let model = MetaModel::protonet(4, &[6, 3], &mut rng(11)).unwrap();
        let t = task(12, 3, (2, 5));
        let est = estimate_task_gradient(&model, &t, Algo::ProtoNet, EstimateMode::AtMeta, &no_adapt(), 0).unwrap();
        assert_eq!(est.vec.len(), 3);
        assert!(est.norm > 0.0);
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
            let mut r = vec![0.0; v.len()];
            for (rank, &i) in idx.iter().enumerate() {
                r[i] = rank as f64;
            }
            r
        }
        let ra = ranks(a);
        let rb = ranks(b);
        let n = ra.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn estimate_distances_track_exact_distances() {
        // Train a model past warm-up, then compare the pairwise distance
        // structure of estimates against exact task gradients. Both are
        // evaluated at the adapted parameters (after-adapt mode), where the
        // estimate is the head-bias block of the exact gradient; the
        // rank correlation is the qualitative claim, not an identity.
        use crate::metalearn::{meta_train_step, OuterLoopConfig};
        let mut r = rng(13);
        let dist = SyntheticDistribution::new(10, 6, 0.7, &mut r).unwrap();
        let mut model = MetaModel::anil(6, &[12], 5, &mut r).unwrap();
        let inner = InnerLoopConfig { lr: 0.5, steps: 3, head_only: true };
        let outer = OuterLoopConfig {
            lr: 0.3,
            meta_batch: 4,
            iterations: 800,
            warmup_iters: 0,
            normalize_weights: true,
            exact_head: false,
        };
        for _ in 0..800 {
            let batch: Vec<FewShotTask> = (0..4).map(|_| sample_task(&dist, 5, (5, 15), &mut r).unwrap()).collect();
            let refs: Vec<(&FewShotTask, usize)> = batch.iter().map(|t| (t, 1)).collect();
            model = meta_train_step(&model, &refs, Algo::Anil, &inner, &outer).unwrap();
        }
        let tasks: Vec<FewShotTask> = (0..10).map(|_| sample_task(&dist, 5, (5, 15), &mut r).unwrap()).collect();
        let ests: Vec<DenseVector> = tasks
            .iter()
            .map(|t| {
                estimate_task_gradient(&model, t, Algo::Anil, EstimateMode::AfterAdapt, &inner, 0)
                    .unwrap()
                    .vec
            })
            .collect();
        let exacts: Vec<DenseVector> = tasks
            .iter()
            .map(|t| exact_task_gradient(&model, t, Algo::Anil, &inner).unwrap().flatten())
            .collect();
        let mut d_est = Vec::new();
        let mut d_exact = Vec::new();
        for i in 0..tasks.len() {
            for j in (i + 1)..tasks.len() {
                d_est.push(euclidean_distance(&ests[i], &ests[j]));
                d_exact.push(euclidean_distance(&exacts[i], &exacts[j]));
            }
        }
        let rho = spearman(&d_est, &d_exact);
        assert!(rho > 0.5, "rank correlation {rho} too weak");
    }

    fn subset(indices: Vec<usize>, weights: Vec<usize>) -> WeightedSubset {
        WeightedSubset { indices, weights, dropped: Vec::new(), dropped_weights: Vec::new() }
    }

    #[test]
    fn identity_subset_has_zero_error() {
        let grads: Vec<DenseVector> = vec![vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, -1.0]];
        let s = subset(vec![0, 1, 2], vec![1, 1, 1]);
        let report = approx_error(&grads, &s, GradientSpace::Estimate).unwrap();
        assert_eq!(report.exact_error, 0.0);
        assert_eq!(report.upper_bound, 0.0);
    }

    #[test]
    fn singleton_subset_matches_hand_arithmetic() {
        let g1 = vec![1.0, 0.0];
        let g2 = vec![0.0, 2.0];
        let g3 = vec![-1.0, 1.0];
        let grads = vec![g1.clone(), g2.clone(), g3.clone()];
        let s = subset(vec![1], vec![3]);
        let report = approx_error(&grads, &s, GradientSpace::ExactGradient).unwrap();
        // sum = (0, 3); 3*g2 = (0, 6); error = ||(0, -3)|| = 3.
        assert!((report.exact_error - 3.0).abs() < 1e-12);
        // bound = ||g1-g2|| + 0 + ||g3-g2|| = sqrt(5) + sqrt(2).
        let expect = 5.0_f64.sqrt() + 2.0_f64.sqrt();
        assert!((report.upper_bound - expect).abs() < 1e-12);
        assert!(report.exact_error <= report.upper_bound);
    }

    #[test]
    fn bound_holds_on_random_instances_with_nearest_center_weights() {
        let mut r = rng(21);
        for _ in 0..50 {
            let n = r.random_range(2..=10usize);
            let dim = r.random_range(1..=4usize);
            let grads: Vec<DenseVector> = (0..n)
                .map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect())
                .collect();
            let k = r.random_range(1..=n);
            let mut indices: Vec<usize> = rand::seq::index::sample(&mut r, n, k).into_iter().collect();
            indices.sort_unstable();
            let weights = select::nearest_center_weights(&grads, &indices).unwrap();
            let s = subset(indices, weights);
            let report = approx_error(&grads, &s, GradientSpace::ExactGradient).unwrap();
            assert!(
                report.exact_error <= report.upper_bound + 1e-9,
                "error {} exceeded bound {}",
                report.exact_error,
                report.upper_bound
            );
        }
    }

    #[test]
    fn nearest_center_minimizes_triangle_bound_over_all_mappings() {
        let mut r = rng(22);
        for _ in 0..20 {
            let n = r.random_range(2..=6usize);
            let grads: Vec<DenseVector> = (0..n)
                .map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect())
                .collect();
            let k = r.random_range(1..=3.min(n));
            let indices: Vec<usize> = rand::seq::index::sample(&mut r, n, k).into_iter().collect();
            let s = subset(indices.clone(), select::nearest_center_weights(&grads, &indices).unwrap());
            let report = approx_error(&grads, &s, GradientSpace::ExactGradient).unwrap();
            // Exhaustively enumerate all k^n mappings pool -> subset and
            // compute each triangle bound sum.
            let mut best = f64::INFINITY;
            let mut assignment = vec![0usize; n];
            loop {
                let bound: f64 = (0..n)
                    .map(|j| euclidean_distance(&grads[j], &grads[indices[assignment[j]]]))
                    .sum();
                best = best.min(bound);
                // Odometer increment.
                let mut pos = 0;
                loop {
                    if pos == n {
                        break;
                    }
                    assignment[pos] += 1;
                    if assignment[pos] < k {
                        break;
                    }
                    assignment[pos] = 0;
                    pos += 1;
                }
                if pos == n {
                    break;
                }
            }
            assert!(
                (report.upper_bound - best).abs() <= 1e-9,
                "nearest-center bound {} vs exhaustive best {}",
                report.upper_bound,
                best
            );
        }
    }

    #[test]
    fn estimates_csv_round_trips() {
        let ests = vec![
            GradientEstimate::new(vec![0.5, -1.25, 3.0], 0).unwrap(),
            GradientEstimate::new(vec![0.0, 0.0, 0.0], 1).unwrap(),
            GradientEstimate::new(vec![1e-12, 2.5, -0.75], 2).unwrap(),
        ];
        let mut buf = Vec::new();
        estimates_to_csv(&ests, &mut buf).unwrap();
        let loaded = estimates_from_csv(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded, ests);
    }
}
