//! Synthetic few-shot task distribution, episodic N-way K-shot sampling, and
//! the Poisson symmetric-label-swap noise generator.
//!
//! Tasks are Gaussian clusters around per-class means drawn once per
//! distribution; the optional `allowed_classes` subset realizes the
//! reduced-class budget setting. The noise generator draws a Poisson count of
//! swaps per class (capped at a threshold), exchanges labels pairwise between
//! classes, then re-splits the example pool into support and query, so
//! mislabeled points land in both sets.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::gradest::GradientEstimate;
use crate::nn::DenseVector;

/// One labeled feature vector. `y` is the task-local label actually shown to
/// the learner; `true_y` the label before any noise, kept for diagnostics
/// only and never read by selection or training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: DenseVector,
    pub y: usize,
    pub true_y: usize,
}

/// A support set and query set of labeled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    pub support: Vec<LabeledExample>,
    pub query: Vec<LabeledExample>,
    pub way: usize,
    /// `(support shots, query shots)` per class.
    pub shots: (usize, usize),
    /// Number of label swaps the noise generator performed, if any. Purely
    /// generator-side ground truth for audits.
    pub noise_meta: Option<usize>,
}

impl FewShotTask {
    /// Checks the class-balance invariants: exactly `shots` examples per
    /// class in each split and labels spanning `0..way`.
    pub fn validate(&self) -> Result<()> {
        let (ks, kq) = self.shots;
        if self.support.len() != self.way * ks || self.query.len() != self.way * kq {
            return Err(Error::Input("task split sizes do not match way and shots".into()));
        }
        for (split, per_class) in [(&self.support, ks), (&self.query, kq)] {
            let mut counts = vec![0usize; self.way];
            for ex in split.iter() {
                if ex.y >= self.way {
                    return Err(Error::Input(format!("label {} outside way {}", ex.y, self.way)));
                }
                counts[ex.y] += 1;
            }
            if counts.iter().any(|&c| c != per_class) {
                return Err(Error::Input("class counts unbalanced".into()));
            }
        }
        Ok(())
    }

    /// Fraction of examples whose shown label differs from the original one.
    pub fn mislabel_fraction(&self) -> f64 {
        let total = self.support.len() + self.query.len();
        if total == 0 {
            return 0.0;
        }
        let bad = self
            .support
            .iter()
            .chain(&self.query)
            .filter(|e| e.y != e.true_y)
            .count();
        bad as f64 / total as f64
    }
}

/// Isotropic Gaussian clusters in feature space, one mean per global class.
#[derive(Debug, Clone)]
pub struct SyntheticDistribution {
    num_classes: usize,
    feature_dim: usize,
    class_means: Vec<DenseVector>,
    within_class_std: f64,
    allowed_classes: Option<Vec<usize>>,
}

impl SyntheticDistribution {
    /// Draws class means uniformly in `[-1, 1]^dim` from the given generator.
    pub fn new<R: Rng>(
        num_classes: usize,
        feature_dim: usize,
        within_class_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 || feature_dim == 0 {
            return Err(Error::Config("distribution needs >= 2 classes and a positive feature dim".into()));
        }
        // std = 0 is allowed as the degenerate case where every example
        // equals its class mean.
        if !(within_class_std >= 0.0) || !within_class_std.is_finite() {
            return Err(Error::Config("within-class std must be finite and >= 0".into()));
        }
        let class_means: Vec<DenseVector> = (0..num_classes)
            .map(|_| (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        for i in 0..class_means.len() {
            for j in (i + 1)..class_means.len() {
                if class_means[i] == class_means[j] {
                    return Err(Error::Config("class means must be pairwise distinct".into()));
                }
            }
        }
        Ok(SyntheticDistribution {
            num_classes,
            feature_dim,
            class_means,
            within_class_std,
            allowed_classes: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn within_class_std(&self) -> f64 {
        self.within_class_std
    }

    pub fn class_mean(&self, class: usize) -> &DenseVector {
        &self.class_means[class]
    }

    pub fn allowed_classes(&self) -> Option<&[usize]> {
        self.allowed_classes.as_deref()
    }

    /// Restricts task sampling to the given global classes (class-budget
    /// setting). Evaluation callers typically keep an unrestricted clone.
    pub fn with_allowed_classes(mut self, allowed: Vec<usize>) -> Result<Self> {
        if allowed.is_empty() || allowed.iter().any(|&c| c >= self.num_classes) {
            return Err(Error::Config("allowed classes must be a nonempty subset of all classes".into()));
        }
        self.allowed_classes = Some(allowed);
        Ok(self)
    }

    /// Drops any class-budget restriction.
    pub fn unrestricted(mut self) -> Self {
        self.allowed_classes = None;
        self
    }

    fn candidate_classes(&self) -> Vec<usize> {
        match &self.allowed_classes {
            Some(a) => a.clone(),
            None => (0..self.num_classes).collect(),
        }
    }
}

/// Poisson rate and per-class swap cap for the noise generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub lambda: f64,
    /// Per-class cap on initiated swaps; must not exceed the per-class
    /// example count of the tasks it is applied to.
    pub threshold: usize,
}

impl NoiseConfig {
    pub fn new(lambda: f64, threshold: usize) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Config("noise lambda must be >= 0".into()));
        }
        Ok(NoiseConfig { lambda, threshold })
    }
}

/// An ordered collection of tasks plus, once estimated, per-task gradient
/// estimates aligned with the task indices.
#[derive(Debug, Clone, Default)]
pub struct TaskPool {
    pub tasks: Vec<FewShotTask>,
    pub estimates: Vec<GradientEstimate>,
}

impl TaskPool {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn is_estimated(&self) -> bool {
        self.estimates.len() == self.tasks.len() && !self.tasks.is_empty()
    }
}

/// Samples one N-way K-shot episode: N distinct classes drawn without
/// replacement (from the allowed subset when present, in draw order as
/// task-local labels 0..N-1), each example `x = mean + N(0, std^2 I)`.
pub fn sample_task<R: Rng>(
    dist: &SyntheticDistribution,
    way: usize,
    shots: (usize, usize),
    rng: &mut R,
) -> Result<FewShotTask> {
    let candidates = dist.candidate_classes();
    if way < 2 {
        return Err(Error::Config("way must be >= 2".into()));
    }
    if way > candidates.len() {
        return Err(Error::Config(format!(
            "way {} exceeds the {} available classes",
            way,
            candidates.len()
        )));
    }
    if shots.0 == 0 || shots.1 == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let picks = rand::seq::index::sample(rng, candidates.len(), way);
    let classes: Vec<usize> = picks.iter().map(|i| candidates[i]).collect();

    let mut draw = |class: usize, local: usize| -> LabeledExample {
        let mean = dist.class_mean(class);
        let x: DenseVector = mean
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                m + dist.within_class_std() * z
            })
            .collect();
        LabeledExample { x, y: local, true_y: local }
    };

    let mut support = Vec::with_capacity(way * shots.0);
    let mut query = Vec::with_capacity(way * shots.1);
    for (local, &class) in classes.iter().enumerate() {
        for _ in 0..shots.0 {
            support.push(draw(class, local));
        }
        for _ in 0..shots.1 {
            query.push(draw(class, local));
        }
    }
    let task = FewShotTask { support, query, way, shots, noise_meta: None };
    task.validate()?;
    Ok(task)
}

/// Applies the symmetric label-swap noise mechanism to a task.
///
/// Per class `i` a count is drawn from `Poisson(lambda)` and capped at the
/// threshold; each count picks a partner class uniformly among the others
/// (repeats allowed) and exchanges the labels of one not-yet-swapped example
/// of each class. When either side has no unswapped example left the swap is
/// skipped. The merged example pool is then re-split per-label into support
/// and query, so mislabeled points can land in both sets.
pub fn inject_noise<R: Rng>(task: FewShotTask, cfg: &NoiseConfig, rng: &mut R) -> Result<FewShotTask> {
    if task.way < 2 {
        return Err(Error::Input("noise injection needs way >= 2".into()));
    }
    let (ks, kq) = task.shots;
    if cfg.threshold > ks + kq {
        return Err(Error::Config(format!(
            "noise threshold {} exceeds the {} examples per class",
            cfg.threshold,
            ks + kq
        )));
    }
    let way = task.way;
    let mut pool: Vec<LabeledExample> = task.support.into_iter().chain(task.query).collect();
    let mut swapped = vec![false; pool.len()];

    let mut counts = vec![0usize; way];
    for c in counts.iter_mut() {
        let draw = if cfg.lambda == 0.0 {
            0
        } else {
            let poisson = Poisson::new(cfg.lambda)
                .map_err(|e| Error::Config(format!("bad poisson rate: {e}")))?;
            let v: f64 = poisson.sample(rng);
            v as usize
        };
        *c = draw.min(cfg.threshold);
    }

    let pick_unswapped = |label: usize, pool: &[LabeledExample], swapped: &[bool], rng: &mut R| -> Option<usize> {
        let candidates: Vec<usize> = (0..pool.len())
            .filter(|&i| !swapped[i] && pool[i].y == label)
            .collect();
        if candidates.is_empty() {
            None
        } else {
            Some(candidates[rng.random_range(0..candidates.len())])
        }
    };

    let mut swaps = 0usize;
    for class in 0..way {
        for _ in 0..counts[class] {
            let partner_offset = rng.random_range(0..way - 1);
            let partner = if partner_offset >= class { partner_offset + 1 } else { partner_offset };
            let a = pick_unswapped(class, &pool, &swapped, rng);
            let b = pick_unswapped(partner, &pool, &swapped, rng);
            match (a, b) {
                (Some(a), Some(b)) => {
                    let (ya, yb) = (pool[a].y, pool[b].y);
                    pool[a].y = yb;
                    pool[b].y = ya;
                    swapped[a] = true;
                    swapped[b] = true;
                    swaps += 1;
                }
                // One side exhausted; nothing left to exchange for this pair.
                _ => {}
            }
        }
    }

    // Stratified re-split on current labels keeps the per-class counts of
    // both splits intact.
    let mut support = Vec::with_capacity(way * ks);
    let mut query = Vec::with_capacity(way * kq);
    for label in 0..way {
        let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].y == label).collect();
        debug_assert_eq!(members.len(), ks + kq);
        members.shuffle(rng);
        for (n, &i) in members.iter().enumerate() {
            if n < ks {
                support.push(pool[i].clone());
            } else {
                query.push(pool[i].clone());
            }
        }
    }
    let out = FewShotTask { support, query, way, shots: (ks, kq), noise_meta: Some(swaps) };
    out.validate()?;
    Ok(out)
}

/// Draws `pool_size` tasks, injecting noise per task when configured.
/// Gradient-estimate slots start empty.
pub fn fill_pool<R: Rng>(
    dist: &SyntheticDistribution,
    way: usize,
    shots: (usize, usize),
    pool_size: usize,
    noise: Option<&NoiseConfig>,
    rng: &mut R,
) -> Result<TaskPool> {
    if pool_size == 0 {
        return Err(Error::Config("pool size must be >= 1".into()));
    }
    let mut tasks = Vec::with_capacity(pool_size);
    for _ in 0..pool_size {
        let mut task = sample_task(dist, way, shots, rng)?;
        if let Some(cfg) = noise {
            task = inject_noise(task, cfg, rng)?;
        }
        tasks.push(task);
    }
    Ok(TaskPool { tasks, estimates: Vec::new() })
}

/// Selected-subset size for a pool at a given selection ratio, rounded down.
pub fn k_from_ratio(pool_size: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config("selection ratio must be in (0, 1]".into()));
    }
    Ok(((pool_size as f64 * ratio).floor() as usize).max(1))
}

/// Monte-Carlo calibration of the Poisson rate that produces a target mean
/// mislabel fraction for the given task geometry.
///
/// Bisects on the rate, probing each candidate with freshly generated tasks
/// (features are irrelevant to labels, so a one-dimensional dummy
/// distribution keeps it cheap). The mean mislabel fraction is monotone in
/// the rate, which makes the sweep well posed.
pub fn calibrate_lambda(
    way: usize,
    shots: (usize, usize),
    threshold: usize,
    target_fraction: f64,
    tasks_per_probe: usize,
    seed: u64,
) -> Result<f64> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(Error::Config("target mislabel fraction must be in (0, 1)".into()));
    }
    let probe = |lambda: f64| -> Result<f64> {
        mean_mislabel_fraction(way, shots, &NoiseConfig { lambda, threshold }, tasks_per_probe, seed)
    };
    // Establish an upper bracket; cap-bound noise saturates, so bail out if
    // the target is not reachable with this threshold.
    let mut hi = 1.0;
    while probe(hi)? < target_fraction {
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::Config(format!(
                "target fraction {target_fraction} unreachable with threshold {threshold}"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if probe(mid)? < target_fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Mean mislabel fraction of freshly generated noisy tasks; the Monte-Carlo
/// oracle behind [`calibrate_lambda`] and its verification tests.
pub fn mean_mislabel_fraction(
    way: usize,
    shots: (usize, usize),
    cfg: &NoiseConfig,
    num_tasks: usize,
    seed: u64,
) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Labels do not depend on the feature geometry.
    let dist = SyntheticDistribution::new(way.max(2), 1, 1.0, &mut rng)?;
    let mut total = 0.0;
    for _ in 0..num_tasks {
        let task = sample_task(&dist, way, shots, &mut rng)?;
        let noisy = inject_noise(task, cfg, &mut rng)?;
        total += noisy.mislabel_fraction();
    }
    Ok(total / num_tasks as f64)
}

/// Writes a pool as CSV, one row per example:
/// `task_id,split,label,true_label,f0..f{d-1}`.
pub fn pool_to_csv<W: Write>(pool: &TaskPool, w: &mut W) -> Result<()> {
    let dim = pool
        .tasks
        .first()
        .and_then(|t| t.support.first())
        .map(|e| e.x.len())
        .unwrap_or(0);
    let features: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    writeln!(w, "task_id,split,label,true_label,{}", features.join(","))?;
    for (id, task) in pool.tasks.iter().enumerate() {
        for (split, examples) in [("s", &task.support), ("q", &task.query)] {
            for ex in examples.iter() {
                let feats: Vec<String> = ex.x.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{},{},{},{},{}", id, split, ex.y, ex.true_y, feats.join(","))?;
            }
        }
    }
    Ok(())
}

/// Reads a pool from the CSV format written by [`pool_to_csv`]. Way and
/// shots are reconstructed from the per-task label counts; `noise_meta` is
/// recovered from label mismatches (half the mismatch count).
pub fn pool_from_csv<R: BufRead>(r: &mut R) -> Result<TaskPool> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty pool CSV".into()))?
        .map_err(Error::Io)?;
    if !header.starts_with("task_id,split,label,true_label") {
        return Err(Error::Parse("unexpected pool CSV header".into()));
    }
    struct Partial {
        support: Vec<LabeledExample>,
        query: Vec<LabeledExample>,
    }
    let mut order: Vec<usize> = Vec::new();
    let mut partials: Vec<Partial> = Vec::new();
    let mut index_of = std::collections::HashMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let mut field = |name: &str| {
            it.next()
                .ok_or_else(|| Error::Parse(format!("pool CSV line {}: missing {name}", lineno + 2)))
        };
        let task_id: usize = field("task_id")?.parse().map_err(|_| Error::Parse("bad task_id".into()))?;
        let split = field("split")?.to_string();
        let label: usize = field("label")?.parse().map_err(|_| Error::Parse("bad label".into()))?;
        let true_label: usize = field("true_label")?.parse().map_err(|_| Error::Parse("bad true_label".into()))?;
        let x: DenseVector = it
            .map(|v| v.parse::<f64>().map_err(|_| Error::Parse("bad feature value".into())))
            .collect::<Result<_>>()?;
        let slot = *index_of.entry(task_id).or_insert_with(|| {
            order.push(task_id);
            partials.push(Partial { support: Vec::new(), query: Vec::new() });
            partials.len() - 1
        });
        let ex = LabeledExample { x, y: label, true_y: true_label };
        match split.as_str() {
            "s" => partials[slot].support.push(ex),
            "q" => partials[slot].query.push(ex),
            other => return Err(Error::Parse(format!("bad split tag {other:?}"))),
        }
    }
    let mut tasks = Vec::with_capacity(partials.len());
    for p in partials {
        let way = p
            .support
            .iter()
            .map(|e| e.y)
            .max()
            .ok_or_else(|| Error::Parse("task with empty support".into()))?
            + 1;
        if p.support.len() % way != 0 || p.query.len() % way != 0 {
            return Err(Error::Parse("task splits not divisible by way".into()));
        }
        let shots = (p.support.len() / way, p.query.len() / way);
        let mismatches = p
            .support
            .iter()
            .chain(&p.query)
            .filter(|e| e.y != e.true_y)
            .count();
        let task = FewShotTask {
            support: p.support,
            query: p.query,
            way,
            shots,
            noise_meta: if mismatches > 0 { Some(mismatches / 2) } else { None },
        };
        task.validate()?;
        tasks.push(task);
    }
    Ok(TaskPool { tasks, estimates: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn dist_with_std(seed: u64, classes: usize, dim: usize, std: f64) -> SyntheticDistribution {
        SyntheticDistribution::new(classes, dim, std, &mut rng(seed)).unwrap()
    }

    #[test]
    fn zero_std_examples_equal_class_means() {
        let dist = dist_with_std(0, 6, 3, 0.0);
        let task = sample_task(&dist, 3, (2, 2), &mut rng(1)).unwrap();
        for ex in task.support.iter().chain(&task.query) {
            let hit = (0..dist.num_classes()).any(|c| dist.class_mean(c) == &ex.x);
            assert!(hit, "example must coincide with a class mean at degenerate std");
        }
    }

    #[test]
    fn counting_invariants_five_way() {
        let dist = dist_with_std(2, 10, 4, 0.5);
        let task = sample_task(&dist, 5, (5, 15), &mut rng(3)).unwrap();
        assert_eq!(task.support.len(), 25);
        assert_eq!(task.query.len(), 75);
        for class in 0..5 {
            assert_eq!(task.support.iter().filter(|e| e.y == class).count(), 5);
            assert_eq!(task.query.iter().filter(|e| e.y == class).count(), 15);
        }
    }

    #[test]
    fn forced_choice_uses_the_same_global_classes() {
        let dist = dist_with_std(4, 9, 3, 0.0).with_allowed_classes(vec![1, 3, 4, 6, 8]).unwrap();
        let mut r = rng(5);
        let mut seen: Option<Vec<usize>> = None;
        for _ in 0..10 {
            let task = sample_task(&dist, 5, (1, 1), &mut r).unwrap();
            // Recover global classes by exact mean match (degenerate std).
            let mut classes: Vec<usize> = task
                .support
                .iter()
                .map(|e| (0..dist.num_classes()).find(|&c| dist.class_mean(c) == &e.x).unwrap())
                .collect();
            classes.sort_unstable();
            match &seen {
                None => seen = Some(classes),
                Some(prev) => assert_eq!(prev, &classes),
            }
        }
        assert_eq!(seen.unwrap(), vec![1, 3, 4, 6, 8]);
    }

    #[test]
    fn way_exceeding_classes_is_config_error() {
        let dist = dist_with_std(6, 4, 2, 0.5);
        assert!(matches!(
            sample_task(&dist, 5, (1, 1), &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_lambda_leaves_labels_intact() {
        let dist = dist_with_std(7, 8, 3, 0.5);
        let task = sample_task(&dist, 4, (3, 5), &mut rng(8)).unwrap();
        let noisy = inject_noise(task, &NoiseConfig { lambda: 0.0, threshold: 2 }, &mut rng(9)).unwrap();
        assert_eq!(noisy.noise_meta, Some(0));
        assert!(noisy.support.iter().chain(&noisy.query).all(|e| e.y == e.true_y));
        noisy.validate().unwrap();
    }

    #[test]
    fn cap_binds_at_large_lambda() {
        // Poisson(100) >= 2 is essentially certain, so each of the 5 classes
        // initiates exactly 2 swaps.
        let dist = dist_with_std(10, 8, 3, 0.5);
        let task = sample_task(&dist, 5, (5, 15), &mut rng(11)).unwrap();
        let noisy = inject_noise(task, &NoiseConfig { lambda: 100.0, threshold: 2 }, &mut rng(12)).unwrap();
        assert_eq!(noisy.noise_meta, Some(10));
    }

    #[test]
    fn threshold_above_shots_is_config_error() {
        let dist = dist_with_std(13, 8, 3, 0.5);
        let task = sample_task(&dist, 3, (2, 2), &mut rng(14)).unwrap();
        assert!(matches!(
            inject_noise(task, &NoiseConfig { lambda: 1.0, threshold: 5 }, &mut rng(15)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn noise_preserves_features_and_label_counts_and_is_symmetric() {
        let dist = dist_with_std(16, 8, 4, 0.7);
        let mut r = rng(17);
        for _ in 0..20 {
            let task = sample_task(&dist, 5, (5, 15), &mut r).unwrap();
            let before: Vec<(Vec<u64>, usize)> = task
                .support
                .iter()
                .chain(&task.query)
                .map(|e| (e.x.iter().map(|v| v.to_bits()).collect(), e.true_y))
                .collect();
            let noisy = inject_noise(task, &NoiseConfig { lambda: 2.0, threshold: 4 }, &mut r).unwrap();
            noisy.validate().unwrap();
            let mut after: Vec<(Vec<u64>, usize)> = noisy
                .support
                .iter()
                .chain(&noisy.query)
                .map(|e| (e.x.iter().map(|v| v.to_bits()).collect(), e.true_y))
                .collect();
            let mut sorted_before = before;
            sorted_before.sort();
            after.sort();
            assert_eq!(sorted_before, after, "feature/true-label multiset must be preserved");

            // Swaps are mutual: every a->b relabeling has a matching b->a.
            let changes: Vec<(usize, usize)> = noisy
                .support
                .iter()
                .chain(&noisy.query)
                .filter(|e| e.y != e.true_y)
                .map(|e| (e.true_y, e.y))
                .collect();
            assert_eq!(changes.len() % 2, 0);
            assert_eq!(changes.len() / 2, noisy.noise_meta.unwrap());
            for &(a, b) in &changes {
                let fwd = changes.iter().filter(|&&c| c == (a, b)).count();
                let rev = changes.iter().filter(|&&c| c == (b, a)).count();
                assert_eq!(fwd, rev, "label exchanges must pair up");
            }
        }
    }

    #[test]
    fn pool_generation_is_bit_reproducible() {
        let dist = dist_with_std(20, 10, 4, 0.6);
        let cfg = NoiseConfig { lambda: 1.5, threshold: 3 };
        let a = fill_pool(&dist, 5, (5, 15), 8, Some(&cfg), &mut rng(21)).unwrap();
        let b = fill_pool(&dist, 5, (5, 15), 8, Some(&cfg), &mut rng(21)).unwrap();
        assert_eq!(a.tasks, b.tasks);
    }

    #[test]
    fn singleton_pool() {
        let dist = dist_with_std(22, 6, 2, 0.5);
        let pool = fill_pool(&dist, 3, (2, 2), 1, None, &mut rng(23)).unwrap();
        assert_eq!(pool.len(), 1);
        assert!(pool.estimates.is_empty());
    }

    #[test]
    fn selection_ratio_matches_reference_configs() {
        assert_eq!(k_from_ratio(3200, 0.30).unwrap(), 960);
        assert_eq!(k_from_ratio(256, 0.30).unwrap(), 76);
    }

    #[test]
    fn calibrated_lambda_hits_target_fraction() {
        let lambda = calibrate_lambda(5, (5, 15), 6, 0.25, 400, 99).unwrap();
        let measured = mean_mislabel_fraction(5, (5, 15), &NoiseConfig { lambda, threshold: 6 }, 10_000, 123).unwrap();
        assert!(
            (measured - 0.25).abs() <= 0.02,
            "calibrated lambda {lambda} gave fraction {measured}"
        );
    }

    #[test]
    fn pool_csv_round_trips() {
        let dist = dist_with_std(30, 8, 3, 0.5);
        let cfg = NoiseConfig { lambda: 2.0, threshold: 3 };
        let pool = fill_pool(&dist, 4, (2, 3), 5, Some(&cfg), &mut rng(31)).unwrap();
        let mut buf = Vec::new();
        pool_to_csv(&pool, &mut buf).unwrap();
        let loaded = pool_from_csv(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), pool.len());
        for (a, b) in pool.tasks.iter().zip(&loaded.tasks) {
            assert_eq!(a.way, b.way);
            assert_eq!(a.shots, b.shots);
            assert_eq!(a.support, b.support);
            assert_eq!(a.query, b.query);
        }
    }
}
