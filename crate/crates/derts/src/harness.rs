//! Experiment orchestration: configs, samplers, the training loop over
//! successive task pools, the noise suite, and CSV reporting.
//!
//! Determinism contract: everything that affects training flows from named
//! ChaCha streams derived from the run seed, so a `(config, seed)` pair
//! reproduces byte-identical result rows. Wall-clock timings are measured
//! but written to a separate metrics sidecar, never into the deterministic
//! results CSV.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradest::{approx_error, estimate_pool, exact_task_gradient, EstimateMode, GradientSpace};
use crate::metalearn::{
    evaluate, meta_train_step_with_loss, Algo, InnerLoopConfig, MetaModel, OuterLoopConfig,
};
use crate::nn::DenseVector;
use crate::select::{
    derts_round, nearest_center_weights, SelectMode, SelectionConfig, ThresholdSource, WeightedSubset,
};
use crate::tasks::{
    calibrate_lambda, fill_pool, k_from_ratio, sample_task, FewShotTask, NoiseConfig,
    SyntheticDistribution, TaskPool,
};

/// Task-sampling strategy for the selection phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// Weighted facility-location selection.
    Derts,
    /// Same selection, weights forced to 1 (ablation).
    DertsNoWeights,
    /// Uniform subset of the pool at matched budget.
    Random,
    /// The whole pool in order with unit weights.
    FullPool,
}

impl Sampler {
    pub fn label(&self) -> &'static str {
        match self {
            Sampler::Derts => "derts",
            Sampler::DertsNoWeights => "derts-noweights",
            Sampler::Random => "random",
            Sampler::FullPool => "full-pool",
        }
    }
}

impl std::str::FromStr for Sampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derts" => Ok(Sampler::Derts),
            "derts-noweights" => Ok(Sampler::DertsNoWeights),
            "random" => Ok(Sampler::Random),
            "full-pool" => Ok(Sampler::FullPool),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

/// How a selected subset is arranged into meta-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOrder {
    /// Sequential slices in greedy selection order.
    Selection,
    /// Seeded uniform shuffle before batching.
    Shuffled,
    /// Strided interleave: batch `b` takes selection positions `b`,
    /// `b + num_batches`, ... so every batch spans the coverage sequence
    /// (early dense-cluster centers and late outliers alike).
    Strided,
}

impl std::str::FromStr for BatchOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selection" => Ok(BatchOrder::Selection),
            "shuffled" => Ok(BatchOrder::Shuffled),
            "strided" => Ok(BatchOrder::Strided),
            other => Err(Error::Config(format!("unknown batch order {other:?}"))),
        }
    }
}

/// Which experiment family `run` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// One sampler, as configured.
    Single,
    /// Noisy-task comparison: selection with filter, without filter, and
    /// random sampling on the same seeded pools.
    Noise,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Suite::Single),
            "noise" => Ok(Suite::Noise),
            other => Err(Error::Config(format!("unknown suite {other:?}"))),
        }
    }
}

/// Full experiment description, parsed from a flat `key = value` file.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub algo: Algo,
    pub way: usize,
    pub support_shots: usize,
    pub query_shots: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub class_std: f64,
    /// Fraction of global classes available for meta-training task
    /// generation (class-budget setting); evaluation always uses all.
    pub class_budget_fraction: f64,
    pub hidden_dims: Vec<usize>,
    pub pool_size: usize,
    pub k_select: Option<usize>,
    pub select_ratio: f64,
    pub select_mode: SelectMode,
    pub sg_epsilon: f64,
    pub noise: bool,
    pub noise_lambda: f64,
    /// When set, the Poisson rate is Monte-Carlo calibrated to this mean
    /// mislabel fraction and `noise_lambda` is ignored.
    pub noise_target: Option<f64>,
    pub noise_t: usize,
    /// Noisy-setting flag gating the gradient-norm filter; defaults to the
    /// value of `noise`.
    pub filter: Option<bool>,
    pub tau: f64,
    pub threshold_source: ThresholdSource,
    pub estimator: EstimateMode,
    /// Adaptation steps used when estimating task gradients (after-adapt
    /// mode); defaults to `inner_steps`. More steps bind the head to the
    /// task's labels harder, which sharpens the per-task signal without
    /// changing the training loop.
    pub estimate_steps: Option<usize>,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub head_only: bool,
    pub outer_lr: f64,
    pub meta_batch: usize,
    pub iterations: usize,
    pub warmup_iters: usize,
    pub normalize_weights: bool,
    pub exact_head: bool,
    pub eval_every: usize,
    pub eval_tasks: usize,
    pub seeds: Vec<u64>,
    pub sampler: Sampler,
    pub suite: Suite,
    pub batch_order: BatchOrder,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algo: Algo::Anil,
            way: 5,
            support_shots: 5,
            query_shots: 15,
            feature_dim: 16,
            num_classes: 20,
            class_std: 0.8,
            class_budget_fraction: 1.0,
            hidden_dims: vec![32, 32],
            pool_size: 256,
            k_select: None,
            select_ratio: 0.30,
            select_mode: SelectMode::StochasticGreedy,
            sg_epsilon: 0.01,
            noise: false,
            noise_lambda: 0.0,
            noise_target: None,
            noise_t: 6,
            filter: None,
            tau: 1.25,
            threshold_source: ThresholdSource::PoolMean,
            estimator: EstimateMode::AtMeta,
            estimate_steps: None,
            inner_lr: 0.5,
            inner_steps: 3,
            head_only: true,
            outer_lr: 0.5,
            meta_batch: 8,
            iterations: 250,
            warmup_iters: 50,
            normalize_weights: true,
            exact_head: false,
            eval_every: 20,
            eval_tasks: 100,
            seeds: vec![1, 2, 3, 4, 5],
            sampler: Sampler::Derts,
            suite: Suite::Single,
            batch_order: BatchOrder::Selection,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("expected on/off, got {other:?}"))),
    }
}

impl ExperimentConfig {
    /// Parses a flat `key = value` config. `#` starts a comment; unknown
    /// keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} value {value:?}", lineno + 1));
            match key {
                "algo" => cfg.algo = value.parse()?,
                "way" => cfg.way = value.parse().map_err(|_| bad("way"))?,
                "support_shots" => cfg.support_shots = value.parse().map_err(|_| bad("support_shots"))?,
                "query_shots" => cfg.query_shots = value.parse().map_err(|_| bad("query_shots"))?,
                "feature_dim" => cfg.feature_dim = value.parse().map_err(|_| bad("feature_dim"))?,
                "num_classes" => cfg.num_classes = value.parse().map_err(|_| bad("num_classes"))?,
                "class_std" => cfg.class_std = value.parse().map_err(|_| bad("class_std"))?,
                "class_budget_fraction" => {
                    cfg.class_budget_fraction = value.parse().map_err(|_| bad("class_budget_fraction"))?
                }
                "hidden_dims" => {
                    cfg.hidden_dims = value
                        .split(',')
                        .map(|d| d.trim().parse().map_err(|_| bad("hidden_dims")))
                        .collect::<Result<_>>()?
                }
                "pool_size" => cfg.pool_size = value.parse().map_err(|_| bad("pool_size"))?,
                "k_select" => cfg.k_select = Some(value.parse().map_err(|_| bad("k_select"))?),
                "select_ratio" => cfg.select_ratio = value.parse().map_err(|_| bad("select_ratio"))?,
                "select_mode" => cfg.select_mode = value.parse()?,
                "sg_epsilon" => cfg.sg_epsilon = value.parse().map_err(|_| bad("sg_epsilon"))?,
                "noise" => cfg.noise = parse_bool(value)?,
                "noise_lambda" => cfg.noise_lambda = value.parse().map_err(|_| bad("noise_lambda"))?,
                "noise_target" => cfg.noise_target = Some(value.parse().map_err(|_| bad("noise_target"))?),
                "noise_t" => cfg.noise_t = value.parse().map_err(|_| bad("noise_t"))?,
                "filter" => cfg.filter = Some(parse_bool(value)?),
                "tau" => cfg.tau = value.parse().map_err(|_| bad("tau"))?,
                "threshold_source" => {
                    cfg.threshold_source = match value {
                        "pool" => ThresholdSource::PoolMean,
                        "subset" => ThresholdSource::SubsetMean,
                        _ => return Err(bad("threshold_source")),
                    }
                }
                "estimator" => cfg.estimator = value.parse()?,
                "estimate_steps" => cfg.estimate_steps = Some(value.parse().map_err(|_| bad("estimate_steps"))?),
                "inner_lr" => cfg.inner_lr = value.parse().map_err(|_| bad("inner_lr"))?,
                "inner_steps" => cfg.inner_steps = value.parse().map_err(|_| bad("inner_steps"))?,
                "head_only" => cfg.head_only = parse_bool(value)?,
                "outer_lr" => cfg.outer_lr = value.parse().map_err(|_| bad("outer_lr"))?,
                "meta_batch" => cfg.meta_batch = value.parse().map_err(|_| bad("meta_batch"))?,
                "iterations" => cfg.iterations = value.parse().map_err(|_| bad("iterations"))?,
                "warmup_iters" => cfg.warmup_iters = value.parse().map_err(|_| bad("warmup_iters"))?,
                "normalize_weights" => cfg.normalize_weights = parse_bool(value)?,
                "exact_head" => cfg.exact_head = parse_bool(value)?,
                "eval_every" => cfg.eval_every = value.parse().map_err(|_| bad("eval_every"))?,
                "eval_tasks" => cfg.eval_tasks = value.parse().map_err(|_| bad("eval_tasks"))?,
                "seeds" => {
                    cfg.seeds = value
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| bad("seeds")))
                        .collect::<Result<_>>()?
                }
                "sampler" => cfg.sampler = value.parse()?,
                "suite" => cfg.suite = value.parse()?,
                "batch_order" => cfg.batch_order = value.parse()?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::Config("way must be >= 2".into()));
        }
        if self.support_shots == 0 || self.query_shots == 0 {
            return Err(Error::Config("shots must be positive".into()));
        }
        if !(self.select_ratio > 0.0 && self.select_ratio <= 1.0) {
            return Err(Error::Config("select_ratio must be in (0, 1]".into()));
        }
        if !(self.class_budget_fraction > 0.0 && self.class_budget_fraction <= 1.0) {
            return Err(Error::Config("class_budget_fraction must be in (0, 1]".into()));
        }
        if self.allowed_class_count() < self.way {
            return Err(Error::Config("class budget leaves fewer classes than the task way".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("hidden_dims must be nonempty".into()));
        }
        if self.pool_size == 0 {
            return Err(Error::Config("pool_size must be >= 1".into()));
        }
        let k = self.effective_k()?;
        if k == 0 || k > self.pool_size {
            return Err(Error::Config(format!("k_select {k} must be in 1..=pool_size")));
        }
        if !(self.sg_epsilon > 0.0 && self.sg_epsilon < 1.0) {
            return Err(Error::Config("sg_epsilon must be in (0, 1)".into()));
        }
        if self.noise_t > self.support_shots + self.query_shots {
            return Err(Error::Config("noise_t exceeds examples per class".into()));
        }
        if let Some(t) = self.noise_target {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config("noise_target must be in (0, 1)".into()));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.eval_every == 0 || self.eval_tasks == 0 {
            return Err(Error::Config("eval_every and eval_tasks must be positive".into()));
        }
        self.inner_cfg().validate()?;
        self.outer_cfg().validate()?;
        Ok(())
    }

    pub fn effective_k(&self) -> Result<usize> {
        match self.k_select {
            Some(k) => Ok(k),
            None => k_from_ratio(self.pool_size, self.select_ratio),
        }
    }

    pub fn allowed_class_count(&self) -> usize {
        ((self.num_classes as f64 * self.class_budget_fraction).ceil() as usize)
            .clamp(1, self.num_classes)
    }

    pub fn shots(&self) -> (usize, usize) {
        (self.support_shots, self.query_shots)
    }

    pub fn inner_cfg(&self) -> InnerLoopConfig {
        InnerLoopConfig { lr: self.inner_lr, steps: self.inner_steps, head_only: self.head_only }
    }

    /// Inner-loop settings for the gradient-estimation pass.
    pub fn estimate_inner_cfg(&self) -> InnerLoopConfig {
        InnerLoopConfig {
            steps: self.estimate_steps.unwrap_or(self.inner_steps),
            ..self.inner_cfg()
        }
    }

    pub fn outer_cfg(&self) -> OuterLoopConfig {
        OuterLoopConfig {
            lr: self.outer_lr,
            meta_batch: self.meta_batch,
            iterations: self.iterations,
            warmup_iters: self.warmup_iters,
            normalize_weights: self.normalize_weights,
            exact_head: self.exact_head,
        }
    }

    /// Resolves the noise generator settings, Monte-Carlo calibrating the
    /// rate when a target mislabel fraction is configured.
    pub fn resolved_noise(&self) -> Result<Option<NoiseConfig>> {
        if !self.noise {
            return Ok(None);
        }
        let lambda = match self.noise_target {
            Some(target) => calibrate_lambda(
                self.way,
                self.shots(),
                self.noise_t,
                target,
                2000,
                CALIBRATION_SEED,
            )?,
            None => self.noise_lambda,
        };
        Ok(Some(NoiseConfig { lambda, threshold: self.noise_t }))
    }

    pub fn filter_enabled(&self) -> bool {
        self.filter.unwrap_or(self.noise)
    }

    /// Evaluation checkpoints: the warm-up boundary, every `eval_every`
    /// post-warm-up steps, the 10%/30%/100% budget marks, and the final
    /// iteration.
    pub fn checkpoints(&self) -> BTreeSet<usize> {
        let mut points = BTreeSet::new();
        let w = self.warmup_iters;
        let total = self.iterations;
        if w > 0 {
            points.insert(w);
        }
        for mark in self.budget_marks() {
            points.insert(mark);
        }
        let mut i = w + self.eval_every;
        while i <= total {
            points.insert(i);
            i += self.eval_every;
        }
        points.insert(total);
        points
    }

    /// Budget marks used by trend comparisons: 10%, 30%, 100% of the
    /// post-warm-up budget.
    pub fn budget_marks(&self) -> [usize; 3] {
        let w = self.warmup_iters;
        let span = self.iterations - w;
        let mark = |q: f64| (w + ((span as f64) * q).ceil() as usize).clamp(w + 1, self.iterations);
        [mark(0.1), mark(0.3), self.iterations]
    }
}

/// One metrics row per evaluation checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub sampler: String,
    pub iter: usize,
    pub train_loss: f64,
    pub eval_acc: f64,
    pub eval_ci: f64,
    /// Approximation error of the most recent pool's selection (nearest-
    /// center weights in the reported space, exact-gradient space for pools
    /// of at most [`EXACT_EPS_MAX_POOL`] tasks, estimate space otherwise).
    /// NaN during warm-up.
    pub eps_exact: f64,
    pub eps_bound: f64,
    pub select_time_s: f64,
    pub train_time_s: f64,
    /// Seconds since the seed run started; sidecar-only, like the other
    /// timing fields.
    pub wallclock_s: f64,
}

/// Ground-truth audit of one filtered pool: generator-side swap counts
/// among dropped versus kept subset tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolAudit {
    pub seed: u64,
    pub pool_index: usize,
    pub dropped_tasks: usize,
    pub kept_tasks: usize,
    pub dropped_swaps: usize,
    pub kept_swaps: usize,
}

/// Aggregated audit over many pools.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditSummary {
    pub pools: usize,
    pub dropped_tasks: usize,
    pub kept_tasks: usize,
    pub mean_swaps_dropped: f64,
    pub mean_swaps_kept: f64,
}

pub fn summarize_audits(audits: &[PoolAudit]) -> AuditSummary {
    let dropped_tasks: usize = audits.iter().map(|a| a.dropped_tasks).sum();
    let kept_tasks: usize = audits.iter().map(|a| a.kept_tasks).sum();
    let dropped_swaps: usize = audits.iter().map(|a| a.dropped_swaps).sum();
    let kept_swaps: usize = audits.iter().map(|a| a.kept_swaps).sum();
    AuditSummary {
        pools: audits.len(),
        dropped_tasks,
        kept_tasks,
        mean_swaps_dropped: if dropped_tasks > 0 { dropped_swaps as f64 / dropped_tasks as f64 } else { 0.0 },
        mean_swaps_kept: if kept_tasks > 0 { kept_swaps as f64 / kept_tasks as f64 } else { 0.0 },
    }
}

/// Pools of at most this many tasks get the exact-gradient-space error
/// diagnostic; larger pools use estimate space (cost control).
pub const EXACT_EPS_MAX_POOL: usize = 64;

const CALIBRATION_SEED: u64 = 0xCA11B;

// Named ChaCha stream ids, all derived from the run seed.
const STREAM_MEANS: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_WARMUP: u64 = 4;
const STREAM_POOL: u64 = 5;
const STREAM_SAMPLER: u64 = 6;
const STREAM_BATCH: u64 = 7;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-pool selection seed, derived deterministically from the run seed.
fn selection_seed(seed: u64, pool_index: usize) -> u64 {
    seed ^ (pool_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct SeedRunOutput {
    rows: Vec<ResultRow>,
    final_model: MetaModel,
}

/// Builds the model and distributions for one seed. The training
/// distribution honors the class budget; evaluation uses all classes.
fn seed_setup(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(MetaModel, SyntheticDistribution, SyntheticDistribution)> {
    let mut means_rng = stream_rng(seed, STREAM_MEANS);
    let dist_full = SyntheticDistribution::new(cfg.num_classes, cfg.feature_dim, cfg.class_std, &mut means_rng)?;
    let allowed = cfg.allowed_class_count();
    let dist_train = if allowed < cfg.num_classes {
        dist_full.clone().with_allowed_classes((0..allowed).collect())?
    } else {
        dist_full.clone()
    };
    let mut init_rng = stream_rng(seed, STREAM_INIT);
    let model = match cfg.algo {
        Algo::Anil => MetaModel::anil(cfg.feature_dim, &cfg.hidden_dims, cfg.way, &mut init_rng)?,
        Algo::ProtoNet => MetaModel::protonet(cfg.feature_dim, &cfg.hidden_dims, &mut init_rng)?,
    };
    Ok((model, dist_train, dist_full))
}

/// Clean evaluation episodes over the unrestricted class set.
fn eval_tasks_for_seed(
    cfg: &ExperimentConfig,
    dist_full: &SyntheticDistribution,
    seed: u64,
) -> Result<Vec<FewShotTask>> {
    let mut rng = stream_rng(seed, STREAM_EVAL);
    (0..cfg.eval_tasks)
        .map(|_| sample_task(dist_full, cfg.way, cfg.shots(), &mut rng))
        .collect()
}

/// Runs the warm-up phase: `warmup_iters` steps of uniform task sampling
/// with unit weights. Returns the warmed model.
fn warm_up(
    cfg: &ExperimentConfig,
    model: MetaModel,
    dist: &SyntheticDistribution,
    noise: Option<&NoiseConfig>,
    seed: u64,
    mut on_step: impl FnMut(usize, f64, &MetaModel) -> Result<()>,
) -> Result<MetaModel> {
    let mut rng = stream_rng(seed, STREAM_WARMUP);
    let inner = cfg.inner_cfg();
    let outer = cfg.outer_cfg();
    let mut current = model;
    for iter in 1..=cfg.warmup_iters {
        let mut batch = Vec::with_capacity(cfg.meta_batch);
        for _ in 0..cfg.meta_batch {
            let mut t = sample_task(dist, cfg.way, cfg.shots(), &mut rng)?;
            if let Some(nc) = noise {
                t = crate::tasks::inject_noise(t, nc, &mut rng)?;
            }
            batch.push(t);
        }
        let refs: Vec<(&FewShotTask, usize)> = batch.iter().map(|t| (t, 1)).collect();
        let (next, loss) = meta_train_step_with_loss(&current, &refs, cfg.algo, &inner, &outer)?;
        current = next;
        on_step(iter, loss, &current)?;
    }
    Ok(current)
}

/// Draws the subset for one pool under the given sampler. The pool's
/// estimates are filled regardless of the sampler so the error diagnostics
/// stay comparable across samplers.
fn select_subset(
    cfg: &ExperimentConfig,
    model: &MetaModel,
    pool: &mut TaskPool,
    sampler: Sampler,
    filter: bool,
    seed: u64,
    pool_index: usize,
    sampler_rng: &mut ChaCha8Rng,
) -> Result<WeightedSubset> {
    let k = cfg.effective_k()?;
    let inner = cfg.estimate_inner_cfg();
    match sampler {
        Sampler::Derts | Sampler::DertsNoWeights => {
            let sel = SelectionConfig {
                k_select: k,
                mode: cfg.select_mode,
                sg_epsilon: cfg.sg_epsilon,
                noise_flag: filter,
                threshold_multiplier: cfg.tau,
                threshold_source: cfg.threshold_source,
                seed: selection_seed(seed, pool_index),
            };
            let mut subset = derts_round(model, pool, &sel, &inner, cfg.algo, cfg.estimator)?;
            if sampler == Sampler::DertsNoWeights {
                for w in subset.weights.iter_mut() {
                    *w = 1;
                }
            }
            Ok(subset)
        }
        Sampler::Random => {
            estimate_pool(model, pool, cfg.algo, cfg.estimator, &inner)?;
            let picks = rand::seq::index::sample(sampler_rng, pool.len(), k);
            let indices: Vec<usize> = picks.iter().collect();
            Ok(WeightedSubset {
                weights: vec![1; indices.len()],
                indices,
                dropped: Vec::new(),
                dropped_weights: Vec::new(),
            })
        }
        Sampler::FullPool => {
            estimate_pool(model, pool, cfg.algo, cfg.estimator, &inner)?;
            Ok(WeightedSubset {
                indices: (0..pool.len()).collect(),
                weights: vec![1; pool.len()],
                dropped: Vec::new(),
                dropped_weights: Vec::new(),
            })
        }
    }
}

/// Arranges the kept `(index, weight)` list for batching.
fn arrange_for_batching(
    kept: Vec<(usize, usize)>,
    order: BatchOrder,
    meta_batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    match order {
        BatchOrder::Selection => kept,
        BatchOrder::Shuffled => {
            use rand::seq::SliceRandom;
            let mut v = kept;
            v.shuffle(rng);
            v
        }
        BatchOrder::Strided => {
            let num_batches = kept.len().div_ceil(meta_batch).max(1);
            let mut out = Vec::with_capacity(kept.len());
            for b in 0..num_batches {
                let mut i = b;
                while i < kept.len() {
                    out.push(kept[i]);
                    i += num_batches;
                }
            }
            out
        }
    }
}

/// Error diagnostics for a pool's selection: nearest-center weights
/// recomputed in the reported space, exact-gradient space for small pools.
/// The diagnostic describes the selected index set as chosen (kept plus
/// dropped, before truncation).
fn pool_eps(
    cfg: &ExperimentConfig,
    model: &MetaModel,
    pool: &TaskPool,
    subset: &WeightedSubset,
) -> Result<(f64, f64)> {
    let inner = cfg.inner_cfg();
    let mut indices: Vec<usize> = subset.indices.clone();
    indices.extend_from_slice(&subset.dropped);
    indices.sort_unstable();
    let report = if pool.len() <= EXACT_EPS_MAX_POOL {
        let vectors: Vec<DenseVector> = pool
            .tasks
            .iter()
            .map(|t| Ok(exact_task_gradient(model, t, cfg.algo, &inner)?.flatten()))
            .collect::<Result<_>>()?;
        let weights = nearest_center_weights(&vectors, &indices)?;
        let diag = WeightedSubset { indices, weights, dropped: Vec::new(), dropped_weights: Vec::new() };
        approx_error(&vectors, &diag, GradientSpace::ExactGradient)?
    } else {
        let vectors: Vec<DenseVector> = pool.estimates.iter().map(|e| e.vec.clone()).collect();
        let weights = nearest_center_weights(&vectors, &indices)?;
        let diag = WeightedSubset { indices, weights, dropped: Vec::new(), dropped_weights: Vec::new() };
        approx_error(&vectors, &diag, GradientSpace::Estimate)?
    };
    Ok((report.exact_error, report.upper_bound))
}

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    sampler: Sampler,
    filter: bool,
    label: &str,
    noise: Option<&NoiseConfig>,
) -> Result<SeedRunOutput> {
    let start = Instant::now();
    let (model, dist_train, dist_full) = seed_setup(cfg, seed)?;
    let eval_set = eval_tasks_for_seed(cfg, &dist_full, seed)?;
    let checkpoints = cfg.checkpoints();
    let inner = cfg.inner_cfg();
    let outer = cfg.outer_cfg();

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut loss_window: Vec<f64> = Vec::new();
    let mut train_time = 0.0_f64;
    let mut select_time = 0.0_f64;
    let mut eps = (f64::NAN, f64::NAN);

    macro_rules! emit_row {
        ($iter:expr, $model:expr) => {{
            let (acc, ci) = evaluate($model, &eval_set, cfg.algo, &inner)?;
            let train_loss = if loss_window.is_empty() {
                f64::NAN
            } else {
                loss_window.iter().sum::<f64>() / loss_window.len() as f64
            };
            rows.push(ResultRow {
                seed,
                sampler: label.to_string(),
                iter: $iter,
                train_loss,
                eval_acc: acc,
                eval_ci: ci,
                eps_exact: eps.0,
                eps_bound: eps.1,
                select_time_s: select_time,
                train_time_s: train_time,
                wallclock_s: start.elapsed().as_secs_f64(),
            });
            loss_window.clear();
            train_time = 0.0;
        }};
    }

    // Warm-up: identical across samplers for a given seed. The checkpoint
    // grid never falls strictly inside the warm-up, so only the boundary
    // row is emitted here.
    let mut iter = 0usize;
    let current = {
        let mut pending: Vec<f64> = Vec::new();
        let warmed = warm_up(cfg, model, &dist_train, noise, seed, |i, loss, _| {
            iter = i;
            pending.push(loss);
            Ok(())
        })?;
        loss_window.extend(pending);
        if cfg.warmup_iters > 0 && checkpoints.contains(&cfg.warmup_iters) {
            emit_row!(cfg.warmup_iters, &warmed);
        }
        warmed
    };
    let mut current = current;

    // Selection phase over successive pools.
    let mut pool_rng = stream_rng(seed, STREAM_POOL);
    let mut sampler_rng = stream_rng(seed, STREAM_SAMPLER);
    let mut batch_rng = stream_rng(seed, STREAM_BATCH);
    let mut pool_index = 0usize;
    while iter < cfg.iterations {
        let sel_start = Instant::now();
        let mut pool = fill_pool(&dist_train, cfg.way, cfg.shots(), cfg.pool_size, noise, &mut pool_rng)?;
        let subset = select_subset(cfg, &current, &mut pool, sampler, filter, seed, pool_index, &mut sampler_rng)?;
        eps = pool_eps(cfg, &current, &pool, &subset)?;
        select_time = sel_start.elapsed().as_secs_f64();

        let kept: Vec<(usize, usize)> =
            arrange_for_batching(subset.kept().collect(), cfg.batch_order, cfg.meta_batch, &mut batch_rng);
        for chunk in kept.chunks(cfg.meta_batch) {
            if iter >= cfg.iterations {
                break;
            }
            let batch: Vec<(&FewShotTask, usize)> =
                chunk.iter().map(|&(i, w)| (&pool.tasks[i], w)).collect();
            let step_start = Instant::now();
            let (next, loss) = meta_train_step_with_loss(&current, &batch, cfg.algo, &inner, &outer)?;
            train_time += step_start.elapsed().as_secs_f64();
            current = next;
            iter += 1;
            loss_window.push(loss);
            if checkpoints.contains(&iter) {
                emit_row!(iter, &current);
            }
        }
        pool_index += 1;
    }
    Ok(SeedRunOutput { rows, final_model: current })
}

/// Trains one seed to completion under the configured sampler and returns
/// the final model. Deterministic, so it reproduces a `run` trajectory.
pub fn final_model(cfg: &ExperimentConfig, seed: u64) -> Result<MetaModel> {
    cfg.validate()?;
    let noise = cfg.resolved_noise()?;
    let out = run_seed(cfg, seed, cfg.sampler, cfg.filter_enabled(), cfg.sampler.label(), noise.as_ref())?;
    Ok(out.final_model)
}

/// Runs the configured sampler over every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let noise = cfg.resolved_noise()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let out = run_seed(cfg, seed, cfg.sampler, cfg.filter_enabled(), cfg.sampler.label(), noise.as_ref())?;
        rows.extend(out.rows);
    }
    Ok(rows)
}

/// Noisy-task comparison: selection with the filter, selection without it,
/// and random sampling, all over the same seeded pools.
pub fn run_noise_suite(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    if !cfg.noise {
        return Err(Error::Config("noise suite requires noise = on".into()));
    }
    let noise = cfg.resolved_noise()?;
    let variants: [(&str, Sampler, bool); 3] = [
        ("derts-filter", Sampler::Derts, true),
        ("derts-nofilter", Sampler::Derts, false),
        ("random", Sampler::Random, false),
    ];
    let mut rows = Vec::new();
    for &(label, sampler, filter) in &variants {
        for &seed in &cfg.seeds {
            let out = run_seed(cfg, seed, sampler, filter, label, noise.as_ref())?;
            rows.extend(out.rows);
        }
    }
    Ok(rows)
}

/// Ground-truth filter audit: warms a model per seed, then repeatedly draws
/// noisy pools and runs filtered selection without training on them, until
/// at least `min_pools` pools are audited in total.
pub fn noise_filter_audit(cfg: &ExperimentConfig, min_pools: usize) -> Result<Vec<PoolAudit>> {
    cfg.validate()?;
    if !cfg.noise {
        return Err(Error::Config("audit requires noise = on".into()));
    }
    let noise = cfg.resolved_noise()?;
    let per_seed = min_pools.div_ceil(cfg.seeds.len());
    let mut audits = Vec::new();
    for &seed in &cfg.seeds {
        let (model, dist_train, _) = seed_setup(cfg, seed)?;
        let warmed = warm_up(cfg, model, &dist_train, noise.as_ref(), seed, |_, _, _| Ok(()))?;
        let mut pool_rng = stream_rng(seed, STREAM_POOL);
        let mut sampler_rng = stream_rng(seed, STREAM_SAMPLER);
        for pool_index in 0..per_seed {
            let mut pool =
                fill_pool(&dist_train, cfg.way, cfg.shots(), cfg.pool_size, noise.as_ref(), &mut pool_rng)?;
            let subset =
                select_subset(cfg, &warmed, &mut pool, Sampler::Derts, true, seed, pool_index, &mut sampler_rng)?;
            let mut audit = PoolAudit {
                seed,
                pool_index,
                dropped_tasks: subset.dropped.len(),
                kept_tasks: subset.indices.len(),
                dropped_swaps: 0,
                kept_swaps: 0,
            };
            for &i in &subset.dropped {
                audit.dropped_swaps += pool.tasks[i].noise_meta.unwrap_or(0);
            }
            for &i in &subset.indices {
                audit.kept_swaps += pool.tasks[i].noise_meta.unwrap_or(0);
            }
            audits.push(audit);
        }
    }
    Ok(audits)
}

/// Header of the deterministic results CSV.
pub const RESULTS_HEADER: &str = "seed,sampler,iter,train_loss,eval_acc,eval_ci,eps_exact,eps_bound";
/// Header of the timing metrics sidecar.
pub const METRICS_HEADER: &str =
    "iter,train_loss,eval_acc,eval_ci,wallclock_s,select_time_s,train_time_s,seed,sampler";
/// Header of the aggregated summary.
pub const SUMMARY_HEADER: &str = "sampler,iter,n_seeds,median_acc,iqr_acc,median_loss";
/// Header of the plot-ready long-format curves file.
pub const CURVES_HEADER: &str = "sampler,seed,iter,eval_acc,train_loss";

/// Writes the deterministic result columns (no wall-clock data).
pub fn write_results_csv<W: Write>(rows: &[ResultRow], w: &mut W) -> Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.seed, r.sampler, r.iter, r.train_loss, r.eval_acc, r.eval_ci, r.eps_exact, r.eps_bound
        )?;
    }
    Ok(())
}

/// Writes the per-checkpoint metrics sidecar including measured timings.
pub fn write_metrics_csv<W: Write>(rows: &[ResultRow], w: &mut W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.train_loss,
            r.eval_acc,
            r.eval_ci,
            r.wallclock_s,
            r.select_time_s,
            r.train_time_s,
            r.seed,
            r.sampler
        )?;
    }
    Ok(())
}

/// Reads rows back from the deterministic results CSV (timing fields zero).
pub fn read_results_csv<R: BufRead>(r: &mut R) -> Result<Vec<ResultRow>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty results CSV".into()))?
        .map_err(Error::Io)?;
    if header.trim() != RESULTS_HEADER {
        return Err(Error::Parse("unexpected results CSV header".into()));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::Parse("results CSV rows need 8 columns".into()));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse(format!("bad {what} value {s:?}")))
        };
        rows.push(ResultRow {
            seed: parts[0].parse().map_err(|_| Error::Parse("bad seed".into()))?,
            sampler: parts[1].to_string(),
            iter: parts[2].parse().map_err(|_| Error::Parse("bad iter".into()))?,
            train_loss: parse_f(parts[3], "train_loss")?,
            eval_acc: parse_f(parts[4], "eval_acc")?,
            eval_ci: parse_f(parts[5], "eval_ci")?,
            eps_exact: parse_f(parts[6], "eps_exact")?,
            eps_bound: parse_f(parts[7], "eps_bound")?,
            select_time_s: 0.0,
            train_time_s: 0.0,
            wallclock_s: 0.0,
        });
    }
    Ok(rows)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Linear-interpolation quantile on a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Aggregates rows across seeds (median, interquartile range) and writes
/// `summary.csv` and the long-format `curves.csv` into `out_dir`.
pub fn report(rows: &[ResultRow], out_dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut keys: Vec<(String, usize)> = rows.iter().map(|r| (r.sampler.clone(), r.iter)).collect();
    keys.sort();
    keys.dedup();

    let mut summary = String::new();
    summary.push_str(SUMMARY_HEADER);
    summary.push('\n');
    for (sampler, iter) in &keys {
        let mut accs: Vec<f64> = rows
            .iter()
            .filter(|r| &r.sampler == sampler && r.iter == *iter)
            .map(|r| r.eval_acc)
            .collect();
        let mut losses: Vec<f64> = rows
            .iter()
            .filter(|r| &r.sampler == sampler && r.iter == *iter)
            .map(|r| r.train_loss)
            .collect();
        accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        losses.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let iqr = quantile(&accs, 0.75) - quantile(&accs, 0.25);
        summary.push_str(&format!(
            "{},{},{},{},{},{}\n",
            sampler,
            iter,
            accs.len(),
            median(&accs),
            iqr,
            median(&losses)
        ));
    }
    std::fs::write(out_dir.join("summary.csv"), summary)?;

    let mut sorted_rows: Vec<&ResultRow> = rows.iter().collect();
    sorted_rows.sort_by(|a, b| (&a.sampler, a.seed, a.iter).cmp(&(&b.sampler, b.seed, b.iter)));
    let mut curves = String::new();
    curves.push_str(CURVES_HEADER);
    curves.push('\n');
    for r in sorted_rows {
        curves.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sampler, r.seed, r.iter, r.eval_acc, r.train_loss
        ));
    }
    std::fs::write(out_dir.join("curves.csv"), curves)?;
    Ok(())
}

/// Median evaluation accuracy across seeds for a sampler at an iteration.
pub fn median_accuracy(rows: &[ResultRow], sampler: &str, iter: usize) -> Option<f64> {
    let mut accs: Vec<f64> = rows
        .iter()
        .filter(|r| r.sampler == sampler && r.iter == iter)
        .map(|r| r.eval_acc)
        .collect();
    if accs.is_empty() {
        return None;
    }
    accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(median(&accs))
}
