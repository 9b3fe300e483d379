//! Episodic meta-training: ANIL-style inner-loop adaptation with head-only
//! updates, weighted outer-loop updates, the ProtoNet prototype loss, and
//! evaluation.
//!
//! The outer gradient is first-order by default (gradients of the query loss
//! at the adapted parameters are used as the update direction for the
//! meta-parameters). For ANIL an exact-through-head option is available: the
//! linear head makes the inner-loop Jacobian a closed-form product of
//! `(I - lr * H)` factors, which is applied to the head block of the query
//! gradient. Both agree when the inner loop takes zero steps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, DenseLayer, DenseMatrix, DenseVector, Mlp, ParamGrads};
use crate::tasks::{FewShotTask, LabeledExample};

/// Which meta-learning algorithm drives training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Anil,
    ProtoNet,
}

impl std::str::FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anil" => Ok(Algo::Anil),
            "protonet" => Ok(Algo::ProtoNet),
            other => Err(Error::Config(format!("unknown algo {other:?}"))),
        }
    }
}

/// Backbone plus, in ANIL mode, a final linear classification head. The two
/// parts live in one [`Mlp`]; the head is its last layer. In ProtoNet mode
/// there is no head and the network output is the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    net: Mlp,
    has_head: bool,
}

impl MetaModel {
    /// ANIL model: backbone of rectified hidden layers plus a linear head
    /// emitting one logit per class.
    pub fn anil<R: Rng>(feature_dim: usize, hidden: &[usize], way: usize, rng: &mut R) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Config("ANIL needs at least one hidden layer below the head".into()));
        }
        let mut dims = vec![feature_dim];
        dims.extend_from_slice(hidden);
        dims.push(way);
        Ok(MetaModel { net: Mlp::seeded(&dims, rng)?, has_head: true })
    }

    /// ProtoNet model: the network output is the embedding, no head.
    pub fn protonet<R: Rng>(feature_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Config("ProtoNet needs at least one layer".into()));
        }
        let mut dims = vec![feature_dim];
        dims.extend_from_slice(hidden);
        Ok(MetaModel { net: Mlp::seeded(&dims, rng)?, has_head: false })
    }

    pub fn from_net(net: Mlp, algo: Algo) -> Result<Self> {
        let has_head = algo == Algo::Anil;
        if has_head && net.num_layers() < 2 {
            return Err(Error::Config("ANIL needs a backbone below the head".into()));
        }
        Ok(MetaModel { net, has_head })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn into_net(self) -> Mlp {
        self.net
    }

    pub fn has_head(&self) -> bool {
        self.has_head
    }

    pub fn head(&self) -> Option<&DenseLayer> {
        if self.has_head {
            self.net.layers().last()
        } else {
            None
        }
    }

    /// Index of the head layer in the underlying network.
    fn head_layer(&self) -> usize {
        self.net.num_layers() - 1
    }

    pub fn way(&self) -> Option<usize> {
        self.head().map(|h| h.out_dim())
    }

    fn require_anil(&self) -> Result<()> {
        if !self.has_head {
            return Err(Error::Input("operation requires an ANIL-mode model with a head".into()));
        }
        Ok(())
    }

    fn require_protonet(&self) -> Result<()> {
        if self.has_head {
            return Err(Error::Input("operation requires a ProtoNet-mode model".into()));
        }
        Ok(())
    }

    /// Embedding of one input: the full network output in ProtoNet mode.
    pub fn embed(&self, x: &[f64]) -> Result<DenseVector> {
        self.require_protonet()?;
        Ok(nn::forward(&self.net, x)?.logits().clone())
    }
}

/// Inner-loop (adaptation) settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoopConfig {
    pub lr: f64,
    pub steps: usize,
    pub head_only: bool,
}

impl InnerLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config("inner lr must be >= 0".into()));
        }
        Ok(())
    }
}

/// Outer-loop settings, including the weighted-update and second-order
/// options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterLoopConfig {
    pub lr: f64,
    pub meta_batch: usize,
    /// Total outer steps, warm-up included.
    pub iterations: usize,
    /// Steps of plain uniform task sampling before selection activates.
    pub warmup_iters: usize,
    /// When false, the weighted batch direction is the raw sum instead of
    /// the weighted mean (ablation mode).
    pub normalize_weights: bool,
    /// ANIL only: propagate the exact chain rule through the linear head's
    /// inner-loop updates instead of the first-order approximation.
    pub exact_head: bool,
}

impl OuterLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.meta_batch == 0 || self.iterations == 0 {
            return Err(Error::Config("outer lr, meta batch and iterations must be positive".into()));
        }
        if self.warmup_iters >= self.iterations {
            return Err(Error::Config("warm-up must be shorter than the iteration budget".into()));
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy of the network on a set of examples, with the
/// mean logit gradient per example handed to a callback.
fn batch_xent_grads(net: &Mlp, examples: &[LabeledExample]) -> Result<(f64, ParamGrads)> {
    let mut total_loss = 0.0;
    let mut grads = ParamGrads::zeros_like(net);
    let n = examples.len() as f64;
    for ex in examples {
        let trace = nn::forward(net, &ex.x)?;
        let (loss, mut gl) = nn::softmax_xent(trace.logits(), ex.y)?;
        total_loss += loss;
        for g in gl.iter_mut() {
            *g /= n;
        }
        let g = nn::backward(net, &trace, &gl)?;
        grads.add_assign(&g);
    }
    Ok((total_loss / n, grads))
}

/// Inner-loop adaptation: `steps` full-batch gradient steps on the mean
/// support cross-entropy. With `head_only` the backbone stays bit-identical
/// and only the final layer moves.
pub fn adapt(model: &MetaModel, support: &[LabeledExample], cfg: &InnerLoopConfig) -> Result<MetaModel> {
    model.require_anil()?;
    cfg.validate()?;
    if support.is_empty() {
        return Err(Error::Input("adaptation needs a nonempty support set".into()));
    }
    if cfg.steps == 0 || cfg.lr == 0.0 {
        return Ok(model.clone());
    }
    if cfg.head_only {
        // The backbone is frozen, so per-example features are fixed across
        // steps; adapt a one-layer network on cached features.
        let features = support
            .iter()
            .map(|ex| {
                let trace = nn::forward(&model.net, &ex.x)?;
                let feat = if model.net.num_layers() >= 2 {
                    trace.post(model.head_layer() - 1).clone()
                } else {
                    trace.input().clone()
                };
                Ok(LabeledExample { x: feat, y: ex.y, true_y: ex.true_y })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = model.head().expect("anil checked").clone();
        let mut head_net = Mlp::new(vec![head])?;
        for _ in 0..cfg.steps {
            let (_, grads) = batch_xent_grads(&head_net, &features)?;
            head_net = nn::apply_grads(&head_net, &grads, cfg.lr)?;
        }
        let head = head_net.layers()[0].clone();
        Ok(MetaModel { net: model.net.with_last_layer(head)?, has_head: true })
    } else {
        let mut net = model.net.clone();
        for _ in 0..cfg.steps {
            let (_, grads) = batch_xent_grads(&net, support)?;
            net = nn::apply_grads(&net, &grads, cfg.lr)?;
        }
        Ok(MetaModel { net, has_head: true })
    }
}

/// First-order ANIL outer gradient: adapt on the support set, then return
/// the gradient of the mean query cross-entropy at the adapted parameters.
pub fn anil_outer_grad(model: &MetaModel, task: &FewShotTask, cfg: &InnerLoopConfig) -> Result<ParamGrads> {
    Ok(anil_outer_grad_with_loss(model, task, cfg, false)?.1)
}

/// As [`anil_outer_grad`] but optionally applying the exact chain rule
/// through the head's inner-loop trajectory; also reports the query loss.
pub fn anil_outer_grad_with_loss(
    model: &MetaModel,
    task: &FewShotTask,
    cfg: &InnerLoopConfig,
    exact_head: bool,
) -> Result<(f64, ParamGrads)> {
    model.require_anil()?;
    if task.query.is_empty() {
        return Err(Error::Input("task has an empty query set".into()));
    }
    if exact_head && cfg.head_only && cfg.steps > 0 && cfg.lr > 0.0 {
        return anil_outer_grad_exact_head(model, task, cfg);
    }
    let adapted = adapt(model, &task.support, cfg)?;
    batch_xent_grads(&adapted.net, &task.query)
}

/// Head-parameter count of an ANIL model: `way * (features + 1)`.
fn head_param_count(head: &DenseLayer) -> usize {
    head.out_dim() * (head.in_dim() + 1)
}

fn flatten_head(head: &DenseLayer) -> DenseVector {
    let mut v = Vec::with_capacity(head_param_count(head));
    v.extend_from_slice(head.weights.data());
    v.extend_from_slice(&head.bias);
    v
}

fn unflatten_head(template: &DenseLayer, flat: &[f64]) -> DenseLayer {
    let (out, inp) = (template.out_dim(), template.in_dim());
    let mut weights = DenseMatrix::zeros(out, inp);
    weights.data_mut().copy_from_slice(&flat[..out * inp]);
    DenseLayer { weights, bias: flat[out * inp..].to_vec() }
}

/// Mean support cross-entropy gradient and Hessian with respect to the head
/// parameters, on fixed backbone features. For softmax cross-entropy on a
/// linear layer both have closed forms: per example the logit Hessian is
/// `diag(p) - p p^T`, pushed through the constant Jacobian of `z = Wv + b`.
fn head_grad_and_hessian(
    head: &DenseLayer,
    features: &[LabeledExample],
) -> Result<(DenseVector, Vec<DenseVector>)> {
    let way = head.out_dim();
    let fdim = head.in_dim();
    let p_count = head_param_count(head);
    let n = features.len() as f64;
    let mut grad = vec![0.0; p_count];
    let mut hess = vec![vec![0.0; p_count]; p_count];
    // Parameter layout matches flatten_head: W row-major, then bias. The
    // entry for logit r and input c sits at r*fdim + c; bias r at
    // way*fdim + r.
    let widx = |r: usize, c: usize| r * fdim + c;
    let bidx = |r: usize| way * fdim + r;
    for ex in features {
        let mut logits = head.weights.matvec(&ex.x)?;
        for (z, b) in logits.iter_mut().zip(&head.bias) {
            *z += b;
        }
        let p = nn::softmax(&logits);
        for r in 0..way {
            let dz = (p[r] - if r == ex.y { 1.0 } else { 0.0 }) / n;
            for c in 0..fdim {
                grad[widx(r, c)] += dz * ex.x[c];
            }
            grad[bidx(r)] += dz;
        }
        // Hessian blocks: H[(r,c),(s,d)] = A_rs * v_c * v_d with
        // A = diag(p) - p p^T, and the matching bias cross terms.
        for r in 0..way {
            for s in 0..way {
                let a = (if r == s { p[r] } else { 0.0 }) - p[r] * p[s];
                let a = a / n;
                if a == 0.0 {
                    continue;
                }
                for c in 0..fdim {
                    let vc = ex.x[c];
                    for d in 0..fdim {
                        hess[widx(r, c)][widx(s, d)] += a * vc * ex.x[d];
                    }
                    hess[widx(r, c)][bidx(s)] += a * vc;
                    hess[bidx(s)][widx(r, c)] += a * vc;
                }
                hess[bidx(r)][bidx(s)] += a;
            }
        }
    }
    Ok((grad, hess))
}

/// Exact meta-gradient through the head path: unrolls the head-only inner
/// loop and back-propagates the query head gradient through the product of
/// `(I - lr * H_t)` factors. Backbone parameters keep their first-order
/// gradient (the cross second-order terms through the features are dropped).
fn anil_outer_grad_exact_head(
    model: &MetaModel,
    task: &FewShotTask,
    cfg: &InnerLoopConfig,
) -> Result<(f64, ParamGrads)> {
    let head_idx = model.head_layer();
    let features = task
        .support
        .iter()
        .map(|ex| {
            let trace = nn::forward(&model.net, &ex.x)?;
            let feat = trace.post(head_idx - 1).clone();
            Ok(LabeledExample { x: feat, y: ex.y, true_y: ex.true_y })
        })
        .collect::<Result<Vec<_>>>()?;

    let template = model.head().expect("anil checked").clone();
    let mut head = template.clone();
    let mut hessians = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (grad, hess) = head_grad_and_hessian(&head, &features)?;
        hessians.push(hess);
        let mut flat = flatten_head(&head);
        for (w, g) in flat.iter_mut().zip(&grad) {
            *w -= cfg.lr * g;
        }
        head = unflatten_head(&template, &flat);
    }
    let adapted = MetaModel { net: model.net.with_last_layer(head)?, has_head: true };
    let (loss, mut grads) = batch_xent_grads(&adapted.net, &task.query)?;

    // Pull the head block back through the inner trajectory:
    // m <- (I - lr H_0)...(I - lr H_{T-1}) m, applied in reverse step order
    // (the Hessians are symmetric).
    let mut m = {
        let hg = &grads.layers[head_idx];
        let mut v = Vec::with_capacity(head_param_count(&template));
        v.extend_from_slice(hg.weights.data());
        v.extend_from_slice(&hg.bias);
        v
    };
    for hess in hessians.iter().rev() {
        let mut hm = vec![0.0; m.len()];
        for (r, row) in hess.iter().enumerate() {
            let mut acc = 0.0;
            for (h, v) in row.iter().zip(&m) {
                acc += h * v;
            }
            hm[r] = acc;
        }
        for (mi, hv) in m.iter_mut().zip(&hm) {
            *mi -= cfg.lr * hv;
        }
    }
    let (out, inp) = (template.out_dim(), template.in_dim());
    grads.layers[head_idx].weights.data_mut().copy_from_slice(&m[..out * inp]);
    grads.layers[head_idx].bias.copy_from_slice(&m[out * inp..]);
    Ok((loss, grads))
}

/// ProtoNet episode loss, parameter gradients, and the query score matrix
/// (negative squared distances to each prototype).
pub fn proto_loss(model: &MetaModel, task: &FewShotTask) -> Result<(f64, ParamGrads, Vec<DenseVector>)> {
    model.require_protonet()?;
    if task.query.is_empty() {
        return Err(Error::Input("task has an empty query set".into()));
    }
    let way = task.way;
    let net = &model.net;
    let embed_dim = net.output_dim();

    let support_traces = task
        .support
        .iter()
        .map(|ex| nn::forward(net, &ex.x))
        .collect::<Result<Vec<_>>>()?;
    let query_traces = task
        .query
        .iter()
        .map(|ex| nn::forward(net, &ex.x))
        .collect::<Result<Vec<_>>>()?;

    let mut proto = vec![vec![0.0; embed_dim]; way];
    let mut counts = vec![0usize; way];
    for (ex, trace) in task.support.iter().zip(&support_traces) {
        if ex.y >= way {
            return Err(Error::Input("support label outside task way".into()));
        }
        counts[ex.y] += 1;
        for (p, e) in proto[ex.y].iter_mut().zip(trace.logits()) {
            *p += e;
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Input("every class needs at least one support example".into()));
    }
    for (p, &c) in proto.iter_mut().zip(&counts) {
        for v in p.iter_mut() {
            *v /= c as f64;
        }
    }

    let n_q = task.query.len() as f64;
    let mut total_loss = 0.0;
    let mut grads = ParamGrads::zeros_like(net);
    let mut proto_grads = vec![vec![0.0; embed_dim]; way];
    let mut scores_out = Vec::with_capacity(task.query.len());

    for (ex, trace) in task.query.iter().zip(&query_traces) {
        let e_q = trace.logits();
        let scores: DenseVector = proto
            .iter()
            .map(|c| -c.iter().zip(e_q).map(|(ci, ei)| (ei - ci) * (ei - ci)).sum::<f64>())
            .collect();
        let (loss, ds) = nn::softmax_xent(&scores, ex.y)?;
        total_loss += loss;
        // d score_r / d e_q = -2 (e_q - c_r); d score_r / d c_r = 2 (e_q - c_r)
        let mut d_embed = vec![0.0; embed_dim];
        for r in 0..way {
            let ds_r = ds[r] / n_q;
            for d in 0..embed_dim {
                let diff = e_q[d] - proto[r][d];
                d_embed[d] += ds_r * (-2.0) * diff;
                proto_grads[r][d] += ds_r * 2.0 * diff;
            }
        }
        grads.add_assign(&nn::backward(net, trace, &d_embed)?);
        scores_out.push(scores);
    }

    // Prototype gradients distribute evenly over the class's support
    // embeddings.
    for (ex, trace) in task.support.iter().zip(&support_traces) {
        let share = 1.0 / counts[ex.y] as f64;
        let d_embed: DenseVector = proto_grads[ex.y].iter().map(|g| g * share).collect();
        grads.add_assign(&nn::backward(net, trace, &d_embed)?);
    }

    Ok((total_loss / n_q, grads, scores_out))
}

/// Outer gradient and training loss for one task under either algorithm.
pub fn task_outer_grad_with_loss(
    model: &MetaModel,
    task: &FewShotTask,
    algo: Algo,
    inner: &InnerLoopConfig,
    exact_head: bool,
) -> Result<(f64, ParamGrads)> {
    match algo {
        Algo::Anil => anil_outer_grad_with_loss(model, task, inner, exact_head),
        Algo::ProtoNet => {
            let (loss, grads, _) = proto_loss(model, task)?;
            Ok((loss, grads))
        }
    }
}

/// One weighted outer step: direction `sum(w_i g_i) / sum(w_i)` (or the raw
/// weighted sum when normalization is off), then `theta <- theta - lr * dir`.
pub fn meta_train_step(
    model: &MetaModel,
    batch: &[(&FewShotTask, usize)],
    algo: Algo,
    inner: &InnerLoopConfig,
    outer: &OuterLoopConfig,
) -> Result<MetaModel> {
    Ok(meta_train_step_with_loss(model, batch, algo, inner, outer)?.0)
}

/// As [`meta_train_step`], also reporting the weighted mean task loss.
pub fn meta_train_step_with_loss(
    model: &MetaModel,
    batch: &[(&FewShotTask, usize)],
    algo: Algo,
    inner: &InnerLoopConfig,
    outer: &OuterLoopConfig,
) -> Result<(MetaModel, f64)> {
    if batch.is_empty() {
        return Err(Error::Input("meta batch is empty".into()));
    }
    if batch.iter().any(|&(_, w)| w == 0) {
        return Err(Error::Input("task weights must be >= 1".into()));
    }
    let total_weight: usize = batch.iter().map(|&(_, w)| w).sum();
    let mut direction = ParamGrads::zeros_like(model.net());
    let mut loss_acc = 0.0;
    for &(task, weight) in batch {
        let (loss, grads) = task_outer_grad_with_loss(model, task, algo, inner, outer.exact_head)?;
        // Scaling each task by w/total (rather than dividing the sum at the
        // end) makes the step exactly invariant to uniform weight scaling.
        let share = weight as f64 / total_weight as f64;
        let factor = if outer.normalize_weights { share } else { weight as f64 };
        direction.add_scaled(&grads, factor);
        loss_acc += loss * share;
    }
    let net = nn::apply_grads(model.net(), &direction, outer.lr)?;
    Ok((MetaModel { net, has_head: model.has_head }, loss_acc))
}

/// Argmax with ties broken toward the lowest index.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Query accuracy of the model on one task after adaptation (ANIL) or by
/// nearest prototype (ProtoNet).
pub fn task_accuracy(model: &MetaModel, task: &FewShotTask, algo: Algo, inner: &InnerLoopConfig) -> Result<f64> {
    let correct = match algo {
        Algo::Anil => {
            let adapted = adapt(model, &task.support, inner)?;
            let mut hits = 0usize;
            for ex in &task.query {
                let trace = nn::forward(adapted.net(), &ex.x)?;
                if argmax(trace.logits()) == ex.y {
                    hits += 1;
                }
            }
            hits
        }
        Algo::ProtoNet => {
            let (_, _, scores) = proto_loss(model, task)?;
            task.query
                .iter()
                .zip(&scores)
                .filter(|(ex, s)| argmax(s) == ex.y)
                .count()
        }
    };
    Ok(correct as f64 / task.query.len() as f64)
}

/// Mean query accuracy over evaluation tasks with a normal-approximation 95%
/// confidence half-width.
pub fn evaluate(
    model: &MetaModel,
    eval_tasks: &[FewShotTask],
    algo: Algo,
    inner: &InnerLoopConfig,
) -> Result<(f64, f64)> {
    if eval_tasks.is_empty() {
        return Err(Error::Input("no evaluation tasks".into()));
    }
    let accs = eval_tasks
        .iter()
        .map(|t| task_accuracy(model, t, algo, inner))
        .collect::<Result<Vec<_>>>()?;
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let ci = if accs.len() < 2 {
        0.0
    } else {
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    };
    Ok((mean, ci))
}
