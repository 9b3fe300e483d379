//! Minimal dense MLP engine with explicit forward traces and hand-written
//! backpropagation.
//!
//! Hidden layers use the rectifier (subgradient 0 at 0), the output layer is
//! the identity, so the last pre-activation vector *is* the logit vector.
//! Everything is `f64` and single-threaded; forward/backward are pure
//! functions over immutable models, which keeps the finite-difference oracles
//! in the test suite exact.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};

/// A plain `f64` vector. Length doubles as the dimension.
pub type DenseVector = Vec<f64>;

/// Row-major matrix with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows in matrix literal".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(DenseMatrix { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out = self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<DenseVector> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: vector dim {} does not match matrix cols {}",
                x.len(),
                self.cols
            )));
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out[r] = acc;
        }
        Ok(out)
    }
}

/// One dense layer: `z = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DenseMatrix,
    pub bias: DenseVector,
}

impl DenseLayer {
    pub fn new(weights: DenseMatrix, bias: DenseVector) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(Error::Shape(format!(
                "bias dim {} does not match weight rows {}",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(DenseLayer { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, bias zero.
    pub fn seeded<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("layer dims must be positive".into()));
        }
        let limit = 1.0 / (in_dim as f64).sqrt();
        let mut weights = DenseMatrix::zeros(out_dim, in_dim);
        for w in weights.data_mut() {
            *w = rng.random_range(-limit..limit);
        }
        Ok(DenseLayer { weights, bias: vec![0.0; out_dim] })
    }
}

/// Dense multilayer perceptron. Hidden activation is the rectifier, the
/// output activation is the identity (the last layer emits raw logits).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("model needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer output dim {} does not chain into next input dim {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// Builds a seeded model from the dimension chain `dims[0] -> dims[1] -> ...`.
    pub fn seeded<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("need at least an input and an output dim".into()));
        }
        let layers = dims
            .windows(2)
            .map(|d| DenseLayer::seeded(d[0], d[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// Replaces the final layer, keeping shape compatibility.
    pub fn with_last_layer(&self, layer: DenseLayer) -> Result<Mlp> {
        let last = self.layers.last().expect("non-empty");
        if layer.in_dim() != last.in_dim() || layer.out_dim() != last.out_dim() {
            return Err(Error::Shape("replacement head has incompatible shape".into()));
        }
        let mut layers = self.layers.clone();
        *layers.last_mut().expect("non-empty") = layer;
        Mlp::new(layers)
    }

    /// Plain text serialization: `mlp <n>`, then per layer `layer <out> <in>`
    /// followed by row-major weights and the bias vector.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "mlp {}", self.layers.len())?;
        for layer in &self.layers {
            writeln!(w, "layer {} {}", layer.out_dim(), layer.in_dim())?;
            for r in 0..layer.out_dim() {
                let row: Vec<String> = (0..layer.in_dim()).map(|c| layer.weights.at(r, c).to_string()).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            let bias: Vec<String> = layer.bias.iter().map(|b| b.to_string()).collect();
            writeln!(w, "{}", bias.join(" "))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: &mut R) -> Result<Mlp> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut tokens = text.split_whitespace();
        let mut next = |what: &str| {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("model file truncated, expected {what}")))
        };
        if next("header")? != "mlp" {
            return Err(Error::Parse("model file must start with `mlp`".into()));
        }
        let n: usize = next("layer count")?
            .parse()
            .map_err(|_| Error::Parse("bad layer count".into()))?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            if next("layer marker")? != "layer" {
                return Err(Error::Parse("expected `layer` marker".into()));
            }
            let out: usize = next("out dim")?.parse().map_err(|_| Error::Parse("bad out dim".into()))?;
            let inp: usize = next("in dim")?.parse().map_err(|_| Error::Parse("bad in dim".into()))?;
            let mut weights = DenseMatrix::zeros(out, inp);
            for v in weights.data_mut() {
                *v = next("weight")?.parse().map_err(|_| Error::Parse("bad weight value".into()))?;
            }
            let mut bias = vec![0.0; out];
            for v in bias.iter_mut() {
                *v = next("bias")?.parse().map_err(|_| Error::Parse("bad bias value".into()))?;
            }
            layers.push(DenseLayer { weights, bias });
        }
        Mlp::new(layers)
    }
}

/// Per-layer pre- and post-activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: DenseVector,
    pre: Vec<DenseVector>,
    post: Vec<DenseVector>,
}

impl ForwardTrace {
    pub fn input(&self) -> &DenseVector {
        &self.input
    }

    /// Pre-activation of layer `l`.
    pub fn pre(&self, l: usize) -> &DenseVector {
        &self.pre[l]
    }

    /// Post-activation of layer `l`.
    pub fn post(&self, l: usize) -> &DenseVector {
        &self.post[l]
    }

    pub fn num_layers(&self) -> usize {
        self.pre.len()
    }

    /// Output logits; equals the last pre-activation because the output
    /// activation is the identity.
    pub fn logits(&self) -> &DenseVector {
        self.pre.last().expect("non-empty trace")
    }
}

/// Gradients shaped like an [`Mlp`], one entry per layer parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: DenseMatrix,
    pub bias: DenseVector,
}

impl ParamGrads {
    pub fn zeros_like(model: &Mlp) -> ParamGrads {
        ParamGrads {
            layers: model
                .layers()
                .iter()
                .map(|l| LayerGrads {
                    weights: DenseMatrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn congruent_with(&self, model: &Mlp) -> bool {
        self.layers.len() == model.num_layers()
            && self.layers.iter().zip(model.layers()).all(|(g, l)| {
                g.weights.rows() == l.out_dim()
                    && g.weights.cols() == l.in_dim()
                    && g.bias.len() == l.out_dim()
            })
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += factor * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for x in layer.weights.data_mut() {
                *x *= factor;
            }
            for x in &mut layer.bias {
                *x *= factor;
            }
        }
    }

    /// All gradient entries as one flat vector, layer by layer, weights
    /// before bias.
    pub fn flatten(&self) -> DenseVector {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Rectifier subgradient with the convention that it is 0 at 0.
#[inline]
fn relu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Forward pass recording every pre- and post-activation.
pub fn forward(model: &Mlp, input: &[f64]) -> Result<ForwardTrace> {
    if input.len() != model.input_dim() {
        return Err(Error::Shape(format!(
            "input dim {} does not match model input dim {}",
            input.len(),
            model.input_dim()
        )));
    }
    let n = model.num_layers();
    let mut pre = Vec::with_capacity(n);
    let mut post = Vec::with_capacity(n);
    let mut x = input.to_vec();
    for (l, layer) in model.layers().iter().enumerate() {
        let mut z = layer.weights.matvec(&x)?;
        for (zi, b) in z.iter_mut().zip(&layer.bias) {
            *zi += b;
        }
        let last = l + 1 == n;
        let activated: DenseVector = if last { z.clone() } else { z.iter().map(|&v| relu(v)).collect() };
        pre.push(z);
        post.push(activated.clone());
        x = activated;
    }
    Ok(ForwardTrace { input: input.to_vec(), pre, post })
}

/// Softmax cross-entropy loss and its gradient with respect to the logits.
///
/// Returns `(-log softmax(logits)[label], softmax(logits) - onehot(label))`.
/// The softmax uses a max shift for stability; the gradient components sum
/// to zero.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, DenseVector)> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {} out of range for {} logits",
            label,
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: DenseVector = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: DenseVector = exps.iter().map(|&e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Softmax probabilities with max shift. Used where only the distribution is
/// needed (predictions, gradient estimates).
pub fn softmax(logits: &[f64]) -> DenseVector {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: DenseVector = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Backpropagates an upstream logit gradient through the trace, producing
/// exact parameter gradients of the scalar loss the logit gradient came from.
pub fn backward(model: &Mlp, trace: &ForwardTrace, grad_logits: &[f64]) -> Result<ParamGrads> {
    let n = model.num_layers();
    if trace.num_layers() != n {
        return Err(Error::Shape("trace does not match model depth".into()));
    }
    if grad_logits.len() != model.output_dim() {
        return Err(Error::Shape(format!(
            "logit gradient dim {} does not match output dim {}",
            grad_logits.len(),
            model.output_dim()
        )));
    }
    let mut grads = ParamGrads::zeros_like(model);
    // Output activation is the identity, so dL/dz at the top equals the
    // supplied logit gradient.
    let mut dz: DenseVector = grad_logits.to_vec();
    for l in (0..n).rev() {
        let layer = &model.layers()[l];
        let below: &[f64] = if l == 0 { trace.input() } else { trace.post(l - 1) };
        if below.len() != layer.in_dim() {
            return Err(Error::Shape("trace activation does not match layer input".into()));
        }
        let lg = &mut grads.layers[l];
        for r in 0..layer.out_dim() {
            lg.bias[r] = dz[r];
            for c in 0..layer.in_dim() {
                *lg.weights.at_mut(r, c) = dz[r] * below[c];
            }
        }
        if l > 0 {
            let mut dx = vec![0.0; layer.in_dim()];
            for r in 0..layer.out_dim() {
                for c in 0..layer.in_dim() {
                    dx[c] += layer.weights.at(r, c) * dz[r];
                }
            }
            let z_below = trace.pre(l - 1);
            dz = dx
                .iter()
                .zip(z_below)
                .map(|(&g, &z)| g * relu_prime(z))
                .collect();
        }
    }
    Ok(grads)
}

/// Returns a new model with `params' = params - lr * grads`.
pub fn apply_grads(model: &Mlp, grads: &ParamGrads, lr: f64) -> Result<Mlp> {
    if !grads.congruent_with(model) {
        return Err(Error::Shape("gradients not shape-congruent with model".into()));
    }
    let mut out = model.clone();
    for (layer, g) in out.layers_mut().iter_mut().zip(&grads.layers) {
        for (w, d) in layer.weights.data_mut().iter_mut().zip(g.weights.data()) {
            *w -= lr * d;
        }
        for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * d;
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::testutil::{assert_grads_close, finite_diff_grads};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64, dims: &[usize]) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::seeded(dims, &mut rng).unwrap()
    }

    /// Loss of a model on a single example, used by the finite-difference
    /// oracle. Evaluates forward + softmax cross-entropy only.
    fn example_loss(model: &Mlp, x: &[f64], label: usize) -> f64 {
        let trace = forward(model, x).unwrap();
        softmax_xent(trace.logits(), label).unwrap().0
    }

    #[test]
    fn forward_zero_model_gives_zero_logits() {
        let layers = vec![
            DenseLayer::new(DenseMatrix::zeros(3, 4), vec![0.0; 3]).unwrap(),
            DenseLayer::new(DenseMatrix::zeros(2, 3), vec![0.0; 2]).unwrap(),
        ];
        let model = Mlp::new(layers).unwrap();
        let trace = forward(&model, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(trace.logits(), &vec![0.0, 0.0]);
    }

    #[test]
    fn forward_identity_layer_passes_input_through() {
        let eye = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let model = Mlp::new(vec![DenseLayer::new(eye, vec![0.0; 3]).unwrap()]).unwrap();
        let v = [0.4, -1.5, 2.0];
        let trace = forward(&model, &v).unwrap();
        assert_eq!(trace.logits(), &v.to_vec());
    }

    #[test]
    fn forward_matches_hand_computed_two_layer_instance() {
        // 2x2 instance worked out by hand:
        //   z1 = W1 x + b1 = (1.1, -0.3), relu -> (1.1, 0)
        //   z2 = W2 relu(z1) + b2 = (1.7, 2.15)
        let w1 = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        let w2 = DenseMatrix::from_rows(&[vec![1.5, -1.0], vec![2.0, 0.5]]).unwrap();
        let model = Mlp::new(vec![
            DenseLayer::new(w1, vec![0.1, -0.3]).unwrap(),
            DenseLayer::new(w2, vec![0.05, -0.05]).unwrap(),
        ])
        .unwrap();
        let trace = forward(&model, &[0.2, -0.4]).unwrap();
        assert!((trace.pre(0)[0] - 1.1).abs() < 1e-15);
        assert!((trace.pre(0)[1] - (-0.3)).abs() < 1e-15);
        assert_eq!(trace.post(0), &vec![1.1, 0.0]);
        assert!((trace.logits()[0] - 1.7).abs() < 1e-12);
        assert!((trace.logits()[1] - 2.15).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let model = tiny_model(0, &[3, 2]);
        assert!(matches!(forward(&model, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_xent_uniform_two_way() {
        let (loss, grad) = softmax_xent(&[0.0, 0.0], 0).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-15);
        assert!((grad[0] + 0.5).abs() < 1e-15);
        assert!((grad[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_xent_saturated_margin() {
        let (loss, grad) = softmax_xent(&[100.0, 0.0], 0).unwrap();
        assert!(loss < 1e-40);
        assert!(grad.iter().all(|g| g.abs() < 1e-40));
    }

    #[test]
    fn softmax_xent_grad_sums_to_zero_and_matches_finite_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..5);
            let (_, grad) = softmax_xent(&logits, label).unwrap();
            let total: f64 = grad.iter().sum();
            assert!(total.abs() < 1e-12, "gradient must live on the simplex tangent");
            let step = 1e-5;
            for i in 0..5 {
                let mut plus = logits.clone();
                plus[i] += step;
                let mut minus = logits.clone();
                minus[i] -= step;
                let numeric = (softmax_xent(&plus, label).unwrap().0 - softmax_xent(&minus, label).unwrap().0) / (2.0 * step);
                let scale = grad[i].abs().max(numeric.abs()).max(1e-8);
                assert!((grad[i] - numeric).abs() / scale <= 1e-4);
            }
        }
    }

    #[test]
    fn softmax_xent_rejects_bad_inputs() {
        assert!(matches!(softmax_xent(&[f64::NAN, 0.0], 0), Err(Error::Numeric(_))));
        assert!(matches!(softmax_xent(&[0.0, 0.0], 2), Err(Error::Index(_))));
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let model = tiny_model(1, &[4, 3, 2]);
        let trace = forward(&model, &[0.3, -0.2, 0.9, 0.1]).unwrap();
        let grads = backward(&model, &trace, &[0.0, 0.0]).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_last_bias_equals_upstream() {
        let model = tiny_model(2, &[4, 3, 2]);
        let trace = forward(&model, &[0.3, -0.2, 0.9, 0.1]).unwrap();
        let upstream = [0.7, -1.3];
        let grads = backward(&model, &trace, &upstream).unwrap();
        assert_eq!(grads.layers[1].bias, upstream.to_vec());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let model = tiny_model(100 + trial, &[4, 6, 3]);
            assert!(model.num_params() <= 200);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let label = rng.random_range(0..3);
            let trace = forward(&model, &x).unwrap();
            let (_, grad_logits) = softmax_xent(trace.logits(), label).unwrap();
            let analytic = backward(&model, &trace, &grad_logits).unwrap();
            let numeric = finite_diff_grads(&model, |m| example_loss(m, &x, label), 1e-5);
            assert_grads_close(&analytic, &numeric, 1e-4);
        }
    }

    #[test]
    fn apply_grads_zero_lr_is_identity() {
        let model = tiny_model(3, &[3, 2]);
        let trace = forward(&model, &[0.1, 0.2, 0.3]).unwrap();
        let (_, gl) = softmax_xent(trace.logits(), 0).unwrap();
        let grads = backward(&model, &trace, &gl).unwrap();
        let updated = apply_grads(&model, &grads, 0.0).unwrap();
        assert_eq!(updated, model);
    }

    #[test]
    fn apply_grads_unit_lr_with_param_grads_zeroes_model() {
        let model = tiny_model(4, &[3, 2]);
        let grads = ParamGrads {
            layers: model
                .layers()
                .iter()
                .map(|l| LayerGrads { weights: l.weights.clone(), bias: l.bias.clone() })
                .collect(),
        };
        let updated = apply_grads(&model, &grads, 1.0).unwrap();
        assert!(updated.layers().iter().all(|l| l.weights.data().iter().all(|&w| w == 0.0)));
        assert!(updated.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn apply_grads_two_half_steps_equal_one_full_step() {
        let model = tiny_model(5, &[3, 3, 2]);
        let trace = forward(&model, &[0.5, -0.5, 0.25]).unwrap();
        let (_, gl) = softmax_xent(trace.logits(), 1).unwrap();
        let grads = backward(&model, &trace, &gl).unwrap();
        let one = apply_grads(&model, &grads, 0.2).unwrap();
        let two = apply_grads(&apply_grads(&model, &grads, 0.1).unwrap(), &grads, 0.1).unwrap();
        for (a, b) in one.layers().iter().zip(two.layers()) {
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_backward_deterministic() {
        let model = tiny_model(6, &[4, 5, 3]);
        let x = [0.2, -0.1, 0.4, 0.9];
        let t1 = forward(&model, &x).unwrap();
        let t2 = forward(&model, &x).unwrap();
        assert_eq!(t1.logits(), t2.logits());
        let (_, gl) = softmax_xent(t1.logits(), 2).unwrap();
        let g1 = backward(&model, &t1, &gl).unwrap();
        let g2 = backward(&model, &t2, &gl).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let model = tiny_model(9, &[4, 3, 2]);
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let loaded = Mlp::load(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded, model);
    }
}
