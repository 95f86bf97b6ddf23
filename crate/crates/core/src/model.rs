//! Shared-backbone multihead classifier.
//!
//! A feed-forward backbone (zero or more affine+activation layers) feeds `H`
//! independent linear heads. One backbone pass serves every head; the
//! backbone gradient is the sum of the contributions flowing back from all
//! heads (plus any extra feature gradient, e.g. from an auxiliary classifier).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numkit::{argmax_unchecked, RealMatrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(invalid(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Backbone widths; empty means the heads read the raw features.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub num_heads: usize,
    pub activation: Activation,
    pub weight_init_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(invalid("model needs at least one head"));
        }
        if self.num_classes < 2 {
            return Err(invalid("model needs at least two classes"));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if !(self.weight_init_scale.is_finite() && self.weight_init_scale >= 0.0) {
            return Err(invalid("weight_init_scale must be finite and >= 0"));
        }
        Ok(())
    }

    /// Width of the features the heads consume.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// Affine layer `y = W x + b` with `W` stored `out x in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `[-s, s]`, `s = scale / sqrt(fan_in)`; zero bias.
    pub fn init_uniform(in_dim: usize, out_dim: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let s = scale / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.uniform_range(-s, s))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &RealMatrix) -> RealMatrix {
        debug_assert_eq!(x.cols(), self.in_dim);
        let mut out = RealMatrix::zeros(x.rows(), self.out_dim);
        for b in 0..x.rows() {
            let xr = x.row(b);
            let yr = out.row_mut(b);
            for (o, y) in yr.iter_mut().enumerate() {
                let w = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                *y = self.bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &RealMatrix, dy: &RealMatrix, grad: &mut Dense) -> RealMatrix {
        let mut dx = RealMatrix::zeros(x.rows(), self.in_dim);
        for b in 0..x.rows() {
            let xr = x.row(b);
            let dyr = dy.row(b);
            let dxr = dx.row_mut(b);
            for (o, &g) in dyr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                let gw = &mut grad.weights[o * self.in_dim..(o + 1) * self.in_dim];
                for (gwi, xi) in gw.iter_mut().zip(xr) {
                    *gwi += g * xi;
                }
                let w = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                for (d, wi) in dxr.iter_mut().zip(w) {
                    *d += g * wi;
                }
            }
        }
        dx
    }

    fn slices(&self) -> [&[f64]; 2] {
        [&self.weights, &self.bias]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weights, &mut self.bias]
    }
}

/// Parameters of the backbone and every head.
///
/// `version` is bumped by every parameter update so that a forward cache
/// taken before an update cannot be replayed against the new parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub backbone: Vec<Dense>,
    pub heads: Vec<Dense>,
    #[serde(default)]
    version: u64,
}

/// Per-head logits, probabilities and argmax labels for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPredictions {
    pub logits: Vec<RealMatrix>,
    pub probs: Vec<RealMatrix>,
    pub labels: Vec<Vec<usize>>,
}

impl HeadPredictions {
    pub fn from_logits(logits: Vec<RealMatrix>) -> Self {
        let probs: Vec<RealMatrix> = logits.iter().map(RealMatrix::softmax_rows).collect();
        let labels = logits
            .iter()
            .map(|z| z.iter_rows().map(argmax_unchecked).collect())
            .collect();
        Self {
            logits,
            probs,
            labels,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.logits.len()
    }

    pub fn num_samples(&self) -> usize {
        self.logits.first().map_or(0, RealMatrix::rows)
    }

    pub fn num_classes(&self) -> usize {
        self.logits.first().map_or(0, RealMatrix::cols)
    }

    #[inline]
    pub fn logits_of(&self, head: usize, sample: usize) -> &[f64] {
        self.logits[head].row(sample)
    }

    #[inline]
    pub fn probs_of(&self, head: usize, sample: usize) -> &[f64] {
        self.probs[head].row(sample)
    }

    #[inline]
    pub fn label_of(&self, head: usize, sample: usize) -> usize {
        self.labels[head][sample]
    }

    /// Mean of the head logits per sample.
    pub fn ensemble_logits(&self) -> RealMatrix {
        let h = self.num_heads();
        let mut out = RealMatrix::zeros(self.num_samples(), self.num_classes());
        for z in &self.logits {
            for (o, v) in out.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *o += v;
            }
        }
        if h > 1 {
            for o in out.as_mut_slice() {
                *o /= h as f64;
            }
        }
        out
    }
}

/// Activations retained by [`ModelState::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: RealMatrix,
    pre: Vec<RealMatrix>,
    post: Vec<RealMatrix>,
}

impl ForwardCache {
    /// Features fed to the heads (output of the last backbone layer).
    pub fn features(&self) -> &RealMatrix {
        self.post.last().unwrap_or(&self.input)
    }
}

/// Gradient with the same layout as [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<Dense>,
    pub heads: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        let z = |d: &Dense| Dense::zeros(d.in_dim, d.out_dim);
        Self {
            backbone: model.backbone.iter().map(z).collect(),
            heads: model.heads.iter().map(z).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            for x in s.iter_mut() {
                *x *= k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.backbone
            .iter()
            .chain(&self.heads)
            .flat_map(Dense::slices)
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.backbone
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(Dense::slices_mut)
            .collect()
    }
}

impl ModelState {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut backbone = Vec::with_capacity(config.hidden_dims.len());
        let mut fan_in = config.input_dim;
        for &w in &config.hidden_dims {
            backbone.push(Dense::init_uniform(fan_in, w, config.weight_init_scale, rng));
            fan_in = w;
        }
        let heads = (0..config.num_heads)
            .map(|_| Dense::init_uniform(fan_in, config.num_classes, config.weight_init_scale, rng))
            .collect();
        Ok(Self {
            config,
            backbone,
            heads,
            version: 0,
        })
    }

    /// All-zero parameters.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut fan_in = config.input_dim;
        let mut backbone = Vec::new();
        for &w in &config.hidden_dims {
            backbone.push(Dense::zeros(fan_in, w));
            fan_in = w;
        }
        let heads = (0..config.num_heads)
            .map(|_| Dense::zeros(fan_in, config.num_classes))
            .collect();
        Ok(Self {
            config,
            backbone,
            heads,
            version: 0,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.backbone
            .iter()
            .chain(&self.heads)
            .map(Dense::param_count)
            .sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.backbone
            .iter()
            .chain(&self.heads)
            .flat_map(Dense::slices)
            .collect()
    }

    /// Mutable access to the parameters. Invalidates outstanding caches.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.backbone
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(Dense::slices_mut)
            .collect()
    }

    pub fn forward(&self, features: &RealMatrix) -> Result<(HeadPredictions, ForwardCache)> {
        if features.cols() != self.config.input_dim {
            return Err(invalid(format!(
                "features have {} columns, model expects {}",
                features.cols(),
                self.config.input_dim
            )));
        }
        let act = self.config.activation;
        let mut pre = Vec::with_capacity(self.backbone.len());
        let mut post: Vec<RealMatrix> = Vec::with_capacity(self.backbone.len());
        for layer in &self.backbone {
            let x = post.last().unwrap_or(features);
            let z = layer.forward(x);
            let mut a = z.clone();
            for v in a.as_mut_slice() {
                *v = act.apply(*v);
            }
            pre.push(z);
            post.push(a);
        }
        let feats = post.last().unwrap_or(features);
        let logits = self.heads.iter().map(|h| h.forward(feats)).collect();
        let preds = HeadPredictions::from_logits(logits);
        let cache = ForwardCache {
            version: self.version,
            input: features.clone(),
            pre,
            post,
        };
        Ok((preds, cache))
    }

    /// Predictions only.
    pub fn predict(&self, features: &RealMatrix) -> Result<HeadPredictions> {
        self.forward(features).map(|(p, _)| p)
    }

    /// Backbone features only (input to the heads).
    pub fn features(&self, features: &RealMatrix) -> Result<RealMatrix> {
        self.forward(features).map(|(_, c)| c.features().clone())
    }

    /// Exact gradients given `dL/dlogits` for every head.
    pub fn backward(&self, cache: &ForwardCache, head_grads: &[RealMatrix]) -> Result<Gradients> {
        self.backward_with_feature_grad(cache, head_grads, None)
    }

    /// As [`backward`](Self::backward), with an extra gradient arriving
    /// directly at the backbone output (e.g. from an auxiliary classifier).
    pub fn backward_with_feature_grad(
        &self,
        cache: &ForwardCache,
        head_grads: &[RealMatrix],
        feature_grad: Option<&RealMatrix>,
    ) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::ContractViolation(format!(
                "forward cache is from model version {}, model is at {}",
                cache.version, self.version
            )));
        }
        if head_grads.len() != self.heads.len() {
            return Err(invalid(format!(
                "{} head gradients for {} heads",
                head_grads.len(),
                self.heads.len()
            )));
        }
        let n = cache.input.rows();
        let feats = cache.features();
        let mut grads = Gradients::zeros_like(self);
        let mut d_feat = match feature_grad {
            Some(g) => {
                if g.rows() != n || g.cols() != feats.cols() {
                    return Err(invalid("feature gradient shape mismatch"));
                }
                g.clone()
            }
            None => RealMatrix::zeros(n, feats.cols()),
        };
        for ((head, dz), g) in self.heads.iter().zip(head_grads).zip(grads.heads.iter_mut()) {
            if dz.rows() != n || dz.cols() != head.out_dim {
                return Err(invalid("head gradient shape mismatch"));
            }
            let dx = head.backward(feats, dz, g);
            for (a, b) in d_feat.as_mut_slice().iter_mut().zip(dx.as_slice()) {
                *a += b;
            }
        }
        let act = self.config.activation;
        let mut upstream = d_feat;
        for l in (0..self.backbone.len()).rev() {
            let mut dpre = upstream;
            for ((d, &z), &a) in dpre
                .as_mut_slice()
                .iter_mut()
                .zip(cache.pre[l].as_slice())
                .zip(cache.post[l].as_slice())
            {
                *d *= act.derivative(z, a);
            }
            let x = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            upstream = self.backbone[l].backward(x, &dpre, &mut grads.backbone[l]);
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Momentum SGD with decoupled weight decay:
/// `v <- m v + g`, `w <- w - lr v - lr wd w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub config: OptimizerConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    /// One step over parallel parameter / gradient slices at learning rate `lr`.
    pub fn apply(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid("parameter and gradient layouts differ"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(invalid("parameter and gradient layouts differ"));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::TrainingDivergence {
                step: 0,
                reason: "non-finite gradient".into(),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let OptimizerConfig {
            weight_decay: wd,
            momentum: m,
            ..
        } = self.config;
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = m * *vi + gi;
                *w -= lr * *vi + lr * wd * *w;
            }
        }
        Ok(())
    }

    pub fn apply_update(&mut self, model: &mut ModelState, grads: &Gradients) -> Result<()> {
        let lr = self.config.learning_rate;
        self.apply_update_with_lr(model, grads, lr)
    }

    pub fn apply_update_with_lr(
        &mut self,
        model: &mut ModelState,
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        let g = grads.slices();
        self.apply(model.param_slices_mut(), &g, lr)?;
        if !model.is_finite() {
            return Err(Error::TrainingDivergence {
                step: 0,
                reason: "non-finite parameters after update".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(hidden: Vec<usize>, heads: usize) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            hidden_dims: hidden,
            num_classes: 3,
            num_heads: heads,
            activation: Activation::Tanh,
            weight_init_scale: 1.0,
        }
    }

    fn batch() -> RealMatrix {
        RealMatrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]], 3).unwrap()
    }

    #[test]
    fn zero_model_gives_uniform() {
        let m = ModelState::zeros(cfg(vec![4], 3)).unwrap();
        let p = m.predict(&batch()).unwrap();
        for h in 0..3 {
            assert!(p.logits[h].as_slice().iter().all(|&z| z == 0.0));
            for b in 0..2 {
                for &q in p.probs_of(h, b) {
                    assert!((q - 1.0 / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn identity_linear_model_passes_input_through() {
        let mut m = ModelState::zeros(cfg(vec![], 1)).unwrap();
        for i in 0..3 {
            m.heads[0].weights[i * 3 + i] = 1.0;
        }
        let x = batch();
        let p = m.predict(&x).unwrap();
        assert_eq!(p.logits[0], x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = ModelState::zeros(cfg(vec![], 1)).unwrap();
        let x = RealMatrix::zeros(1, 4);
        assert!(matches!(m.forward(&x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ModelState::new(cfg(vec![5, 4], 3), &mut SeededRng::new(7)).unwrap();
        let b = ModelState::new(cfg(vec![5, 4], 3), &mut SeededRng::new(7)).unwrap();
        let x = batch();
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    }

    #[test]
    fn param_count_formula() {
        let m = ModelState::zeros(cfg(vec![5, 4], 3)).unwrap();
        let backbone = (3 * 5 + 5) + (5 * 4 + 4);
        assert_eq!(m.param_count(), backbone + 3 * (4 + 1) * 3);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = ModelState::new(cfg(vec![4], 2), &mut SeededRng::new(1)).unwrap();
        let (_, cache) = m.forward(&batch()).unwrap();
        let g = m
            .backward(&cache, &[RealMatrix::zeros(2, 3), RealMatrix::zeros(2, 3)])
            .unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn head_isolation() {
        let m = ModelState::new(cfg(vec![4], 2), &mut SeededRng::new(1)).unwrap();
        let (_, cache) = m.forward(&batch()).unwrap();
        let up = RealMatrix::from_rows(&[[1.0, -0.5, 0.2], [0.3, 0.3, -1.0]], 3).unwrap();
        let g = m.backward(&cache, &[up, RealMatrix::zeros(2, 3)]).unwrap();
        assert!(g.heads[0].weights.iter().any(|v| *v != 0.0));
        assert!(g.heads[1].weights.iter().chain(&g.heads[1].bias).all(|v| *v == 0.0));
    }

    #[test]
    fn backbone_gradient_is_additive_over_heads() {
        let m = ModelState::new(cfg(vec![4], 2), &mut SeededRng::new(3)).unwrap();
        let (_, cache) = m.forward(&batch()).unwrap();
        let u0 = RealMatrix::from_rows(&[[1.0, -0.5, 0.2], [0.3, 0.3, -1.0]], 3).unwrap();
        let u1 = RealMatrix::from_rows(&[[-0.1, 0.4, 0.7], [0.0, 1.3, 0.2]], 3).unwrap();
        let z = RealMatrix::zeros(2, 3);
        let g0 = m.backward(&cache, &[u0.clone(), z.clone()]).unwrap();
        let g1 = m.backward(&cache, &[z, u1.clone()]).unwrap();
        let both = m.backward(&cache, &[u0, u1]).unwrap();
        for l in 0..1 {
            for ((a, b), c) in g0.backbone[l]
                .weights
                .iter()
                .zip(&g1.backbone[l].weights)
                .zip(&both.backbone[l].weights)
            {
                assert!((a + b - c).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = ModelState::new(cfg(vec![4], 1), &mut SeededRng::new(1)).unwrap();
        let (_, cache) = m.forward(&batch()).unwrap();
        let g = Gradients::zeros_like(&m);
        let mut opt = Sgd::new(OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            momentum: 0.0,
        })
        .unwrap();
        opt.apply_update(&mut m, &g).unwrap();
        let err = m.backward(&cache, &[RealMatrix::zeros(2, 3)]).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    fn sgd(lr: f64, wd: f64, m: f64) -> Sgd {
        Sgd::new(OptimizerConfig {
            learning_rate: lr,
            weight_decay: wd,
            momentum: m,
        })
        .unwrap()
    }

    #[test]
    fn sgd_scalar_examples() {
        let mut w = [1.0];
        sgd(0.1, 0.0, 0.0).apply(vec![&mut w], &[&[1.0]], 0.1).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15);

        let mut w = [1.0];
        sgd(0.1, 0.1, 0.0).apply(vec![&mut w], &[&[0.0]], 0.1).unwrap();
        assert!((w[0] - 0.99).abs() < 1e-15);

        let mut w = [1.0, -2.0];
        sgd(0.1, 0.0, 0.9).apply(vec![&mut w], &[&[0.0, 0.0]], 0.1).unwrap();
        assert_eq!(w, [1.0, -2.0]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = sgd(0.1, 0.0, 0.5);
        let mut w = [0.0];
        opt.apply(vec![&mut w], &[&[1.0]], 0.1).unwrap();
        opt.apply(vec![&mut w], &[&[1.0]], 0.1).unwrap();
        // v1 = 1, v2 = 1.5
        assert!((w[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let mut w = [1.0];
        let err = sgd(0.1, 0.0, 0.0)
            .apply(vec![&mut w], &[&[f64::NAN]], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::TrainingDivergence { .. }));
    }

    #[test]
    fn ensemble_examples() {
        let a = RealMatrix::from_rows(&[[1.0, 0.0]], 2).unwrap();
        let b = RealMatrix::from_rows(&[[0.0, 1.0]], 2).unwrap();
        let p = HeadPredictions::from_logits(vec![a.clone(), b]);
        assert_eq!(p.ensemble_logits().row(0), &[0.5, 0.5]);
        let one = HeadPredictions::from_logits(vec![a.clone()]);
        assert_eq!(one.ensemble_logits(), a);
        let same = HeadPredictions::from_logits(vec![a.clone(), a.clone(), a.clone()]);
        assert_eq!(same.ensemble_logits(), a);
    }
}
