//! Context-conditioned vector fields over a shared MLP root network.
//!
//! Three conditioning mechanisms are supported:
//! * concatenation — shallow data/context feature nets feeding the root,
//! * linear hypernetwork — root weights generated from the context,
//! * low-rank adaptation — per-layer rank-`d_ξ` update scaled by the context.
//!
//! Evaluation is split into a `bind` stage that folds the context into
//! per-environment layer weights once, and a cheap per-step `eval` that the
//! solver calls on every stage. Both a tape (differentiable) and a plain
//! float path are provided; they compute identical values.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Swish,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply_var(&self, x: &Var) -> Var {
        match self {
            Activation::Swish => x.swish(),
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x.clone(),
        }
    }

    fn apply_tensor(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Swish => x.map(|v| v * sigmoid(v)),
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Tanh => x.map(f64::tanh),
            Activation::Identity => x.clone(),
        }
    }
}

/// One affine layer; weights are stored `in×out` so rows of a batched
/// state multiply from the left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Activation,
}

impl MlpLayer {
    pub fn in_dim(&self) -> usize {
        self.w.shape().rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape().cols()
    }
}

/// Plain multi-layer perceptron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<MlpLayer>,
}

impl Mlp {
    /// Lecun-style init: weights `N(0, 1/√fan_in)`, zero biases, the given
    /// activation on all but the last layer.
    pub fn init(dims: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Mlp {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
            let w = Tensor::matrix(
                fan_in,
                fan_out,
                (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect(),
            );
            let act = if i + 1 == dims.len() - 1 {
                Activation::Identity
            } else {
                activation
            };
            layers.push(MlpLayer {
                w,
                b: Tensor::zeros(Shape::Vector(fan_out)),
                activation: act,
            });
        }
        Mlp { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.activation.apply_tensor(&h.affine(&layer.w, &layer.b)?);
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn flat_len(&self) -> usize {
        self.param_count()
    }
}

fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect(),
    )
}

/// Concatenation conditioning: shallow data and context nets (depth 1)
/// whose features are concatenated and fed to the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcatBackbone {
    pub root: Mlp,
    pub context_net: Mlp,
    pub data_net: Mlp,
}

/// Linear hypernetwork conditioning: flattened root weights are the
/// affine image of the context, `θ(ξ) = ξ·Wh + bh`. The bias carries the
/// environment-agnostic base weights, so `ξ = 0` is a usable default model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetBackbone {
    /// `d_ξ × flat` generator weights.
    pub hyper_w: Tensor,
    /// Flattened base weights, length `flat`.
    pub hyper_b: Tensor,
    /// Layer sizes of the generated root, e.g. `[d, 64, 64, d]`.
    pub root_dims: Vec<usize>,
}

/// Low-rank adaptation conditioning. Per layer the effective weight is
/// `W + B·diag(ξ)·A` (stored in the `in×out` orientation), so `ξ = 0`
/// reproduces the root exactly and the update is linear in the context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraBackbone {
    pub root: Mlp,
    /// Per layer: `d_ξ × out`, Xavier-initialized.
    pub lora_a: Vec<Tensor>,
    /// Per layer: `in × d_ξ`, Xavier-initialized.
    pub lora_b: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    Concat,
    Hypernet,
    Lora,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(BackboneKind::Concat),
            "hypernet" => Ok(BackboneKind::Hypernet),
            "lora" => Ok(BackboneKind::Lora),
            other => Err(Error::config(format!(
                "unknown backbone kind `{other}` (expected concat|hypernet|lora)"
            ))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BackboneKind::Concat => "concat",
            BackboneKind::Hypernet => "hypernet",
            BackboneKind::Lora => "lora",
        };
        f.write_str(s)
    }
}

/// Architecture hyperparameters shared by all kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub state_dim: usize,
    pub context_dim: usize,
    /// Root hidden width (default 64).
    pub width: usize,
    /// Feature width of the concat data/context nets (default 32).
    pub feature_dim: usize,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind, state_dim: usize, context_dim: usize) -> Self {
        BackboneConfig {
            kind,
            state_dim,
            context_dim,
            width: 64,
            feature_dim: 32,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    fn root_dims(&self) -> Vec<usize> {
        match self.kind {
            // The root consumes the two concatenated feature blocks.
            BackboneKind::Concat => vec![
                2 * self.feature_dim,
                self.width,
                self.width,
                self.state_dim,
            ],
            _ => vec![self.state_dim, self.width, self.width, self.state_dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Backbone {
    Concat(ConcatBackbone),
    Hypernet(HypernetBackbone),
    Lora(LoraBackbone),
}

/// Deterministic construction from a seed; two calls with equal inputs
/// produce bitwise-identical parameters.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Backbone {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root_dims = cfg.root_dims();
    match cfg.kind {
        BackboneKind::Concat => {
            let root = Mlp::init(&root_dims, Activation::Swish, &mut rng);
            // The feature nets are activated on their single layer.
            let mut data_net =
                Mlp::init(&[cfg.state_dim, cfg.feature_dim], Activation::Swish, &mut rng);
            data_net.layers[0].activation = Activation::Swish;
            let mut context_net = Mlp::init(
                &[cfg.context_dim, cfg.feature_dim],
                Activation::Swish,
                &mut rng,
            );
            context_net.layers[0].activation = Activation::Swish;
            Backbone::Concat(ConcatBackbone {
                root,
                context_net,
                data_net,
            })
        }
        BackboneKind::Hypernet => {
            let base = Mlp::init(&root_dims, Activation::Swish, &mut rng);
            let flat = base.flat_len();
            let mut hyper_b = Vec::with_capacity(flat);
            for layer in &base.layers {
                hyper_b.extend_from_slice(layer.w.data());
                hyper_b.extend_from_slice(layer.b.data());
            }
            let normal = Normal::new(0.0, 0.01 / (cfg.context_dim as f64).sqrt()).unwrap();
            let hyper_w = Tensor::matrix(
                cfg.context_dim,
                flat,
                (0..cfg.context_dim * flat)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
            );
            Backbone::Hypernet(HypernetBackbone {
                hyper_w,
                hyper_b: Tensor::vector(hyper_b),
                root_dims,
            })
        }
        BackboneKind::Lora => {
            let root = Mlp::init(&root_dims, Activation::Swish, &mut rng);
            let mut lora_a = Vec::new();
            let mut lora_b = Vec::new();
            for layer in &root.layers {
                lora_a.push(xavier_uniform(cfg.context_dim, layer.out_dim(), &mut rng));
                lora_b.push(xavier_uniform(layer.in_dim(), cfg.context_dim, &mut rng));
            }
            Backbone::Lora(LoraBackbone { root, lora_a, lora_b })
        }
    }
}

impl Backbone {
    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Concat(_) => BackboneKind::Concat,
            Backbone::Hypernet(_) => BackboneKind::Hypernet,
            Backbone::Lora(_) => BackboneKind::Lora,
        }
    }

    pub fn context_dim(&self) -> usize {
        match self {
            Backbone::Concat(b) => b.context_net.layers[0].in_dim(),
            Backbone::Hypernet(b) => b.hyper_w.shape().rows(),
            Backbone::Lora(b) => b.lora_a[0].shape().rows(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Backbone::Concat(b) => b.data_net.layers[0].in_dim(),
            Backbone::Hypernet(b) => b.root_dims[0],
            Backbone::Lora(b) => b.root.layers[0].in_dim(),
        }
    }

    /// Parameter tensors in a stable canonical order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        match self {
            Backbone::Concat(b) => {
                for net in [&b.data_net, &b.context_net, &b.root] {
                    for l in &net.layers {
                        out.push(&l.w);
                        out.push(&l.b);
                    }
                }
            }
            Backbone::Hypernet(b) => {
                out.push(&b.hyper_w);
                out.push(&b.hyper_b);
            }
            Backbone::Lora(b) => {
                for l in &b.root.layers {
                    out.push(&l.w);
                    out.push(&l.b);
                }
                for (a, bb) in b.lora_a.iter().zip(&b.lora_b) {
                    out.push(a);
                    out.push(bb);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        match self {
            Backbone::Concat(b) => {
                for net in [&mut b.data_net, &mut b.context_net, &mut b.root] {
                    for l in &mut net.layers {
                        out.push(&mut l.w);
                        out.push(&mut l.b);
                    }
                }
            }
            Backbone::Hypernet(b) => {
                out.push(&mut b.hyper_w);
                out.push(&mut b.hyper_b);
            }
            Backbone::Lora(b) => {
                for l in &mut b.root.layers {
                    out.push(&mut l.w);
                    out.push(&mut l.b);
                }
                for (a, bb) in b.lora_a.iter_mut().zip(b.lora_b.iter_mut()) {
                    out.push(a);
                    out.push(bb);
                }
            }
        }
        out
    }

    /// Active parameter count of this expert (everything in `params`).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Lift every parameter onto the tape as a leaf.
    pub fn lift(&self, tape: &Tape) -> LiftedBackbone {
        let vars: Vec<Var> = self.params().iter().map(|t| tape.leaf((*t).clone())).collect();
        LiftedBackbone {
            kind: self.kind(),
            shape: self.clone(),
            vars,
        }
    }

    /// Fold the context into per-environment layer weights (plain floats).
    pub fn bind_plain(&self, xi: &Tensor) -> Result<BoundFieldPlain> {
        self.check_context(xi)?;
        let layers = match self {
            Backbone::Concat(b) => {
                let ctx_feat = b.context_net.forward(xi)?;
                bind_concat_plain(b, &ctx_feat)?
            }
            Backbone::Hypernet(b) => {
                let flat = xi.matmul(&b.hyper_w)?.add(&b.hyper_b)?;
                unflatten_plain(&flat, &b.root_dims)
            }
            Backbone::Lora(b) => {
                let mut layers = Vec::with_capacity(b.root.layers.len());
                for (l, (a, bb)) in b.root.layers.iter().zip(b.lora_a.iter().zip(&b.lora_b)) {
                    let update = bb.mul(xi)?.matmul(a)?;
                    layers.push((l.w.add(&update)?, l.b.clone(), l.activation));
                }
                layers
            }
        };
        Ok(BoundFieldPlain { layers })
    }

    fn check_context(&self, xi: &Tensor) -> Result<()> {
        let want = self.context_dim();
        if xi.shape() != Shape::Vector(want) {
            return Err(Error::ShapeMismatch {
                op: "bind_context",
                lhs: xi.shape(),
                rhs: Shape::Vector(want),
            });
        }
        Ok(())
    }

    /// One-off plain evaluation (bind + eval); use `bind_plain` when the
    /// same context is applied across many states.
    pub fn eval_field(&self, xi: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.bind_plain(xi)?.eval(z)
    }
}

fn unflatten_plain(flat: &Tensor, root_dims: &[usize]) -> Vec<(Tensor, Tensor, Activation)> {
    let mut layers = Vec::with_capacity(root_dims.len() - 1);
    let mut offset = 0;
    for i in 0..root_dims.len() - 1 {
        let (fan_in, fan_out) = (root_dims[i], root_dims[i + 1]);
        let w = flat
            .slice(offset, fan_in * fan_out)
            .and_then(|t| t.reshape(Shape::Matrix(fan_in, fan_out)))
            .expect("flat generated weights sized by root_dims");
        offset += fan_in * fan_out;
        let b = flat.slice(offset, fan_out).expect("bias slice in range");
        offset += fan_out;
        let act = if i + 1 == root_dims.len() - 1 {
            Activation::Identity
        } else {
            Activation::Swish
        };
        layers.push((w, b, act));
    }
    layers
}

fn bind_concat_plain(
    b: &ConcatBackbone,
    ctx_feat: &Tensor,
) -> Result<Vec<(Tensor, Tensor, Activation)>> {
    // The context block of the first root layer folds into its bias.
    let feature_dim = ctx_feat.len();
    let first = &b.root.layers[0];
    let width = first.out_dim();
    let w_flat = first.w.slice(0, feature_dim * width)?;
    let w_data = w_flat.reshape(Shape::Matrix(feature_dim, width))?;
    let w_ctx = first
        .w
        .slice(feature_dim * width, feature_dim * width)?
        .reshape(Shape::Matrix(feature_dim, width))?;
    let b_eff = first.b.add(&ctx_feat.matmul(&w_ctx)?)?;

    let data0 = &b.data_net.layers[0];
    let mut layers = vec![
        (data0.w.clone(), data0.b.clone(), data0.activation),
        (w_data, b_eff, first.activation),
    ];
    for l in &b.root.layers[1..] {
        layers.push((l.w.clone(), l.b.clone(), l.activation));
    }
    Ok(layers)
}

/// A backbone with parameters lifted onto a tape. `vars` is aligned with
/// [`Backbone::params`] so gradients can be read back positionally.
pub struct LiftedBackbone {
    kind: BackboneKind,
    shape: Backbone,
    vars: Vec<Var>,
}

impl LiftedBackbone {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Differentiable analog of [`Backbone::bind_plain`].
    pub fn bind(&self, xi: &Var) -> Result<BoundField> {
        let layers = match (&self.kind, &self.shape) {
            (BackboneKind::Concat, Backbone::Concat(b)) => {
                // vars: data(w,b), ctx(w,b), root layers (w,b)*
                let (dw, db, cw, cb) = (&self.vars[0], &self.vars[1], &self.vars[2], &self.vars[3]);
                let ctx_feat = xi.affine(cw, cb)?.swish();
                let feature_dim = b.context_net.layers[0].out_dim();
                let first = &b.root.layers[0];
                let width = first.out_dim();
                let (rw1, rb1) = (&self.vars[4], &self.vars[5]);
                let w_data = rw1
                    .slice(0, feature_dim * width)?
                    .reshape(Shape::Matrix(feature_dim, width))?;
                let w_ctx = rw1
                    .slice(feature_dim * width, feature_dim * width)?
                    .reshape(Shape::Matrix(feature_dim, width))?;
                let b_eff = rb1.add(&ctx_feat.matmul(&w_ctx)?)?;
                let mut layers = vec![
                    (dw.clone(), db.clone(), b.data_net.layers[0].activation),
                    (w_data, b_eff, first.activation),
                ];
                for (i, l) in b.root.layers.iter().enumerate().skip(1) {
                    layers.push((
                        self.vars[4 + 2 * i].clone(),
                        self.vars[5 + 2 * i].clone(),
                        l.activation,
                    ));
                }
                layers
            }
            (BackboneKind::Hypernet, Backbone::Hypernet(b)) => {
                let (hw, hb) = (&self.vars[0], &self.vars[1]);
                let flat = xi.affine(hw, hb)?;
                let mut layers = Vec::with_capacity(b.root_dims.len() - 1);
                let mut offset = 0;
                for i in 0..b.root_dims.len() - 1 {
                    let (fan_in, fan_out) = (b.root_dims[i], b.root_dims[i + 1]);
                    let w = flat
                        .slice(offset, fan_in * fan_out)?
                        .reshape(Shape::Matrix(fan_in, fan_out))?;
                    offset += fan_in * fan_out;
                    let bias = flat.slice(offset, fan_out)?;
                    offset += fan_out;
                    let act = if i + 1 == b.root_dims.len() - 1 {
                        Activation::Identity
                    } else {
                        Activation::Swish
                    };
                    layers.push((w, bias, act));
                }
                layers
            }
            (BackboneKind::Lora, Backbone::Lora(b)) => {
                let n = b.root.layers.len();
                let mut layers = Vec::with_capacity(n);
                for (i, l) in b.root.layers.iter().enumerate() {
                    let w = &self.vars[2 * i];
                    let bias = &self.vars[2 * i + 1];
                    let a = &self.vars[2 * n + 2 * i];
                    let bb = &self.vars[2 * n + 2 * i + 1];
                    let update = bb.mul(xi)?.matmul(a)?;
                    layers.push((w.add(&update)?, bias.clone(), l.activation));
                }
                layers
            }
            _ => unreachable!("kind always matches shape"),
        };
        Ok(BoundField { layers })
    }
}

/// Per-environment layer stack on the tape.
pub struct BoundField {
    layers: Vec<(Var, Var, Activation)>,
}

impl BoundField {
    pub fn eval(&self, z: &Var) -> Result<Var> {
        let mut h = z.clone();
        for (w, b, act) in &self.layers {
            h = act.apply_var(&h.affine(w, b)?);
        }
        Ok(h)
    }
}

/// Per-environment layer stack in plain floats.
pub struct BoundFieldPlain {
    layers: Vec<(Tensor, Tensor, Activation)>,
}

impl BoundFieldPlain {
    pub fn eval(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.clone();
        for (w, b, act) in &self.layers {
            h = act.apply_tensor(&h.affine(w, b)?);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;

    fn cfg(kind: BackboneKind) -> BackboneConfig {
        BackboneConfig {
            kind,
            state_dim: 2,
            context_dim: 4,
            width: 8,
            feature_dim: 5,
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        for kind in [BackboneKind::Concat, BackboneKind::Hypernet, BackboneKind::Lora] {
            let a = init_backbone(&cfg(kind), 7);
            let b = init_backbone(&cfg(kind), 7);
            assert_eq!(a, b);
            let c = init_backbone(&cfg(kind), 8);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn lora_with_zero_context_equals_root() {
        let bb = init_backbone(&cfg(BackboneKind::Lora), 3);
        let Backbone::Lora(inner) = &bb else { unreachable!() };
        let xi = Tensor::zeros(Shape::Vector(4));
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let z = Tensor::vector((0..2).map(|_| rng.random_range(-1.0..1.0)).collect());
            let via_backbone = bb.eval_field(&xi, &z).unwrap();
            let via_root = inner.root.forward(&z).unwrap();
            assert_eq!(via_backbone, via_root);
        }
    }

    #[test]
    fn hypernet_with_zero_generator_ignores_context() {
        let mut bb = init_backbone(&cfg(BackboneKind::Hypernet), 3);
        if let Backbone::Hypernet(h) = &mut bb {
            h.hyper_w = Tensor::zeros(h.hyper_w.shape());
        }
        let z = Tensor::vector(vec![0.3, -0.8]);
        let y0 = bb.eval_field(&Tensor::zeros(Shape::Vector(4)), &z).unwrap();
        let y1 = bb
            .eval_field(&Tensor::vector(vec![5.0, -2.0, 1.0, 0.5]), &z)
            .unwrap();
        assert_eq!(y0, y1);
    }

    #[test]
    fn hypernet_generated_weights_are_affine_in_context() {
        // θ(a·ξ1 + b·ξ2) = a·θ(ξ1) + b·θ(ξ2) − (a+b−1)·base
        let bb = init_backbone(&cfg(BackboneKind::Hypernet), 11);
        let Backbone::Hypernet(h) = &bb else { unreachable!() };
        let gen = |xi: &Tensor| xi.matmul(&h.hyper_w).unwrap().add(&h.hyper_b).unwrap();
        let xi1 = Tensor::vector(vec![0.2, -0.5, 1.0, 0.3]);
        let xi2 = Tensor::vector(vec![-1.0, 0.7, 0.1, 0.9]);
        let (a, b) = (1.7, -0.4);
        let combo = xi1.scale(a).add(&xi2.scale(b)).unwrap();
        let lhs = gen(&combo);
        let rhs = gen(&xi1)
            .scale(a)
            .add(&gen(&xi2).scale(b))
            .unwrap()
            .sub(&h.hyper_b.scale(a + b - 1.0))
            .unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_param_count_matches_hand_formula() {
        let c = cfg(BackboneKind::Concat);
        let bb = init_backbone(&c, 1);
        // data: 2→5, ctx: 4→5, root: 10→8→8→2
        let expect = (2 * 5 + 5) + (4 * 5 + 5) + (10 * 8 + 8) + (8 * 8 + 8) + (8 * 2 + 2);
        assert_eq!(bb.param_count(), expect);
    }

    #[test]
    fn default_root_is_three_layers_of_width_64() {
        let c = BackboneConfig::new(BackboneKind::Lora, 2, 4);
        let bb = init_backbone(&c, 0);
        let Backbone::Lora(l) = &bb else { unreachable!() };
        let dims: Vec<(usize, usize)> =
            l.root.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        assert_eq!(dims, vec![(2, 64), (64, 64), (64, 2)]);
        assert_eq!(l.root.layers[0].activation, Activation::Swish);
        assert_eq!(l.root.layers[2].activation, Activation::Identity);
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [BackboneKind::Concat, BackboneKind::Hypernet, BackboneKind::Lora] {
            let bb = init_backbone(&cfg(kind), 21);
            let xi = Tensor::vector((0..4).map(|_| rng.random_range(-0.5..0.5)).collect());
            let z = Tensor::matrix(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());

            let plain = bb.bind_plain(&xi).unwrap().eval(&z).unwrap();

            let tape = Tape::new();
            let lifted = bb.lift(&tape);
            let xi_v = tape.leaf(xi.clone());
            let z_v = tape.leaf(z.clone());
            let out = lifted.bind(&xi_v).unwrap().eval(&z_v).unwrap();
            let tvals = out.value();
            for (a, b) in plain.data().iter().zip(tvals.data()) {
                assert!((a - b).abs() < 1e-14, "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_every_kind() {
        // Scalar loss = Σ G(z;ξ,θ)², checked w.r.t. ξ, z and a parameter.
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for kind in [BackboneKind::Concat, BackboneKind::Hypernet, BackboneKind::Lora] {
            let bb = init_backbone(&cfg(kind), 31);
            let xi = Tensor::vector((0..4).map(|_| rng.random_range(-0.5..0.5)).collect());
            let z = Tensor::vector(vec![0.4, -0.9]);

            let loss_of = |bb: &Backbone, xi: &Tensor, z: &Tensor| -> f64 {
                bb.eval_field(xi, z).unwrap().sq_norm()
            };

            let tape = Tape::new();
            let lifted = bb.lift(&tape);
            let xi_v = tape.leaf(xi.clone());
            let z_v = tape.leaf(z.clone());
            let out = lifted.bind(&xi_v).unwrap().eval(&z_v).unwrap();
            let loss = out.square().sum();
            let grads = backward(&loss).unwrap();

            let h = 1e-5;
            // Context gradient.
            let g_xi = grads.get(&xi_v);
            for i in 0..xi.len() {
                let mut hi = xi.clone();
                let mut lo = xi.clone();
                hi.data_mut()[i] += h;
                lo.data_mut()[i] -= h;
                let fd = (loss_of(&bb, &hi, &z) - loss_of(&bb, &lo, &z)) / (2.0 * h);
                let scale = fd.abs().max(g_xi.data()[i].abs()).max(1e-6);
                assert!(
                    (g_xi.data()[i] - fd).abs() / scale < 1e-4,
                    "{kind:?} ∂ξ[{i}]: {} vs {fd}",
                    g_xi.data()[i]
                );
            }
            // State gradient.
            let g_z = grads.get(&z_v);
            for i in 0..z.len() {
                let mut hi = z.clone();
                let mut lo = z.clone();
                hi.data_mut()[i] += h;
                lo.data_mut()[i] -= h;
                let fd = (loss_of(&bb, &xi, &hi) - loss_of(&bb, &xi, &lo)) / (2.0 * h);
                let scale = fd.abs().max(g_z.data()[i].abs()).max(1e-6);
                assert!((g_z.data()[i] - fd).abs() / scale < 1e-4);
            }
            // A handful of weight coordinates from the first parameter.
            let g_p0 = grads.get(&lifted.vars()[0]);
            for i in [0_usize, 1, 3] {
                let mut hi = bb.clone();
                let mut lo = bb.clone();
                hi.params_mut()[0].data_mut()[i] += h;
                lo.params_mut()[0].data_mut()[i] -= h;
                let fd = (loss_of(&hi, &xi, &z) - loss_of(&lo, &xi, &z)) / (2.0 * h);
                let scale = fd.abs().max(g_p0.data()[i].abs()).max(1e-6);
                assert!((g_p0.data()[i] - fd).abs() / scale < 1e-4);
            }
        }
    }

    #[test]
    fn context_dimension_mismatch_is_error() {
        let bb = init_backbone(&cfg(BackboneKind::Lora), 1);
        let bad = Tensor::zeros(Shape::Vector(3));
        assert!(bb.bind_plain(&bad).is_err());
    }
}
