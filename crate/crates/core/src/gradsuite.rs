//! Finite-difference checks over every primitive, layer and loss.
//!
//! Each component builds a small random graph, reduces it to a scalar with
//! a fixed random projection, and compares the analytic gradient of every
//! trainable leaf with central differences.

use crate::autodiff::{grad_check_against, Graph, NodeId};
use crate::error::Result;
use crate::layers::{component_rng, Backbone, BackboneSpec, Linear, NormLayer};
use crate::multitask::{
    classification_loss, regression_loss, soft_sharing_penalty, ExperimentMode, FusionHead, ModelSpec, TwinModel,
};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_PROBE: f64 = 1e-4;

/// A scalar loss with the leaves to check.
pub struct Case {
    pub graph: Graph,
    pub loss: NodeId,
    pub leaves: Vec<NodeId>,
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Case>;

pub struct Component {
    pub name: &'static str,
    build: Builder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub flagged: usize,
    pub points: usize,
}

impl Component {
    /// Draws one random instance of the component.
    pub fn instance(&self, rng: &mut ChaCha8Rng) -> Result<Case> {
        (self.build)(rng)
    }
}

impl ComponentReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance && self.checked > 0
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub points: usize,
    pub probe: f64,
    pub seed: u64,
    /// Perturbs the analytic gradient of the named component before the
    /// comparison; a negative control for the checker itself.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            points: 100,
            probe: DEFAULT_PROBE,
            seed: 0,
            corrupt: None,
        }
    }
}

fn leaf(g: &mut Graph, rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NodeId {
    g.leaf(Tensor::uniform(shape, lo, hi, rng), true)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(g: &mut Graph, rng: &mut ChaCha8Rng, out: NodeId) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(Tensor::uniform(&shape, -1.0, 1.0, rng));
    let p = g.mul(out, r)?;
    g.sum(p)
}

fn case(g: Graph, loss: NodeId, leaves: Vec<NodeId>) -> Result<Case> {
    Ok(Case { graph: g, loss, leaves })
}

macro_rules! unary {
    ($fname:ident, $method:ident, $lo:expr, $hi:expr) => {
        fn $fname(rng: &mut ChaCha8Rng) -> Result<Case> {
            let mut g = Graph::new();
            let x = leaf(&mut g, rng, &[3, 4], $lo, $hi);
            let y = g.$method(x)?;
            let l = project(&mut g, rng, y)?;
            case(g, l, vec![x])
        }
    };
}

macro_rules! binary {
    ($fname:ident, $method:ident, $lo:expr, $hi:expr) => {
        fn $fname(rng: &mut ChaCha8Rng) -> Result<Case> {
            let mut g = Graph::new();
            let a = leaf(&mut g, rng, &[3, 4], -2.0, 2.0);
            let b = leaf(&mut g, rng, &[3, 4], $lo, $hi);
            let y = g.$method(a, b)?;
            let l = project(&mut g, rng, y)?;
            case(g, l, vec![a, b])
        }
    };
}

unary!(relu, relu, -2.0, 2.0);
unary!(exp, exp, -2.0, 2.0);
unary!(log, log, 0.5, 3.0);
unary!(abs, abs, -2.0, 2.0);
unary!(square, square, -2.0, 2.0);
unary!(sqrt, sqrt, 0.5, 3.0);
unary!(log_softmax, log_softmax, -3.0, 3.0);
binary!(add, add, -2.0, 2.0);
binary!(sub, sub, -2.0, 2.0);
binary!(mul, mul, -2.0, 2.0);
binary!(div, div, 0.5, 2.0);

fn scalar_ops(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let x = leaf(&mut g, rng, &[3, 4], -2.0, 2.0);
    let c: f64 = rng.gen_range(-2.0..2.0);
    let a = g.add_scalar(x, c)?;
    let y = g.mul_scalar(a, c)?;
    let l = project(&mut g, rng, y)?;
    case(g, l, vec![x])
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let x = leaf(&mut g, rng, &[3, 4], -2.0, 2.0);
    let s = g.sum(x)?;
    let m = g.mean(x)?;
    let sm = g.mul(s, m)?;
    case(g, sm, vec![x])
}

fn axis_reductions(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let x = leaf(&mut g, rng, &[3, 4], -2.0, 2.0);
    let mut parts = Vec::new();
    for axis in 0..2 {
        let s = g.sum_axis(x, axis)?;
        parts.push(project(&mut g, rng, s)?);
        let m = g.mean_axis(x, axis)?;
        parts.push(project(&mut g, rng, m)?);
        let v = g.var_axis(x, axis)?;
        parts.push(project(&mut g, rng, v)?);
    }
    let mut l = parts[0];
    for &p in &parts[1..] {
        l = g.add(l, p)?;
    }
    case(g, l, vec![x])
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let a = leaf(&mut g, rng, &[3, 4], -1.0, 1.0);
    let b = leaf(&mut g, rng, &[4, 2], -1.0, 1.0);
    let y = g.matmul(a, b)?;
    let l = project(&mut g, rng, y)?;
    case(g, l, vec![a, b])
}

fn conv2d(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let x = leaf(&mut g, rng, &[2, 2, 5, 5], -1.0, 1.0);
    let w = leaf(&mut g, rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = leaf(&mut g, rng, &[3], -1.0, 1.0);
    let stride = rng.gen_range(1..=2);
    let y = g.conv2d(x, w, b, stride, 1)?;
    let l = project(&mut g, rng, y)?;
    case(g, l, vec![x, w, b])
}

fn maxpool2d(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let x = leaf(&mut g, rng, &[2, 2, 4, 4], -1.0, 1.0);
    let y = g.maxpool2d(x, 2)?;
    let l = project(&mut g, rng, y)?;
    case(g, l, vec![x])
}

fn expand(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let r = leaf(&mut g, rng, &[1, 4], -1.0, 1.0);
    let c = leaf(&mut g, rng, &[3, 1], -1.0, 1.0);
    let er = g.expand(r, 0, 3)?;
    let ec = g.expand(c, 1, 4)?;
    let y = g.mul(er, ec)?;
    let l = project(&mut g, rng, y)?;
    case(g, l, vec![r, c])
}

fn concat(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let a = leaf(&mut g, rng, &[3, 2], -1.0, 1.0);
    let b = leaf(&mut g, rng, &[3, 3], -1.0, 1.0);
    let c = leaf(&mut g, rng, &[2, 5], -1.0, 1.0);
    let ab = g.concat(&[a, b], 1)?;
    let y = g.concat(&[ab, c], 0)?;
    let sq = g.square(y)?;
    let l = project(&mut g, rng, sq)?;
    case(g, l, vec![a, b, c])
}

fn affine(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let x = leaf(&mut g, rng, &[3, 4], -1.0, 1.0);
    let gamma = leaf(&mut g, rng, &[4], -1.0, 1.0);
    let beta = leaf(&mut g, rng, &[4], -1.0, 1.0);
    let bias = leaf(&mut g, rng, &[4], -1.0, 1.0);
    let y = g.affine(x, gamma, beta)?;
    let y = g.add_bias(y, bias)?;
    let sq = g.square(y)?;
    let l = project(&mut g, rng, sq)?;
    case(g, l, vec![x, gamma, beta, bias])
}

fn reshape(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let x = leaf(&mut g, rng, &[2, 6], -1.0, 1.0);
    let y = g.reshape(x, vec![3, 4])?;
    let sq = g.square(y)?;
    let l = project(&mut g, rng, sq)?;
    case(g, l, vec![x])
}

/// Leaves bound through [`Graph::param`] by name.
fn param_leaves<'a>(g: &Graph, names: impl IntoIterator<Item = &'a String>) -> Vec<NodeId> {
    names.into_iter().filter_map(|n| g.param_node(n)).collect()
}

fn linear(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let layer = Linear::new("lin", 4, 3, rng.gen());
    let x = leaf(&mut g, rng, &[2, 4], -1.0, 1.0);
    let y = layer.forward(&mut g, x)?;
    let l = project(&mut g, rng, y)?;
    let mut leaves = vec![x];
    leaves.extend(param_leaves(&g, layer.params().iter().map(|p| &p.name)));
    case(g, l, leaves)
}

/// Perturbs γ and β away from their (1, 0) initialization so their paths
/// are exercised at a generic point.
fn randomize(layer: &mut NormLayer, rng: &mut ChaCha8Rng) {
    for p in layer.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let mut ln = NormLayer::layer("ln", 5, 1e-5)?;
    randomize(&mut ln, rng);
    let x = leaf(&mut g, rng, &[3, 5], -2.0, 2.0);
    let y = ln.layer_norm_forward(&mut g, x)?.output;
    let l = project(&mut g, rng, y)?;
    let mut leaves = vec![x];
    leaves.extend(param_leaves(&g, ln.params().iter().map(|p| &p.name)));
    case(g, l, leaves)
}

fn batch_norm(rng: &mut ChaCha8Rng, training: bool) -> Result<Case> {
    let mut g = Graph::new();
    let mut bn = NormLayer::batch("bn", 3, 1e-5, 0.1)?;
    randomize(&mut bn, rng);
    for (m, v) in bn.running_mean.iter_mut().zip(bn.running_var.iter_mut()) {
        *m = rng.gen_range(-1.0..1.0);
        *v = rng.gen_range(0.5..2.0);
    }
    let x = leaf(&mut g, rng, &[4, 3], -2.0, 2.0);
    let y = bn.batch_norm_graph(&mut g, x, training)?.output;
    let l = project(&mut g, rng, y)?;
    let mut leaves = vec![x];
    leaves.extend(param_leaves(&g, bn.params().iter().map(|p| &p.name)));
    case(g, l, leaves)
}

fn batch_norm_training(rng: &mut ChaCha8Rng) -> Result<Case> {
    batch_norm(rng, true)
}

fn batch_norm_inference(rng: &mut ChaCha8Rng) -> Result<Case> {
    batch_norm(rng, false)
}

fn tiny_backbone() -> BackboneSpec {
    BackboneSpec {
        in_channels: 3,
        input_size: 4,
        channels: vec![2],
        kernel: 3,
        feature_dim: 3,
    }
}

fn backbone(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let bb = Backbone::new("bb", &tiny_backbone(), rng.gen())?;
    let x = leaf(&mut g, rng, &[2, 3, 4, 4], 0.0, 1.0);
    let y = bb.forward(&mut g, x)?;
    let l = project(&mut g, rng, y)?;
    let mut leaves = vec![x];
    leaves.extend(param_leaves(&g, bb.params().iter().map(|p| &p.name)));
    case(g, l, leaves)
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let logits = leaf(&mut g, rng, &[4, 5], -3.0, 3.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    let l = classification_loss(&mut g, logits, &labels)?;
    case(g, l, vec![logits])
}

fn l1(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let pred = leaf(&mut g, rng, &[4, 1], 0.0, 500.0);
    let z: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..500.0)).collect();
    let l = regression_loss(&mut g, pred, &z)?;
    case(g, l, vec![pred])
}

fn sharing_penalty(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let spec = tiny_backbone();
    let seed = rng.gen();
    let a = Backbone::new("bb_c", &spec, seed)?;
    let b = Backbone::new("bb_r", &spec, seed)?;
    let fraction = [0.5, 1.0][rng.gen_range(0..2)];
    let l = soft_sharing_penalty(&mut g, &a, &b, fraction)?;
    let names: Vec<&String> = a.params().into_iter().chain(b.params()).map(|p| &p.name).collect();
    let leaves = param_leaves(&g, names);
    case(g, l, leaves)
}

fn cdfa_head(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let mut spec = ModelSpec::new(ExperimentMode::SpsCdfaLnBn, 3, tiny_backbone(), rng.gen());
    spec.portion_scale = 1.0;
    let mut head = FusionHead::new(&spec)?;
    for n in [&mut head.ln_c, &mut head.ln_r, &mut head.bn].into_iter().flatten() {
        randomize(n, rng);
    }
    let xp = leaf(&mut g, rng, &[4, 3], -1.0, 2.0);
    let xc = leaf(&mut g, rng, &[4, 3], -3.0, 3.0);
    let out = head.forward(&mut g, xp, xc, true)?.output;
    let sq = g.square(out)?;
    let l = project(&mut g, rng, sq)?;
    let mut leaves = vec![xp, xc];
    leaves.extend(param_leaves(&g, head.params().iter().map(|p| &p.name)));
    case(g, l, leaves)
}

/// The whole joint objective of the richest mode on a tiny model. A fusion
/// feature that is nearly constant over the batch gives batch norm enough
/// curvature to swamp a finite-difference probe, so the point is drawn
/// away from that regime.
fn joint_objective(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let backbone = BackboneSpec {
        channels: vec![3],
        feature_dim: 6,
        ..tiny_backbone()
    };
    let mut spec = ModelSpec::new(ExperimentMode::SpsCdfaLnBn, 3, backbone, rng.gen());
    spec.portion_scale = 1.0;
    let mut model = TwinModel::new(spec)?;
    // Positive feature biases keep most relu features active, away from the
    // all-zero columns that make batch statistics degenerate.
    for p in model.params_mut().into_iter().filter(|p| p.name.ends_with("fc.bias")) {
        for v in p.value.data_mut() {
            *v = rng.gen_range(0.2..0.6);
        }
    }
    let m = 6;
    let x = leaf(&mut g, rng, &[m, 3, 4, 4], 0.0, 1.0);
    let out = model.forward_graph(&mut g, x, true)?;
    let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..3)).collect();
    let z: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..2.0)).collect();
    let lc = classification_loss(&mut g, out.logits.expect("classifier"), &labels)?;
    let lr = regression_loss(&mut g, out.portion.expect("portion head"), &z)?;
    let (bc, br) = (model.backbone_c.as_ref().expect("bc"), model.backbone_r.as_ref().expect("br"));
    let lps = soft_sharing_penalty(&mut g, bc, br, 1.0)?;
    let s = g.add(lc, lr)?;
    let l = g.add(s, lps)?;
    let mut leaves = vec![x];
    leaves.extend(param_leaves(&g, model.params().iter().map(|p| &p.name)));
    case(g, l, leaves)
}

/// Every checked component, primitives first.
pub fn components() -> Vec<Component> {
    let list: [(&'static str, Builder); 31] = [
        ("add", add),
        ("sub", sub),
        ("mul", mul),
        ("div", div),
        ("add_scalar+mul_scalar", scalar_ops),
        ("matmul", matmul),
        ("conv2d", conv2d),
        ("maxpool2d", maxpool2d),
        ("relu", relu),
        ("exp", exp),
        ("log", log),
        ("abs", abs),
        ("square", square),
        ("sqrt", sqrt),
        ("sum+mean", reductions),
        ("sum_axis+mean_axis+var_axis", axis_reductions),
        ("expand", expand),
        ("concat", concat),
        ("affine+add_bias", affine),
        ("log_softmax", log_softmax),
        ("reshape", reshape),
        ("linear", linear),
        ("layer_norm", layer_norm),
        ("batch_norm_training", batch_norm_training),
        ("batch_norm_inference", batch_norm_inference),
        ("backbone", backbone),
        ("cross_entropy_loss", cross_entropy),
        ("l1_loss", l1),
        ("sharing_penalty", sharing_penalty),
        ("cdfa_head", cdfa_head),
        ("joint_objective", joint_objective),
    ];
    list.into_iter().map(|(name, build)| Component { name, build }).collect()
}

/// Checks one component at `opts.points` random points.
pub fn check_component(c: &Component, opts: &SuiteOptions) -> Result<ComponentReport> {
    let mut rng = component_rng(opts.seed, c.name);
    let mut report = ComponentReport {
        name: c.name,
        max_rel_error: 0.0,
        checked: 0,
        flagged: 0,
        points: opts.points,
    };
    let corrupt = opts.corrupt.as_deref() == Some(c.name);
    for _ in 0..opts.points {
        let Case {
            mut graph,
            loss,
            leaves,
        } = (c.build)(&mut rng)?;
        let grads = graph.backward(loss)?;
        for (k, &leaf) in leaves.iter().enumerate() {
            let n = graph.value(leaf).len();
            let mut analytic = grads.get(leaf).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
            if corrupt && k == 0 {
                analytic[0] += 1e-2 * analytic[0].abs().max(1.0);
            }
            let all: Vec<usize> = (0..n).collect();
            let r = grad_check_against(&mut graph, loss, leaf, opts.probe, &all, &analytic)?;
            report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
            report.checked += r.checked;
            report.flagged += r.flagged.len();
        }
    }
    Ok(report)
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<ComponentReport>> {
    components().iter().map(|c| check_component(c, opts)).collect()
}
