//! Finite-difference gradient suites for the engine, the attention block
//! and the full network.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{hba_forward, HbaConfig, HbaParams};
use crate::model::{Mode, Network, NetworkConfig, Variant};
use crate::params::ParamStore;
use crate::tensor::{
    grad_check, BnMode, GradCheckOptions, GradGraph, PoolMode, ResampleMode, Result, Sampling, Scalar, Shape, Tape,
    Tensor, TensorError, Var,
};
use crate::train::dice_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Hba,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Hba, Scope::Model];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Hba => "hba",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ops" => Ok(Scope::Ops),
            "hba" => Ok(Scope::Hba),
            "model" => Ok(Scope::Model),
            _ => Err(format!("unknown gradcheck scope `{s}` (expected ops, hba or model)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-5,
        }
    }

    /// Reference differences are always taken in f64, so both precisions
    /// use the same small step.
    fn options(self, sampling: Sampling) -> GradCheckOptions {
        GradCheckOptions { eps: 1e-6, sampling, ..GradCheckOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub target: String,
    pub precision: Precision,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {} n={:<5} max_rel={:.3e} tol={:.0e} {}",
            self.target,
            self.precision,
            self.checked,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn random(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values bounded away from zero, so ReLU kinks stay out of the stencil.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect(),
    )
    .expect("sized")
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Conv { stride: usize, pad: usize },
    Pool(PoolMode),
    GlobalPool(PoolMode),
    MatMul { ta: bool, tb: bool },
    Dense,
    Add,
    Sub,
    Mul,
    Div,
    Affine,
    Relu,
    Sigmoid,
    Softmax(usize),
    SumTo,
    MeanAll,
    Reshape,
    Permute,
    Concat,
    Resample(ResampleMode, usize),
    BatchNorm,
    BatchNormFixed,
    RowBilinear,
}

struct OpCase {
    name: &'static str,
    op: Op,
    inputs: Vec<Tensor<f64>>,
    /// Non-differentiated operand (relative table, fixed statistics).
    extra: Option<Tensor<f64>>,
    /// Random projection of the output, so every Jacobian direction is probed.
    weights: Tensor<f64>,
}

impl OpCase {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, l: &[Var]) -> Result<Var> {
        Ok(match self.op {
            Op::Conv { stride, pad } => tape.conv2d(l[0], l[1], stride, pad)?,
            Op::Pool(mode) => tape.pool2d(l[0], mode, (2, 2), 2)?,
            Op::GlobalPool(mode) => tape.global_pool(l[0], mode)?,
            Op::MatMul { ta, tb } => tape.matmul(l[0], l[1], ta, tb)?,
            Op::Dense => tape.dense(l[0], l[1], Some(l[2]))?,
            Op::Add => tape.add(l[0], l[1])?,
            Op::Sub => tape.sub(l[0], l[1])?,
            Op::Mul => tape.mul(l[0], l[1])?,
            Op::Div => tape.div(l[0], l[1])?,
            Op::Affine => tape.affine(l[0], T::from_f64_lossy(-1.7), T::from_f64_lossy(0.3))?,
            Op::Relu => tape.relu(l[0])?,
            Op::Sigmoid => tape.sigmoid(l[0])?,
            Op::Softmax(axis) => tape.softmax(l[0], axis)?,
            Op::SumTo => tape.sum_to(l[0], Shape::new(1, 3, 1, 1))?,
            Op::MeanAll => tape.mean_all(l[0])?,
            Op::Reshape => tape.reshape(l[0], Shape::new(1, 1, 3, 8))?,
            Op::Permute => tape.permute(l[0], [0, 2, 3, 1])?,
            Op::Concat => tape.concat(&[l[0], l[1]], 1)?,
            Op::Resample(mode, size) => tape.resample(l[0], (size, size), mode)?,
            Op::BatchNorm => tape.batch_norm(l[0], l[1], l[2], &BnMode::Batch, T::from_f64_lossy(1e-5))?,
            Op::BatchNormFixed => {
                let stats = self.extra.as_ref().expect("fixed statistics").cast::<T>();
                let c = stats.numel() / 2;
                let mode =
                    BnMode::Fixed { mean: stats.data()[..c].to_vec(), var: stats.data()[c..].to_vec() };
                tape.batch_norm(l[0], l[1], l[2], &mode, T::from_f64_lossy(1e-5))?
            }
            Op::RowBilinear => {
                let table = tape.constant(self.extra.as_ref().expect("table").cast());
                tape.row_bilinear(l[0], table)?
            }
        })
    }
}

impl GradGraph for OpCase {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var> {
        let y = self.apply(tape, leaves)?;
        let w = tape.constant(self.weights.cast());
        let projected = tape.mul(y, w)?;
        tape.sum_all(projected)
    }
}

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let s = Shape::new;
    let mut cases = Vec::new();
    let mut push = |name: &'static str, op: Op, inputs: Vec<Tensor<f64>>, extra: Option<Tensor<f64>>, rng: &mut ChaCha8Rng| {
        let mut case = OpCase { name, op, inputs, extra, weights: Tensor::zeros(Shape::scalar()) };
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = case.apply(&mut tape, &vars).expect("valid op case");
        case.weights = random(tape.shape(out), rng, -1.0, 1.0);
        cases.push(case);
    };
    macro_rules! r {
        ($shape:expr) => {
            random($shape, &mut rng, -1.0, 1.0)
        };
    }
    let i = vec![r!(s(2, 2, 5, 5)), r!(s(3, 2, 3, 3))];
    push("conv2d 3x3 pad1", Op::Conv { stride: 1, pad: 1 }, i, None, &mut rng);
    let i = vec![r!(s(1, 2, 6, 6)), r!(s(2, 2, 2, 2))];
    push("conv2d 2x2 stride2", Op::Conv { stride: 2, pad: 0 }, i, None, &mut rng);
    let i = vec![r!(s(1, 3, 4, 4)), r!(s(2, 3, 1, 1))];
    push("conv2d 1x1", Op::Conv { stride: 1, pad: 0 }, i, None, &mut rng);
    let i = vec![r!(s(2, 2, 4, 4))];
    push("max_pool 2x2", Op::Pool(PoolMode::Max), i, None, &mut rng);
    let i = vec![r!(s(2, 2, 4, 6))];
    push("avg_pool 2x2", Op::Pool(PoolMode::Avg), i, None, &mut rng);
    let i = vec![r!(s(2, 3, 3, 3))];
    push("global_max_pool", Op::GlobalPool(PoolMode::Max), i, None, &mut rng);
    let i = vec![r!(s(2, 3, 3, 3))];
    push("global_avg_pool", Op::GlobalPool(PoolMode::Avg), i, None, &mut rng);
    let i = vec![r!(s(2, 2, 3, 4)), r!(s(2, 2, 4, 5))];
    push("matmul", Op::MatMul { ta: false, tb: false }, i, None, &mut rng);
    let i = vec![r!(s(1, 2, 4, 3)), r!(s(1, 2, 5, 4))];
    push("matmul ta tb", Op::MatMul { ta: true, tb: true }, i, None, &mut rng);
    let i = vec![r!(s(1, 1, 3, 4)), r!(s(1, 1, 3, 5))];
    push("matmul ta", Op::MatMul { ta: true, tb: false }, i, None, &mut rng);
    let i = vec![r!(s(1, 1, 2, 3)), r!(s(1, 1, 3, 4)), r!(s(1, 1, 1, 4))];
    push("dense", Op::Dense, i, None, &mut rng);
    let i = vec![r!(s(2, 3, 2, 2)), r!(s(1, 3, 1, 1))];
    push("add broadcast", Op::Add, i, None, &mut rng);
    let i = vec![r!(s(2, 3, 2, 2)), r!(s(2, 1, 2, 2))];
    push("sub broadcast", Op::Sub, i, None, &mut rng);
    let i = vec![r!(s(2, 3, 2, 2)), r!(s(1, 3, 1, 2))];
    push("mul broadcast", Op::Mul, i, None, &mut rng);
    let i = vec![r!(s(2, 3, 2, 2)), random(s(1, 3, 1, 1), &mut rng, 0.5, 2.0)];
    push("div broadcast", Op::Div, i, None, &mut rng);
    let i = vec![r!(s(1, 2, 3, 3))];
    push("affine", Op::Affine, i, None, &mut rng);
    let i = vec![away_from_zero(s(2, 2, 3, 3), &mut rng)];
    push("relu", Op::Relu, i, None, &mut rng);
    let i = vec![random(s(1, 2, 3, 3), &mut rng, -4.0, 4.0)];
    push("sigmoid", Op::Sigmoid, i, None, &mut rng);
    let i = vec![random(s(1, 2, 3, 5), &mut rng, -2.0, 2.0)];
    push("softmax last axis", Op::Softmax(3), i, None, &mut rng);
    let i = vec![random(s(2, 4, 2, 2), &mut rng, -2.0, 2.0)];
    push("softmax channel axis", Op::Softmax(1), i, None, &mut rng);
    let i = vec![r!(s(2, 3, 2, 3))];
    push("sum_to", Op::SumTo, i, None, &mut rng);
    let i = vec![r!(s(2, 3, 2, 3))];
    push("mean_all", Op::MeanAll, i, None, &mut rng);
    let i = vec![r!(s(2, 3, 2, 2))];
    push("reshape", Op::Reshape, i, None, &mut rng);
    let i = vec![r!(s(2, 3, 2, 4))];
    push("permute", Op::Permute, i, None, &mut rng);
    let i = vec![r!(s(2, 2, 3, 3)), r!(s(2, 3, 3, 3))];
    push("concat", Op::Concat, i, None, &mut rng);
    let i = vec![r!(s(1, 2, 3, 3))];
    push("resample nearest up", Op::Resample(ResampleMode::Nearest, 6), i, None, &mut rng);
    let i = vec![r!(s(1, 2, 3, 3))];
    push("resample bilinear up", Op::Resample(ResampleMode::Bilinear, 7), i, None, &mut rng);
    let i = vec![r!(s(1, 2, 8, 8))];
    push("resample bilinear down", Op::Resample(ResampleMode::Bilinear, 3), i, None, &mut rng);
    let i = vec![r!(s(3, 2, 3, 3)), random(s(1, 2, 1, 1), &mut rng, 0.5, 1.5), r!(s(1, 2, 1, 1))];
    push("batch_norm batch", Op::BatchNorm, i, None, &mut rng);
    let i = vec![r!(s(2, 2, 3, 3)), random(s(1, 2, 1, 1), &mut rng, 0.5, 1.5), r!(s(1, 2, 1, 1))];
    let stats = Tensor::from_vec(s(1, 1, 1, 4), vec![0.1, -0.2, 0.7, 1.3]).expect("sized");
    push("batch_norm fixed", Op::BatchNormFixed, i, Some(stats), &mut rng);
    let i = vec![r!(s(2, 2, 4, 3))];
    push("row_bilinear", Op::RowBilinear, i, Some(r!(s(1, 4, 4, 3))), &mut rng);
    cases
}

fn run<T: Scalar, G: GradGraph>(
    target: String,
    graph: &G,
    leaves: &[Tensor<f64>],
    precision: Precision,
    sampling: Sampling,
) -> Result<CheckResult> {
    let leaves: Vec<Tensor<T>> = leaves.iter().map(|t| t.cast::<T>().with_requires_grad(true)).collect();
    let report = grad_check(graph, &leaves, &precision.options(sampling))?;
    Ok(CheckResult {
        target,
        precision,
        checked: report.leaves.iter().map(|l| l.checked).sum(),
        max_rel_error: report.max_rel_error,
        tolerance: precision.tolerance(),
    })
}

fn run_in<G: GradGraph>(
    target: String,
    graph: &G,
    leaves: &[Tensor<f64>],
    precision: Precision,
    sampling: Sampling,
) -> Result<CheckResult> {
    match precision {
        Precision::F32 => run::<f32, G>(target, graph, leaves, precision, sampling),
        Precision::F64 => run::<f64, G>(target, graph, leaves, precision, sampling),
    }
}

/// Every differentiable engine operation.
pub fn check_ops(precision: Precision) -> Result<Vec<CheckResult>> {
    op_cases()
        .iter()
        .map(|case| run_in(format!("ops/{}", case.name), case, &case.inputs, precision, Sampling::All))
        .collect()
}

struct HbaGraph {
    cfg: HbaConfig,
    params: HbaParams<f64>,
    store: ParamStore<f64>,
    weights: Tensor<f64>,
}

impl GradGraph for HbaGraph {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var> {
        let store = self.store.cast::<T>();
        let params = self.params.cast::<T>();
        let bound = store.bind_vars(leaves[1..].to_vec());
        let out = hba_forward(tape, leaves[0], &self.cfg, &params, &bound)
            .map_err(|e| TensorError::Invalid { op: "hba", detail: e.to_string() })?;
        let w = tape.constant(self.weights.cast());
        let projected = tape.mul(out.output, w)?;
        tape.sum_all(projected)
    }
}

/// The attention block, one result per input or parameter group.
pub fn check_hba(precision: Precision) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4ba);
    let mut out = Vec::new();
    for (label, cfg) in [("hba", HbaConfig::new(8, 2, 3)), ("hba content-only", HbaConfig::new(4, 2, 2).content_only())] {
        let mut store = ParamStore::new();
        let params = HbaParams::init(&mut store, "hba", &cfg, &mut rng)
            .map_err(|e| TensorError::Invalid { op: "hba", detail: e.to_string() })?;
        for (_, p) in store.iter_mut() {
            for v in p.tensor.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let x = random(Shape::new(2, cfg.channels, cfg.grid, cfg.grid), &mut rng, -1.0, 1.0);
        let weights = random(x.shape(), &mut rng, -1.0, 1.0);
        let names: Vec<String> = std::iter::once("input".to_string())
            .chain(store.iter().map(|(_, p)| p.name.trim_start_matches("hba.").to_string()))
            .collect();
        let mut leaves = vec![x];
        leaves.extend(store.iter().map(|(_, p)| p.tensor.clone()));
        let graph = HbaGraph { cfg, params, store, weights };
        let report = match precision {
            Precision::F32 => {
                let l: Vec<Tensor<f32>> = leaves.iter().map(|t| t.cast::<f32>().with_requires_grad(true)).collect();
                grad_check(&graph, &l, &precision.options(Sampling::All))?
            }
            Precision::F64 => {
                let l: Vec<Tensor<f64>> = leaves.into_iter().map(|t| t.with_requires_grad(true)).collect();
                grad_check(&graph, &l, &precision.options(Sampling::All))?
            }
        };
        for leaf in &report.leaves {
            out.push(CheckResult {
                target: format!("{label}/{}", names[leaf.leaf]),
                precision,
                checked: leaf.checked,
                max_rel_error: leaf.max_rel_error,
                tolerance: precision.tolerance(),
            });
        }
    }
    Ok(out)
}

/// Network configuration used by the end-to-end check: all attention
/// levels, 64² input, narrow widths.
pub fn model_check_config() -> NetworkConfig {
    NetworkConfig {
        levels: 3,
        base_channels: 4,
        attention_grid: 8,
        attention_channels: 8,
        attention_heads: 2,
        input_size: 64,
        ..NetworkConfig::toy(Variant::HbaAll)
    }
}

struct ModelGraph {
    net: Network<f64>,
    target: Tensor<f64>,
}

impl GradGraph for ModelGraph {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var> {
        let net = self.net.cast::<T>();
        let bound = net.store().bind_vars(leaves[1..].to_vec());
        let out = net
            .forward(tape, &bound, leaves[0], Mode::Train)
            .map_err(|e| TensorError::Invalid { op: "model", detail: e.to_string() })?;
        let target = tape.constant(self.target.cast());
        dice_loss(tape, out.logits, target, T::one())
    }
}

/// Dice loss of the whole network against a random subset of `fraction` of
/// every input and parameter tensor.
pub fn check_model(precision: Precision, fraction: f64) -> Result<Vec<CheckResult>> {
    let cfg = model_check_config();
    let net: Network<f32> =
        Network::build(&cfg, 11).map_err(|e| TensorError::Invalid { op: "model", detail: e.to_string() })?;
    let net = net.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let size = cfg.input_size;
    let image = random(Shape::new(1, 3, size, size), &mut rng, 0.0, 1.0);
    let target = Tensor::from_fn(Shape::new(1, 2, size, size), |[_, c, y, x]| {
        let (cx, cy) = if c == 0 { (40.0, 30.0) } else { (18.0, 22.0) };
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        if d2 <= 36.0 { 1.0 } else { 0.0 }
    });
    let mut leaves = vec![image];
    let learnable: Vec<bool> =
        std::iter::once(true).chain(net.store().iter().map(|(_, p)| p.kind == crate::params::ParamKind::Learnable)).collect();
    leaves.extend(net.store().iter().map(|(_, p)| p.tensor.clone()));
    let graph = ModelGraph { net, target };
    let sampling = Sampling::Fraction { fraction, seed: 0xf0 };
    let typed_check = |precision| -> Result<crate::tensor::GradCheckReport> {
        match precision {
            Precision::F32 => {
                let l: Vec<Tensor<f32>> = leaves
                    .iter()
                    .zip(&learnable)
                    .map(|(t, &g)| t.cast::<f32>().with_requires_grad(g))
                    .collect();
                grad_check(&graph, &l, &precision.options(sampling.clone()))
            }
            Precision::F64 => {
                let l: Vec<Tensor<f64>> =
                    leaves.iter().zip(&learnable).map(|(t, &g)| t.clone().with_requires_grad(g)).collect();
                grad_check(&graph, &l, &precision.options(sampling.clone()))
            }
        }
    };
    let report = typed_check(precision)?;
    Ok(vec![CheckResult {
        target: "model/dice".into(),
        precision,
        checked: report.leaves.iter().map(|l| l.checked).sum(),
        max_rel_error: report.max_rel_error,
        tolerance: precision.tolerance(),
    }])
}

/// Fraction of network entries probed by the default model check.
pub const MODEL_FRACTION: f64 = 0.01;

pub fn check_scope(scope: Scope, precision: Precision) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Ops => check_ops(precision),
        Scope::Hba => check_hba(precision),
        Scope::Model => check_model(precision, MODEL_FRACTION),
    }
}
