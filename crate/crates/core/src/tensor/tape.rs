use super::kernels::{self, ConvGeom};
use super::{invalid, shape_err, Result, Scalar, Shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

/// Statistics used by batch normalization.
#[derive(Clone, Debug)]
pub enum BnMode<T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed per-channel statistics (inference).
    Fixed { mean: Vec<T>, var: Vec<T> },
}

/// Per-channel mean and unbiased variance observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, window: (usize, usize), stride: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Binary { a: Var, b: Var, kind: Binary },
    Affine { x: Var, scale: T },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, axis: usize },
    SumTo { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: [usize; 4] },
    Concat { xs: Vec<Var>, axis: usize },
    Resample { x: Var, mode: ResampleMode },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool, stats: Option<BatchStats<T>> },
    RowBilinear { q: Var, table: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::MatMul { .. } => "matmul",
            Op::Binary { .. } => "binary",
            Op::Affine { .. } => "affine",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::SumTo { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Resample { .. } => "resample",
            Op::BatchNorm { .. } => "batch_norm",
            Op::RowBilinear { .. } => "row_bilinear",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order and never mutated afterwards, so
/// backward visits them in exact reverse order. A tape supports one backward
/// pass; record a fresh tape for the next step.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are accumulated for it when the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Statistics of a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Shape, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs_grad(v));
        let value = Tensor::from_vec(shape, data)?.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 2-d cross-correlation of `x` [N,Cin,H,W] with `kernel` [Cout,Cin,kh,kw].
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, cin, h, w] = self.shape(x).0;
        let [cout, kcin, kh, kw] = self.shape(kernel).0;
        if kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {kcin} input channels, input {} has {cin}", self.shape(x)),
            ));
        }
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(invalid("conv2d", "kernel dims and stride must be ≥ 1"));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(shape_err("conv2d", format!("{kh}×{kw} kernel exceeds padded input {ph}×{pw}")));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(shape_err(
                "conv2d",
                format!("padded input {ph}×{pw} with {kh}×{kw} kernel is not tiled by stride {stride}"),
            ));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), n, self.value(kernel).data(), &geom);
        self.push(Shape::new(n, cout, geom.ho, geom.wo), out, Op::Conv2d { x, k: kernel, geom }, &[x, kernel])
    }

    /// Floor-mode pooling with a `window.0×window.1` window.
    pub fn pool2d(&mut self, x: Var, mode: PoolMode, window: (usize, usize), stride: usize) -> Result<Var> {
        let shape = self.shape(x);
        let (Some(ho), Some(wo)) = (
            kernels::pool_extent(shape.h(), window.0, stride),
            kernels::pool_extent(shape.w(), window.1, stride),
        ) else {
            return Err(shape_err(
                "pool2d",
                format!("window {}×{} stride {stride} does not fit input {shape}", window.0, window.1),
            ));
        };
        let out_shape = Shape::new(shape.n(), shape.c(), ho, wo);
        let data = self.value(x).data();
        match mode {
            PoolMode::Max => {
                let (out, argmax) = kernels::max_pool(data, shape, window, stride);
                self.push(out_shape, out, Op::MaxPool { x, argmax }, &[x])
            }
            PoolMode::Avg => {
                let out = kernels::avg_pool(data, shape, window, stride);
                self.push(out_shape, out, Op::AvgPool { x, window, stride }, &[x])
            }
        }
    }

    /// Pools every H×W plane to a single value.
    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let s = self.shape(x);
        self.pool2d(x, mode, (s.h(), s.w()), 1)
    }

    /// Batched matrix product over the last two axes. Leading axes broadcast
    /// when one side has extent 1. `ta`/`tb` read the operand transposed.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, ka) = if ta { (sa.w(), sa.h()) } else { (sa.h(), sa.w()) };
        let (kb, p) = if tb { (sb.w(), sb.h()) } else { (sb.h(), sb.w()) };
        if ka != kb {
            return Err(shape_err("matmul", format!("inner dims differ: {sa} vs {sb}")));
        }
        let batch = |x: usize, y: usize| -> Option<usize> {
            match (x, y) {
                (x, y) if x == y => Some(x),
                (1, y) => Some(y),
                (x, 1) => Some(x),
                _ => None,
            }
        };
        let (Some(bn), Some(bc)) = (batch(sa.n(), sb.n()), batch(sa.c(), sb.c())) else {
            return Err(shape_err("matmul", format!("batch dims do not broadcast: {sa} vs {sb}")));
        };
        let out_shape = Shape::new(bn, bc, m, p);
        let mut out = vec![T::zero(); out_shape.numel()];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let a_st = if ta { (1, m as isize) } else { (ka as isize, 1) };
        let b_st = if tb { (1, ka as isize) } else { (p as isize, 1) };
        for i in 0..bn {
            for j in 0..bc {
                let ao = mat_offset(sa, i, j);
                let bo = mat_offset(sb, i, j);
                let oo = (i * bc + j) * m * p;
                T::gemm(m, ka, p, &av[ao..], a_st, &bv[bo..], b_st, &mut out[oo..oo + m * p], false);
            }
        }
        self.push(out_shape, out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// Affine map over the last axis: `x·weight (+ bias)` with weight [1,1,Din,Dout].
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(weight);
        if sw.n() != 1 || sw.c() != 1 || sw.h() != sx.w() {
            return Err(shape_err("dense", format!("weight {sw} does not map last axis of input {sx}")));
        }
        let y = self.matmul(x, weight, false, false)?;
        match bias {
            Some(b) => {
                let sb = self.shape(b);
                if sb != Shape::new(1, 1, 1, sw.w()) {
                    return Err(shape_err("dense", format!("bias {sb} must be 1×1×1×{}", sw.w())));
                }
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = kernels::broadcast_shape(sa, sb)
            .ok_or_else(|| shape_err("binary", format!("{sa} and {sb} do not broadcast")))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = match kind {
            Binary::Add => kernels::zip_broadcast(av, sa, bv, sb, out, |x, y| x + y),
            Binary::Sub => kernels::zip_broadcast(av, sa, bv, sb, out, |x, y| x - y),
            Binary::Mul => kernels::zip_broadcast(av, sa, bv, sb, out, |x, y| x * y),
            Binary::Div => kernels::zip_broadcast(av, sa, bv, sb, out, |x, y| x / y),
        };
        self.push(out, data, Op::Binary { a, b, kind }, &[a, b])
    }

    /// Elementwise sum with broadcasting over axes of extent 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * scale + shift).collect();
        self.push(self.shape(x), data, Op::Affine { x, scale }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(x), data, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x), data, Op::Sigmoid { x }, &[x])
    }

    /// Softmax along `axis` (0..4).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis > 3 {
            return Err(invalid("softmax", format!("axis {axis} out of range")));
        }
        let shape = self.shape(x);
        let len = shape.0[axis];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (off, stride) in kernels::lanes(shape, axis) {
            let max = (0..len).map(|i| src[off + i * stride]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for i in 0..len {
                let e = (src[off + i * stride] - max).exp();
                out[off + i * stride] = e;
                total = total + e;
            }
            for i in 0..len {
                out[off + i * stride] = out[off + i * stride] / total;
            }
        }
        self.push(shape, out, Op::Softmax { x, axis }, &[x])
    }

    /// Sums `x` down to `target`; every axis of `target` must match `x` or be 1.
    pub fn sum_to(&mut self, x: Var, target: Shape) -> Result<Var> {
        let s = self.shape(x);
        if kernels::broadcast_shape(s, target) != Some(s) {
            return Err(shape_err("sum", format!("cannot reduce {s} to {target}")));
        }
        let data = kernels::sum_to(self.value(x).data(), s, target);
        self.push(target, data, Op::SumTo { x }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.sum_to(x, Shape::scalar())
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.shape(x).numel()).unwrap();
        let s = self.sum_all(x)?;
        self.affine(s, T::one() / n, T::zero())
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let s = self.shape(x);
        if s.numel() != shape.numel() {
            return Err(shape_err("reshape", format!("cannot view {s} as {shape}")));
        }
        let data = self.value(x).data().to_vec();
        self.push(shape, data, Op::Reshape { x }, &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: [usize; 4]) -> Result<Var> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p > 3 || std::mem::replace(&mut seen[p], true) {
                return Err(invalid("permute", format!("{perm:?} is not a permutation of 0..4")));
            }
        }
        let (data, shape) = kernels::permute(self.value(x).data(), self.shape(x), perm);
        self.push(shape, data, Op::Permute { x, perm }, &[x])
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(invalid("concat", "no inputs"));
        };
        if axis > 3 {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        let base = self.shape(first);
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            for d in (0..4).filter(|&d| d != axis) {
                if s.0[d] != base.0[d] {
                    return Err(shape_err("concat", format!("{s} does not match {base} off axis {axis}")));
                }
            }
            total += s.0[axis];
        }
        let mut dims = base.0;
        dims[axis] = total;
        let out_shape = Shape(dims);
        let outer: usize = dims[..axis].iter().product();
        let mut out = Vec::with_capacity(out_shape.numel());
        for o in 0..outer {
            for &v in xs {
                let s = self.shape(v);
                let block: usize = s.0[axis..].iter().product();
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        self.push(out_shape, out, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Resizes the H×W planes. Bilinear uses the half-pixel (align-corners = false) grid.
    pub fn resample(&mut self, x: Var, target: (usize, usize), mode: ResampleMode) -> Result<Var> {
        if target.0 == 0 || target.1 == 0 {
            return Err(invalid("resample", format!("target {}×{} has a zero dimension", target.0, target.1)));
        }
        let s = self.shape(x);
        let src = self.value(x).data();
        let data = match mode {
            ResampleMode::Nearest => kernels::nearest(src, s, target),
            ResampleMode::Bilinear => kernels::bilinear(src, s, target),
        };
        self.push(Shape::new(s.n(), s.c(), target.0, target.1), data, Op::Resample { x, mode }, &[x])
    }

    /// Per-channel normalization of `x` followed by `gamma·x̂ + beta` (both [1,C,1,1]).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: &BnMode<T>, eps: T) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = s.0;
        let param_shape = Shape::new(1, c, 1, 1);
        if self.shape(gamma) != param_shape || self.shape(beta) != param_shape {
            return Err(shape_err("batch_norm", format!("gamma/beta must be {param_shape} for input {s}")));
        }
        let plane = h * w;
        let m = n * plane;
        let src = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Batch => {
                if m < 2 {
                    return Err(shape_err("batch_norm", format!("batch statistics need ≥ 2 values per channel, input {s}")));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc = acc + src[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().copied().sum::<T>();
                    }
                    let mu = acc / T::from_usize(m).unwrap();
                    let mut sq = T::zero();
                    for i in 0..n {
                        for &v in &src[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                            sq = sq + (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / T::from_usize(m).unwrap();
                }
                let unbiased = var.iter().map(|&v| v * T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", format!("fixed statistics have {} channels, input has {c}", mean.len())));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    let xh = (src[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + b[ch];
                }
            }
        }
        let batch = matches!(mode, BnMode::Batch);
        self.push(s, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch, stats }, &[x, gamma, beta])
    }

    /// `out[n,h,i,j] = Σ_d q[n,h,i,d]·table[0,i,j,d]` for q [N,H,T,D] and table [1,T,T,D].
    ///
    /// Each query row is contracted against its own slice of the table.
    pub fn row_bilinear(&mut self, q: Var, table: Var) -> Result<Var> {
        let sq = self.shape(q);
        let st = self.shape(table);
        let [n, heads, t, d] = sq.0;
        if st != Shape::new(1, t, t, d) {
            return Err(shape_err("row_bilinear", format!("table {st} must be 1×{t}×{t}×{d} for query {sq}")));
        }
        let (qv, tv) = (self.value(q).data(), self.value(table).data());
        let mut out = vec![T::zero(); n * heads * t * t];
        for b in 0..n * heads {
            for i in 0..t {
                let qi = &qv[(b * t + i) * d..(b * t + i + 1) * d];
                let ti = &tv[i * t * d..(i + 1) * t * d];
                let oi = &mut out[(b * t + i) * t..(b * t + i + 1) * t];
                T::gemm(t, d, 1, ti, (d as isize, 1), qi, (1, 1), oi, false);
            }
        }
        self.push(Shape::new(n, heads, t, t), out, Op::RowBilinear { q, table }, &[q, table])
    }

    /// Reverse pass from a scalar `output`. Leaves gradients on every node
    /// that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        let shape = self.shape(output);
        if shape.numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut send = |v: Var, delta: Vec<T>| {
            if !self.needs_grad(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geom } => {
                let n = self.shape(*x).n();
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    self.value(*k).data(),
                    geom,
                    g,
                    self.needs_grad(*x),
                    self.needs_grad(*k),
                );
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dk) = dk {
                    send(*k, dk);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.shape(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
                send(*x, dx);
            }
            Op::AvgPool { x, window, stride } => {
                send(*x, kernels::avg_pool_backward(g, self.shape(*x), *window, *stride));
            }
            Op::MatMul { a, b, ta, tb } => self.matmul_backward(*a, *b, *ta, *tb, out.shape(), g, &mut send),
            Op::Binary { a, b, kind } => {
                let (sa, sb, so) = (self.shape(*a), self.shape(*b), out.shape());
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (da, db): (Vec<T>, Vec<T>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                    Binary::Mul => (
                        kernels::zip_broadcast(g, so, bv, sb, so, |x, y| x * y),
                        kernels::zip_broadcast(g, so, av, sa, so, |x, y| x * y),
                    ),
                    Binary::Div => {
                        let da = kernels::zip_broadcast(g, so, bv, sb, so, |x, y| x / y);
                        let gq: Vec<T> = g.iter().zip(out.data()).map(|(&x, &q)| x * q).collect();
                        (da, kernels::zip_broadcast(&gq, so, bv, sb, so, |x, y| -x / y))
                    }
                };
                if self.needs_grad(*a) {
                    send(*a, kernels::sum_to(&da, so, sa));
                }
                if self.needs_grad(*b) {
                    send(*b, kernels::sum_to(&db, so, sb));
                }
            }
            Op::Affine { x, scale } => send(*x, g.iter().map(|&v| v * *scale).collect()),
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                send(*x, g.iter().zip(xv).map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() }).collect());
            }
            Op::Sigmoid { x } => {
                send(*x, g.iter().zip(out.data()).map(|(&gv, &y)| gv * y * (T::one() - y)).collect());
            }
            Op::Softmax { x, axis } => {
                let y = out.data();
                let len = out.shape().0[*axis];
                let mut dx = vec![T::zero(); y.len()];
                for (off, stride) in kernels::lanes(out.shape(), *axis) {
                    let dot = (0..len).map(|i| g[off + i * stride] * y[off + i * stride]).sum::<T>();
                    for i in 0..len {
                        let k = off + i * stride;
                        dx[k] = y[k] * (g[k] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::SumTo { x } => {
                let sx = self.shape(*x);
                send(*x, kernels::zip_broadcast(g, out.shape(), g, out.shape(), sx, |a, _| a));
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let (dx, _) = kernels::permute(g, out.shape(), kernels::inverse_perm(*perm));
                send(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let dims = out.shape().0;
                let outer: usize = dims[..*axis].iter().product();
                let out_block: usize = dims[*axis..].iter().product();
                let mut start = 0;
                for &v in xs {
                    let s = self.shape(v);
                    let block: usize = s.0[*axis..].iter().product();
                    if self.needs_grad(v) {
                        let mut dv = Vec::with_capacity(s.numel());
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * out_block + start..o * out_block + start + block]);
                        }
                        send(v, dv);
                    }
                    start += block;
                }
            }
            Op::Resample { x, mode } => {
                let s = self.shape(*x);
                let target = (out.shape().h(), out.shape().w());
                let dx = match mode {
                    ResampleMode::Nearest => kernels::nearest_backward(g, s, target),
                    ResampleMode::Bilinear => kernels::bilinear_backward(g, s, target),
                };
                send(*x, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch, .. } => {
                let [n, c, h, w] = out.shape().0;
                let plane = h * w;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for k in off..off + plane {
                            dgamma[ch] = dgamma[ch] + g[k] * xhat[k];
                            dbeta[ch] = dbeta[ch] + g[k];
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::from_usize(n * plane).unwrap();
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        for i in 0..n {
                            let off = (i * c + ch) * plane;
                            for k in off..off + plane {
                                dx[k] = if *batch {
                                    // dx = γ·σ⁻¹·(g − mean(g) − x̂·mean(g·x̂))
                                    scale * (g[k] - dbeta[ch] / m - xhat[k] * dgamma[ch] / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::RowBilinear { q, table } => {
                let [n, heads, t, d] = self.shape(*q).0;
                let (qv, tv) = (self.value(*q).data(), self.value(*table).data());
                if self.needs_grad(*q) {
                    let mut dq = vec![T::zero(); qv.len()];
                    for b in 0..n * heads {
                        for i in 0..t {
                            let gi = &g[(b * t + i) * t..(b * t + i + 1) * t];
                            let ti = &tv[i * t * d..(i + 1) * t * d];
                            let dqi = &mut dq[(b * t + i) * d..(b * t + i + 1) * d];
                            T::gemm(d, t, 1, ti, (1, d as isize), gi, (1, 1), dqi, false);
                        }
                    }
                    send(*q, dq);
                }
                if self.needs_grad(*table) {
                    let mut dt = vec![T::zero(); tv.len()];
                    for b in 0..n * heads {
                        for i in 0..t {
                            let gi = &g[(b * t + i) * t..(b * t + i + 1) * t];
                            let qi = &qv[(b * t + i) * d..(b * t + i + 1) * d];
                            let dti = &mut dt[i * t * d..(i + 1) * t * d];
                            T::gemm(t, 1, d, gi, (1, 1), qi, (1, 1), dti, true);
                        }
                    }
                    send(*table, dt);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        out: Shape,
        g: &[T],
        send: &mut impl FnMut(Var, Vec<T>),
    ) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let [bn, bc, m, p] = out.0;
        let k = if ta { sa.h() } else { sa.w() };
        // Logical (untransposed) operand strides.
        let a_log = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
        let b_log = if tb { (1isize, k as isize) } else { (p as isize, 1isize) };
        let g_st = (p as isize, 1isize);
        let g_t = (1isize, p as isize);
        if self.needs_grad(a) {
            let mut da = vec![T::zero(); sa.numel()];
            for i in 0..bn {
                for j in 0..bc {
                    let gi = &g[(i * bc + j) * m * p..];
                    let bo = &bv[mat_offset(sb, i, j)..];
                    let ao = mat_offset(sa, i, j);
                    let dst = &mut da[ao..ao + m * k];
                    if ta {
                        // stored [k, m] = B[k,p]·gᵀ[p,m]
                        T::gemm(k, p, m, bo, b_log, gi, g_t, dst, true);
                    } else {
                        // [m, k] = g[m,p]·Bᵀ[p,k]
                        T::gemm(m, p, k, gi, g_st, bo, (b_log.1, b_log.0), dst, true);
                    }
                }
            }
            send(a, da);
        }
        if self.needs_grad(b) {
            let mut db = vec![T::zero(); sb.numel()];
            for i in 0..bn {
                for j in 0..bc {
                    let gi = &g[(i * bc + j) * m * p..];
                    let ao = &av[mat_offset(sa, i, j)..];
                    let bo = mat_offset(sb, i, j);
                    let dst = &mut db[bo..bo + k * p];
                    if tb {
                        // stored [p, k] = gᵀ[p,m]·A[m,k]
                        T::gemm(p, m, k, gi, g_t, ao, a_log, dst, true);
                    } else {
                        // [k, p] = Aᵀ[k,m]·g[m,p]
                        T::gemm(k, m, p, ao, (a_log.1, a_log.0), gi, g_st, dst, true);
                    }
                }
            }
            send(b, db);
        }
    }
}

fn mat_offset(s: Shape, i: usize, j: usize) -> usize {
    let ii = if s.n() == 1 { 0 } else { i };
    let jj = if s.c() == 1 { 0 } else { j };
    (ii * s.c() + jj) * s.h() * s.w()
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
