//! Hierarchical bottleneck attention block.
//!
//! The block combines three attention mechanisms over an S×S feature map:
//!
//! * content attention, `F_S = q·kᵀ` between per-pixel queries and keys,
//! * relative-position attention, `F_R = q·(R_h + R_w)ᵀ` against fixed
//!   encodings of the row and column offset between query and key,
//! * channel attention, `F_C = MLP(AvgPool(F)) + MLP(MaxPool(F))` with one
//!   shared MLP,
//!
//! fused as `F' = softmax(F_S + F_R) · v`, with every output channel scaled by
//! `σ(F_C)`.
//!
//! The relative tables are deterministic sinusoids of the integer offset and
//! carry no parameters; only the projections and the channel MLP are learned.

use rand::Rng;

use crate::params::{he_normal, Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::{PoolMode, Result, Scalar, Shape, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("invalid attention config: {0}")]
    Config(String),
    #[error("attention stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: TensorError,
    },
}

/// Axis the attention logits are normalized over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Per query token, over all keys. Each row of the attention matrix is a
    /// distribution, so `A·v` is a weighted average of values.
    Keys,
    /// Across heads for every (query, key) pair.
    Heads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HbaConfig {
    pub channels: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Hidden width of the channel MLP is `channels / mlp_reduction`.
    pub mlp_reduction: usize,
    /// Side S of the square token grid.
    pub grid: usize,
    pub use_qk_scaling: bool,
    pub use_relative: bool,
    pub use_channel: bool,
    pub softmax_axis: SoftmaxAxis,
}

impl HbaConfig {
    /// Full HBA block with `heads` heads of width `channels / heads` and
    /// channel-MLP reduction 8 (clamped so the hidden layer is at least 1 wide).
    pub fn new(channels: usize, heads: usize, grid: usize) -> Self {
        let head_dim = if heads == 0 { 0 } else { channels / heads };
        let mut reduction = 8.min(channels.max(1));
        while reduction > 1 && channels % reduction != 0 {
            reduction -= 1;
        }
        HbaConfig {
            channels,
            heads,
            key_dim: head_dim,
            value_dim: head_dim,
            mlp_reduction: reduction,
            grid,
            use_qk_scaling: false,
            use_relative: true,
            use_channel: true,
            softmax_axis: SoftmaxAxis::Keys,
        }
    }

    /// Content attention only: no relative logits and no channel gate.
    pub fn content_only(mut self) -> Self {
        self.use_relative = false;
        self.use_channel = false;
        self
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.mlp_reduction.max(1)
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let fail = |m: String| Err(AttentionError::Config(m));
        if self.heads == 0 {
            return fail("heads must be ≥ 1".into());
        }
        if self.channels != self.heads * self.value_dim {
            return fail(format!(
                "channels {} must equal heads {} × value_dim {}",
                self.channels, self.heads, self.value_dim
            ));
        }
        if self.key_dim == 0 {
            return fail("key_dim must be ≥ 1".into());
        }
        if self.use_relative && self.key_dim < 2 {
            return fail("relative attention needs key_dim ≥ 2 (rows and columns each get a share)".into());
        }
        if self.mlp_reduction == 0 || self.channels % self.mlp_reduction != 0 {
            return fail(format!("reduction {} must divide channels {}", self.mlp_reduction, self.channels));
        }
        if self.grid == 0 {
            return fail("attention grid must be ≥ 1".into());
        }
        Ok(())
    }

    /// Learnable scalars in one block.
    pub fn param_count(&self) -> usize {
        let proj = self.heads * self.channels * (2 * self.key_dim + self.value_dim);
        let mlp = if self.use_channel { 2 * self.channels * self.hidden() + self.hidden() + self.channels } else { 0 };
        proj + mlp
    }
}

/// Channel-attention MLP (C → C/r → C), shared by the average- and max-pooled branches.
#[derive(Clone, Debug)]
pub struct ChannelMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Fixed relative-position encodings for an S×S grid.
///
/// `rows[δ + S − 1]` encodes a row offset δ in the first half of the key
/// dimensions, `cols[δ + S − 1]` a column offset in the second half; their sum
/// is therefore a concatenated 2-d encoding. `pairwise[0, i, j]` holds
/// `R_h[δy(i,j)] + R_w[δx(i,j)]` for query token `i` and key token `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeTables<T> {
    pub grid: usize,
    pub key_dim: usize,
    pub rows: Tensor<T>,
    pub cols: Tensor<T>,
    pub pairwise: Tensor<T>,
}

fn sinusoid(offset: f64, dims: usize) -> Vec<f64> {
    (0..dims)
        .map(|j| {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dims as f64);
            if j % 2 == 0 {
                (offset * freq).sin()
            } else {
                (offset * freq).cos()
            }
        })
        .collect()
}

impl<T: Scalar> RelativeTables<T> {
    pub fn new(grid: usize, key_dim: usize) -> Self {
        let span = 2 * grid - 1;
        let row_dims = key_dim.div_ceil(2);
        let col_dims = key_dim - row_dims;
        let mut rows = vec![0.0; span * key_dim];
        let mut cols = vec![0.0; span * key_dim];
        for o in 0..span {
            let delta = o as f64 - (grid as f64 - 1.0);
            rows[o * key_dim..o * key_dim + row_dims].copy_from_slice(&sinusoid(delta, row_dims));
            cols[o * key_dim + row_dims..(o + 1) * key_dim].copy_from_slice(&sinusoid(delta, col_dims));
        }
        let tokens = grid * grid;
        let mut pairwise = Vec::with_capacity(tokens * tokens * key_dim);
        for i in 0..tokens {
            let (yi, xi) = (i / grid, i % grid);
            for j in 0..tokens {
                let (yj, xj) = (j / grid, j % grid);
                let dy = yj + grid - 1 - yi;
                let dx = xj + grid - 1 - xi;
                for d in 0..key_dim {
                    pairwise.push(rows[dy * key_dim + d] + cols[dx * key_dim + d]);
                }
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<_>>();
        RelativeTables {
            grid,
            key_dim,
            rows: Tensor::from_vec(Shape::new(1, 1, span, key_dim), cast(rows)).unwrap(),
            cols: Tensor::from_vec(Shape::new(1, 1, span, key_dim), cast(cols)).unwrap(),
            pairwise: Tensor::from_vec(Shape::new(1, tokens, tokens, key_dim), cast(pairwise)).unwrap(),
        }
    }

    /// `R_h[δy] + R_w[δx]` for an explicit offset.
    pub fn encoding(&self, dy: isize, dx: isize) -> Vec<T> {
        let s = self.grid as isize - 1;
        let (r, c) = ((dy + s) as usize, (dx + s) as usize);
        let d = self.key_dim;
        (0..d).map(|k| self.rows.data()[r * d + k] + self.cols.data()[c * d + k]).collect()
    }
}

/// Parameters of one HBA block: handles into a [`ParamStore`] plus the fixed tables.
#[derive(Clone, Debug)]
pub struct HbaParams<T> {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub mlp: Option<ChannelMlp>,
    pub relative: Option<RelativeTables<T>>,
}

impl<T: Scalar> HbaParams<T> {
    /// Registers the block's learnable weights under `prefix` with He-normal
    /// initialization. Projections carry no bias; the channel MLP does.
    pub fn init(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &HbaConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, AttentionError> {
        cfg.validate()?;
        let c = cfg.channels;
        let qk = cfg.heads * cfg.key_dim;
        let vd = cfg.heads * cfg.value_dim;
        let mut add = |name: &str, tensor: Tensor<T>| store.add(format!("{prefix}.{name}"), tensor, ParamKind::Learnable);
        let wq = add("wq", he_normal(rng, Shape::new(1, 1, c, qk), c));
        let wk = add("wk", he_normal(rng, Shape::new(1, 1, c, qk), c));
        let wv = add("wv", he_normal(rng, Shape::new(1, 1, c, vd), c));
        let mlp = if cfg.use_channel {
            let h = cfg.hidden();
            let w1 = add("mlp.w1", he_normal(rng, Shape::new(1, 1, c, h), c));
            let b1 = add("mlp.b1", Tensor::zeros(Shape::new(1, 1, 1, h)));
            let w2 = add("mlp.w2", he_normal(rng, Shape::new(1, 1, h, c), h));
            let b2 = add("mlp.b2", Tensor::zeros(Shape::new(1, 1, 1, c)));
            Some(ChannelMlp { w1, b1, w2, b2 })
        } else {
            None
        };
        let relative = cfg.use_relative.then(|| RelativeTables::new(cfg.grid, cfg.key_dim));
        Ok(HbaParams { wq, wk, wv, mlp, relative })
    }

    pub fn cast<U: Scalar>(&self) -> HbaParams<U> {
        HbaParams {
            wq: self.wq,
            wk: self.wk,
            wv: self.wv,
            mlp: self.mlp.clone(),
            relative: self.relative.as_ref().map(|r| RelativeTables::new(r.grid, r.key_dim)),
        }
    }
}

/// Intermediate results of one forward pass, for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct HbaOutput {
    /// F′, N×C×S×S.
    pub output: Var,
    /// softmax(F_S + F_R), N×heads×S²×S².
    pub attention: Var,
    /// Per-head queries, N×heads×S²×d_k.
    pub query: Var,
    /// F_S, N×heads×S²×S².
    pub content: Var,
    /// F_R, when relative attention is enabled.
    pub relative: Option<Var>,
    /// σ(F_C), N×C×1×1, when channel attention is enabled.
    pub gate: Option<Var>,
    /// Constant tape node holding the relative table, when enabled.
    pub relative_table: Option<Var>,
}

fn stage<V>(stage: &'static str, r: Result<V>) -> Result<V, AttentionError> {
    r.map_err(|source| AttentionError::Stage { stage, source })
}

/// Projects N×C×S×S features to per-head N×heads×S²×dim tokens.
fn project<T: Scalar>(tape: &mut Tape<T>, tokens: Var, w: Var, heads: usize, dim: usize) -> Result<Var> {
    let s = tape.shape(tokens);
    let (n, t) = (s.n(), s.h());
    let p = tape.dense(tokens, w, None)?;
    let p = tape.reshape(p, Shape::new(n, t, heads, dim))?;
    tape.permute(p, [0, 2, 1, 3])
}

fn tokens_of<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let [n, c, h, w] = tape.shape(f).0;
    let t = tape.permute(f, [0, 2, 3, 1])?;
    tape.reshape(t, Shape::new(n, 1, h * w, c))
}

fn check_input<T: Scalar>(tape: &Tape<T>, f: Var, cfg: &HbaConfig) -> Result<(), AttentionError> {
    let s = tape.shape(f);
    if s.c() != cfg.channels || s.h() != cfg.grid || s.w() != cfg.grid {
        return Err(AttentionError::Config(format!(
            "input {s} does not match block ({} channels on a {}×{} grid)",
            cfg.channels, cfg.grid, cfg.grid
        )));
    }
    Ok(())
}

/// Queries and content scores `F_S[n,h,i,j] = q_i·k_j` (optionally scaled by 1/√d_k).
pub fn content_scores<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    cfg: &HbaConfig,
    params: &HbaParams<T>,
    bound: &Bound,
) -> Result<(Var, Var), AttentionError> {
    cfg.validate()?;
    check_input(tape, f, cfg)?;
    let tokens = stage("tokens", tokens_of(tape, f))?;
    let q = stage("query", project(tape, tokens, bound[params.wq], cfg.heads, cfg.key_dim))?;
    let k = stage("key", project(tape, tokens, bound[params.wk], cfg.heads, cfg.key_dim))?;
    let mut fs = stage("content", tape.matmul(q, k, false, true))?;
    if cfg.use_qk_scaling {
        let scale = T::one() / T::from_usize(cfg.key_dim).unwrap().sqrt();
        fs = stage("content", tape.affine(fs, scale, T::zero()))?;
    }
    Ok((q, fs))
}

/// `F_R[·,·,i,j] = q_i·(R_h[δy(i,j)] + R_w[δx(i,j)])`. Returns the scores and
/// the constant table node.
pub fn relative_position_scores<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    tables: &RelativeTables<T>,
) -> Result<(Var, Var), AttentionError> {
    let table = tape.constant(tables.pairwise.clone());
    let fr = stage("relative", tape.row_bilinear(q, table))?;
    Ok((fr, table))
}

/// `F_C = MLP(AvgPool(F)) + MLP(MaxPool(F))`, N×C×1×1, before the sigmoid.
pub fn channel_scores<T: Scalar>(tape: &mut Tape<T>, f: Var, mlp: &ChannelMlp, bound: &Bound) -> Result<Var> {
    let [n, c, _, _] = tape.shape(f).0;
    let branch = |tape: &mut Tape<T>, mode: PoolMode| -> Result<Var> {
        let p = tape.global_pool(f, mode)?;
        let p = tape.reshape(p, Shape::new(n, 1, 1, c))?;
        let h = tape.dense(p, bound[mlp.w1], Some(bound[mlp.b1]))?;
        let h = tape.relu(h)?;
        tape.dense(h, bound[mlp.w2], Some(bound[mlp.b2]))
    };
    let avg = branch(tape, PoolMode::Avg)?;
    let max = branch(tape, PoolMode::Max)?;
    let sum = tape.add(avg, max)?;
    tape.reshape(sum, Shape::new(n, c, 1, 1))
}

/// `F′ = softmax(F_S + F_R)·v`, each channel scaled by `σ(F_C)`.
pub fn hba_forward<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    cfg: &HbaConfig,
    params: &HbaParams<T>,
    bound: &Bound,
) -> Result<HbaOutput, AttentionError> {
    let (q, fs) = content_scores(tape, f, cfg, params, bound)?;
    let [n, c, s, _] = tape.shape(f).0;
    let mut logits = fs;
    let mut relative = None;
    let mut relative_table = None;
    if cfg.use_relative {
        let tables = params
            .relative
            .as_ref()
            .ok_or_else(|| AttentionError::Config("relative attention enabled but no tables built".into()))?;
        if tables.grid != cfg.grid || tables.key_dim != cfg.key_dim {
            return Err(AttentionError::Config("relative tables were built for another grid".into()));
        }
        let (fr, table) = relative_position_scores(tape, q, tables)?;
        logits = stage("relative", tape.add(fs, fr))?;
        relative = Some(fr);
        relative_table = Some(table);
    }
    let axis = match cfg.softmax_axis {
        SoftmaxAxis::Keys => 3,
        SoftmaxAxis::Heads => 1,
    };
    let attention = stage("softmax", tape.softmax(logits, axis))?;

    let tokens = stage("tokens", tokens_of(tape, f))?;
    let v = stage("value", project(tape, tokens, bound[params.wv], cfg.heads, cfg.value_dim))?;
    let mixed = stage("mix", tape.matmul(attention, v, false, false))?;
    let mixed = stage("merge", tape.permute(mixed, [0, 2, 1, 3]))?;
    let mixed = stage("merge", tape.reshape(mixed, Shape::new(n, s, s, c)))?;
    let mut output = stage("merge", tape.permute(mixed, [0, 3, 1, 2]))?;

    let mut gate = None;
    if cfg.use_channel {
        let mlp = params
            .mlp
            .as_ref()
            .ok_or_else(|| AttentionError::Config("channel attention enabled but no MLP built".into()))?;
        let fc = stage("channel", channel_scores(tape, f, mlp, bound))?;
        let g = stage("channel", tape.sigmoid(fc))?;
        output = stage("gate", tape.mul(output, g))?;
        gate = Some(g);
    }
    Ok(HbaOutput { output, attention, query: q, content: fs, relative, gate, relative_table })
}
