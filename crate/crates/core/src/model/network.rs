use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ModelError, NetworkConfig};
use crate::attention::{hba_forward, ChannelMlp, HbaConfig, HbaParams, RelativeTables};
use crate::params::{he_normal, Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::{BnMode, PoolMode, ResampleMode, Scalar, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    He { fan_in: usize },
    Ones,
    Zeros,
}

/// One registration step of the layer recipe.
#[derive(Clone, Debug)]
pub(crate) enum Entry {
    Tensor { name: String, shape: Shape, kind: ParamKind, init: Init },
    Hba { prefix: String, cfg: HbaConfig },
}

impl Entry {
    pub(crate) fn learnable(&self) -> usize {
        match self {
            Entry::Tensor { shape, kind: ParamKind::Learnable, .. } => shape.numel(),
            Entry::Tensor { .. } => 0,
            Entry::Hba { cfg, .. } => cfg.param_count(),
        }
    }
}

fn push_conv_bn(out: &mut Vec<Entry>, conv: &str, bn: &str, cin: usize, cout: usize, k: usize) {
    let t = |name: String, shape, kind, init| Entry::Tensor { name, shape, kind, init };
    let per_channel = Shape::new(1, cout, 1, 1);
    out.push(t(format!("{conv}.weight"), Shape::new(cout, cin, k, k), ParamKind::Learnable, Init::He { fan_in: cin * k * k }));
    out.push(t(format!("{bn}.gamma"), per_channel, ParamKind::Learnable, Init::Ones));
    out.push(t(format!("{bn}.beta"), per_channel, ParamKind::Learnable, Init::Zeros));
    out.push(t(format!("{bn}.running_mean"), per_channel, ParamKind::Buffer, Init::Zeros));
    out.push(t(format!("{bn}.running_var"), per_channel, ParamKind::Buffer, Init::Ones));
}

fn push_block(out: &mut Vec<Entry>, prefix: &str, cin: usize, cout: usize, residual: bool) {
    push_conv_bn(out, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), cin, cout, 3);
    push_conv_bn(out, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), cout, cout, 3);
    if residual && cin != cout {
        push_conv_bn(out, &format!("{prefix}.proj"), &format!("{prefix}.proj_bn"), cin, cout, 1);
    }
}

fn decoder_input(cfg: &NetworkConfig, level: usize) -> usize {
    let deeper = if level + 1 == cfg.levels { cfg.encoder_width(cfg.levels) } else { cfg.decoder_width(level + 1) };
    let image = if level == 0 && cfg.concat_input { cfg.input_channels } else { 0 };
    deeper + cfg.encoder_width(level) + image
}

/// Every tensor the network registers, in registration order.
pub(crate) fn recipe(cfg: &NetworkConfig) -> Vec<Entry> {
    let mut out = Vec::new();
    let residual = cfg.variant.residual();
    for level in 0..=cfg.levels {
        let cin = if level == 0 { cfg.input_channels } else { cfg.encoder_width(level - 1) };
        push_block(&mut out, &format!("enc{level}"), cin, cfg.encoder_width(level), residual);
    }
    for level in cfg.variant.attention_levels(cfg.levels) {
        let (w, ca) = (cfg.encoder_width(level), cfg.attention_channels);
        out.push(Entry::Tensor {
            name: format!("att{level}.shrink.weight"),
            shape: Shape::new(ca, w, 1, 1),
            kind: ParamKind::Learnable,
            init: Init::He { fan_in: w },
        });
        out.push(Entry::Hba { prefix: format!("att{level}.hba"), cfg: cfg.hba_config() });
        out.push(Entry::Tensor {
            name: format!("att{level}.expand.weight"),
            shape: Shape::new(w, ca, 1, 1),
            kind: ParamKind::Learnable,
            init: Init::He { fan_in: ca },
        });
    }
    for level in (0..cfg.levels).rev() {
        push_block(&mut out, &format!("dec{level}"), decoder_input(cfg, level), cfg.decoder_width(level), false);
    }
    let (d0, k) = (cfg.decoder_width(0), cfg.output_classes);
    out.push(Entry::Tensor {
        name: "head.weight".into(),
        shape: Shape::new(k, d0, 1, 1),
        kind: ParamKind::Learnable,
        init: Init::He { fan_in: d0 },
    });
    out.push(Entry::Tensor {
        name: "head.bias".into(),
        shape: Shape::new(1, k, 1, 1),
        kind: ParamKind::Learnable,
        init: Init::Zeros,
    });
    out
}

/// Independent stream per named tensor, so variants that share a tensor name
/// also share its initial value.
fn entry_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// (name, shape, kind) of every stored tensor the recipe produces.
fn manifest(cfg: &NetworkConfig) -> Result<Vec<(String, Shape, ParamKind)>, ModelError> {
    let mut out = Vec::new();
    for entry in recipe(cfg) {
        match entry {
            Entry::Tensor { name, shape, kind, .. } => out.push((name, shape, kind)),
            Entry::Hba { prefix, cfg } => {
                let mut scratch = ParamStore::<f32>::new();
                HbaParams::init(&mut scratch, &prefix, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
                out.extend(scratch.iter().map(|(_, p)| (p.name.clone(), p.tensor.shape(), p.kind)));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    proj: Option<ConvBn>,
    residual: bool,
}

#[derive(Clone, Debug)]
struct Bottleneck<T> {
    shrink: ParamId,
    expand: ParamId,
    cfg: HbaConfig,
    hba: HbaParams<T>,
    rate: usize,
    side: usize,
}

#[derive(Clone, Debug)]
struct Layout<T> {
    encoder: Vec<Block>,
    attention: Vec<Option<Bottleneck<T>>>,
    decoder: Vec<Block>,
    head_weight: ParamId,
    head_bias: ParamId,
}

impl<T: Scalar> Layout<T> {
    fn resolve(cfg: &NetworkConfig, store: &ParamStore<T>) -> Result<Self, ModelError> {
        let id = |name: String| {
            store.find(&name).ok_or_else(|| ModelError::Corrupt(format!("parameter {name} is missing")))
        };
        let conv_bn = |conv: String, bn: String, pad| -> Result<ConvBn, ModelError> {
            Ok(ConvBn {
                weight: id(format!("{conv}.weight"))?,
                gamma: id(format!("{bn}.gamma"))?,
                beta: id(format!("{bn}.beta"))?,
                mean: id(format!("{bn}.running_mean"))?,
                var: id(format!("{bn}.running_var"))?,
                pad,
            })
        };
        let block = |p: &str, residual: bool| -> Result<Block, ModelError> {
            let proj_name = format!("{p}.proj.weight");
            Ok(Block {
                conv1: conv_bn(format!("{p}.conv1"), format!("{p}.bn1"), 1)?,
                conv2: conv_bn(format!("{p}.conv2"), format!("{p}.bn2"), 1)?,
                proj: match store.find(&proj_name) {
                    Some(_) => Some(conv_bn(format!("{p}.proj"), format!("{p}.proj_bn"), 0)?),
                    None => None,
                },
                residual,
            })
        };
        let residual = cfg.variant.residual();
        let encoder = (0..=cfg.levels).map(|l| block(&format!("enc{l}"), residual)).collect::<Result<_, _>>()?;
        let decoder = (0..cfg.levels).map(|l| block(&format!("dec{l}"), false)).collect::<Result<_, _>>()?;
        let mut attention: Vec<Option<Bottleneck<T>>> = vec![None; cfg.levels + 1];
        for level in cfg.variant.attention_levels(cfg.levels) {
            let hcfg = cfg.hba_config();
            let p = format!("att{level}.hba");
            let mlp = if hcfg.use_channel {
                Some(ChannelMlp {
                    w1: id(format!("{p}.mlp.w1"))?,
                    b1: id(format!("{p}.mlp.b1"))?,
                    w2: id(format!("{p}.mlp.w2"))?,
                    b2: id(format!("{p}.mlp.b2"))?,
                })
            } else {
                None
            };
            let hba = HbaParams {
                wq: id(format!("{p}.wq"))?,
                wk: id(format!("{p}.wk"))?,
                wv: id(format!("{p}.wv"))?,
                mlp,
                relative: hcfg.use_relative.then(|| RelativeTables::new(hcfg.grid, hcfg.key_dim)),
            };
            attention[level] = Some(Bottleneck {
                shrink: id(format!("att{level}.shrink.weight"))?,
                expand: id(format!("att{level}.expand.weight"))?,
                cfg: hcfg,
                hba,
                rate: cfg.pool_rate(level),
                side: cfg.side(level),
            });
        }
        Ok(Layout { encoder, attention, decoder, head_weight: id("head.weight".into())?, head_bias: id("head.bias".into())? })
    }

    fn cast<U: Scalar>(&self) -> Layout<U> {
        Layout {
            encoder: self.encoder.clone(),
            attention: self
                .attention
                .iter()
                .map(|b| {
                    b.as_ref().map(|b| Bottleneck {
                        shrink: b.shrink,
                        expand: b.expand,
                        cfg: b.cfg.clone(),
                        hba: b.hba.cast(),
                        rate: b.rate,
                        side: b.side,
                    })
                })
                .collect(),
            decoder: self.decoder.clone(),
            head_weight: self.head_weight,
            head_bias: self.head_bias,
        }
    }
}

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics can be updated afterwards.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// N×classes×H×W logits (no sigmoid).
    pub logits: Var,
    /// Running-mean id, running-var id and output node of every batch norm
    /// evaluated with batch statistics.
    pub batch_norms: Vec<(ParamId, ParamId, Var)>,
}

/// Parameters and layout of one network.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    store: ParamStore<T>,
    layout: Layout<T>,
}

impl<T: Scalar> Network<T> {
    /// He-normal initialization, deterministic in `(config, seed)`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        for entry in recipe(config) {
            match entry {
                Entry::Tensor { name, shape, kind, init } => {
                    let tensor = match init {
                        Init::He { fan_in } => he_normal(&mut entry_rng(seed, &name), shape, fan_in),
                        Init::Ones => Tensor::full(shape, T::one()),
                        Init::Zeros => Tensor::zeros(shape),
                    };
                    store.add(name, tensor, kind);
                }
                Entry::Hba { prefix, cfg } => {
                    HbaParams::init(&mut store, &prefix, &cfg, &mut entry_rng(seed, &prefix))?;
                }
            }
        }
        let layout = Layout::resolve(config, &store)?;
        Ok(Network { config: config.clone(), store, layout })
    }

    /// Wraps an existing store, checking names, shapes and kinds against the config.
    pub fn from_store(config: &NetworkConfig, store: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let want = manifest(config)?;
        if want.len() != store.len() {
            return Err(ModelError::Corrupt(format!("expected {} tensors, found {}", want.len(), store.len())));
        }
        for ((name, shape, kind), (_, p)) in want.iter().zip(store.iter()) {
            if *name != p.name || *shape != p.tensor.shape() || *kind != p.kind {
                return Err(ModelError::Corrupt(format!(
                    "tensor {} ({}) does not match expected {name} ({shape})",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        let layout = Layout::resolve(config, &store)?;
        Ok(Network { config: config.clone(), store, layout })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    /// Learnable scalars; relative-position tables and batch-norm buffers are not counted.
    pub fn param_count(&self) -> usize {
        self.store.learnable_count()
    }

    /// Number of attention blocks.
    pub fn attention_blocks(&self) -> usize {
        self.layout.attention.iter().flatten().count()
    }

    /// Fixed relative-position tables of every attention block, shallowest first.
    pub fn relative_tables(&self) -> Vec<&RelativeTables<T>> {
        self.layout.attention.iter().flatten().filter_map(|b| b.hba.relative.as_ref()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { config: self.config.clone(), store: self.store.cast(), layout: self.layout.cast() }
    }

    /// Copies every tensor whose name, kind and shape also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_shared_from(&mut self, other: &Network<T>) -> usize {
        let mut copied = 0;
        for (_, p) in self.store.iter_mut() {
            if let Some(src) = other.store.find(&p.name).map(|id| other.store.get(id)) {
                if src.kind == p.kind && src.tensor.shape() == p.tensor.shape() {
                    p.tensor.data_mut().copy_from_slice(src.tensor.data());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Records the network on `tape`. `bound` must come from this network's store.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, image: Var, mode: Mode) -> Result<ForwardOutput, ModelError> {
        let s = tape.shape(image);
        let size = self.config.input_size;
        if s.n() == 0 || s.c() != self.config.input_channels || s.h() != size || s.w() != size {
            return Err(ModelError::Input {
                expected: format!("N×{}×{size}×{size}", self.config.input_channels),
                found: s.to_string(),
            });
        }
        let mut pass = Pass { net: self, tape, bound, mode, batch_norms: Vec::new() };
        let logits = pass.run(image)?;
        Ok(ForwardOutput { logits, batch_norms: pass.batch_norms })
    }

    /// Eval-mode logits for a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.leaf(images.clone());
        let out = self.forward(&mut tape, &bound, x, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Blends the batch statistics of a training pass into the running statistics.
    pub fn update_running_stats(&mut self, tape: &Tape<T>, out: &ForwardOutput) {
        let m = T::from_f64_lossy(self.config.bn_momentum);
        let keep = T::one() - m;
        for &(mean_id, var_id, node) in &out.batch_norms {
            let Some(stats) = tape.batch_stats(node) else { continue };
            for (r, &b) in self.store.tensor_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.store.tensor_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + m * b;
            }
        }
    }
}

struct Pass<'a, T: Scalar> {
    net: &'a Network<T>,
    tape: &'a mut Tape<T>,
    bound: &'a Bound,
    mode: Mode,
    batch_norms: Vec<(ParamId, ParamId, Var)>,
}

impl<T: Scalar> Pass<'_, T> {
    fn conv_bn(&mut self, x: Var, cb: &ConvBn, relu: bool) -> Result<Var, ModelError> {
        let y = self.tape.conv2d(x, self.bound[cb.weight], 1, cb.pad)?;
        let store = &self.net.store;
        let mode = match self.mode {
            Mode::Train => BnMode::Batch,
            Mode::Eval => BnMode::Fixed {
                mean: store.tensor(cb.mean).data().to_vec(),
                var: store.tensor(cb.var).data().to_vec(),
            },
        };
        let eps = T::from_f64_lossy(self.net.config.bn_eps);
        let y = self.tape.batch_norm(y, self.bound[cb.gamma], self.bound[cb.beta], &mode, eps)?;
        if self.mode == Mode::Train {
            self.batch_norms.push((cb.mean, cb.var, y));
        }
        Ok(if relu { self.tape.relu(y)? } else { y })
    }

    fn block(&mut self, x: Var, b: &Block) -> Result<Var, ModelError> {
        let h = self.conv_bn(x, &b.conv1, true)?;
        if !b.residual {
            return self.conv_bn(h, &b.conv2, true);
        }
        let h = self.conv_bn(h, &b.conv2, false)?;
        let shortcut = match &b.proj {
            Some(p) => self.conv_bn(x, p, false)?,
            None => x,
        };
        let sum = self.tape.add(h, shortcut)?;
        Ok(self.tape.relu(sum)?)
    }

    /// `skip + upsample(expand(HBA(shrink(pool(skip)))))`.
    fn bottleneck(&mut self, skip: Var, b: &Bottleneck<T>) -> Result<Var, ModelError> {
        let pooled = self.tape.pool2d(skip, PoolMode::Avg, (b.rate, b.rate), b.rate)?;
        let tokens = self.tape.conv2d(pooled, self.bound[b.shrink], 1, 0)?;
        let att = hba_forward(self.tape, tokens, &b.cfg, &b.hba, self.bound)?;
        let back = self.tape.conv2d(att.output, self.bound[b.expand], 1, 0)?;
        let up = self.tape.resample(back, (b.side, b.side), ResampleMode::Bilinear)?;
        Ok(self.tape.add(skip, up)?)
    }

    fn run(&mut self, image: Var) -> Result<Var, ModelError> {
        let net = self.net;
        let cfg = &net.config;
        let mut skips = Vec::with_capacity(cfg.levels + 1);
        let mut h = self.block(image, &net.layout.encoder[0])?;
        skips.push(h);
        for level in 1..=cfg.levels {
            h = self.tape.pool2d(h, PoolMode::Max, (2, 2), 2)?;
            h = self.block(h, &net.layout.encoder[level])?;
            skips.push(h);
        }
        for (level, b) in net.layout.attention.iter().enumerate() {
            if let Some(b) = b {
                skips[level] = self.bottleneck(skips[level], b)?;
            }
        }
        let mut d = skips[cfg.levels];
        for level in (0..cfg.levels).rev() {
            let side = cfg.side(level);
            let up = self.tape.resample(d, (side, side), ResampleMode::Bilinear)?;
            let mut parts = vec![up, skips[level]];
            if level == 0 && cfg.concat_input {
                parts.push(image);
            }
            let cat = self.tape.concat(&parts, 1)?;
            d = self.block(cat, &net.layout.decoder[level])?;
        }
        let logits = self.tape.conv2d(d, self.bound[net.layout.head_weight], 1, 0)?;
        Ok(self.tape.add(logits, self.bound[net.layout.head_bias])?)
    }
}
