use std::collections::BTreeSet;
use std::ops::AddAssign;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Variant};
use crate::diffusion::{Label, NoisePredictor};
use crate::error::{invalid, shape_err, Error, Result};
use crate::ndkernel::{Array, ParamSet, Tape, Var};

/// Block and fusion evaluations performed by one or more forward passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCount {
    pub blocks: u64,
    pub fusions: u64,
}

impl AddAssign for EvalCount {
    fn add_assign(&mut self, rhs: Self) {
        self.blocks += rhs.blocks;
        self.fusions += rhs.fusions;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Only long-skip fusion parameters train.
    SkipOnly,
    All,
}

/// Intermediate features of one forward pass.
#[derive(Clone, Debug)]
pub struct Features {
    /// Output of block `l` at index `l - 1`.
    pub blocks: Vec<Array>,
    /// Fused input of block `L/2 + 1 + j` at index `j` (skip variant only).
    pub fused: Vec<Array>,
}

impl Features {
    /// `L` for vanilla, `L + L/2` for skip.
    pub fn len(&self) -> usize {
        self.blocks.len() + self.fused.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The deep feature cached at skip level `i`: the output of block `L - i`.
    pub fn cache_at_level(&self, level: usize) -> Option<&Array> {
        let l = self.blocks.len();
        (level >= 1 && level <= l / 2).then(|| &self.blocks[l - level - 1])
    }
}

/// Which part of the trunk a pass evaluates.
#[derive(Clone, Copy, Debug)]
pub enum Pass<'c> {
    Full,
    /// Blocks `1..=level`, then fusions `level..=1` against `cached` as the
    /// deep operand of fusion `level`, each followed by its deep block.
    Local { level: usize, cached: &'c Array },
}

/// Diffusion transformer with adaptive-layer-norm conditioning and, for the
/// skip variant, `L/2` long-skip branches: block `l > L/2` consumes
/// `fuse_{L+1-l}(x_{L+1-l}, x_{l-1})`.
#[derive(Clone, Debug)]
pub struct SkipDiT {
    config: ModelConfig,
    params: ParamSet,
    bypass: bool,
}

impl SkipDiT {
    /// Fresh model. Each entry draws from its own stream keyed by `seed` and
    /// the entry name, so both variants built from one seed share every
    /// common weight.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self {
            config,
            params,
            bypass: false,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet, bypass: bool) -> Result<Self> {
        config.validate()?;
        if bypass && !config.is_skip() {
            return Err(Error::RequiresSkip("fusion bypass"));
        }
        let expected = init_params(&config, 0);
        expected.check_congruent(&params)?;
        Ok(Self {
            config,
            params,
            bypass,
        })
    }

    /// Skip-variant model whose shared entries are copied from `vanilla` and
    /// whose fusion branches are freshly initialised from `seed`.
    pub fn skip_from_vanilla(vanilla: &SkipDiT, seed: u64) -> Result<Self> {
        let mut skip = Self::new(vanilla.config.with_variant(Variant::Skip), seed)?;
        skip.copy_shared_from(vanilla)?;
        Ok(skip)
    }

    /// Overwrite every entry of `source` into this model; each must exist
    /// here with the same shape.
    pub fn copy_shared_from(&mut self, source: &SkipDiT) -> Result<()> {
        for (name, value) in source.params.iter() {
            let slot = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if slot.shape() != value.shape() {
                return Err(shape_err(
                    "copy_shared_from",
                    format!("`{name}` {:?} vs {:?}", slot.shape(), value.shape()),
                ));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bypass(&self) -> bool {
        self.bypass
    }

    pub fn is_skip(&self) -> bool {
        self.config.is_skip()
    }

    pub fn set_bypass(&mut self, on: bool) -> Result<()> {
        if on && !self.is_skip() {
            return Err(Error::RequiresSkip("fusion bypass"));
        }
        self.bypass = on;
        Ok(())
    }

    /// Turn every fusion branch into `fuse(a, b) = b`, making the model
    /// output-identical to the vanilla model with the same block weights.
    pub fn init_passthrough_fusion(mut self) -> Result<Self> {
        if !self.is_skip() {
            return Err(Error::RequiresSkip("init_passthrough_fusion"));
        }
        self.bypass = true;
        Ok(self)
    }

    /// Names of trainable entries under `mode`.
    pub fn freeze_mask(&self, mode: FreezeMode) -> Result<BTreeSet<String>> {
        match mode {
            FreezeMode::All => Ok(self.params.names().map(str::to_string).collect()),
            FreezeMode::SkipOnly if !self.is_skip() => Err(Error::RequiresSkip("skip-only freeze")),
            FreezeMode::SkipOnly => Ok(self
                .params
                .names()
                .filter(|n| is_fusion_param(n))
                .map(str::to_string)
                .collect()),
        }
    }

    /// Overwrite every zero-initialised entry (modulation, output head, biases)
    /// with normal draws of standard deviation `std`, so that every block
    /// contributes. Used to exercise the network away from its identity init.
    pub fn randomize_zero_init(&mut self, seed: u64, std: f64) {
        for (name, value) in self.params.iter_mut() {
            if value.data().iter().all(|&v| v == 0.0) {
                let mut rng = entry_rng(seed ^ 0x5eed, name);
                *value = Array::randn(value.shape().to_vec(), &mut rng).scaled(std);
            }
        }
    }

    pub fn forward(&self, x: &Array, t: usize, label: Label) -> Result<Array> {
        self.forward_pass(x, t, label, Pass::Full, &mut EvalCount::default())
            .map(|(eps, _)| eps)
    }

    pub fn forward_counted(&self, x: &Array, t: usize, label: Label, count: &mut EvalCount) -> Result<Array> {
        self.forward_pass(x, t, label, Pass::Full, count).map(|(eps, _)| eps)
    }

    /// Prediction with `params` (same names and shapes) in place of the
    /// model's own entries.
    pub fn forward_with(&self, params: &ParamSet, x: &Array, t: usize, label: Label) -> Result<Array> {
        self.params.check_congruent(params)?;
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = self.net(params).build(&mut tape, xv, t, label, Pass::Full)?.out;
        Ok(tape.value(out).clone())
    }

    /// Prediction plus every block output and (skip variant) fused input.
    pub fn forward_instrumented(&self, x: &Array, t: usize, label: Label) -> Result<(Array, Features)> {
        self.forward_pass(x, t, label, Pass::Full, &mut EvalCount::default())
    }

    /// Run `pass`, returning the prediction and the features it produced.
    /// Blocks a local pass skips hold empty arrays.
    pub fn forward_pass(
        &self,
        x: &Array,
        t: usize,
        label: Label,
        pass: Pass<'_>,
        count: &mut EvalCount,
    ) -> Result<(Array, Features)> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let trunk = self.net(&self.params).build(&mut tape, xv, t, label, pass)?;
        *count += trunk.count;
        let blocks = trunk
            .blocks
            .iter()
            .map(|v| v.map_or_else(|| Array::zeros([0]), |v| tape.value(v).clone()))
            .collect();
        let fused = trunk.fused.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((tape.value(trunk.out).clone(), Features { blocks, fused }))
    }

    /// Full pass that also returns the deep feature for skip level `level`.
    pub fn forward_caching(
        &self,
        x: &Array,
        t: usize,
        label: Label,
        level: usize,
        count: &mut EvalCount,
    ) -> Result<(Array, Array)> {
        self.check_level(level)?;
        let (eps, feats) = self.forward_pass(x, t, label, Pass::Full, count)?;
        let cache = feats
            .cache_at_level(level)
            .cloned()
            .expect("level checked above");
        Ok((eps, cache))
    }

    /// Local pass reusing `cached` (the output of block `L - level`).
    pub fn forward_local(
        &self,
        x: &Array,
        t: usize,
        label: Label,
        level: usize,
        cached: &Array,
        count: &mut EvalCount,
    ) -> Result<Array> {
        self.check_level(level)?;
        self.forward_pass(x, t, label, Pass::Local { level, cached }, count)
            .map(|(eps, _)| eps)
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if !self.is_skip() {
            return Err(Error::RequiresSkip("skip-level caching"));
        }
        if level == 0 || level > self.config.depth / 2 {
            return Err(invalid(format!(
                "skip level {level} outside 1..={}",
                self.config.depth / 2
            )));
        }
        Ok(())
    }

    /// Record the full forward pass on `tape` using `params` in place of the
    /// model's own entries (same names and shapes). Returns the prediction.
    pub fn build<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        x: Var,
        t: usize,
        label: Label,
    ) -> Result<Var> {
        Ok(self.net(params).build(tape, x, t, label, Pass::Full)?.out)
    }

    /// One conditioned block on its own, for analysis and gradient checks.
    /// `cond` is the `[1, d]` conditioning embedding before the SiLU.
    pub fn build_block<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        block: usize,
        x: Var,
        cond: Var,
    ) -> Result<Var> {
        if block == 0 || block > self.config.depth {
            return Err(invalid(format!("block {block} outside 1..={}", self.config.depth)));
        }
        let net = self.net(params);
        net.check_tokens(tape, x)?;
        let c = tape.silu(cond);
        net.block(tape, block, x, c)
    }

    /// Fusion branch `branch` on its own.
    pub fn build_fuse<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        branch: usize,
        shallow: Var,
        deep: Var,
    ) -> Result<Var> {
        if branch == 0 || branch > self.config.skip_branches() {
            return Err(Error::RequiresSkip("skip_fuse"));
        }
        self.net(params).fuse(tape, branch, shallow, deep)
    }

    pub fn fuse(&self, branch: usize, shallow: &Array, deep: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let (s, d) = (tape.input(shallow.clone()), tape.input(deep.clone()));
        let out = self.build_fuse(&mut tape, &self.params, branch, s, d)?;
        Ok(tape.value(out).clone())
    }

    pub fn label_row(&self, label: Label) -> Result<usize> {
        match label {
            Label::Null => Ok(self.config.num_classes),
            Label::Class(k) if k < self.config.num_classes => Ok(k),
            Label::Class(k) => Err(Error::UnknownLabel {
                label: k,
                classes: self.config.num_classes,
            }),
        }
    }

    fn net<'a>(&'a self, params: &'a ParamSet) -> Net<'a> {
        Net {
            model: self,
            params,
        }
    }
}

impl NoisePredictor for SkipDiT {
    fn predict(&self, x_t: &Array, t: usize, label: Label) -> Result<Array> {
        self.forward(x_t, t, label)
    }
}

pub fn is_fusion_param(name: &str) -> bool {
    name.starts_with("skips.")
}

/// `[cos(t w_k), sin(t w_k)]` with `w_k = 10000^(-k/half)`, zero-padded to `dim`.
pub fn timestep_embedding(t: f64, dim: usize) -> Array {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = (-(10000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (t * w).cos();
        out[half + k] = (t * w).sin();
    }
    Array::new([1, dim], out).expect("length matches")
}

/// Flat pixel index of each `(token, c, dy, dx)` patch entry.
pub fn patch_index(cfg: &ModelConfig) -> Vec<usize> {
    let (p, g, hw) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    let mut idx = Vec::with_capacity(cfg.tokens() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..cfg.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(c * hw * hw + (gy * p + dy) * hw + gx * p + dx);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`patch_index`]: token-major entry feeding each pixel.
pub fn unpatch_index(cfg: &ModelConfig) -> Vec<usize> {
    let fwd = patch_index(cfg);
    let mut inv = vec![0; fwd.len()];
    for (entry, &pixel) in fwd.iter().enumerate() {
        inv[pixel] = entry;
    }
    inv
}

struct Trunk {
    out: Var,
    blocks: Vec<Option<Var>>,
    fused: Vec<Var>,
    count: EvalCount,
}

struct Net<'a> {
    model: &'a SkipDiT,
    params: &'a ParamSet,
}

impl<'a> Net<'a> {
    fn cfg(&self) -> &'a ModelConfig {
        &self.model.config
    }

    fn p(&self, tape: &mut Tape<'a>, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.params.require(name)?))
    }

    fn linear(&self, tape: &mut Tape<'a>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{prefix}.weight"))?;
        let b = self.p(tape, &format!("{prefix}.bias"))?;
        let h = tape.matmul(x, w)?;
        tape.add(h, b)
    }

    /// `h + h * scale + shift`, with `[1, d]` rows broadcast over tokens.
    fn modulate(&self, tape: &mut Tape<'a>, h: Var, shift: Var, scale: Var) -> Result<Var> {
        let hs = tape.mul(h, scale)?;
        let h = tape.add(h, hs)?;
        tape.add(h, shift)
    }

    fn check_tokens(&self, tape: &Tape<'a>, x: Var) -> Result<()> {
        let want = [self.cfg().tokens(), self.cfg().hidden_dim];
        if tape.shape(x) != want {
            return Err(shape_err(
                "dit_block",
                format!("tokens {:?}, expected {want:?}", tape.shape(x)),
            ));
        }
        Ok(())
    }

    fn build(&self, tape: &mut Tape<'a>, x: Var, t: usize, label: Label, pass: Pass<'_>) -> Result<Trunk> {
        let cfg = self.cfg();
        if tape.shape(x) != cfg.image_shape() {
            return Err(shape_err(
                "model_forward",
                format!("image {:?}, expected {:?}", tape.shape(x), cfg.image_shape()),
            ));
        }
        let (tokens, c) = self.embed(tape, x, t, label)?;
        let depth = cfg.depth;
        let half = depth / 2;
        let mut blocks: Vec<Option<Var>> = vec![None; depth];
        let mut fused = Vec::new();
        let mut count = EvalCount::default();
        let mut prev = tokens;
        match pass {
            Pass::Full => {
                for l in 1..=depth {
                    let input = if cfg.is_skip() && l > half {
                        let i = depth + 1 - l;
                        let shallow = blocks[i - 1].expect("shallow block ran");
                        let f = self.fuse(tape, i, shallow, prev)?;
                        count.fusions += 1;
                        fused.push(f);
                        f
                    } else {
                        prev
                    };
                    prev = self.block(tape, l, input, c)?;
                    count.blocks += 1;
                    blocks[l - 1] = Some(prev);
                }
            }
            Pass::Local { level, cached } => {
                self.model.check_level(level)?;
                let want = [cfg.tokens(), cfg.hidden_dim];
                if cached.shape() != want {
                    return Err(shape_err(
                        "cached_forward",
                        format!("cached feature {:?}, expected {want:?}", cached.shape()),
                    ));
                }
                for l in 1..=level {
                    prev = self.block(tape, l, prev, c)?;
                    count.blocks += 1;
                    blocks[l - 1] = Some(prev);
                }
                prev = tape.input(cached.clone());
                for l in depth + 1 - level..=depth {
                    let i = depth + 1 - l;
                    let shallow = blocks[i - 1].expect("shallow block ran");
                    let f = self.fuse(tape, i, shallow, prev)?;
                    count.fusions += 1;
                    fused.push(f);
                    prev = self.block(tape, l, f, c)?;
                    count.blocks += 1;
                    blocks[l - 1] = Some(prev);
                }
            }
        }
        let out = self.head(tape, prev, c)?;
        Ok(Trunk {
            out,
            blocks,
            fused,
            count,
        })
    }

    /// Patch tokens plus positions, and `silu(t_emb + class_emb)`.
    fn embed(&self, tape: &mut Tape<'a>, x: Var, t: usize, label: Label) -> Result<(Var, Var)> {
        let cfg = self.cfg();
        let d = cfg.hidden_dim;
        let patches = tape.gather(x, patch_index(cfg).into(), &[cfg.tokens(), cfg.patch_dim()])?;
        let h = self.linear(tape, patches, "patch")?;
        let pos = self.p(tape, "pos")?;
        let tokens = tape.add(h, pos)?;

        let freq = tape.input(timestep_embedding(t as f64, d));
        let te = self.linear(tape, freq, "t_embed.fc1")?;
        let te = tape.silu(te);
        let te = self.linear(tape, te, "t_embed.fc2")?;

        let row = self.model.label_row(label)?;
        let table = self.p(tape, "class_embed")?;
        let idx: Arc<[usize]> = (row * d..(row + 1) * d).collect();
        let ce = tape.gather(table, idx, &[1, d])?;
        let cond = tape.add(te, ce)?;
        Ok((tokens, tape.silu(cond)))
    }

    fn block(&self, tape: &mut Tape<'a>, l: usize, x: Var, c: Var) -> Result<Var> {
        let d = self.cfg().hidden_dim;
        let pre = format!("blocks.{l}");
        let ada = self.linear(tape, c, &format!("{pre}.adaln"))?;
        let mut chunk = Vec::with_capacity(6);
        for k in 0..6 {
            chunk.push(tape.slice(ada, 1, k * d, (k + 1) * d)?);
        }
        let (shift_msa, scale_msa, gate_msa) = (chunk[0], chunk[1], chunk[2]);
        let (shift_mlp, scale_mlp, gate_mlp) = (chunk[3], chunk[4], chunk[5]);

        let h = tape.layer_norm(x)?;
        let h = self.modulate(tape, h, shift_msa, scale_msa)?;
        let a = self.attention(tape, h, &pre)?;
        let a = tape.mul(a, gate_msa)?;
        let x = tape.add(x, a)?;

        let h = tape.layer_norm(x)?;
        let h = self.modulate(tape, h, shift_mlp, scale_mlp)?;
        let h = self.linear(tape, h, &format!("{pre}.mlp.fc1"))?;
        let h = tape.gelu(h);
        let h = self.linear(tape, h, &format!("{pre}.mlp.fc2"))?;
        let h = tape.mul(h, gate_mlp)?;
        tape.add(x, h)
    }

    fn attention(&self, tape: &mut Tape<'a>, h: Var, pre: &str) -> Result<Var> {
        let cfg = self.cfg();
        let (d, dh) = (cfg.hidden_dim, cfg.head_dim());
        let qkv = self.linear(tape, h, &format!("{pre}.attn.qkv"))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let q = tape.slice(qkv, 1, k * dh, (k + 1) * dh)?;
            let kk = tape.slice(qkv, 1, d + k * dh, d + (k + 1) * dh)?;
            let v = tape.slice(qkv, 1, 2 * d + k * dh, 2 * d + (k + 1) * dh)?;
            let kt = tape.transpose(kk)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let w = tape.softmax(s)?;
            heads.push(tape.matmul(w, v)?);
        }
        let o = tape.concat(&heads)?;
        self.linear(tape, o, &format!("{pre}.attn.proj"))
    }

    fn fuse(&self, tape: &mut Tape<'a>, i: usize, shallow: Var, deep: Var) -> Result<Var> {
        if tape.shape(shallow) != tape.shape(deep) || tape.shape(deep).len() != 2 {
            return Err(shape_err(
                "skip_fuse",
                format!("{:?} vs {:?}", tape.shape(shallow), tape.shape(deep)),
            ));
        }
        if self.model.bypass {
            return Ok(deep);
        }
        let pre = format!("skips.{i}");
        let cat = tape.concat(&[shallow, deep])?;
        let mut n = tape.layer_norm(cat)?;
        if self.cfg().fusion_norm_affine {
            let w = self.p(tape, &format!("{pre}.norm.weight"))?;
            let b = self.p(tape, &format!("{pre}.norm.bias"))?;
            n = tape.mul(n, w)?;
            n = tape.add(n, b)?;
        }
        self.linear(tape, n, &format!("{pre}.linear"))
    }

    fn head(&self, tape: &mut Tape<'a>, x: Var, c: Var) -> Result<Var> {
        let cfg = self.cfg();
        let d = cfg.hidden_dim;
        let ada = self.linear(tape, c, "final.adaln")?;
        let shift = tape.slice(ada, 1, 0, d)?;
        let scale = tape.slice(ada, 1, d, 2 * d)?;
        let h = tape.layer_norm(x)?;
        let h = self.modulate(tape, h, shift, scale)?;
        let out = self.linear(tape, h, "final.linear")?;
        tape.gather(out, unpatch_index(cfg).into(), &cfg.image_shape())
    }
}

fn entry_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn init_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let d = cfg.hidden_dim;
    let mut p = ParamSet::new();
    let normal = |p: &mut ParamSet, name: String, shape: Vec<usize>, std: f64| {
        let mut rng = entry_rng(seed, &name);
        p.insert(name, Array::randn(shape, &mut rng).scaled(std));
    };
    let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
    let linear = |p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, zero: bool| {
        let std = if zero { 0.0 } else { xavier(fan_in, fan_out) };
        normal(p, format!("{name}.weight"), vec![fan_in, fan_out], std);
        p.insert(format!("{name}.bias"), Array::zeros([fan_out]));
    };

    linear(&mut p, "patch", cfg.patch_dim(), d, false);
    linear(&mut p, "t_embed.fc1", d, d, false);
    linear(&mut p, "t_embed.fc2", d, d, false);
    for l in 1..=cfg.depth {
        let pre = format!("blocks.{l}");
        linear(&mut p, &format!("{pre}.adaln"), d, 6 * d, true);
        linear(&mut p, &format!("{pre}.attn.qkv"), d, 3 * d, false);
        linear(&mut p, &format!("{pre}.attn.proj"), d, d, false);
        linear(&mut p, &format!("{pre}.mlp.fc1"), d, 4 * d, false);
        linear(&mut p, &format!("{pre}.mlp.fc2"), 4 * d, d, false);
    }
    for i in 1..=cfg.skip_branches() {
        let pre = format!("skips.{i}");
        linear(&mut p, &format!("{pre}.linear"), 2 * d, d, false);
        if cfg.fusion_norm_affine {
            p.insert(format!("{pre}.norm.weight"), Array::full([2 * d], 1.0));
            p.insert(format!("{pre}.norm.bias"), Array::zeros([2 * d]));
        }
    }
    linear(&mut p, "final.adaln", d, 2 * d, true);
    linear(&mut p, "final.linear", d, cfg.patch_dim(), true);

    let mut rng = entry_rng(seed, "pos");
    p.insert("pos", Array::randn([cfg.tokens(), d], &mut rng).scaled(0.02));
    let mut rng = entry_rng(seed, "class_embed");
    p.insert(
        "class_embed",
        Array::randn([cfg.num_classes + 1, d], &mut rng).scaled(0.02),
    );
    p
}
