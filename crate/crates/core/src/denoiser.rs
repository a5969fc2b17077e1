//! Conditional noise predictor: a two-level UNet with sinusoidal time
//! embedding and cross-attention over condition tokens.

use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::data::{class_name, NUM_CLASSES};
use crate::error::{invalid, Error, Result};
use crate::nn::{cosine_lr, gather_batch, Conv, GroupNorm, Linear};
use crate::numerics::{
    adam_update_store, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Bound, Fragment, ParamId, ParamStore,
    Scalar, Tape, Tensor, Var,
};
use crate::schedule::NoiseSchedule;

pub const PREFIX: &str = "denoiser";

pub const NULL: usize = 0;
pub const PAD: usize = 1;
pub const PHOTO: usize = 2;
pub const HEAD: usize = 3;
pub const SKULL: usize = 4;
const FIRST_CLASS: usize = 5;

/// Ordered token list; a token's id is its index.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = ["<null>", "<pad>", "photo", "head", "skull"].map(String::from).into();
    v.extend((0..NUM_CLASSES).map(class_name));
    v
}

pub fn vocab_size() -> usize {
    FIRST_CLASS + NUM_CLASSES
}

pub fn class_token(class: usize) -> Result<usize> {
    if class >= NUM_CLASSES {
        return invalid(format!("class {class} outside 0..{NUM_CLASSES}"));
    }
    Ok(FIRST_CLASS + class)
}

/// Frozen prompt templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// "a photo of the head of <class>"
    HeadOfClass,
    /// "a photo of the head of" with no class
    Generic,
    /// "<class>"
    ClassOnly,
    /// "<class> head"
    ClassHead,
}

impl Template {
    pub const ALL: [Template; 4] = [Self::HeadOfClass, Self::Generic, Self::ClassOnly, Self::ClassHead];

    pub fn id(self) -> &'static str {
        match self {
            Self::HeadOfClass => "head_of_class",
            Self::Generic => "generic",
            Self::ClassOnly => "class_only",
            Self::ClassHead => "class_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| {
                let ids: Vec<_> = Self::ALL.iter().map(|t| t.id()).collect();
                Error::InvalidArgument(format!("unknown template {s:?}; expected one of {}", ids.join(", ")))
            })
    }

    pub fn tokens(self, class: usize) -> Result<Vec<usize>> {
        let c = class_token(class)?;
        Ok(match self {
            Self::HeadOfClass => vec![PHOTO, HEAD, c],
            Self::Generic => vec![PHOTO, HEAD],
            Self::ClassOnly => vec![c],
            Self::ClassHead => vec![c, HEAD],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub heads: usize,
    pub d_tau: usize,
    pub max_tokens: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_width: 32,
            channel_mults: vec![1, 2],
            res_blocks: 2,
            heads: 4,
            d_tau: 64,
            max_tokens: 8,
            time_dim: 128,
        }
    }
}

impl DenoiserConfig {
    fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.res_blocks == 0 || self.heads == 0 || self.max_tokens == 0 {
            return invalid("denoiser needs at least one level, block, head and token");
        }
        let top = self.base_width * self.channel_mults.last().unwrap();
        if top % self.heads != 0 {
            return invalid(format!("{top} channels not divisible by {} heads", self.heads));
        }
        if self.time_dim < 4 || self.time_dim % 4 != 0 {
            return invalid("time_dim must be a positive multiple of 4");
        }
        Ok(())
    }

    fn freq_dim(&self) -> usize {
        self.time_dim / 4
    }
}

/// Condition tokens mapped through the token and position tables.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub tokens: Vec<usize>,
    /// `[M, d_tau]`
    pub embedding: Tensor,
    pub is_unconditional: bool,
}

impl ConditionEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sinusoidal features of a real-valued time, `[sin(t w_i), cos(t w_i)]`.
pub fn time_features(t: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * w).sin() as f32;
        out[half + i] = (t * w).cos() as f32;
    }
    out
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(s: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: GroupNorm::new(s, &format!("{name}.norm1"), cin),
            conv1: Conv::new(s, &format!("{name}.conv1"), cin, cout, 3, 1, 2.0, rng),
            temb: Linear::new(s, &format!("{name}.temb"), tdim, cout, 1.0, rng),
            norm2: GroupNorm::new(s, &format!("{name}.norm2"), cout),
            conv2: Conv::new(s, &format!("{name}.conv2"), cout, cout, 3, 1, 0.1, rng),
            skip: (cin != cout).then(|| Conv::new(s, &format!("{name}.skip"), cin, cout, 1, 1, 1.0, rng)),
        }
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var, temb: Var) -> Result<Var> {
        let mut h = self.norm1.forward(tape, p, x)?;
        h = tape.silu(h)?;
        h = self.conv1.forward(tape, p, h)?;
        let e = self.temb.forward(tape, p, temb)?;
        h = tape.add_planes(h, e)?;
        h = self.norm2.forward(tape, p, h)?;
        h = tape.silu(h)?;
        h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(tape, p, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// Context tokens fed to every attention block: `[B*M, d_tau]` plus a
/// `[B, M]` visibility mask.
#[derive(Clone, Copy)]
struct Context<'a> {
    tokens: Var,
    len: usize,
    mask: &'a Arc<Vec<bool>>,
}

#[derive(Clone, Debug)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(s: &mut ParamStore, name: &str, c: usize, d_tau: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: GroupNorm::new(s, &format!("{name}.norm"), c),
            q: Linear::new(s, &format!("{name}.q"), c, c, 1.0, rng),
            k: Linear::new(s, &format!("{name}.k"), d_tau, c, 1.0, rng),
            v: Linear::new(s, &format!("{name}.v"), d_tau, c, 1.0, rng),
            out: Linear::new(s, &format!("{name}.out"), c, c, 0.1, rng),
            heads,
        }
    }

    /// Attention probabilities `[B*heads, H*W, M]` and the block output.
    fn forward_with_probs<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        x: Var,
        ctx: Context,
    ) -> Result<(Var, Var)> {
        let [b, c, h, w] = tape.shape(x).try_into().map_err(|_| Error::ShapeMismatch {
            op: "cross_attention",
            left: tape.shape(x).to_vec(),
            right: vec![],
        })?;
        let (n, m, nh) = (h * w, ctx.len, self.heads);
        let dh = c / nh;
        let xn = self.norm.forward(tape, p, x)?;
        let seq = tape.permute(xn, &[0, 2, 3, 1])?;
        let seq = tape.reshape(seq, &[b * n, c])?;
        let q = self.q.forward(tape, p, seq)?;
        let q = tape.reshape(q, &[b, n, nh, dh])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let q = tape.reshape(q, &[b * nh, n, dh])?;
        let k = self.k.forward(tape, p, ctx.tokens)?;
        let k = tape.reshape(k, &[b, m, nh, dh])?;
        let k = tape.permute(k, &[0, 2, 3, 1])?;
        let k = tape.reshape(k, &[b * nh, dh, m])?;
        let v = self.v.forward(tape, p, ctx.tokens)?;
        let v = tape.reshape(v, &[b, m, nh, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        let v = tape.reshape(v, &[b * nh, m, dh])?;
        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, S::of(1.0 / (dh as f64).sqrt()))?;
        let probs = tape.softmax(scores, Some(ctx.mask.clone()))?;
        let o = tape.matmul(probs, v)?;
        let o = tape.reshape(o, &[b, nh, n, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b * n, c])?;
        let o = self.out.forward(tape, p, o)?;
        let o = tape.reshape(o, &[b, h, w, c])?;
        let o = tape.permute(o, &[0, 3, 1, 2])?;
        Ok((tape.add(x, o)?, probs))
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var, ctx: Context) -> Result<Var> {
        Ok(self.forward_with_probs(tape, p, x, ctx)?.0)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    attn: Vec<CrossAttention>,
    /// Downsampling conv on the way down, upsampling conv on the way up.
    resample: Option<Conv>,
}

/// Conditional UNet noise predictor.
#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    store: ParamStore,
    token_table: ParamId,
    position_table: ParamId,
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    down: Vec<Level>,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv,
    trained: ParamId,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let n = |x: &str| format!("{PREFIX}.{x}");
        let td = cfg.time_dim;
        let token_table = s.add_normal(n("tokens"), &[vocab_size(), cfg.d_tau], 1, 1.0, r);
        let position_table = s.add_normal(n("positions"), &[cfg.max_tokens, cfg.d_tau], 1, 0.1, r);
        let time1 = Linear::new(&mut s, &n("time1"), cfg.freq_dim(), td, 1.0, r);
        let time2 = Linear::new(&mut s, &n("time2"), td, td, 1.0, r);
        let ch: Vec<usize> = cfg.channel_mults.iter().map(|m| cfg.base_width * m).collect();
        let last = ch.len() - 1;
        let conv_in = Conv::new(&mut s, &n("conv_in"), cfg.latent_channels, ch[0], 3, 1, 1.0, r);
        let mut down = Vec::new();
        let mut skips = Vec::new();
        let mut cur = ch[0];
        for (l, &c) in ch.iter().enumerate() {
            let mut level = Level {
                blocks: Vec::new(),
                attn: Vec::new(),
                resample: None,
            };
            for i in 0..cfg.res_blocks {
                level.blocks.push(ResBlock::new(&mut s, &n(&format!("down{l}.res{i}")), cur, c, td, r));
                cur = c;
                if l == last {
                    let name = n(&format!("down{l}.attn{i}"));
                    level.attn.push(CrossAttention::new(&mut s, &name, c, cfg.d_tau, cfg.heads, r));
                }
                skips.push(c);
            }
            if l != last {
                level.resample = Some(Conv::new(&mut s, &n(&format!("down{l}.down")), c, c, 3, 2, 1.0, r));
            }
            down.push(level);
        }
        let mid1 = ResBlock::new(&mut s, &n("mid.res0"), cur, cur, td, r);
        let mid_attn = CrossAttention::new(&mut s, &n("mid.attn"), cur, cfg.d_tau, cfg.heads, r);
        let mid2 = ResBlock::new(&mut s, &n("mid.res1"), cur, cur, td, r);
        let mut up = Vec::new();
        for (l, &c) in ch.iter().enumerate().rev() {
            let mut level = Level {
                blocks: Vec::new(),
                attn: Vec::new(),
                resample: None,
            };
            for i in 0..cfg.res_blocks {
                let skip = skips.pop().unwrap();
                level.blocks.push(ResBlock::new(&mut s, &n(&format!("up{l}.res{i}")), cur + skip, c, td, r));
                cur = c;
                if l == last {
                    let name = n(&format!("up{l}.attn{i}"));
                    level.attn.push(CrossAttention::new(&mut s, &name, c, cfg.d_tau, cfg.heads, r));
                }
            }
            if l != 0 {
                level.resample = Some(Conv::new(&mut s, &n(&format!("up{l}.up")), c, c, 3, 1, 1.0, r));
            }
            up.push(level);
        }
        let norm_out = GroupNorm::new(&mut s, &n("norm_out"), cur);
        let conv_out = Conv::new(&mut s, &n("conv_out"), cur, cfg.latent_channels, 3, 1, 0.1, r);
        let trained = s.add(n("trained_epochs"), Tensor::zeros(&[1]), false);
        Ok(Self {
            cfg,
            store: s,
            token_table,
            position_table,
            time1,
            time2,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
            trained,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.store.get(self.trained).data()[0] > 0.0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store.named())
    }

    pub fn load(cfg: DenoiserConfig, path: &Path) -> Result<Self> {
        let mut d = Self::new(cfg, 0)?;
        d.store.load_named(&load_checkpoint(path)?)?;
        Ok(d)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.cfg.max_tokens {
            return invalid(format!(
                "condition needs 1..={} tokens, got {}",
                self.cfg.max_tokens,
                tokens.len()
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size()) {
            return invalid(format!("token id {bad} not in the vocabulary of {}", vocab_size()));
        }
        if tokens.iter().all(|&t| t == PAD) {
            return invalid("condition consists only of padding");
        }
        Ok(())
    }

    /// Token plus position embeddings of `tokens`, on the tape.
    fn embed_on<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, tokens: &[usize]) -> Result<Var> {
        let tok = tape.gather(p[self.token_table], tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather(p[self.position_table], &positions)?;
        tape.add(tok, pos)
    }

    pub fn embed_condition(&self, tokens: &[usize]) -> Result<ConditionEmbedding> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::<f32>::inference();
        let p = tape.bind(&self.store);
        let e = self.embed_on(&mut tape, &p, tokens)?;
        Ok(ConditionEmbedding {
            tokens: tokens.to_vec(),
            embedding: tape.value(e).clone(),
            is_unconditional: tokens.iter().all(|&t| t == NULL || t == PAD),
        })
    }

    pub fn null_condition(&self) -> ConditionEmbedding {
        self.embed_condition(&[NULL]).expect("null token is always valid")
    }

    pub fn template_condition(&self, template: Template, class: usize) -> Result<ConditionEmbedding> {
        self.embed_condition(&template.tokens(class)?)
    }

    fn time_on<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, ts: &[f64]) -> Result<Var> {
        let fd = self.cfg.freq_dim();
        let feats: Vec<S> = ts.iter().flat_map(|&t| time_features(t, fd)).map(|v| S::of(v as f64)).collect();
        let f = tape.constant(Tensor::new(&[ts.len(), fd], feats)?);
        let h = self.time1.forward(tape, p, f)?;
        let h = tape.silu(h)?;
        let h = self.time2.forward(tape, p, h)?;
        tape.silu(h)
    }

    fn unet_on<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, z: Var, ts: &[f64], ctx: Context) -> Result<Var> {
        let temb = self.time_on(tape, p, ts)?;
        let mut h = self.conv_in.forward(tape, p, z)?;
        let mut skips = Vec::new();
        for level in &self.down {
            for (i, block) in level.blocks.iter().enumerate() {
                h = block.forward(tape, p, h, temb)?;
                if let Some(a) = level.attn.get(i) {
                    h = a.forward(tape, p, h, ctx)?;
                }
                skips.push(h);
            }
            if let Some(conv) = &level.resample {
                h = conv.forward(tape, p, h)?;
            }
        }
        h = self.mid1.forward(tape, p, h, temb)?;
        h = self.mid_attn.forward(tape, p, h, ctx)?;
        h = self.mid2.forward(tape, p, h, temb)?;
        for level in &self.up {
            for (i, block) in level.blocks.iter().enumerate() {
                let skip = skips.pop().unwrap();
                h = tape.concat(&[h, skip])?;
                h = block.forward(tape, p, h, temb)?;
                if let Some(a) = level.attn.get(i) {
                    h = a.forward(tape, p, h, ctx)?;
                }
            }
            if let Some(conv) = &level.resample {
                h = tape.upsample(h, 2)?;
                h = conv.forward(tape, p, h)?;
            }
        }
        h = self.norm_out.forward(tape, p, h)?;
        h = tape.silu(h)?;
        self.conv_out.forward(tape, p, h)
    }

    fn check_latent(&self, z: &Tensor, batch: usize) -> Result<()> {
        let s = z.shape();
        let down = 1usize << (self.cfg.channel_mults.len() - 1);
        if s.len() != 4 || s[0] != batch || s[1] != self.cfg.latent_channels || s[2] % down != 0 || s[3] % down != 0 {
            return Err(Error::ShapeMismatch {
                op: "predict_noise",
                left: s.to_vec(),
                right: vec![batch, self.cfg.latent_channels, down, down],
            });
        }
        Ok(())
    }

    /// Padded token layout for a batch of sequences: ids `[B*M]` and mask `[B, M]`.
    fn pad_tokens(seqs: &[&[usize]]) -> (Vec<usize>, Arc<Vec<bool>>, usize) {
        let m = seqs.iter().map(|s| s.len()).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(seqs.len() * m);
        let mut mask = Vec::with_capacity(seqs.len() * m);
        for s in seqs {
            for j in 0..m {
                let t = s.get(j).copied().unwrap_or(PAD);
                ids.push(t);
                mask.push(t != PAD);
            }
        }
        (ids, Arc::new(mask), m)
    }

    /// Predicted noise for a batch `[B, c, h, w]`, one time and condition
    /// per sample. Times are real-valued in `(0, T]`.
    pub fn predict_noise_batch(
        &self,
        z: &Tensor,
        ts: &[f64],
        conds: &[&ConditionEmbedding],
        steps: usize,
    ) -> Result<Tensor> {
        let b = ts.len();
        self.check_latent(z, b)?;
        if conds.len() != b {
            return invalid(format!("{} conditions for a batch of {b}", conds.len()));
        }
        if let Some(t) = ts.iter().find(|&&t| !(t > 0.0 && t <= steps as f64)) {
            return invalid(format!("time {t} outside (0, {steps}]"));
        }
        let m = conds.iter().map(|c| c.len()).max().unwrap_or(1);
        let d = self.cfg.d_tau;
        let mut ctx = Vec::with_capacity(b * m * d);
        let mut mask = Vec::with_capacity(b * m);
        for c in conds {
            if c.embedding.shape() != [c.len(), d] {
                return Err(Error::ShapeMismatch {
                    op: "predict_noise",
                    left: c.embedding.shape().to_vec(),
                    right: vec![c.len(), d],
                });
            }
            ctx.extend_from_slice(c.embedding.data());
            mask.extend(c.tokens.iter().map(|&t| t != PAD));
            for _ in c.len()..m {
                ctx.extend(std::iter::repeat(0.0).take(d));
                mask.push(false);
            }
        }
        let mask = Arc::new(mask);
        let mut tape = Tape::<f32>::inference();
        let p = tape.bind(&self.store);
        let zv = tape.constant(z.clone());
        let tokens = tape.constant(Tensor::new(&[b * m, d], ctx)?);
        let context = Context {
            tokens,
            len: m,
            mask: &mask,
        };
        let out = self.unet_on(&mut tape, &p, zv, ts, context)?;
        Ok(tape.value(out).clone())
    }

    /// Predicted noise for a batch sharing one time and condition.
    pub fn predict_noise(&self, z: &Tensor, t: f64, cond: &ConditionEmbedding, steps: usize) -> Result<Tensor> {
        let b = z.shape().first().copied().unwrap_or(0);
        let ts = vec![t; b];
        let conds = vec![cond; b];
        self.predict_noise_batch(z, &ts, &conds, steps)
    }

    /// Attention probabilities of the bottleneck block for one input, for
    /// inspecting the softmax invariants.
    pub fn mid_attention_probs(&self, z: &Tensor, t: f64, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        self.check_latent(z, 1)?;
        let mut tape = Tape::<f32>::inference();
        let p = tape.bind(&self.store);
        let mask = Arc::new(tokens.iter().map(|&t| t != PAD).collect::<Vec<_>>());
        let ctx_tokens = self.embed_on(&mut tape, &p, tokens)?;
        let ctx = Context {
            tokens: ctx_tokens,
            len: tokens.len(),
            mask: &mask,
        };
        let temb = self.time_on(&mut tape, &p, &[t])?;
        let x = tape.constant(z.clone());
        let mut h = self.conv_in.forward(&mut tape, &p, x)?;
        for level in &self.down {
            for (i, block) in level.blocks.iter().enumerate() {
                h = block.forward(&mut tape, &p, h, temb)?;
                if let Some(a) = level.attn.get(i) {
                    h = a.forward(&mut tape, &p, h, ctx)?;
                }
            }
            if let Some(conv) = &level.resample {
                h = conv.forward(&mut tape, &p, h)?;
            }
        }
        h = self.mid1.forward(&mut tape, &p, h, temb)?;
        let (_, probs) = self.mid_attn.forward_with_probs(&mut tape, &p, h, ctx)?;
        Ok(tape.value(probs).clone())
    }

    /// Training loss `mean |eps - eps_hat|^2` for a batch, built on `tape`.
    #[allow(clippy::too_many_arguments)]
    fn loss_on<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        z0: &Tensor,
        eps: &Tensor,
        ts: &[f64],
        tokens: &[Vec<usize>],
        sched: &NoiseSchedule,
    ) -> Result<Var> {
        let b = ts.len();
        let per = z0.len() / b;
        let (zd, ed) = (z0.data(), eps.data());
        let mut zt = Vec::with_capacity(z0.len());
        for (i, &t) in ts.iter().enumerate() {
            let a = sched.alpha_bar_at(t)?;
            let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
            for j in i * per..(i + 1) * per {
                zt.push(S::of(sa * zd[j] as f64 + sn * ed[j] as f64));
            }
        }
        let zt = tape.constant(Tensor::new(z0.shape(), zt)?);
        let seqs: Vec<&[usize]> = tokens.iter().map(|t| t.as_slice()).collect();
        let (ids, mask, m) = Self::pad_tokens(&seqs);
        let tok = tape.gather(p[self.token_table], &ids)?;
        let positions: Vec<usize> = (0..b * m).map(|i| i % m).collect();
        let pos = tape.gather(p[self.position_table], &positions)?;
        let ctx_tokens = tape.add(tok, pos)?;
        let ctx = Context {
            tokens: ctx_tokens,
            len: m,
            mask: &mask,
        };
        let pred = self.unet_on(tape, p, zt, ts, ctx)?;
        let target = tape.constant(eps.cast());
        tape.mse(pred, target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub cond_dropout: f64,
    /// Templates drawn uniformly for each training example.
    pub templates: Vec<Template>,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-3,
            batch_size: 32,
            cond_dropout: 0.1,
            templates: Template::ALL.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DenoiserTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains on images encoded by a trained codec.
pub fn train_denoiser(
    cfg: DenoiserConfig,
    codec: &Codec,
    images: &[Tensor],
    classes: &[usize],
    sched: &NoiseSchedule,
    tc: &DenoiserTrainConfig,
) -> Result<(Denoiser, DenoiserTrainReport)> {
    if !codec.is_trained() {
        return Err(Error::Untrained("codec"));
    }
    if images.is_empty() {
        return Err(Error::Dataset("denoiser training set is empty".into()));
    }
    let latents = codec.encode_all(images, 64)?;
    train_denoiser_on_latents(cfg, &latents, classes, sched, tc)
}

/// Trains on pre-encoded latents `[c, h, w]` labelled with classes.
pub fn train_denoiser_on_latents(
    cfg: DenoiserConfig,
    latents: &[Tensor],
    classes: &[usize],
    sched: &NoiseSchedule,
    tc: &DenoiserTrainConfig,
) -> Result<(Denoiser, DenoiserTrainReport)> {
    if latents.is_empty() {
        return Err(Error::Dataset("denoiser training set is empty".into()));
    }
    if latents.len() != classes.len() {
        return invalid(format!("{} latents but {} labels", latents.len(), classes.len()));
    }
    if tc.templates.is_empty() {
        return invalid("at least one training template is required");
    }
    if !(0.0..=1.0).contains(&tc.cond_dropout) {
        return invalid(format!("cond_dropout {} outside [0, 1]", tc.cond_dropout));
    }
    let mut den = Denoiser::new(cfg, tc.seed)?;
    let mut state = AdamState::for_store(&den.store);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xd1ff);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let total = latents.len().div_ceil(tc.batch_size) * tc.epochs;
    let steps = sched.steps() as f64;
    let mut report = DenoiserTrainReport::default();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let z0 = gather_batch(latents, chunk)?;
            let eps = Tensor::from_fn(z0.shape(), |_| rng.sample::<f32, _>(StandardNormal));
            let ts: Vec<f64> = chunk.iter().map(|_| steps * (1.0 - rng.gen::<f64>())).collect();
            let mut tokens = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if rng.gen::<f64>() < tc.cond_dropout {
                    tokens.push(vec![NULL]);
                } else {
                    let t = tc.templates[rng.gen_range(0..tc.templates.len())];
                    tokens.push(t.tokens(classes[i])?);
                }
            }
            let mut tape = Tape::<f32>::new();
            let p = tape.bind(&den.store);
            let loss = den.loss_on(&mut tape, &p, &z0, &eps, &ts, &tokens, sched)?;
            epoch_loss += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
            let grads = tape.backward(loss)?.for_params(&tape, &p);
            let adam = AdamConfig {
                lr: cosine_lr(tc.lr, step, total, 0.05),
                ..AdamConfig::default()
            };
            adam_update_store(&mut den.store, &grads, &mut state, &adam)?;
            step += 1;
        }
        let avg = epoch_loss / latents.len() as f64;
        info!("denoiser epoch {epoch}: eps mse {avg:.5}");
        report.epoch_losses.push(avg);
    }
    den.store.set(den.trained, Tensor::full(&[1], tc.epochs.max(1) as f32))?;
    Ok((den, report))
}

/// Per-sample noise-prediction error under the true class and under the
/// class shifted by `offset`, with shared noise and times.
pub fn paired_condition_errors(
    den: &Denoiser,
    latents: &[Tensor],
    classes: &[usize],
    template: Template,
    offset: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = sched.steps();
    let mut out = Vec::with_capacity(latents.len());
    for (z0, &c) in latents.iter().zip(classes) {
        let eps = Tensor::from_fn(z0.shape(), |_| rng.sample::<f32, _>(StandardNormal));
        let t = rng.gen_range(1..=steps);
        let zt = crate::schedule::forward_diffuse(z0, t, &eps, sched)?.unsqueeze0();
        let right = den.template_condition(template, c)?;
        let wrong = den.template_condition(template, (c + offset) % NUM_CLASSES)?;
        let pr = den.predict_noise(&zt, t as f64, &right, steps)?;
        let pw = den.predict_noise(&zt, t as f64, &wrong, steps)?;
        let e = eps.unsqueeze0();
        let mse = |a: &Tensor| a.sub(&e).map(|d| d.map(|v| v * v).mean() as f64);
        out.push((mse(&pr)?, mse(&pw)?));
    }
    Ok(out)
}

/// Training loss on a fixed batch, for gradient checking.
pub struct DenoiserFragment<'a> {
    pub denoiser: &'a Denoiser,
    pub sched: &'a NoiseSchedule,
    pub z0: Tensor,
    pub eps: Tensor,
    pub ts: Vec<f64>,
    pub tokens: Vec<Vec<usize>>,
}

impl Fragment for DenoiserFragment<'_> {
    fn params(&self) -> &ParamStore {
        &self.denoiser.store
    }

    fn loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound) -> Result<Var> {
        self.denoiser
            .loss_on(tape, p, &self.z0, &self.eps, &self.ts, &self.tokens, self.sched)
    }
}

/// Gradient of the training loss for one batch, exposed for the
/// no-path-no-gradient check on the token table.
pub fn token_table_gradient(
    den: &Denoiser,
    z0: &Tensor,
    eps: &Tensor,
    ts: &[f64],
    tokens: &[Vec<usize>],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let p = tape.bind(&den.store);
    let loss = den.loss_on(&mut tape, &p, z0, eps, ts, tokens, sched)?;
    let grads = tape.backward(loss)?.for_params(&tape, &p);
    Ok(grads[den.token_table.index()].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;

    fn small() -> Denoiser {
        Denoiser::new(DenoiserConfig::default(), 3).unwrap()
    }

    #[test]
    fn vocabulary_layout() {
        let v = vocabulary();
        assert_eq!(v.len(), vocab_size());
        assert_eq!(v[NULL], "<null>");
        assert_eq!(v[class_token(2).unwrap()], "3-spike");
        assert!(class_token(NUM_CLASSES).is_err());
    }

    #[test]
    fn template_sequences() {
        let c = class_token(4).unwrap();
        assert_eq!(Template::HeadOfClass.tokens(4).unwrap(), vec![PHOTO, HEAD, c]);
        assert_eq!(Template::Generic.tokens(4).unwrap(), vec![PHOTO, HEAD]);
        assert_eq!(Template::ClassOnly.tokens(4).unwrap(), vec![c]);
        assert_eq!(Template::ClassHead.tokens(4).unwrap(), vec![c, HEAD]);
        for t in Template::ALL {
            assert_eq!(Template::parse(t.id()).unwrap(), t);
        }
        assert!(Template::parse("dog").is_err());
    }

    #[test]
    fn condition_embedding_contract() {
        let d = small();
        let null = d.null_condition();
        assert!(null.is_unconditional);
        assert_eq!(null.embedding.shape(), &[1, 64]);
        let a = d.embed_condition(&[PHOTO, HEAD, 6]).unwrap();
        assert!(!a.is_unconditional);
        assert_eq!(a, d.embed_condition(&[PHOTO, HEAD, 6]).unwrap());
        assert!(d.embed_condition(&[]).is_err());
        assert!(d.embed_condition(&[99]).is_err());
        assert!(d.embed_condition(&[PAD, PAD]).is_err());
        assert!(d.embed_condition(&[PHOTO; 9]).is_err());
    }

    #[test]
    fn predict_noise_shape_and_range() {
        let d = small();
        let z = Tensor::from_fn(&[2, 4, 8, 8], |i| (i as f32 * 0.37).sin());
        let c = d.template_condition(Template::HeadOfClass, 1).unwrap();
        let e = d.predict_noise(&z, 40.0, &c, 100).unwrap();
        assert_eq!(e.shape(), z.shape());
        assert!(e.is_finite());
        assert!(e.bitwise_eq(&d.predict_noise(&z, 40.0, &c, 100).unwrap()));
        assert!(d.predict_noise(&z, 0.0, &c, 100).is_err());
        assert!(d.predict_noise(&z, 100.5, &c, 100).is_err());
        assert!(d.predict_noise(&Tensor::zeros(&[1, 3, 8, 8]), 5.0, &c, 100).is_err());
    }

    #[test]
    fn padding_does_not_change_prediction() {
        let d = small();
        let z = Tensor::from_fn(&[1, 4, 8, 8], |i| (i as f32 * 0.11).cos());
        let short = d.embed_condition(&[class_token(0).unwrap()]).unwrap();
        let long = d.template_condition(Template::HeadOfClass, 2).unwrap();
        let alone = d.predict_noise(&z, 10.0, &short, 100).unwrap();
        let z2 = Tensor::stack0(&[z.clone(), z.clone()]).unwrap();
        let both = d.predict_noise_batch(&z2, &[10.0, 10.0], &[&short, &long], 100).unwrap();
        let diff = both.index0(0).unwrap().sub(&alone.index0(0).unwrap()).unwrap().max_abs();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn attention_rows_are_distributions() {
        let d = small();
        let z = Tensor::from_fn(&[1, 4, 8, 8], |i| (i as f32 * 0.05).sin());
        let probs = d.mid_attention_probs(&z, 30.0, &[PHOTO, PAD, 7]).unwrap();
        for row in probs.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert_eq!(row[1], 0.0);
        }
    }

    #[test]
    fn null_row_untouched_without_dropout() {
        let d = small();
        let sched = ScheduleConfig::default().build().unwrap();
        let z0 = Tensor::from_fn(&[2, 4, 8, 8], |i| (i as f32 * 0.3).sin());
        let eps = Tensor::from_fn(&[2, 4, 8, 8], |i| (i as f32 * 0.7).cos());
        let toks = vec![Template::HeadOfClass.tokens(0).unwrap(), Template::ClassOnly.tokens(3).unwrap()];
        let g = token_table_gradient(&d, &z0, &eps, &[20.0, 70.0], &toks, &sched).unwrap();
        let dt = 64;
        assert!(g.data()[NULL * dt..(NULL + 1) * dt].iter().all(|&v| v == 0.0));
        assert!(g.data()[PHOTO * dt..(PHOTO + 1) * dt].iter().any(|&v| v != 0.0));
    }
}
