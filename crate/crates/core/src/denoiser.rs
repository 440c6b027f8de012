//! The layer-collaborative noise-prediction network.
//!
//! Every layer of a sample runs through a shared U-shaped backbone (layers
//! are folded into the batch axis). At the attention resolutions each layer
//! first gets a standard transformer block conditioned on the global prompt,
//! then a layer-collaborative block: attention across the layer axis at each
//! pixel, cross-attention into that layer's enhanced prompt, and a gated
//! feed-forward. Nothing encodes a layer's position in the stack, so the
//! network is equivariant to permutations of the layers.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    timestep_embedding, Attention, Conv2d, FeedForward, GroupNorm, Init, InitKind, LayerNorm,
    Linear, ParamStore,
};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::textcond::{PromptTexts, TextEncoder, TextEncoderConfig, Vocabulary};

/// Image channels plus replicated mask channels per layer.
pub const LATENT_CHANNELS: usize = 6;

const CHECKPOINT_KIND: &str = "layerdiff";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub cond_dim: usize,
    pub max_layers: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub text_layers: usize,
    pub max_prompt_len: usize,
    /// Noise schedule the network is trained against.
    pub schedule: ScheduleConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            base_channels: 64,
            channel_mult: vec![1, 2, 4],
            attention_resolutions: vec![16, 8],
            heads: 4,
            cond_dim: 128,
            max_layers: 4,
            time_embed_dim: 256,
            norm_groups: 32,
            text_layers: 2,
            max_prompt_len: 16,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl DenoiserConfig {
    /// Tiny configuration used for gradient checks and fast tests.
    pub fn tiny(resolution: usize, channels: usize, heads: usize) -> Self {
        Self {
            resolution,
            base_channels: channels,
            channel_mult: vec![1, 2],
            attention_resolutions: vec![resolution / 2],
            heads,
            cond_dim: channels,
            max_layers: 4,
            time_embed_dim: 2 * channels,
            norm_groups: 4,
            text_layers: 1,
            max_prompt_len: 8,
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        if levels == 0 {
            return Err(Error::Invalid("channel_mult must not be empty".into()));
        }
        if self.resolution == 0 || self.resolution % (1 << (levels - 1)) != 0 {
            return Err(Error::Invalid(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution,
                levels - 1
            )));
        }
        if self.max_layers < 2 {
            return Err(Error::Invalid("max_layers must be at least 2".into()));
        }
        if self.heads == 0 {
            return Err(Error::Invalid("heads must be positive".into()));
        }
        for &m in &self.channel_mult {
            if (self.base_channels * m) % self.heads != 0 {
                return Err(Error::Invalid(format!(
                    "channels {} not divisible by {} heads",
                    self.base_channels * m,
                    self.heads
                )));
            }
        }
        if self.cond_dim % self.heads != 0 {
            return Err(Error::Invalid("cond_dim not divisible by heads".into()));
        }
        if self.time_embed_dim == 0 || self.max_prompt_len == 0 {
            return Err(Error::Invalid("time_embed_dim and max_prompt_len must be positive".into()));
        }
        NoiseSchedule::from_config(&self.schedule)?;
        Ok(())
    }

    pub fn text_config(&self) -> TextEncoderConfig {
        TextEncoderConfig {
            max_len: self.max_prompt_len,
            dim: self.cond_dim,
            layers: self.text_layers,
            heads: self.heads,
        }
    }
}

/// Encoded prompts for a batch: global `(B, S, D)`, layers `(B, L, S, D)`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub global: Tensor,
    pub layers: Tensor,
}

impl Conditioning {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.global.dim(0)?)
    }

    pub fn num_layers(&self) -> Result<usize> {
        Ok(self.layers.dim(1)?)
    }

    /// Concatenates two conditionings along the batch axis.
    pub fn cat(parts: &[&Conditioning]) -> Result<Conditioning> {
        let g: Vec<&Tensor> = parts.iter().map(|c| &c.global).collect();
        let l: Vec<&Tensor> = parts.iter().map(|c| &c.layers).collect();
        Ok(Conditioning {
            global: Tensor::cat(&g, 0)?,
            layers: Tensor::cat(&l, 0)?,
        })
    }
}

/// Self-attention across all layer-prompt tokens, then cross-attention from
/// layer tokens into the global prompt. Both residual, both starting at zero.
#[derive(Debug, Clone)]
pub struct PromptEnhancer {
    self_norm: LayerNorm,
    self_attn: Attention,
    cross_norm: LayerNorm,
    cross_attn: Attention,
}

impl PromptEnhancer {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            self_norm: LayerNorm::new(&mut init.pp("self_norm"), dim)?,
            self_attn: Attention::new(&mut init.pp("self_attn"), dim, dim, heads, true)?,
            cross_norm: LayerNorm::new(&mut init.pp("cross_norm"), dim)?,
            cross_attn: Attention::new(&mut init.pp("cross_attn"), dim, dim, heads, true)?,
        })
    }

    pub fn zero_init_weights(&self) -> Vec<&Tensor> {
        vec![self.self_attn.out_weight(), self.cross_attn.out_weight()]
    }

    /// `layers`: `(B, L, S, D)`; `global`: `(B, S, D)`. Returns `(B, L, S, D)`.
    pub fn enhance_layer_conditions(&self, layers: &Tensor, global: &Tensor) -> Result<Tensor> {
        let (b, l, s, d) = layers.dims4()?;
        let (gb, _, gd) = global.dims3()?;
        if gb != b || gd != d {
            return Err(Error::Shape(format!(
                "global condition {:?} does not match layer conditions {:?}",
                global.dims(),
                layers.dims()
            )));
        }
        let joint = layers.reshape((b, l * s, d))?;
        let joint = (&joint + self.self_attn.forward(&self.self_norm.forward(&joint)?, None)?)?;
        let per_layer = joint.reshape((b * l, s, d))?;
        let ctx = broadcast_per_layer(global, l)?;
        let out = (&per_layer
            + self
                .cross_attn
                .forward(&self.cross_norm.forward(&per_layer)?, Some(&ctx))?)?;
        Ok(out.reshape((b, l, s, d))?)
    }
}

/// `(B, S, D)` → `(B·L, S, D)` by repeating each sample's rows per layer.
fn broadcast_per_layer(t: &Tensor, layers: usize) -> Result<Tensor> {
    let (b, s, d) = t.dims3()?;
    Ok(t.unsqueeze(1)?
        .broadcast_as((b, layers, s, d))?
        .contiguous()?
        .reshape((b * layers, s, d))?)
}

fn to_tokens(h: &Tensor) -> Result<Tensor> {
    let (n, c, hh, ww) = h.dims4()?;
    Ok(h.reshape((n, c, hh * ww))?.transpose(1, 2)?.contiguous()?)
}

fn from_tokens(t: &Tensor, hh: usize, ww: usize) -> Result<Tensor> {
    let (n, _, c) = t.dims3()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((n, c, hh, ww))?)
}

/// Inter-layer attention, text-guided intra-layer attention and a
/// feed-forward, each residual with a zero-initialized final projection.
#[derive(Debug, Clone)]
pub struct LayerCollabBlock {
    inter_norm: LayerNorm,
    inter_attn: Attention,
    intra_norm: LayerNorm,
    intra_attn: Attention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

impl LayerCollabBlock {
    pub fn new(init: &mut Init, channels: usize, cond_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            inter_norm: LayerNorm::new(&mut init.pp("inter_norm"), channels)?,
            inter_attn: Attention::new(&mut init.pp("inter_attn"), channels, channels, heads, true)?,
            intra_norm: LayerNorm::new(&mut init.pp("intra_norm"), channels)?,
            intra_attn: Attention::new(&mut init.pp("intra_attn"), channels, cond_dim, heads, true)?,
            ff_norm: LayerNorm::new(&mut init.pp("ff_norm"), channels)?,
            ff: FeedForward::new(&mut init.pp("ff"), channels, true)?,
        })
    }

    pub fn zero_init_weights(&self) -> Vec<&Tensor> {
        vec![
            self.inter_attn.out_weight(),
            self.intra_attn.out_weight(),
            self.ff.out_weight(),
        ]
    }

    /// `hidden`: `(B·L, C, H, W)`. For each sample and pixel, attends over
    /// the `layers` feature vectors at that pixel.
    pub fn inter_layer_attend(&self, hidden: &Tensor, layers: usize) -> Result<Tensor> {
        let (n, c, hh, ww) = hidden.dims4()?;
        if layers == 0 || n % layers != 0 {
            return Err(Error::Shape(format!("{n} rows not divisible into {layers} layers")));
        }
        let b = n / layers;
        let tokens = to_tokens(hidden)?;
        let delta = self.inter_delta(&tokens, b, layers, hh * ww, c)?;
        from_tokens(&(tokens + delta)?, hh, ww)
    }

    fn inter_delta(&self, tokens: &Tensor, b: usize, l: usize, p: usize, c: usize) -> Result<Tensor> {
        let normed = self.inter_norm.forward(tokens)?;
        let across = normed
            .reshape((b, l, p, c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * p, l, c))?;
        let attended = self.inter_attn.forward(&across, None)?;
        Ok(attended
            .reshape((b, p, l, c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * l, p, c))?)
    }

    /// `hidden`: `(B·L, C, H, W)`; `conds`: `(B·L, S, D)` enhanced layer
    /// conditions, one per row of `hidden`.
    pub fn intra_layer_attend(&self, hidden: &Tensor, conds: &Tensor) -> Result<Tensor> {
        let (n, _, hh, ww) = hidden.dims4()?;
        if conds.dim(0)? != n {
            return Err(Error::Shape(format!(
                "{} layer conditions for {n} layer rows",
                conds.dim(0)?
            )));
        }
        let tokens = to_tokens(hidden)?;
        let delta = self
            .intra_attn
            .forward(&self.intra_norm.forward(&tokens)?, Some(conds))?;
        from_tokens(&(tokens + delta)?, hh, ww)
    }

    pub fn forward(&self, hidden: &Tensor, conds: &Tensor, layers: usize) -> Result<Tensor> {
        let (n, c, hh, ww) = hidden.dims4()?;
        let b = n / layers;
        let mut x = to_tokens(hidden)?;
        x = (&x + self.inter_delta(&x, b, layers, hh * ww, c)?)?;
        x = (&x + self.intra_attn.forward(&self.intra_norm.forward(&x)?, Some(conds))?)?;
        x = (&x + self.ff.forward(&self.ff_norm.forward(&x)?)?)?;
        from_tokens(&x, hh, ww)
    }
}

/// Standard transformer block: self-attention, cross-attention to the
/// global prompt, feed-forward; applied to each layer independently.
#[derive(Debug, Clone)]
struct GlobalAttentionBlock {
    norm: GroupNorm,
    proj_in: Linear,
    norm1: LayerNorm,
    attn1: Attention,
    norm2: LayerNorm,
    attn2: Attention,
    norm3: LayerNorm,
    ff: FeedForward,
    proj_out: Linear,
}

impl GlobalAttentionBlock {
    fn new(init: &mut Init, channels: usize, cond_dim: usize, heads: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut init.pp("norm"), channels, groups)?,
            proj_in: Linear::new(&mut init.pp("proj_in"), channels, channels, true)?,
            norm1: LayerNorm::new(&mut init.pp("norm1"), channels)?,
            attn1: Attention::new(&mut init.pp("attn1"), channels, channels, heads, false)?,
            norm2: LayerNorm::new(&mut init.pp("norm2"), channels)?,
            attn2: Attention::new(&mut init.pp("attn2"), channels, cond_dim, heads, false)?,
            norm3: LayerNorm::new(&mut init.pp("norm3"), channels)?,
            ff: FeedForward::new(&mut init.pp("ff"), channels, false)?,
            proj_out: Linear::new(&mut init.pp("proj_out"), channels, channels, true)?,
        })
    }

    fn forward(&self, h: &Tensor, global: &Tensor) -> Result<Tensor> {
        let (_, _, hh, ww) = h.dims4()?;
        let mut x = self.proj_in.forward(&to_tokens(&self.norm.forward(h)?)?)?;
        x = (&x + self.attn1.forward(&self.norm1.forward(&x)?, None)?)?;
        x = (&x + self.attn2.forward(&self.norm2.forward(&x)?, Some(global))?)?;
        x = (&x + self.ff.forward(&self.norm3.forward(&x)?)?)?;
        let x = self.proj_out.forward(&x)?;
        Ok((h + from_tokens(&x, hh, ww)?)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(init: &mut Init, in_ch: usize, out_ch: usize, temb: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut init.pp("norm1"), in_ch, groups)?,
            conv1: Conv2d::new(&mut init.pp("conv1"), in_ch, out_ch, 3, 1)?,
            time_proj: Linear::new(&mut init.pp("time_proj"), temb, out_ch, true)?,
            norm2: GroupNorm::new(&mut init.pp("norm2"), out_ch, groups)?,
            conv2: Conv2d::new(&mut init.pp("conv2"), out_ch, out_ch, 3, 1)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(&mut init.pp("skip"), in_ch, out_ch, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time_proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
struct AttentionStage {
    global: GlobalAttentionBlock,
    collab: LayerCollabBlock,
}

impl AttentionStage {
    fn new(init: &mut Init, channels: usize, cfg: &DenoiserConfig) -> Result<Self> {
        Ok(Self {
            global: GlobalAttentionBlock::new(
                &mut init.pp("global"),
                channels,
                cfg.cond_dim,
                cfg.heads,
                cfg.norm_groups,
            )?,
            collab: LayerCollabBlock::new(&mut init.pp("collab"), channels, cfg.cond_dim, cfg.heads)?,
        })
    }

    fn forward(&self, h: &Tensor, ctx: &StepContext) -> Result<Tensor> {
        let h = self.global.forward(h, &ctx.global)?;
        self.collab.forward(&h, &ctx.layer_conds, ctx.layers)
    }
}

struct StepContext {
    temb: Tensor,
    global: Tensor,
    layer_conds: Tensor,
    layers: usize,
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: Option<AttentionStage>,
}

#[derive(Debug, Clone)]
struct Unet {
    time_lin1: Linear,
    time_lin2: Linear,
    conv_in_image: Conv2d,
    conv_in_mask: Conv2d,
    mask_gate: Tensor,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid_res1: ResBlock,
    mid_attn: AttentionStage,
    mid_res2: ResBlock,
    up: Vec<Level>,
    upsample: Vec<Conv2d>,
    out_norm: GroupNorm,
    conv_out_image: Conv2d,
    conv_out_mask: Conv2d,
}

impl Unet {
    fn new(init: &mut Init, cfg: &DenoiserConfig) -> Result<Self> {
        let c0 = cfg.base_channels;
        let chans: Vec<usize> = cfg.channel_mult.iter().map(|m| m * c0).collect();
        let n = chans.len();
        let temb = cfg.time_embed_dim;
        let g = cfg.norm_groups;
        let time_lin1 = Linear::new(&mut init.pp("time.lin1"), c0, temb, true)?;
        let time_lin2 = Linear::new(&mut init.pp("time.lin2"), temb, temb, true)?;
        let conv_in_image = Conv2d::new(&mut init.pp("conv_in_image"), 3, c0, 3, 1)?;
        let conv_in_mask = Conv2d::copy_from(&mut init.pp("conv_in_mask"), &conv_in_image)?;
        let mask_gate = init.tensor("mask_gate", &[1], InitKind::Zeros)?;

        let attn_at = |level: usize| {
            cfg.attention_resolutions
                .contains(&(cfg.resolution >> level))
        };
        let mut down = Vec::with_capacity(n);
        let mut downsample = Vec::new();
        let mut ch = c0;
        for (i, &out) in chans.iter().enumerate() {
            let mut li = init.pp(format!("down.{i}"));
            let res = ResBlock::new(&mut li.pp("res"), ch, out, temb, g)?;
            let attn = if attn_at(i) {
                Some(AttentionStage::new(&mut li.pp("attn"), out, cfg)?)
            } else {
                None
            };
            down.push(Level { res, attn });
            ch = out;
            if i + 1 < n {
                downsample.push(Conv2d::new(&mut li.pp("downsample"), ch, ch, 3, 2)?);
            }
        }
        let mid_res1 = ResBlock::new(&mut init.pp("mid.res1"), ch, ch, temb, g)?;
        let mid_attn = AttentionStage::new(&mut init.pp("mid.attn"), ch, cfg)?;
        let mid_res2 = ResBlock::new(&mut init.pp("mid.res2"), ch, ch, temb, g)?;

        let mut up = Vec::with_capacity(n);
        let mut upsample = Vec::new();
        for i in (0..n).rev() {
            let mut li = init.pp(format!("up.{i}"));
            let out = chans[i];
            let res = ResBlock::new(&mut li.pp("res"), ch + out, out, temb, g)?;
            let attn = if attn_at(i) {
                Some(AttentionStage::new(&mut li.pp("attn"), out, cfg)?)
            } else {
                None
            };
            up.push(Level { res, attn });
            ch = out;
            if i > 0 {
                upsample.push(Conv2d::new(&mut li.pp("upsample"), ch, ch, 3, 1)?);
            }
        }
        let out_norm = GroupNorm::new(&mut init.pp("out_norm"), ch, g)?;
        let conv_out_image = Conv2d::new(&mut init.pp("conv_out_image"), ch, 3, 3, 1)?;
        let conv_out_mask = Conv2d::copy_from(&mut init.pp("conv_out_mask"), &conv_out_image)?;
        Ok(Self {
            time_lin1,
            time_lin2,
            conv_in_image,
            conv_in_mask,
            mask_gate,
            down,
            downsample,
            mid_res1,
            mid_attn,
            mid_res2,
            up,
            upsample,
            out_norm,
            conv_out_image,
            conv_out_mask,
        })
    }

    fn attention_stages(&self) -> impl Iterator<Item = &AttentionStage> {
        self.down
            .iter()
            .chain(self.up.iter())
            .filter_map(|l| l.attn.as_ref())
            .chain(std::iter::once(&self.mid_attn))
    }

    fn forward(&self, x: &Tensor, ctx: &StepContext) -> Result<Tensor> {
        let image = x.narrow(1, 0, 3)?;
        let mask = x.narrow(1, 3, 3)?;
        let mask_feat = self
            .conv_in_mask
            .forward(&mask)?
            .broadcast_mul(&self.mask_gate.reshape((1, 1, 1, 1))?)?;
        let mut h = (self.conv_in_image.forward(&image)? + mask_feat)?;

        let mut skips = Vec::with_capacity(self.down.len());
        for (i, level) in self.down.iter().enumerate() {
            h = level.res.forward(&h, &ctx.temb)?;
            if let Some(a) = &level.attn {
                h = a.forward(&h, ctx)?;
            }
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid_res1.forward(&h, &ctx.temb)?;
        h = self.mid_attn.forward(&h, ctx)?;
        h = self.mid_res2.forward(&h, &ctx.temb)?;
        for (j, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = level.res.forward(&h, &ctx.temb)?;
            if let Some(a) = &level.attn {
                h = a.forward(&h, ctx)?;
            }
            if let Some(us) = self.upsample.get(j) {
                h = us.forward(&upsample2x(&h)?)?;
            }
        }
        let h = self.out_norm.forward(&h)?.silu()?;
        Ok(Tensor::cat(
            &[
                &self.conv_out_image.forward(&h)?,
                &self.conv_out_mask.forward(&h)?,
            ],
            1,
        )?)
    }
}

/// Nearest-neighbour 2× upsampling via broadcasting.
fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// Text encoder, prompt enhancer and denoising backbone with their
/// parameters.
#[derive(Debug, Clone)]
pub struct LayerDiffModel {
    config: DenoiserConfig,
    params: ParamStore,
    text: TextEncoder,
    enhancer: PromptEnhancer,
    unet: Unet,
}

impl LayerDiffModel {
    /// Fan-in random initialization everywhere except the zero-initialized
    /// output projections of the collaborative blocks and prompt enhancer,
    /// and the mask-injection gate. Mask input/output convolutions start as
    /// copies of the image convolutions.
    pub fn init(config: DenoiserConfig, vocab: Vocabulary, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = Init::new(&mut params, &mut rng);
        let text = TextEncoder::new(&mut root.pp("text"), vocab, config.text_config())?;
        let enhancer = PromptEnhancer::new(&mut root.pp("enhancer"), config.cond_dim, config.heads)?;
        let unet = Unet::new(&mut root.pp("unet"), &config)?;
        Ok(Self {
            config,
            params,
            text,
            enhancer,
            unet,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(&self.config.schedule)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.text.vocab()
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn enhancer(&self) -> &PromptEnhancer {
        &self.enhancer
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn mask_gate(&self) -> &Tensor {
        &self.unet.mask_gate
    }

    /// Collaborative blocks in backbone order (down, up, mid).
    pub fn collab_blocks(&self) -> Vec<&LayerCollabBlock> {
        self.unet.attention_stages().map(|s| &s.collab).collect()
    }

    /// Every output projection that must start at zero.
    pub fn zero_init_weights(&self) -> Vec<&Tensor> {
        let mut out = self.enhancer.zero_init_weights();
        for stage in self.unet.attention_stages() {
            out.extend(stage.collab.zero_init_weights());
        }
        out
    }

    /// Encodes positive (or negative) prompt sets; all entries must share a
    /// layer count.
    pub fn encode(&self, batch: &[&PromptTexts]) -> Result<Conditioning> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Invalid("empty prompt batch".into()))?;
        let l = first.layers.len();
        if batch.iter().any(|p| p.layers.len() != l) {
            return Err(Error::Shape("prompt sets differ in layer count".into()));
        }
        let mut texts: Vec<&str> = batch.iter().map(|p| p.global.as_str()).collect();
        for p in batch {
            texts.extend(p.layers.iter().map(String::as_str));
        }
        let enc = self.text.encode_batch(&texts)?;
        let b = batch.len();
        let (_, s, d) = enc.dims3()?;
        Ok(Conditioning {
            global: enc.narrow(0, 0, b)?,
            layers: enc.narrow(0, b, b * l)?.reshape((b, l, s, d))?,
        })
    }

    /// Predicts image and mask noise for every layer.
    ///
    /// `x`: `(B, L, 6, H, W)`; `timesteps`: `B` rows of `L` timesteps.
    /// Returns a tensor shaped like `x`.
    pub fn predict_noise(&self, x: &Tensor, timesteps: &[Vec<usize>], cond: &Conditioning) -> Result<Tensor> {
        let (b, l, c, h, w) = x.dims5()?;
        if c != LATENT_CHANNELS {
            return Err(Error::Shape(format!("expected {LATENT_CHANNELS} channels, got {c}")));
        }
        if l < 1 || l > self.config.max_layers {
            return Err(Error::Shape(format!(
                "layer count {l} outside [1, {}]",
                self.config.max_layers
            )));
        }
        let levels = self.config.channel_mult.len();
        if h % (1 << (levels - 1)) != 0 || w % (1 << (levels - 1)) != 0 {
            return Err(Error::Shape(format!("spatial size {h}x{w} not divisible by 2^{}", levels - 1)));
        }
        if timesteps.len() != b || timesteps.iter().any(|r| r.len() != l) {
            return Err(Error::Shape("timesteps must be B rows of L entries".into()));
        }
        if cond.batch()? != b || cond.num_layers()? != l {
            return Err(Error::Shape(format!(
                "conditioning is for {}x{} but input is {b}x{l}",
                cond.batch()?,
                cond.num_layers()?
            )));
        }
        let flat_t: Vec<usize> = timesteps.iter().flatten().copied().collect();
        let temb = timestep_embedding(&flat_t, self.config.base_channels, self.dtype(), self.device())?;
        let temb = self
            .unet
            .time_lin2
            .forward(&self.unet.time_lin1.forward(&temb)?.silu()?)?;

        let enhanced = self.enhancer.enhance_layer_conditions(&cond.layers, &cond.global)?;
        let (_, _, s, d) = enhanced.dims4()?;
        let ctx = StepContext {
            temb,
            global: broadcast_per_layer(&cond.global, l)?,
            layer_conds: enhanced.reshape((b * l, s, d))?,
            layers: l,
        };
        let flat = x.reshape((b * l, c, h, w))?;
        let out = self.unet.forward(&flat, &ctx)?;
        Ok(out.reshape((b, l, c, h, w))?)
    }

    /// Mean squared error between predicted and injected noise over image
    /// and mask channels of every layer.
    pub fn loss(&self, x_t: &Tensor, timesteps: &[Vec<usize>], cond: &Conditioning, eps: &Tensor) -> Result<Tensor> {
        let pred = self.predict_noise(x_t, timesteps, cond)?;
        Ok((pred - eps)?.sqr()?.mean_all()?)
    }

    /// Writes the checkpoint container plus a `vocab.json` next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config)?,
            serde_json::to_value(self.vocab())?,
            &self.params,
        )?;
        let vocab_path = path.with_file_name("vocab.json");
        self.vocab().save_json(&vocab_path)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        if loaded.header.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected kind {CHECKPOINT_KIND}, found {}", loaded.header.kind),
            });
        }
        let config: DenoiserConfig = serde_json::from_value(loaded.header.config.clone())?;
        let vocab: Vocabulary = serde_json::from_value(loaded.header.extra.clone())?;
        let model = Self::init(config, vocab, 0, dtype)?;
        loaded.restore_into(&model.params)?;
        Ok(model)
    }

    /// Replaces every parameter with a draw from `N(0, std²)` added to its
    /// current value, including zero-initialized ones. Test helper for
    /// exercising all paths.
    pub fn perturb_all(&self, std: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, var) in self.params.iter() {
            let n = var.elem_count();
            let noise: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    z * std
                })
                .collect();
            let noise = Tensor::from_vec(noise, var.dims(), self.device())?.to_dtype(self.dtype())?;
            self.params.set(name, &(var.as_tensor() + noise)?)?;
        }
        Ok(())
    }
}

/// Fails if any element is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}
