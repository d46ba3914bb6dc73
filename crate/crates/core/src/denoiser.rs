//! The U-Net noise predictor with enumerable decoder readout locations.
//!
//! Encoder stages of residual blocks with stride-2 downsampling, a
//! bottleneck, and decoder stages that concatenate encoder skips. A single
//! self-attention module sits at the configured resolution, after the last
//! residual block of that stage in both encoder and decoder. Decoder readouts
//! are indexed (r, b) with r = 1 at the lowest resolution and flattened as
//! ell = B*(r-1) + b.

use crate::error::{Error, Result};
use crate::nn::layers::{
    attention_backward, attention_forward, conv2d_backward, conv2d_forward, group_norm_backward,
    group_norm_forward, linear_backward, linear_forward, silu_backward, silu_forward,
    time_embedding, upsample_nearest2_backward, upsample_nearest2_forward, AttentionCtx,
    AttentionParams, ConvCtx, GroupNormCtx, LinearCtx, SiluCtx,
};
use crate::nn::params::{Checkpoint, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    #[serde(default = "default_encoder_blocks")]
    pub encoder_blocks_per_stage: usize,
    #[serde(default = "default_bottleneck_blocks")]
    pub bottleneck_blocks: usize,
    #[serde(default = "default_decoder_blocks")]
    pub decoder_blocks_per_stage: usize,
    /// Resolutions (feature-map side lengths) that carry self-attention.
    pub attention_stages: Vec<usize>,
    #[serde(default = "default_groups")]
    pub groups: usize,
    pub time_embed_dim: usize,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
}

fn default_in_channels() -> usize {
    1
}
fn default_encoder_blocks() -> usize {
    2
}
fn default_bottleneck_blocks() -> usize {
    2
}
fn default_decoder_blocks() -> usize {
    3
}
fn default_groups() -> usize {
    16
}
fn default_heads() -> usize {
    1
}

impl DenoiserConfig {
    /// Reference configuration: 128x128 inputs, widths 64-128-256-512,
    /// attention at the 16x16 stage.
    pub fn paper() -> Self {
        DenoiserConfig {
            image_size: 128,
            in_channels: 1,
            stage_channels: vec![64, 128, 256, 512],
            encoder_blocks_per_stage: 2,
            bottleneck_blocks: 2,
            decoder_blocks_per_stage: 3,
            attention_stages: vec![16],
            groups: 16,
            time_embed_dim: 256,
            attention_heads: 1,
        }
    }

    /// Desk-scale configuration: 32x32 inputs, widths 32-64-96-128,
    /// attention at the lowest (4x4) stage.
    pub fn desk() -> Self {
        DenoiserConfig {
            image_size: 32,
            in_channels: 1,
            stage_channels: vec![32, 64, 96, 128],
            encoder_blocks_per_stage: 2,
            bottleneck_blocks: 2,
            decoder_blocks_per_stage: 3,
            attention_stages: vec![4],
            groups: 16,
            time_embed_dim: 128,
            attention_heads: 1,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Feature-map side length at encoder stage `i` (0 = full resolution).
    pub fn resolution(&self, stage: usize) -> usize {
        self.image_size >> stage
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_stages();
        if n < 2 {
            return Err(Error::config("need at least 2 stages"));
        }
        if self.image_size % (1 << (n - 1)) != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                n - 1
            )));
        }
        if self.resolution(n - 1) < 1 {
            return Err(Error::config("lowest stage resolution underflows"));
        }
        let realized: Vec<usize> = (0..n).map(|i| self.resolution(i)).collect();
        for a in &self.attention_stages {
            if !realized.contains(a) {
                return Err(Error::config(format!(
                    "attention stage {a} not among realized resolutions {realized:?}"
                )));
            }
        }
        if self.decoder_blocks_per_stage != self.encoder_blocks_per_stage + 1 {
            return Err(Error::config(
                "decoder blocks per stage must be encoder blocks per stage + 1 \
                 so skip connections balance",
            ));
        }
        if self.bottleneck_blocks < 1 {
            return Err(Error::config("need at least one bottleneck block"));
        }
        for &c in &self.stage_channels {
            if self.groups == 0 || c % self.groups != 0 {
                return Err(Error::config(format!(
                    "groups {} must divide stage width {c}",
                    self.groups
                )));
            }
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even and >= 4"));
        }
        for &c in &self.stage_channels {
            if self.attention_heads == 0 || c % self.attention_heads != 0 {
                return Err(Error::config(format!(
                    "attention heads {} must divide stage width {c}",
                    self.attention_heads
                )));
            }
        }
        Ok(())
    }

    fn has_attention_at(&self, resolution: usize) -> bool {
        self.attention_stages.contains(&resolution)
    }

    /// The (ell, r, b, channels, resolution) table of decoder readouts.
    pub fn readout_table(&self) -> Vec<ReadoutInfo> {
        let n = self.n_stages();
        let blocks = self.decoder_blocks_per_stage;
        let mut out = Vec::with_capacity(n * blocks);
        for r in 1..=n {
            let channels = self.stage_channels[n - r];
            let resolution = self.resolution(n - r);
            for b in 1..=blocks {
                let id = ReadoutId { stage: r, block: b };
                out.push(ReadoutInfo {
                    ell: id.ell(blocks),
                    id,
                    channels,
                    resolution,
                });
            }
        }
        out
    }
}

/// Decoder readout location: stage r (1 = lowest resolution) and residual
/// block b within the stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReadoutId {
    pub stage: usize,
    pub block: usize,
}

impl ReadoutId {
    pub fn new(stage: usize, block: usize) -> Self {
        ReadoutId { stage, block }
    }

    /// Flat index ell = blocks_per_stage * (r - 1) + b.
    pub fn ell(&self, blocks_per_stage: usize) -> usize {
        blocks_per_stage * (self.stage - 1) + self.block
    }

    pub fn from_ell(ell: usize, blocks_per_stage: usize) -> Result<Self> {
        if ell == 0 {
            return Err(Error::Index("readout ell starts at 1".into()));
        }
        let stage = (ell - 1) / blocks_per_stage + 1;
        let block = (ell - 1) % blocks_per_stage + 1;
        Ok(ReadoutId { stage, block })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadoutInfo {
    pub id: ReadoutId,
    pub ell: usize,
    pub channels: usize,
    pub resolution: usize,
}

/// A tapped decoder activation.
#[derive(Debug, Clone)]
pub struct FeatureTensor<S> {
    pub readout: ReadoutId,
    pub values: Tensor<S>, // (C, H, W)
}

// ---------------------------------------------------------------------------
// Parameter wiring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    scale: ParamId,
    shift: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ResBlockIds {
    gn1: NormIds,
    conv1: ConvIds,
    temb: ConvIds, // linear: w (out_ch x D), b (out_ch)
    gn2: NormIds,
    conv2: ConvIds,
    skip: Option<ConvIds>,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    gn: NormIds,
    wq: ConvIds,
    wk: ConvIds,
    wv: ConvIds,
    wo: ConvIds,
}

#[derive(Debug, Clone)]
struct EncStageIds {
    blocks: Vec<ResBlockIds>,
    attn: Option<AttnIds>,
    down: Option<ConvIds>,
}

#[derive(Debug, Clone)]
struct DecStageIds {
    blocks: Vec<ResBlockIds>,
    attn: Option<AttnIds>,
    up: Option<ConvIds>,
}

#[derive(Debug, Clone)]
struct Arch {
    stem: ConvIds,
    temb_lin1: ConvIds,
    temb_lin2: ConvIds,
    enc: Vec<EncStageIds>,
    mid: Vec<ResBlockIds>,
    mid_attn: Option<AttnIds>,
    dec: Vec<DecStageIds>,
    head_gn: NormIds,
    head_conv: ConvIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Trainable,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Live,
    Ema,
}

pub struct UNet<S> {
    pub config: DenoiserConfig,
    pub params: ParamStore<S>,
    arch: Arch,
    mode: Mode,
    forward_passes: AtomicU64,
}

struct Builder<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a, S: Scalar> Builder<'a, S> {
    fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let numel: usize = shape.iter().product();
        let data: Vec<S> = (0..numel)
            .map(|_| S::from_f64(self.rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Tensor::from_vec(shape, data).expect("shape consistent")
    }

    fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize, zero: bool) -> Result<ConvIds> {
        let fan_in = (in_ch * k * k) as f64;
        let w = if zero {
            Tensor::zeros(&[out_ch, in_ch, k, k])
        } else {
            self.normal_tensor(&[out_ch, in_ch, k, k], 1.0 / fan_in.sqrt())
        };
        Ok(ConvIds {
            w: self.store.register(&format!("{name}.w"), w)?,
            b: self.store.register(&format!("{name}.b"), Tensor::zeros(&[out_ch]))?,
        })
    }

    fn linear(&mut self, name: &str, out_dim: usize, in_dim: usize) -> Result<ConvIds> {
        let w = self.normal_tensor(&[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt());
        Ok(ConvIds {
            w: self.store.register(&format!("{name}.w"), w)?,
            b: self.store.register(&format!("{name}.b"), Tensor::zeros(&[out_dim]))?,
        })
    }

    fn norm(&mut self, name: &str, channels: usize) -> Result<NormIds> {
        Ok(NormIds {
            scale: self
                .store
                .register(&format!("{name}.scale"), Tensor::filled(&[channels], S::ONE))?,
            shift: self
                .store
                .register(&format!("{name}.shift"), Tensor::zeros(&[channels]))?,
        })
    }

    fn resblock(&mut self, name: &str, in_ch: usize, out_ch: usize, temb_dim: usize) -> Result<ResBlockIds> {
        Ok(ResBlockIds {
            gn1: self.norm(&format!("{name}.gn1"), in_ch)?,
            conv1: self.conv(&format!("{name}.conv1"), out_ch, in_ch, 3, false)?,
            temb: self.linear(&format!("{name}.temb"), out_ch, temb_dim)?,
            gn2: self.norm(&format!("{name}.gn2"), out_ch)?,
            conv2: self.conv(&format!("{name}.conv2"), out_ch, out_ch, 3, false)?,
            skip: if in_ch != out_ch {
                Some(self.conv(&format!("{name}.skip"), out_ch, in_ch, 1, false)?)
            } else {
                None
            },
        })
    }

    fn attn(&mut self, name: &str, channels: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            gn: self.norm(&format!("{name}.gn"), channels)?,
            wq: self.linear(&format!("{name}.q"), channels, channels)?,
            wk: self.linear(&format!("{name}.k"), channels, channels)?,
            wv: self.linear(&format!("{name}.v"), channels, channels)?,
            wo: self.linear(&format!("{name}.proj"), channels, channels)?,
        })
    }
}

impl<S: Scalar> UNet<S> {
    pub fn build(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: rng::stream(seed, "denoiser-init", &[]),
        };
        let n = config.n_stages();
        let ch = &config.stage_channels;
        let d = config.time_embed_dim;

        let stem = b.conv("stem", ch[0], config.in_channels, 3, false)?;
        let temb_lin1 = b.linear("temb.lin1", d, ch[0])?;
        let temb_lin2 = b.linear("temb.lin2", d, d)?;

        // Mirror of the forward pass skip stack, tracking channel counts.
        let mut skip_ch: Vec<usize> = vec![ch[0]];

        let mut enc = Vec::with_capacity(n);
        let mut cur = ch[0];
        for i in 0..n {
            let res = config.resolution(i);
            let mut blocks = Vec::new();
            for bi in 0..config.encoder_blocks_per_stage {
                blocks.push(b.resblock(&format!("enc.s{i}.rb{bi}"), cur, ch[i], d)?);
                cur = ch[i];
                skip_ch.push(cur);
            }
            let attn = if config.has_attention_at(res) {
                Some(b.attn(&format!("enc.s{i}.attn"), cur)?)
            } else {
                None
            };
            let down = if i < n - 1 {
                let ids = b.conv(&format!("enc.s{i}.down"), cur, cur, 3, false)?;
                skip_ch.push(cur);
                Some(ids)
            } else {
                None
            };
            enc.push(EncStageIds { blocks, attn, down });
        }

        let mut mid = Vec::new();
        for bi in 0..config.bottleneck_blocks {
            mid.push(b.resblock(&format!("mid.rb{bi}"), cur, cur, d)?);
        }
        let mid_attn = if config.has_attention_at(config.resolution(n - 1)) {
            Some(b.attn("mid.attn", cur)?)
        } else {
            None
        };

        let mut dec = Vec::with_capacity(n);
        for r in 1..=n {
            let stage_idx = n - r;
            let res = config.resolution(stage_idx);
            let target = ch[stage_idx];
            let mut blocks = Vec::new();
            for bi in 0..config.decoder_blocks_per_stage {
                let sc = skip_ch.pop().ok_or_else(|| {
                    Error::contract("skip stack underflow while building the decoder")
                })?;
                blocks.push(b.resblock(&format!("dec.r{r}.rb{bi}"), cur + sc, target, d)?);
                cur = target;
            }
            let attn = if config.has_attention_at(res) {
                Some(b.attn(&format!("dec.r{r}.attn"), cur)?)
            } else {
                None
            };
            let up = if r < n {
                Some(b.conv(&format!("dec.r{r}.up"), cur, cur, 3, false)?)
            } else {
                None
            };
            dec.push(DecStageIds { blocks, attn, up });
        }
        if !skip_ch.is_empty() {
            return Err(Error::contract(format!(
                "{} skip connections left unconsumed",
                skip_ch.len()
            )));
        }

        let head_gn = b.norm("head.gn", ch[0])?;
        // Zero-initialized output projection: the untrained denoiser predicts 0.
        let head_conv = b.conv("head.conv", config.in_channels, ch[0], 3, true)?;

        Ok(UNet {
            config,
            params: store,
            arch: Arch {
                stem,
                temb_lin1,
                temb_lin2,
                enc,
                mid,
                mid_attn,
                dec,
                head_gn,
                head_conv,
            },
            mode: Mode::Trainable,
            forward_passes: AtomicU64::new(0),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn forward_pass_count(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Parameter count derived by arithmetic over the configuration alone.
    pub fn analytic_param_count(config: &DenoiserConfig) -> Result<usize> {
        config.validate()?;
        let n = config.n_stages();
        let ch = &config.stage_channels;
        let d = config.time_embed_dim;
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let lin = |o: usize, i: usize| o * i + o;
        let norm = |c: usize| 2 * c;
        let res = |i: usize, o: usize| {
            norm(i) + conv(o, i, 3) + lin(o, d) + norm(o) + conv(o, o, 3)
                + if i != o { conv(o, i, 1) } else { 0 }
        };
        let attn = |c: usize| norm(c) + 4 * lin(c, c);

        let mut total = conv(ch[0], config.in_channels, 3); // stem
        total += lin(d, ch[0]) + lin(d, d); // time MLP

        let mut skip_ch: Vec<usize> = vec![ch[0]];
        let mut cur = ch[0];
        for i in 0..n {
            for _ in 0..config.encoder_blocks_per_stage {
                total += res(cur, ch[i]);
                cur = ch[i];
                skip_ch.push(cur);
            }
            if config.has_attention_at(config.resolution(i)) {
                total += attn(cur);
            }
            if i < n - 1 {
                total += conv(cur, cur, 3);
                skip_ch.push(cur);
            }
        }
        for _ in 0..config.bottleneck_blocks {
            total += res(cur, cur);
        }
        if config.has_attention_at(config.resolution(n - 1)) {
            total += attn(cur);
        }
        for r in 1..=n {
            let target = ch[n - r];
            for _ in 0..config.decoder_blocks_per_stage {
                let sc = skip_ch.pop().expect("validated skip balance");
                total += res(cur + sc, target);
                cur = target;
            }
            if config.has_attention_at(config.resolution(n - r)) {
                total += attn(cur);
            }
            if r < n {
                total += conv(cur, cur, 3);
            }
        }
        total += norm(ch[0]) + conv(config.in_channels, ch[0], 3);
        Ok(total)
    }

    /// Rebuilds a network from a checkpoint, loading either live or EMA
    /// weights.
    pub fn from_checkpoint(ck: &Checkpoint, which: WeightKind) -> Result<UNet<f32>> {
        let config: DenoiserConfig = serde_json::from_value(
            ck.config
                .get("model")
                .cloned()
                .ok_or_else(|| Error::contract("checkpoint config lacks a 'model' section"))?,
        )
        .map_err(|e| Error::contract(format!("checkpoint model config: {e}")))?;
        let mut net = UNet::<f32>::build(config, 0)?;
        let prefix = match which {
            WeightKind::Live => "live/",
            WeightKind::Ema => "ema/",
        };
        for id in net.params.ids().collect::<Vec<_>>() {
            let name = format!("{}{}", prefix, net.params.name(id));
            let tensor = ck.tensor(&name).ok_or_else(|| {
                Error::contract(format!("checkpoint missing parameter '{name}'"))
            })?;
            if tensor.shape() != net.params.value(id).shape() {
                return Err(Error::Shape {
                    context: format!("checkpoint parameter '{name}'"),
                    expected: format!("{:?}", net.params.value(id).shape()),
                    got: format!("{:?}", tensor.shape()),
                });
            }
            *net.params.value_mut(id) = tensor.clone();
        }
        Ok(net)
    }

    /// A frozen copy whose live weights are the EMA shadow.
    pub fn ema_snapshot(&self) -> UNet<S> {
        UNet {
            config: self.config.clone(),
            params: self.params.ema_snapshot(),
            arch: self.arch.clone(),
            mode: Mode::Frozen,
            forward_passes: AtomicU64::new(0),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct ResBlockTape<S> {
    ids: ResBlockIds,
    gn1: GroupNormCtx<S>,
    silu1: SiluCtx<S>,
    conv1: ConvCtx<S>,
    temb: LinearCtx<S>,
    gn2: GroupNormCtx<S>,
    silu2: SiluCtx<S>,
    conv2: ConvCtx<S>,
    skip: Option<ConvCtx<S>>,
}

struct AttnTape<S> {
    ids: AttnIds,
    ctx: AttentionCtx<S>,
}

struct UpTape<S> {
    pre_shape: Vec<usize>,
    conv: ConvCtx<S>,
    ids: ConvIds,
}

struct EncStageTape<S> {
    blocks: Vec<ResBlockTape<S>>,
    attn: Option<AttnTape<S>>,
    down: Option<(ConvCtx<S>, ConvIds)>,
}

struct DecBlockTape<S> {
    tape: ResBlockTape<S>,
    h_ch: usize,
    skip_ch: usize,
}

struct DecStageTape<S> {
    blocks: Vec<DecBlockTape<S>>,
    attn: Option<AttnTape<S>>,
    up: Option<UpTape<S>>,
}

pub struct UnetTape<S> {
    temb_lin1: LinearCtx<S>,
    temb_silu1: SiluCtx<S>,
    temb_lin2: LinearCtx<S>,
    temb_act: SiluCtx<S>,
    stem: ConvCtx<S>,
    enc: Vec<EncStageTape<S>>,
    mid: Vec<ResBlockTape<S>>,
    mid_attn: Option<AttnTape<S>>,
    dec: Vec<DecStageTape<S>>,
    head_gn: GroupNormCtx<S>,
    head_silu: SiluCtx<S>,
    head_conv: ConvCtx<S>,
}

fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let [ca, h, w] = *a.shape() else { unreachable!() };
    let [cb, hb, wb] = *b.shape() else { unreachable!() };
    debug_assert_eq!((h, w), (hb, wb));
    let mut out = Tensor::zeros(&[ca + cb, h, w]);
    out.data_mut()[..ca * h * w].copy_from_slice(a.data());
    out.data_mut()[ca * h * w..].copy_from_slice(b.data());
    out
}

impl<S: Scalar> UNet<S> {
    fn attn_params<'a>(&'a self, ids: &AttnIds) -> AttentionParams<'a, S> {
        AttentionParams {
            gn_scale: self.params.value(ids.gn.scale),
            gn_shift: self.params.value(ids.gn.shift),
            groups: self.config.groups,
            wq: self.params.value(ids.wq.w),
            bq: self.params.value(ids.wq.b),
            wk: self.params.value(ids.wk.w),
            bk: self.params.value(ids.wk.b),
            wv: self.params.value(ids.wv.w),
            bv: self.params.value(ids.wv.b),
            wo: self.params.value(ids.wo.w),
            bo: self.params.value(ids.wo.b),
        }
    }

    fn resblock_forward(
        &self,
        ids: &ResBlockIds,
        x: &Tensor<S>,
        temb_act: &Tensor<S>,
    ) -> Result<(Tensor<S>, ResBlockTape<S>)> {
        let p = &self.params;
        let (a, gn1) = group_norm_forward(
            x,
            p.value(ids.gn1.scale),
            p.value(ids.gn1.shift),
            self.config.groups,
        )?;
        let (b, silu1) = silu_forward(&a);
        let (mut c, conv1) = conv2d_forward(&b, p.value(ids.conv1.w), p.value(ids.conv1.b), 1)?;
        let (tb, temb) = linear_forward(temb_act, p.value(ids.temb.w), p.value(ids.temb.b))?;
        let [out_ch, hh, ww] = *c.shape() else { unreachable!() };
        for chn in 0..out_ch {
            let bias = tb.data()[chn];
            for v in &mut c.data_mut()[chn * hh * ww..(chn + 1) * hh * ww] {
                *v += bias;
            }
        }
        let (dd, gn2) = group_norm_forward(
            &c,
            p.value(ids.gn2.scale),
            p.value(ids.gn2.shift),
            self.config.groups,
        )?;
        let (e, silu2) = silu_forward(&dd);
        let (mut f, conv2) = conv2d_forward(&e, p.value(ids.conv2.w), p.value(ids.conv2.b), 1)?;
        let skip_ctx = match &ids.skip {
            Some(sk) => {
                let (s, ctx) = conv2d_forward(x, p.value(sk.w), p.value(sk.b), 1)?;
                f.add_assign(&s);
                Some(ctx)
            }
            None => {
                f.add_assign(x);
                None
            }
        };
        Ok((
            f,
            ResBlockTape {
                ids: *ids,
                gn1,
                silu1,
                conv1,
                temb,
                gn2,
                silu2,
                conv2,
                skip: skip_ctx,
            },
        ))
    }

    /// Returns (d_input, d_temb_act) and accumulates parameter gradients.
    fn resblock_backward(&mut self, tape: &ResBlockTape<S>, dy: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let ids = &tape.ids;
        let w2 = self.params.value(ids.conv2.w).clone();
        let (d_e, dw2, db2) = conv2d_backward(&tape.conv2, &w2, dy);
        self.params.accumulate_grad(ids.conv2.w, &dw2);
        self.params.accumulate_grad(ids.conv2.b, &db2);
        let d_d = silu_backward(&tape.silu2, &d_e);
        let g2 = self.params.value(ids.gn2.scale).clone();
        let (d_c, dgn2s, dgn2b) = group_norm_backward(&tape.gn2, &g2, &d_d);
        self.params.accumulate_grad(ids.gn2.scale, &dgn2s);
        self.params.accumulate_grad(ids.gn2.shift, &dgn2b);

        // Per-channel time bias: gradient is the spatial sum per channel.
        let [out_ch, hh, ww] = *d_c.shape() else { unreachable!() };
        let mut d_tb = Tensor::zeros(&[out_ch]);
        for chn in 0..out_ch {
            let mut acc = S::ZERO;
            for &v in &d_c.data()[chn * hh * ww..(chn + 1) * hh * ww] {
                acc += v;
            }
            d_tb.data_mut()[chn] = acc;
        }
        let wt = self.params.value(ids.temb.w).clone();
        let (d_temb_act, dwt, dbt) = linear_backward(&tape.temb, &wt, &d_tb);
        self.params.accumulate_grad(ids.temb.w, &dwt);
        self.params.accumulate_grad(ids.temb.b, &dbt);

        let w1 = self.params.value(ids.conv1.w).clone();
        let (d_b, dw1, db1) = conv2d_backward(&tape.conv1, &w1, &d_c);
        self.params.accumulate_grad(ids.conv1.w, &dw1);
        self.params.accumulate_grad(ids.conv1.b, &db1);
        let d_a = silu_backward(&tape.silu1, &d_b);
        let g1 = self.params.value(ids.gn1.scale).clone();
        let (mut d_x, dgn1s, dgn1b) = group_norm_backward(&tape.gn1, &g1, &d_a);
        self.params.accumulate_grad(ids.gn1.scale, &dgn1s);
        self.params.accumulate_grad(ids.gn1.shift, &dgn1b);

        match (&tape.skip, &ids.skip) {
            (Some(ctx), Some(sk)) => {
                let wsk = self.params.value(sk.w).clone();
                let (d_x2, dws, dbs) = conv2d_backward(ctx, &wsk, dy);
                self.params.accumulate_grad(sk.w, &dws);
                self.params.accumulate_grad(sk.b, &dbs);
                d_x.add_assign(&d_x2);
            }
            (None, None) => d_x.add_assign(dy),
            _ => unreachable!("tape and ids disagree about the shortcut"),
        }
        (d_x, d_temb_act)
    }

    fn attn_forward(&self, ids: &AttnIds, x: &Tensor<S>) -> Result<(Tensor<S>, AttnTape<S>)> {
        let p = self.attn_params(ids);
        let (y, ctx) = attention_forward(x, &p, self.config.attention_heads)?;
        Ok((y, AttnTape { ids: *ids, ctx }))
    }

    fn attn_backward(&mut self, tape: &AttnTape<S>, dy: &Tensor<S>) -> Tensor<S> {
        let ids = tape.ids;
        let p = AttentionParams {
            gn_scale: &self.params.value(ids.gn.scale).clone(),
            gn_shift: &self.params.value(ids.gn.shift).clone(),
            groups: self.config.groups,
            wq: &self.params.value(ids.wq.w).clone(),
            bq: &self.params.value(ids.wq.b).clone(),
            wk: &self.params.value(ids.wk.w).clone(),
            bk: &self.params.value(ids.wk.b).clone(),
            wv: &self.params.value(ids.wv.w).clone(),
            bv: &self.params.value(ids.wv.b).clone(),
            wo: &self.params.value(ids.wo.w).clone(),
            bo: &self.params.value(ids.wo.b).clone(),
        };
        let (dx, g) = attention_backward(&tape.ctx, &p, dy);
        self.params.accumulate_grad(ids.gn.scale, &g.gn_scale);
        self.params.accumulate_grad(ids.gn.shift, &g.gn_shift);
        self.params.accumulate_grad(ids.wq.w, &g.wq);
        self.params.accumulate_grad(ids.wq.b, &g.bq);
        self.params.accumulate_grad(ids.wk.w, &g.wk);
        self.params.accumulate_grad(ids.wk.b, &g.bk);
        self.params.accumulate_grad(ids.wv.w, &g.wv);
        self.params.accumulate_grad(ids.wv.b, &g.bv);
        self.params.accumulate_grad(ids.wo.w, &g.wo);
        self.params.accumulate_grad(ids.wo.b, &g.bo);
        dx
    }

    /// One full pass. `wanted` selects decoder readouts to tap; taps are pure
    /// copies and never alter the noise prediction.
    pub fn forward_full(
        &self,
        x: &Tensor<S>,
        t: usize,
        wanted: &[ReadoutId],
    ) -> Result<(Tensor<S>, Vec<FeatureTensor<S>>, UnetTape<S>)> {
        let cfg = &self.config;
        let n = cfg.n_stages();
        match x.shape() {
            [c, h, w] if *c == cfg.in_channels && *h == cfg.image_size && *w == cfg.image_size => {}
            other => {
                return Err(Error::Shape {
                    context: "denoiser input".into(),
                    expected: format!(
                        "({}, {}, {})",
                        cfg.in_channels, cfg.image_size, cfg.image_size
                    ),
                    got: format!("{other:?}"),
                })
            }
        }
        let blocks_per = cfg.decoder_blocks_per_stage;
        for r in wanted {
            if r.stage == 0 || r.stage > n || r.block == 0 || r.block > blocks_per {
                return Err(Error::Index(format!(
                    "invalid readout (r={}, b={}); valid: r in 1..={n}, b in 1..={blocks_per}",
                    r.stage, r.block
                )));
            }
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);

        let p = &self.params;
        // Time embedding MLP, shared by all residual blocks.
        let sin = time_embedding::<S>(t, cfg.stage_channels[0])?;
        let (l1, temb_lin1) =
            linear_forward(&sin, p.value(self.arch.temb_lin1.w), p.value(self.arch.temb_lin1.b))?;
        let (s1, temb_silu1) = silu_forward(&l1);
        let (l2, temb_lin2) =
            linear_forward(&s1, p.value(self.arch.temb_lin2.w), p.value(self.arch.temb_lin2.b))?;
        let (temb_act, temb_act_ctx) = silu_forward(&l2);

        let (mut h, stem) =
            conv2d_forward(x, p.value(self.arch.stem.w), p.value(self.arch.stem.b), 1)?;
        let mut skips: Vec<Tensor<S>> = vec![h.clone()];

        let mut enc_tapes = Vec::with_capacity(n);
        for stage in &self.arch.enc {
            let mut block_tapes = Vec::new();
            let total = stage.blocks.len();
            let mut attn_tape = None;
            for (bi, ids) in stage.blocks.iter().enumerate() {
                let (next, tape) = self.resblock_forward(ids, &h, &temb_act)?;
                h = next;
                block_tapes.push(tape);
                if bi + 1 == total {
                    if let Some(attn_ids) = &stage.attn {
                        let (next, tape) = self.attn_forward(attn_ids, &h)?;
                        h = next;
                        attn_tape = Some(tape);
                    }
                }
                skips.push(h.clone());
            }
            let down = match &stage.down {
                Some(ids) => {
                    let (next, ctx) = conv2d_forward(&h, p.value(ids.w), p.value(ids.b), 2)?;
                    h = next;
                    skips.push(h.clone());
                    Some((ctx, *ids))
                }
                None => None,
            };
            enc_tapes.push(EncStageTape {
                blocks: block_tapes,
                attn: attn_tape,
                down,
            });
        }

        let mut mid_tapes = Vec::new();
        let mut mid_attn_tape = None;
        for (bi, ids) in self.arch.mid.iter().enumerate() {
            let (next, tape) = self.resblock_forward(ids, &h, &temb_act)?;
            h = next;
            mid_tapes.push(tape);
            if bi == 0 {
                if let Some(attn_ids) = &self.arch.mid_attn {
                    let (next, tape) = self.attn_forward(attn_ids, &h)?;
                    h = next;
                    mid_attn_tape = Some(tape);
                }
            }
        }

        let mut readouts = Vec::new();
        let mut dec_tapes = Vec::with_capacity(n);
        for (r_idx, stage) in self.arch.dec.iter().enumerate() {
            let r = r_idx + 1;
            let total = stage.blocks.len();
            let mut block_tapes = Vec::new();
            let mut attn_tape = None;
            for (bi, ids) in stage.blocks.iter().enumerate() {
                let skip = skips
                    .pop()
                    .ok_or_else(|| Error::contract("skip stack underflow in decoder"))?;
                let h_ch = h.shape()[0];
                let skip_ch = skip.shape()[0];
                let joined = concat_channels(&h, &skip);
                let (next, tape) = self.resblock_forward(ids, &joined, &temb_act)?;
                h = next;
                block_tapes.push(DecBlockTape {
                    tape,
                    h_ch,
                    skip_ch,
                });
                if bi + 1 == total {
                    if let Some(attn_ids) = &stage.attn {
                        let (next, tape) = self.attn_forward(attn_ids, &h)?;
                        h = next;
                        attn_tape = Some(tape);
                    }
                }
                let id = ReadoutId::new(r, bi + 1);
                if wanted.contains(&id) {
                    readouts.push(FeatureTensor {
                        readout: id,
                        values: h.clone(),
                    });
                }
            }
            let up = match &stage.up {
                Some(ids) => {
                    let pre_shape = h.shape().to_vec();
                    let upsampled = upsample_nearest2_forward(&h)?;
                    let (next, ctx) = conv2d_forward(&upsampled, p.value(ids.w), p.value(ids.b), 1)?;
                    h = next;
                    Some(UpTape {
                        pre_shape,
                        conv: ctx,
                        ids: *ids,
                    })
                }
                None => None,
            };
            dec_tapes.push(DecStageTape {
                blocks: block_tapes,
                attn: attn_tape,
                up,
            });
        }

        let (hg, head_gn) = group_norm_forward(
            &h,
            p.value(self.arch.head_gn.scale),
            p.value(self.arch.head_gn.shift),
            cfg.groups,
        )?;
        let (hs, head_silu) = silu_forward(&hg);
        let (eps, head_conv) = conv2d_forward(
            &hs,
            p.value(self.arch.head_conv.w),
            p.value(self.arch.head_conv.b),
            1,
        )?;

        Ok((
            eps,
            readouts,
            UnetTape {
                temb_lin1,
                temb_silu1,
                temb_lin2,
                temb_act: temb_act_ctx,
                stem,
                enc: enc_tapes,
                mid: mid_tapes,
                mid_attn: mid_attn_tape,
                dec: dec_tapes,
                head_gn,
                head_silu,
                head_conv,
            },
        ))
    }

    /// Noise prediction only.
    pub fn predict_noise(&self, x: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        let (eps, _, _) = self.forward_full(x, t, &[])?;
        Ok(eps)
    }

    /// Noise prediction plus tapped decoder activations.
    pub fn forward_with_readouts(
        &self,
        x: &Tensor<S>,
        t: usize,
        wanted: &[ReadoutId],
    ) -> Result<(Tensor<S>, Vec<FeatureTensor<S>>)> {
        let (eps, taps, _) = self.forward_full(x, t, wanted)?;
        Ok((eps, taps))
    }

    /// Training forward; fails in frozen mode.
    pub fn forward_train(&self, x: &Tensor<S>, t: usize) -> Result<(Tensor<S>, UnetTape<S>)> {
        if self.mode == Mode::Frozen {
            return Err(Error::contract(
                "forward_train called on a frozen denoiser",
            ));
        }
        let (eps, _, tape) = self.forward_full(x, t, &[])?;
        Ok((eps, tape))
    }

    /// Accumulates parameter gradients for one item given d(loss)/d(eps_hat).
    pub fn backward(&mut self, tape: &UnetTape<S>, d_eps: &Tensor<S>) -> Result<()> {
        if self.mode == Mode::Frozen {
            return Err(Error::contract("backward called on a frozen denoiser"));
        }
        let temb_dim = {
            let probe = &tape.temb_act.input;
            probe.numel()
        };
        let mut d_temb_act = Tensor::<S>::zeros(&[temb_dim]);

        // Head.
        let whc = self.params.value(self.arch.head_conv.w).clone();
        let (d_hs, dw, db) = conv2d_backward(&tape.head_conv, &whc, d_eps);
        self.params.accumulate_grad(self.arch.head_conv.w, &dw);
        self.params.accumulate_grad(self.arch.head_conv.b, &db);
        let d_hg = silu_backward(&tape.head_silu, &d_hs);
        let ghg = self.params.value(self.arch.head_gn.scale).clone();
        let (mut d_h, dgs, dgb) = group_norm_backward(&tape.head_gn, &ghg, &d_hg);
        self.params.accumulate_grad(self.arch.head_gn.scale, &dgs);
        self.params.accumulate_grad(self.arch.head_gn.shift, &dgb);

        // Decoder, reverse order; gradients for consumed skips are pushed so
        // the encoder pass below pops them in matching order.
        let mut d_skips: Vec<Tensor<S>> = Vec::new();
        for stage in tape.dec.iter().rev() {
            if let Some(up) = &stage.up {
                let wup = self.params.value(up.ids.w).clone();
                let (d_upsampled, dw, db) = conv2d_backward(&up.conv, &wup, &d_h);
                self.params.accumulate_grad(up.ids.w, &dw);
                self.params.accumulate_grad(up.ids.b, &db);
                d_h = upsample_nearest2_backward(&d_upsampled, &up.pre_shape);
            }
            if let Some(attn) = &stage.attn {
                d_h = self.attn_backward(attn, &d_h);
            }
            for block in stage.blocks.iter().rev() {
                let (d_joined, d_t) = self.resblock_backward(&block.tape, &d_h);
                d_temb_act.add_assign(&d_t);
                let [_, hh, ww] = *d_joined.shape() else {
                    unreachable!()
                };
                let split = block.h_ch * hh * ww;
                let d_prev =
                    Tensor::from_vec(&[block.h_ch, hh, ww], d_joined.data()[..split].to_vec())?;
                let d_skip = Tensor::from_vec(
                    &[block.skip_ch, hh, ww],
                    d_joined.data()[split..].to_vec(),
                )?;
                d_skips.push(d_skip);
                d_h = d_prev;
            }
        }

        // Bottleneck.
        if let Some(attn) = &tape.mid_attn {
            // attention sits after the first mid block
            for (bi, block) in tape.mid.iter().enumerate().rev() {
                let (d_prev, d_t) = self.resblock_backward(block, &d_h);
                d_temb_act.add_assign(&d_t);
                d_h = d_prev;
                if bi == 1 {
                    d_h = self.attn_backward(attn, &d_h);
                }
            }
            if tape.mid.len() == 1 {
                d_h = self.attn_backward(attn, &d_h);
            }
        } else {
            for block in tape.mid.iter().rev() {
                let (d_prev, d_t) = self.resblock_backward(block, &d_h);
                d_temb_act.add_assign(&d_t);
                d_h = d_prev;
            }
        }

        // Encoder, reverse order.
        for stage in tape.enc.iter().rev() {
            if let Some((ctx, ids)) = &stage.down {
                let mut dd = d_skips.pop().expect("skip gradient for downsample");
                dd.add_assign(&d_h);
                let wd = self.params.value(ids.w).clone();
                let (d_prev, dw, db) = conv2d_backward(ctx, &wd, &dd);
                self.params.accumulate_grad(ids.w, &dw);
                self.params.accumulate_grad(ids.b, &db);
                d_h = d_prev;
            }
            let total = stage.blocks.len();
            for (bi, block) in stage.blocks.iter().enumerate().rev() {
                let mut d_out = d_skips.pop().expect("skip gradient for encoder block");
                d_out.add_assign(&d_h);
                if bi + 1 == total {
                    if let Some(attn) = &stage.attn {
                        d_out = self.attn_backward(attn, &d_out);
                    }
                }
                let (d_prev, d_t) = self.resblock_backward(block, &d_out);
                d_temb_act.add_assign(&d_t);
                d_h = d_prev;
            }
        }

        // Stem: the post-stem activation was also pushed as a skip.
        let mut d_stem_out = d_skips.pop().expect("skip gradient for stem");
        d_stem_out.add_assign(&d_h);
        debug_assert!(d_skips.is_empty(), "unconsumed skip gradients");
        let ws = self.params.value(self.arch.stem.w).clone();
        let (_, dw, db) = conv2d_backward(&tape.stem, &ws, &d_stem_out);
        self.params.accumulate_grad(self.arch.stem.w, &dw);
        self.params.accumulate_grad(self.arch.stem.b, &db);

        // Time embedding MLP.
        let d_l2 = silu_backward(&tape.temb_act, &d_temb_act);
        let w2 = self.params.value(self.arch.temb_lin2.w).clone();
        let (d_s1, dw, db) = linear_backward(&tape.temb_lin2, &w2, &d_l2);
        self.params.accumulate_grad(self.arch.temb_lin2.w, &dw);
        self.params.accumulate_grad(self.arch.temb_lin2.b, &db);
        let d_l1 = silu_backward(&tape.temb_silu1, &d_s1);
        let w1 = self.params.value(self.arch.temb_lin1.w).clone();
        let (_, dw, db) = linear_backward(&tape.temb_lin1, &w1, &d_l1);
        self.params.accumulate_grad(self.arch.temb_lin1.w, &dw);
        self.params.accumulate_grad(self.arch.temb_lin1.b, &db);

        Ok(())
    }
}
