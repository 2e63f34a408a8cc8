//! Multiscale gated CNN encoder: stem, three resolution branches, per-scale
//! channel and spatial attention, cross-scale gating, and the local-global
//! classification path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, shape_err, Result};
use crate::gradcheck::{rel_error, GradCheckReport};
use crate::nn::{seeded_rng, BatchNorm2d, Conv2d, Graph, Group, Linear, ParamStore};
use crate::ops::ConvSpec;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_views: usize,
    pub stem_channels: usize,
    pub high_channels: usize,
    pub mid_channels: usize,
    pub low_channels: usize,
    pub proj_channels: usize,
    pub resolution: usize,
    pub num_classes: Option<usize>,
    pub fc_units: usize,
    pub fc_dropout: f64,
    pub local_var_window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_views: 1,
            stem_channels: 8,
            high_channels: 16,
            mid_channels: 32,
            low_channels: 64,
            proj_channels: 8,
            resolution: 224,
            num_classes: Some(11),
            fc_units: 64,
            fc_dropout: 0.2,
            local_var_window: 3,
        }
    }
}

impl EncoderConfig {
    /// Six surround views, no classification head.
    pub fn multi_view() -> Self {
        Self {
            n_views: 6,
            num_classes: None,
            ..Self::default()
        }
    }

    /// One front camera with the 11-way sign head.
    pub fn single_view() -> Self {
        Self::default()
    }

    /// Width of one view's embedding, `3 * c_p`.
    pub fn view_dim(&self) -> usize {
        3 * self.proj_channels
    }

    /// Flattened embedding width, `n * 3 * c_p`.
    pub fn embed_dim(&self) -> usize {
        self.n_views * self.view_dim()
    }

    /// Channels after the local-global block.
    pub fn lgb_channels(&self) -> usize {
        self.view_dim() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let op = "EncoderConfig";
        if self.n_views == 0 {
            return Err(invalid(op, "n_views must be positive"));
        }
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return Err(invalid(op, format!("resolution {} is not a positive multiple of 4", self.resolution)));
        }
        if self.resolution < 32 {
            return Err(invalid(op, format!("resolution {} is below the minimum of 32", self.resolution)));
        }
        if self.proj_channels < 4 || self.proj_channels % 4 != 0 {
            return Err(invalid(op, "proj_channels must be a positive multiple of 4"));
        }
        if self.local_var_window % 2 == 0 {
            return Err(invalid(op, "local_var_window must be odd"));
        }
        if !(0.0..1.0).contains(&self.fc_dropout) {
            return Err(invalid(op, "fc_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    High,
    Mid,
    Low,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::High, Scale::Mid, Scale::Low];

    pub fn name(self) -> &'static str {
        match self {
            Scale::High => "high",
            Scale::Mid => "mid",
            Scale::Low => "low",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Scale::High),
            "mid" => Ok(Scale::Mid),
            "low" => Ok(Scale::Low),
            other => Err(invalid("Scale::parse", format!("unknown scale tag {other:?}"))),
        }
    }

    /// Spatial attention kernel size.
    pub fn kernel(self) -> usize {
        match self {
            Scale::High => 3,
            Scale::Mid => 5,
            Scale::Low => 7,
        }
    }

    /// Number of stacked descriptor maps fed to the spatial attention conv.
    pub fn descriptors(self) -> usize {
        match self {
            Scale::High | Scale::Mid => 3,
            Scale::Low => 2,
        }
    }

    /// Downsampling factor relative to the input.
    pub fn factor(self) -> usize {
        match self {
            Scale::High => 1,
            Scale::Mid => 2,
            Scale::Low => 4,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Convolution followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), spec, true, group, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), spec.out_channels, group),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.relu(y))
    }
}

/// Bottleneck gate `sigmoid(W2 relu(W1 GAP(P)))`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Conv over stacked per-pixel descriptors, then sigmoid.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub scale: Scale,
    pub conv: Conv2d,
    pub window: usize,
}

/// Softmax gate over the concatenated scales.
#[derive(Debug, Clone)]
pub struct CrossScaleGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct LocalGlobalBlock {
    /// Per-channel standardisation of the fused map.
    pub input_norm: BatchNorm2d,
    /// Emits one 3x3 depthwise kernel per channel from the pooled input.
    pub hyper: Linear,
    pub global: ConvBnRelu,
    pub down: ConvBnRelu,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

pub const HEAD_CHANNELS: usize = 6;
pub const HEAD_GRID: usize = 7;
pub const HEAD_POOL: usize = 4;
pub const DYNAMIC_KERNEL: usize = 3;

/// Per-scale projected maps.
#[derive(Debug, Clone, Copy)]
pub struct ScaleFeatures {
    pub high: Var,
    pub mid: Var,
    pub low: Var,
}

impl ScaleFeatures {
    pub fn get(&self, s: Scale) -> Var {
        match s {
            Scale::High => self.high,
            Scale::Mid => self.mid,
            Scale::Low => self.low,
        }
    }

    fn map(self, mut f: impl FnMut(Scale, Var) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            high: f(Scale::High, self.high)?,
            mid: f(Scale::Mid, self.mid)?,
            low: f(Scale::Low, self.low)?,
        })
    }
}

/// Everything computed for a batch of views.
#[derive(Debug, Clone, Copy)]
pub struct EncodedViews {
    /// `[b, n, 3 c_p]`.
    pub embedding: Var,
    /// `[b n, 3 c_p, h, w]`.
    pub fused: Var,
    /// Cross-scale gate, `[b n, 3 c_p]`.
    pub gate: Var,
    /// Spatial attention maps `[b n, 1, h_s, w_s]` per scale.
    pub attention: [Var; 3],
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    pub stem: ConvBnRelu,
    pub high: ConvBnRelu,
    pub mid: ConvBnRelu,
    pub low: ConvBnRelu,
    pub proj: [Conv2d; 3],
    pub channel_att: [ChannelAttention; 3],
    pub spatial_att: [SpatialAttention; 3],
    pub gate: CrossScaleGate,
    pub lgb: Option<LocalGlobalBlock>,
    pub head: Option<ClassifierHead>,
}

impl VisionEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let bb = Group::VisionBackbone;
        let (cs, cp) = (cfg.stem_channels, cfg.proj_channels);
        let stem = ConvBnRelu::new(store, "vision.stem", ConvSpec::same(3, cs, 3), bb, rng)?;
        let high = ConvBnRelu::new(store, "vision.high", ConvSpec::same(cs, cfg.high_channels, 3), bb, rng)?;
        let mid = ConvBnRelu::new(store, "vision.mid", ConvSpec::same(cs, cfg.mid_channels, 3), bb, rng)?;
        let low = ConvBnRelu::new(store, "vision.low", ConvSpec::same(cs, cfg.low_channels, 3), bb, rng)?;
        let branch_channels = [cfg.high_channels, cfg.mid_channels, cfg.low_channels];
        let mut proj = Vec::new();
        let mut channel_att = Vec::new();
        let mut spatial_att = Vec::new();
        for (s, &c) in Scale::ALL.iter().zip(&branch_channels) {
            let n = s.name();
            proj.push(Conv2d::new(store, &format!("vision.proj.{n}"), ConvSpec::same(c, cp, 1), true, bb, rng)?);
            channel_att.push(ChannelAttention {
                fc1: Linear::new(store, &format!("vision.ca.{n}.fc1"), cp, cp / 4, true, bb, rng),
                fc2: Linear::new(store, &format!("vision.ca.{n}.fc2"), cp / 4, cp, true, bb, rng),
            });
            let spec = ConvSpec::same(s.descriptors(), 1, s.kernel());
            spatial_att.push(SpatialAttention {
                scale: *s,
                conv: Conv2d::new(store, &format!("vision.sa.{n}"), spec, true, bb, rng)?,
                window: cfg.local_var_window,
            });
        }
        let d = cfg.view_dim();
        let hidden = d * 2 / 3;
        let gate = CrossScaleGate {
            fc1: Linear::new(store, "vision.csgm.fc1", d, hidden, true, bb, rng),
            fc2: Linear::new(store, "vision.csgm.fc2", hidden, d, true, bb, rng),
        };
        let (lgb, head) = match cfg.num_classes {
            None => (None, None),
            Some(classes) => {
                let hd = Group::VisionHead;
                let half = cfg.lgb_channels();
                let k2 = DYNAMIC_KERNEL * DYNAMIC_KERNEL;
                let lgb = LocalGlobalBlock {
                    input_norm: BatchNorm2d::new(store, "vision.lgb.input_norm", d, hd),
                    hyper: Linear::new(store, "vision.lgb.hyper", d, d * k2, true, hd, rng),
                    global: ConvBnRelu::new(
                        store,
                        "vision.lgb.global",
                        ConvSpec::same(d, half, 3).with_dilation(2).with_padding(2),
                        hd,
                        rng,
                    )?,
                    down: ConvBnRelu::new(
                        store,
                        "vision.lgb.down",
                        ConvSpec::same(d + half, half, 3).with_stride(2),
                        hd,
                        rng,
                    )?,
                    channels: half,
                };
                let flat = HEAD_CHANNELS * HEAD_GRID * HEAD_GRID;
                let head = ClassifierHead {
                    conv1: ConvBnRelu::new(
                        store,
                        "vision.head.conv1",
                        ConvSpec::same(half, HEAD_CHANNELS, 3).with_stride(2),
                        hd,
                        rng,
                    )?,
                    conv2: ConvBnRelu::new(
                        store,
                        "vision.head.conv2",
                        ConvSpec::same(HEAD_CHANNELS, HEAD_CHANNELS, 3).with_stride(2),
                        hd,
                        rng,
                    )?,
                    fc1: Linear::new(store, "vision.head.fc1", flat, cfg.fc_units, true, hd, rng),
                    fc2: Linear::new(store, "vision.head.fc2", cfg.fc_units, classes, true, hd, rng),
                    dropout: cfg.fc_dropout,
                };
                (Some(lgb), Some(head))
            }
        };
        Ok(Self {
            cfg,
            stem,
            high,
            mid,
            low,
            proj: three(proj),
            channel_att: three(channel_att),
            spatial_att: three(spatial_att),
            gate,
            lgb,
            head,
        })
    }

    pub fn stem_forward<T: Scalar>(&self, g: &mut Graph<T>, view: Var) -> Result<Var> {
        let (_, c, h, w) = g.tape.value(view).nchw("stem_forward")?;
        if c != 3 {
            return Err(shape_err("stem_forward", "channels", 3, c));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err("stem_forward", "spatial", "multiple of 4", format!("{h}x{w}")));
        }
        self.stem.forward(g, view)
    }

    /// `(F_high, F_mid, F_low)` at full, half and quarter resolution.
    pub fn branch_forward<T: Scalar>(&self, g: &mut Graph<T>, stem: Var) -> Result<(Var, Var, Var)> {
        let (_, _, h, w) = g.tape.value(stem).nchw("branch_forward")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err("branch_forward", "spatial", "multiple of 4", format!("{h}x{w}")));
        }
        let high = self.high.forward(g, stem)?;
        let half = g.tape.max_pool2d(stem, 2, 2)?;
        let mid = self.mid.forward(g, half)?;
        let quarter = g.tape.max_pool2d(half, 2, 2)?;
        let low = self.low.forward(g, quarter)?;
        Ok((high, mid, low))
    }

    pub fn project_scales<T: Scalar>(&self, g: &mut Graph<T>, high: Var, mid: Var, low: Var) -> Result<ScaleFeatures> {
        Ok(ScaleFeatures {
            high: self.proj[0].forward(g, high)?,
            mid: self.proj[1].forward(g, mid)?,
            low: self.proj[2].forward(g, low)?,
        })
    }

    /// `(C, gate)` with `C = P * gate` broadcast over space.
    pub fn channel_attention<T: Scalar>(&self, g: &mut Graph<T>, scale: Scale, p: Var) -> Result<(Var, Var)> {
        let ca = &self.channel_att[scale.index()];
        let (b, c, _, _) = g.tape.value(p).nchw("channel_attention")?;
        let pooled = g.tape.global_avg_pool(p)?;
        let pooled = g.tape.reshape(pooled, &[b, c])?;
        let hid = ca.fc1.forward(g, pooled)?;
        let hid = g.tape.relu(hid);
        let logits = ca.fc2.forward(g, hid)?;
        let gate = g.tape.sigmoid(logits);
        Ok((g.tape.mul_channel(p, gate)?, gate))
    }

    /// Single-channel attention map in (0, 1).
    pub fn spatial_attention<T: Scalar>(&self, g: &mut Graph<T>, scale: Scale, c: Var) -> Result<Var> {
        let sa = &self.spatial_att[scale.index()];
        let avg = g.tape.channel_mean(c)?;
        let max = g.tape.channel_max(c)?;
        let stack = match scale {
            Scale::High => {
                let edge = g.tape.sobel_magnitude(avg)?;
                g.tape.concat(&[avg, max, edge], 1)?
            }
            Scale::Mid => {
                let var = g.tape.local_variance(avg, sa.window)?;
                g.tape.concat(&[avg, max, var], 1)?
            }
            Scale::Low => g.tape.concat(&[avg, max], 1)?,
        };
        let logits = sa.conv.forward(g, stack)?;
        Ok(g.tape.sigmoid(logits))
    }

    pub fn refine<T: Scalar>(&self, g: &mut Graph<T>, c: Var, a: Var) -> Result<Var> {
        g.tape.mul_spatial(c, a)
    }

    /// Upsamples mid and low to the high grid, gates the 3 c_p channels with
    /// a softmax, and pools. Returns `(F_fused, e, gate)`.
    pub fn cross_scale_gate<T: Scalar>(&self, g: &mut Graph<T>, refined: &ScaleFeatures) -> Result<(Var, Var, Var)> {
        let (b, _, h, w) = g.tape.value(refined.high).nchw("cross_scale_gate")?;
        for s in [Scale::Mid, Scale::Low] {
            let (_, _, hs, ws) = g.tape.value(refined.get(s)).nchw("cross_scale_gate")?;
            if hs * s.factor() != h || ws * s.factor() != w {
                return Err(shape_err(
                    "cross_scale_gate",
                    s.name(),
                    format!("{}x{}", h / s.factor(), w / s.factor()),
                    format!("{hs}x{ws}"),
                ));
            }
        }
        let mid = g.tape.upsample_bilinear(refined.mid, h, w)?;
        let low = g.tape.upsample_bilinear(refined.low, h, w)?;
        let cat = g.tape.concat(&[refined.high, mid, low], 1)?;
        let d = self.cfg.view_dim();
        let pooled = g.tape.global_avg_pool(cat)?;
        let pooled = g.tape.reshape(pooled, &[b, d])?;
        let hid = self.gate.fc1.forward(g, pooled)?;
        let hid = g.tape.relu(hid);
        let logits = self.gate.fc2.forward(g, hid)?;
        let gate = g.tape.softmax(logits)?;
        let fused = g.tape.mul_channel(cat, gate)?;
        let e = g.tape.global_avg_pool(fused)?;
        let e = g.tape.reshape(e, &[b, d])?;
        Ok((fused, e, gate))
    }

    /// Runs the backbone over `[b, n, 3, h, w]` with weights shared across
    /// views.
    pub fn encode_views<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<EncodedViews> {
        let s = x.expect_rank("encode_views", 5)?;
        let (b, n) = (s[0], s[1]);
        if n != self.cfg.n_views {
            return Err(shape_err("encode_views", "views", self.cfg.n_views, n));
        }
        let flat = x.clone().reshape(&[b * n, s[2], s[3], s[4]])?;
        let input = g.input(flat);
        let enc = self.encode_flat(g, input)?;
        let embedding = g.tape.reshape(enc.embedding, &[b, n, self.cfg.view_dim()])?;
        Ok(EncodedViews { embedding, ..enc })
    }

    /// Backbone over independent images `[m, 3, h, w]`; the embedding is
    /// `[m, 3 c_p]`.
    pub fn encode_flat<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<EncodedViews> {
        let stem = self.stem_forward(g, images)?;
        let (fh, fm, fl) = self.branch_forward(g, stem)?;
        let projected = self.project_scales(g, fh, fm, fl)?;
        let mut attention = Vec::with_capacity(3);
        let refined = projected.map(|s, p| {
            let (c, _) = self.channel_attention(g, s, p)?;
            let a = self.spatial_attention(g, s, c)?;
            attention.push(a);
            self.refine(g, c, a)
        })?;
        let (fused, embedding, gate) = self.cross_scale_gate(g, &refined)?;
        Ok(EncodedViews {
            embedding,
            fused,
            gate,
            attention: attention.try_into().expect("three scales"),
        })
    }

    fn require_head(&self, op: &'static str) -> Result<(&LocalGlobalBlock, &ClassifierHead)> {
        match (&self.lgb, &self.head) {
            (Some(l), Some(h)) => Ok((l, h)),
            _ => Err(invalid(op, "encoder was built without a classification head")),
        }
    }

    /// Per-sample generated depthwise kernels `[b, c, 3, 3]`, each summing
    /// to one.
    pub fn dynamic_kernels<T: Scalar>(&self, g: &mut Graph<T>, fused: Var) -> Result<Var> {
        let (lgb, _) = self.require_head("dynamic_kernels")?;
        let (b, c, _, _) = g.tape.value(fused).nchw("dynamic_kernels")?;
        let k = DYNAMIC_KERNEL;
        let pooled = g.tape.global_avg_pool(fused)?;
        let pooled = g.tape.reshape(pooled, &[b, c])?;
        let raw = lgb.hyper.forward(g, pooled)?;
        let raw = g.tape.reshape(raw, &[b * c, k * k])?;
        let norm = g.tape.softmax(raw)?;
        g.tape.reshape(norm, &[b, c, k, k])
    }

    /// Normalises the fused map, then runs the local dynamic path and the
    /// dilated global path, concatenated and reduced with a stride-2
    /// convolution.
    pub fn lgb_forward<T: Scalar>(&self, g: &mut Graph<T>, fused: Var) -> Result<Var> {
        let (lgb, _) = self.require_head("lgb_forward")?;
        let fused = lgb.input_norm.forward(g, fused)?;
        let kernels = self.dynamic_kernels(g, fused)?;
        let local = g.tape.dynamic_depthwise(fused, kernels)?;
        let global = lgb.global.forward(g, fused)?;
        let cat = g.tape.concat(&[local, global], 1)?;
        lgb.down.forward(g, cat)
    }

    /// Class logits `[b, classes]` from the fused map.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<T>, fused: Var) -> Result<Var> {
        let (_, head) = self.require_head("classify")?;
        let x = self.lgb_forward(g, fused)?;
        let x = head.conv1.forward(g, x)?;
        let x = head.conv2.forward(g, x)?;
        let x = g.tape.max_pool2d(x, HEAD_POOL, HEAD_POOL)?;
        let x = g.tape.adaptive_avg_pool(x, HEAD_GRID, HEAD_GRID)?;
        let b = g.tape.shape(x)[0];
        let x = g.tape.reshape(x, &[b, HEAD_CHANNELS * HEAD_GRID * HEAD_GRID])?;
        let x = head.fc1.forward(g, x)?;
        let x = g.tape.relu(x);
        let x = g.dropout(x, head.dropout)?;
        head.fc2.forward(g, x)
    }

    /// Forward FLOPs for one view (backbone only, or backbone plus the
    /// classification path when `with_head`). A multiply-add counts as two.
    pub fn flops(&self, with_head: bool) -> u64 {
        let cfg = &self.cfg;
        let r = cfg.resolution as u64;
        let conv = |spec: &ConvSpec, h: u64| -> u64 {
            let k = spec.kernel as u64;
            2 * k * k * (spec.in_channels / spec.groups) as u64 * spec.out_channels as u64 * h * h
        };
        let lin = |l: &Linear| 2 * (l.din * l.dout) as u64;
        let mut total = conv(&self.stem.conv.spec, r);
        total += conv(&self.high.conv.spec, r) + conv(&self.mid.conv.spec, r / 2) + conv(&self.low.conv.spec, r / 4);
        for (i, s) in Scale::ALL.iter().enumerate() {
            let h = r / s.factor() as u64;
            total += conv(&self.proj[i].spec, h);
            total += lin(&self.channel_att[i].fc1) + lin(&self.channel_att[i].fc2);
            total += conv(&self.spatial_att[i].conv.spec, h);
        }
        total += lin(&self.gate.fc1) + lin(&self.gate.fc2);
        if with_head {
            if let (Some(lgb), Some(head)) = (&self.lgb, &self.head) {
                let d = cfg.view_dim() as u64;
                let k2 = (DYNAMIC_KERNEL * DYNAMIC_KERNEL) as u64;
                total += 2 * d * r * r;
                total += lin(&lgb.hyper);
                total += 2 * k2 * d * r * r;
                total += conv(&lgb.global.conv.spec, r);
                let h1 = lgb.down.conv.spec.out_size(r as usize, "h").unwrap_or(0) as u64;
                total += conv(&lgb.down.conv.spec, h1);
                let h2 = head.conv1.conv.spec.out_size(h1 as usize, "h").unwrap_or(0) as u64;
                total += conv(&head.conv1.conv.spec, h2);
                let h3 = head.conv2.conv.spec.out_size(h2 as usize, "h").unwrap_or(0) as u64;
                total += conv(&head.conv2.conv.spec, h3);
                total += lin(&head.fc1) + lin(&head.fc2);
            }
        }
        total
    }
}

/// Finite-difference step for the composed encoder. The network holds tens
/// of thousands of ReLU and max units, so a wider stencil regularly straddles
/// one of their kinks.
pub const ENCODER_STEP: f64 = 1e-6;

/// Smallest step tried when the one-sided differences disagree.
pub const ENCODER_MIN_STEP: f64 = 1e-7;

/// Analytic gradients of `sum(E)` with respect to the stem weights,
/// computed in single precision, against central differences of the same
/// network evaluated in double precision.
pub fn stem_grad_check(seed: u64, resolution: usize, tolerance: f64) -> Result<GradCheckReport> {
    let cfg = EncoderConfig {
        resolution,
        num_classes: None,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let enc = VisionEncoder::new(&mut store, cfg, &mut seeded_rng(seed))?;
    let mut reference = store.cast::<f64>();
    let mut rng = seeded_rng(seed.wrapping_add(1));
    let x = Tensor::<f32>::from_fn(&[2, 1, 3, resolution, resolution], |_| rng.random_range(0.0..1.0)).cast::<f64>();

    let mut g = Graph::new(&mut store, true, seed);
    let out = enc.encode_views(&mut g, &x.cast())?;
    let loss = g.tape.sum(out.embedding);
    let grads = g.backward(loss)?;
    let w = enc.stem.conv.weight;
    let analytic: Vec<f64> = match grads.get(w) {
        Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; store.value(w).numel()],
    };

    let objective = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store, true, seed);
        let out = enc.encode_views(&mut g, &x)?;
        Ok(g.tape.value(out.embedding).sum())
    };
    let centre = objective(&mut reference)?;
    let sides = |j: usize, h: f64, r: &mut ParamStore<f64>| -> Result<(f64, f64)> {
        let orig = r.value(w).data()[j];
        r.value_mut(w).data_mut()[j] = orig + h;
        let plus = objective(r)?;
        r.value_mut(w).data_mut()[j] = orig - h;
        let minus = objective(r)?;
        r.value_mut(w).data_mut()[j] = orig;
        Ok(((plus - centre) / h, (centre - minus) / h))
    };
    let mut coarse = Vec::with_capacity(analytic.len());
    for j in 0..analytic.len() {
        coarse.push(sides(j, ENCODER_STEP, &mut reference)?);
    }
    let scale = coarse.iter().map(|&(f, b)| 0.5 * (f + b)).chain(analytic.iter().copied()).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut numeric = Vec::with_capacity(analytic.len());
    for (j, &(mut fwd, mut bwd)) in coarse.iter().enumerate() {
        // a kink inside the stencil shows up as disagreeing one-sided slopes
        let mut h = ENCODER_STEP;
        while rel_error(fwd, bwd, scale) > tolerance && h > ENCODER_MIN_STEP {
            h /= 10.0;
            (fwd, bwd) = sides(j, h, &mut reference)?;
        }
        numeric.push(0.5 * (fwd + bwd));
    }
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n, scale))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: "vision_encoder_stem".into(),
        max_rel_error: vec![worst],
        tolerance,
    })
}

fn three<X: std::fmt::Debug>(v: Vec<X>) -> [X; 3] {
    v.try_into().expect("three scales")
}

/// Attention map values rescaled to 8-bit grayscale.
pub fn attention_to_gray<T: Scalar>(map: &[T]) -> Vec<u8> {
    map.iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_views: usize, res: usize) -> EncoderConfig {
        EncoderConfig {
            n_views,
            resolution: res,
            ..EncoderConfig::default()
        }
    }

    fn build(cfg: EncoderConfig) -> (ParamStore<f64>, VisionEncoder) {
        let mut store = ParamStore::new();
        let enc = VisionEncoder::new(&mut store, cfg, &mut seeded_rng(5)).unwrap();
        (store, enc)
    }

    fn image(b: usize, n: usize, res: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seeded_rng(seed);
        Tensor::from_fn(&[b, n, 3, res, res], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn embedding_widths() {
        assert_eq!(EncoderConfig::multi_view().embed_dim(), 144);
        assert_eq!(EncoderConfig::single_view().embed_dim(), 24);
    }

    #[test]
    fn resolution_must_be_multiple_of_four() {
        assert!(small(1, 34).validate().is_err());
        assert!(small(1, 36).validate().is_ok());
    }

    #[test]
    fn branch_grids_and_channels() {
        let (mut store, enc) = build(small(1, 32));
        let mut g = Graph::new(&mut store, false, 0);
        let x = g.input(image(1, 1, 32, 0).reshape(&[1, 3, 32, 32]).unwrap());
        let s = enc.stem_forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(s), &[1, 8, 32, 32]);
        let (h, m, l) = enc.branch_forward(&mut g, s).unwrap();
        assert_eq!(g.tape.shape(h), &[1, 16, 32, 32]);
        assert_eq!(g.tape.shape(m), &[1, 32, 16, 16]);
        assert_eq!(g.tape.shape(l), &[1, 64, 8, 8]);
        let p = enc.project_scales(&mut g, h, m, l).unwrap();
        for sc in Scale::ALL {
            assert_eq!(g.tape.shape(p.get(sc))[1], 8);
        }
    }

    #[test]
    fn stem_rejects_wrong_channels() {
        let (mut store, enc) = build(small(1, 32));
        let mut g = Graph::new(&mut store, false, 0);
        let x = g.input(Tensor::zeros(&[1, 4, 32, 32]));
        let err = enc.stem_forward(&mut g, x).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
    }

    #[test]
    fn zero_channel_mlp_halves_features() {
        let (mut store, enc) = build(small(1, 32));
        for ca in &enc.channel_att {
            for id in [ca.fc1.weight, ca.fc1.bias.unwrap(), ca.fc2.weight, ca.fc2.bias.unwrap()] {
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new(&mut store, false, 0);
        let eight = image(2, 1, 8, 3).reshape(&[2, 3, 8, 8]).unwrap();
        let eight = Tensor::from_fn(&[2, 8, 8, 8], |i| eight.data()[i % eight.numel()] - 0.5);
        let x = g.input(eight.clone());
        let (c, gate) = enc.channel_attention(&mut g, Scale::High, x).unwrap();
        assert!(g.tape.value(gate).data().iter().all(|&v| v == 0.5));
        for (a, b) in g.tape.value(c).data().iter().zip(eight.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn spatial_attention_on_constant_input_is_flat() {
        let (mut store, enc) = build(small(1, 32));
        let mut g = Graph::new(&mut store, false, 0);
        for s in Scale::ALL {
            let x = g.input(Tensor::full(&[1, 8, 12, 12], 0.7));
            let a = enc.spatial_attention(&mut g, s, x).unwrap();
            let v = g.tape.value(a);
            assert_eq!(v.shape(), &[1, 1, 12, 12]);
            assert!(v.data().iter().all(|&x| x > 0.0 && x < 1.0));
            // interior pixels see no zero padding
            let k = s.kernel() / 2;
            let centre = v.data()[6 * 12 + 6];
            for y in k..12 - k {
                for x in k..12 - k {
                    assert!((v.data()[y * 12 + x] - centre).abs() < 1e-3, "{s:?}");
                }
            }
        }
    }

    #[test]
    fn refine_masks() {
        let (mut store, enc) = build(small(1, 32));
        let mut g = Graph::new(&mut store, false, 0);
        let c = g.input(image(1, 1, 4, 1).reshape(&[1, 3, 4, 4]).unwrap());
        let one = g.input(Tensor::ones(&[1, 1, 4, 4]));
        let zero = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        let r1 = enc.refine(&mut g, c, one).unwrap();
        let r0 = enc.refine(&mut g, c, zero).unwrap();
        assert_eq!(g.tape.value(r1), g.tape.value(c));
        assert!(g.tape.value(r0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_rows_sum_to_one_and_equal_logits_average() {
        let (mut store, enc) = build(small(2, 32));
        let mut g = Graph::new(&mut store, false, 0);
        let out = enc.encode_views(&mut g, &image(2, 2, 32, 9)).unwrap();
        let gate = g.tape.value(out.gate);
        assert_eq!(gate.shape(), &[4, 24]);
        for row in gate.data().chunks(24) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        drop(g);
        // zero second layer: equal logits, every channel weighted 1/24
        store.value_mut(enc.gate.fc2.weight).data_mut().fill(0.0);
        store.value_mut(enc.gate.fc2.bias.unwrap()).data_mut().fill(0.0);
        let mut g = Graph::new(&mut store, false, 0);
        let x = g.input(image(1, 1, 32, 2).reshape(&[1, 3, 32, 32]).unwrap());
        let stem = enc.stem_forward(&mut g, x).unwrap();
        let (h, m, l) = enc.branch_forward(&mut g, stem).unwrap();
        let p = enc.project_scales(&mut g, h, m, l).unwrap();
        let (_, e, _) = enc.cross_scale_gate(&mut g, &p).unwrap();
        let up_m = g.tape.upsample_bilinear(p.mid, 32, 32).unwrap();
        let up_l = g.tape.upsample_bilinear(p.low, 32, 32).unwrap();
        let cat = g.tape.concat(&[p.high, up_m, up_l], 1).unwrap();
        let gap = g.tape.global_avg_pool(cat).unwrap();
        for (a, b) in g.tape.value(e).data().iter().zip(g.tape.value(gap).data()) {
            assert!((a - b / 24.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_ratio_mismatch_is_rejected() {
        let (mut store, enc) = build(small(1, 32));
        let mut g = Graph::new(&mut store, false, 0);
        let high = g.input(Tensor::zeros(&[1, 8, 16, 16]));
        let mid = g.input(Tensor::zeros(&[1, 8, 8, 8]));
        let low = g.input(Tensor::zeros(&[1, 8, 8, 8]));
        assert!(enc.cross_scale_gate(&mut g, &ScaleFeatures { high, mid, low }).is_err());
    }

    #[test]
    fn views_are_independent_and_permutable() {
        let (mut store, enc) = build(small(3, 32));
        let x = image(1, 3, 32, 4);
        let run = |store: &mut ParamStore<f64>, x: &Tensor<f64>| {
            let mut g = Graph::new(store, false, 0);
            let out = enc.encode_views(&mut g, x).unwrap();
            g.tape.value(out.embedding).clone()
        };
        let base = run(&mut store, &x);
        assert_eq!(base.shape(), &[1, 3, 24]);
        assert_eq!(run(&mut store, &x), base, "eval mode is deterministic");
        let view = 3 * 32 * 32;
        let mut zeroed = x.clone();
        zeroed.data_mut()[view..2 * view].fill(0.0);
        let z = run(&mut store, &zeroed);
        assert_eq!(z.data()[..24], base.data()[..24]);
        assert_ne!(z.data()[24..48], base.data()[24..48]);
        assert_eq!(z.data()[48..], base.data()[48..]);
        let mut swapped = x.clone();
        let d = swapped.data_mut();
        let (a, rest) = d.split_at_mut(view);
        a.swap_with_slice(&mut rest[view..2 * view]);
        let s = run(&mut store, &swapped);
        assert_eq!(s.data()[..24], base.data()[48..]);
        assert_eq!(s.data()[48..], base.data()[..24]);
    }

    #[test]
    fn classify_shapes_and_identity_kernel() {
        let (mut store, enc) = build(small(1, 32));
        let lgb = enc.lgb.as_ref().unwrap();
        let mut g = Graph::new(&mut store, false, 0);
        let x = g.input(image(2, 1, 32, 6).reshape(&[2, 3, 32, 32]).unwrap());
        let out = enc.encode_flat(&mut g, x).unwrap();
        let logits = enc.classify(&mut g, out.fused).unwrap();
        assert_eq!(g.tape.shape(logits), &[2, 11]);
        let l = enc.lgb_forward(&mut g, out.fused).unwrap();
        assert_eq!(g.tape.shape(l)[1], 12);
        drop(g);
        // hypernetwork emitting a strongly peaked centre kernel
        store.value_mut(lgb.hyper.weight).data_mut().fill(0.0);
        let bias = store.value_mut(lgb.hyper.bias.unwrap()).data_mut();
        for (i, b) in bias.iter_mut().enumerate() {
            *b = if i % 9 == 4 { 60.0 } else { 0.0 };
        }
        let mut g = Graph::new(&mut store, false, 0);
        let f = g.input(image(1, 1, 8, 7).reshape(&[1, 3, 8, 8]).unwrap());
        let f = g.tape.concat(&[f, f, f, f, f, f, f, f], 1).unwrap();
        let k = enc.dynamic_kernels(&mut g, f).unwrap();
        let local = g.tape.dynamic_depthwise(f, k).unwrap();
        for (a, b) in g.tape.value(local).data().iter().zip(g.tape.value(f).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_samples_get_identical_kernels() {
        let (mut store, enc) = build(small(1, 32));
        let mut g = Graph::new(&mut store, false, 0);
        let one = image(1, 1, 8, 8).reshape(&[1, 3, 8, 8]).unwrap();
        let f = g.input(one);
        let f = g.tape.concat(&[f, f, f, f, f, f, f, f], 1).unwrap();
        let two = g.tape.concat(&[f, f], 0).unwrap();
        let k = enc.dynamic_kernels(&mut g, two).unwrap();
        let v = g.tape.value(k).data();
        let half = v.len() / 2;
        assert_eq!(v[..half], v[half..]);
    }

    #[test]
    fn headless_encoder_refuses_to_classify() {
        let (mut store, enc) = build(EncoderConfig {
            resolution: 32,
            ..EncoderConfig::multi_view()
        });
        let mut g = Graph::new(&mut store, false, 0);
        let f = g.input(Tensor::zeros(&[1, 24, 32, 32]));
        assert!(enc.classify(&mut g, f).is_err());
    }

    #[test]
    fn flops_scale_with_resolution_and_params_do_not() {
        let (s1, e1) = build(small(1, 32));
        let (s2, e2) = build(small(1, 64));
        assert_eq!(s1.count(&Group::ALL), s2.count(&Group::ALL));
        assert!(e2.flops(true) > 3 * e1.flops(true));
        assert!(e2.flops(false) > 3 * e1.flops(false));
        assert!(e1.flops(true) > e1.flops(false));
    }

    #[test]
    fn composed_encoder_gradients_match_in_single_precision() {
        let rep = stem_grad_check(1, 32, 1e-3).unwrap();
        assert!(rep.passed(), "{:?}", rep.max_rel_error);
    }

    #[test]
    fn gray_export_scales_to_byte_range() {
        assert_eq!(attention_to_gray(&[0.0f32, 0.5, 1.0]), vec![0, 128, 255]);
    }
}


