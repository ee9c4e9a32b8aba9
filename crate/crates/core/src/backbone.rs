//! DPN encoder and the two U-Net decoders that emit the five-level pyramid.
//!
//! Every stream in the network is a [`DualStream`]: one tensor whose leading
//! channels form the residual path and whose trailing channels form the dense
//! path. A [`DpnBlock`] adds the first `C_r` channels of its transform output
//! onto the residual path and appends the remaining `k` channels to the dense
//! path.
//!
//! Decoder wiring, coarsest level first:
//!
//! * Type I: `P0 = proj(E4)`; `P(l) = conv3x3(block_keep(up2x(P(l-1)) ++ skip))`.
//! * Type II: `P0 = proj(E4)`; `U = block_up2(P(l-1))`, whose shortcut is the
//!   pre-upsampling stream interpolated 2x, so the skip is both added and
//!   concatenated; then `P(l) = conv3x3(block_keep(U ++ skip))`.
//!
//! The stride-2 level has no encoder counterpart and skips the concatenation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBn, ConvGeom, ConvTranspose2d, BatchNorm2d, Graph, ParamStore, Scope, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pyramid strides, coarsest first.
pub const PYRAMID_STRIDES: [usize; 5] = [32, 16, 8, 4, 2];

/// Encoder output strides for stages 1 through 4.
pub const ENCODER_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderType {
    #[serde(rename = "type1")]
    TypeI,
    #[serde(rename = "type2")]
    TypeII,
}

impl std::str::FromStr for DecoderType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "type1" | "typei" | "i" | "1" => Ok(DecoderType::TypeI),
            "type2" | "typeii" | "ii" | "2" => Ok(DecoderType::TypeII),
            other => Err(Error::invalid(format!("unknown decoder type {other:?}"))),
        }
    }
}

impl std::fmt::Display for DecoderType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoderType::TypeI => "type1",
            DecoderType::TypeII => "type2",
        })
    }
}

/// Backbone hyper-parameters. Widths are per encoder stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_block_counts: [usize; 4],
    pub stage_residual_widths: [usize; 4],
    /// Width of the grouped 3x3 convolution inside each block.
    pub stage_bottleneck_widths: [usize; 4],
    pub dense_increment_k: [usize; 4],
    pub groups: usize,
    pub decoder_type: DecoderType,
    pub pyramid_channels: usize,
    pub decoder_bottleneck_width: usize,
    pub decoder_dense_k: usize,
}

impl Default for BackboneConfig {
    /// DPN-92 proportions at a quarter of the width and with fewer blocks.
    fn default() -> Self {
        Self {
            stem_channels: 64,
            stage_block_counts: [2, 2, 4, 2],
            stage_residual_widths: [64, 128, 256, 512],
            stage_bottleneck_widths: [32, 64, 96, 192],
            dense_increment_k: [16, 32, 24, 64],
            groups: 16,
            decoder_type: DecoderType::TypeII,
            pyramid_channels: 64,
            decoder_bottleneck_width: 32,
            decoder_dense_k: 16,
        }
    }
}

impl BackboneConfig {
    /// Tiny configuration for gradient checks and desk-scale training.
    pub fn micro() -> Self {
        Self {
            stem_channels: 8,
            stage_block_counts: [1, 1, 1, 1],
            stage_residual_widths: [8, 8, 8, 8],
            stage_bottleneck_widths: [4, 4, 4, 4],
            dense_increment_k: [4, 4, 4, 4],
            groups: 2,
            decoder_type: DecoderType::TypeII,
            pyramid_channels: 8,
            decoder_bottleneck_width: 4,
            decoder_dense_k: 4,
        }
    }

    pub fn with_decoder(mut self, decoder: DecoderType) -> Self {
        self.decoder_type = decoder;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.stem_channels, self.groups, self.pyramid_channels, self.decoder_bottleneck_width]
            .iter()
            .chain(&self.stage_block_counts)
            .chain(&self.stage_residual_widths)
            .chain(&self.stage_bottleneck_widths)
            .chain(&self.dense_increment_k)
            .all(|&v| v > 0);
        if !positive || self.decoder_dense_k == 0 {
            return Err(Error::invalid("backbone widths, counts and groups must be positive"));
        }
        for &w in self.stage_bottleneck_widths.iter().chain([&self.decoder_bottleneck_width]) {
            if w % self.groups != 0 {
                return Err(Error::invalid(format!(
                    "groups {} does not divide bottleneck width {w}",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// Initial dense width created by the projection block of stage `s`.
    pub fn initial_dense(&self, stage: usize) -> usize {
        2 * self.dense_increment_k[stage]
    }

    /// Channels of encoder stage `s` output: `C_r + C_d0 + k * blocks`.
    pub fn stage_channels(&self, stage: usize) -> (usize, usize) {
        let dense = self.initial_dense(stage) + self.dense_increment_k[stage] * self.stage_block_counts[stage];
        (self.stage_residual_widths[stage], dense)
    }
}

/// A stream split into a residual part (leading channels) and a dense part.
#[derive(Clone, Copy, Debug)]
pub struct DualStream {
    pub var: Var,
    pub residual: usize,
    pub dense: usize,
}

impl DualStream {
    pub fn channels(&self) -> usize {
        self.residual + self.dense
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialMode {
    Keep,
    Down2,
    Up2,
}

#[derive(Clone, Debug)]
enum Shortcut {
    Identity,
    /// Strided 1x1 projection onto `(C_r, C_d0)`.
    Project { conv: ConvBn, dense: usize },
    /// 2x nearest-neighbour interpolation, with an optional 1x1 projection of the residual part.
    Interpolate { project: Option<ConvBn> },
}

#[derive(Clone, Debug)]
enum GroupedConv {
    Conv(ConvBn),
    Transposed { conv: ConvTranspose2d, bn: BatchNorm2d },
}

/// One dual-path bottleneck block: 1x1, grouped 3x3, 1x1 with a split output.
#[derive(Clone, Debug)]
pub struct DpnBlock {
    reduce: ConvBn,
    grouped: GroupedConv,
    expand: ConvBn,
    shortcut: Shortcut,
    pub mode: SpatialMode,
    pub in_residual: usize,
    pub in_dense: usize,
    pub out_residual: usize,
    pub k: usize,
}

impl DpnBlock {
    /// Block whose shortcut is identity (`Keep`) or interpolation (`Up2`).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        in_residual: usize,
        in_dense: usize,
        out_residual: usize,
        bottleneck: usize,
        k: usize,
        groups: usize,
        mode: SpatialMode,
    ) -> Result<Self> {
        let shortcut = match mode {
            SpatialMode::Keep if in_residual == out_residual => Shortcut::Identity,
            SpatialMode::Keep | SpatialMode::Down2 => {
                return Err(Error::invalid(
                    "identity shortcut needs equal residual widths; use DpnBlock::projection",
                ))
            }
            SpatialMode::Up2 => Shortcut::Interpolate {
                project: (in_residual != out_residual).then(|| {
                    ConvBn::new(store, &scope.child("shortcut"), in_residual, out_residual, 1, 1, 1, false)
                }),
            },
        };
        Self::build(store, scope, in_residual, in_dense, out_residual, bottleneck, k, groups, mode, shortcut)
    }

    /// First block of an encoder stage: projects the shortcut to `(C_r, 2k)`.
    #[allow(clippy::too_many_arguments)]
    pub fn projection<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        in_channels: usize,
        out_residual: usize,
        bottleneck: usize,
        k: usize,
        groups: usize,
        mode: SpatialMode,
    ) -> Result<Self> {
        if mode == SpatialMode::Up2 {
            return Err(Error::invalid("projection blocks do not upsample"));
        }
        let stride = if mode == SpatialMode::Down2 { 2 } else { 1 };
        let dense = 2 * k;
        let conv = ConvBn::new(store, &scope.child("shortcut"), in_channels, out_residual + dense, 1, stride, 1, false);
        Self::build(
            store,
            scope,
            in_channels,
            0,
            out_residual,
            bottleneck,
            k,
            groups,
            mode,
            Shortcut::Project { conv, dense },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        in_residual: usize,
        in_dense: usize,
        out_residual: usize,
        bottleneck: usize,
        k: usize,
        groups: usize,
        mode: SpatialMode,
        shortcut: Shortcut,
    ) -> Result<Self> {
        if bottleneck % groups != 0 {
            return Err(Error::invalid(format!("groups {groups} does not divide bottleneck {bottleneck}")));
        }
        let in_channels = in_residual + in_dense;
        let reduce = ConvBn::new(store, &scope.child("conv1"), in_channels, bottleneck, 1, 1, 1, true);
        let grouped = match mode {
            SpatialMode::Keep | SpatialMode::Down2 => {
                let stride = if mode == SpatialMode::Down2 { 2 } else { 1 };
                GroupedConv::Conv(ConvBn::new(store, &scope.child("conv2"), bottleneck, bottleneck, 3, stride, groups, true))
            }
            SpatialMode::Up2 => GroupedConv::Transposed {
                conv: ConvTranspose2d::new(store, &scope.child("conv2.conv"), bottleneck, bottleneck, 3, 2, groups, false),
                bn: BatchNorm2d::new(store, &scope.child("conv2.bn"), bottleneck),
            },
        };
        let expand = ConvBn::new(store, &scope.child("conv3"), bottleneck, out_residual + k, 1, 1, 1, false);
        Ok(Self {
            reduce,
            grouped,
            expand,
            shortcut,
            mode,
            in_residual,
            in_dense,
            out_residual,
            k,
        })
    }

    pub fn out_dense(&self) -> usize {
        match &self.shortcut {
            Shortcut::Project { dense, .. } => dense + self.k,
            _ => self.in_dense + self.k,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: DualStream) -> Result<DualStream> {
        let expected_in = match &self.shortcut {
            Shortcut::Project { .. } => self.in_residual,
            _ => self.in_residual + self.in_dense,
        };
        if x.channels() != expected_in
            || (!matches!(self.shortcut, Shortcut::Project { .. }) && x.residual != self.in_residual)
        {
            return Err(Error::invalid(format!(
                "dpn block expects ({}, {}) channels, got ({}, {})",
                self.in_residual, self.in_dense, x.residual, x.dense
            )));
        }

        let t = self.reduce.forward(g, x.var)?;
        let t = match &self.grouped {
            GroupedConv::Conv(c) => c.forward(g, t)?,
            GroupedConv::Transposed { conv, bn } => {
                let t = conv.forward(g, t)?;
                let t = bn.forward(g, t)?;
                g.relu(t)
            }
        };
        let t = self.expand.forward(g, t)?;
        let f_res = g.slice_channels(t, 0, self.out_residual)?;
        let f_dense = g.slice_channels(t, self.out_residual, self.k)?;

        let (s_res, s_dense) = match &self.shortcut {
            Shortcut::Identity => split(g, x)?,
            Shortcut::Project { conv, dense } => {
                let p = conv.forward(g, x.var)?;
                split(
                    g,
                    DualStream {
                        var: p,
                        residual: self.out_residual,
                        dense: *dense,
                    },
                )?
            }
            Shortcut::Interpolate { project } => {
                let up = g.upsample2x(x.var);
                let (r, d) = split(
                    g,
                    DualStream {
                        var: up,
                        residual: x.residual,
                        dense: x.dense,
                    },
                )?;
                let r = match project {
                    Some(p) => p.forward(g, r)?,
                    None => r,
                };
                (r, d)
            }
        };

        let res = g.add(s_res, f_res)?;
        let res = g.relu(res);
        let mut parts = vec![res];
        parts.extend(s_dense);
        parts.push(f_dense);
        let var = g.concat_channels(&parts)?;
        Ok(DualStream {
            var,
            residual: self.out_residual,
            dense: self.out_dense(),
        })
    }
}

fn split<T: Scalar>(g: &mut Graph<'_, T>, x: DualStream) -> Result<(Var, Option<Var>)> {
    if x.dense == 0 {
        return Ok((x.var, None));
    }
    let r = g.slice_channels(x.var, 0, x.residual)?;
    let d = g.slice_channels(x.var, x.residual, x.dense)?;
    Ok((r, Some(d)))
}

/// 7x7 stride-2 convolution, batch norm, ReLU, 3x3 stride-2 max pooling.
#[derive(Clone, Debug)]
pub struct Stem {
    conv: ConvBn,
    pub channels: usize,
}

impl Stem {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, scope: &Scope, channels: usize) -> Self {
        Self {
            conv: ConvBn::new(store, &scope.child("conv"), 3, channels, 7, 2, 1, true),
            channels,
        }
    }

    /// The whole stem output starts on the residual path; the dense path is empty.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<DualStream> {
        let (_, c, h, w) = g.value(image).dims4();
        if c != 3 {
            return Err(Error::invalid(format!("stem expects 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input size {h}x{w} must be a positive multiple of 32"
            )));
        }
        let y = self.conv.forward(g, image)?;
        let y = g.max_pool(y, ConvGeom::new(3, 2, 1, 1))?;
        Ok(DualStream {
            var: y,
            residual: self.channels,
            dense: 0,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<Vec<DpnBlock>>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, scope: &Scope, cfg: &BackboneConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut in_channels = cfg.stem_channels;
        for s in 0..4 {
            let sc = scope.child(format!("stage{}", s + 1));
            let mode = if s == 0 { SpatialMode::Keep } else { SpatialMode::Down2 };
            let (r, k, bw) = (cfg.stage_residual_widths[s], cfg.dense_increment_k[s], cfg.stage_bottleneck_widths[s]);
            let mut blocks = Vec::with_capacity(cfg.stage_block_counts[s]);
            let first = DpnBlock::projection(store, &sc.child("block0"), in_channels, r, bw, k, cfg.groups, mode)?;
            let mut dense = first.out_dense();
            blocks.push(first);
            for b in 1..cfg.stage_block_counts[s] {
                let blk = DpnBlock::new(
                    store,
                    &sc.child(format!("block{b}")),
                    r,
                    dense,
                    r,
                    bw,
                    k,
                    cfg.groups,
                    SpatialMode::Keep,
                )?;
                dense = blk.out_dense();
                blocks.push(blk);
            }
            in_channels = r + dense;
            stages.push(blocks);
        }
        Ok(Self { stages })
    }

    /// Stage outputs at strides 4, 8, 16, 32.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, stem: DualStream) -> Result<Vec<DualStream>> {
        let mut x = stem;
        let mut outs = Vec::with_capacity(4);
        for blocks in &self.stages {
            for b in blocks {
                x = b.forward(g, x)?;
            }
            outs.push(x);
        }
        Ok(outs)
    }
}

#[derive(Clone, Debug)]
struct DecoderStep {
    /// Type II only: upsampling DPN block.
    up: Option<DpnBlock>,
    block: DpnBlock,
    /// Encoder stage (0-based) concatenated at this level, if any.
    skip_stage: Option<usize>,
    out_conv: ConvBn,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub decoder_type: DecoderType,
    lateral: ConvBn,
    steps: Vec<DecoderStep>,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, scope: &Scope, cfg: &BackboneConfig) -> Result<Self> {
        let pc = cfg.pyramid_channels;
        let (r4, d4) = cfg.stage_channels(3);
        let lateral = ConvBn::new(store, &scope.child("lateral"), r4 + d4, pc, 1, 1, 1, true);
        let mut steps = Vec::with_capacity(4);
        // levels at strides 16, 8, 4 take encoder stages 3, 2, 1; stride 2 has no skip
        for (i, skip_stage) in [Some(2usize), Some(1), Some(0), None].into_iter().enumerate() {
            let sc = scope.child(format!("level{}", i + 1));
            let skip = skip_stage.map_or(0, |s| {
                let (r, d) = cfg.stage_channels(s);
                r + d
            });
            let up = match cfg.decoder_type {
                DecoderType::TypeI => None,
                DecoderType::TypeII => Some(DpnBlock::new(
                    store,
                    &sc.child("up"),
                    pc,
                    0,
                    pc,
                    cfg.decoder_bottleneck_width,
                    cfg.decoder_dense_k,
                    cfg.groups,
                    SpatialMode::Up2,
                )?),
            };
            let in_dense = up.as_ref().map_or(0, |u| u.out_dense()) + skip;
            let block = DpnBlock::new(
                store,
                &sc.child("block"),
                pc,
                in_dense,
                pc,
                cfg.decoder_bottleneck_width,
                cfg.decoder_dense_k,
                cfg.groups,
                SpatialMode::Keep,
            )?;
            let out_conv = ConvBn::new(store, &sc.child("out"), pc + block.out_dense(), pc, 3, 1, 1, true);
            steps.push(DecoderStep {
                up,
                block,
                skip_stage,
                out_conv,
            });
        }
        Ok(Self {
            decoder_type: cfg.decoder_type,
            lateral,
            steps,
        })
    }

    /// Five pyramid levels, coarsest (stride 32) first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, stages: &[DualStream]) -> Result<Vec<Var>> {
        if stages.len() != 4 {
            return Err(Error::invalid(format!("decoder needs 4 encoder stages, got {}", stages.len())));
        }
        let pc = self.lateral.conv.out_channels;
        let mut levels = Vec::with_capacity(5);
        let mut prev = self.lateral.forward(g, stages[3].var)?;
        levels.push(prev);
        for step in &self.steps {
            let stream = DualStream {
                var: prev,
                residual: pc,
                dense: 0,
            };
            let upsampled = match &step.up {
                None => DualStream {
                    var: g.upsample2x(prev),
                    ..stream
                },
                Some(up) => up.forward(g, stream)?,
            };
            let merged = match step.skip_stage {
                Some(s) => {
                    let skip = stages[s];
                    DualStream {
                        var: g.concat_channels(&[upsampled.var, skip.var])?,
                        residual: upsampled.residual,
                        dense: upsampled.dense + skip.channels(),
                    }
                }
                None => upsampled,
            };
            let y = step.block.forward(g, merged)?;
            prev = step.out_conv.forward(g, y.var)?;
            levels.push(prev);
        }
        Ok(levels)
    }
}

/// Stem, encoder and decoder.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Stem,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, scope: &Scope, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            stem: Stem::new(store, &scope.child("stem"), config.stem_channels),
            encoder: Encoder::new(store, &scope.child("encoder"), config)?,
            decoder: Decoder::new(store, &scope.child("decoder"), config)?,
        })
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Vec<DualStream>> {
        let s = self.stem.forward(g, image)?;
        self.encoder.forward(g, s)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Vec<Var>> {
        let stages = self.encode(g, image)?;
        self.decoder.forward(g, &stages)
    }
}

/// Materialized pyramid: five `[N, C, H_l, W_l]` maps, coarsest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
    pub strides: Vec<usize>,
    pub anchor_scale_px: Vec<T>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(levels: Vec<Tensor<T>>, anchor_scale_px: Vec<T>) -> Result<Self> {
        if levels.len() != 5 || anchor_scale_px.len() != 5 {
            return Err(Error::invalid("a feature pyramid has exactly 5 levels"));
        }
        for pair in levels.windows(2) {
            let (_, _, h0, w0) = pair[0].dims4();
            let (_, _, h1, w1) = pair[1].dims4();
            if h1 != 2 * h0 || w1 != 2 * w0 {
                return Err(Error::invalid("pyramid levels must double in size coarse to fine"));
            }
        }
        Ok(Self {
            levels,
            strides: PYRAMID_STRIDES.to_vec(),
            anchor_scale_px,
        })
    }

    pub fn channels(&self) -> usize {
        self.levels[0].dims4().1
    }

    /// `(H_l, W_l)` per level.
    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|t| {
                let (_, _, h, w) = t.dims4();
                (h, w)
            })
            .collect()
    }
}
