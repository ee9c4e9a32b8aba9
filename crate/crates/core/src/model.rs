//! Full detector: backbone, RPN, ROI Align and classifier, plus the inference pipeline.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, DecoderType, FeaturePyramid, PYRAMID_STRIDES};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::heads::{sigmoid, softmax2, ClassifierHead, HeadsConfig, RpnHead, RpnOutput};
use crate::nn::{Graph, Mode, ParamStore, RoiRef, Scope, Var};
use crate::scalar::Scalar;
use crate::targets::{anchors_for, decode_box_clamped, nms, AnchorConfig, AnchorSet};
use crate::tensor::Tensor;

/// Proposal, sampling and post-processing settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub rpn_batch_per_image: usize,
    pub rpn_positive_fraction: f64,
    /// Highest-scoring anchors decoded before proposal NMS.
    pub pre_nms_top_n: usize,
    pub proposal_nms_iou: f64,
    pub post_nms_top_n_train: usize,
    pub post_nms_top_n_eval: usize,
    /// Proposals narrower or shorter than this (pixels) are dropped.
    pub min_proposal_size: f64,
    pub head_batch_per_image: usize,
    pub head_foreground_fraction: f64,
    pub final_nms_iou: f64,
    pub score_floor: f64,
    pub max_detections_per_image: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            rpn_batch_per_image: 256,
            rpn_positive_fraction: 0.5,
            pre_nms_top_n: 6000,
            proposal_nms_iou: 0.7,
            post_nms_top_n_train: 2000,
            post_nms_top_n_eval: 300,
            min_proposal_size: 1.0,
            head_batch_per_image: 128,
            head_foreground_fraction: 0.25,
            final_nms_iou: 0.3,
            score_floor: 0.05,
            max_detections_per_image: 100,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.rpn_positive_fraction, self.head_foreground_fraction];
        if fracs.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::invalid("sampling fractions must lie in (0, 1]"));
        }
        let ious = [self.proposal_nms_iou, self.final_nms_iou];
        if ious.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::invalid("nms thresholds must lie in (0, 1]"));
        }
        if [
            self.rpn_batch_per_image,
            self.pre_nms_top_n,
            self.post_nms_top_n_train,
            self.post_nms_top_n_eval,
            self.head_batch_per_image,
            self.max_detections_per_image,
        ]
        .contains(&0)
        {
            return Err(Error::invalid("proposal and batch counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.score_floor) || !(self.min_proposal_size >= 0.0) {
            return Err(Error::invalid("score_floor must lie in [0, 1) and min size be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Side of the square network input.
    pub image_size: usize,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub heads: HeadsConfig,
    #[serde(default)]
    pub anchors: AnchorConfig,
    #[serde(default)]
    pub proposals: ProposalConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            backbone: BackboneConfig::default(),
            heads: HeadsConfig::default(),
            anchors: AnchorConfig::default(),
            proposals: ProposalConfig::default(),
        }
    }
}

impl DetectorConfig {
    /// Small network on 64 px inputs.
    pub fn micro() -> Self {
        Self {
            image_size: 64,
            backbone: BackboneConfig::micro(),
            heads: HeadsConfig::micro(),
            anchors: AnchorConfig::default(),
            proposals: ProposalConfig {
                pre_nms_top_n: 1000,
                post_nms_top_n_train: 256,
                head_batch_per_image: 32,
                ..ProposalConfig::default()
            },
        }
    }

    pub fn with_decoder(mut self, decoder: DecoderType) -> Self {
        self.backbone.decoder_type = decoder;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.heads.validate()?;
        self.proposals.validate()?;
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::invalid(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.anchors.scales_px.iter().chain(&self.anchors.ratios).any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("anchor scales and ratios must be positive"));
        }
        Ok(())
    }
}

/// One scored box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox<T> {
    pub bbox: BBox<T>,
    pub score: T,
}

/// Network graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub levels: Vec<Var>,
    /// `[N, A]` objectness logits.
    pub objectness: Var,
    /// `[N, 4A]` anchor deltas.
    pub deltas: Var,
}

/// Parameters and structure of the whole detector.
#[derive(Clone, Debug)]
pub struct Detector<T: Scalar> {
    pub config: DetectorConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub rpn: RpnHead,
    pub classifier: ClassifierHead,
    pub anchors: AnchorSet<T>,
}

impl<T: Scalar> Detector<T> {
    /// Builds the structure with zero-valued parameters; see `train::init_parameters`.
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &Scope::root("backbone"), &config.backbone)?;
        let c = config.backbone.pyramid_channels;
        let rpn = RpnHead::new(&mut store, &Scope::root("rpn"), c);
        let classifier = ClassifierHead::new(&mut store, &Scope::root("classifier"), c, &config.heads);
        let anchors = anchors_for(config.image_size, &config.anchors)?;
        Ok(Self {
            config,
            store,
            backbone,
            rpn,
            classifier,
            anchors,
        })
    }

    pub fn decoder_type(&self) -> DecoderType {
        self.config.backbone.decoder_type
    }

    pub fn scales(&self) -> Vec<T> {
        self.anchors.scales_px.clone()
    }

    pub fn strides(&self) -> Vec<T> {
        PYRAMID_STRIDES.iter().map(|&s| T::from_usize_lossy(s)).collect()
    }

    pub fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::invalid(format!(
                "detector expects [N, 3, {size}, {size}] input, got {s:?}"
            )));
        }
        Ok(())
    }

    /// Backbone plus RPN on `[N, 3, S, S]` images.
    pub fn forward(&self, g: &mut Graph<'_, T>, images: Var) -> Result<ForwardVars> {
        self.check_input(g.value(images))?;
        let levels = self.backbone.forward(g, images)?;
        let rpn = self.rpn.forward(g, &levels)?;
        Ok(ForwardVars {
            levels,
            objectness: rpn.objectness,
            deltas: rpn.deltas,
        })
    }

    /// Pools `rois` (`(image index, box)`) from the pyramid, each from its scale-matched level.
    pub fn pool_rois(&self, g: &mut Graph<'_, T>, levels: &[Var], rois: &[(usize, BBox<T>)]) -> Result<Var> {
        let scales = self.scales();
        let refs = rois
            .iter()
            .map(|&(batch, bbox)| (crate::heads::assign_roi_level(&bbox, &scales), RoiRef { batch, bbox }))
            .collect();
        g.roi_align(
            levels,
            &self.strides(),
            refs,
            self.config.heads.pooled_size,
            self.config.heads.sampling_ratio,
        )
    }

    /// Proposal boxes for one image: top anchors by objectness, decoded,
    /// clipped, size-filtered and thinned by NMS.
    pub fn proposals(&self, rpn: &RpnOutput<T>, post_nms_top_n: usize) -> Vec<ScoredBox<T>> {
        let p = &self.config.proposals;
        let size = T::from_usize_lossy(self.config.image_size);
        let min_size = T::lit(p.min_proposal_size);
        let mut order: Vec<usize> = (0..rpn.len()).collect();
        order.sort_by(|&a, &b| {
            rpn.objectness[b]
                .partial_cmp(&rpn.objectness[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(p.pre_nms_top_n);
        let mut boxes = Vec::with_capacity(order.len());
        let mut scores = Vec::with_capacity(order.len());
        for i in order {
            let decoded = decode_box_clamped(&self.anchors.boxes[i], &rpn.deltas[i]);
            if let Some(b) = decoded.clip(size, size) {
                if b.width() >= min_size && b.height() >= min_size {
                    boxes.push(b);
                    scores.push(sigmoid(rpn.objectness[i]));
                }
            }
        }
        let mut keep = nms(&boxes, &scores, T::lit(p.proposal_nms_iou));
        keep.truncate(post_nms_top_n);
        keep.into_iter()
            .map(|k| ScoredBox {
                bbox: boxes[k],
                score: scores[k],
            })
            .collect()
    }

    /// Materializes the pyramid of `[N, 3, S, S]` images in eval mode.
    pub fn pyramid(&self, images: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let x = g.input(images.clone());
        let levels = self.backbone.forward(&mut g, x)?;
        let levels = levels.iter().map(|&v| g.value(v).clone()).collect();
        FeaturePyramid::new(levels, self.scales())
    }

    /// Eval-mode detection on a batch. Confidence is RPN objectness times the
    /// classifier's nodule probability; boxes are refined by the classifier deltas.
    pub fn detect(&self, images: &Tensor<T>) -> Result<Vec<Vec<ScoredBox<T>>>> {
        let p = &self.config.proposals;
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let x = g.input(images.clone());
        let fw = self.forward(&mut g, x)?;
        let outs = RpnOutput::from_batched(g.value(fw.objectness), g.value(fw.deltas));
        let mut rois = Vec::new();
        let mut props = Vec::new();
        for (i, o) in outs.iter().enumerate() {
            for sb in self.proposals(o, p.post_nms_top_n_eval) {
                rois.push((i, sb.bbox));
                props.push(sb);
            }
        }
        let n = outs.len();
        let mut result = vec![Vec::new(); n];
        if rois.is_empty() {
            return Ok(result);
        }
        let pooled = self.pool_rois(&mut g, &fw.levels, &rois)?;
        let head = self.classifier.forward(&mut g, pooled)?;
        let logits = g.value(head.logits).data();
        let deltas = g.value(head.deltas).data();
        let size = T::from_usize_lossy(self.config.image_size);
        let floor = T::lit(p.score_floor);
        let mut per_image: Vec<(Vec<BBox<T>>, Vec<T>)> = vec![(Vec::new(), Vec::new()); n];
        for (r, &(i, pbox)) in rois.iter().enumerate() {
            let prob = softmax2([logits[2 * r], logits[2 * r + 1]])[1];
            let conf = prob * props[r].score;
            if conf < floor {
                continue;
            }
            let d = [deltas[4 * r], deltas[4 * r + 1], deltas[4 * r + 2], deltas[4 * r + 3]];
            if let Some(b) = decode_box_clamped(&pbox, &d).clip(size, size) {
                per_image[i].0.push(b);
                per_image[i].1.push(conf);
            }
        }
        for (i, (boxes, scores)) in per_image.into_iter().enumerate() {
            let mut keep = nms(&boxes, &scores, T::lit(p.final_nms_iou));
            keep.truncate(p.max_detections_per_image);
            result[i] = keep
                .into_iter()
                .map(|k| ScoredBox {
                    bbox: boxes[k],
                    score: scores[k],
                })
                .collect();
        }
        Ok(result)
    }
}
