//! One joint training step: forward pass, label assignment, sampling and the combined loss node.

use rand::Rng;

use super::loss::{head_loss, rpn_loss, LossBreakdown, StageLoss};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::heads::RpnOutput;
use crate::model::Detector;
use crate::nn::{Graph, Var};
use crate::scalar::Scalar;
use crate::targets::{
    assign_classifier_labels, assign_rpn_labels, sample_proposal_minibatch, sample_rpn_minibatch, ProposalClass,
    RpnLabels,
};
use crate::tensor::Tensor;

/// Images `[N, 3, S, S]` with their ground-truth boxes.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub gts: Vec<Vec<BBox<T>>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.gts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gts.is_empty()
    }
}

/// A sampled proposal with its classifier label.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample<T> {
    pub image: usize,
    pub bbox: BBox<T>,
    pub class: ProposalClass,
    pub target: Option<[T; 4]>,
}

/// Everything the loss needs besides network outputs. Reusing a plan makes the
/// loss a smooth function of the parameters (labels and proposals frozen).
#[derive(Clone, Debug, PartialEq)]
pub struct LossPlan<T> {
    pub rpn_labels: Vec<RpnLabels<T>>,
    pub rpn_samples: Vec<Vec<usize>>,
    pub rois: Vec<RoiSample<T>>,
}

pub struct StepLoss<T> {
    pub loss: Var,
    pub breakdown: LossBreakdown<T>,
    pub plan: LossPlan<T>,
}

/// Builds the labels and samples for a batch from the current RPN outputs.
pub fn make_plan<T: Scalar, R: Rng + ?Sized>(
    det: &Detector<T>,
    outputs: &[RpnOutput<T>],
    gts: &[Vec<BBox<T>>],
    rng: &mut R,
) -> Result<LossPlan<T>> {
    let p = &det.config.proposals;
    let mut rpn_labels = Vec::with_capacity(outputs.len());
    let mut rpn_samples = Vec::with_capacity(outputs.len());
    let mut rois = Vec::new();
    for (i, (out, gt)) in outputs.iter().zip(gts).enumerate() {
        let labels = assign_rpn_labels(&det.anchors, gt);
        rpn_samples.push(sample_rpn_minibatch(&labels, p.rpn_batch_per_image, p.rpn_positive_fraction, rng)?);
        rpn_labels.push(labels);

        let mut proposals: Vec<BBox<T>> = det
            .proposals(out, p.post_nms_top_n_train)
            .into_iter()
            .map(|s| s.bbox)
            .collect();
        proposals.extend(gt.iter().copied());
        let labels = assign_classifier_labels(&proposals, gt);
        let picked = match sample_proposal_minibatch(&labels, p.head_batch_per_image, p.head_foreground_fraction, rng) {
            Ok(v) => v,
            Err(Error::EmptyMinibatch(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        rois.extend(picked.into_iter().map(|k| RoiSample {
            image: i,
            bbox: proposals[k],
            class: labels.cls[k],
            target: labels.reg_targets[k],
        }));
    }
    Ok(LossPlan {
        rpn_labels,
        rpn_samples,
        rois,
    })
}

fn stage_node<T: Scalar>(g: &mut Graph<'_, T>, s: &StageLoss<T>, logits: Var, deltas: Var) -> Result<(Var, Var)> {
    let ls = g.value(logits).shape().to_vec();
    let ds = g.value(deltas).shape().to_vec();
    let cls = g.scalar_with_grads(s.cls, vec![(logits, Tensor::from_vec(&ls, s.grad_logits.clone())?)]);
    let reg = g.scalar_with_grads(s.reg, vec![(deltas, Tensor::from_vec(&ds, s.grad_deltas.clone())?)]);
    Ok((cls, reg))
}

/// Records the joint multi-task loss of `batch` on `g`. With `plan = None`
/// labels and samples are drawn from `rng`.
pub fn step_loss<T: Scalar, R: Rng + ?Sized>(
    det: &Detector<T>,
    g: &mut Graph<'_, T>,
    batch: &Batch<T>,
    lambda: T,
    plan: Option<LossPlan<T>>,
    rng: &mut R,
) -> Result<StepLoss<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let x = g.input(batch.images.clone());
    let fw = det.forward(g, x)?;
    let plan = match plan {
        Some(p) => p,
        None => {
            let outs = RpnOutput::from_batched(g.value(fw.objectness), g.value(fw.deltas));
            make_plan(det, &outs, &batch.gts, rng)?
        }
    };

    let rpn = rpn_loss(
        g.value(fw.objectness).data(),
        g.value(fw.deltas).data(),
        &plan.rpn_labels,
        &plan.rpn_samples,
    )?;
    let (rpn_cls, rpn_reg) = stage_node(g, &rpn, fw.objectness, fw.deltas)?;
    let mut parts = vec![(rpn_cls, T::one()), (rpn_reg, lambda)];

    let head = if plan.rois.is_empty() {
        None
    } else {
        let boxes: Vec<(usize, BBox<T>)> = plan.rois.iter().map(|r| (r.image, r.bbox)).collect();
        let pooled = det.pool_rois(g, &fw.levels, &boxes)?;
        let out = det.classifier.forward(g, pooled)?;
        let classes: Vec<ProposalClass> = plan.rois.iter().map(|r| r.class).collect();
        let targets: Vec<Option<[T; 4]>> = plan.rois.iter().map(|r| r.target).collect();
        let h = head_loss(g.value(out.logits).data(), g.value(out.deltas).data(), &classes, &targets)?;
        let (hc, hr) = stage_node(g, &h, out.logits, out.deltas)?;
        parts.push((hc, T::one()));
        parts.push((hr, lambda));
        Some(h)
    };
    let loss = g.weighted_sum(&parts);
    Ok(StepLoss {
        loss,
        breakdown: LossBreakdown::combine(&rpn, head.as_ref(), lambda),
        plan,
    })
}
