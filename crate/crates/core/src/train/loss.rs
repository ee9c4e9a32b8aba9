//! Log-loss plus smooth L1 box regression, with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{sigmoid, softmax2};
use crate::scalar::Scalar;
use crate::targets::{ProposalClass, RpnLabels};

/// `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::lit(0.5) * x * x
    } else {
        a - T::lit(0.5)
    }
}

pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Normalized classification and regression terms of one stage, with
/// gradients w.r.t. the flat logits and deltas they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct StageLoss<T> {
    /// `(1 / N_cls) * sum of log-losses`
    pub cls: T,
    /// `(1 / N_reg) * sum of smooth L1 over positives`, before the `lambda` weight.
    pub reg: T,
    pub n_cls: usize,
    pub n_reg: usize,
    pub grad_logits: Vec<T>,
    pub grad_deltas: Vec<T>,
}

fn accumulate_reg<T: Scalar>(pred: &[T], target: &[T; 4], grad: &mut [T]) -> T {
    let mut sum = T::zero();
    for k in 0..4 {
        let d = pred[k] - target[k];
        sum += smooth_l1(d);
        grad[k] += smooth_l1_grad(d);
    }
    sum
}

fn finish<T: Scalar>(mut s: StageLoss<T>, cls_sum: T, reg_sum: T) -> StageLoss<T> {
    let nc = T::from_usize_lossy(s.n_cls);
    s.cls = cls_sum / nc;
    s.grad_logits.iter_mut().for_each(|g| *g /= nc);
    if s.n_reg > 0 {
        let nr = T::from_usize_lossy(s.n_reg);
        s.reg = reg_sum / nr;
        s.grad_deltas.iter_mut().for_each(|g| *g /= nr);
    }
    s
}

/// RPN loss over a batch. `logits` is `[N * A]`, `deltas` `[N * A * 4]`, both in
/// canonical anchor order per image; `sampled[i]` lists the anchors of image `i`
/// in its minibatch.
pub fn rpn_loss<T: Scalar>(
    logits: &[T],
    deltas: &[T],
    labels: &[RpnLabels<T>],
    sampled: &[Vec<usize>],
) -> Result<StageLoss<T>> {
    let n = labels.len();
    if sampled.len() != n || n == 0 || logits.len() % n != 0 || deltas.len() != 4 * logits.len() {
        return Err(Error::invalid("rpn loss inputs disagree in size"));
    }
    let a = logits.len() / n;
    let mut s = StageLoss {
        cls: T::zero(),
        reg: T::zero(),
        n_cls: 0,
        n_reg: 0,
        grad_logits: vec![T::zero(); logits.len()],
        grad_deltas: vec![T::zero(); deltas.len()],
    };
    let (mut cls_sum, mut reg_sum) = (T::zero(), T::zero());
    for (img, (lab, idx)) in labels.iter().zip(sampled).enumerate() {
        if lab.cls.len() != a {
            return Err(Error::invalid("rpn labels do not match the anchor count"));
        }
        for &i in idx {
            let y = match lab.cls[i] {
                1 => T::one(),
                0 => T::zero(),
                _ => return Err(Error::invalid(format!("neutral anchor {i} in rpn minibatch"))),
            };
            let j = img * a + i;
            let z = logits[j];
            cls_sum += softplus(z) - y * z;
            s.grad_logits[j] = sigmoid(z) - y;
            s.n_cls += 1;
            if lab.cls[i] == 1 {
                let o = 4 * j;
                reg_sum += accumulate_reg(&deltas[o..o + 4], &lab.reg_targets[i], &mut s.grad_deltas[o..o + 4]);
                s.n_reg += 1;
            }
        }
    }
    if s.n_cls == 0 {
        return Err(Error::EmptyMinibatch("no sampled anchors in the batch".into()));
    }
    Ok(finish(s, cls_sum, reg_sum))
}

/// Two-class cross-entropy and foreground box regression for sampled proposals.
/// `logits` is `[R * 2]` ordered (background, nodule), `deltas` `[R * 4]`.
pub fn head_loss<T: Scalar>(
    logits: &[T],
    deltas: &[T],
    classes: &[ProposalClass],
    targets: &[Option<[T; 4]>],
) -> Result<StageLoss<T>> {
    let r = classes.len();
    if logits.len() != 2 * r || deltas.len() != 4 * r || targets.len() != r {
        return Err(Error::invalid("classifier loss inputs disagree in size"));
    }
    if r == 0 {
        return Err(Error::EmptyMinibatch("no sampled proposals".into()));
    }
    let mut s = StageLoss {
        cls: T::zero(),
        reg: T::zero(),
        n_cls: r,
        n_reg: 0,
        grad_logits: vec![T::zero(); logits.len()],
        grad_deltas: vec![T::zero(); deltas.len()],
    };
    let (mut cls_sum, mut reg_sum) = (T::zero(), T::zero());
    for i in 0..r {
        let y = match classes[i] {
            ProposalClass::Foreground => 1,
            ProposalClass::Background => 0,
            ProposalClass::Discard => {
                return Err(Error::invalid(format!("discarded proposal {i} in classifier minibatch")))
            }
        };
        let l = [logits[2 * i], logits[2 * i + 1]];
        let m = l[0].max(l[1]);
        let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
        cls_sum += lse - l[y];
        let p = softmax2(l);
        for c in 0..2 {
            s.grad_logits[2 * i + c] = p[c] - if c == y { T::one() } else { T::zero() };
        }
        if y == 1 {
            let t = targets[i].ok_or_else(|| Error::invalid(format!("foreground proposal {i} lacks a target")))?;
            reg_sum += accumulate_reg(&deltas[4 * i..4 * i + 4], &t, &mut s.grad_deltas[4 * i..4 * i + 4]);
            s.n_reg += 1;
        }
    }
    Ok(finish(s, cls_sum, reg_sum))
}

/// Per-step (or per-epoch mean) loss components. The regression components
/// already carry the `lambda` weight, so `total` is their plain sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub rpn_cls: T,
    pub rpn_reg: T,
    pub head_cls: T,
    pub head_reg: T,
    pub total: T,
    /// `(rpn, head)` classification sample counts.
    pub n_cls: [usize; 2],
    /// `(rpn, head)` regression-active counts.
    pub n_reg: [usize; 2],
}

impl<T: Scalar> LossBreakdown<T> {
    /// `L = L_cls(rpn) + lambda L_reg(rpn) + L_cls(head) + lambda L_reg(head)`.
    pub fn combine(rpn: &StageLoss<T>, head: Option<&StageLoss<T>>, lambda: T) -> Self {
        let (head_cls, head_reg, hn_cls, hn_reg) = head.map_or((T::zero(), T::zero(), 0, 0), |h| {
            (h.cls, lambda * h.reg, h.n_cls, h.n_reg)
        });
        let rpn_reg = lambda * rpn.reg;
        Self {
            rpn_cls: rpn.cls,
            rpn_reg,
            head_cls,
            head_reg,
            total: rpn.cls + rpn_reg + head_cls + head_reg,
            n_cls: [rpn.n_cls, hn_cls],
            n_reg: [rpn.n_reg, hn_reg],
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("rpn_cls", self.rpn_cls),
            ("rpn_reg", self.rpn_reg),
            ("head_cls", self.head_cls),
            ("head_reg", self.head_reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    /// Component-wise mean; counts are summed.
    pub fn mean(items: &[Self]) -> Self {
        let k = T::from_usize_lossy(items.len().max(1));
        let mut m = Self {
            rpn_cls: T::zero(),
            rpn_reg: T::zero(),
            head_cls: T::zero(),
            head_reg: T::zero(),
            total: T::zero(),
            n_cls: [0; 2],
            n_reg: [0; 2],
        };
        for b in items {
            m.rpn_cls += b.rpn_cls / k;
            m.rpn_reg += b.rpn_reg / k;
            m.head_cls += b.head_cls / k;
            m.head_reg += b.head_reg / k;
            m.total += b.total / k;
            for s in 0..2 {
                m.n_cls[s] += b.n_cls[s];
                m.n_reg[s] += b.n_reg[s];
            }
        }
        m
    }
}
