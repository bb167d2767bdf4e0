//! Box losses, the consistency-weighted binary Joint Loss, its ablation
//! baselines (focal / BCE), and weighted total-loss composition.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Weights for the total loss and the Joint Loss scale factor alpha.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
    pub joint: f64,
    pub mal: f64,
    pub distill: f64,
    pub lm: f64,
    pub denoise: f64,
    /// Joint Loss scale factor; exponent 1-2*alpha must stay positive.
    pub alpha: f64,
    /// Weight of per-layer auxiliary box/binary terms.
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            giou: 2.0,
            l1: 5.0,
            joint: 1.0,
            mal: 1.0,
            distill: 1.0,
            lm: 1.0,
            denoise: 1.0,
            alpha: 0.25,
            aux: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.giou,
            self.l1,
            self.joint,
            self.mal,
            self.distill,
            self.lm,
            self.denoise,
            self.aux,
        ];
        if all.iter().any(|w| *w < 0.0) {
            return Err(Error::Validation("loss weights must be >= 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::Validation(format!(
                "alpha must lie in (0, 0.5), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Differentiable per-pair GIoU of (P,4) cxcywh boxes; output (P,1).
pub fn giou_pairs(g: &mut Graph, pred: NodeId, gt: NodeId) -> NodeId {
    let half = |g: &mut Graph, x: NodeId| g.mul_scalar(x, 0.5);

    let take = |g: &mut Graph, t: NodeId, c: usize| g.slice_cols(t, c, 1);
    let (pcx, pcy, pw, ph) = (take(g, pred, 0), take(g, pred, 1), take(g, pred, 2), take(g, pred, 3));
    let (gcx, gcy, gw, gh) = (take(g, gt, 0), take(g, gt, 1), take(g, gt, 2), take(g, gt, 3));

    let phw = half(g, pw);
    let phh = half(g, ph);
    let ghw = half(g, gw);
    let ghh = half(g, gh);

    let px1 = g.sub(pcx, phw);
    let px2 = g.add(pcx, phw);
    let py1 = g.sub(pcy, phh);
    let py2 = g.add(pcy, phh);
    let gx1 = g.sub(gcx, ghw);
    let gx2 = g.add(gcx, ghw);
    let gy1 = g.sub(gcy, ghh);
    let gy2 = g.add(gcy, ghh);

    // Intersection (clamped at zero), union, enclosing box.
    let ix1 = g.max_elem(px1, gx1);
    let ix2 = g.min_elem(px2, gx2);
    let iy1 = g.max_elem(py1, gy1);
    let iy2 = g.min_elem(py2, gy2);
    let iw_raw = g.sub(ix2, ix1);
    let ih_raw = g.sub(iy2, iy1);
    let iw = g.relu(iw_raw);
    let ih = g.relu(ih_raw);
    let inter = g.mul(iw, ih);

    let pa = g.mul(pw, ph);
    let ga = g.mul(gw, gh);
    let sum_areas = g.add(pa, ga);
    let union = g.sub(sum_areas, inter);
    let iou = g.div(inter, union);

    let ex1 = g.min_elem(px1, gx1);
    let ex2 = g.max_elem(px2, gx2);
    let ey1 = g.min_elem(py1, gy1);
    let ey2 = g.max_elem(py2, gy2);
    let ew = g.sub(ex2, ex1);
    let eh = g.sub(ey2, ey1);
    let enclose = g.mul(ew, eh);

    let hole = g.sub(enclose, union);
    let penalty = g.div(hole, enclose);
    g.sub(iou, penalty)
}

/// Mean (1 - GIoU) over matched pairs.
pub fn giou_loss(g: &mut Graph, pred: NodeId, gt: NodeId) -> NodeId {
    let giou = giou_pairs(g, pred, gt);
    let neg = g.neg(giou);
    let one_minus = g.add_scalar(neg, 1.0);
    g.mean_all(one_minus)
}

/// Mean over boxes of the coordinate-summed L1 distance.
pub fn l1_loss(g: &mut Graph, pred: NodeId, gt: NodeId) -> NodeId {
    let diff = g.sub(pred, gt);
    let a = g.abs(diff);
    let per_box = g.sum_rows(a);
    g.mean_all(per_box)
}

/// Consistency target q = sqrt(p^a * s^a * u^(1-2a)) of the Joint Loss.
fn joint_target(g: &mut Graph, p: NodeId, s: NodeId, u: NodeId, alpha: f64) -> NodeId {
    let pa = g.pow_scalar(p, alpha);
    let sa = g.pow_scalar(s, alpha);
    let ua = g.pow_scalar(u, 1.0 - 2.0 * alpha);
    let ps = g.mul(pa, sa);
    let prod = g.mul(ps, ua);
    g.sqrt(prod)
}

/// Joint Loss over (N,1) columns:
/// -mean[ (q-p)^2 * y * ln p + p^2 * (1-q) * (1-y) * ln(1-p) ].
///
/// Differentiable in p, s, and u. Inputs must be clamped upstream:
/// p in (0,1), s and u in [0,1] (validated here).
pub fn joint_loss(
    g: &mut Graph,
    p: NodeId,
    s: NodeId,
    u: NodeId,
    y: NodeId,
    alpha: f64,
) -> Result<NodeId> {
    for (name, id) in [("s", s), ("u", u)] {
        if g.value(id).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "joint_loss: {} outside [0,1]",
                name
            )));
        }
    }
    if g.value(p).data().iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        return Err(Error::Validation("joint_loss: p outside (0,1)".into()));
    }
    let q = joint_target(g, p, s, u, alpha);

    let q_minus_p = g.sub(q, p);
    let pos_w = g.mul(q_minus_p, q_minus_p);
    let ln_p = g.ln(p);
    let pos_wy = g.mul(pos_w, y);
    let pos = g.mul(pos_wy, ln_p);

    let p_sq = g.mul(p, p);
    let neg_q = g.neg(q);
    let one_minus_q = g.add_scalar(neg_q, 1.0);
    let neg_w = g.mul(p_sq, one_minus_q);
    let neg_p = g.neg(p);
    let one_minus_p = g.add_scalar(neg_p, 1.0);
    let ln_1p = g.ln(one_minus_p);
    let neg_y = g.neg(y);
    let one_minus_y = g.add_scalar(neg_y, 1.0);
    let neg_wy = g.mul(neg_w, one_minus_y);
    let neg = g.mul(neg_wy, ln_1p);

    let total = g.add(pos, neg);
    let mean = g.mean_all(total);
    Ok(g.neg(mean))
}

/// Eager scalar evaluation of the Joint Loss on equal-length columns.
pub fn joint_loss_value(p: &[f64], s: &[f64], u: &[f64], y: &[f64], alpha: f64) -> Result<f64> {
    let n = p.len();
    let mut g = Graph::new();
    let pn = g.constant(Tensor::from_vec(p.to_vec(), &[n, 1]));
    let sn = g.constant(Tensor::from_vec(s.to_vec(), &[n, 1]));
    let un = g.constant(Tensor::from_vec(u.to_vec(), &[n, 1]));
    let yn = g.constant(Tensor::from_vec(y.to_vec(), &[n, 1]));
    let loss = joint_loss(&mut g, pn, sn, un, yn, alpha)?;
    Ok(g.value(loss).item())
}

/// Focal loss with focusing parameter gamma (ablation baseline).
pub fn focal_loss(g: &mut Graph, p: NodeId, y: NodeId, gamma: f64) -> NodeId {
    let ln_p = g.ln(p);
    let neg_p = g.neg(p);
    let one_minus_p = g.add_scalar(neg_p, 1.0);
    let pos_w = g.pow_scalar(one_minus_p, gamma);
    let pos_wy = g.mul(pos_w, y);
    let pos = g.mul(pos_wy, ln_p);

    let ln_1p = g.ln(one_minus_p);
    let neg_w = g.pow_scalar(p, gamma);
    let neg_y = g.neg(y);
    let one_minus_y = g.add_scalar(neg_y, 1.0);
    let neg_wy = g.mul(neg_w, one_minus_y);
    let neg = g.mul(neg_wy, ln_1p);

    let total = g.add(pos, neg);
    let mean = g.mean_all(total);
    g.neg(mean)
}

/// Plain binary cross-entropy (ablation baseline).
pub fn bce_binary_loss(g: &mut Graph, p: NodeId, y: NodeId) -> NodeId {
    focal_loss(g, p, y, 0.0)
}

/// One named, weighted term of the total loss.
pub struct Term {
    pub name: &'static str,
    pub node: NodeId,
    pub weight: f64,
}

/// Weighted sum of scalar terms with a per-term breakdown.
///
/// A non-finite component aborts with the offending term's name.
pub fn total_loss(
    g: &mut Graph,
    terms: &[Term],
    step: u64,
) -> Result<(NodeId, Vec<(String, f64)>)> {
    let mut breakdown = Vec::with_capacity(terms.len());
    let mut total: Option<NodeId> = None;
    for t in terms {
        let value = g.value(t.node).item();
        if !value.is_finite() {
            return Err(Error::NanLoss {
                term: t.name.to_string(),
                step,
            });
        }
        breakdown.push((t.name.to_string(), value));
        if t.weight == 0.0 {
            continue;
        }
        let weighted = g.mul_scalar(t.node, t.weight);
        total = Some(match total {
            Some(acc) => g.add(acc, weighted),
            None => weighted,
        });
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    Ok((total, breakdown))
}
