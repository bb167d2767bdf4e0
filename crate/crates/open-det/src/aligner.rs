//! Bidirectional vision-language alignment: two-sided cosine scoring between
//! queries and text embeddings, probability calibration, the text-text
//! category mask, and the masked alignment loss that removes contradictory
//! supervision for duplicated category names.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::TextBank;

pub const PROB_CLAMP: f64 = 1e-6;

/// Register the aligner's learned state: the two transformation matrices and
/// the calibration temperature.
pub fn init_params<R: Rng>(ps: &mut ParamStore, d_q: usize, d_t: usize, rng: &mut R) {
    let lim_vl = (1.0 / d_q as f64).sqrt();
    let lim_lv = (1.0 / d_t as f64).sqrt();
    ps.insert("align.m_vl", Tensor::rand_uniform(&[d_q, d_t], lim_vl, rng), true);
    ps.insert("align.m_lv", Tensor::rand_uniform(&[d_t, d_q], lim_lv, rng), true);
    ps.insert("align.logit_scale", Tensor::scalar(10.0), true);
}

/// Raw alignment scores (N,M): cos(Q_d x M_VL, T_e) + cos(Q_d, T_e x M_LV).
///
/// With `use_bvla` false only the V-to-L term is kept (ablation baseline).
/// Zero-norm rows contribute cosine 0 (guard inside row normalization).
pub fn alignment_scores(
    g: &mut Graph,
    q_d: NodeId,
    t_e: NodeId,
    m_vl: NodeId,
    m_lv: NodeId,
    use_bvla: bool,
) -> NodeId {
    let q_proj = g.matmul(q_d, m_vl);
    let q_proj_n = g.row_normalize(q_proj);
    let te_n = g.row_normalize(t_e);
    let te_n_t = g.transpose(te_n);
    let v2l = g.matmul(q_proj_n, te_n_t);
    if !use_bvla {
        return v2l;
    }
    let t_proj = g.matmul(t_e, m_lv);
    let t_proj_n = g.row_normalize(t_proj);
    let q_n = g.row_normalize(q_d);
    let t_proj_n_t = g.transpose(t_proj_n);
    let l2v = g.matmul(q_n, t_proj_n_t);
    g.add(v2l, l2v)
}

/// Calibrate raw scores into (0,1): sigmoid(logit_scale * raw / 2), clamped
/// away from exact 0/1 for log stability. Strictly increasing in raw.
pub fn alignment_probs(g: &mut Graph, raw: NodeId, logit_scale: NodeId) -> NodeId {
    let scale_pos = g.clamp(logit_scale, 1e-3, 1e4);
    let half = g.mul_scalar(raw, 0.5);
    let scaled = g.scale_by(half, scale_pos);
    let probs = g.sigmoid(scaled);
    g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary M x M category mask: 1 where text rows are the same category
/// (cosine > tau), 0 elsewhere; diagonal forced to 1. Symmetric.
pub fn category_mask(bank: &TextBank, tau: f64) -> Tensor {
    let gram = bank.gram();
    let m = bank.len();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = if i == j || gram.at2(i, j) > tau {
                1.0
            } else {
                0.0
            };
        }
    }
    Tensor::from_vec(out, &[m, m])
}

/// Calibrated alignment labels Y = clamp(VL_align x mask, 0, 1).
pub fn calibrated_labels(vl_align: &Tensor, mask: &Tensor) -> Tensor {
    let (n, m) = (vl_align.rows(), vl_align.cols());
    assert_eq!(mask.rows(), m);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut v = 0.0;
            for k in 0..m {
                v += vl_align.at2(i, k) * mask.at2(k, j);
            }
            out[i * m + j] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(out, &[n, m])
}

/// Masked alignment loss: -1/(NM) * sum[Y log P + (1-Y) log(1-P)] with the
/// mask-calibrated labels Y. `labels` enters as a constant.
pub fn masked_alignment_loss(g: &mut Graph, probs: NodeId, labels: &Tensor) -> Result<NodeId> {
    let pv = g.value(probs);
    assert_eq!(pv.shape(), labels.shape(), "probs vs labels shape");
    if pv.data().iter().any(|v| *v <= 0.0 || *v >= 1.0) {
        return Err(Error::Validation(
            "alignment probs must lie strictly inside (0,1)".into(),
        ));
    }
    let y = g.constant(labels.clone());
    let ln_p = g.ln(probs);
    let pos = g.mul(y, ln_p);
    let neg_p = g.neg(probs);
    let one_minus_p = g.add_scalar(neg_p, 1.0);
    let ln_1p = g.ln(one_minus_p);
    let neg_y = g.neg(y);
    let one_minus_y = g.add_scalar(neg_y, 1.0);
    let neg = g.mul(one_minus_y, ln_1p);
    let total = g.add(pos, neg);
    let mean = g.mean_all(total);
    Ok(g.neg(mean))
}

/// Unmasked BCE alignment baseline: identical to the masked loss with an
/// identity category mask (labels = VL_align itself).
pub fn bce_alignment_loss(g: &mut Graph, probs: NodeId, vl_align: &Tensor) -> Result<NodeId> {
    masked_alignment_loss(g, probs, vl_align)
}
