//! Plain f64 box utilities shared by the matcher, losses, and evaluator.
//!
//! Boxes are (cx, cy, w, h) normalized to [0,1] unless a function says xyxy.

use crate::error::{Error, Result};

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = b;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

pub fn area_xyxy(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn intersection_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let x1 = a[0].max(b[0]);
    let y1 = a[1].max(b[1]);
    let x2 = a[2].min(b[2]);
    let y2 = a[3].min(b[3]);
    (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
}

pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = intersection_xyxy(a, b);
    let union = area_xyxy(a) + area_xyxy(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou_cxcywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    iou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
}

/// Generalized IoU: IoU minus the enclosing-box penalty. In (-1, 1].
pub fn giou_cxcywh(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    if a[2] <= 0.0 || a[3] <= 0.0 || b[2] <= 0.0 || b[3] <= 0.0 {
        return Err(Error::Validation(format!(
            "degenerate box in giou: {:?} vs {:?}",
            a, b
        )));
    }
    let ax = cxcywh_to_xyxy(a);
    let bx = cxcywh_to_xyxy(b);
    let inter = intersection_xyxy(ax, bx);
    let union = area_xyxy(ax) + area_xyxy(bx) - inter;
    let iou = inter / union;
    let ex1 = ax[0].min(bx[0]);
    let ey1 = ax[1].min(bx[1]);
    let ex2 = ax[2].max(bx[2]);
    let ey2 = ax[3].max(bx[3]);
    let enclose = (ex2 - ex1) * (ey2 - ey1);
    Ok(iou - (enclose - union) / enclose)
}

pub fn l1_cxcywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_have_giou_one() {
        let b = [0.5, 0.5, 0.2, 0.3];
        assert!((giou_cxcywh(b, b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corner_touching_boxes_reproduce_hand_value() {
        // xyxy A=(0,0,.5,.5), B=(.5,.5,1,1): IoU=0, union 0.5, enclosing 1.
        let a = [0.25, 0.25, 0.5, 0.5];
        let b = [0.75, 0.75, 0.5, 0.5];
        let g = giou_cxcywh(a, b).unwrap();
        assert!((g - (-0.5)).abs() < 1e-12, "got {}", g);
    }

    #[test]
    fn giou_is_symmetric() {
        let a = [0.3, 0.4, 0.25, 0.35];
        let b = [0.6, 0.55, 0.4, 0.2];
        assert_eq!(giou_cxcywh(a, b).unwrap(), giou_cxcywh(b, a).unwrap());
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(giou_cxcywh([0.5, 0.5, 0.0, 0.1], [0.5, 0.5, 0.1, 0.1]).is_err());
    }

    #[test]
    fn iou_of_nested_box() {
        let outer = [0.5, 0.5, 0.4, 0.4];
        let inner = [0.5, 0.5, 0.2, 0.2];
        let expect = (0.2 * 0.2) / (0.4 * 0.4);
        assert!((iou_cxcywh(outer, inner) - expect).abs() < 1e-12);
    }
}
