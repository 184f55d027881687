use super::{Result, ToyError};
use crate::eval::{iou, ranking, DetectionBox, GroundTruthBox, Rect};
use crate::tensor::{Tape, Tensor, Var};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Turns a prediction tensor `[B, 1 + C + 4, G, G]` into boxes; the batch
/// index becomes the image id. A threshold of 1 emits nothing.
pub fn decode(pred: &Tensor, conf_threshold: f64, num_classes: usize) -> Result<Vec<DetectionBox>> {
    let &[b, ch, g, g2] = pred.shape() else {
        return Err(ToyError::Input(format!(
            "prediction must be rank 4, got {:?}",
            pred.shape()
        )));
    };
    if ch != 5 + num_classes || g != g2 {
        return Err(ToyError::Input(format!(
            "prediction shape {:?} does not fit {num_classes} classes",
            pred.shape()
        )));
    }
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(ToyError::Input(format!(
            "confidence threshold {conf_threshold} outside [0, 1]"
        )));
    }
    let mut out = Vec::new();
    if conf_threshold >= 1.0 {
        return Ok(out);
    }
    let d = pred.data();
    let plane = g * g;
    let gf = g as f64;
    for bi in 0..b {
        let base = bi * ch * plane;
        for i in 0..g {
            for j in 0..g {
                let at = |c: usize| d[base + c * plane + i * g + j];
                let (mut best_c, mut best_p) = (0, f64::NEG_INFINITY);
                for c in 0..num_classes {
                    let p = sigmoid(at(1 + c));
                    if p > best_p {
                        (best_c, best_p) = (c, p);
                    }
                }
                let confidence = sigmoid(at(0)) * best_p;
                if confidence.is_nan() || confidence < conf_threshold {
                    continue;
                }
                let t = 1 + num_classes;
                let cx = (j as f64 + sigmoid(at(t))) / gf;
                let cy = (i as f64 + sigmoid(at(t + 1))) / gf;
                let rect =
                    Rect::from_center(cx, cy, sigmoid(at(t + 2)), sigmoid(at(t + 3))).clamp_unit();
                if rect.is_valid() {
                    out.push(DetectionBox {
                        image_id: bi,
                        class_id: best_c,
                        confidence,
                        rect,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Class-wise greedy suppression. The result is in ranking order
/// (confidence descending, ties by input position).
pub fn nms(boxes: &[DetectionBox], iou_threshold: f64) -> Vec<DetectionBox> {
    let mut kept: Vec<DetectionBox> = Vec::new();
    for i in ranking(boxes) {
        let b = &boxes[i];
        let clear = kept
            .iter()
            .filter(|k| k.image_id == b.image_id && k.class_id == b.class_id)
            .all(|k| iou(&k.rect, &b.rect) < iou_threshold);
        if clear {
            kept.push(*b);
        }
    }
    kept
}

/// Dense per-cell training targets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTargets {
    /// `[B, 1, G, G]`, 1 at positive cells.
    pub objectness: Tensor,
    /// `[B, C, G, G]` one-hot at positive cells, zero elsewhere.
    pub classes: Tensor,
    /// `[B, 4, G, G]`: in-cell x/y offset, width, height.
    pub boxes: Tensor,
    pub positives: usize,
}

/// Assigns each ground truth to the cell holding its center; when two land
/// in one cell the later one wins.
pub fn build_targets(
    targets: &[Vec<GroundTruthBox>],
    grid: usize,
    num_classes: usize,
) -> Result<CellTargets> {
    let b = targets.len();
    let plane = grid * grid;
    let mut obj = vec![0.0; b * plane];
    let mut cls = vec![0.0; b * num_classes * plane];
    let mut bx = vec![0.0; b * 4 * plane];
    let gf = grid as f64;
    for (bi, gts) in targets.iter().enumerate() {
        for gt in gts {
            let r = gt.rect;
            let inside = [r.x_min, r.y_min, r.x_max, r.y_max]
                .iter()
                .all(|v| (0.0..=1.0).contains(v));
            if !inside || !r.is_valid() {
                return Err(ToyError::Input(format!("target box {r:?} outside [0, 1]")));
            }
            if gt.class_id >= num_classes {
                return Err(ToyError::Input(format!(
                    "target class {} out of range",
                    gt.class_id
                )));
            }
            let cx = (r.x_min + r.x_max) / 2.0 * gf;
            let cy = (r.y_min + r.y_max) / 2.0 * gf;
            let j = (cx.floor() as usize).min(grid - 1);
            let i = (cy.floor() as usize).min(grid - 1);
            let cell = i * grid + j;
            obj[bi * plane + cell] = 1.0;
            for c in 0..num_classes {
                cls[(bi * num_classes + c) * plane + cell] = (c == gt.class_id) as u8 as f64;
            }
            let vals = [cx - j as f64, cy - i as f64, r.width(), r.height()];
            for (k, v) in vals.into_iter().enumerate() {
                bx[(bi * 4 + k) * plane + cell] = v;
            }
        }
    }
    let positives = obj.iter().filter(|&&v| v == 1.0).count();
    Ok(CellTargets {
        objectness: Tensor::new(&[b, 1, grid, grid], obj)?,
        classes: Tensor::new(&[b, num_classes, grid, grid], cls)?,
        boxes: Tensor::new(&[b, 4, grid, grid], bx)?,
        positives,
    })
}

/// Objectness BCE averaged over all cells, plus class BCE and squared box
/// error summed over positive cells and divided by the positive count.
pub fn detection_loss(
    tape: &mut Tape,
    pred: Var,
    targets: &[Vec<GroundTruthBox>],
    num_classes: usize,
) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape.len() != 4 || shape[1] != 5 + num_classes || shape[0] != targets.len() {
        return Err(ToyError::Input(format!(
            "prediction {shape:?} does not fit {} images and {num_classes} classes",
            targets.len()
        )));
    }
    let t = build_targets(targets, shape[2], num_classes)?;
    let parts = tape.split(pred, 1, &[1, num_classes, 4])?;
    let (obj, cls, bx) = (parts[0], parts[1], parts[2]);

    let obj_bce = tape.bce_with_logits(obj, &t.objectness)?;
    let mut loss = tape.mean(obj_bce);
    if t.positives == 0 {
        return Ok(loss);
    }
    let norm = 1.0 / t.positives as f64;

    let cls_mask = Tensor::from_fn(t.classes.shape(), |k| {
        let plane = shape[2] * shape[3];
        let (bi, cell) = (k / (num_classes * plane), k % plane);
        t.objectness.data()[bi * plane + cell]
    });
    let cls_bce = tape.bce_with_logits(cls, &t.classes)?;
    let mask = tape.constant(cls_mask);
    let cls_pos = tape.mul(cls_bce, mask)?;
    let cls_sum = tape.sum(cls_pos);
    let cls_term = tape.mul_scalar(cls_sum, norm);

    let box_mask = Tensor::from_fn(t.boxes.shape(), |k| {
        let plane = shape[2] * shape[3];
        let (bi, cell) = (k / (4 * plane), k % plane);
        t.objectness.data()[bi * plane + cell]
    });
    let squashed = tape.sigmoid(bx);
    let goal = tape.constant(t.boxes);
    let diff = tape.sub(squashed, goal)?;
    let sq = tape.mul(diff, diff)?;
    let mask = tape.constant(box_mask);
    let box_pos = tape.mul(sq, mask)?;
    let box_sum = tape.sum(box_pos);
    let box_term = tape.mul_scalar(box_sum, norm);

    loss = tape.add(loss, cls_term)?;
    loss = tape.add(loss, box_term)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(conf: f64, r: Rect) -> DetectionBox {
        DetectionBox {
            image_id: 0,
            class_id: 0,
            confidence: conf,
            rect: r,
        }
    }

    #[test]
    fn single_cell_decode() {
        let nc = 7;
        let g = 4;
        let mut p = Tensor::full(&[1, 12, g, g], -100.0);
        let (i, j) = (1, 2);
        let set = |p: &mut Tensor, c: usize, v: f64| p.data_mut()[c * g * g + i * g + j] = v;
        set(&mut p, 0, 100.0);
        set(&mut p, 1 + 3, 100.0);
        for c in 8..12 {
            set(&mut p, c, 0.0);
        }
        assert!(decode(&p, 0.01, nc).unwrap().len() == 1);
        let b = decode(&p, 0.5, nc).unwrap()[0];
        assert_eq!(b.class_id, 3);
        assert!((b.confidence - 1.0).abs() < 1e-12);
        let r = b.rect;
        assert!(((r.x_min + r.x_max) / 2.0 - 2.5 / 4.0).abs() < 1e-12);
        assert!(((r.y_min + r.y_max) / 2.0 - 1.5 / 4.0).abs() < 1e-12);
        assert!((r.width() - 0.5).abs() < 1e-12 && (r.height() - 0.5).abs() < 1e-12);
        assert!(decode(&p, 1.0, nc).unwrap().is_empty());
        assert!(decode(&Tensor::full(&[1, 12, g, g], -100.0), 0.01, nc)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn nms_cases() {
        let a = Rect::new(0.0, 0.0, 0.5, 0.5);
        assert_eq!(nms(&[det(0.8, a), det(0.9, a)], 0.5), vec![det(0.9, a)]);
        let far = Rect::new(0.6, 0.6, 0.9, 0.9);
        assert_eq!(nms(&[det(0.9, a), det(0.8, far)], 0.5).len(), 2);
        let other_class = DetectionBox {
            class_id: 1,
            ..det(0.8, a)
        };
        assert_eq!(nms(&[det(0.9, a), other_class], 0.5).len(), 2);
    }

    #[test]
    fn later_target_wins_a_cell() {
        let g0 = GroundTruthBox {
            image_id: 0,
            class_id: 1,
            rect: Rect::new(0.0, 0.0, 0.2, 0.2),
        };
        let g1 = GroundTruthBox {
            class_id: 4,
            rect: Rect::new(0.05, 0.05, 0.15, 0.15),
            ..g0
        };
        let t = build_targets(&[vec![g0, g1]], 4, 7).unwrap();
        assert_eq!(t.positives, 1);
        assert_eq!(t.classes.at(&[0, 4, 0, 0]), 1.0);
        assert_eq!(t.classes.at(&[0, 1, 0, 0]), 0.0);
        assert!((t.boxes.at(&[0, 2, 0, 0]) - 0.1).abs() < 1e-15);
        let outside = GroundTruthBox {
            rect: Rect::new(0.5, 0.5, 1.2, 0.9),
            ..g0
        };
        assert!(build_targets(&[vec![outside]], 4, 7).is_err());
    }
}
