//! Detection metrics: IoU, greedy matching, precision/recall, PR curves,
//! all-point average precision, mAP50 and F1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ground-truth boxes: mAP is undefined")]
    NoGroundTruth,
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn clamp_unit(&self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        Self::new(c(self.x_min), c(self.y_min), c(self.x_max), c(self.y_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: usize,
    pub class_id: usize,
    pub rect: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub image_id: usize,
    pub class_id: usize,
    pub confidence: f64,
    pub rect: Rect,
}

/// Intersection over union; zero for disjoint or zero-area boxes.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (aa + ab - inter)
}

pub fn precision(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// `None` when there is nothing to recall.
pub fn recall(tp: usize, fn_: usize) -> Option<f64> {
    (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Prediction indices sorted by descending confidence, ties by index.
pub fn ranking(preds: &[DetectionBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(a.cmp(&b))
    });
    order
}

/// Outcome of greedy matching. True negatives have no representation: no
/// metric here uses them.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per prediction, the ground-truth index it claimed (a true positive),
    /// or `None` for a false positive.
    pub pred_match: Vec<Option<usize>>,
    /// Per ground truth, the prediction that claimed it, `None` when missed.
    pub gt_match: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn is_tp(&self, pred: usize) -> bool {
        self.pred_match[pred].is_some()
    }

    pub fn false_negatives(&self, gts: &[GroundTruthBox], class_id: usize) -> usize {
        gts.iter()
            .zip(&self.gt_match)
            .filter(|(g, m)| g.class_id == class_id && m.is_none())
            .count()
    }
}

/// Greedy matching within each (image, class): predictions in ranking order
/// claim their best-IoU unmatched ground truth when that IoU reaches the
/// threshold (ties go to the lower ground-truth index).
pub fn match_detections(
    preds: &[DetectionBox],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> MatchResult {
    let mut by_key: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_key.entry((g.image_id, g.class_id)).or_default().push(i);
    }
    let mut pred_match = vec![None; preds.len()];
    let mut gt_match = vec![None; gts.len()];
    for pi in ranking(preds) {
        let p = &preds[pi];
        let Some(cands) = by_key.get(&(p.image_id, p.class_id)) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for &gi in cands {
            if gt_match[gi].is_some() {
                continue;
            }
            let v = iou(&p.rect, &gts[gi].rect);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            if v >= iou_threshold {
                pred_match[pi] = Some(gi);
                gt_match[gi] = Some(pi);
            }
        }
    }
    MatchResult {
        pred_match,
        gt_match,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Cumulative (recall, precision) points down the confidence ranking.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub num_gt: usize,
    pub points: Vec<PrPoint>,
}

/// PR curve of one class; `None` when the class has no ground truth.
pub fn pr_curve(
    preds: &[DetectionBox],
    gts: &[GroundTruthBox],
    class_id: usize,
    iou_threshold: f64,
) -> Option<PrCurve> {
    let m = match_detections(preds, gts, iou_threshold);
    curve_from_match(preds, gts, &m, class_id)
}

fn curve_from_match(
    preds: &[DetectionBox],
    gts: &[GroundTruthBox],
    m: &MatchResult,
    class_id: usize,
) -> Option<PrCurve> {
    let num_gt = gts.iter().filter(|g| g.class_id == class_id).count();
    if num_gt == 0 {
        return None;
    }
    let (mut tp, mut fp) = (0, 0);
    let mut points = Vec::new();
    for i in ranking(preds) {
        if preds[i].class_id != class_id {
            continue;
        }
        if m.is_tp(i) {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            recall: tp as f64 / num_gt as f64,
            precision: precision(tp, fp),
        });
    }
    Some(PrCurve {
        class_id,
        num_gt,
        points,
    })
}

/// Area under the monotone precision envelope (all-point interpolation).
pub fn average_precision(curve: &PrCurve) -> f64 {
    let pts = &curve.points;
    let mut envelope = vec![0.0; pts.len()];
    let mut best: f64 = 0.0;
    for i in (0..pts.len()).rev() {
        best = best.max(pts[i].precision);
        envelope[i] = best;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in pts.iter().zip(envelope) {
        area += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    area
}

/// Classes (below `num_classes`) that have at least one ground truth.
fn present_classes(gts: &[GroundTruthBox], num_classes: usize) -> Vec<usize> {
    (0..num_classes)
        .filter(|&c| gts.iter().any(|g| g.class_id == c))
        .collect()
}

/// Mean AP at IoU 0.5 over classes with ground truth.
pub fn map50(
    preds: &[DetectionBox],
    gts: &[GroundTruthBox],
    num_classes: usize,
) -> Result<f64, EvalError> {
    let classes = present_classes(gts, num_classes);
    if classes.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let m = match_detections(preds, gts, 0.5);
    let total: f64 = classes
        .iter()
        .map(|&c| average_precision(&curve_from_match(preds, gts, &m, c).expect("class has GT")))
        .sum();
    Ok(total / classes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub name: String,
    /// `None` when the class has no ground truth (excluded from the mean).
    pub ap50: Option<f64>,
    pub precision: f64,
    pub recall: Option<f64>,
    pub num_gt: usize,
    pub num_pred: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverallReport {
    pub map50: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub overall: OverallReport,
    pub iou_threshold: f64,
    pub conf_threshold: f64,
}

/// AP over all predictions, P/R from predictions with confidence at or
/// above `conf_threshold`. Overall P/R pool counts over every class; with no
/// ground truth at all, mAP and recall are reported as 0.
pub fn eval_report(
    preds: &[DetectionBox],
    gts: &[GroundTruthBox],
    class_names: &[&str],
    iou_threshold: f64,
    conf_threshold: f64,
) -> EvalReport {
    let full = match_detections(preds, gts, iou_threshold);
    let kept: Vec<DetectionBox> = preds
        .iter()
        .filter(|p| p.confidence >= conf_threshold)
        .copied()
        .collect();
    let op = match_detections(&kept, gts, iou_threshold);

    let mut classes = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let mut aps = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let ap50 = curve_from_match(preds, gts, &full, c).map(|cv| average_precision(&cv));
        aps.extend(ap50);
        let (mut tp, mut fp) = (0, 0);
        for (i, p) in kept.iter().enumerate() {
            if p.class_id == c {
                if op.is_tp(i) {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let fn_ = op.false_negatives(gts, c);
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        classes.push(ClassReport {
            name: name.to_string(),
            ap50,
            precision: precision(tp, fp),
            recall: recall(tp, fn_),
            num_gt: gts.iter().filter(|g| g.class_id == c).count(),
            num_pred: preds.iter().filter(|p| p.class_id == c).count(),
            tp,
            fp,
            fn_,
        });
    }
    let map50 = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    let p = precision(tp_all, fp_all);
    let r = recall(tp_all, fn_all).unwrap_or(0.0);
    EvalReport {
        classes,
        overall: OverallReport {
            map50,
            precision: p,
            recall: r,
            f1: f1(p, r),
        },
        iou_threshold,
        conf_threshold,
    }
}

impl EvalReport {
    /// JSON object keyed by class name, plus `"overall"`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for c in &self.classes {
            map.insert(
                c.name.clone(),
                serde_json::json!({
                    "ap50": c.ap50,
                    "precision": c.precision,
                    "recall": c.recall,
                    "num_gt": c.num_gt,
                    "num_pred": c.num_pred,
                    "tp": c.tp,
                    "fp": c.fp,
                    "fn": c.fn_,
                }),
            );
        }
        map.insert(
            "overall".into(),
            serde_json::json!({
                "map50": self.overall.map50,
                "precision": self.overall.precision,
                "recall": self.overall.recall,
                "f1": self.overall.f1,
                "iou_threshold": self.iou_threshold,
                "conf_threshold": self.conf_threshold,
            }),
        );
        serde_json::Value::Object(map)
    }

    /// Aligned table: class, mAP50, P, R.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let mut s = format!("{:<8} {:>8} {:>8} {:>8}\n", "Class", "mAP50", "P", "R");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>8} {:>8}",
                c.name,
                cell(c.ap50),
                cell(Some(c.precision)),
                cell(c.recall)
            );
        }
        let o = &self.overall;
        let _ = writeln!(
            s,
            "{:<8} {:>8.3} {:>8.3} {:>8.3}",
            "Overall", o.map50, o.precision, o.recall
        );
        let _ = writeln!(s, "F1 {:.3}", o.f1);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image_id: usize, class_id: usize, r: Rect) -> GroundTruthBox {
        GroundTruthBox {
            image_id,
            class_id,
            rect: r,
        }
    }

    fn det(image_id: usize, class_id: usize, confidence: f64, r: Rect) -> DetectionBox {
        DetectionBox {
            image_id,
            class_id,
            confidence,
            rect: r,
        }
    }

    #[test]
    fn iou_cases() {
        let a = Rect::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Rect::new(3.0, 3.0, 4.0, 4.0)), 0.0);
        assert!((iou(&a, &Rect::new(1.0, 0.0, 3.0, 2.0)) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&a, &Rect::new(1.0, 1.0, 1.0, 2.0)), 0.0);
    }

    #[test]
    fn ratios() {
        assert_eq!(precision(3, 1), 0.75);
        assert_eq!(precision(0, 0), 0.0);
        assert_eq!(recall(0, 5), Some(0.0));
        assert_eq!(recall(0, 0), None);
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert_eq!(f1(1.0, 0.0), 0.0);
    }

    #[test]
    fn single_claim() {
        let r = Rect::new(0.1, 0.1, 0.5, 0.5);
        let m = match_detections(&[det(0, 0, 0.9, r)], &[gt(0, 0, r)], 0.5);
        assert_eq!(m.pred_match, vec![Some(0)]);
        let m = match_detections(&[det(0, 0, 0.9, r), det(0, 0, 0.9, r)], &[gt(0, 0, r)], 0.5);
        assert_eq!(m.pred_match, vec![Some(0), None]);
        assert_eq!(m.false_negatives(&[gt(0, 0, r)], 0), 0);
    }

    #[test]
    fn other_image_or_class_never_matches() {
        let r = Rect::new(0.1, 0.1, 0.5, 0.5);
        let m = match_detections(&[det(1, 0, 0.9, r), det(0, 1, 0.9, r)], &[gt(0, 0, r)], 0.5);
        assert_eq!(m.pred_match, vec![None, None]);
        assert_eq!(m.gt_match, vec![None]);
    }

    #[test]
    fn tp_fp_tp_curve_and_ap() {
        let a = Rect::new(0.0, 0.0, 0.2, 0.2);
        let b = Rect::new(0.5, 0.5, 0.7, 0.7);
        let far = Rect::new(0.8, 0.0, 0.9, 0.1);
        let preds = [det(0, 0, 0.9, a), det(0, 0, 0.8, far), det(0, 0, 0.7, b)];
        let gts = [gt(0, 0, a), gt(0, 0, b)];
        let c = pr_curve(&preds, &gts, 0, 0.5).unwrap();
        let got: Vec<(f64, f64)> = c.points.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(got[0], (0.5, 1.0));
        assert_eq!(got[1], (0.5, 0.5));
        assert_eq!(got[2].0, 1.0);
        assert!((got[2].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((average_precision(&c) - 5.0 / 6.0).abs() < 1e-12);
        assert!((map50(&preds, &gts, 7).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_curves() {
        let a = Rect::new(0.0, 0.0, 0.2, 0.2);
        let far = Rect::new(0.8, 0.0, 0.9, 0.1);
        assert!(pr_curve(&[], &[gt(0, 0, a)], 1, 0.5).is_none());
        let c = pr_curve(&[det(0, 0, 0.5, far)], &[gt(0, 0, a)], 0, 0.5).unwrap();
        assert_eq!(
            c.points,
            vec![PrPoint {
                recall: 0.0,
                precision: 0.0
            }]
        );
        assert_eq!(average_precision(&c), 0.0);
        let empty = PrCurve {
            class_id: 0,
            num_gt: 1,
            points: vec![],
        };
        assert_eq!(average_precision(&empty), 0.0);
        assert_eq!(map50(&[], &[], 7), Err(EvalError::NoGroundTruth));
    }

    #[test]
    fn map_is_mean_over_present_classes() {
        let a = Rect::new(0.0, 0.0, 0.2, 0.2);
        let b = Rect::new(0.5, 0.5, 0.7, 0.7);
        let gts = [gt(0, 0, a), gt(0, 3, b)];
        let preds = [det(0, 0, 0.9, a)];
        assert_eq!(map50(&preds, &gts, 7).unwrap(), 0.5);
    }

    #[test]
    fn report_layout() {
        let a = Rect::new(0.0, 0.0, 0.2, 0.2);
        let names = ["D00", "D10"];
        let gts = [gt(0, 0, a)];
        let r = eval_report(&[det(0, 0, 1.0, a)], &gts, &names, 0.5, 0.25);
        assert_eq!(r.overall.map50, 1.0);
        assert_eq!(r.overall.f1, 1.0);
        assert_eq!(r.classes[1].ap50, None);
        let json = r.to_json();
        assert_eq!(json["D00"]["ap50"], 1.0);
        assert!(json["D10"]["ap50"].is_null());
        assert_eq!(json["overall"]["map50"], 1.0);
        assert_eq!(r.to_text().lines().count(), 5);

        let empty = eval_report(&[], &gts, &names, 0.5, 0.25);
        assert_eq!(empty.classes[0].ap50, Some(0.0));
        assert_eq!(empty.overall.recall, 0.0);
    }
}
