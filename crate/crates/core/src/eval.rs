//! Letterbox resizing and the evaluation metrics.
//!
//! [`letterbox`] computes the aspect-preserving resize onto a fixed canvas
//! (content anchored top-left, zero padding right/bottom) together with the
//! forward and inverse coordinate maps, so predictions on the resized canvas
//! can be restored to original-image coordinates. [`eval_detection`] scores
//! boxes by IoU against ground truth with greedy one-to-one matching;
//! [`eval_e2e`] additionally requires the exact text and reports per-image
//! accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Rect};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An aspect-preserving resize onto a fixed canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub in_w: usize,
    pub in_h: usize,
    pub out_w: usize,
    pub out_h: usize,
    /// The common scale factor, `min(out_w/in_w, out_h/in_h)`.
    pub scale: f64,
    /// Rounded extents of the resized content.
    pub content_w: usize,
    pub content_h: usize,
    pub pad_right: usize,
    pub pad_bottom: usize,
}

/// Plans the resize of an `in_w × in_h` image onto an `out_w × out_h`
/// canvas: one scale for both axes, content in the top-left corner, zero
/// padding on the right and bottom edges.
pub fn letterbox(in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Result<Letterbox> {
    if in_w == 0 || in_h == 0 || out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "letterbox extents must be positive, got {in_w}x{in_h} -> {out_w}x{out_h}"
        )));
    }
    let scale = (out_w as f64 / in_w as f64).min(out_h as f64 / in_h as f64);
    let content_w = ((in_w as f64 * scale).round() as usize).min(out_w).max(1);
    let content_h = ((in_h as f64 * scale).round() as usize).min(out_h).max(1);
    Ok(Letterbox {
        in_w,
        in_h,
        out_w,
        out_h,
        scale,
        content_w,
        content_h,
        pad_right: out_w - content_w,
        pad_bottom: out_h - content_h,
    })
}

impl Letterbox {
    /// Original-image point to canvas point.
    pub fn forward(&self, p: Point) -> Point {
        Point::new(p.x * self.scale, p.y * self.scale)
    }

    /// Canvas point back to original-image coordinates.
    pub fn inverse(&self, p: Point) -> Point {
        Point::new(p.x / self.scale, p.y / self.scale)
    }

    pub fn forward_rect(&self, r: Rect) -> Rect {
        Rect::new(
            r.x1 * self.scale,
            r.y1 * self.scale,
            r.x2 * self.scale,
            r.y2 * self.scale,
        )
    }

    pub fn inverse_rect(&self, r: Rect) -> Rect {
        Rect::new(
            r.x1 / self.scale,
            r.y1 / self.scale,
            r.x2 / self.scale,
            r.y2 / self.scale,
        )
    }

    /// Resamples a `B × C × in_h × in_w` image onto the canvas: bilinear
    /// inside the content region, zeros in the padding.
    pub fn apply_image<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (b_len, c_len, h, w) = image.dims4();
        if h != self.in_h || w != self.in_w {
            return Err(Error::ShapeMismatch(format!(
                "image is {w}x{h}, letterbox was planned for {}x{}",
                self.in_w, self.in_h
            )));
        }
        let mut out = Tensor::zeros(&[b_len, c_len, self.out_h, self.out_w])?;
        for b in 0..b_len {
            for c in 0..c_len {
                for y in 0..self.content_h {
                    let sy = (y as f64 + 0.5) / self.scale - 0.5;
                    for x in 0..self.content_w {
                        let sx = (x as f64 + 0.5) / self.scale - 0.5;
                        let v = image.bilinear_sample(b, c, sy, sx);
                        out.set4(b, c, y, x, T::from_f64_lossy(v));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Intersection over union of two boxes; any box without positive area
/// scores 0 against everything.
pub fn iou(a: Rect, b: Rect) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        return 0.0;
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Matching protocol knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// A prediction only counts when IoU with a ground-truth box strictly
    /// exceeds this.
    pub iou_threshold: f64,
    /// Keep only the highest-scoring prediction of each image (benchmark
    /// protocols that allow a single answer per image). Recall is not
    /// reported under this protocol.
    pub one_prediction_per_image: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            one_prediction_per_image: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "IoU threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// One scored prediction; `text` is only needed for end-to-end scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredBox {
    pub bbox: Rect,
    pub score: f64,
    pub text: Option<String>,
}

/// One ground-truth plate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    pub bbox: Rect,
    pub text: String,
}

/// Predictions and truths of a single image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub predictions: Vec<PredBox>,
    pub truths: Vec<TruthBox>,
}

/// Detection scores. When there are no predictions the precision is
/// undefined and reported as 0 with `precision_defined` cleared (same for
/// recall without truths); recall is `None` entirely under the
/// one-prediction-per-image protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub correct: usize,
    pub total_predictions: usize,
    pub total_truths: usize,
    pub precision: f64,
    pub precision_defined: bool,
    pub recall: Option<f64>,
    pub recall_defined: bool,
}

/// Per-image end-to-end scores: an image counts as correct when greedy
/// matching pairs every truth with a distinct prediction at IoU above the
/// threshold *and* exactly matching text, with no spare predictions left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct E2eMetrics {
    pub correct_images: usize,
    pub total_images: usize,
    pub accuracy: f64,
}

/// Predictions sorted by score (highest first) with deterministic,
/// order-independent tie-breaking on the box coordinates.
fn sorted_predictions(preds: &[PredBox], cfg: &EvalConfig) -> Vec<PredBox> {
    let mut out = preds.to_vec();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| rect_key(&a.bbox).partial_cmp(&rect_key(&b.bbox)).unwrap())
    });
    if cfg.one_prediction_per_image {
        out.truncate(1);
    }
    out
}

fn rect_key(r: &Rect) -> [f64; 4] {
    [r.y1, r.x1, r.y2, r.x2]
}

/// Greedily pairs sorted predictions with unmatched truths; `require_text`
/// additionally demands an exact string match. Returns the number of
/// correct predictions.
fn greedy_match(
    preds: &[PredBox],
    truths: &[TruthBox],
    cfg: &EvalConfig,
    require_text: bool,
) -> Result<usize> {
    let mut order: Vec<usize> = (0..truths.len()).collect();
    order.sort_by(|&a, &b| {
        rect_key(&truths[a].bbox)
            .partial_cmp(&rect_key(&truths[b].bbox))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut used = vec![false; truths.len()];
    let mut correct = 0;
    for p in preds {
        if require_text && p.text.is_none() {
            return Err(Error::InvalidArgument(
                "end-to-end scoring needs a text on every prediction".into(),
            ));
        }
        let mut best: Option<(usize, f64)> = None;
        for &gi in &order {
            if used[gi] {
                continue;
            }
            if require_text && p.text.as_deref() != Some(truths[gi].text.as_str()) {
                continue;
            }
            let v = iou(p.bbox, truths[gi].bbox);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            if v > cfg.iou_threshold {
                used[gi] = true;
                correct += 1;
            }
        }
    }
    Ok(correct)
}

/// Scores detections over a set of images. Matching is greedy in score
/// order, one prediction per truth, correct only above the IoU threshold;
/// every kept prediction counts toward the precision denominator.
pub fn eval_detection(images: &[EvalImage], cfg: &EvalConfig) -> Result<DetectionMetrics> {
    cfg.validate()?;
    let mut correct = 0;
    let mut total_preds = 0;
    let mut total_truths = 0;
    for img in images {
        let preds = sorted_predictions(&img.predictions, cfg);
        total_preds += preds.len();
        total_truths += img.truths.len();
        correct += greedy_match(&preds, &img.truths, cfg, false)?;
    }
    let precision_defined = total_preds > 0;
    let precision = if precision_defined {
        correct as f64 / total_preds as f64
    } else {
        0.0
    };
    let (recall, recall_defined) = if cfg.one_prediction_per_image {
        (None, false)
    } else if total_truths > 0 {
        (Some(correct as f64 / total_truths as f64), true)
    } else {
        (Some(0.0), false)
    };
    Ok(DetectionMetrics {
        correct,
        total_predictions: total_preds,
        total_truths,
        precision,
        precision_defined,
        recall,
        recall_defined,
    })
}

/// Scores the full pipeline per image: boxes must clear the IoU threshold
/// *and* carry the exact ground-truth string.
pub fn eval_e2e(images: &[EvalImage], cfg: &EvalConfig) -> Result<E2eMetrics> {
    cfg.validate()?;
    let mut correct_images = 0;
    for img in images {
        let preds = sorted_predictions(&img.predictions, cfg);
        let correct = greedy_match(&preds, &img.truths, cfg, true)?;
        if correct == img.truths.len() && correct == preds.len() {
            correct_images += 1;
        }
    }
    let total_images = images.len();
    let accuracy = if total_images > 0 {
        correct_images as f64 / total_images as f64
    } else {
        0.0
    };
    Ok(E2eMetrics {
        correct_images,
        total_images,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letterbox_worked_example() {
        let lb = letterbox(720, 1160, 640, 1024).unwrap();
        assert!((lb.scale - 1024.0 / 1160.0).abs() < 1e-12);
        assert!((lb.scale - 0.88276).abs() < 1e-5);
        assert_eq!((lb.content_w, lb.content_h), (636, 1024));
        assert_eq!((lb.pad_right, lb.pad_bottom), (4, 0));
    }

    #[test]
    fn letterbox_equal_dims_is_identity() {
        let lb = letterbox(640, 1024, 640, 1024).unwrap();
        assert_eq!(lb.scale, 1.0);
        assert_eq!((lb.pad_right, lb.pad_bottom), (0, 0));
        assert!(letterbox(0, 5, 4, 4).is_err());
    }

    #[test]
    fn letterbox_coordinate_maps_invert() {
        let lb = letterbox(720, 1160, 640, 1024).unwrap();
        for p in [
            Point::new(0.0, 0.0),
            Point::new(355.5, 901.25),
            Point::new(719.0, 1159.0),
        ] {
            let back = lb.inverse(lb.forward(p));
            assert!(back.distance(p) < 1e-9);
        }
        let r = Rect::new(10.0, 20.0, 300.0, 700.0);
        let rt = lb.inverse_rect(lb.forward_rect(r));
        assert!((rt.x1 - r.x1).abs() < 1e-9 && (rt.y2 - r.y2).abs() < 1e-9);
    }

    #[test]
    fn letterbox_image_fills_content_and_pads_with_zeros() {
        let img = Tensor::<f64>::filled(&[1, 2, 29, 18], 0.75).unwrap();
        let lb = letterbox(18, 29, 32, 32).unwrap();
        let out = lb.apply_image(&img).unwrap();
        assert_eq!(out.dims(), &[1, 2, 32, 32]);
        for y in 0..lb.content_h {
            for x in 0..lb.content_w {
                assert!((out.get4(0, 1, y, x) - 0.75).abs() < 1e-12);
            }
        }
        for y in 0..32 {
            for x in lb.content_w..32 {
                assert_eq!(out.get4(0, 0, y, x), 0.0);
            }
        }
        for y in lb.content_h..32 {
            assert_eq!(out.get4(0, 0, y, 5), 0.0);
        }
    }

    #[test]
    fn letterbox_unit_scale_copies_pixels() {
        let mut img = Tensor::<f64>::zeros(&[1, 1, 4, 6]).unwrap();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let lb = letterbox(6, 4, 8, 4).unwrap();
        let out = lb.apply_image(&img).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(out.get4(0, 0, y, x), img.get4(0, 0, y, x));
            }
        }
    }

    #[test]
    fn iou_worked_examples() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(a, a), 1.0);
        let b = Rect::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(a, b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(a, Rect::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        // degenerate boxes score zero against anything
        assert_eq!(iou(a, Rect::new(5.0, 5.0, 5.0, 9.0)), 0.0);
        assert_eq!(iou(Rect::new(3.0, 3.0, 1.0, 9.0), a), 0.0);
    }

    #[test]
    fn iou_is_symmetric() {
        let a = Rect::new(1.0, 2.0, 11.0, 9.0);
        let b = Rect::new(4.0, 0.0, 14.0, 6.0);
        assert_eq!(iou(a, b), iou(b, a));
        assert!(iou(a, b) > 0.0 && iou(a, b) < 1.0);
    }

    fn pred(bbox: Rect, score: f64) -> PredBox {
        PredBox {
            bbox,
            score,
            text: None,
        }
    }

    fn truth(bbox: Rect) -> TruthBox {
        TruthBox {
            bbox,
            text: "X".into(),
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let b1 = Rect::new(0.0, 0.0, 40.0, 20.0);
        let b2 = Rect::new(60.0, 10.0, 110.0, 32.0);
        let images = vec![EvalImage {
            predictions: vec![pred(b1, 0.9), pred(b2, 0.8)],
            truths: vec![truth(b2), truth(b1)],
        }];
        let m = eval_detection(
            &images,
            &EvalConfig {
                iou_threshold: 0.7,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m.correct, 2);
        assert_eq!(m.precision, 1.0);
        assert!(m.precision_defined);
        assert_eq!(m.recall, Some(1.0));
        assert!(m.recall_defined);
    }

    #[test]
    fn one_of_two_shifted_by_a_box_width_halves_precision() {
        let b = Rect::new(0.0, 0.0, 40.0, 20.0);
        let shifted = Rect::new(40.0, 0.0, 80.0, 20.0);
        let b2 = Rect::new(100.0, 50.0, 140.0, 70.0);
        let images = vec![EvalImage {
            predictions: vec![pred(b2, 0.9), pred(shifted, 0.8)],
            truths: vec![truth(b), truth(b2)],
        }];
        let m = eval_detection(&images, &EvalConfig::default()).unwrap();
        assert_eq!(m.correct, 1);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, Some(0.5));
    }

    #[test]
    fn no_predictions_flag_undefined_precision() {
        let images = vec![EvalImage {
            predictions: vec![],
            truths: vec![truth(Rect::new(0.0, 0.0, 10.0, 10.0))],
        }];
        let m = eval_detection(&images, &EvalConfig::default()).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(!m.precision_defined);
        assert_eq!(m.recall, Some(0.0));
        assert!(m.recall_defined);
    }

    #[test]
    fn predictions_without_truths_count_as_wrong() {
        let images = vec![EvalImage {
            predictions: vec![pred(Rect::new(0.0, 0.0, 10.0, 10.0), 0.5)],
            truths: vec![],
        }];
        let m = eval_detection(&images, &EvalConfig::default()).unwrap();
        assert_eq!(m.correct, 0);
        assert_eq!(m.precision, 0.0);
        assert!(m.precision_defined);
        assert!(!m.recall_defined, "no truths: recall undefined");
    }

    #[test]
    fn threshold_is_strict() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        let b = Rect::new(0.0, 5.0, 10.0, 15.0); // IoU exactly 1/3
        let images = vec![EvalImage {
            predictions: vec![pred(b, 0.9)],
            truths: vec![truth(a)],
        }];
        let at = eval_detection(
            &images,
            &EvalConfig {
                iou_threshold: 1.0 / 3.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(at.correct, 0, "IoU equal to the threshold does not count");
        let below = eval_detection(
            &images,
            &EvalConfig {
                iou_threshold: 0.33,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(below.correct, 1);
    }

    #[test]
    fn one_per_image_keeps_only_the_top_score() {
        let gt = Rect::new(0.0, 0.0, 40.0, 20.0);
        let far = Rect::new(100.0, 100.0, 140.0, 120.0);
        let images = vec![EvalImage {
            predictions: vec![pred(gt, 0.3), pred(far, 0.9)],
            truths: vec![truth(gt)],
        }];
        let cfg = EvalConfig {
            iou_threshold: 0.5,
            one_prediction_per_image: true,
        };
        let m = eval_detection(&images, &cfg).unwrap();
        assert_eq!(
            m.total_predictions, 1,
            "only the top-scored prediction is kept"
        );
        assert_eq!(m.correct, 0);
        assert_eq!(m.recall, None, "recall is not reported under this protocol");
        assert!(!m.recall_defined);
    }

    #[test]
    fn each_truth_matches_at_most_once() {
        let gt = Rect::new(0.0, 0.0, 40.0, 20.0);
        let images = vec![EvalImage {
            predictions: vec![pred(gt, 0.9), pred(gt, 0.8)],
            truths: vec![truth(gt)],
        }];
        let m = eval_detection(&images, &EvalConfig::default()).unwrap();
        assert_eq!(m.correct, 1, "the duplicate cannot claim the same truth");
        assert_eq!(m.precision, 0.5);
    }

    #[test]
    fn metrics_are_order_independent() {
        let boxes = [
            Rect::new(0.0, 0.0, 40.0, 20.0),
            Rect::new(35.0, 0.0, 75.0, 20.0), // overlaps the first
            Rect::new(100.0, 40.0, 150.0, 70.0),
        ];
        let mk = |order: &[usize], scores: &[f64]| EvalImage {
            predictions: order
                .iter()
                .zip(scores)
                .map(|(&i, &s)| pred(boxes[i], s))
                .collect(),
            truths: vec![truth(boxes[0]), truth(boxes[2])],
        };
        let cfg = EvalConfig::default();
        let a = eval_detection(&[mk(&[0, 1, 2], &[0.5, 0.5, 0.9])], &cfg).unwrap();
        let b = eval_detection(&[mk(&[2, 1, 0], &[0.9, 0.5, 0.5])], &cfg).unwrap();
        assert_eq!(a, b);
    }

    fn tpred(bbox: Rect, score: f64, text: &str) -> PredBox {
        PredBox {
            bbox,
            score,
            text: Some(text.into()),
        }
    }

    #[test]
    fn e2e_needs_box_and_exact_string() {
        let gt = Rect::new(0.0, 0.0, 100.0, 30.0);
        let cfg = EvalConfig {
            iou_threshold: 0.7,
            ..Default::default()
        };
        let good = EvalImage {
            predictions: vec![tpred(gt, 0.9, "AB12")],
            truths: vec![TruthBox {
                bbox: gt,
                text: "AB12".into(),
            }],
        };
        let wrong_text = EvalImage {
            predictions: vec![tpred(gt, 0.9, "AB13")],
            truths: vec![TruthBox {
                bbox: gt,
                text: "AB12".into(),
            }],
        };
        let m = eval_e2e(&[good.clone(), wrong_text], &cfg).unwrap();
        assert_eq!(m.correct_images, 1);
        assert_eq!(m.total_images, 2);
        assert!((m.accuracy - 0.5).abs() < 1e-12);

        // IoU just under the threshold: correct string does not save it
        let near = Rect::new(18.35, 0.0, 118.35, 30.0);
        let iou_v = iou(gt, near);
        assert!(iou_v < 0.7 && iou_v > 0.68, "constructed IoU {iou_v}");
        let near_miss = EvalImage {
            predictions: vec![tpred(near, 0.9, "AB12")],
            truths: vec![TruthBox {
                bbox: gt,
                text: "AB12".into(),
            }],
        };
        let m = eval_e2e(&[near_miss], &cfg).unwrap();
        assert_eq!(m.correct_images, 0);
    }

    #[test]
    fn e2e_counts_spare_predictions_against_the_image() {
        let gt = Rect::new(0.0, 0.0, 100.0, 30.0);
        let far = Rect::new(200.0, 80.0, 260.0, 100.0);
        let img = EvalImage {
            predictions: vec![tpred(gt, 0.9, "AB12"), tpred(far, 0.8, "ZZ")],
            truths: vec![TruthBox {
                bbox: gt,
                text: "AB12".into(),
            }],
        };
        let m = eval_e2e(&[img], &EvalConfig::default()).unwrap();
        assert_eq!(
            m.correct_images, 0,
            "spurious extra prediction spoils the image"
        );
    }

    #[test]
    fn e2e_requires_text_on_predictions() {
        let gt = Rect::new(0.0, 0.0, 100.0, 30.0);
        let img = EvalImage {
            predictions: vec![pred(gt, 0.9)],
            truths: vec![TruthBox {
                bbox: gt,
                text: "AB12".into(),
            }],
        };
        assert!(eval_e2e(&[img], &EvalConfig::default()).is_err());
    }

    #[test]
    fn config_rejects_out_of_range_thresholds() {
        for t in [0.0, 1.0, -0.5, 1.5] {
            let cfg = EvalConfig {
                iou_threshold: t,
                ..Default::default()
            };
            assert!(eval_detection(&[], &cfg).is_err(), "threshold {t}");
        }
    }
}
