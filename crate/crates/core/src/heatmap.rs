//! Encoding plate annotations into detection target maps and decoding
//! peaks back into detections.
//!
//! All maps live at 1/4 of image resolution ([`STRIDE`]). A plate produces:
//!
//! * a Gaussian splat on the single center-heat channel (radius
//!   `0.4 * min(w, h)` in feature units, `sigma = radius / 3`),
//! * per-category Gaussian splats on the four corner-heat channels
//!   (radius `0.2 * min(w, h)`),
//! * box extent, sub-cell center offset and center-relative corner vectors
//!   written at the plate's integer center cell,
//! * sub-cell corner offsets written at each integer corner cell.
//!
//! Decoding is NMS-free: peaks are 3×3 local maxima, boxes are rebuilt from
//! `wh`/offset values at the peak cell, and corner peaks are attached to
//! boxes by a greedy nearest-center association with a distance gate, with
//! the center-relative regression as fallback.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Rect};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ratio of image resolution to map resolution.
pub const STRIDE: usize = 4;
/// Center-splat radius as a fraction of `min(w, h)`.
pub const CENTER_RADIUS_RATIO: f64 = 0.4;
/// Corner-splat radius as a fraction of `min(w, h)`.
pub const CORNER_RADIUS_RATIO: f64 = 0.2;
/// Default cap on decoded peaks per channel.
pub const DEFAULT_MAX_K: usize = 8;

/// One ground-truth plate: box, the four corners in left-top, right-top,
/// left-down, right-down order, and the plate string.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateAnnotation {
    pub bbox: Rect,
    pub corners: [Point; 4],
    pub text: String,
}

impl PlateAnnotation {
    /// Checks the box has positive area and box and corners lie inside the
    /// image.
    pub fn validate(&self, image_w: usize, image_h: usize) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::DegenerateBox(format!("{:?}", self.bbox)));
        }
        let (w, h) = (image_w as f64, image_h as f64);
        let inside = |p: Point| p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h;
        if !inside(Point::new(self.bbox.x1, self.bbox.y1))
            || !inside(Point::new(self.bbox.x2, self.bbox.y2))
        {
            return Err(Error::InvalidArgument(format!(
                "box {:?} outside {image_w}x{image_h} image",
                self.bbox
            )));
        }
        if let Some(p) = self.corners.iter().find(|&&p| !inside(p)) {
            return Err(Error::InvalidArgument(format!(
                "corner {p:?} outside {image_w}x{image_h} image"
            )));
        }
        Ok(())
    }
}

/// An unnormalized Gaussian kernel: center in map coordinates and a radius
/// whose third is the standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub center: Point,
    pub radius: f64,
}

impl GaussianSpec {
    pub fn sigma(&self) -> f64 {
        self.radius / 3.0
    }
}

/// Max-merges `exp(-d^2 / (2 sigma^2))` into one channel of a rank-3 map and
/// forces the pixel nearest the center to exactly 1.
pub fn gaussian_splat<T: Scalar>(
    map: &mut Tensor<T>,
    channel: usize,
    spec: &GaussianSpec,
) -> Result<()> {
    let (c, h, w) = map.dims3();
    if channel >= c {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range for {c} channels"
        )));
    }
    if spec.radius <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian radius must be positive, got {}",
            spec.radius
        )));
    }
    let cx = spec.center.x;
    let cy = spec.center.y;
    let px = cx.round();
    let py = cy.round();
    if px < 0.0 || px >= w as f64 || py < 0.0 || py >= h as f64 {
        return Err(Error::InvalidArgument(format!(
            "gaussian center ({cx}, {cy}) outside {w}x{h} map"
        )));
    }
    let denom = 2.0 * spec.sigma() * spec.sigma();
    for y in 0..h {
        for x in 0..w {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let v = (-d2 / denom).exp();
            let old = map.get3(channel, y, x).to_f64_lossless();
            if v > old {
                map.set3(channel, y, x, T::from_f64_lossy(v));
            }
        }
    }
    map.set3(channel, py as usize, px as usize, T::one());
    Ok(())
}

/// The six per-image detection maps at 1/4 resolution. Used both for encoded
/// targets and for predicted head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMaps<T> {
    /// `1 × h × w` center heat.
    pub center_heat: Tensor<T>,
    /// `2 × h × w` box extents `(w, h)` in feature units.
    pub wh: Tensor<T>,
    /// `2 × h × w` sub-cell center offsets `(dx, dy)`.
    pub center_off: Tensor<T>,
    /// `4 × h × w` per-category corner heat.
    pub corner_heat: Tensor<T>,
    /// `8 × h × w` center-relative corner vectors, `(dx, dy)` per category.
    pub corner_rel: Tensor<T>,
    /// `2 × h × w` sub-cell corner offsets `(dx, dy)`, shared by categories.
    pub corner_off: Tensor<T>,
}

impl<T: Scalar> DetectionMaps<T> {
    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            center_heat: Tensor::zeros(&[1, h, w])?,
            wh: Tensor::zeros(&[2, h, w])?,
            center_off: Tensor::zeros(&[2, h, w])?,
            corner_heat: Tensor::zeros(&[4, h, w])?,
            corner_rel: Tensor::zeros(&[8, h, w])?,
            corner_off: Tensor::zeros(&[2, h, w])?,
        })
    }

    /// Common `(h, w)` of the six maps, or an error if they disagree.
    pub fn extents(&self) -> Result<(usize, usize)> {
        let (c0, h, w) = self.center_heat.dims3();
        let checks = [
            (c0, 1, "center_heat"),
            (self.wh.dims3().0, 2, "wh"),
            (self.center_off.dims3().0, 2, "center_off"),
            (self.corner_heat.dims3().0, 4, "corner_heat"),
            (self.corner_rel.dims3().0, 8, "corner_rel"),
            (self.corner_off.dims3().0, 2, "corner_off"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name} must have {want} channels, got {got}"
                )));
            }
        }
        for (t, name) in [
            (&self.wh, "wh"),
            (&self.center_off, "center_off"),
            (&self.corner_heat, "corner_heat"),
            (&self.corner_rel, "corner_rel"),
            (&self.corner_off, "corner_off"),
        ] {
            let (_, th, tw) = t.dims3();
            if (th, tw) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {th}x{tw} but center_heat is {h}x{w}"
                )));
            }
        }
        Ok((h, w))
    }
}

/// Encoded training targets: the six maps plus the cells where the
/// regression losses apply.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets<T> {
    pub maps: DetectionMaps<T>,
    /// Sorted `(y, x)` cells holding box/offset/corner-vector regression
    /// targets (one per plate, deduplicated).
    pub center_cells: Vec<(usize, usize)>,
    /// Sorted `(y, x)` cells holding corner sub-cell offsets.
    pub corner_cells: Vec<(usize, usize)>,
    /// Number of encoded plates.
    pub n_pos: usize,
}

/// Encodes ground-truth plates into target maps for a `image_w × image_h`
/// image. The stride must divide both image extents.
pub fn encode_targets<T: Scalar>(
    annotations: &[PlateAnnotation],
    image_w: usize,
    image_h: usize,
) -> Result<DetectionTargets<T>> {
    if image_w % STRIDE != 0 || image_h % STRIDE != 0 {
        return Err(Error::InvalidArgument(format!(
            "stride {STRIDE} must divide image extents {image_w}x{image_h}"
        )));
    }
    let (w, h) = (image_w / STRIDE, image_h / STRIDE);
    let mut maps = DetectionMaps::<T>::zeros(h, w)?;
    let mut center_cells = BTreeSet::new();
    let mut corner_cells = BTreeSet::new();
    let s = STRIDE as f64;

    for ann in annotations {
        ann.validate(image_w, image_h)?;
        let wf = ann.bbox.width() / s;
        let hf = ann.bbox.height() / s;
        let side = wf.min(hf);
        let center = ann.bbox.center();
        let cxf = center.x / s;
        let cyf = center.y / s;
        let cellx = (cxf.floor() as usize).min(w - 1);
        let celly = (cyf.floor() as usize).min(h - 1);

        gaussian_splat(
            &mut maps.center_heat,
            0,
            &GaussianSpec {
                center: Point::new(cellx as f64, celly as f64),
                radius: CENTER_RADIUS_RATIO * side,
            },
        )?;

        maps.wh.set3(0, celly, cellx, T::from_f64_lossy(wf));
        maps.wh.set3(1, celly, cellx, T::from_f64_lossy(hf));
        maps.center_off
            .set3(0, celly, cellx, T::from_f64_lossy(cxf - cellx as f64));
        maps.center_off
            .set3(1, celly, cellx, T::from_f64_lossy(cyf - celly as f64));
        for (i, corner) in ann.corners.iter().enumerate() {
            maps.corner_rel
                .set3(2 * i, celly, cellx, T::from_f64_lossy(corner.x / s - cxf));
            maps.corner_rel.set3(
                2 * i + 1,
                celly,
                cellx,
                T::from_f64_lossy(corner.y / s - cyf),
            );
        }
        center_cells.insert((celly, cellx));

        for (i, corner) in ann.corners.iter().enumerate() {
            let kxf = corner.x / s;
            let kyf = corner.y / s;
            let kx = (kxf.floor() as usize).min(w - 1);
            let ky = (kyf.floor() as usize).min(h - 1);
            gaussian_splat(
                &mut maps.corner_heat,
                i,
                &GaussianSpec {
                    center: Point::new(kx as f64, ky as f64),
                    radius: CORNER_RADIUS_RATIO * side,
                },
            )?;
            maps.corner_off
                .set3(0, ky, kx, T::from_f64_lossy(kxf - kx as f64));
            maps.corner_off
                .set3(1, ky, kx, T::from_f64_lossy(kyf - ky as f64));
            corner_cells.insert((ky, kx));
        }
    }

    Ok(DetectionTargets {
        maps,
        center_cells: center_cells.into_iter().collect(),
        corner_cells: corner_cells.into_iter().collect(),
        n_pos: annotations.len(),
    })
}

/// A local maximum on one heat channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub y: usize,
    pub x: usize,
    pub score: f64,
}

/// Returns up to `max_k` cells that are maxima of their 3×3 neighborhood
/// with score `>= threshold`, sorted by descending score then raster order.
///
/// On plateaus only the raster-first cell counts: a cell is kept when every
/// neighbor is strictly smaller or equal-valued but later in raster order.
pub fn extract_peaks<T: Scalar>(
    map: &Tensor<T>,
    channel: usize,
    max_k: usize,
    threshold: f64,
) -> Result<Vec<Peak>> {
    let (c, h, w) = map.dims3();
    if channel >= c {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range for {c} channels"
        )));
    }
    let mut peaks = Vec::new();
    for y in 0..h {
        'cell: for x in 0..w {
            let v = map.get3(channel, y, x).to_f64_lossless();
            if v < threshold {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                        continue;
                    }
                    let nv = map
                        .get3(channel, ny as usize, nx as usize)
                        .to_f64_lossless();
                    let earlier = (ny as usize, nx as usize) < (y, x);
                    if nv > v || (nv == v && earlier) {
                        continue 'cell;
                    }
                }
            }
            peaks.push(Peak { y, x, score: v });
        }
    }
    peaks.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| (a.y, a.x).cmp(&(b.y, b.x)))
    });
    peaks.truncate(max_k);
    Ok(peaks)
}

/// Where a decoded corner came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CornerSource {
    /// Matched to a corner-heat peak.
    Peak,
    /// Rebuilt from the center-relative regression because no peak passed
    /// the distance gate.
    RegressedFallback,
}

/// One decoded corner with its score and provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerDetection {
    pub point: Point,
    pub score: f64,
    pub source: CornerSource,
}

/// A decoded plate detection in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: Rect,
    pub score: f64,
    /// Peak cell `(y, x)` on the center map; where regressions were read.
    pub center_cell: (usize, usize),
    /// Refined center in feature units (cell + sub-cell offset).
    pub center_feat: Point,
    /// The four corners, present after corner association.
    pub corners: Option<[CornerDetection; 4]>,
}

impl Detection {
    /// Corner points to rectify with: associated corners when present,
    /// otherwise the box corners.
    pub fn corner_points(&self) -> [Point; 4] {
        match &self.corners {
            Some(cs) => [cs[0].point, cs[1].point, cs[2].point, cs[3].point],
            None => self.bbox.corners(),
        }
    }
}

/// An unattached corner-heat peak in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerCandidate {
    pub point: Point,
    pub score: f64,
}

/// Decodes center peaks into boxes: refined center = peak cell + sub-cell
/// offset, box = center ± wh/2, everything scaled by the stride and clipped
/// to the image.
pub fn decode_boxes<T: Scalar>(
    maps: &DetectionMaps<T>,
    max_k: usize,
    threshold: f64,
) -> Result<Vec<Detection>> {
    let (h, w) = maps.extents()?;
    let s = STRIDE as f64;
    let (img_w, img_h) = ((w * STRIDE) as f64, (h * STRIDE) as f64);
    let peaks = extract_peaks(&maps.center_heat, 0, max_k, threshold)?;
    let mut out = Vec::with_capacity(peaks.len());
    for p in peaks {
        let dx = maps.center_off.get3(0, p.y, p.x).to_f64_lossless();
        let dy = maps.center_off.get3(1, p.y, p.x).to_f64_lossless();
        let bw = maps.wh.get3(0, p.y, p.x).to_f64_lossless();
        let bh = maps.wh.get3(1, p.y, p.x).to_f64_lossless();
        let cx = p.x as f64 + dx;
        let cy = p.y as f64 + dy;
        let bbox = Rect::new(
            (cx - bw / 2.0) * s,
            (cy - bh / 2.0) * s,
            (cx + bw / 2.0) * s,
            (cy + bh / 2.0) * s,
        )
        .clip(img_w, img_h);
        out.push(Detection {
            bbox,
            score: p.score,
            center_cell: (p.y, p.x),
            center_feat: Point::new(cx, cy),
            corners: None,
        });
    }
    Ok(out)
}

/// Decodes the per-category corner peaks, refined by the shared sub-cell
/// corner offsets and scaled to image coordinates.
pub fn decode_corners<T: Scalar>(
    maps: &DetectionMaps<T>,
    max_k: usize,
    threshold: f64,
) -> Result<[Vec<CornerCandidate>; 4]> {
    maps.extents()?;
    let s = STRIDE as f64;
    let mut out: [Vec<CornerCandidate>; 4] = Default::default();
    for (cat, slot) in out.iter_mut().enumerate() {
        let peaks = extract_peaks(&maps.corner_heat, cat, max_k, threshold)?;
        for p in peaks {
            let dx = maps.corner_off.get3(0, p.y, p.x).to_f64_lossless();
            let dy = maps.corner_off.get3(1, p.y, p.x).to_f64_lossless();
            slot.push(CornerCandidate {
                point: Point::new((p.x as f64 + dx) * s, (p.y as f64 + dy) * s),
                score: p.score,
            });
        }
    }
    Ok(out)
}

/// Attaches corner candidates to boxes.
///
/// Boxes are processed in descending score order; per category each box takes
/// the unused candidate nearest its center, if that distance passes the gate
/// `1.5 * max(w, h) / 2` (image units). A candidate serves at most one box.
/// Boxes left without a candidate fall back to the center-relative corner
/// regression read at their center cell.
pub fn associate_corners<T: Scalar>(
    detections: &mut [Detection],
    candidates: &[Vec<CornerCandidate>; 4],
    maps: &DetectionMaps<T>,
) -> Result<()> {
    maps.extents()?;
    let s = STRIDE as f64;
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap()
            .then_with(|| detections[a].center_cell.cmp(&detections[b].center_cell))
    });
    let mut used: [Vec<bool>; 4] = [
        vec![false; candidates[0].len()],
        vec![false; candidates[1].len()],
        vec![false; candidates[2].len()],
        vec![false; candidates[3].len()],
    ];
    for di in order {
        let det = &detections[di];
        let center = det.bbox.center();
        let gate = 1.5 * det.bbox.width().max(det.bbox.height()) / 2.0;
        let (celly, cellx) = det.center_cell;
        let mut corners: [CornerDetection; 4] = [CornerDetection {
            point: Point::new(0.0, 0.0),
            score: 0.0,
            source: CornerSource::RegressedFallback,
        }; 4];
        for cat in 0..4 {
            let mut best: Option<(usize, f64)> = None;
            for (ci, cand) in candidates[cat].iter().enumerate() {
                if used[cat][ci] {
                    continue;
                }
                let d = cand.point.distance(center);
                if d > gate {
                    continue;
                }
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((ci, d));
                }
            }
            corners[cat] = match best {
                Some((ci, _)) => {
                    used[cat][ci] = true;
                    CornerDetection {
                        point: candidates[cat][ci].point,
                        score: candidates[cat][ci].score,
                        source: CornerSource::Peak,
                    }
                }
                None => {
                    let rx = maps
                        .corner_rel
                        .get3(2 * cat, celly, cellx)
                        .to_f64_lossless();
                    let ry = maps
                        .corner_rel
                        .get3(2 * cat + 1, celly, cellx)
                        .to_f64_lossless();
                    let cf = det.center_feat;
                    CornerDetection {
                        point: Point::new((cf.x + rx) * s, (cf.y + ry) * s),
                        score: det.score,
                        source: CornerSource::RegressedFallback,
                    }
                }
            };
        }
        detections[di].corners = Some(corners);
    }
    Ok(())
}

/// Full decode: boxes, corner candidates, and association.
pub fn decode_detections<T: Scalar>(
    maps: &DetectionMaps<T>,
    max_k: usize,
    threshold: f64,
) -> Result<Vec<Detection>> {
    let mut dets = decode_boxes(maps, max_k, threshold)?;
    let candidates = decode_corners(maps, max_k, threshold)?;
    associate_corners(&mut dets, &candidates, maps)?;
    Ok(dets)
}
