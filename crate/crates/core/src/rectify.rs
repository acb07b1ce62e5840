//! Cropping detected plates out of the shared feature map and undoing their
//! perspective distortion.
//!
//! [`roi_align`] resamples a detection's box to a fixed 32×96 crop with one
//! border-clamped bilinear sample per output cell, on the grid whose first
//! and last samples sit exactly on the box corners (the crop spans the box
//! inclusively, so a box of feature width `bw` is sampled at spacing
//! `bw/95`). The detection's corners are recorded in the same crop
//! coordinates, which puts the box corners exactly at `(0,0)`, `(95,0)`,
//! `(0,31)`, `(95,31)`. [`warp_features`] then solves the 3×3 homography
//! sending the upright crop rectangle onto the recorded corner quad and
//! inverse-warps, so tilted plates come out upright.

use crate::error::{Error, Result};
use crate::geometry::{Point, Rect};
use crate::heatmap::{Detection, STRIDE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed crop extents (feature cells).
pub const CROP_H: usize = 32;
pub const CROP_W: usize = 96;

/// A 3×3 projective transform with the bottom-right entry fixed to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Applies the transform to a point (projective divide included).
    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        Point::new(
            (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
            (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
        )
    }

    /// Matrix product `self ∘ other` (applies `other` first), renormalized
    /// so the bottom-right entry is 1.
    pub fn compose(&self, other: &Homography) -> Homography {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, row) in other.m.iter().enumerate() {
                    m[i][j] += self.m[i][k] * row[j];
                }
            }
        }
        normalize(m)
    }

    /// Inverse via the adjugate, renormalized to a unit bottom-right entry.
    pub fn invert(&self) -> Result<Homography> {
        let m = &self.m;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.abs() < 1e-12 {
            return Err(Error::DegenerateQuad("homography is not invertible".into()));
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let inv = adj.map(|r| r.map(|v| v / det));
        if inv[2][2].abs() < 1e-15 {
            return Err(Error::DegenerateQuad("inverse has zero scale entry".into()));
        }
        Ok(normalize(inv))
    }
}

fn normalize(mut m: [[f64; 3]; 3]) -> Homography {
    let s = m[2][2];
    for row in &mut m {
        for v in row {
            *v /= s;
        }
    }
    Homography { m }
}

/// Solves the homography mapping four source points onto four destination
/// points by the standard 8×8 linear system (partial-pivot elimination,
/// all in `f64`). Collinear or coincident points yield a degenerate-quad
/// error, as does a solution that fails to reproject within `1e-9`.
pub fn solve_homography(src: &[Point; 4], dst: &[Point; 4]) -> Result<Homography> {
    // rows: [x, y, 1, 0, 0, 0, -x x', -y x' | x'] and the y' counterpart
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = (src[i].x, src[i].y);
        let (xp, yp) = (dst[i].x, dst[i].y);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * xp, -y * xp, xp];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * yp, -y * yp, yp];
    }
    let scale = a
        .iter()
        .flat_map(|r| r.iter().take(8))
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);

    for col in 0..8 {
        let pivot_row = (col..8)
            .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
            .unwrap();
        if a[pivot_row][col].abs() < scale * 1e-12 {
            return Err(Error::DegenerateQuad(
                "source or destination points are collinear or coincident".into(),
            ));
        }
        a.swap(col, pivot_row);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            for k in col..9 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut sol = [0.0f64; 8];
    for row in (0..8).rev() {
        let mut v = a[row][8];
        for k in row + 1..8 {
            v -= a[row][k] * sol[k];
        }
        sol[row] = v / a[row][row];
    }
    let h = Homography {
        m: [
            [sol[0], sol[1], sol[2]],
            [sol[3], sol[4], sol[5]],
            [sol[6], sol[7], 1.0],
        ],
    };
    for i in 0..4 {
        let p = h.apply(src[i]);
        let err = (p.x - dst[i].x).hypot(p.y - dst[i].y);
        if !(err < 1e-9) {
            return Err(Error::DegenerateQuad(format!(
                "solution reprojects with error {err:.3e}"
            )));
        }
    }
    Ok(h)
}

/// A fixed-size feature crop of one detection, with the detection's corners
/// expressed in crop coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateCrop<T> {
    /// `1 × C × 32 × 96` resampled features.
    pub features: Tensor<T>,
    /// The source box in image coordinates.
    pub source_box: Rect,
    /// The detection corners in crop coordinates; the box corners map to
    /// `(0,0), (95,0), (0,31), (95,31)`.
    pub corners_crop: [Point; 4],
}

/// Resamples the box region of the shared map (batch extent 1) into a
/// `32 × 96` crop: sample `(i, j)` reads the feature point
/// `(x1 + j·bw/95, y1 + i·bh/31)` with border-clamped bilinear
/// interpolation, so the four box corners are sampled exactly by the four
/// crop corners.
pub fn roi_align<T: Scalar>(
    shared: &Tensor<T>,
    bbox: Rect,
    corners: &[Point; 4],
) -> Result<PlateCrop<T>> {
    let (b, c, _, _) = shared.dims4();
    if b != 1 {
        return Err(Error::InvalidArgument(format!(
            "roi_align expects a single-image shared map, got batch {b}"
        )));
    }
    let s = STRIDE as f64;
    let x1 = bbox.x1 / s;
    let y1 = bbox.y1 / s;
    let bw = bbox.width() / s;
    let bh = bbox.height() / s;
    if !(bw > 0.0 && bh > 0.0) {
        return Err(Error::DegenerateBox(format!(
            "box {bbox:?} has no area after mapping to feature scale"
        )));
    }
    let mut features = Tensor::zeros(&[1, c, CROP_H, CROP_W])?;
    for ci in 0..c {
        for i in 0..CROP_H {
            let sy = y1 + i as f64 * bh / (CROP_H - 1) as f64;
            for j in 0..CROP_W {
                let sx = x1 + j as f64 * bw / (CROP_W - 1) as f64;
                let v = shared.bilinear_sample(0, ci, sy, sx);
                features.set4(0, ci, i, j, T::from_f64_lossy(v));
            }
        }
    }
    let corners_crop = corners.map(|p| {
        Point::new(
            (p.x / s - x1) * (CROP_W - 1) as f64 / bw,
            (p.y / s - y1) * (CROP_H - 1) as f64 / bh,
        )
    });
    Ok(PlateCrop {
        features,
        source_box: bbox,
        corners_crop,
    })
}

/// A rectified crop plus a flag marking the degenerate-quad fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct Rectified<T> {
    /// `1 × C × 32 × 96` upright features.
    pub features: Tensor<T>,
    /// True when the corner quad was degenerate and the crop was passed
    /// through unchanged.
    pub degenerate_fallback: bool,
}

/// The upright crop rectangle's corner pixel centers, in left-top,
/// right-top, left-down, right-down order.
fn crop_rect_corners() -> [Point; 4] {
    [
        Point::new(0.0, 0.0),
        Point::new((CROP_W - 1) as f64, 0.0),
        Point::new(0.0, (CROP_H - 1) as f64),
        Point::new((CROP_W - 1) as f64, (CROP_H - 1) as f64),
    ]
}

/// Solves the homography from the upright rectangle onto the crop's corner
/// quad and inverse-warps the crop through it. A degenerate quad passes the
/// crop through unchanged with [`Rectified::degenerate_fallback`] set.
pub fn warp_features<T: Scalar>(crop: &PlateCrop<T>) -> Rectified<T> {
    let h = match solve_homography(&crop_rect_corners(), &crop.corners_crop) {
        Ok(h) => h,
        Err(_) => {
            return Rectified {
                features: crop.features.clone(),
                degenerate_fallback: true,
            };
        }
    };
    let (_, c, _, _) = crop.features.dims4();
    let mut out = Tensor::zeros(&[1, c, CROP_H, CROP_W]).expect("fixed extents");
    for i in 0..CROP_H {
        for j in 0..CROP_W {
            let src = h.apply(Point::new(j as f64, i as f64));
            for ci in 0..c {
                let v = crop.features.bilinear_sample(0, ci, src.y, src.x);
                out.set4(0, ci, i, j, T::from_f64_lossy(v));
            }
        }
    }
    Rectified {
        features: out,
        degenerate_fallback: false,
    }
}

/// Crops one detection out of the shared map and rectifies it using the
/// detection's corners (box corners when no corners were associated).
pub fn rectify_plate<T: Scalar>(shared: &Tensor<T>, det: &Detection) -> Result<Rectified<T>> {
    let crop = roi_align(shared, det.bbox, &det.corner_points())?;
    Ok(warp_features(&crop))
}

/// Rectifies a batch of detections into one `B_r × C × 32 × 96` tensor,
/// returning the per-detection degenerate-fallback flags alongside.
pub fn rectify_batch<T: Scalar>(
    shared: &Tensor<T>,
    detections: &[Detection],
) -> Result<(Tensor<T>, Vec<bool>)> {
    if detections.is_empty() {
        return Err(Error::InvalidArgument("no detections to rectify".into()));
    }
    let (_, c, _, _) = shared.dims4();
    let mut out = Tensor::zeros(&[detections.len(), c, CROP_H, CROP_W])?;
    let mut flags = Vec::with_capacity(detections.len());
    let plane = c * CROP_H * CROP_W;
    for (i, det) in detections.iter().enumerate() {
        let r = rectify_plate(shared, det)?;
        out.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(r.features.data());
        flags.push(r.degenerate_fallback);
    }
    Ok((out, flags))
}
