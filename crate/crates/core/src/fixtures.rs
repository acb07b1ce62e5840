//! Seeded synthetic scenes for exercising the pipeline without real data.
//!
//! Each scene is a single-channel noise canvas with one rendered plate:
//! glyphs from a built-in 5×7 bitmap font stamped onto a bright rectangle,
//! optionally rotated (up to ±45°) or additionally perspective-jittered,
//! with exact box/corner/text annotations emitted alongside. Everything is
//! driven by per-scene seeded generators, so the same inputs reproduce the
//! same bytes. [`oracle_logits`] fabricates the logit sequence a perfectly
//! trained reader would produce for a known string, which lets end-to-end
//! tests run the full decode path without training anything.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Rect};
use crate::heatmap::PlateAnnotation;
use crate::recognize::{Alphabet, RecognitionOutput, SEQ_LEN};
use crate::rectify::{solve_homography, Homography};
use crate::scalar::Scalar;
use crate::schema::{ImageAnnotation, PlateRecord};
use crate::tensor::Tensor;

/// Canvas extents (divisible by 32 so the stand-in backbone accepts them).
pub const CANVAS_W: usize = 192;
pub const CANVAS_H: usize = 128;

/// 5-bit row masks, top row first, for digits and uppercase letters.
const GLYPHS: [(char, [u8; 7]); 36] = [
    (
        '0',
        [
            0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110,
        ],
    ),
    (
        '1',
        [
            0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110,
        ],
    ),
    (
        '2',
        [
            0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111,
        ],
    ),
    (
        '3',
        [
            0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110,
        ],
    ),
    (
        '4',
        [
            0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010,
        ],
    ),
    (
        '5',
        [
            0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110,
        ],
    ),
    (
        '6',
        [
            0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110,
        ],
    ),
    (
        '7',
        [
            0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000,
        ],
    ),
    (
        '8',
        [
            0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110,
        ],
    ),
    (
        '9',
        [
            0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100,
        ],
    ),
    (
        'A',
        [
            0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001,
        ],
    ),
    (
        'B',
        [
            0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110,
        ],
    ),
    (
        'C',
        [
            0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110,
        ],
    ),
    (
        'D',
        [
            0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100,
        ],
    ),
    (
        'E',
        [
            0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111,
        ],
    ),
    (
        'F',
        [
            0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000,
        ],
    ),
    (
        'G',
        [
            0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111,
        ],
    ),
    (
        'H',
        [
            0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001,
        ],
    ),
    (
        'I',
        [
            0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110,
        ],
    ),
    (
        'J',
        [
            0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100,
        ],
    ),
    (
        'K',
        [
            0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001,
        ],
    ),
    (
        'L',
        [
            0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111,
        ],
    ),
    (
        'M',
        [
            0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001,
        ],
    ),
    (
        'N',
        [
            0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001,
        ],
    ),
    (
        'O',
        [
            0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110,
        ],
    ),
    (
        'P',
        [
            0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000,
        ],
    ),
    (
        'Q',
        [
            0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101,
        ],
    ),
    (
        'R',
        [
            0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001,
        ],
    ),
    (
        'S',
        [
            0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110,
        ],
    ),
    (
        'T',
        [
            0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100,
        ],
    ),
    (
        'U',
        [
            0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110,
        ],
    ),
    (
        'V',
        [
            0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100,
        ],
    ),
    (
        'W',
        [
            0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010,
        ],
    ),
    (
        'X',
        [
            0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001,
        ],
    ),
    (
        'Y',
        [
            0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100,
        ],
    ),
    (
        'Z',
        [
            0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111,
        ],
    ),
];

/// Row masks of one glyph, or `None` for characters outside the font.
pub fn glyph(c: char) -> Option<&'static [u8; 7]> {
    GLYPHS.iter().find(|(g, _)| *g == c).map(|(_, rows)| rows)
}

/// How much geometry distortion a scene gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    /// Upright plate; corners coincide with the box corners.
    AxisAligned,
    /// In-plane rotation up to ±45°.
    Rotated,
    /// Rotation plus perspective corner jitter.
    Tilted,
}

impl FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axis-aligned" => Ok(Self::AxisAligned),
            "rotated" => Ok(Self::Rotated),
            "tilted" => Ok(Self::Tilted),
            other => Err(Error::InvalidArgument(format!(
                "unknown difficulty '{other}' (expected axis-aligned, rotated or tilted)"
            ))),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AxisAligned => "axis-aligned",
            Self::Rotated => "rotated",
            Self::Tilted => "tilted",
        })
    }
}

/// One generated scene: the rendered canvas, its exact annotation, and the
/// transform that produced the plate quad from the upright rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureScene<T> {
    /// `1 × 1 × CANVAS_H × CANVAS_W`, values in `[0, 1]`.
    pub image: Tensor<T>,
    pub annotation: ImageAnnotation,
    /// The upright plate rectangle before warping.
    pub plate_rect: Rect,
    /// Maps [`plate_rect`](Self::plate_rect) corners onto the annotated
    /// corners.
    pub warp: Homography,
    pub seed: u64,
}

/// The shade of a point inside the upright plate, in plate-local
/// coordinates `(u, v)` with `u ∈ [0, w)`, `v ∈ [0, h)`.
fn plate_shade(u: f64, v: f64, w: f64, h: f64, rows: &[&'static [u8; 7]]) -> f64 {
    let border = (0.04 * h).max(1.2);
    if u < border || v < border || u > w - border || v > h - border {
        return 0.25; // dark frame
    }
    let margin_x = 0.06 * w;
    let margin_y = 0.16 * h;
    let n = rows.len() as f64;
    let cell_w = (w - 2.0 * margin_x) / n;
    let k = ((u - margin_x) / cell_w).floor();
    let inner_h = h - 2.0 * margin_y;
    if k >= 0.0 && k < n && v >= margin_y && v < h - margin_y {
        let cu = (u - margin_x - k * cell_w) / cell_w;
        let cv = (v - margin_y) / inner_h;
        // 12% side padding inside each glyph cell
        let gu = (cu - 0.12) / 0.76;
        if (0.0..1.0).contains(&gu) {
            let gx = (gu * 5.0).floor() as usize;
            let gy = (cv * 7.0).floor() as usize;
            if gx < 5 && gy < 7 && (rows[k as usize][gy] >> (4 - gx)) & 1 == 1 {
                return 0.1; // glyph ink
            }
        }
    }
    0.85 // plate background
}

fn fits_canvas(quad: &[Point; 4], margin: f64) -> bool {
    quad.iter().all(|p| {
        p.x >= margin
            && p.y >= margin
            && p.x <= CANVAS_W as f64 - 1.0 - margin
            && p.y <= CANVAS_H as f64 - 1.0 - margin
    })
}

/// Generates `count` deterministic scenes. Scene `i` uses its own generator
/// derived from `seed` and `i`, so any scene can be regenerated alone.
pub fn gen_fixtures<T: Scalar>(
    count: usize,
    seed: u64,
    difficulty: Difficulty,
) -> Result<Vec<FixtureScene<T>>> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "fixture count must be at least 1".into(),
        ));
    }
    let alphabet = Alphabet::default_plate();
    (0..count)
        .map(|i| gen_scene(seed, i, difficulty, &alphabet))
        .collect()
}

fn gen_scene<T: Scalar>(
    seed: u64,
    index: usize,
    difficulty: Difficulty,
    alphabet: &Alphabet,
) -> Result<FixtureScene<T>> {
    let scene_seed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);

    let len = rng.gen_range(5..=7);
    let text: String = (0..len)
        .map(|_| alphabet.tokens()[rng.gen_range(0..alphabet.len())])
        .collect();

    // shrink geometrically until the warped quad fits the canvas
    let mut shrink = 1.0f64;
    let (plate_rect, quad, warp) = loop {
        let w = rng.gen_range(80.0..108.0) * shrink;
        let h = w * rng.gen_range(0.30..0.38);
        let cx = CANVAS_W as f64 / 2.0 + rng.gen_range(-12.0..12.0);
        let cy = CANVAS_H as f64 / 2.0 + rng.gen_range(-8.0..8.0);
        let rect = Rect::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
        let corners = rect.corners();
        let quad = match difficulty {
            Difficulty::AxisAligned => corners,
            Difficulty::Rotated | Difficulty::Tilted => {
                let theta = rng.gen_range(-45f64..45.0).to_radians();
                let (sin, cos) = theta.sin_cos();
                let mut quad = corners.map(|p| {
                    let (dx, dy) = (p.x - cx, p.y - cy);
                    Point::new(cx + dx * cos - dy * sin, cy + dx * sin + dy * cos)
                });
                if difficulty == Difficulty::Tilted {
                    for p in &mut quad {
                        p.x += rng.gen_range(-4.0..4.0);
                        p.y += rng.gen_range(-4.0..4.0);
                    }
                }
                quad
            }
        };
        if fits_canvas(&quad, 3.0) {
            let warp = match difficulty {
                Difficulty::AxisAligned => Homography::identity(),
                _ => solve_homography(&corners, &quad)?,
            };
            break (rect, quad, warp);
        }
        shrink *= 0.95;
    };

    let mut image = Tensor::zeros(&[1, 1, CANVAS_H, CANVAS_W])?;
    for v in image.data_mut() {
        *v = T::from_f64_lossy(rng.gen_range(0.0..0.25));
    }
    let rows: Vec<&'static [u8; 7]> = text
        .chars()
        .map(|c| glyph(c).ok_or(Error::UnknownToken(c)))
        .collect::<Result<_>>()?;
    let inv = warp.invert()?;
    let (pw, ph) = (plate_rect.width(), plate_rect.height());
    for y in 0..CANVAS_H {
        for x in 0..CANVAS_W {
            let q = inv.apply(Point::new(x as f64, y as f64));
            let (u, v) = (q.x - plate_rect.x1, q.y - plate_rect.y1);
            if u >= 0.0 && u < pw && v >= 0.0 && v < ph {
                image.set4(
                    0,
                    0,
                    y,
                    x,
                    T::from_f64_lossy(plate_shade(u, v, pw, ph, &rows)),
                );
            }
        }
    }

    let ann = PlateAnnotation {
        bbox: Rect::bounding(&quad),
        corners: quad,
        text,
    };
    let annotation = ImageAnnotation {
        id: format!("scene-{index:04}"),
        width: CANVAS_W as u32,
        height: CANVAS_H as u32,
        plates: vec![PlateRecord::from_annotation(&ann)],
    };
    Ok(FixtureScene {
        image,
        annotation,
        plate_rect,
        warp,
        seed: scene_seed,
    })
}

/// The logit sequence an ideal reader would emit for `text`: the `i`-th
/// token spikes at frame `2i + 1`, blanks spike everywhere else, so both
/// decoders recover the string exactly. Shape `24 × 1 × K`.
pub fn oracle_logits<T: Scalar>(text: &str, alphabet: &Alphabet) -> Result<RecognitionOutput<T>> {
    const GAIN: f64 = 8.0;
    let tokens = alphabet.encode(text)?;
    if 2 * tokens.len() + 1 > SEQ_LEN {
        return Err(Error::InvalidArgument(format!(
            "text of {} tokens does not fit {SEQ_LEN} frames",
            tokens.len()
        )));
    }
    let k_len = alphabet.class_count();
    let mut values = Tensor::zeros(&[SEQ_LEN, 1, k_len])?;
    for t in 0..SEQ_LEN {
        values.set3(t, 0, alphabet.blank_index(), T::from_f64_lossy(GAIN));
    }
    for (i, &tok) in tokens.iter().enumerate() {
        let t = 2 * i + 1;
        values.set3(t, 0, alphabet.blank_index(), T::zero());
        values.set3(t, 0, tok, T::from_f64_lossy(GAIN));
    }
    RecognitionOutput::from_logits(values)
}

/// Stacks [`oracle_logits`] for several strings into one `24 × B × K`
/// sequence batch.
pub fn oracle_logits_batch<T: Scalar>(
    texts: &[String],
    alphabet: &Alphabet,
) -> Result<RecognitionOutput<T>> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("no texts".into()));
    }
    let k_len = alphabet.class_count();
    let mut values = Tensor::zeros(&[SEQ_LEN, texts.len(), k_len])?;
    for (b, text) in texts.iter().enumerate() {
        let one = oracle_logits::<T>(text, alphabet)?;
        for t in 0..SEQ_LEN {
            for k in 0..k_len {
                values.set3(t, b, k, one.values.get3(t, 0, k));
            }
        }
    }
    RecognitionOutput::from_logits(values)
}
