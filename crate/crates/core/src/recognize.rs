//! Reading the text off a rectified plate crop.
//!
//! A small convolutional head turns each `C × 32 × 96` rectified crop into a
//! sequence of 24 per-frame class distributions over the alphabet plus a
//! blank class (blank is the **last** index). Decoding offers the usual two
//! flavours: greedy best-path collapse, and a prefix beam search that sums
//! path probabilities per label and keeps the most probable prefixes. An
//! optional rule set then picks the first candidate consistent with known
//! plate formats.

use std::collections::BTreeMap;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{activation, conv2d, maxpool2d, Activation, ConvSpec, Tensor};

/// Number of output frames per crop.
pub const SEQ_LEN: usize = 24;

/// The token inventory. The network's class count is one larger: the blank
/// class sits at the last index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    tokens: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Alphabet {
    pub fn from_tokens(tokens: impl IntoIterator<Item = char>) -> Result<Self> {
        let tokens: Vec<char> = tokens.into_iter().collect();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("alphabet must not be empty".into()));
        }
        let mut index = BTreeMap::new();
        for (i, &c) in tokens.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {c:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Digits and uppercase letters without `O` (too close to `0` on a
    /// stamped plate): 35 tokens, 36 classes with the blank.
    pub fn default_plate() -> Self {
        Self::from_tokens("0123456789ABCDEFGHIJKLMNPQRSTUVWXYZ".chars())
            .expect("default tokens are distinct")
    }

    /// Number of real tokens (excluding the blank).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of network classes: tokens + blank.
    pub fn class_count(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Index of the blank class (always last).
    pub fn blank_index(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[char] {
        &self.tokens
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        self.index.get(&c).copied().ok_or(Error::UnknownToken(c))
    }

    pub fn char_at(&self, i: usize) -> Option<char> {
        self.tokens.get(i).copied()
    }

    /// Maps a string to token indices; unknown characters are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.index_of(c)).collect()
    }

    /// Maps token indices back to a string; out-of-range (incl. blank)
    /// indices are an error.
    pub fn decode(&self, indices: &[usize]) -> Result<String> {
        indices
            .iter()
            .map(|&i| {
                self.char_at(i)
                    .ok_or_else(|| Error::InvalidArgument(format!("token index {i} out of range")))
            })
            .collect()
    }
}

impl TryFrom<String> for Alphabet {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Alphabet::from_tokens(s.chars())
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.tokens.into_iter().collect()
    }
}

/// The recognition head's convolution stack.
///
/// Applied to a `B_r × C_in × 32 × 96` batch of rectified crops:
///
/// | layer | kernel | out | after                     | extents   |
/// |-------|--------|-----|---------------------------|-----------|
/// | conv1 | 3×3 p1 | 128 | + BN + ReLU, then pool 2  | 16 × 48   |
/// | conv2 | 3×3 p1 | 128 | + BN + ReLU, then pool 2  | 8 × 24    |
/// | conv3 | 3×3 p1 | 256 | + BN + ReLU               | 8 × 24    |
/// | conv4 | 8×1 v  | 256 | + ReLU (collapses height) | 1 × 24    |
/// | conv5 | 1×1    | K   | logits                    | 1 × 24    |
///
/// The 24 surviving columns become the output frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionWeights<T> {
    pub conv1: ConvSpec<T>,
    pub conv2: ConvSpec<T>,
    pub conv3: ConvSpec<T>,
    pub conv4: ConvSpec<T>,
    pub conv5: ConvSpec<T>,
}

impl<T: Scalar> RecognitionWeights<T> {
    /// Deterministic pseudo-random weights for the given input channel count
    /// and class count.
    pub fn seeded(seed: u64, in_channels: usize, class_count: usize) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            conv1: ConvSpec::seeded(in_channels, 128, 3, 3, 1, 1, &mut rng)?,
            conv2: ConvSpec::seeded(128, 128, 3, 3, 1, 1, &mut rng)?,
            conv3: ConvSpec::seeded(128, 256, 3, 3, 1, 1, &mut rng)?,
            conv4: ConvSpec::seeded(256, 256, 8, 1, 1, 0, &mut rng)?,
            conv5: ConvSpec::seeded(256, class_count, 1, 1, 1, 0, &mut rng)?,
        })
    }

    /// Loads the five layers from archive entries `rec_conv1` … `rec_conv5`
    /// (each `<name>.weight` / `<name>.bias`, optional `.bn_scale` /
    /// `.bn_shift` pair).
    pub fn from_archive(archive: &crate::ptar::PtarArchive) -> Result<Self> {
        Ok(Self {
            conv1: crate::fusion::layer_from_archive(archive, "rec_conv1", 1, 1)?,
            conv2: crate::fusion::layer_from_archive(archive, "rec_conv2", 1, 1)?,
            conv3: crate::fusion::layer_from_archive(archive, "rec_conv3", 1, 1)?,
            conv4: crate::fusion::layer_from_archive(archive, "rec_conv4", 1, 0)?,
            conv5: crate::fusion::layer_from_archive(archive, "rec_conv5", 1, 0)?,
        })
    }

    /// Stores the five layers under the names [`from_archive`] expects.
    pub fn to_archive(&self, archive: &mut crate::ptar::PtarArchive) -> Result<()> {
        crate::fusion::layer_to_archive(archive, "rec_conv1", &self.conv1)?;
        crate::fusion::layer_to_archive(archive, "rec_conv2", &self.conv2)?;
        crate::fusion::layer_to_archive(archive, "rec_conv3", &self.conv3)?;
        crate::fusion::layer_to_archive(archive, "rec_conv4", &self.conv4)?;
        crate::fusion::layer_to_archive(archive, "rec_conv5", &self.conv5)?;
        Ok(())
    }

    /// The class count this head produces (conv5's output channels).
    pub fn class_count(&self) -> usize {
        self.conv5.out_channels
    }
}

/// Per-frame class scores, `T × B × K` with `T = 24` frames.
///
/// `is_probs` records whether a softmax has already been applied over the
/// class axis; decoding accepts either form.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionOutput<T> {
    pub values: Tensor<T>,
    pub is_probs: bool,
}

impl<T: Scalar> RecognitionOutput<T> {
    pub fn from_logits(values: Tensor<T>) -> Result<Self> {
        Self::checked(values, false)
    }

    pub fn from_probs(values: Tensor<T>) -> Result<Self> {
        Self::checked(values, true)
    }

    fn checked(values: Tensor<T>, is_probs: bool) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "sequence scores must be frames × batch × classes, got {:?}",
                values.dims()
            )));
        }
        Ok(Self { values, is_probs })
    }

    /// `(frames, batch, classes)`.
    pub fn extents(&self) -> (usize, usize, usize) {
        self.values.dims3()
    }

    /// Softmax over the class axis (no-op if already probabilities).
    pub fn into_probs(self) -> Self {
        if self.is_probs {
            return self;
        }
        let (t_len, b_len, k_len) = self.extents();
        let mut values = self.values;
        for t in 0..t_len {
            for b in 0..b_len {
                let row: Vec<f64> = (0..k_len)
                    .map(|k| values.get3(t, b, k).to_f64_lossless())
                    .collect();
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for (k, v) in row.iter().enumerate() {
                    values.set3(t, b, k, T::from_f64_lossy((v - m).exp() / denom));
                }
            }
        }
        Self {
            values,
            is_probs: true,
        }
    }

    /// Log-probabilities of one batch item as `frames × classes` in `f64`.
    pub fn frame_log_probs(&self, b: usize) -> Vec<Vec<f64>> {
        let (t_len, _, k_len) = self.extents();
        (0..t_len)
            .map(|t| {
                let row: Vec<f64> = (0..k_len)
                    .map(|k| self.values.get3(t, b, k).to_f64_lossless())
                    .collect();
                if self.is_probs {
                    row.iter().map(|&p| p.max(f64::MIN_POSITIVE).ln()).collect()
                } else {
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    row.iter().map(|v| v - lse).collect()
                }
            })
            .collect()
    }
}

/// Runs the recognition stack on a `B_r × C × 32 × 96` batch and returns
/// per-frame logits as `24 × B_r × K`.
pub fn head_forward<T: Scalar>(
    weights: &RecognitionWeights<T>,
    crops: &Tensor<T>,
) -> Result<RecognitionOutput<T>> {
    let (b_len, c, h, w) = crops.dims4();
    if h != crate::rectify::CROP_H || w != crate::rectify::CROP_W {
        return Err(Error::ShapeMismatch(format!(
            "recognition input must be {} × {} cells, got {h} × {w}",
            crate::rectify::CROP_H,
            crate::rectify::CROP_W
        )));
    }
    if c != weights.conv1.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "recognition input has {c} channels, weights expect {}",
            weights.conv1.in_channels
        )));
    }
    let x = activation(&conv2d(crops, &weights.conv1)?, Activation::Relu)?;
    let x = maxpool2d(&x, 2)?;
    let x = activation(&conv2d(&x, &weights.conv2)?, Activation::Relu)?;
    let x = maxpool2d(&x, 2)?;
    let x = activation(&conv2d(&x, &weights.conv3)?, Activation::Relu)?;
    let x = activation(&conv2d(&x, &weights.conv4)?, Activation::Relu)?;
    let x = conv2d(&x, &weights.conv5)?;
    let (_, k_len, oh, ow) = x.dims4();
    if oh != 1 || ow != SEQ_LEN {
        return Err(Error::ShapeMismatch(format!(
            "expected 1 × {SEQ_LEN} frames out of the stack, got {oh} × {ow}"
        )));
    }
    let mut values = Tensor::zeros(&[SEQ_LEN, b_len, k_len])?;
    for t in 0..SEQ_LEN {
        for b in 0..b_len {
            for k in 0..k_len {
                values.set3(t, b, k, x.get4(b, k, 0, t));
            }
        }
    }
    RecognitionOutput::from_logits(values)
}

/// Best-path decoding: per-frame argmax (lowest index on ties), collapse
/// adjacent repeats, drop blanks. One string per batch item.
pub fn greedy_decode<T: Scalar>(
    output: &RecognitionOutput<T>,
    alphabet: &Alphabet,
) -> Result<Vec<String>> {
    let (t_len, b_len, k_len) = output.extents();
    if k_len != alphabet.class_count() {
        return Err(Error::ShapeMismatch(format!(
            "scores have {k_len} classes, alphabet expects {}",
            alphabet.class_count()
        )));
    }
    let blank = alphabet.blank_index();
    let mut out = Vec::with_capacity(b_len);
    for b in 0..b_len {
        let mut text = String::new();
        let mut prev = blank;
        for t in 0..t_len {
            let mut best = 0usize;
            let mut best_v = output.values.get3(t, b, 0).to_f64_lossless();
            for k in 1..k_len {
                let v = output.values.get3(t, b, k).to_f64_lossless();
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            if best != blank && best != prev {
                text.push(alphabet.char_at(best).expect("argmax below blank"));
            }
            prev = best;
        }
        out.push(text);
    }
    Ok(out)
}

/// One beam-search hypothesis: probability mass split by whether the last
/// emitted frame was a blank.
#[derive(Debug, Clone, Copy)]
pub struct BeamEntry {
    pub log_blank: f64,
    pub log_nonblank: f64,
}

impl BeamEntry {
    fn empty() -> Self {
        Self {
            log_blank: f64::NEG_INFINITY,
            log_nonblank: f64::NEG_INFINITY,
        }
    }

    pub fn total(&self) -> f64 {
        log_sum_exp(self.log_blank, self.log_nonblank)
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// A decoded label with its summed log path probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedCandidate {
    pub text: String,
    pub log_prob: f64,
}

/// Prefix beam search over the per-frame distributions: hypotheses are
/// label prefixes, each accumulating the probability of *all* frame paths
/// that collapse to it. Keeps the `beam_width` most probable prefixes per
/// step; ties break toward the lexicographically smaller token sequence so
/// results are deterministic. Returns candidates per batch item, best first.
///
/// Pruning can drop early ancestors of a label whose mass arrives late, so a
/// narrow beam may rank the best-path label below a weaker rival, or lose it
/// entirely. To guard against that, the best-path (greedy) label is rescored
/// under the full path sum and merged into the final list: the returned top
/// candidate therefore never carries less posterior mass than greedy
/// decoding would, at any beam width.
pub fn beam_search_decode<T: Scalar>(
    output: &RecognitionOutput<T>,
    alphabet: &Alphabet,
    beam_width: usize,
) -> Result<Vec<Vec<DecodedCandidate>>> {
    let (t_len, b_len, k_len) = output.extents();
    if k_len != alphabet.class_count() {
        return Err(Error::ShapeMismatch(format!(
            "scores have {k_len} classes, alphabet expects {}",
            alphabet.class_count()
        )));
    }
    if beam_width == 0 {
        return Err(Error::InvalidArgument(
            "beam width must be at least 1".into(),
        ));
    }
    let blank = alphabet.blank_index();
    let mut all = Vec::with_capacity(b_len);
    for b in 0..b_len {
        let logp = output.frame_log_probs(b);
        let mut beams: BTreeMap<Vec<usize>, BeamEntry> = BTreeMap::new();
        beams.insert(
            Vec::new(),
            BeamEntry {
                log_blank: 0.0,
                log_nonblank: f64::NEG_INFINITY,
            },
        );
        for frame in logp.iter().take(t_len) {
            let mut next: BTreeMap<Vec<usize>, BeamEntry> = BTreeMap::new();
            for (prefix, entry) in &beams {
                let total = entry.total();
                // stay on this prefix through a blank frame
                let e = next.entry(prefix.clone()).or_insert_with(BeamEntry::empty);
                e.log_blank = log_sum_exp(e.log_blank, total + frame[blank]);
                for k in 0..blank {
                    let p_k = frame[k];
                    if prefix.last() == Some(&k) {
                        // repeated frame collapses into the same prefix...
                        let e = next.entry(prefix.clone()).or_insert_with(BeamEntry::empty);
                        e.log_nonblank = log_sum_exp(e.log_nonblank, entry.log_nonblank + p_k);
                        // ...while a blank-separated repeat extends it
                        let mut ext = prefix.clone();
                        ext.push(k);
                        let e = next.entry(ext).or_insert_with(BeamEntry::empty);
                        e.log_nonblank = log_sum_exp(e.log_nonblank, entry.log_blank + p_k);
                    } else {
                        let mut ext = prefix.clone();
                        ext.push(k);
                        let e = next.entry(ext).or_insert_with(BeamEntry::empty);
                        e.log_nonblank = log_sum_exp(e.log_nonblank, total + p_k);
                    }
                }
            }
            let mut ranked: Vec<(Vec<usize>, BeamEntry)> = next.into_iter().collect();
            ranked.sort_by(|(pa, ea), (pb, eb)| {
                eb.total()
                    .partial_cmp(&ea.total())
                    .unwrap()
                    .then_with(|| pa.cmp(pb))
            });
            ranked.truncate(beam_width);
            beams = ranked.into_iter().collect();
        }
        let mut scored: Vec<(Vec<usize>, f64)> = beams
            .into_iter()
            .filter_map(|(prefix, entry)| {
                // prefixes that kept no probability mass (no complete path
                // collapses to them) are not real candidates
                let total = entry.total();
                (total > f64::NEG_INFINITY).then_some((prefix, total))
            })
            .collect();
        let mut greedy = Vec::new();
        for frame in &logp {
            let mut best = 0usize;
            for k in 1..k_len {
                if frame[k] > frame[best] {
                    best = k;
                }
            }
            if best != blank && greedy.last() != Some(&best) {
                greedy.push(best);
            } else if best == blank {
                greedy.push(blank);
            }
        }
        greedy.retain(|&k| k != blank);
        let exact = crate::loss::ctc_label_log_prob(&logp, &greedy)?;
        if exact > f64::NEG_INFINITY {
            match scored.iter_mut().find(|(prefix, _)| *prefix == greedy) {
                // a surviving beam entry holds a lower bound: only the paths
                // that were never pruned contribute to its accumulated mass
                Some((_, score)) => *score = score.max(exact),
                None => scored.push((greedy, exact)),
            }
        }
        scored.sort_by(|(pa, sa), (pb, sb)| sb.partial_cmp(sa).unwrap().then_with(|| pa.cmp(pb)));
        scored.truncate(beam_width);
        let mut candidates = Vec::with_capacity(scored.len());
        for (prefix, score) in scored {
            candidates.push(DecodedCandidate {
                text: alphabet.decode(&prefix)?,
                log_prob: score,
            });
        }
        all.push(candidates);
    }
    Ok(all)
}

/// Known plate formats: permitted lengths and, per position, the set of
/// tokens allowed there. An empty length list allows any length; positions
/// without an entry (or with an empty set) are unconstrained, as are rule
/// positions beyond a candidate's length.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default)]
    pub allowed_lengths: Vec<usize>,
    #[serde(default)]
    pub position_tokens: Vec<Vec<char>>,
}

impl RuleSet {
    /// Whether a candidate string satisfies every rule.
    pub fn matches(&self, text: &str) -> bool {
        let chars: Vec<char> = text.chars().collect();
        if !self.allowed_lengths.is_empty() && !self.allowed_lengths.contains(&chars.len()) {
            return false;
        }
        for (i, c) in chars.iter().enumerate() {
            match self.position_tokens.get(i) {
                Some(set) if !set.is_empty() && !set.contains(c) => return false,
                _ => {}
            }
        }
        true
    }
}

/// Picks the first candidate (candidates are assumed best-first) that
/// satisfies the rules, marking it verified; falls back to the top candidate
/// unverified when none match. An empty candidate list is an error.
pub fn apply_rules(
    candidates: &[DecodedCandidate],
    rules: &RuleSet,
) -> Result<(DecodedCandidate, bool)> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to filter".into()));
    }
    for c in candidates {
        if rules.matches(&c.text) {
            return Ok((c.clone(), true));
        }
    }
    Ok((candidates[0].clone(), false))
}
