//! Fusing four backbone stages into one shared feature map.
//!
//! The backbone supplies stages `c2..c5` at strides 4, 8, 16, 32. Each stage
//! is reduced to 128 channels by a 1×1 conv (+ folded BN + ReLU), merged
//! top-down into a pyramid — `p5 = c5'` and `p_k = 0.5 c_k' + 0.5 up2(p_{k+1})`
//! with nearest-neighbor upsampling — and the four pyramid levels are
//! upsampled to the `p2` grid, concatenated to 512 channels, and mixed by a
//! 3×3 conv (+ folded BN + ReLU) back down to 128 channels. The result is
//! the shared `B × 128 × H/4 × W/4` map every downstream head reads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ptar::PtarArchive;
use crate::scalar::Scalar;
use crate::tensor::{
    activation, concat_channels, conv2d, upsample_nearest, Activation, ConvSpec, Tensor,
};

/// Channel count of the reduced stages, the pyramid, and the fused map.
pub const FUSED_CHANNELS: usize = 128;

/// The four backbone stages, highest resolution first.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneFeatures<T> {
    pub c2: Tensor<T>,
    pub c3: Tensor<T>,
    pub c4: Tensor<T>,
    pub c5: Tensor<T>,
}

impl<T: Scalar> BackboneFeatures<T> {
    pub fn stages(&self) -> [&Tensor<T>; 4] {
        [&self.c2, &self.c3, &self.c4, &self.c5]
    }

    /// Checks all stages are rank 4, share the batch extent, and halve in
    /// both spatial extents from each level to the next.
    pub fn validate(&self) -> Result<()> {
        let names = ["c2", "c3", "c4", "c5"];
        let stages = self.stages();
        for (t, name) in stages.iter().zip(names) {
            if t.rank() != 4 {
                return Err(Error::ShapeMismatch(format!(
                    "stage {name} must be rank 4, got rank {}",
                    t.rank()
                )));
            }
        }
        let (b, _, _, _) = stages[0].dims4();
        for k in 0..3 {
            let (ba, _, ha, wa) = stages[k].dims4();
            let (bb, _, hb, wb) = stages[k + 1].dims4();
            if ba != b || bb != b {
                return Err(Error::ShapeMismatch(
                    "stages disagree in batch extent".into(),
                ));
            }
            if ha != 2 * hb || wa != 2 * wb {
                return Err(Error::ShapeMismatch(format!(
                    "inconsistent spatial ratios: {} is {}x{} but {} is {}x{}",
                    names[k],
                    ha,
                    wa,
                    names[k + 1],
                    hb,
                    wb
                )));
            }
        }
        Ok(())
    }
}

/// Loads stages `c2..c5` from an archive and validates their extents.
pub fn load_backbone_features<T: Scalar>(archive: &PtarArchive) -> Result<BackboneFeatures<T>> {
    let mut stages = Vec::with_capacity(4);
    for name in ["c2", "c3", "c4", "c5"] {
        let t = archive
            .get(name)
            .ok_or_else(|| Error::MissingStage(name.to_string()))?;
        stages.push(t.cast::<T>());
    }
    let f = BackboneFeatures {
        c5: stages.pop().unwrap(),
        c4: stages.pop().unwrap(),
        c3: stages.pop().unwrap(),
        c2: stages.pop().unwrap(),
    };
    f.validate()?;
    Ok(f)
}

/// A deterministic seeded stand-in backbone for smoke tests: a stride-2 stem
/// followed by four stride-2 3×3 conv stages with ReLU, producing stages at
/// strides 4, 8, 16, 32 with channel counts 32, 64, 128, 256.
///
/// Requires both image extents divisible by 32. The same seed always yields
/// bit-identical features.
pub fn standin_backbone<T: Scalar>(image: &Tensor<T>, seed: u64) -> Result<BackboneFeatures<T>> {
    let (_, c, h, w) = image.dims4();
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::InvalidArgument(format!(
            "stand-in backbone needs extents divisible by 32, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = [16, 32, 64, 128, 256];
    let mut specs = Vec::with_capacity(5);
    let mut in_c = c;
    for out_c in channels {
        specs.push(ConvSpec::<T>::seeded(in_c, out_c, 3, 3, 2, 1, &mut rng)?);
        in_c = out_c;
    }
    let mut x = image.clone();
    let mut stages = Vec::with_capacity(4);
    for (i, spec) in specs.iter().enumerate() {
        x = activation(&conv2d(&x, spec)?, Activation::Relu)?;
        if i >= 1 {
            stages.push(x.clone());
        }
    }
    let f = BackboneFeatures {
        c5: stages.pop().unwrap(),
        c4: stages.pop().unwrap(),
        c3: stages.pop().unwrap(),
        c2: stages.pop().unwrap(),
    };
    f.validate()?;
    Ok(f)
}

/// The 1×1 reduction convs for `c2..c5` plus the final 3×3 mixing conv.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<T> {
    /// Reductions for `c2..c5`, in that order.
    pub reduce: [ConvSpec<T>; 4],
    /// 3×3, stride 1, pad 1, `4 * FUSED_CHANNELS -> FUSED_CHANNELS`.
    pub fuse_conv: ConvSpec<T>,
}

/// Reads one conv layer stored under `<name>.weight` / `<name>.bias` with an
/// optional `<name>.bn_scale` / `<name>.bn_shift` pair; stride and padding
/// are architectural, not stored.
pub fn layer_from_archive<T: Scalar>(
    archive: &PtarArchive,
    name: &str,
    stride: usize,
    padding: usize,
) -> Result<ConvSpec<T>> {
    let w = archive.require(&format!("{name}.weight"))?.cast::<T>();
    let b = archive.require(&format!("{name}.bias"))?.cast::<T>();
    let (oc, ic, kh, kw) = w.dims4();
    let spec = ConvSpec::new(ic, oc, kh, kw, stride, padding, w, b.into_data())?;
    match (
        archive.get(&format!("{name}.bn_scale")),
        archive.get(&format!("{name}.bn_shift")),
    ) {
        (Some(s), Some(sh)) => {
            spec.with_fused_bn(s.cast::<T>().into_data(), sh.cast::<T>().into_data())
        }
        (None, None) => Ok(spec),
        _ => Err(Error::Format(format!(
            "layer '{name}' has only one of bn_scale/bn_shift"
        ))),
    }
}

/// Stores one conv layer under the names [`layer_from_archive`] expects.
pub fn layer_to_archive<T: Scalar>(
    archive: &mut PtarArchive,
    name: &str,
    spec: &ConvSpec<T>,
) -> Result<()> {
    archive.insert_cast(&format!("{name}.weight"), &spec.weights)?;
    archive.insert_cast(
        &format!("{name}.bias"),
        &Tensor::new(&[spec.out_channels], spec.bias.clone())?,
    )?;
    if let Some(bn) = &spec.fused_bn {
        archive.insert_cast(
            &format!("{name}.bn_scale"),
            &Tensor::new(&[spec.out_channels], bn.scale.clone())?,
        )?;
        archive.insert_cast(
            &format!("{name}.bn_shift"),
            &Tensor::new(&[spec.out_channels], bn.shift.clone())?,
        )?;
    }
    Ok(())
}

impl<T: Scalar> FusionWeights<T> {
    /// Loads `reduce2..reduce5` and `fuse_conv` from an archive by their
    /// canonical names.
    pub fn from_archive(archive: &PtarArchive) -> Result<Self> {
        let reduce = [
            layer_from_archive(archive, "reduce2", 1, 0)?,
            layer_from_archive(archive, "reduce3", 1, 0)?,
            layer_from_archive(archive, "reduce4", 1, 0)?,
            layer_from_archive(archive, "reduce5", 1, 0)?,
        ];
        let fuse_conv = layer_from_archive(archive, "fuse_conv", 1, 1)?;
        Ok(Self { reduce, fuse_conv })
    }

    /// Stores all layers under their canonical names.
    pub fn to_archive(&self, archive: &mut PtarArchive) -> Result<()> {
        for (spec, name) in self
            .reduce
            .iter()
            .zip(["reduce2", "reduce3", "reduce4", "reduce5"])
            .chain(std::iter::once((&self.fuse_conv, "fuse_conv")))
        {
            layer_to_archive(archive, name, spec)?;
        }
        Ok(())
    }

    /// Seeded random weights (`±1/sqrt(fan_in)`, zero bias, no BN) for the
    /// given backbone channel counts.
    pub fn seeded(seed: u64, stage_channels: [usize; 4]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |ic: usize, rng: &mut ChaCha8Rng| {
            ConvSpec::<T>::seeded(ic, FUSED_CHANNELS, 1, 1, 1, 0, rng)
        };
        let reduce = [
            mk(stage_channels[0], &mut rng)?,
            mk(stage_channels[1], &mut rng)?,
            mk(stage_channels[2], &mut rng)?,
            mk(stage_channels[3], &mut rng)?,
        ];
        let fuse_conv =
            ConvSpec::<T>::seeded(4 * FUSED_CHANNELS, FUSED_CHANNELS, 3, 3, 1, 1, &mut rng)?;
        Ok(Self { reduce, fuse_conv })
    }
}

/// Applies the per-stage 1×1 reductions (+ ReLU), returning `c2'..c5'`.
pub fn reduce_stages<T: Scalar>(
    features: &BackboneFeatures<T>,
    weights: &FusionWeights<T>,
) -> Result<[Tensor<T>; 4]> {
    features.validate()?;
    let mut out = Vec::with_capacity(4);
    for (stage, spec) in features.stages().into_iter().zip(weights.reduce.iter()) {
        out.push(activation(&conv2d(stage, spec)?, Activation::Relu)?);
    }
    Ok([out.remove(0), out.remove(0), out.remove(0), out.remove(0)])
}

/// Top-down pyramid merge: `p5 = c5'`, then
/// `p_k = 0.5 * c_k' + 0.5 * up2(p_{k+1})` for k = 4, 3, 2.
///
/// Inputs are `c2'..c5'` in that order; all four must share batch and
/// channel extents and halve spatially level to level.
pub fn build_pyramid<T: Scalar>(reduced: &[Tensor<T>; 4]) -> Result<[Tensor<T>; 4]> {
    let (b, c, _, _) = reduced[0].dims4();
    for (k, t) in reduced.iter().enumerate() {
        let (tb, tc, _, _) = t.dims4();
        if (tb, tc) != (b, c) {
            return Err(Error::ShapeMismatch(format!(
                "pyramid input {k} disagrees in batch/channels"
            )));
        }
        if k < 3 {
            let (_, _, ha, wa) = reduced[k].dims4();
            let (_, _, hb, wb) = reduced[k + 1].dims4();
            if ha != 2 * hb || wa != 2 * wb {
                return Err(Error::ShapeMismatch(format!(
                    "inconsistent spatial ratios between pyramid inputs {k} and {}",
                    k + 1
                )));
            }
        }
    }
    let half = T::from_f64_lossy(0.5);
    let p5 = reduced[3].clone();
    let mut upper = p5.clone();
    let mut lower_levels = Vec::with_capacity(3);
    for k in (0..3).rev() {
        let up = upsample_nearest(&upper, 2)?;
        let mut p = reduced[k].clone();
        for (pv, uv) in p.data_mut().iter_mut().zip(up.data()) {
            *pv = half * *pv + half * *uv;
        }
        lower_levels.push(p.clone());
        upper = p;
    }
    let p2 = lower_levels.pop().unwrap();
    let p3 = lower_levels.pop().unwrap();
    let p4 = lower_levels.pop().unwrap();
    Ok([p2, p3, p4, p5])
}

/// Upsamples every pyramid level to the `p2` grid, concatenates to
/// `4 × channels`, and applies the 3×3 mixing conv (+ ReLU).
pub fn fuse<T: Scalar>(pyramid: &[Tensor<T>; 4], fuse_conv: &ConvSpec<T>) -> Result<Tensor<T>> {
    let up3 = upsample_nearest(&pyramid[1], 2)?;
    let up4 = upsample_nearest(&pyramid[2], 4)?;
    let up5 = upsample_nearest(&pyramid[3], 8)?;
    let cat = concat_channels(&[&pyramid[0], &up3, &up4, &up5])?;
    let mixed = conv2d(&cat, fuse_conv)?;
    if mixed.dims()[2..] != cat.dims()[2..] {
        return Err(Error::ShapeMismatch(format!(
            "fuse conv must preserve spatial extents, got {:?} from {:?}",
            mixed.dims(),
            cat.dims()
        )));
    }
    activation(&mixed, Activation::Relu)
}

/// Full fusion: reduce, build the pyramid, fuse. Returns the shared
/// `B × 128 × H/4 × W/4` feature map.
pub fn shared_features<T: Scalar>(
    features: &BackboneFeatures<T>,
    weights: &FusionWeights<T>,
) -> Result<Tensor<T>> {
    let reduced = reduce_stages(features, weights)?;
    let pyramid = build_pyramid(&reduced)?;
    fuse(&pyramid, &weights.fuse_conv)
}
