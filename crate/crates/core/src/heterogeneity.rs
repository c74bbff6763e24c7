//! Graded per-client appearance shifts (levels H0..H3).
//!
//! Client 1 is always the clean reference. The remaining clients cycle through
//! gamma contrast, scale/shift, and noise-then-blur families. Training draws
//! one parameter set per batch from the client's own stream; evaluation draws
//! are keyed by `(experiment seed, client, case, slice)` so every method and
//! every round sees the same shifted validation images.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{hash_str, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HeterogeneityLevel {
    H0,
    H1,
    H2,
    H3,
}

impl HeterogeneityLevel {
    pub const ALL: [HeterogeneityLevel; 4] = [Self::H0, Self::H1, Self::H2, Self::H3];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::H0 => "H0",
            Self::H1 => "H1",
            Self::H2 => "H2",
            Self::H3 => "H3",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for HeterogeneityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeterogeneityLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown heterogeneity level {s:?}, expected H0..H3")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformFamily {
    None,
    Gamma,
    ScaleShift,
    NoiseBlur,
}

impl TransformFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Gamma => "gamma",
            Self::ScaleShift => "scale_shift",
            Self::NoiseBlur => "noise_blur",
        }
    }
}

impl fmt::Display for TransformFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::None, Self::Gamma, Self::ScaleShift, Self::NoiseBlur]
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown transform family {s:?}")))
    }
}

/// Closed interval; `lo == hi` is a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Uniform draw; a point range returns its value without consuming randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * rng.random::<f64>()
        }
    }
}

const GAMMA: [Range; 4] = [Range::point(1.0), Range::new(0.8, 1.2), Range::new(0.6, 1.5), Range::new(0.5, 2.0)];
const SCALE: [Range; 4] = [Range::point(1.0), Range::new(0.95, 1.05), Range::new(0.9, 1.1), Range::new(0.8, 1.2)];
const SHIFT: [Range; 4] = [Range::point(0.0), Range::new(-0.03, 0.03), Range::new(-0.07, 0.07), Range::new(-0.1, 0.1)];
const NOISE_STD: [Range; 4] = [Range::point(0.0), Range::point(0.01), Range::point(0.03), Range::point(0.05)];
const BLUR_STD: [Range; 4] = [Range::point(0.0), Range::point(1.0), Range::point(2.0), Range::new(3.0, 5.0)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FamilyRanges {
    None,
    Gamma { gamma: Range },
    ScaleShift { scale: Range, shift: Range },
    NoiseBlur { noise_std: Range, blur_std: Range },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformSpec {
    pub family: TransformFamily,
    pub level: HeterogeneityLevel,
    pub ranges: FamilyRanges,
}

impl TransformSpec {
    pub fn new(family: TransformFamily, level: HeterogeneityLevel) -> Self {
        let i = level.index();
        let ranges = match family {
            TransformFamily::None => FamilyRanges::None,
            TransformFamily::Gamma => FamilyRanges::Gamma { gamma: GAMMA[i] },
            TransformFamily::ScaleShift => FamilyRanges::ScaleShift { scale: SCALE[i], shift: SHIFT[i] },
            TransformFamily::NoiseBlur => FamilyRanges::NoiseBlur { noise_std: NOISE_STD[i], blur_std: BLUR_STD[i] },
        };
        Self { family, level, ranges }
    }

    pub fn identity() -> Self {
        Self::new(TransformFamily::None, HeterogeneityLevel::H0)
    }
}

/// Transform family of a 1-based client id: client 1 is clean, the rest cycle
/// gamma, scale/shift, noise+blur.
pub fn family_for(client_id: usize) -> TransformFamily {
    const SHIFTED: [TransformFamily; 3] = [TransformFamily::Gamma, TransformFamily::ScaleShift, TransformFamily::NoiseBlur];
    if client_id <= 1 {
        TransformFamily::None
    } else {
        SHIFTED[(client_id - 2) % 3]
    }
}

pub fn spec_for(client_id: usize, level: HeterogeneityLevel) -> TransformSpec {
    TransformSpec::new(family_for(client_id), level)
}

/// One concrete draw of a family's parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampledTransform {
    Identity,
    Gamma { gamma: f64 },
    ScaleShift { scale: f64, shift: f64 },
    /// `noise_seed` keys the per-pixel Gaussian noise so application is a pure function.
    NoiseBlur { noise_std: f64, blur_std: f64, noise_seed: u64 },
}

impl SampledTransform {
    pub fn family(&self) -> TransformFamily {
        match self {
            Self::Identity => TransformFamily::None,
            Self::Gamma { .. } => TransformFamily::Gamma,
            Self::ScaleShift { .. } => TransformFamily::ScaleShift,
            Self::NoiseBlur { .. } => TransformFamily::NoiseBlur,
        }
    }

    /// True when applying this draw cannot change any image.
    pub fn is_identity(&self) -> bool {
        match *self {
            Self::Identity => true,
            Self::Gamma { gamma } => gamma == 1.0,
            Self::ScaleShift { scale, shift } => scale == 1.0 && shift == 0.0,
            Self::NoiseBlur { noise_std, blur_std, .. } => noise_std == 0.0 && blur_std == 0.0,
        }
    }
}

pub fn sample<R: Rng + ?Sized>(spec: &TransformSpec, rng: &mut R) -> SampledTransform {
    match spec.ranges {
        FamilyRanges::None => SampledTransform::Identity,
        FamilyRanges::Gamma { gamma } => SampledTransform::Gamma { gamma: gamma.sample(rng) },
        FamilyRanges::ScaleShift { scale, shift } => {
            SampledTransform::ScaleShift { scale: scale.sample(rng), shift: shift.sample(rng) }
        }
        FamilyRanges::NoiseBlur { noise_std, blur_std } => {
            let noise_std = noise_std.sample(rng);
            let blur_std = blur_std.sample(rng);
            let noise_seed = if noise_std > 0.0 { rng.random() } else { 0 };
            SampledTransform::NoiseBlur { noise_std, blur_std, noise_seed }
        }
    }
}

/// Deterministic evaluation-time draw for one validation slice.
pub fn eval_transform(
    spec: &TransformSpec,
    experiment_seed: u64,
    client_id: usize,
    case_id: &str,
    slice_index: usize,
) -> SampledTransform {
    let mut rng = rng_for(&[experiment_seed, hash_str("eval-transform"), client_id as u64, hash_str(case_id), slice_index as u64]);
    sample(spec, &mut rng)
}

fn clip<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Normalized 1D Gaussian taps truncated at `ceil(3 * std)`.
pub fn gaussian_kernel(std: f64) -> Vec<f64> {
    let radius = (3.0 * std).ceil() as usize;
    let taps: Vec<f64> =
        (0..=2 * radius).map(|i| (-((i as f64 - radius as f64).powi(2)) / (2.0 * std * std)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur of every `h x w` plane, replicating edge pixels.
fn blur_planes<T: Scalar>(data: &mut [T], h: usize, w: usize, std: f64) {
    let taps: Vec<T> = gaussian_kernel(std).into_iter().map(T::of).collect();
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    for plane in data.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (k, &t) in taps.iter().enumerate() {
                    let sx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += t * plane[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (k, &t) in taps.iter().enumerate() {
                    let sy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += t * tmp[sy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

/// Applies a draw to a `[C, H, W]` image with values in `[0, 1]`.
///
/// Gamma needs no clipping; scale/shift and noise+blur outputs are clipped to `[0, 1]`.
pub fn apply<T: Scalar>(image: &Tensor<T>, t: &SampledTransform) -> Result<Tensor<T>> {
    if image.rank() != 3 {
        return Err(Error::shape(format!("transform expects [C, H, W], got {:?}", image.shape())));
    }
    if image.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::Precondition("image intensities must lie in [0, 1]".into()));
    }
    if t.is_identity() {
        return Ok(image.clone());
    }
    let out = match *t {
        SampledTransform::Identity => image.clone(),
        SampledTransform::Gamma { gamma } => {
            let g = T::of(gamma);
            image.map(|v| v.powf(g))
        }
        SampledTransform::ScaleShift { scale, shift } => {
            let (a, b) = (T::of(scale), T::of(shift));
            image.map(|v| clip(a * v + b))
        }
        SampledTransform::NoiseBlur { noise_std, blur_std, noise_seed } => {
            let mut out = image.clone();
            if noise_std > 0.0 {
                let mut rng = rng_for(&[noise_seed]);
                for v in out.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += T::of(noise_std * z);
                }
            }
            if blur_std > 0.0 {
                let (h, w) = (image.shape()[1], image.shape()[2]);
                blur_planes(out.data_mut(), h, w, blur_std);
            }
            out.map(clip)
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, s: usize) -> Tensor<f64> {
        let n = c * s * s;
        Tensor::new(vec![c, s, s], (0..n).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect()).unwrap()
    }

    #[test]
    fn client_family_assignment() {
        use HeterogeneityLevel::*;
        assert_eq!(spec_for(1, H3).family, TransformFamily::None);
        assert_eq!(spec_for(2, H3).ranges, FamilyRanges::Gamma { gamma: Range::new(0.5, 2.0) });
        assert_eq!(
            spec_for(4, H1).ranges,
            FamilyRanges::NoiseBlur { noise_std: Range::point(0.01), blur_std: Range::point(1.0) }
        );
        assert_eq!(family_for(3), TransformFamily::ScaleShift);
        assert_eq!(family_for(5), TransformFamily::Gamma);
        assert_eq!(family_for(7), TransformFamily::NoiseBlur);
    }

    #[test]
    fn table_ranges() {
        use HeterogeneityLevel::*;
        let ss = |l| spec_for(3, l).ranges;
        assert_eq!(ss(H2), FamilyRanges::ScaleShift { scale: Range::new(0.9, 1.1), shift: Range::new(-0.07, 0.07) });
        assert_eq!(
            spec_for(4, H3).ranges,
            FamilyRanges::NoiseBlur { noise_std: Range::point(0.05), blur_std: Range::new(3.0, 5.0) }
        );
    }

    #[test]
    fn h0_draws_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in 1..=4 {
            let t = sample(&spec_for(id, HeterogeneityLevel::H0), &mut rng);
            assert!(t.is_identity(), "{t:?}");
            let img = ramp(4, 8);
            assert_eq!(apply(&img, &t).unwrap(), img);
        }
    }

    #[test]
    fn analytic_values() {
        let x = Tensor::<f64>::full(&[1, 1, 1], 0.25);
        assert_eq!(apply(&x, &SampledTransform::Gamma { gamma: 2.0 }).unwrap().data(), &[0.0625]);
        let x = Tensor::<f64>::full(&[1, 1, 1], 0.5);
        let y = apply(&x, &SampledTransform::ScaleShift { scale: 1.2, shift: 0.1 }).unwrap();
        assert!((y.data()[0] - 0.7).abs() < 1e-15);
        let x = Tensor::<f64>::full(&[1, 1, 1], 0.95);
        assert_eq!(apply(&x, &SampledTransform::ScaleShift { scale: 1.2, shift: 0.1 }).unwrap().data(), &[1.0]);
    }

    #[test]
    fn blur_preserves_constant_images_and_clips() {
        let x = Tensor::<f64>::full(&[2, 9, 9], 0.4);
        let t = SampledTransform::NoiseBlur { noise_std: 0.0, blur_std: 2.0, noise_seed: 0 };
        assert!(apply(&x, &t).unwrap().max_abs_diff(&x) < 1e-12);
        let t = SampledTransform::NoiseBlur { noise_std: 0.5, blur_std: 0.0, noise_seed: 9 };
        let y = apply(&x, &t).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(y, apply(&x, &t).unwrap());
    }

    #[test]
    fn kernel_is_normalized_and_truncated() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(3.5).len(), 2 * 11 + 1);
    }

    #[test]
    fn rejects_out_of_range_input() {
        let x = Tensor::<f64>::full(&[1, 1, 1], 1.5);
        assert!(matches!(apply(&x, &SampledTransform::Gamma { gamma: 1.1 }), Err(Error::Precondition(_))));
    }

    #[test]
    fn eval_transform_is_keyed_by_slice() {
        let spec = spec_for(2, HeterogeneityLevel::H3);
        let a = eval_transform(&spec, 5, 2, "case_0003", 1);
        assert_eq!(a, eval_transform(&spec, 5, 2, "case_0003", 1));
        assert_ne!(a, eval_transform(&spec, 5, 2, "case_0003", 2));
        assert_ne!(a, eval_transform(&spec, 6, 2, "case_0003", 1));
        assert!(eval_transform(&spec_for(2, HeterogeneityLevel::H0), 5, 2, "x", 0).is_identity());
    }

    #[test]
    fn level_parsing() {
        assert_eq!("H2".parse::<HeterogeneityLevel>().unwrap(), HeterogeneityLevel::H2);
        assert!("h2".parse::<HeterogeneityLevel>().is_err());
        assert!(HeterogeneityLevel::H0 < HeterogeneityLevel::H3);
        assert_eq!("scale_shift".parse::<TransformFamily>().unwrap(), TransformFamily::ScaleShift);
    }
}
