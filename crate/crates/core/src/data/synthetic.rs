//! Synthetic multi-modal tumour slices with nested WT ⊇ TC ⊇ ET labels.
//!
//! Each case places a rotated elliptical whole-tumour region, a concentric
//! tumour core scaled by `tc_shrink`, and an enhancing core scaled again by
//! `et_shrink`. The four modality channels render background tissue, edema,
//! core and enhancing tissue with distinct intensities, scaled by a per-case
//! gain and overlaid with low-amplitude texture noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Case, Slice, MODALITIES, REGIONS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{hash_str, rng_for};
use crate::tensor::Tensor;

/// Intensity of each tissue class per modality: `[background, edema, core, enhancing]`.
pub type ContrastProfile = [[f64; 4]; MODALITIES];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub case_count: usize,
    pub slices_per_case: usize,
    pub slice_size: usize,
    /// Bounds on each semi-axis of the WT ellipse, in pixels.
    pub wt_radius: (f64, f64),
    /// TC semi-axes relative to WT.
    pub tc_shrink: f64,
    /// ET semi-axes relative to TC.
    pub et_shrink: f64,
    /// Modalities in order T1, T1ce, T2, FLAIR.
    pub contrast: ContrastProfile,
    /// Per-case multiplicative gain range applied to every modality independently.
    pub case_gain: (f64, f64),
    pub texture_noise: f64,
    pub master_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            case_count: 40,
            slices_per_case: 8,
            slice_size: 64,
            wt_radius: (7.0, 16.0),
            tc_shrink: 0.6,
            et_shrink: 0.5,
            contrast: [
                [0.50, 0.40, 0.30, 0.35],
                [0.50, 0.45, 0.30, 0.90],
                [0.40, 0.75, 0.60, 0.55],
                [0.35, 0.85, 0.55, 0.60],
            ],
            case_gain: (0.9, 1.1),
            texture_noise: 0.03,
            master_seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// 16x16 variant for fast tests.
    pub fn small() -> Self {
        Self { case_count: 8, slices_per_case: 2, slice_size: 16, wt_radius: (2.0, 5.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.wt_radius;
        if self.case_count == 0 || self.slices_per_case == 0 {
            return Err(Error::config("case_count and slices_per_case must be positive"));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(format!("wt_radius range ({lo}, {hi}) must satisfy 0 < min <= max")));
        }
        if 2.0 * hi + 2.0 > self.slice_size as f64 {
            return Err(Error::config(format!(
                "wt_radius max {hi} does not fit inside a {0}x{0} slice",
                self.slice_size
            )));
        }
        for (name, v) in [("tc_shrink", self.tc_shrink), ("et_shrink", self.et_shrink)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if self.contrast.iter().flatten().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::config("contrast profile intensities must lie in [0, 1]"));
        }
        if !(self.case_gain.0 > 0.0 && self.case_gain.0 <= self.case_gain.1) || self.texture_noise < 0.0 {
            return Err(Error::config("case_gain must be a positive range and texture_noise nonnegative"));
        }
        Ok(())
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// Deterministic in `(master_seed, case_index)`.
pub fn generate_case<T: Scalar>(config: &SyntheticConfig, case_index: usize) -> Result<Case<T>> {
    config.validate()?;
    let s = config.slice_size;
    let sf = s as f64;
    let (rmin, rmax) = config.wt_radius;
    let mut rng = rng_for(&[config.master_seed, hash_str("synthetic-case"), case_index as u64]);

    let margin = rmax + 1.0;
    let cx = rng.random_range(margin..=sf - margin);
    let cy = rng.random_range(margin..=sf - margin);
    let axis_a = rng.random_range(rmin..=rmax);
    let axis_b = rng.random_range(rmin..=rmax);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let gains: Vec<f64> = (0..MODALITIES).map(|_| rng.random_range(config.case_gain.0..=config.case_gain.1)).collect();
    let (sin, cos) = angle.sin_cos();
    let tc2 = config.tc_shrink * config.tc_shrink;
    let et2 = (config.tc_shrink * config.et_shrink).powi(2);

    let mut slices = Vec::with_capacity(config.slices_per_case);
    for j in 0..config.slices_per_case {
        // tumour tapers away from the central slice
        let z = 2.0 * (j as f64 + 0.5) / config.slices_per_case as f64 - 1.0;
        let taper = (1.0 - 0.75 * z * z).sqrt();
        let a = (axis_a * taper).max(rmin);
        let b = (axis_b * taper).max(rmin);

        let plane = s * s;
        let mut labels = vec![T::zero(); REGIONS * plane];
        let mut image = vec![T::zero(); MODALITIES * plane];
        for y in 0..s {
            for x in 0..s {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (dx, dy) = (px - cx, py - cy);
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                let q = u * u + v * v;
                let wt = q <= 1.0;
                let tc = wt && q <= tc2;
                let et = tc && q <= et2;
                let p = y * s + x;
                for (r, on) in [wt, tc, et].into_iter().enumerate() {
                    if on {
                        labels[r * plane + p] = T::one();
                    }
                }
                let bx = (px - sf / 2.0) / (0.46 * sf);
                let by = (py - sf / 2.0) / (0.40 * sf);
                let in_brain = bx * bx + by * by <= 1.0;
                let tissue = if et {
                    Some(3)
                } else if tc {
                    Some(2)
                } else if wt {
                    Some(1)
                } else if in_brain {
                    Some(0)
                } else {
                    None
                };
                for m in 0..MODALITIES {
                    let base = tissue.map_or(0.0, |t| config.contrast[m][t] * gains[m]);
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let value = (base + config.texture_noise * noise).clamp(0.0, 1.0);
                    image[m * plane + p] = T::of(value);
                }
            }
        }
        slices.push(Slice {
            image: Tensor::new(vec![MODALITIES, s, s], image)?,
            labels: Tensor::new(vec![REGIONS, s, s], labels)?,
        });
    }
    Ok(Case { case_id: case_id(case_index), slices })
}

pub fn generate_cases<T: Scalar>(config: &SyntheticConfig) -> Result<Vec<Case<T>>> {
    (0..config.case_count).map(|i| generate_case(config, i)).collect()
}
