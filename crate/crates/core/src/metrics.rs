//! Dice scores and the worst-client / disparity metric suite.

use std::collections::BTreeMap;

use crate::data::REGIONS;
use crate::error::{Error, Result};

/// `(2|P∩T| + eps) / (|P| + |T| + eps)` over binary masks. Two empty masks score 1 for any `eps > 0`.
pub fn dice(pred: &[bool], target: &[bool], eps: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("dice: {} vs {} pixels", pred.len(), target.len())));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(target) {
        inter += usize::from(a && b);
        p += usize::from(a);
        t += usize::from(b);
    }
    let denom = (p + t) as f64 + eps;
    if denom == 0.0 {
        // both empty with eps == 0
        return Ok(1.0);
    }
    Ok((2.0 * inter as f64 + eps) / denom)
}

/// Per-client validation Dice averaged over that client's slices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientDice {
    /// WT, TC, ET.
    pub regions: [f64; REGIONS],
    pub mean_dice: f64,
    pub slices: usize,
}

impl ClientDice {
    pub fn from_regions(regions: [f64; REGIONS], slices: usize) -> Self {
        Self { regions, mean_dice: regions.iter().sum::<f64>() / REGIONS as f64, slices }
    }
}

/// Validation results of one strategy after one communication round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based.
    pub round_index: usize,
    pub strategy: String,
    pub per_client: BTreeMap<usize, ClientDice>,
    /// Mean Dice over all validation slices (each client weighted by its slice count).
    pub global_mean_dice: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl RoundRecord {
    pub fn client_mean_dice(&self) -> BTreeMap<usize, f64> {
        self.per_client.iter().map(|(&k, v)| (k, v.mean_dice)).collect()
    }

    pub fn client_region_dice(&self) -> BTreeMap<usize, [f64; REGIONS]> {
        self.per_client.iter().map(|(&k, v)| (k, v.regions)).collect()
    }
}

/// Slice-weighted mean of per-client mean Dice.
pub fn slice_weighted_mean(per_client: &BTreeMap<usize, ClientDice>) -> f64 {
    let total: usize = per_client.values().map(|c| c.slices).sum();
    if total == 0 {
        return 0.0;
    }
    per_client.values().map(|c| c.mean_dice * c.slices as f64).sum::<f64>() / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustnessReport {
    pub worst: f64,
    pub worst_client: usize,
    pub best: f64,
    pub best_client: usize,
    /// `best - worst`.
    pub gap: f64,
    /// Arithmetic mean over clients.
    pub mean: f64,
}

/// Worst/best/gap/mean over per-client mean Dice. Ties resolve to the lowest client id.
pub fn client_robustness(per_client_mean_dice: &BTreeMap<usize, f64>) -> Result<RobustnessReport> {
    if per_client_mean_dice.len() < 2 {
        return Err(Error::Validation(format!(
            "robustness needs at least 2 clients, got {}",
            per_client_mean_dice.len()
        )));
    }
    let mut it = per_client_mean_dice.iter();
    let (&first_id, &first) = it.next().expect("non-empty");
    let (mut worst, mut worst_client, mut best, mut best_client) = (first, first_id, first, first_id);
    for (&id, &v) in it {
        if v < worst {
            worst = v;
            worst_client = id;
        }
        if v > best {
            best = v;
            best_client = id;
        }
    }
    let mean = per_client_mean_dice.values().sum::<f64>() / per_client_mean_dice.len() as f64;
    Ok(RobustnessReport {
        worst,
        worst_client,
        best,
        best_client,
        gap: best - worst,
        // rounding in the sum must not push the mean outside [worst, best]
        mean: mean.clamp(worst, best),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubregionGaps {
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
    /// Mean of the three per-region gaps (gap first, then average).
    pub mean_gap: f64,
    /// Gap of per-client mean Dice (average first, then gap).
    pub mean_dice_gap: f64,
}

pub fn subregion_gaps(per_client_per_region: &BTreeMap<usize, [f64; REGIONS]>) -> Result<SubregionGaps> {
    if per_client_per_region.len() < 2 {
        return Err(Error::Validation("subregion gaps need at least 2 clients".into()));
    }
    let gap = |r: usize| {
        let vals = per_client_per_region.values().map(|v| v[r]);
        let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.fold(f64::INFINITY, f64::min);
        max - min
    };
    let (wt, tc, et) = (gap(0), gap(1), gap(2));
    let means: BTreeMap<usize, f64> =
        per_client_per_region.iter().map(|(&k, v)| (k, v.iter().sum::<f64>() / REGIONS as f64)).collect();
    Ok(SubregionGaps { wt, tc, et, mean_gap: (wt + tc + et) / 3.0, mean_dice_gap: client_robustness(&means)?.gap })
}

/// Builds the per-region table from rows that may be missing regions.
pub fn region_table(rows: &BTreeMap<usize, Vec<f64>>) -> Result<BTreeMap<usize, [f64; REGIONS]>> {
    rows.iter()
        .map(|(&k, v)| {
            <[f64; REGIONS]>::try_from(v.as_slice())
                .map(|arr| (k, arr))
                .map_err(|_| Error::Validation(format!("client {k} has {} regions, expected {REGIONS}", v.len())))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeterogeneitySummary {
    pub best_mean_dice: f64,
    pub best_round: usize,
    /// `(threshold, first round reaching it)`; `None` means not reached.
    pub rounds_to_threshold: Vec<(f64, Option<usize>)>,
}

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.78, 0.80];

/// Rendering of an unreached threshold.
pub const NOT_REACHED: &str = "--";

pub fn format_rounds(r: Option<usize>) -> String {
    r.map_or_else(|| NOT_REACHED.to_string(), |v| v.to_string())
}

/// Best global mean Dice over rounds (earliest round on ties) and first round reaching
/// each threshold. Records are sorted by round index first.
pub fn heterogeneity_summary(records: &[RoundRecord], thresholds: &[f64]) -> Result<HeterogeneitySummary> {
    let series: Vec<(usize, f64)> = records.iter().map(|r| (r.round_index, r.global_mean_dice)).collect();
    summarize_series(&series, thresholds)
}

/// Same as [`heterogeneity_summary`] over `(round, global mean Dice)` pairs.
pub fn summarize_series(series: &[(usize, f64)], thresholds: &[f64]) -> Result<HeterogeneitySummary> {
    if series.is_empty() {
        return Err(Error::Validation("heterogeneity summary needs at least one round".into()));
    }
    let mut sorted = series.to_vec();
    sorted.sort_by_key(|&(r, _)| r);
    let (mut best_round, mut best) = sorted[0];
    for &(r, v) in &sorted[1..] {
        if v > best {
            best = v;
            best_round = r;
        }
    }
    let rounds_to_threshold =
        thresholds.iter().map(|&t| (t, sorted.iter().find(|&&(_, v)| v >= t).map(|&(r, _)| r))).collect();
    Ok(HeterogeneitySummary { best_mean_dice: best, best_round, rounds_to_threshold })
}
