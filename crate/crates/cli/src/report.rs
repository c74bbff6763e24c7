//! CSV report files.
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reconstructs the records bit for bit.
//!
//! | file | columns |
//! |---|---|
//! | `convergence.csv` | round, strategy, client, slices, wt, tc, et, mean, global_mean, train_loss, val_loss |
//! | `robustness.csv` | level, strategy, clients, worst_client, worst, best_client, best, gap, mean |
//! | `subregion_gaps.csv` | level, strategy, wt_gap, tc_gap, et_gap, mean_gap, mean_dice_gap |
//! | `heterogeneity_summary.csv` | strategy, level, best_mean_dice, best_round, then `rounds_ge_<t>` per threshold |
//! | `slices.csv` | client, case_id, slice_index, wt, tc, et |
//! | `summary.csv` | level, strategy, metric, seeds, mean, min, max |

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use fedstress_core::federated::SliceDice;
use fedstress_core::metrics::{
    client_robustness, format_rounds, ClientDice, HeterogeneitySummary, RobustnessReport, RoundRecord, SubregionGaps,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub round: usize,
    pub strategy: String,
    pub client: usize,
    pub slices: usize,
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
    pub mean: f64,
    pub global_mean: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub level: String,
    pub strategy: String,
    pub clients: usize,
    pub worst_client: usize,
    pub worst: f64,
    pub best_client: usize,
    pub best: f64,
    pub gap: f64,
    pub mean: f64,
}

impl RobustnessRow {
    pub fn new(level: &str, strategy: &str, clients: usize, r: &RobustnessReport) -> Self {
        Self {
            level: level.to_string(),
            strategy: strategy.to_string(),
            clients,
            worst_client: r.worst_client,
            worst: r.worst,
            best_client: r.best_client,
            best: r.best,
            gap: r.gap,
            mean: r.mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubregionRow {
    pub level: String,
    pub strategy: String,
    pub wt_gap: f64,
    pub tc_gap: f64,
    pub et_gap: f64,
    pub mean_gap: f64,
    pub mean_dice_gap: f64,
}

impl SubregionRow {
    pub fn new(level: &str, strategy: &str, g: &SubregionGaps) -> Self {
        Self {
            level: level.to_string(),
            strategy: strategy.to_string(),
            wt_gap: g.wt,
            tc_gap: g.tc,
            et_gap: g.et,
            mean_gap: g.mean_gap,
            mean_dice_gap: g.mean_dice_gap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub client: usize,
    pub case_id: String,
    pub slice_index: usize,
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
}

impl From<&SliceDice> for SliceRow {
    fn from(s: &SliceDice) -> Self {
        Self {
            client: s.client_id,
            case_id: s.case_id.clone(),
            slice_index: s.slice_index,
            wt: s.regions[0],
            tc: s.regions[1],
            et: s.regions[2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub level: String,
    pub strategy: String,
    pub metric: String,
    pub seeds: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl SummaryRow {
    pub fn new(level: &str, strategy: &str, metric: &str, values: &[f64]) -> Self {
        let n = values.len();
        Self {
            level: level.to_string(),
            strategy: strategy.to_string(),
            metric: metric.to_string(),
            seeds: n,
            mean: values.iter().sum::<f64>() / n.max(1) as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

pub fn convergence_rows(records: &[RoundRecord]) -> Vec<ConvergenceRow> {
    records
        .iter()
        .flat_map(|r| {
            r.per_client.iter().map(move |(&client, d)| ConvergenceRow {
                round: r.round_index,
                strategy: r.strategy.clone(),
                client,
                slices: d.slices,
                wt: d.regions[0],
                tc: d.regions[1],
                et: d.regions[2],
                mean: d.mean_dice,
                global_mean: r.global_mean_dice,
                train_loss: r.train_loss,
                val_loss: r.val_loss,
            })
        })
        .collect()
}

/// Inverse of [`convergence_rows`].
pub fn records_from_rows(rows: &[ConvergenceRow]) -> Vec<RoundRecord> {
    let mut records: Vec<RoundRecord> = Vec::new();
    for row in rows {
        let same = records.last().is_some_and(|r| r.round_index == row.round && r.strategy == row.strategy);
        if !same {
            records.push(RoundRecord {
                round_index: row.round,
                strategy: row.strategy.clone(),
                per_client: BTreeMap::new(),
                global_mean_dice: row.global_mean,
                train_loss: row.train_loss,
                val_loss: row.val_loss,
            });
        }
        let dice = ClientDice { regions: [row.wt, row.tc, row.et], mean_dice: row.mean, slices: row.slices };
        records.last_mut().expect("pushed above").per_client.insert(row.client, dice);
    }
    records
}

/// Robustness of the last round's per-client mean Dice.
pub fn final_robustness(records: &[RoundRecord]) -> Result<RobustnessReport, CliError> {
    let last = records.last().ok_or_else(|| CliError::Runtime("no rounds recorded".into()))?;
    Ok(client_robustness(&last.client_mean_dice())?)
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned, R: Read>(r: R) -> Result<Vec<T>, CliError> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(CliError::from)).collect()
}

pub fn save_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<(), CliError> {
    write_rows(rows, File::create(path).map_err(|e| CliError::io(path, e))?)
}

pub fn load_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    read_rows(File::open(path).map_err(|e| CliError::io(path, e))?)
}

/// One row of the heterogeneity summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct HeterogeneityRow {
    pub strategy: String,
    pub level: String,
    pub summary: HeterogeneitySummary,
}

fn threshold_column(t: f64) -> String {
    format!("rounds_ge_{t}")
}

pub fn write_heterogeneity<W: Write>(rows: &[HeterogeneityRow], thresholds: &[f64], w: W) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["strategy".to_string(), "level".into(), "best_mean_dice".into(), "best_round".into()];
    header.extend(thresholds.iter().map(|&t| threshold_column(t)));
    out.write_record(&header)?;
    for row in rows {
        let s = &row.summary;
        let mut fields = vec![row.strategy.clone(), row.level.clone(), s.best_mean_dice.to_string(), s.best_round.to_string()];
        fields.extend(s.rounds_to_threshold.iter().map(|&(_, r)| format_rounds(r)));
        out.write_record(&fields)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_heterogeneity<R: Read>(r: R) -> Result<Vec<HeterogeneityRow>, CliError> {
    let bad = |msg: String| CliError::Runtime(format!("heterogeneity summary: {msg}"));
    let mut reader = csv::Reader::from_reader(r);
    let thresholds = reader
        .headers()?
        .iter()
        .skip(4)
        .map(|h| {
            h.strip_prefix("rounds_ge_")
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| bad(format!("unexpected column {h:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| record.get(i).ok_or_else(|| bad(format!("missing column {i}")));
        let number = |i: usize| field(i).and_then(|v| v.parse::<f64>().map_err(|e| bad(e.to_string())));
        let rounds = |i: usize| -> Result<Option<usize>, CliError> {
            match field(i)? {
                fedstress_core::metrics::NOT_REACHED => Ok(None),
                v => v.parse().map(Some).map_err(|e: std::num::ParseIntError| bad(e.to_string())),
            }
        };
        rows.push(HeterogeneityRow {
            strategy: field(0)?.to_string(),
            level: field(1)?.to_string(),
            summary: HeterogeneitySummary {
                best_mean_dice: number(2)?,
                best_round: rounds(3)?.ok_or_else(|| bad("best_round is missing".into()))?,
                rounds_to_threshold: thresholds
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| rounds(4 + j).map(|r| (t, r)))
                    .collect::<Result<_, _>>()?,
            },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: usize, values: &[(usize, [f64; 3])]) -> RoundRecord {
        let per_client: BTreeMap<usize, ClientDice> =
            values.iter().map(|&(k, r)| (k, ClientDice::from_regions(r, 5 + k))).collect();
        RoundRecord {
            round_index: round,
            strategy: "fedavg".into(),
            global_mean_dice: fedstress_core::metrics::slice_weighted_mean(&per_client),
            per_client,
            train_loss: 0.1 / 3.0,
            val_loss: 1.0 / 7.0,
        }
    }

    #[test]
    fn convergence_roundtrip_is_exact() {
        let records = vec![
            record(1, &[(1, [0.1, 0.2, 1.0 / 3.0]), (2, [0.7, 2.0f64.sqrt() / 2.0, 0.0])]),
            record(2, &[(1, [0.15, 0.25, 0.35]), (2, [0.9, 0.8, 1e-17])]),
        ];
        let mut buf = Vec::new();
        write_rows(&convergence_rows(&records), &mut buf).unwrap();
        let rows: Vec<ConvergenceRow> = read_rows(buf.as_slice()).unwrap();
        assert_eq!(records_from_rows(&rows), records);
        assert!(String::from_utf8(buf).unwrap().starts_with("round,strategy,client,slices,wt,tc,et,mean,"));
    }

    #[test]
    fn heterogeneity_roundtrip_keeps_sentinel() {
        let rows = vec![
            HeterogeneityRow {
                strategy: "fedavg".into(),
                level: "H0".into(),
                summary: HeterogeneitySummary {
                    best_mean_dice: 0.818,
                    best_round: 9,
                    rounds_to_threshold: vec![(0.78, Some(5)), (0.8, Some(6))],
                },
            },
            HeterogeneityRow {
                strategy: "fedavg".into(),
                level: "H3".into(),
                summary: HeterogeneitySummary {
                    best_mean_dice: 0.792,
                    best_round: 9,
                    rounds_to_threshold: vec![(0.78, Some(8)), (0.8, None)],
                },
            },
        ];
        let mut buf = Vec::new();
        write_heterogeneity(&rows, &[0.78, 0.8], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "strategy,level,best_mean_dice,best_round,rounds_ge_0.78,rounds_ge_0.8\n\
             fedavg,H0,0.818,9,5,6\nfedavg,H3,0.792,9,8,--\n"
        );
        assert_eq!(read_heterogeneity(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn summary_statistics() {
        let row = SummaryRow::new("H3", "fedbn", "gap", &[0.1, 0.3, 0.2]);
        assert_eq!((row.seeds, row.min, row.max), (3, 0.1, 0.3));
        assert!((row.mean - 0.2).abs() < 1e-15);
    }
}
