//! Segmentation cases, client partitioning and the held-out validation split.

mod bundle;
mod synthetic;

pub use bundle::{load_slice_bundle, read_slice_bundle, save_slice_bundle, write_slice_bundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use synthetic::{generate_case, generate_cases, ContrastProfile, SyntheticConfig};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::heterogeneity::{spec_for, HeterogeneityLevel, TransformSpec};
use crate::scalar::Scalar;
use crate::seed::{hash_str, rng_for};
use crate::tensor::Tensor;

pub const MODALITIES: usize = 4;
pub const REGIONS: usize = 3;
pub const REGION_NAMES: [&str; REGIONS] = ["wt", "tc", "et"];

/// One multi-modal slice `[4, S, S]` with binary nested labels `[3, S, S]` (WT, TC, ET).
#[derive(Clone, Debug, PartialEq)]
pub struct Slice<T> {
    pub image: Tensor<T>,
    pub labels: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case<T> {
    pub case_id: String,
    pub slices: Vec<Slice<T>>,
}

impl<T: Scalar> Case<T> {
    /// Slice size shared by every slice, if any.
    pub fn slice_size(&self) -> Option<usize> {
        self.slices.first().map(|s| s.image.shape()[1])
    }

    /// Checks shapes, intensity range, binary labels and ET ⊆ TC ⊆ WT on every slice.
    pub fn validate(&self) -> Result<()> {
        let Some(s) = self.slice_size() else {
            return Ok(());
        };
        for (i, slice) in self.slices.iter().enumerate() {
            let at = || format!("case {:?}, slice {i}", self.case_id);
            if slice.image.shape() != [MODALITIES, s, s] || slice.labels.shape() != [REGIONS, s, s] {
                return Err(Error::Validation(format!(
                    "{}: image {:?} / labels {:?} do not match slice size {s}",
                    at(),
                    slice.image.shape(),
                    slice.labels.shape()
                )));
            }
            if slice.image.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                return Err(Error::Validation(format!("{}: image intensities outside [0, 1]", at())));
            }
            let plane = s * s;
            let l = slice.labels.data();
            if l.iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::Validation(format!("{}: labels are not binary", at())));
            }
            for p in 0..plane {
                let (wt, tc, et) = (l[p], l[plane + p], l[2 * plane + p]);
                if tc > wt {
                    return Err(Error::Validation(format!("{}: TC not contained in WT at pixel {p}", at())));
                }
                if et > tc {
                    return Err(Error::Validation(format!("{}: ET not contained in TC at pixel {p}", at())));
                }
            }
        }
        Ok(())
    }
}

/// A client's local cases and its fixed appearance-shift family.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset<T> {
    /// 1-based.
    pub client_id: usize,
    pub cases: Vec<Case<T>>,
    pub transform: TransformSpec,
}

impl<T: Scalar> ClientDataset<T> {
    /// Total slice count.
    pub fn sample_count(&self) -> usize {
        self.cases.iter().map(|c| c.slices.len()).sum()
    }

    pub fn slices(&self) -> impl Iterator<Item = &Slice<T>> {
        self.cases.iter().flat_map(|c| c.slices.iter())
    }
}

/// A held-out slice tagged with the client it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationSlice<T> {
    pub client_id: usize,
    pub case_id: String,
    pub slice_index: usize,
    pub image: Tensor<T>,
    pub labels: Tensor<T>,
}

/// Seeded shuffle, then round-robin assignment of whole cases to `k` clients.
pub fn partition_cases<T: Scalar>(
    cases: Vec<Case<T>>,
    k: usize,
    level: HeterogeneityLevel,
    seed: u64,
) -> Result<Vec<ClientDataset<T>>> {
    if k == 0 {
        return Err(Error::config("client count must be at least 1"));
    }
    if cases.len() < k {
        return Err(Error::config(format!("{} cases cannot be split across {k} clients", cases.len())));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut rng_for(&[seed, hash_str("partition")]));
    let mut slots: Vec<Option<Case<T>>> = cases.into_iter().map(Some).collect();
    let mut clients: Vec<ClientDataset<T>> = (1..=k)
        .map(|id| ClientDataset { client_id: id, cases: Vec::new(), transform: spec_for(id, level) })
        .collect();
    for (pos, idx) in order.into_iter().enumerate() {
        clients[pos % k].cases.push(slots[idx].take().expect("each index appears once"));
    }
    Ok(clients)
}

/// Holds out `ceil(fraction * cases)` whole cases per client.
///
/// Returns the remaining training datasets and the validation slices in client order.
pub fn build_validation_set<T: Scalar>(
    clients: Vec<ClientDataset<T>>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ClientDataset<T>>, Vec<ValidationSlice<T>>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("validation fraction {fraction} must lie in (0, 1)")));
    }
    let mut training = Vec::with_capacity(clients.len());
    let mut validation = Vec::new();
    for mut client in clients {
        let n = client.cases.len();
        let held = (fraction * n as f64).ceil() as usize;
        if held >= n {
            return Err(Error::config(format!(
                "validation fraction {fraction} leaves client {} with no training cases ({n} cases)",
                client.client_id
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(&[seed, hash_str("validation"), client.client_id as u64]));
        let mut held_idx: Vec<usize> = order[..held].to_vec();
        held_idx.sort_unstable();
        let mut kept = Vec::with_capacity(n - held);
        for (i, case) in client.cases.drain(..).enumerate() {
            if held_idx.binary_search(&i).is_ok() {
                for (s, slice) in case.slices.into_iter().enumerate() {
                    validation.push(ValidationSlice {
                        client_id: client.client_id,
                        case_id: case.case_id.clone(),
                        slice_index: s,
                        image: slice.image,
                        labels: slice.labels,
                    });
                }
            } else {
                kept.push(case);
            }
        }
        client.cases = kept;
        training.push(client);
    }
    Ok((training, validation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tiny_cases(n: usize) -> Vec<Case<f64>> {
        let cfg = SyntheticConfig { case_count: n, slices_per_case: 2, slice_size: 16, ..SyntheticConfig::small() };
        generate_cases(&cfg).unwrap()
    }

    fn ids(c: &ClientDataset<f64>) -> BTreeSet<String> {
        c.cases.iter().map(|c| c.case_id.clone()).collect()
    }

    #[test]
    fn partition_is_balanced_disjoint_and_complete() {
        let clients = partition_cases(tiny_cases(8), 4, HeterogeneityLevel::H2, 3).unwrap();
        assert_eq!(clients.iter().map(|c| c.cases.len()).collect::<Vec<_>>(), vec![2, 2, 2, 2]);
        let mut all = BTreeSet::new();
        for c in &clients {
            for id in ids(c) {
                assert!(all.insert(id), "case assigned twice");
            }
        }
        assert_eq!(all.len(), 8);
        assert_eq!(clients[1].transform, spec_for(2, HeterogeneityLevel::H2));
        assert_eq!(clients[0].sample_count(), 4);
    }

    #[test]
    fn single_client_holds_everything() {
        let clients = partition_cases(tiny_cases(5), 1, HeterogeneityLevel::H0, 0).unwrap();
        assert_eq!(clients.len(), 1);
        assert_eq!(clients[0].cases.len(), 5);
    }

    #[test]
    fn too_few_cases_is_an_error() {
        assert!(partition_cases(tiny_cases(3), 4, HeterogeneityLevel::H0, 0).is_err());
    }

    #[test]
    fn validation_split_is_case_level() {
        let clients = partition_cases(tiny_cases(12), 4, HeterogeneityLevel::H1, 1).unwrap();
        let (train, val) = build_validation_set(clients.clone(), 0.3, 9).unwrap();
        let tags: BTreeSet<usize> = val.iter().map(|v| v.client_id).collect();
        assert_eq!(tags, (1..=4).collect());
        let train_ids: BTreeSet<String> = train.iter().flat_map(ids).collect();
        assert!(val.iter().all(|v| !train_ids.contains(&v.case_id)));
        assert_eq!(train_ids.len() + val.len() / 2, 12);
        let again = build_validation_set(clients.clone(), 0.3, 9).unwrap();
        assert_eq!(again, (train, val));
        assert!(build_validation_set(clients.clone(), 0.9, 9).is_err());
        assert!(build_validation_set(clients, 0.0, 9).is_err());
    }

    #[test]
    fn nesting_violation_is_reported() {
        let mut case = tiny_cases(1).remove(0);
        let plane = 16 * 16;
        let labels = case.slices[1].labels.data_mut();
        labels[2 * plane + 5] = 1.0;
        labels[plane + 5] = 0.0;
        let err = case.validate().unwrap_err().to_string();
        assert!(err.contains("ET not contained in TC") && err.contains("slice 1"), "{err}");
    }
}
