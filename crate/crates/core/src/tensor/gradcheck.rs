use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParameterSet;
use crate::scalar::Scalar;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst probe.
    pub worst: Option<(String, usize)>,
    pub probes: usize,
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `loss_fn` returns the loss and its analytic gradient (keyed like the
/// trainable entries of `params`). Up to `probe_count` coordinates are drawn
/// uniformly from the gradient entries using `seed`; each is perturbed by
/// `±h`. The error per probe is `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
pub fn grad_check<T, F>(
    mut loss_fn: F,
    params: &ParameterSet<T>,
    probe_count: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParameterSet<T>) -> Result<(T, ParameterSet<T>)>,
{
    let (_, analytic) = loss_fn(params)?;
    let coords: Vec<(String, usize)> =
        analytic.iter().flat_map(|e| (0..e.tensor.len()).map(move |i| (e.name.clone(), i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, coords.len(), probe_count.min(coords.len()));

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, probes: 0 };
    for pick in picks.iter() {
        let (name, idx) = &coords[pick];
        let base = params.get(name)?.data()[*idx];
        let mut plus = params.clone();
        plus.get_mut(name)?.data_mut()[*idx] = base + T::of(h);
        let mut minus = params.clone();
        minus.get_mut(name)?.data_mut()[*idx] = base - T::of(h);
        let numeric = (loss_fn(&plus)?.0.as_f64() - loss_fn(&minus)?.0.as_f64()) / (2.0 * h);
        let exact = analytic.get(name)?.data()[*idx].as_f64();
        let err = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        report.probes += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((name.clone(), *idx));
        }
    }
    Ok(report)
}
