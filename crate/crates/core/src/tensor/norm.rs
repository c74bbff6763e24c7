use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel affine parameters and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// Unit scale, zero shift, zero mean, unit variance.
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(DEFAULT_MOMENTUM),
            epsilon: T::of(DEFAULT_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.scale.len();
        if self.shift.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape("batch norm state vectors differ in length"));
        }
        if self.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::Validation("negative running variance".into()));
        }
        Ok(())
    }
}

/// Values retained from the forward pass for the backward pass.
pub struct BatchNormCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    mode: NormMode,
}

impl<T> BatchNormCache<T> {
    pub fn normalized(&self) -> &Tensor<T> {
        &self.x_hat
    }
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running estimate; eval mode uses the running
/// statistics only. Scale and shift are applied last.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    state.validate()?;
    let (n, c, h, w) = input.dims4()?;
    if c != state.channels() {
        return Err(Error::shape(format!("batch norm: {c} input channels, state has {}", state.channels())));
    }
    let plane = h * w;
    let count = n * plane;
    let channel_values = |ch: usize| (0..n).flat_map(move |s| ((s * c + ch) * plane)..((s * c + ch + 1) * plane));

    let (mean, var) = match mode {
        NormMode::Train => {
            if count < 2 {
                return Err(Error::DegenerateVariance(count));
            }
            let m = T::of(count as f64);
            let mut means = Vec::with_capacity(c);
            let mut vars = Vec::with_capacity(c);
            for ch in 0..c {
                let mu = channel_values(ch).map(|i| input.data()[i]).sum::<T>() / m;
                let var = channel_values(ch).map(|i| (input.data()[i] - mu).powi(2)).sum::<T>() / m;
                means.push(mu);
                vars.push(var);
            }
            let unbias = m / (m - T::one());
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - state.momentum) * state.running_mean[ch] + state.momentum * means[ch];
                state.running_var[ch] =
                    (T::one() - state.momentum) * state.running_var[ch] + state.momentum * vars[ch] * unbias;
            }
            (means, vars)
        }
        NormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.epsilon).sqrt()).collect();
    let mut x_hat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], state.scale[ch], state.shift[ch]);
            for i in base..base + plane {
                let xh = (input.data()[i] - mu) * is;
                x_hat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((out, BatchNormCache { x_hat, inv_std, mode }))
}

pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    scale: &[T],
    d_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (n, c, h, w) = d_out.dims4()?;
    if d_out.shape() != cache.x_hat.shape() || scale.len() != c {
        return Err(Error::shape("batch_norm_backward: gradient does not match cached forward pass"));
    }
    let plane = h * w;
    let m = T::of((n * plane) as f64);
    let mut d_scale = vec![T::zero(); c];
    let mut d_shift = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let dy = d_out.data()[i];
                d_shift[ch] += dy;
                d_scale[ch] += dy * cache.x_hat.data()[i];
            }
        }
    }
    let mut d_in = Tensor::zeros(d_out.shape());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let k = scale[ch] * cache.inv_std[ch];
            for i in base..base + plane {
                let dy = d_out.data()[i];
                d_in.data_mut()[i] = match cache.mode {
                    NormMode::Eval => k * dy,
                    // dx = g/(m*sigma) * (m*dy - sum(dy) - x_hat*sum(dy*x_hat))
                    NormMode::Train => k / m * (m * dy - d_shift[ch] - cache.x_hat.data()[i] * d_scale[ch]),
                };
            }
        }
    }
    Ok(BatchNormGrads { input: d_in, scale: d_scale, shift: d_shift })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], scale: f64, offset: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn constant_input_maps_to_shift() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 7.0);
        let mut st = BatchNormState::new(1);
        st.shift[0] = 0.3;
        let (y, _) = batch_norm(&x, &mut st, NormMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn eval_with_identity_statistics_is_identity() {
        let x = random(&[2, 3, 4, 4], 2.0, 0.5, 1);
        let mut st = BatchNormState::new(3);
        let (y, _) = batch_norm(&x, &mut st, NormMode::Eval).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
        assert_eq!(st, BatchNormState::new(3));
    }

    #[test]
    fn train_normalizes_each_channel() {
        let x = random(&[3, 2, 5, 5], 3.0, 4.0, 2);
        let mut st = BatchNormState::new(2);
        let (_, cache) = batch_norm(&x, &mut st, NormMode::Train).unwrap();
        let xh = cache.normalized();
        for ch in 0..2 {
            let vals: Vec<f64> =
                (0..3).flat_map(|s| xh.data()[(s * 2 + ch) * 25..(s * 2 + ch + 1) * 25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
        // running stats moved toward the batch statistics
        assert!(st.running_mean.iter().all(|&m| m > 0.3));
    }

    #[test]
    fn single_value_batch_is_degenerate() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
        let mut st = BatchNormState::new(1);
        assert!(matches!(batch_norm(&x, &mut st, NormMode::Train), Err(Error::DegenerateVariance(1))));
        assert!(batch_norm(&x, &mut st, NormMode::Eval).is_ok());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = random(&[2, 2, 3, 3], 1.0, 0.2, 3);
        let wts = random(&[2, 2, 3, 3], 1.0, 0.0, 4);
        let mut st = BatchNormState::new(2);
        st.scale = vec![1.3, -0.7];
        st.shift = vec![0.1, 0.2];
        for mode in [NormMode::Train, NormMode::Eval] {
            let f = |x: &Tensor<f64>, st: &BatchNormState<f64>| -> f64 {
                let mut s = st.clone();
                let (y, _) = batch_norm(x, &mut s, mode).unwrap();
                y.data().iter().zip(wts.data()).map(|(a, b)| a * b).sum()
            };
            let mut s = st.clone();
            let (_, cache) = batch_norm(&x, &mut s, mode).unwrap();
            let g = batch_norm_backward(&cache, &st.scale, &wts).unwrap();
            let h = 1e-6;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (f(&xp, &st) - f(&xm, &st)) / (2.0 * h);
                assert!((fd - g.input.data()[i]).abs() < 1e-6, "{mode:?} input {i}");
            }
            for ch in 0..2 {
                let mut sp = st.clone();
                sp.scale[ch] += h;
                let mut sm = st.clone();
                sm.scale[ch] -= h;
                let fd = (f(&x, &sp) - f(&x, &sm)) / (2.0 * h);
                assert!((fd - g.scale[ch]).abs() < 1e-6);
            }
        }
    }
}
