//! 2D U-Net segmentation network and its composite BCE + soft Dice loss.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{ParamTag, ParameterSet};
use crate::scalar::Scalar;
use crate::seed::{hash_str, rng_for};
use crate::tensor::{
    batch_norm, batch_norm_backward, concat_channels, conv2d, conv2d_backward, max_pool2, max_pool2_backward, relu,
    relu_backward, split_channels, upsample2, upsample2_backward, BatchNormCache, BatchNormState, NormMode,
    PoolIndices, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of encoder levels; each is followed by a 2x pooling.
    pub depth: usize,
    pub base_channels: usize,
    pub slice_size: usize,
    /// Smoothing added to numerator and denominator of the soft Dice term.
    pub dice_smoothing: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 3,
            depth: 3,
            base_channels: 16,
            slice_size: 64,
            dice_smoothing: 1.0,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::config("channel counts and depth must be positive"));
        }
        let stride = 1usize << self.depth;
        if self.slice_size == 0 || self.slice_size % stride != 0 {
            return Err(Error::config(format!(
                "slice_size {} is not divisible by 2^depth = {stride}",
                self.slice_size
            )));
        }
        if !(self.dice_smoothing > 0.0) {
            return Err(Error::config("dice_smoothing must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || !(self.bn_epsilon > 0.0) {
            return Err(Error::config("batch norm momentum must lie in (0,1) and epsilon be positive"));
        }
        Ok(())
    }

    /// Channel width of each encoder level.
    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_channels << i).collect()
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_channels << self.depth
    }

    /// `(name, in_channels, out_channels)` of every conv block, in forward order.
    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let widths = self.encoder_widths();
        let mut blocks = Vec::new();
        let mut c = self.in_channels;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push((format!("enc{i}"), c, w));
            c = w;
        }
        blocks.push(("bottleneck".to_string(), c, self.bottleneck_width()));
        c = self.bottleneck_width();
        for (i, &w) in widths.iter().enumerate().rev() {
            blocks.push((format!("dec{i}"), c + w, w));
            c = w;
        }
        blocks
    }
}

/// Deterministic He-initialized parameters: conv kernels ~ N(0, 2/fan_in), zero biases and
/// shifts, unit scales, running statistics at (0, 1).
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut params = ParameterSet::new();
    let add_conv = |params: &mut ParameterSet<T>, name: &str, c_in: usize, c_out: usize, k: usize| -> Result<()> {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut rng = rng_for(&[seed, hash_str(name)]);
        let data = (0..c_out * c_in * k * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * std)
            })
            .collect();
        params.insert(format!("{name}.weight"), ParamTag::Aggregatable, Tensor::new(vec![c_out, c_in, k, k], data)?)?;
        params.insert(format!("{name}.bias"), ParamTag::Aggregatable, Tensor::zeros(&[c_out]))
    };
    let add_bn = |params: &mut ParameterSet<T>, name: &str, c: usize| -> Result<()> {
        params.insert(format!("{name}.scale"), ParamTag::NormLocal, Tensor::full(&[c], T::one()))?;
        params.insert(format!("{name}.shift"), ParamTag::NormLocal, Tensor::zeros(&[c]))?;
        params.insert(format!("{name}.running_mean"), ParamTag::NormLocal, Tensor::zeros(&[c]))?;
        params.insert(format!("{name}.running_var"), ParamTag::NormLocal, Tensor::full(&[c], T::one()))
    };
    for (block, c_in, c_out) in config.blocks() {
        add_conv(&mut params, &format!("{block}.conv1"), c_in, c_out, 3)?;
        add_bn(&mut params, &format!("{block}.bn1"), c_out)?;
        add_conv(&mut params, &format!("{block}.conv2"), c_out, c_out, 3)?;
        add_bn(&mut params, &format!("{block}.bn2"), c_out)?;
    }
    add_conv(&mut params, "head", config.base_channels, config.out_channels, 1)?;
    Ok(params)
}

/// conv -> batch norm -> relu, with what the backward pass needs.
struct UnitCache<T> {
    input: Tensor<T>,
    norm: BatchNormCache<T>,
    output: Tensor<T>,
}

struct BlockCache<T> {
    first: UnitCache<T>,
    second: UnitCache<T>,
}

/// Intermediate values of one forward pass, consumed by [`UNet::backward`].
pub struct ForwardCache<T> {
    encoders: Vec<BlockCache<T>>,
    pools: Vec<PoolIndices>,
    bottleneck: BlockCache<T>,
    /// Decoder blocks in forward order (deepest first).
    decoders: Vec<BlockCache<T>>,
    head_input: Tensor<T>,
}

/// Running statistics produced by a train-mode pass, keyed by norm-layer prefix.
type StatUpdates<T> = Vec<(String, BatchNormState<T>)>;

#[derive(Clone, Debug)]
pub struct UNet {
    config: ModelConfig,
}

impl UNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParameterSet<T>> {
        build_model(&self.config, seed)
    }

    fn check_input<T: Scalar>(&self, batch: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = batch.dims4()?;
        let s = self.config.slice_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::shape(format!(
                "model expects [N, {}, {s}, {s}], got {:?}",
                self.config.in_channels,
                batch.shape()
            )));
        }
        Ok(())
    }

    fn unit<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        conv: &str,
        norm: &str,
        x: Tensor<T>,
        mode: NormMode,
        stats: &mut StatUpdates<T>,
    ) -> Result<UnitCache<T>> {
        let y = conv2d(&x, params.get(&format!("{conv}.weight"))?, params.get(&format!("{conv}.bias"))?)?;
        let mut state =
            params.batch_norm_state(norm, T::of(self.config.bn_momentum), T::of(self.config.bn_epsilon))?;
        let (z, cache) = batch_norm(&y, &mut state, mode)?;
        if mode == NormMode::Train {
            stats.push((norm.to_string(), state));
        }
        Ok(UnitCache { input: x, norm: cache, output: relu(&z) })
    }

    fn block<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        name: &str,
        x: Tensor<T>,
        mode: NormMode,
        stats: &mut StatUpdates<T>,
    ) -> Result<BlockCache<T>> {
        let first = self.unit(params, &format!("{name}.conv1"), &format!("{name}.bn1"), x, mode, stats)?;
        let second =
            self.unit(params, &format!("{name}.conv2"), &format!("{name}.bn2"), first.output.clone(), mode, stats)?;
        Ok(BlockCache { first, second })
    }

    fn run<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        batch: &Tensor<T>,
        mode: NormMode,
    ) -> Result<(Tensor<T>, ForwardCache<T>, StatUpdates<T>)> {
        self.check_input(batch)?;
        let mut stats = Vec::new();
        let mut encoders = Vec::with_capacity(self.config.depth);
        let mut pools = Vec::with_capacity(self.config.depth);
        let mut x = batch.clone();
        for i in 0..self.config.depth {
            let enc = self.block(params, &format!("enc{i}"), x, mode, &mut stats)?;
            let (pooled, idx) = max_pool2(&enc.second.output)?;
            encoders.push(enc);
            pools.push(idx);
            x = pooled;
        }
        let bottleneck = self.block(params, "bottleneck", x, mode, &mut stats)?;
        let mut x = bottleneck.second.output.clone();
        let mut decoders = Vec::with_capacity(self.config.depth);
        for i in (0..self.config.depth).rev() {
            let up = upsample2(&x)?;
            let cat = concat_channels(&up, &encoders[i].second.output)?;
            let dec = self.block(params, &format!("dec{i}"), cat, mode, &mut stats)?;
            x = dec.second.output.clone();
            decoders.push(dec);
        }
        let logits = conv2d(&x, params.get("head.weight")?, params.get("head.bias")?)?;
        logits.ensure_finite("model output")?;
        Ok((logits, ForwardCache { encoders, pools, bottleneck, decoders, head_input: x }, stats))
    }

    /// Logits `[N, out_channels, S, S]`. Train mode normalizes with batch statistics and
    /// folds them into the running statistics stored in `params`.
    pub fn forward<T: Scalar>(&self, params: &mut ParameterSet<T>, batch: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        Ok(self.forward_with_cache(params, batch, mode)?.0)
    }

    pub fn forward_with_cache<T: Scalar>(
        &self,
        params: &mut ParameterSet<T>,
        batch: &Tensor<T>,
        mode: NormMode,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (logits, cache, stats) = self.run(params, batch, mode)?;
        for (prefix, state) in &stats {
            params.store_running_stats(prefix, state)?;
        }
        Ok((logits, cache))
    }

    /// Eval-mode forward pass; leaves `params` untouched.
    pub fn infer<T: Scalar>(&self, params: &ParameterSet<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(params, batch, NormMode::Eval)?.0)
    }

    fn unit_backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        grads: &mut ParameterSet<T>,
        conv: &str,
        norm: &str,
        cache: &UnitCache<T>,
        d_out: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let d_z = relu_backward(&cache.output, d_out);
        let scale = params.get(&format!("{norm}.scale"))?.data();
        let bn = batch_norm_backward(&cache.norm, scale, &d_z)?;
        accumulate(grads, &format!("{norm}.scale"), &bn.scale)?;
        accumulate(grads, &format!("{norm}.shift"), &bn.shift)?;
        let cg = conv2d_backward(&cache.input, params.get(&format!("{conv}.weight"))?, &bn.input)?;
        accumulate(grads, &format!("{conv}.weight"), cg.kernel.data())?;
        accumulate(grads, &format!("{conv}.bias"), cg.bias.data())?;
        Ok(cg.input)
    }

    fn block_backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        grads: &mut ParameterSet<T>,
        name: &str,
        cache: &BlockCache<T>,
        d_out: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let d_mid =
            self.unit_backward(params, grads, &format!("{name}.conv2"), &format!("{name}.bn2"), &cache.second, d_out)?;
        self.unit_backward(params, grads, &format!("{name}.conv1"), &format!("{name}.bn1"), &cache.first, &d_mid)
    }

    /// Gradients of a scalar objective w.r.t. every trainable parameter, given the
    /// gradient of that objective w.r.t. the logits.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        cache: &ForwardCache<T>,
        d_logits: &Tensor<T>,
    ) -> Result<ParameterSet<T>> {
        let mut grads = params.zeros_like_trainable();
        let head = conv2d_backward(&cache.head_input, params.get("head.weight")?, d_logits)?;
        accumulate(&mut grads, "head.weight", head.kernel.data())?;
        accumulate(&mut grads, "head.bias", head.bias.data())?;

        let depth = self.config.depth;
        let mut d_x = head.input;
        let mut d_skips: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        for (step, dec) in cache.decoders.iter().enumerate().rev() {
            let level = depth - 1 - step;
            let d_cat = self.block_backward(params, &mut grads, &format!("dec{level}"), dec, &d_x)?;
            let up_channels = d_cat.shape()[1] - self.config.encoder_widths()[level];
            let (d_up, d_skip) = split_channels(&d_cat, up_channels)?;
            d_skips[level] = Some(d_skip);
            d_x = upsample2_backward(&d_up)?;
        }
        d_x = self.block_backward(params, &mut grads, "bottleneck", &cache.bottleneck, &d_x)?;
        for level in (0..depth).rev() {
            let mut d_enc = max_pool2_backward(&cache.pools[level], &d_x)?;
            let skip = d_skips[level].take().expect("every decoder level recorded its skip gradient");
            for (a, b) in d_enc.data_mut().iter_mut().zip(skip.data()) {
                *a += *b;
            }
            d_x = self.block_backward(params, &mut grads, &format!("enc{level}"), &cache.encoders[level], &d_enc)?;
        }
        Ok(grads)
    }

    /// Train-mode forward, composite loss and backward in one call. Updates the running
    /// statistics in `params`.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        params: &mut ParameterSet<T>,
        batch: &Tensor<T>,
        targets: &Tensor<T>,
    ) -> Result<(LossValue<T>, ParameterSet<T>)> {
        let (logits, cache) = self.forward_with_cache(params, batch, NormMode::Train)?;
        let (value, d_logits) = loss_with_grad(&logits, targets, self.config.dice_smoothing)?;
        let grads = self.backward(params, &cache, &d_logits)?;
        Ok((value, grads))
    }
}

fn accumulate<T: Scalar>(grads: &mut ParameterSet<T>, name: &str, values: &[T]) -> Result<()> {
    let dst = grads.get_mut(name)?.data_mut();
    for (a, b) in dst.iter_mut().zip(values) {
        *a += *b;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue<T> {
    /// `0.5 * bce + 0.5 * (1 - soft_dice)`
    pub total: T,
    pub bce: T,
    pub soft_dice: T,
}

fn check_targets<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<usize> {
    let (_, c, _, _) = logits.dims4()?;
    if logits.shape() != targets.shape() {
        return Err(Error::shape(format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape())));
    }
    if targets.data().iter().any(|&t| t != T::zero() && t != T::one()) {
        return Err(Error::Validation("segmentation targets must be 0 or 1".into()));
    }
    logits.ensure_finite("logits")?;
    Ok(c)
}

struct DiceSums<T> {
    intersection: Vec<T>,
    predicted: Vec<T>,
    target: Vec<T>,
}

fn dice_sums<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>, channels: usize) -> DiceSums<T> {
    let (n, _, h, w) = probs.dims4().expect("checked");
    let plane = h * w;
    let mut sums = DiceSums {
        intersection: vec![T::zero(); channels],
        predicted: vec![T::zero(); channels],
        target: vec![T::zero(); channels],
    };
    for s in 0..n {
        for ch in 0..channels {
            let base = (s * channels + ch) * plane;
            for i in base..base + plane {
                let (p, y) = (probs.data()[i], targets.data()[i]);
                sums.intersection[ch] += p * y;
                sums.predicted[ch] += p;
                sums.target[ch] += y;
            }
        }
    }
    sums
}

/// Composite loss: mean BCE over every pixel and channel, plus one minus the soft Dice
/// (per channel over the batch, then averaged over channels), weighted one half each.
pub fn loss<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>, dice_smoothing: f64) -> Result<LossValue<T>> {
    Ok(loss_with_grad(logits, targets, dice_smoothing)?.0)
}

pub fn loss_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    dice_smoothing: f64,
) -> Result<(LossValue<T>, Tensor<T>)> {
    let channels = check_targets(logits, targets)?;
    let half = T::of(0.5);
    let eps = T::of(dice_smoothing);
    let count = T::of(logits.len() as f64);

    let mut bce = T::zero();
    for (&z, &y) in logits.data().iter().zip(targets.data()) {
        bce += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
    }
    bce /= count;

    let probs = crate::tensor::sigmoid(logits);
    let sums = dice_sums(&probs, targets, channels);
    let mut dice = T::zero();
    let mut numer = Vec::with_capacity(channels);
    let mut denom = Vec::with_capacity(channels);
    for ch in 0..channels {
        let a = T::of(2.0) * sums.intersection[ch] + eps;
        let d = sums.predicted[ch] + sums.target[ch] + eps;
        dice += a / d;
        numer.push(a);
        denom.push(d);
    }
    dice /= T::of(channels as f64);
    let total = half * bce + half * (T::one() - dice);

    let (_, _, h, w) = logits.dims4()?;
    let plane = h * w;
    let dice_weight = -half / T::of(channels as f64);
    let mut grad = Tensor::zeros(logits.shape());
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % channels;
        let (p, y) = (probs.data()[i], targets.data()[i]);
        let d_dice_dp = (T::of(2.0) * y * denom[ch] - numer[ch]) / (denom[ch] * denom[ch]);
        let d_p = dice_weight * d_dice_dp;
        *g = half * (p - y) / count + d_p * p * (T::one() - p);
    }
    Ok((LossValue { total, bce, soft_dice: dice }, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig { depth: 2, base_channels: 4, slice_size: 8, ..Default::default() }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn random_mask(shape: &[usize], seed: u64) -> Tensor<f64> {
        random(shape, seed).map(|v| if v > 0.6 { 1.0 } else { 0.0 })
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = build_model::<f32>(&cfg, 7).unwrap();
        let b = build_model::<f32>(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_model::<f32>(&cfg, 8).unwrap());
    }

    #[test]
    fn tags_partition_parameters() {
        let p = build_model::<f32>(&ModelConfig::default(), 0).unwrap();
        let agg = p.subset(ParamTag::Aggregatable);
        let local = p.subset(ParamTag::NormLocal);
        assert_eq!(agg.len() + local.len(), p.len());
        assert!(agg.names().all(|n| local.entry(n).is_none()));
        assert!(local.names().all(|n| n.contains(".bn")));
        assert!(agg.names().all(|n| !n.contains(".bn")));
    }

    #[test]
    fn encoder_widths_double_per_level() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.encoder_widths(), vec![16, 32, 64]);
        let p = build_model::<f32>(&cfg, 0).unwrap();
        assert_eq!(p.get("enc0.conv1.weight").unwrap().shape(), &[16, 4, 3, 3]);
        assert_eq!(p.get("enc1.conv2.weight").unwrap().shape(), &[32, 32, 3, 3]);
        assert_eq!(p.get("enc2.conv2.weight").unwrap().shape(), &[64, 64, 3, 3]);
        assert_eq!(p.get("dec0.conv1.weight").unwrap().shape(), &[16, 48, 3, 3]);
        assert_eq!(p.get("head.weight").unwrap().shape(), &[3, 16, 1, 1]);
    }

    #[test]
    fn rejects_indivisible_slice_size() {
        let cfg = ModelConfig { slice_size: 60, ..Default::default() };
        assert!(matches!(build_model::<f32>(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_preserves_spatial_shape() {
        let cfg = small_config();
        let net = UNet::new(cfg.clone()).unwrap();
        let mut p = net.init::<f64>(1).unwrap();
        let x = random(&[3, 4, 8, 8], 2);
        let y = net.forward(&mut p, &x, NormMode::Train).unwrap();
        assert_eq!(y.shape(), &[3, 3, 8, 8]);
        let bad = random(&[1, 4, 16, 16], 3);
        assert!(matches!(net.infer(&p, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_is_repeatable_and_differs_from_train() {
        let net = UNet::new(small_config()).unwrap();
        let p = net.init::<f64>(1).unwrap();
        // batch statistics far from the initial running statistics (0, 1)
        let x = random(&[2, 4, 8, 8], 4).map(|v| 5.0 + 3.0 * v);
        let a = net.infer(&p, &x).unwrap();
        let b = net.infer(&p, &x).unwrap();
        assert_eq!(a, b);
        let mut q = p.clone();
        let t = net.forward(&mut q, &x, NormMode::Train).unwrap();
        assert!(t.max_abs_diff(&a) > 1e-3);
        assert_ne!(p, q, "train mode must update running statistics");
    }

    #[test]
    fn saturated_correct_prediction_has_tiny_loss() {
        let y = random_mask(&[2, 3, 4, 4], 5);
        let z = y.map(|v| if v > 0.5 { 20.0 } else { -20.0 });
        assert!(loss(&z, &y, 1.0).unwrap().total < 1e-4);
    }

    #[test]
    fn zero_logits_give_ln2_bce() {
        let mut y = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = (i % 2) as f64;
        }
        let l = loss(&Tensor::zeros(&[1, 3, 2, 2]), &y, 1.0).unwrap();
        assert!((l.bce - std::f64::consts::LN_2).abs() < 1e-15);
    }

    /// Scalar reference for both loss terms.
    fn reference_loss(z: &[f64], y: &[f64], n: usize, c: usize, plane: usize, eps: f64) -> f64 {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let bce: f64 = z
            .iter()
            .zip(y)
            .map(|(&zi, &yi)| -(yi * sig(zi).ln() + (1.0 - yi) * (1.0 - sig(zi)).ln()))
            .sum::<f64>()
            / z.len() as f64;
        let mut dice = 0.0;
        for ch in 0..c {
            let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
            for s in 0..n {
                for k in 0..plane {
                    let i = (s * c + ch) * plane + k;
                    inter += sig(z[i]) * y[i];
                    ps += sig(z[i]);
                    ys += y[i];
                }
            }
            dice += (2.0 * inter + eps) / (ps + ys + eps);
        }
        0.5 * bce + 0.5 * (1.0 - dice / c as f64)
    }

    #[test]
    fn loss_matches_scalar_reference() {
        for seed in 0..5 {
            let z = random(&[2, 3, 3, 3], seed).map(|v| 6.0 * v - 3.0);
            let y = random_mask(&[2, 3, 3, 3], seed + 100);
            let got = loss(&z, &y, 1.0).unwrap().total;
            let want = reference_loss(z.data(), y.data(), 2, 3, 9, 1.0);
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let z = random(&[2, 3, 3, 3], 11).map(|v| 4.0 * v - 2.0);
        let y = random_mask(&[2, 3, 3, 3], 12);
        let (_, g) = loss_with_grad(&z, &y, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let fd = (loss(&zp, &y, 1.0).unwrap().total - loss(&zm, &y, 1.0).unwrap().total) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn non_binary_targets_rejected() {
        let y = Tensor::<f64>::full(&[1, 3, 2, 2], 0.5);
        assert!(matches!(loss(&Tensor::zeros(&[1, 3, 2, 2]), &y, 1.0), Err(Error::Validation(_))));
    }
}
