//! Federated rounds: broadcast, local training, aggregation and per-client evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ClientDataset, Slice, ValidationSlice, REGIONS};
use crate::error::{Error, Result};
use crate::heterogeneity::{apply, eval_transform, sample, TransformSpec};
use crate::metrics::{dice, slice_weighted_mean, ClientDice, RoundRecord};
use crate::model::{loss, UNet};
use crate::params::{ParamTag, ParameterSet};
use crate::scalar::Scalar;
use crate::seed::{hash_str, rng_for};
use crate::tensor::{adamw_step, AdamWHyper, AdamWState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    FedAvg,
    FedProx,
    FedBn,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::FedProx => "fedprox",
            Self::FedBn => "fedbn",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Self::FedAvg),
            "fedprox" => Ok(Self::FedProx),
            "fedbn" => Ok(Self::FedBn),
            _ => Err(Error::config(format!("unknown strategy {s:?}, expected fedavg, fedprox or fedbn"))),
        }
    }
}

pub const DEFAULT_MU: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Proximal coefficient; only read for FedProx.
    pub mu: f64,
}

impl Strategy {
    pub fn fedavg() -> Self {
        Self { kind: StrategyKind::FedAvg, mu: 0.0 }
    }

    pub fn fedprox(mu: f64) -> Self {
        Self { kind: StrategyKind::FedProx, mu }
    }

    pub fn fedbn() -> Self {
        Self { kind: StrategyKind::FedBn, mu: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::config(format!("mu = {} must be a finite value >= 0", self.mu)));
        }
        Ok(())
    }

    fn proximal_mu(&self) -> f64 {
        if self.kind == StrategyKind::FedProx {
            self.mu
        } else {
            0.0
        }
    }

    /// Report label: `fedavg`, `fedbn`, or `fedprox` (with `_mu<value>` when not the default).
    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::FedProx if self.mu != DEFAULT_MU => format!("fedprox_mu{}", self.mu),
            k => k.as_str().to_string(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWHyper,
    pub experiment_seed: u64,
    /// Smoothing of the evaluation Dice.
    pub dice_eps: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_epochs: 1,
            batch_size: 8,
            optimizer: AdamWHyper::default(),
            experiment_seed: 0,
            dice_eps: 1e-5,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.local_epochs < 1 {
            return Err(Error::config("local_epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer needs lr > 0, weight_decay >= 0, betas in [0, 1)"));
        }
        Ok(())
    }
}

/// Result of one client's local round.
#[derive(Clone, Debug)]
pub struct ClientUpdate<T> {
    pub client_id: usize,
    pub params: ParameterSet<T>,
    pub sample_count: usize,
    pub local_loss_trace: Vec<f64>,
}

/// Everything a client keeps between rounds. Never shared across clients.
#[derive(Clone, Debug)]
pub struct ClientState<T> {
    pub data: ClientDataset<T>,
    pub optimizer: AdamWState<T>,
    /// Stream for per-batch transform draws.
    train_rng: ChaCha8Rng,
    /// Client-local normalization entries (FedBN only), set after the first round.
    pub norm_local: Option<ParameterSet<T>>,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(data: ClientDataset<T>, cfg: &RoundConfig) -> Self {
        let train_rng = rng_for(&[cfg.experiment_seed, hash_str("train-transform"), data.client_id as u64]);
        Self { data, optimizer: AdamWState::new(cfg.optimizer), train_rng, norm_local: None }
    }

    /// The model this client trains and evaluates with after `global` is broadcast:
    /// `global` itself, except that FedBN clients keep their own normalization entries.
    pub fn local_model(&self, global: &ParameterSet<T>, strategy: &Strategy) -> Result<ParameterSet<T>> {
        let mut params = global.clone();
        if strategy.kind == StrategyKind::FedBn {
            if let Some(local) = &self.norm_local {
                params.overwrite_from(local)?;
            }
        }
        Ok(params)
    }
}

/// `(mu / 2) * ||theta - reference||^2` over trainable entries.
pub fn proximal_penalty<T: Scalar>(params: &ParameterSet<T>, reference: &ParameterSet<T>, mu: f64) -> Result<f64> {
    let mut sq = 0.0;
    for e in params.iter().filter(|e| e.is_trainable()) {
        let r = reference.get(&e.name)?;
        sq += e.tensor.data().iter().zip(r.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>();
    }
    Ok(0.5 * mu * sq)
}

fn add_proximal_gradient<T: Scalar>(
    grads: &mut ParameterSet<T>,
    params: &ParameterSet<T>,
    reference: &ParameterSet<T>,
    mu: f64,
) -> Result<()> {
    let mu = T::of(mu);
    for g in grads.iter_mut() {
        let theta = params.get(&g.name)?.data();
        let anchor = reference.get(&g.name)?.data();
        for ((d, &t), &a) in g.tensor.data_mut().iter_mut().zip(theta).zip(anchor) {
            *d += mu * (t - a);
        }
    }
    Ok(())
}

fn stack_batch<T: Scalar>(slices: &[&Slice<T>], images: Vec<Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
    let image_refs: Vec<&Tensor<T>> = images.iter().collect();
    let label_refs: Vec<&Tensor<T>> = slices.iter().map(|s| &s.labels).collect();
    Ok((Tensor::stack(&image_refs)?, Tensor::stack(&label_refs)?))
}

/// Runs `local_epochs` shuffled passes over a dataset, one optimizer step per batch.
///
/// Shared by federated local training and the pooled centralized baseline.
#[allow(clippy::too_many_arguments)]
fn train_passes<T: Scalar>(
    model: &UNet,
    params: &mut ParameterSet<T>,
    optimizer: &mut AdamWState<T>,
    data: &ClientDataset<T>,
    transform_rng: &mut ChaCha8Rng,
    cfg: &RoundConfig,
    round_index: usize,
    proximal: Option<(&ParameterSet<T>, f64)>,
) -> Result<Vec<f64>> {
    let slices: Vec<&Slice<T>> = data.slices().collect();
    if slices.is_empty() {
        return Err(Error::Validation(format!("client {} has no training slices", data.client_id)));
    }
    let mut trace = Vec::new();
    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut rng_for(&[
            cfg.experiment_seed,
            hash_str("shuffle"),
            data.client_id as u64,
            round_index as u64,
            epoch as u64,
        ]));
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let context = |source: Error| Error::Client {
                client_id: data.client_id,
                round: round_index,
                batch: batch_index,
                source: Box::new(source),
            };
            let draw = sample(&data.transform, transform_rng);
            let batch: Vec<&Slice<T>> = chunk.iter().map(|&i| slices[i]).collect();
            let images = batch.iter().map(|s| apply(&s.image, &draw)).collect::<Result<Vec<_>>>().map_err(context)?;
            let (x, y) = stack_batch(&batch, images).map_err(context)?;
            let (value, mut grads) = model.loss_and_grad(params, &x, &y).map_err(context)?;
            if !value.total.is_finite() {
                return Err(context(Error::NonFinite("training loss".into())));
            }
            if let Some((anchor, mu)) = proximal {
                add_proximal_gradient(&mut grads, params, anchor, mu).map_err(context)?;
            }
            adamw_step(params, &grads, optimizer).map_err(context)?;
            trace.push(value.total.as_f64());
        }
    }
    Ok(trace)
}

/// One client's local round starting from the broadcast `global` parameters.
///
/// FedBN clients first restore their retained normalization entries. FedProx adds
/// `mu * (theta - global)` to every gradient, with `global` fixed for the round.
pub fn local_train<T: Scalar>(
    model: &UNet,
    global: &ParameterSet<T>,
    client: &mut ClientState<T>,
    strategy: &Strategy,
    cfg: &RoundConfig,
    round_index: usize,
) -> Result<ClientUpdate<T>> {
    let mut params = client.local_model(global, strategy)?;
    let mu = strategy.proximal_mu();
    let proximal = (mu > 0.0).then_some((global, mu));
    let trace = train_passes(
        model,
        &mut params,
        &mut client.optimizer,
        &client.data,
        &mut client.train_rng,
        cfg,
        round_index,
        proximal,
    )?;
    if strategy.kind == StrategyKind::FedBn {
        client.norm_local = Some(params.subset(ParamTag::NormLocal));
    }
    Ok(ClientUpdate {
        client_id: client.data.client_id,
        params,
        sample_count: client.data.sample_count(),
        local_loss_trace: trace,
    })
}

/// Sample-count weighted mean of client parameters, in update order.
///
/// Every entry is averaged. Under FedBN the averaged norm-local entries form only the
/// reference set stored with the global model; clients keep training and evaluating with
/// their own. Computed as a running weighted mean, so identical updates aggregate to
/// themselves exactly.
pub fn aggregate<T: Scalar>(updates: &[ClientUpdate<T>], _strategy: &Strategy) -> Result<ParameterSet<T>> {
    let first = updates.first().ok_or_else(|| Error::Validation("aggregate needs at least one update".into()))?;
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::Validation("total sample count is zero".into()));
    }
    for u in &updates[1..] {
        if !u.params.is_compatible(&first.params) {
            return Err(Error::shape(format!("client {} parameters do not match client {}", u.client_id, first.client_id)));
        }
    }
    let mut mean = first.params.clone();
    let mut weight = first.sample_count;
    for u in &updates[1..] {
        if u.sample_count == 0 {
            continue;
        }
        weight += u.sample_count;
        let w = T::of(u.sample_count as f64 / weight as f64);
        for (dst, src) in mean.iter_mut().zip(u.params.iter()) {
            for (m, &x) in dst.tensor.data_mut().iter_mut().zip(src.tensor.data()) {
                *m += w * (x - *m);
            }
        }
    }
    Ok(mean)
}

/// Validation slices with their client's evaluation-time shift already applied.
#[derive(Clone, Debug)]
pub struct PreparedValidation<T> {
    /// Client id -> slices (images transformed).
    by_client: BTreeMap<usize, Vec<ValidationSlice<T>>>,
}

impl<T: Scalar> PreparedValidation<T> {
    pub fn new(
        slices: &[ValidationSlice<T>],
        transforms: &BTreeMap<usize, TransformSpec>,
        experiment_seed: u64,
    ) -> Result<Self> {
        let mut by_client: BTreeMap<usize, Vec<ValidationSlice<T>>> = BTreeMap::new();
        for s in slices {
            let spec = transforms
                .get(&s.client_id)
                .ok_or_else(|| Error::Validation(format!("validation slice from unknown client {}", s.client_id)))?;
            let draw = eval_transform(spec, experiment_seed, s.client_id, &s.case_id, s.slice_index);
            let mut shifted = s.clone();
            shifted.image = apply(&s.image, &draw)?;
            by_client.entry(s.client_id).or_default().push(shifted);
        }
        Ok(Self { by_client })
    }

    pub fn clients(&self) -> impl Iterator<Item = &usize> {
        self.by_client.keys()
    }

    pub fn slices(&self, client_id: usize) -> &[ValidationSlice<T>] {
        self.by_client.get(&client_id).map_or(&[], Vec::as_slice)
    }
}

/// Dice of one validation slice under the final model.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceDice {
    pub client_id: usize,
    pub case_id: String,
    pub slice_index: usize,
    pub regions: [f64; REGIONS],
}

pub struct ClientEvaluation {
    pub dice: ClientDice,
    pub loss_sum: f64,
    pub slices: Vec<SliceDice>,
}

/// Eval-mode Dice of one client's validation slices (thresholding sigmoid at 0.5).
pub fn evaluate_client<T: Scalar>(
    model: &UNet,
    params: &ParameterSet<T>,
    slices: &[ValidationSlice<T>],
    batch_size: usize,
    dice_eps: f64,
) -> Result<ClientEvaluation> {
    let mut sums = [0.0; REGIONS];
    let mut loss_sum = 0.0;
    let mut per_slice = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(batch_size.max(1)) {
        let images: Vec<&Tensor<T>> = chunk.iter().map(|s| &s.image).collect();
        let labels: Vec<&Tensor<T>> = chunk.iter().map(|s| &s.labels).collect();
        let x = Tensor::stack(&images)?;
        let y = Tensor::stack(&labels)?;
        let logits = model.infer(params, &x)?;
        loss_sum += loss(&logits, &y, model.config().dice_smoothing)?.total.as_f64() * chunk.len() as f64;
        let (_, c, h, w) = logits.dims4()?;
        let plane = h * w;
        for (i, s) in chunk.iter().enumerate() {
            let mut regions = [0.0; REGIONS];
            for (r, region) in regions.iter_mut().enumerate().take(c.min(REGIONS)) {
                let base = (i * c + r) * plane;
                let pred: Vec<bool> = logits.data()[base..base + plane].iter().map(|&z| z > T::zero()).collect();
                let target: Vec<bool> = s.labels.data()[r * plane..(r + 1) * plane].iter().map(|&v| v > T::zero()).collect();
                *region = dice(&pred, &target, dice_eps)?;
                sums[r] += *region;
            }
            per_slice.push(SliceDice {
                client_id: s.client_id,
                case_id: s.case_id.clone(),
                slice_index: s.slice_index,
                regions,
            });
        }
    }
    let n = slices.len().max(1) as f64;
    Ok(ClientEvaluation {
        dice: ClientDice::from_regions(sums.map(|v| v / n), slices.len()),
        loss_sum,
        slices: per_slice,
    })
}

/// Training datasets per client plus the shared held-out validation slices.
#[derive(Clone, Debug)]
pub struct FederatedData<T> {
    pub clients: Vec<ClientDataset<T>>,
    pub validation: Vec<ValidationSlice<T>>,
}

impl<T: Scalar> FederatedData<T> {
    pub fn transforms(&self) -> BTreeMap<usize, TransformSpec> {
        self.clients.iter().map(|c| (c.client_id, c.transform)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult<T> {
    pub strategy: Strategy,
    pub records: Vec<RoundRecord>,
    /// Aggregated model after the last round.
    pub global: ParameterSet<T>,
    /// Retained normalization entries per client (FedBN only).
    pub client_norms: BTreeMap<usize, ParameterSet<T>>,
    /// Slice-level Dice after the last round.
    pub final_slices: Vec<SliceDice>,
}

fn evaluate_round<T: Scalar>(
    model: &UNet,
    global: &ParameterSet<T>,
    states: &[ClientState<T>],
    validation: &PreparedValidation<T>,
    strategy: &Strategy,
    cfg: &RoundConfig,
) -> Result<(BTreeMap<usize, ClientDice>, f64, Vec<SliceDice>)> {
    let ids: Vec<usize> = validation.clients().copied().collect();
    let evals = ids
        .par_iter()
        .map(|&id| {
            let params = match states.iter().find(|s| s.data.client_id == id) {
                Some(state) => state.local_model(global, strategy)?,
                None => global.clone(),
            };
            evaluate_client(model, &params, validation.slices(id), cfg.batch_size, cfg.dice_eps)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_client = BTreeMap::new();
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut slices = Vec::new();
    for (id, e) in ids.into_iter().zip(evals) {
        loss_sum += e.loss_sum;
        count += e.dice.slices;
        per_client.insert(id, e.dice);
        slices.extend(e.slices);
    }
    Ok((per_client, loss_sum / count.max(1) as f64, slices))
}

/// Full federated schedule for one strategy. Deterministic given the data and
/// `cfg.experiment_seed`; client work within a round runs on the ambient rayon pool
/// and is reduced in client-id order.
pub fn run_experiment<T: Scalar>(
    model: &UNet,
    strategy: &Strategy,
    cfg: &RoundConfig,
    data: &FederatedData<T>,
) -> Result<ExperimentResult<T>> {
    let validation = PreparedValidation::new(&data.validation, &data.transforms(), cfg.experiment_seed)?;
    run_prepared(model, strategy, cfg, data, &validation)
}

/// [`run_experiment`] with validation images already shifted, so several strategies can share them.
pub fn run_prepared<T: Scalar>(
    model: &UNet,
    strategy: &Strategy,
    cfg: &RoundConfig,
    data: &FederatedData<T>,
    validation: &PreparedValidation<T>,
) -> Result<ExperimentResult<T>> {
    cfg.validate()?;
    strategy.validate()?;
    if data.clients.is_empty() {
        return Err(Error::config("at least one client is required"));
    }
    let mut global: ParameterSet<T> = model.init(cfg.experiment_seed)?;
    let mut states: Vec<ClientState<T>> = data.clients.iter().cloned().map(|c| ClientState::new(c, cfg)).collect();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut final_slices = Vec::new();

    for round in 1..=cfg.rounds {
        let updates = states
            .par_iter_mut()
            .map(|state| local_train(model, &global, state, strategy, cfg, round))
            .collect::<Result<Vec<_>>>()?;
        let trace: Vec<f64> = updates.iter().flat_map(|u| u.local_loss_trace.iter().copied()).collect();
        global = aggregate(&updates, strategy)?;

        let (per_client, val_loss, slices) = evaluate_round(model, &global, &states, validation, strategy, cfg)?;
        records.push(RoundRecord {
            round_index: round,
            strategy: strategy.label(),
            global_mean_dice: slice_weighted_mean(&per_client),
            per_client,
            train_loss: trace.iter().sum::<f64>() / trace.len().max(1) as f64,
            val_loss,
        });
        final_slices = slices;
    }

    let client_norms = states
        .iter()
        .filter_map(|s| s.norm_local.as_ref().map(|n| (s.data.client_id, n.clone())))
        .collect();
    Ok(ExperimentResult { strategy: *strategy, records, global, client_norms, final_slices })
}

/// Pooled training on one dataset with no broadcast or aggregation step: the
/// centralized reference. Uses the same seeds as client `data.client_id` would.
pub fn train_centralized<T: Scalar>(
    model: &UNet,
    data: &ClientDataset<T>,
    validation: &[ValidationSlice<T>],
    cfg: &RoundConfig,
) -> Result<(Vec<RoundRecord>, ParameterSet<T>)> {
    cfg.validate()?;
    let transforms = BTreeMap::from([(data.client_id, data.transform)]);
    let prepared = PreparedValidation::new(validation, &transforms, cfg.experiment_seed)?;
    let mut params: ParameterSet<T> = model.init(cfg.experiment_seed)?;
    let mut optimizer = AdamWState::new(cfg.optimizer);
    let mut rng = rng_for(&[cfg.experiment_seed, hash_str("train-transform"), data.client_id as u64]);
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let trace = train_passes(model, &mut params, &mut optimizer, data, &mut rng, cfg, round, None)?;
        let eval = evaluate_client(model, &params, prepared.slices(data.client_id), cfg.batch_size, cfg.dice_eps)?;
        let per_client = BTreeMap::from([(data.client_id, eval.dice)]);
        records.push(RoundRecord {
            round_index: round,
            strategy: "centralized".to_string(),
            global_mean_dice: slice_weighted_mean(&per_client),
            per_client,
            train_loss: trace.iter().sum::<f64>() / trace.len().max(1) as f64,
            val_loss: eval.loss_sum / eval.dice.slices.max(1) as f64,
        });
    }
    Ok((records, params))
}
