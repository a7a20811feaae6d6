//! Adam, episode mini-batches and early stopping on the validation task.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::corpus::PairedExample;
use crate::encoders::{embed_audio, embed_vision, encode_audio, encode_vision, BoundParams, ModelConfig, ParamSet};
use crate::eval::score_pair;
use crate::graph::{Graph, Var};
use crate::losses::{
    contrastive_davenet_loss, davenet_triplet_loss, episode_contexts, localisation_attention_loss, EpisodeVars,
    Impostors, LossError, PairVars,
};
use crate::rng::{rng_for, shuffle};
use crate::sampling::{
    sample_episode, KeywordIndex, NegativesExclude, SampledEpisodeRefs, SamplingError, ValidationTriplet,
};
use crate::tensor::{Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const SHUFFLE_STREAM: u64 = 600;
const IMPOSTOR_STREAM: u64 = 601;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ModelKind {
    Davenet,
    Contrastive,
    LocAttn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Davenet, ModelKind::Contrastive, ModelKind::LocAttn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Davenet => "davenet",
            ModelKind::Contrastive => "contrastive",
            ModelKind::LocAttn => "locattn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("no trainable episodes in epoch {0}")]
    NoEpisodes(usize),
    #[error("validation needs at least one triplet")]
    NoTriplets,
    #[error("loss diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        /// Parameters before the failing step.
        last_finite: ParamSet,
    },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub model: ModelKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub dedupe_loss_terms: bool,
    pub negatives_exclude: NegativesExclude,
    pub margin: f64,
    /// Keep the sampled refs and loss of every step.
    pub record_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::LocAttn,
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            dedupe_loss_terms: false,
            negatives_exclude: NegativesExclude::All,
            margin: 1.0,
            record_steps: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("batch size and max epochs must be at least 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.model == ModelKind::Davenet && self.batch_size < 2 {
            return Err(TrainError::Config("the retrieval baseline needs batches of at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update of one flat parameter array.
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64) {
    let c1 = 1.0 - libm::pow(ADAM_BETA1, step as f64);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, step as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
    }
}

pub fn adam_step(params: &mut ParamSet, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    let aligned = grads.len() == params.len()
        && state.m.len() == params.len()
        && state.v.len() == params.len()
        && params
            .tensors
            .iter()
            .enumerate()
            .all(|(i, t)| grads[i].len() == t.len() && state.m[i].len() == t.len() && state.v[i].len() == t.len());
    if !aligned {
        return Err(TrainError::Optimizer("gradient or moment shapes do not match parameters".into()));
    }
    state.step += 1;
    for (i, t) in params.tensors.iter_mut().enumerate() {
        adam_update(t.data_mut(), &grads[i], &mut state.m[i], &mut state.v[i], state.step, lr);
    }
    Ok(())
}

/// What one optimisation step was computed from.
#[derive(Debug, Clone, PartialEq)]
pub enum StepBatch {
    Episodes(Vec<SampledEpisodeRefs>),
    Pairs { members: Vec<usize>, impostors: Vec<Impostors> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Batch mean of the per-episode (or per-pair) loss.
    pub loss: f64,
    pub batch: StepBatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub optimizer: AdamState,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Training data and the validation set it is selected on.
pub struct TrainData<'a> {
    pub train: &'a [PairedExample],
    pub index: &'a KeywordIndex,
    pub dev: &'a [PairedExample],
    pub triplets: &'a [ValidationTriplet],
}

/// Fraction of triplets with `score(anchor, positive) > score(anchor, negative)`.
pub fn validation_accuracy<F>(triplets: &[ValidationTriplet], mut score: F) -> Result<f64, TrainError>
where
    F: FnMut(usize, usize) -> Result<f64, TrainError>,
{
    if triplets.is_empty() {
        return Err(TrainError::NoTriplets);
    }
    let mut wins = 0usize;
    for t in triplets {
        if score(t.anchor, t.positive)? > score(t.anchor, t.negative)? {
            wins += 1;
        }
    }
    Ok(wins as f64 / triplets.len() as f64)
}

/// Validation accuracy of a model, scoring each pair in both directions.
pub fn validate(
    kind: ModelKind,
    config: &ModelConfig,
    params: &ParamSet,
    dev: &[PairedExample],
    triplets: &[ValidationTriplet],
) -> Result<f64, TrainError> {
    let mut used: Vec<usize> = triplets.iter().flat_map(|t| [t.anchor, t.positive, t.negative]).collect();
    used.sort_unstable();
    used.dedup();
    let mut audio: Vec<Option<Tensor>> = vec![None; dev.len()];
    let mut vision: Vec<Option<Tensor>> = vec![None; dev.len()];
    for &i in &used {
        audio[i] = Some(embed_audio(config, params, &dev[i].caption.features)?.rows);
        vision[i] = Some(embed_vision(config, params, dev[i].image.pixels.tensor())?.rows);
    }
    let det = |img: usize, cap: usize| -> Result<f64, TrainError> {
        let (v, a) = (vision[img].as_ref(), audio[cap].as_ref());
        Ok(score_pair(kind, v.expect("embedded"), a.expect("embedded"))?.score)
    };
    validation_accuracy(triplets, |a, o| Ok(0.5 * (det(a, o)? + det(o, a)?)))
}

fn bind_pair(
    g: &mut Graph,
    config: &ModelConfig,
    bound: &BoundParams,
    ex: &PairedExample,
) -> Result<PairVars, TensorError> {
    let f = g.constant(ex.caption.features.clone());
    let p = g.constant(ex.image.pixels.tensor().clone());
    Ok(PairVars {
        audio: encode_audio(g, config, bound, f)?,
        vision: encode_vision(g, config, bound, p)?,
    })
}

/// Loss of one episode under `kind` on a fresh graph section.
pub fn episode_loss(
    g: &mut Graph,
    kind: ModelKind,
    config: &ModelConfig,
    bound: &BoundParams,
    examples: &[PairedExample],
    ep: &SampledEpisodeRefs,
    dedupe: bool,
) -> Result<Var, TrainError> {
    let anchor = bind_pair(g, config, bound, &examples[ep.anchor])?;
    let positive = bind_pair(g, config, bound, &examples[ep.positive])?;
    let negatives = ep
        .negatives
        .iter()
        .map(|&n| bind_pair(g, config, bound, &examples[n]))
        .collect::<Result<Vec<_>, _>>()?;
    let vars = EpisodeVars {
        anchor,
        positive,
        negatives,
    };
    Ok(match kind {
        ModelKind::Contrastive => contrastive_davenet_loss(g, &vars)?,
        ModelKind::LocAttn => {
            let c = episode_contexts(g, &vars)?;
            localisation_attention_loss(g, &c, dedupe)?
        }
        ModelKind::Davenet => return Err(TrainError::Config("the retrieval baseline trains on pair batches".into())),
    })
}

/// Summed margin loss of one pair batch.
pub fn pair_batch_loss(
    g: &mut Graph,
    config: &ModelConfig,
    bound: &BoundParams,
    examples: &[PairedExample],
    members: &[usize],
    impostors: &[Impostors],
    margin: f64,
) -> Result<Var, TrainError> {
    let pairs = members
        .iter()
        .map(|&i| bind_pair(g, config, bound, &examples[i]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(davenet_triplet_loss(g, &pairs, impostors, margin)?)
}

fn accumulate_grads(g: &Graph, bound: &BoundParams, into: &mut [Vec<f64>]) {
    for (acc, &v) in into.iter_mut().zip(&bound.vars) {
        if let Some(gr) = g.grad(v) {
            acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
        }
    }
}

/// Forward, backward and gradient accumulation for one step. Returns the
/// summed loss; `grads` receives summed gradients.
fn run_step(
    cfg: &TrainConfig,
    model: &ModelConfig,
    params: &ParamSet,
    examples: &[PairedExample],
    batch: &StepBatch,
    grads: &mut [Vec<f64>],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut one = |build: &mut dyn FnMut(&mut Graph, &BoundParams) -> Result<Var, TrainError>| {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params, true);
        let loss = build(&mut g, &bound)?;
        g.backward(loss)?;
        accumulate_grads(&g, &bound, grads);
        Ok::<f64, TrainError>(g.value(loss).data()[0])
    };
    match batch {
        StepBatch::Episodes(eps) => {
            for ep in eps {
                total += one(&mut |g, b| episode_loss(g, cfg.model, model, b, examples, ep, cfg.dedupe_loss_terms))?;
            }
        }
        StepBatch::Pairs { members, impostors } => {
            total += one(&mut |g, b| pair_batch_loss(g, model, b, examples, members, impostors, cfg.margin))?;
        }
    }
    Ok(total)
}

/// Batch-size-1 tails are folded into the previous batch so every margin
/// batch has an impostor.
fn pair_batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    batches
}

fn draw_impostors<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Impostors> {
    let mut other = |i: usize| {
        let j = rng.random_range(0..n - 1);
        if j >= i {
            j + 1
        } else {
            j
        }
    };
    (0..n)
        .map(|i| Impostors {
            caption: other(i),
            image: other(i),
        })
        .collect()
}

/// Batches for one epoch, in the order they will be applied.
fn epoch_batches(cfg: &TrainConfig, data: &TrainData<'_>, epoch: usize) -> Result<Vec<StepBatch>, TrainError> {
    let mut shuffler = rng_for(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]);
    if cfg.model == ModelKind::Davenet {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle(&mut order, &mut shuffler);
        let batches = pair_batches(&order, cfg.batch_size);
        if batches.first().is_none_or(|b| b.len() < 2) {
            return Err(TrainError::NoEpisodes(epoch));
        }
        return Ok(batches
            .into_iter()
            .enumerate()
            .map(|(step, members)| {
                let mut rng = rng_for(cfg.seed, &[IMPOSTOR_STREAM, epoch as u64, step as u64]);
                let impostors = draw_impostors(members.len(), &mut rng);
                StepBatch::Pairs { members, impostors }
            })
            .collect());
    }
    let mut episodes = Vec::with_capacity(data.index.anchors.len());
    for &anchor in &data.index.anchors {
        let mut rng = rng_for(cfg.seed, &[epoch as u64, anchor as u64]);
        match sample_episode(data.index, anchor, cfg.negatives_exclude, &mut rng) {
            Ok(ep) => episodes.push(ep),
            Err(SamplingError::NoPositive { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if episodes.is_empty() {
        return Err(TrainError::NoEpisodes(epoch));
    }
    shuffle(&mut episodes, &mut shuffler);
    Ok(episodes
        .chunks(cfg.batch_size)
        .map(|c| StepBatch::Episodes(c.to_vec()))
        .collect())
}

fn batch_len(b: &StepBatch) -> usize {
    match b {
        StepBatch::Episodes(e) => e.len(),
        StepBatch::Pairs { members, .. } => members.len(),
    }
}

/// Trains from `init` and returns the best-validation parameters.
/// `on_epoch` sees every epoch record as soon as it is available.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    init: ParamSet,
    data: &TrainData<'_>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model.validate()?;
    if !init.matches(model) {
        return Err(TrainError::Config("initial parameters do not match the model config".into()));
    }
    if data.triplets.is_empty() {
        return Err(TrainError::NoTriplets);
    }
    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut best: Option<(usize, f64, ParamSet, AdamState)> = None;
    let mut log = Vec::new();
    let mut steps = Vec::new();
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let batches = epoch_batches(cfg, data, epoch)?;
        let mut loss_sum = 0.0;
        let n_steps = batches.len();
        for (step, batch) in batches.into_iter().enumerate() {
            let mut grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
            let n = batch_len(&batch) as f64;
            let diverged = || TrainError::Diverged {
                epoch,
                step,
                last_finite: params.clone(),
            };
            let loss = match run_step(cfg, model, &params, data.train, &batch, &mut grads) {
                Ok(l) => l / n,
                Err(TrainError::Tensor(TensorError::NonFinite(_))) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(diverged());
            }
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
            loss_sum += loss;
            if cfg.record_steps {
                steps.push(StepRecord { epoch, step, loss, batch });
            }
            log::trace!("epoch {epoch} step {step} loss {loss}");
        }
        let mean_loss = loss_sum / n_steps as f64;
        let val_accuracy = validate(cfg.model, model, &params, data.dev, data.triplets)?;
        let record = EpochRecord {
            epoch,
            mean_loss,
            val_accuracy,
        };
        log::debug!("epoch {epoch}: loss {mean_loss:.6} val {val_accuracy:.4}");
        on_epoch(&record);
        log.push(record);

        if best.as_ref().is_none_or(|b| val_accuracy > b.1) {
            best = Some((epoch, val_accuracy, params.clone(), adam.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_val_accuracy, params, optimizer) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        optimizer,
        best_epoch,
        best_val_accuracy,
        log,
        steps,
    })
}
