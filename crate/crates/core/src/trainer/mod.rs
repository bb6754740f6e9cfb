//! Two-stage training: a speaker-independent baseline, then decoder
//! fine-tuning with the speaker-aware objective.

pub mod adam;
pub mod gradcheck;
pub mod objective;
pub mod schedule;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use objective::{batch_objective, BatchOutcome, Stage, TapCache, TrainRegime};
pub use schedule::{lr_at, LrSchedule};

use crate::error::{Error, Result};
use crate::features::FrontEnd;
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::sampler::{epoch_batches, BatchItem, BatchSpec, Source, SpeakerStore, TriggerStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub baseline_epochs: usize,
    pub finetune_epochs: usize,
    pub baseline_batch: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Memoize frozen encoder taps between steps.
    pub tap_cache: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            baseline_epochs: 40,
            finetune_epochs: 40,
            baseline_batch: 128,
            clip_norm: None,
            tap_cache: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.baseline_batch == 0 {
            return Err(Error::Config("baseline_batch must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step, as written to the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub const TSV_HEADER: &'static str = "epoch\tstep\tlr\tphone\tphrase\tspkr\tmetric\ttotal";

    pub fn to_tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.step, self.lr, l.phone, l.phrase, l.spkr, l.metric, l.total
        )
    }
}

pub fn global_norm(grads: &ModelParams) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to norm `max_norm` when it exceeds it; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

#[allow(clippy::too_many_arguments)]
fn step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    cfg: &ModelConfig,
    front: &FrontEnd,
    items: &[BatchItem],
    weights: &LossWeights,
    regime: &TrainRegime,
    train: &TrainConfig,
    lr: f64,
    rng: &mut impl Rng,
    cache: Option<&mut TapCache>,
) -> Result<LossBreakdown> {
    let out = batch_objective(params, cfg, front, items, weights, regime, rng, true, cache)?;
    let mut grads = out.grads.expect("gradients requested");
    if let Some(c) = train.clip_norm {
        clip_gradients(&mut grads, c);
    }
    adam_step(params, &grads, state, lr, &regime.frozen)?;
    if !params.is_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    Ok(out.breakdown)
}

/// Trains every parameter on the voice-trigger store with the phonetic and
/// phrase losses. The returned model taps the top encoder layer.
pub fn train_baseline(
    cfg: &ModelConfig,
    triggers: &TriggerStore,
    weights: &LossWeights,
    train: &TrainConfig,
    schedule: &LrSchedule,
    rng: &mut impl Rng,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Model> {
    cfg.validate()?;
    weights.validate()?;
    train.validate()?;
    schedule.validate()?;
    if triggers.is_empty() {
        return Err(Error::Empty("voice-trigger store"));
    }
    let mut config = *cfg;
    config.tap_layer = cfg.enc_blocks;
    let mut params = ModelParams::init(&config, rng)?;
    let regime = TrainRegime::baseline(&config);
    let front = FrontEnd::default();
    let mut state = OptimizerState::new(&params, train.adam);
    let per_epoch = triggers.len().div_ceil(train.baseline_batch);
    let mut order: Vec<usize> = (0..triggers.len()).collect();
    for epoch in 0..train.baseline_epochs {
        order.shuffle(rng);
        for (s, chunk) in order.chunks(train.baseline_batch).enumerate() {
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem {
                    utterance: triggers.utterances[i].clone(),
                    source: Source::VoiceTrigger,
                    speaker_class: None,
                })
                .collect();
            let progress = epoch as f64 + s as f64 / per_epoch as f64;
            let lr = lr_at(
                schedule.schedule_epoch(progress, train.baseline_epochs),
                schedule,
            );
            let loss = step(
                &mut params,
                &mut state,
                &config,
                &front,
                &items,
                weights,
                &regime,
                train,
                lr,
                rng,
                None,
            )?;
            log(&StepRecord {
                stage: Stage::Baseline,
                epoch,
                step: s,
                lr,
                loss,
            });
        }
    }
    Ok(Model { config, params })
}

/// Fine-tunes a trained model under `regime`, starting from fresh optimizer
/// moments. The returned model taps `regime.tap_layer`.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    base: &Model,
    regime: &TrainRegime,
    speakers: &SpeakerStore,
    triggers: &TriggerStore,
    spec: &BatchSpec,
    weights: &LossWeights,
    train: &TrainConfig,
    schedule: &LrSchedule,
    rng: &mut impl Rng,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Model> {
    weights.validate()?;
    train.validate()?;
    schedule.validate()?;
    spec.validate()?;
    if regime.tap_layer == 0 || regime.tap_layer > base.config.enc_blocks {
        return Err(Error::Config(format!(
            "tap layer {} outside 1..={}",
            regime.tap_layer, base.config.enc_blocks
        )));
    }
    if speakers.speaker_count() > base.config.speaker_classes {
        return Err(Error::Config(format!(
            "{} training speakers exceed {} speaker classes",
            speakers.speaker_count(),
            base.config.speaker_classes
        )));
    }
    let mut config = base.config;
    config.tap_layer = regime.tap_layer;
    let mut params = base.params.clone();
    let front = FrontEnd::default();
    let mut state = OptimizerState::new(&params, train.adam);
    let mut cache = TapCache::default();
    let use_cache = train.tap_cache && regime.encoder_frozen();
    for epoch in 0..train.finetune_epochs {
        let batches = epoch_batches(speakers, triggers, spec, rng)?;
        let per_epoch = batches.len();
        for (s, batch) in batches.iter().enumerate() {
            let progress = epoch as f64 + s as f64 / per_epoch as f64;
            let lr = lr_at(
                schedule.schedule_epoch(progress, train.finetune_epochs),
                schedule,
            );
            let loss = step(
                &mut params,
                &mut state,
                &config,
                &front,
                &batch.items,
                weights,
                regime,
                train,
                lr,
                rng,
                use_cache.then_some(&mut cache),
            )?;
            log(&StepRecord {
                stage: regime.stage,
                epoch,
                step: s,
                lr,
                loss,
            });
        }
    }
    Ok(Model { config, params })
}
