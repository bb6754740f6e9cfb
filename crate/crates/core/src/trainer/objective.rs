//! Batch objective: forward every utterance, combine the masked loss terms,
//! and backpropagate into a gradient accumulator.

use std::collections::HashMap;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FrontEnd;
use crate::losses::{
    build_pairs, ctc_loss_with_grad, metric_loss_with_grad, phrase_ce, phrase_ce_grad,
    speaker_ce_with_grad, subsample_negatives, total_loss, LossBreakdown, LossSet, LossWeights,
    PairSets, TermCounts, UtteranceTerms,
};
use crate::model::{
    decoder_backward, decoder_trace, encoder_backward, encoder_trace, DecoderTrace, DropoutMask,
    EncoderTrace, ModelConfig, ModelParams, ParamGroup, UtteranceEmbedding,
};
use crate::nn::{Mat, Vector};
use crate::sampler::BatchItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Baseline,
    Finetune,
}

/// What is trained and how: loss terms, frozen groups, decoder tap.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRegime {
    pub stage: Stage,
    pub frozen: Vec<ParamGroup>,
    pub tap_layer: usize,
    pub losses: LossSet,
    pub strict_pairs: bool,
}

impl TrainRegime {
    /// Speaker-independent phonetic and phrase training on the top layer.
    pub fn baseline(cfg: &ModelConfig) -> Self {
        Self {
            stage: Stage::Baseline,
            frozen: Vec::new(),
            tap_layer: cfg.enc_blocks,
            losses: LossSet {
                phone: true,
                phrase: true,
                spkr: false,
                metric: false,
            },
            strict_pairs: false,
        }
    }

    /// Decoder-only fine-tuning with the decoder reading `cfg.tap_layer`.
    pub fn finetune(cfg: &ModelConfig) -> Self {
        Self {
            stage: Stage::Finetune,
            frozen: vec![ParamGroup::Encoder],
            tap_layer: cfg.tap_layer,
            losses: LossSet {
                phone: false,
                phrase: true,
                spkr: true,
                metric: true,
            },
            strict_pairs: false,
        }
    }

    pub fn encoder_frozen(&self) -> bool {
        self.frozen.contains(&ParamGroup::Encoder)
    }

    fn needs_decoder(&self) -> bool {
        self.losses.any_decoder()
    }

    fn needs_head(&self) -> bool {
        self.losses.phone
    }
}

/// Encoder taps memoized across steps while the encoder is frozen, keyed by
/// utterance id and frame count (a dropped keyword changes the count).
#[derive(Debug, Default)]
pub struct TapCache {
    taps: HashMap<(String, usize), Mat>,
}

impl TapCache {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub breakdown: LossBreakdown,
    pub counts: TermCounts,
    pub pairs: (usize, usize),
    pub grads: Option<ModelParams>,
}

struct Forward {
    enc: Option<EncoderTrace>,
    log_posteriors: Option<Mat>,
    dec: Option<DecoderTrace>,
}

fn forward_item(
    item: &BatchItem,
    params: &ModelParams,
    cfg: &ModelConfig,
    front: &FrontEnd,
    regime: &TrainRegime,
    keep_trace: bool,
    cache: Option<&mut TapCache>,
) -> Result<Forward> {
    let u = &item.utterance;
    let key = (u.id.clone(), u.features.len());
    let cached = match (&cache, regime.needs_head()) {
        (Some(c), false) => c.taps.get(&key).cloned(),
        _ => None,
    };
    let (enc, tap, log_posteriors) = match cached {
        Some(tap) => (None, tap, None),
        None => {
            let x = front.apply(&u.features)?;
            let depth = if regime.needs_head() {
                cfg.enc_blocks
            } else {
                regime.tap_layer
            };
            let trace = encoder_trace(&x, &params.encoder, cfg, depth, regime.needs_head())?;
            let tap = trace.taps[regime.tap_layer - 1].clone();
            if let (Some(c), false) = (cache, regime.needs_head()) {
                c.taps.insert(key, tap.clone());
            }
            let lp = trace.log_posteriors.clone();
            (keep_trace.then_some(trace), tap, lp)
        }
    };
    let dec = if regime.needs_decoder() {
        Some(decoder_trace(&tap, &params.decoder, cfg)?)
    } else {
        None
    };
    Ok(Forward {
        enc,
        log_posteriors,
        dec,
    })
}

/// Evaluates the weighted objective on a batch; with `want_grads`, also the
/// gradient of the total with respect to every trainable tensor.
///
/// Randomness (speaker dropout masks, negative-pair subsampling) is drawn
/// from `rng` in batch order.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    params: &ModelParams,
    cfg: &ModelConfig,
    front: &FrontEnd,
    items: &[BatchItem],
    weights: &LossWeights,
    regime: &TrainRegime,
    rng: &mut impl Rng,
    want_grads: bool,
    mut cache: Option<&mut TapCache>,
) -> Result<BatchOutcome> {
    if items.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if regime.tap_layer == 0 || regime.tap_layer > cfg.enc_blocks {
        return Err(Error::Config(format!(
            "tap layer {} out of range",
            regime.tap_layer
        )));
    }
    let train_encoder = want_grads && !regime.encoder_frozen();
    let use_cache = regime.encoder_frozen() && !regime.needs_head();
    let active = regime.losses;

    let mut fwd = Vec::with_capacity(items.len());
    let mut terms = Vec::with_capacity(items.len());
    let mut phone_grads: Vec<Option<Mat>> = Vec::with_capacity(items.len());
    let mut phrase_grads = Vec::with_capacity(items.len());
    let mut speaker_state: Vec<Option<(DropoutMask, Vector)>> = Vec::with_capacity(items.len());

    for item in items {
        let f = forward_item(
            item,
            params,
            cfg,
            front,
            regime,
            train_encoder,
            if use_cache {
                cache.as_deref_mut()
            } else {
                None
            },
        )?;
        let mut t = UtteranceTerms::default();
        let mut dphone = None;
        if active.phone {
            if let (Some(labels), Some(lp)) = (&item.utterance.phonemes, &f.log_posteriors) {
                let (loss, grad) = ctc_loss_with_grad(lp, labels).map_err(|e| match e {
                    Error::Unalignable { .. } => {
                        Error::InvalidArgument(format!("{}: {e}", item.utterance.id))
                    }
                    other => other,
                })?;
                t.phone = Some(loss);
                dphone = Some(grad);
            }
        }
        let mut dz = 0.0;
        let mut spk = None;
        if let Some(dec) = &f.dec {
            let e = &dec.embedding;
            if active.phrase {
                let z = crate::model::phrase_logit(e, params);
                t.phrase = Some(phrase_ce(z, item.utterance.phrase));
                dz = phrase_ce_grad(z, item.utterance.phrase);
            }
            if active.spkr {
                if let Some(class) = item.speaker_class {
                    if class >= cfg.speaker_classes {
                        return Err(Error::IndexOutOfRange {
                            index: class,
                            len: cfg.speaker_classes,
                        });
                    }
                    let mask = DropoutMask::sample(e.len(), cfg.speaker_dropout, rng);
                    let logits = crate::model::speaker_logits_masked(e, params, &mask);
                    let (loss, grad) = speaker_ce_with_grad(&logits, class)?;
                    t.spkr = Some(loss);
                    spk = Some((mask, grad));
                }
            }
        }
        terms.push(t);
        phone_grads.push(dphone);
        phrase_grads.push(dz);
        speaker_state.push(spk);
        fwd.push(f);
    }

    let mut pairs = PairSets::default();
    let mut metric_value = 0.0;
    let mut metric_grad = None;
    if active.metric {
        let meta: Vec<_> = items.iter().map(|i| i.utterance.pair_meta()).collect();
        pairs = subsample_negatives(&build_pairs(&meta, regime.strict_pairs), rng);
        let embeddings: Vec<Vector> = fwd
            .iter()
            .map(|f| {
                f.dec
                    .as_ref()
                    .expect("metric needs decoder")
                    .embedding
                    .0
                    .clone()
            })
            .collect();
        let (a, b) = (params.metric.a(), params.metric.b());
        let (loss, grad) = metric_loss_with_grad(&embeddings, &pairs, a, b)?;
        metric_value = loss;
        metric_grad = Some(grad);
    }

    let (breakdown, counts) = total_loss(&terms, metric_value, weights, &active);
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {breakdown:?}")));
    }
    let outcome_pairs = (pairs.n_positive(), pairs.n_negative());
    if !want_grads {
        return Ok(BatchOutcome {
            breakdown,
            counts,
            pairs: outcome_pairs,
            grads: None,
        });
    }

    let mut grads = params.zeros_like();
    let phone_scale = if counts.phone > 0 {
        1.0 / counts.phone as f64
    } else {
        0.0
    };
    let phrase_scale = if counts.phrase > 0 {
        weights.alpha / counts.phrase as f64
    } else {
        0.0
    };
    let spkr_scale = if counts.spkr > 0 {
        weights.beta / counts.spkr as f64
    } else {
        0.0
    };
    if let Some(mg) = &metric_grad {
        grads.metric.scale[0] += weights.gamma * mg.a;
        grads.metric.offset[0] += weights.gamma * mg.b;
    }

    for (i, f) in fwd.iter().enumerate() {
        let mut d_tap = None;
        if let Some(dec) = &f.dec {
            let e: &UtteranceEmbedding = &dec.embedding;
            let mut de = Array1::zeros(e.len());
            if terms[i].phrase.is_some() {
                let dz = Array1::from_elem(1, phrase_grads[i] * phrase_scale);
                de += &params
                    .heads
                    .phrase
                    .backward_vec(&e.0, &dz, &mut grads.heads.phrase);
            }
            if let Some((mask, dlogits)) = &speaker_state[i] {
                let dl = dlogits * spkr_scale;
                let masked = &e.0 * &mask.0;
                let dmasked =
                    params
                        .heads
                        .speaker
                        .backward_vec(&masked, &dl, &mut grads.heads.speaker);
                de += &(dmasked * &mask.0);
            }
            if let Some(mg) = &metric_grad {
                de.scaled_add(weights.gamma, &mg.embeddings[i]);
            }
            if de.iter().any(|v| *v != 0.0) {
                d_tap = Some(decoder_backward(
                    &params.decoder,
                    dec,
                    &de,
                    &mut grads.decoder,
                ));
            }
        }
        if train_encoder {
            let enc = f
                .enc
                .as_ref()
                .expect("trace kept when training the encoder");
            let dlp = phone_grads[i].as_ref().map(|g| g * phone_scale);
            let taps: Vec<(usize, &Mat)> = d_tap
                .as_ref()
                .map(|d| vec![(regime.tap_layer, d)])
                .unwrap_or_default();
            if dlp.is_some() || !taps.is_empty() {
                encoder_backward(
                    &params.encoder,
                    enc,
                    dlp.as_ref(),
                    &taps,
                    &mut grads.encoder,
                );
            }
        }
    }

    Ok(BatchOutcome {
        breakdown,
        counts,
        pairs: outcome_pairs,
        grads: Some(grads),
    })
}
