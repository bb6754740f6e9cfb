//! End-to-end pipeline shared by the command line and the tests: data
//! preparation, the two training stages, evaluation and ablations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{fit_score_calibration, run_protocol, ProtocolReport, ScoreKind, ScoredCorpus};
use crate::features::NormalizerStats;
use crate::inference::{ScoreCalibration, Scorer, UtteranceScore};
use crate::losses::LossSet;
use crate::manifest::{fit_corpus_normalizer, CorpusEntry};
use crate::model::{Model, ModelConfig, ParamGroup};
use crate::sampler::{SpeakerStore, TriggerStore, Utterance};
use crate::synth::GeneratedCorpus;
use crate::trainer::{finetune, train_baseline, Stage, StepRecord, TrainRegime};

/// Model-ready populations, normalized with statistics of the training data.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub normalizer: NormalizerStats,
    pub triggers: TriggerStore,
    pub speakers: SpeakerStore,
    pub eval: Vec<Utterance>,
    pub negatives: Vec<(Utterance, f64)>,
    pub validation: Vec<Utterance>,
    pub validation_negatives: Vec<(Utterance, f64)>,
}

type Trials = (Vec<Utterance>, Vec<(Utterance, f64)>);

fn split_trials(entries: &[CorpusEntry], stats: &NormalizerStats) -> Result<Trials> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for e in entries {
        let u = e.to_utterance(stats)?;
        if e.phrase {
            if e.speaker.is_none() {
                return Err(Error::format(
                    "manifest",
                    format!("{}: target utterance without speaker", e.id),
                ));
            }
            positives.push(u);
        } else {
            let hours = e.duration_hours.ok_or_else(|| {
                Error::format(
                    "manifest",
                    format!("{}: negative trial without duration", e.id),
                )
            })?;
            negatives.push((u, hours));
        }
    }
    Ok((positives, negatives))
}

impl Datasets {
    pub fn from_entries(
        voice_trigger: &[CorpusEntry],
        speaker_id: &[CorpusEntry],
        eval: &[CorpusEntry],
        negatives: &[CorpusEntry],
        validation: &[CorpusEntry],
    ) -> Result<Self> {
        let stats = fit_corpus_normalizer(voice_trigger.iter().chain(speaker_id))?;
        let conv = |es: &[CorpusEntry]| {
            es.iter()
                .map(|e| e.to_utterance(&stats))
                .collect::<Result<Vec<_>>>()
        };
        let triggers = TriggerStore::new(conv(voice_trigger)?)?;
        let speakers = SpeakerStore::new(conv(speaker_id)?)?;
        let (eval, stray) = split_trials(eval, &stats)?;
        if !stray.is_empty() {
            return Err(Error::format(
                "manifest",
                "eval manifest holds keyword-free trials",
            ));
        }
        let (none, negatives) = split_trials(negatives, &stats)?;
        if !none.is_empty() {
            return Err(Error::format(
                "manifest",
                "negatives manifest holds keyword trials",
            ));
        }
        let (validation, validation_negatives) = split_trials(validation, &stats)?;
        Ok(Self {
            normalizer: stats,
            triggers,
            speakers,
            eval,
            negatives,
            validation,
            validation_negatives,
        })
    }

    pub fn from_corpus(c: &GeneratedCorpus) -> Result<Self> {
        Self::from_entries(
            &c.voice_trigger,
            &c.speaker_id,
            &c.eval,
            &c.negatives,
            &c.validation,
        )
    }
}

/// Runs the model once over a target population and its negatives.
pub fn score_population(
    scorer: &Scorer<'_>,
    targets: &[Utterance],
    negatives: &[(Utterance, f64)],
) -> Result<ScoredCorpus> {
    let mut speakers: Vec<(u64, Vec<UtteranceScore>)> = Vec::new();
    for u in targets {
        let spk = u
            .speaker
            .ok_or_else(|| Error::InvalidArgument(format!("{}: no speaker", u.id)))?;
        let s = scorer.analyze(u)?;
        match speakers.iter_mut().find(|(id, _)| *id == spk) {
            Some((_, v)) => v.push(s),
            None => speakers.push((spk, vec![s])),
        }
    }
    speakers.sort_by_key(|(id, _)| *id);
    let negatives = negatives
        .iter()
        .map(|(u, h)| Ok((scorer.analyze(u)?, *h)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredCorpus {
        speakers,
        negatives,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub calibration: ScoreCalibration,
    pub report: ProtocolReport,
    pub eval_scores: ScoredCorpus,
}

/// Calibrates on the validation population, then runs the enrollment
/// protocol on the evaluation population.
pub fn evaluate(model: &Model, data: &Datasets, cfg: &ExperimentConfig) -> Result<Evaluation> {
    let scorer = Scorer::new(model, &cfg.synth.keyword);
    let validation = score_population(&scorer, &data.validation, &data.validation_negatives)?;
    let calibration = fit_score_calibration(
        model,
        &validation,
        cfg.protocol.enroll_per_speaker,
        cfg.scoring.standardize_ctc,
        cfg.protocol.seed,
    )?;
    let eval_scores = score_population(&scorer, &data.eval, &data.negatives)?;
    let kinds = ScoreKind::standard_set(&cfg.scoring.mus);
    let report = run_protocol(model, &calibration, &eval_scores, &kinds, &cfg.protocol)?;
    Ok(Evaluation {
        calibration,
        report,
        eval_scores,
    })
}

/// Random-number stream of one training stage, derived from the model seed.
pub fn stage_rng(cfg: &ExperimentConfig, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.model);
    rng.set_stream(stage);
    rng
}

pub const BASELINE_STREAM: u64 = 1;
pub const FINETUNE_STREAM: u64 = 2;
pub const SCRATCH_STREAM: u64 = 3;

pub fn run_baseline(
    cfg: &ExperimentConfig,
    data: &Datasets,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Model> {
    train_baseline(
        &cfg.model,
        &data.triggers,
        &cfg.loss.weights(),
        &cfg.train,
        &cfg.schedule,
        &mut stage_rng(cfg, BASELINE_STREAM),
        log,
    )
}

pub fn run_finetune(
    cfg: &ExperimentConfig,
    base: &Model,
    regime: &TrainRegime,
    data: &Datasets,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Model> {
    finetune(
        base,
        regime,
        &data.speakers,
        &data.triggers,
        &cfg.batch,
        &cfg.loss.weights(),
        &cfg.train,
        &cfg.schedule,
        &mut stage_rng(cfg, FINETUNE_STREAM),
        log,
    )
}

/// Decoder fine-tuning regime configured by `cfg`.
pub fn finetune_regime(cfg: &ExperimentConfig) -> TrainRegime {
    let mut r = TrainRegime::finetune(&cfg.model);
    r.strict_pairs = cfg.loss.strict_pairs;
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Random,
    Pretrained,
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub init: Init,
    pub regime: TrainRegime,
}

impl AblationVariant {
    /// Eight variants: training from scratch with and without the phonetic
    /// loss, decoder-only fine-tuning at the top and penultimate taps with
    /// decoder losses removed in turn, and fine-tuning with the encoder.
    pub fn table(cfg: &ModelConfig, strict_pairs: bool) -> Vec<AblationVariant> {
        let top = cfg.enc_blocks;
        let tap = cfg.tap_layer;
        let set = |phone, spkr, metric| LossSet {
            phone,
            phrase: true,
            spkr,
            metric,
        };
        let row = |name, init, frozen: bool, tap_layer, losses| AblationVariant {
            name,
            init,
            regime: TrainRegime {
                stage: Stage::Finetune,
                frozen: if frozen {
                    vec![ParamGroup::Encoder]
                } else {
                    Vec::new()
                },
                tap_layer,
                losses,
                strict_pairs,
            },
        };
        vec![
            row(
                "scratch_all_top",
                Init::Random,
                false,
                top,
                set(true, true, true),
            ),
            row(
                "scratch_no_phone_top",
                Init::Random,
                false,
                top,
                set(false, true, true),
            ),
            row(
                "pretrained_fixed_top",
                Init::Pretrained,
                true,
                top,
                set(false, true, true),
            ),
            row(
                "pretrained_fixed_tap",
                Init::Pretrained,
                true,
                tap,
                set(false, true, true),
            ),
            row(
                "pretrained_fixed_tap_no_spkr",
                Init::Pretrained,
                true,
                tap,
                set(false, false, true),
            ),
            row(
                "pretrained_fixed_tap_no_metric",
                Init::Pretrained,
                true,
                tap,
                set(false, true, false),
            ),
            row(
                "pretrained_fixed_tap_phrase_only",
                Init::Pretrained,
                true,
                tap,
                set(false, false, false),
            ),
            row(
                "pretrained_finetuned_tap",
                Init::Pretrained,
                false,
                tap,
                set(true, true, true),
            ),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variant: AblationVariant,
    pub ctc_frr: f64,
    pub metric_frr: f64,
    pub model: Model,
}

/// Trains and evaluates one ablation variant. `base` is the pretrained
/// baseline used by the pretrained variants.
pub fn run_variant(
    cfg: &ExperimentConfig,
    data: &Datasets,
    base: &Model,
    variant: &AblationVariant,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<AblationResult> {
    let start = match variant.init {
        Init::Pretrained => base.clone(),
        Init::Random => Model::new(cfg.model, &mut stage_rng(cfg, SCRATCH_STREAM))?,
    };
    let model = run_finetune(cfg, &start, &variant.regime, data, log)?;
    let ev = evaluate(&model, data, cfg)?;
    let frr = |k| {
        ev.report
            .scorer(k)
            .map(|s| s.mean_frr())
            .expect("scorer evaluated")
    };
    Ok(AblationResult {
        variant: variant.clone(),
        ctc_frr: frr(ScoreKind::Ctc),
        metric_frr: frr(ScoreKind::Metric),
        model,
    })
}
