//! Enrollment, speaker-adapted scoring, calibration and score fusion.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FrontEnd;
use crate::losses::{ctc_keyword_score, similarity};
use crate::model::{Model, UtteranceEmbedding};
use crate::nn::Vector;
use crate::sampler::Utterance;

/// Mean decoder embedding of a speaker's enrollment utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorEmbedding {
    pub values: Vector,
    pub enrolled_count: usize,
}

impl AnchorEmbedding {
    pub fn from_embeddings(embeddings: &[&UtteranceEmbedding]) -> Result<Self> {
        let first = embeddings.first().ok_or(Error::Empty("enrollment set"))?;
        let mut sum = Array1::zeros(first.len());
        for e in embeddings {
            if e.len() != sum.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} dims", sum.len()),
                    actual: format!("{} dims", e.len()),
                });
            }
            sum += &e.0;
        }
        let values = sum / embeddings.len() as f64;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            values,
            enrolled_count: embeddings.len(),
        })
    }
}

/// Per-utterance model outputs needed by every scorer. Computing these once
/// lets enrollment resampling reuse them across protocol runs.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub s_ctc: f64,
    pub embedding: UtteranceEmbedding,
}

/// Evaluation-mode scorer bound to a model and the keyword phoneme string.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub front: FrontEnd,
    pub keyword: &'a [usize],
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, keyword: &'a [usize]) -> Self {
        Self {
            model,
            front: FrontEnd::default(),
            keyword,
        }
    }

    pub fn analyze(&self, u: &Utterance) -> Result<UtteranceScore> {
        let x = self.front.apply(&u.features)?;
        let (log_posteriors, embedding) = self.model.analyze(&x)?;
        Ok(UtteranceScore {
            id: u.id.clone(),
            s_ctc: ctc_keyword_score(&log_posteriors, self.keyword)?,
            embedding,
        })
    }

    pub fn embed(&self, u: &Utterance) -> Result<UtteranceEmbedding> {
        self.model.embed(&self.front.apply(&u.features)?)
    }

    pub fn enroll(&self, utterances: &[&Utterance]) -> Result<AnchorEmbedding> {
        enroll(self, utterances)
    }

    pub fn metric_score(&self, anchor: &AnchorEmbedding, test: &Utterance) -> Result<f64> {
        raw_metric(self.model, anchor, &self.embed(test)?)
    }
}

/// Anchor from keyword-positive enrollment utterances.
pub fn enroll(scorer: &Scorer<'_>, utterances: &[&Utterance]) -> Result<AnchorEmbedding> {
    if utterances.is_empty() {
        return Err(Error::Empty("enrollment set"));
    }
    if let Some(u) = utterances.iter().find(|u| !u.phrase) {
        return Err(Error::InvalidArgument(format!(
            "{}: enrollment utterances must contain the keyword",
            u.id
        )));
    }
    let embeddings = utterances
        .iter()
        .map(|u| scorer.embed(u))
        .collect::<Result<Vec<_>>>()?;
    AnchorEmbedding::from_embeddings(&embeddings.iter().collect::<Vec<_>>())
}

/// Raw similarity between an anchor and a test embedding under the model's
/// learned scale and offset.
pub fn raw_metric(
    model: &Model,
    anchor: &AnchorEmbedding,
    test: &UtteranceEmbedding,
) -> Result<f64> {
    similarity(
        &test.0,
        &anchor.values,
        model.params.metric.a(),
        model.params.metric.b(),
    )
}

/// Global standardization of raw scores, fitted on a validation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mean: f64,
    pub std: f64,
}

impl Calibration {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "calibration needs finite mean and positive std, got ({mean}, {std})"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

pub fn fit_calibration(scores: &[f64]) -> Result<Calibration> {
    if scores.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::ZeroSpread);
    }
    Calibration::new(mean, var.sqrt())
}

pub fn calibrate(raw: f64, cal: &Calibration) -> Result<f64> {
    if !(cal.std > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "calibration std must be positive, got {}",
            cal.std
        )));
    }
    Ok((raw - cal.mean) / cal.std)
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub fn new(mu: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&mu) {
            Ok(Self(mu))
        } else {
            Err(Error::InvalidArgument(format!(
                "fusion weight {mu} outside [0, 1]"
            )))
        }
    }

    pub fn mu(self) -> f64 {
        self.0
    }
}

impl Default for FusionWeight {
    fn default() -> Self {
        Self(0.95)
    }
}

impl TryFrom<f64> for FusionWeight {
    type Error = Error;

    fn try_from(mu: f64) -> Result<Self> {
        Self::new(mu)
    }
}

impl From<FusionWeight> for f64 {
    fn from(w: FusionWeight) -> f64 {
        w.0
    }
}

pub fn fuse(s_ctc: f64, s_metric: f64, mu: FusionWeight) -> f64 {
    let m = mu.0;
    if m == 0.0 {
        s_ctc
    } else if m == 1.0 {
        s_metric
    } else {
        (1.0 - m) * s_ctc + m * s_metric
    }
}

/// Calibration state shared by every trial of an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCalibration {
    pub metric: Calibration,
    /// Applied to the keyword score only when present.
    pub ctc: Option<Calibration>,
}

/// One scored trial as written to the score log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub id: String,
    pub s_ctc: f64,
    pub raw_metric: f64,
    pub s_metric: f64,
    pub s_final: f64,
}

impl TrialScore {
    pub const TSV_HEADER: &'static str = "id\ts_ctc\traw_metric\ts_metric\ts_final";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}",
            self.id, self.s_ctc, self.raw_metric, self.s_metric, self.s_final
        )
    }
}

/// Full scoring of one precomputed utterance against an anchor.
pub fn score_trial(
    model: &Model,
    anchor: &AnchorEmbedding,
    utt: &UtteranceScore,
    cal: &ScoreCalibration,
    mu: FusionWeight,
) -> Result<TrialScore> {
    let raw = raw_metric(model, anchor, &utt.embedding)?;
    let s_metric = calibrate(raw, &cal.metric)?;
    let s_ctc = match &cal.ctc {
        Some(c) => calibrate(utt.s_ctc, c)?,
        None => utt.s_ctc,
    };
    Ok(TrialScore {
        id: utt.id.clone(),
        s_ctc,
        raw_metric: raw,
        s_metric,
        s_final: fuse(s_ctc, s_metric, mu),
    })
}
