//! DET curves, FRR at a false-accept operating point, and the repeated
//! enrollment protocol.

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    fit_calibration, score_trial, AnchorEmbedding, Calibration, FusionWeight, ScoreCalibration,
    TrialScore, UtteranceScore,
};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub score: f64,
    pub label: Label,
    /// Audio duration in hours; only negatives contribute to FA/hr.
    pub duration_hours: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub frr: f64,
    pub fa_per_hr: f64,
}

/// Operating points at every distinct score, thresholds increasing.
/// A trial is accepted when its score is at least the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

impl DetCurve {
    pub const TSV_HEADER: &'static str = "threshold\tfrr\tfa_per_hr";

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::TSV_HEADER);
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!(
                "{:e}\t{:e}\t{:e}\n",
                p.threshold, p.frr, p.fa_per_hr
            ));
        }
        out
    }

    /// Thresholds strictly increasing, FRR non-decreasing, FA/hr non-increasing.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| {
            w[0].threshold < w[1].threshold
                && w[0].frr <= w[1].frr
                && w[0].fa_per_hr >= w[1].fa_per_hr
        })
    }
}

pub fn det_curve(positives: &[f64], negatives: &[f64], negative_hours: f64) -> Result<DetCurve> {
    if positives.is_empty() {
        return Err(Error::Empty("positive scores"));
    }
    if negatives.is_empty() {
        return Err(Error::Empty("negative scores"));
    }
    if !(negative_hours > 0.0) || !negative_hours.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "negative duration must be positive, got {negative_hours} h"
        )));
    }
    if positives.iter().chain(negatives).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (np, nn) = (pos.len() as f64, neg.len());
    let (mut below_pos, mut below_neg) = (0usize, 0usize);
    let points = thresholds
        .into_iter()
        .map(|t| {
            while below_pos < pos.len() && pos[below_pos] < t {
                below_pos += 1;
            }
            while below_neg < nn && neg[below_neg] < t {
                below_neg += 1;
            }
            DetPoint {
                threshold: t,
                frr: below_pos as f64 / np,
                fa_per_hr: (nn - below_neg) as f64 / negative_hours,
            }
        })
        .collect();
    Ok(DetCurve { points })
}

pub fn det_from_trials(trials: &[Trial]) -> Result<DetCurve> {
    let pos: Vec<f64> = trials
        .iter()
        .filter(|t| t.label == Label::Positive)
        .map(|t| t.score)
        .collect();
    let negs: Vec<&Trial> = trials
        .iter()
        .filter(|t| t.label == Label::Negative)
        .collect();
    let hours = negs.iter().map(|t| t.duration_hours).sum();
    let neg: Vec<f64> = negs.iter().map(|t| t.score).collect();
    det_curve(&pos, &neg, hours)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub frr: f64,
    pub threshold: f64,
    pub fa_per_hr: f64,
    /// False when no threshold reaches the target; the point is then the
    /// highest threshold on the curve.
    pub met: bool,
}

/// FRR at the smallest threshold whose FA/hr does not exceed `target`.
pub fn frr_at_fa(curve: &DetCurve, target_fa_per_hr: f64) -> Result<OperatingPoint> {
    let last = curve.points.last().ok_or(Error::Empty("DET curve"))?;
    let (p, met) = match curve
        .points
        .iter()
        .find(|p| p.fa_per_hr <= target_fa_per_hr)
    {
        Some(p) => (p, true),
        None => (last, false),
    };
    Ok(OperatingPoint {
        frr: p.frr,
        threshold: p.threshold,
        fa_per_hr: p.fa_per_hr,
        met,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub enroll_per_speaker: usize,
    pub runs: usize,
    pub operating_fa_per_hr: f64,
    /// Taken from the experiment's `[seeds]` section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            enroll_per_speaker: 5,
            runs: 5,
            operating_fa_per_hr: 0.01,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enroll_per_speaker == 0 || self.runs == 0 {
            return Err(Error::Config(
                "protocol needs at least one enrollment utterance and one run".into(),
            ));
        }
        if !(self.operating_fa_per_hr >= 0.0) {
            return Err(Error::Config("operating FA/hr must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which score a DET curve is computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreKind {
    Ctc,
    Metric,
    Fused(FusionWeight),
}

impl ScoreKind {
    /// Keyword score, calibrated metric score, then one fused score per weight.
    pub fn standard_set(mus: &[FusionWeight]) -> Vec<ScoreKind> {
        let mut kinds = vec![ScoreKind::Ctc, ScoreKind::Metric];
        kinds.extend(mus.iter().map(|m| ScoreKind::Fused(*m)));
        kinds
    }

    /// File-name friendly label.
    pub fn slug(&self) -> String {
        match self {
            ScoreKind::Ctc => "ctc".into(),
            ScoreKind::Metric => "metric".into(),
            ScoreKind::Fused(m) => format!("fused_mu{}", m.mu()),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreKind::Ctc => write!(f, "S_ctc"),
            ScoreKind::Metric => write!(f, "S_metric"),
            ScoreKind::Fused(m) => write!(f, "S_ctc+S_metric (mu={})", m.mu()),
        }
    }
}

/// Precomputed model outputs for an evaluation or validation population.
#[derive(Debug, Clone)]
pub struct ScoredCorpus {
    /// Keyword utterances per target speaker, sorted by speaker id.
    pub speakers: Vec<(u64, Vec<UtteranceScore>)>,
    /// Keyword-free (or confusable) trials with their durations in hours.
    pub negatives: Vec<(UtteranceScore, f64)>,
}

impl ScoredCorpus {
    pub fn negative_hours(&self) -> f64 {
        self.negatives.iter().map(|(_, h)| h).sum()
    }

    fn check(&self, enroll: usize) -> Result<()> {
        if self.speakers.is_empty() {
            return Err(Error::Empty("target speakers"));
        }
        if self.negatives.is_empty() {
            return Err(Error::Empty("negative trials"));
        }
        if let Some((spk, utts)) = self.speakers.iter().find(|(_, u)| u.len() <= enroll) {
            return Err(Error::InsufficientData(format!(
                "speaker {spk} has {} keyword utterances, need more than {enroll}",
                utts.len()
            )));
        }
        Ok(())
    }
}

/// Trial scores for one enrollment draw, pooled across target speakers.
/// Every negative is scored against every speaker's anchor.
#[derive(Debug, Clone, Default)]
pub struct RunTrials {
    pub positives: Vec<[f64; 3]>,
    pub negatives: Vec<[f64; 3]>,
    pub negative_hours: f64,
}

const CTC: usize = 0;
const RAW: usize = 1;
const METRIC: usize = 2;

impl RunTrials {
    fn column(rows: &[[f64; 3]], kind: ScoreKind) -> Vec<f64> {
        rows.iter()
            .map(|r| match kind {
                ScoreKind::Ctc => r[CTC],
                ScoreKind::Metric => r[METRIC],
                ScoreKind::Fused(mu) => crate::inference::fuse(r[CTC], r[METRIC], mu),
            })
            .collect()
    }

    pub fn det(&self, kind: ScoreKind) -> Result<DetCurve> {
        det_curve(
            &Self::column(&self.positives, kind),
            &Self::column(&self.negatives, kind),
            self.negative_hours,
        )
    }

    pub fn raw_metric_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.positives.iter().chain(&self.negatives).map(|r| r[RAW])
    }
}

/// Picks enrollment utterances for every speaker and returns, per speaker,
/// the enrollment indices in increasing order.
fn draw_enrollment(corpus: &ScoredCorpus, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    corpus
        .speakers
        .iter()
        .map(|(_, utts)| {
            let mut picks = index::sample(rng, utts.len(), k).into_vec();
            picks.sort_unstable();
            picks
        })
        .collect()
}

/// Scores every non-enrollment positive and every negative against each
/// speaker's anchor built from `enrollment`.
pub fn score_run(
    model: &Model,
    corpus: &ScoredCorpus,
    enrollment: &[Vec<usize>],
    cal: &ScoreCalibration,
) -> Result<RunTrials> {
    let mut trials = RunTrials::default();
    let row = |anchor: &AnchorEmbedding, u: &UtteranceScore| -> Result<[f64; 3]> {
        let t = score_trial(model, anchor, u, cal, FusionWeight::default())?;
        Ok([t.s_ctc, t.raw_metric, t.s_metric])
    };
    for ((_, utts), picks) in corpus.speakers.iter().zip(enrollment) {
        let embeddings: Vec<_> = picks.iter().map(|&i| &utts[i].embedding).collect();
        let anchor = AnchorEmbedding::from_embeddings(&embeddings)?;
        for (i, u) in utts.iter().enumerate() {
            if picks.binary_search(&i).is_err() {
                trials.positives.push(row(&anchor, u)?);
            }
        }
        for (u, _) in &corpus.negatives {
            trials.negatives.push(row(&anchor, u)?);
        }
        trials.negative_hours += corpus.negative_hours();
    }
    Ok(trials)
}

/// Fits metric (and optionally keyword-score) standardization on a
/// validation population using one enrollment draw.
pub fn fit_score_calibration(
    model: &Model,
    validation: &ScoredCorpus,
    enroll_per_speaker: usize,
    standardize_ctc: bool,
    seed: u64,
) -> Result<ScoreCalibration> {
    validation.check(enroll_per_speaker)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enrollment = draw_enrollment(validation, enroll_per_speaker, &mut rng);
    let identity = ScoreCalibration {
        metric: Calibration::identity(),
        ctc: None,
    };
    let trials = score_run(model, validation, &enrollment, &identity)?;
    let metric = fit_calibration(&trials.raw_metric_scores().collect::<Vec<_>>())?;
    let ctc = if standardize_ctc {
        let ctc_scores: Vec<f64> = validation
            .speakers
            .iter()
            .flat_map(|(_, u)| u.iter())
            .chain(validation.negatives.iter().map(|(u, _)| u))
            .map(|u| u.s_ctc)
            .collect();
        Some(fit_calibration(&ctc_scores)?)
    } else {
        None
    };
    Ok(ScoreCalibration { metric, ctc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerResult {
    pub kind: ScoreKind,
    pub per_run: Vec<OperatingPoint>,
    /// DET curve over the trials of all runs together.
    pub pooled: DetCurve,
}

impl ScorerResult {
    pub fn mean_frr(&self) -> f64 {
        self.per_run.iter().map(|p| p.frr).sum::<f64>() / self.per_run.len() as f64
    }

    pub fn all_met(&self) -> bool {
        self.per_run.iter().all(|p| p.met)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolReport {
    pub config: ProtocolConfig,
    pub speakers: usize,
    pub positives_per_run: usize,
    pub negatives_per_run: usize,
    pub negative_hours_per_run: f64,
    pub scorers: Vec<ScorerResult>,
}

impl ProtocolReport {
    pub fn scorer(&self, kind: ScoreKind) -> Option<&ScorerResult> {
        self.scorers.iter().find(|s| s.kind == kind)
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "enroll_per_speaker={} runs={} operating_fa_per_hr={} seed={}\n\
             speakers={} positives_per_run={} negatives_per_run={} negative_hours_per_run={:.4}\n\n",
            c.enroll_per_speaker,
            c.runs,
            c.operating_fa_per_hr,
            c.seed,
            self.speakers,
            self.positives_per_run,
            self.negatives_per_run,
            self.negative_hours_per_run
        );
        out.push_str("scorer\tmean_frr\tper_run_frr\ttarget_met\n");
        for s in &self.scorers {
            let runs: Vec<String> = s.per_run.iter().map(|p| format!("{:.6}", p.frr)).collect();
            out.push_str(&format!(
                "{}\t{:.6}\t{}\t{}\n",
                s.kind,
                s.mean_frr(),
                runs.join(","),
                s.all_met()
            ));
        }
        out
    }
}

/// Repeats enrollment `runs` times with fresh utterance draws; negatives are
/// shared by all runs. Deterministic given `cfg.seed`.
pub fn run_protocol(
    model: &Model,
    cal: &ScoreCalibration,
    corpus: &ScoredCorpus,
    kinds: &[ScoreKind],
    cfg: &ProtocolConfig,
) -> Result<ProtocolReport> {
    cfg.validate()?;
    corpus.check(cfg.enroll_per_speaker)?;
    if kinds.is_empty() {
        return Err(Error::Empty("scorer list"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pooled = RunTrials::default();
    let mut per_run: Vec<Vec<OperatingPoint>> = vec![Vec::with_capacity(cfg.runs); kinds.len()];
    let mut sizes = (0, 0, 0.0);
    for _ in 0..cfg.runs {
        let enrollment = draw_enrollment(corpus, cfg.enroll_per_speaker, &mut rng);
        let trials = score_run(model, corpus, &enrollment, cal)?;
        for (k, kind) in kinds.iter().enumerate() {
            per_run[k].push(frr_at_fa(&trials.det(*kind)?, cfg.operating_fa_per_hr)?);
        }
        sizes = (
            trials.positives.len(),
            trials.negatives.len(),
            trials.negative_hours,
        );
        pooled.positives.extend(trials.positives);
        pooled.negatives.extend(trials.negatives);
        pooled.negative_hours += trials.negative_hours;
    }
    let scorers = kinds
        .iter()
        .zip(per_run)
        .map(|(kind, runs)| {
            Ok(ScorerResult {
                kind: *kind,
                per_run: runs,
                pooled: pooled.det(*kind)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolReport {
        config: *cfg,
        speakers: corpus.speakers.len(),
        positives_per_run: sizes.0,
        negatives_per_run: sizes.1,
        negative_hours_per_run: sizes.2,
        scorers,
    })
}

/// Anchors of the protocol's first enrollment draw.
pub type Anchors = Vec<(u64, AnchorEmbedding)>;

/// Anchors and every trial of the protocol's first enrollment draw, each trial
/// tagged with the anchor's speaker. Uses the same draw as [`run_protocol`].
pub fn first_run_scores(
    model: &Model,
    cal: &ScoreCalibration,
    corpus: &ScoredCorpus,
    cfg: &ProtocolConfig,
    mu: FusionWeight,
) -> Result<(Anchors, Vec<(u64, TrialScore)>)> {
    cfg.validate()?;
    corpus.check(cfg.enroll_per_speaker)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enrollment = draw_enrollment(corpus, cfg.enroll_per_speaker, &mut rng);
    let mut anchors = Vec::new();
    let mut trials = Vec::new();
    for ((spk, utts), picks) in corpus.speakers.iter().zip(&enrollment) {
        let embeddings: Vec<_> = picks.iter().map(|&i| &utts[i].embedding).collect();
        let anchor = AnchorEmbedding::from_embeddings(&embeddings)?;
        let held_out = utts
            .iter()
            .enumerate()
            .filter(|(i, _)| picks.binary_search(i).is_err())
            .map(|(_, u)| u);
        for u in held_out.chain(corpus.negatives.iter().map(|(u, _)| u)) {
            trials.push((*spk, score_trial(model, &anchor, u, cal, mu)?));
        }
        anchors.push((*spk, anchor));
    }
    Ok((anchors, trials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, UtteranceEmbedding};
    use ndarray::Array1;

    fn point_at(curve: &DetCurve, t: f64) -> DetPoint {
        *curve.points.iter().find(|p| p.threshold == t).unwrap()
    }

    #[test]
    fn hand_counted_curve() {
        let c = det_curve(&[0.9, 0.8, 0.2], &[0.1, 0.7], 1.0).unwrap();
        assert_eq!(c.points.len(), 5);
        assert!(c.is_monotone());
        // 0.75 sits between 0.7 and 0.8, so it behaves like threshold 0.8.
        let p = point_at(&c, 0.8);
        assert_eq!(p.frr, 1.0 / 3.0);
        assert_eq!(p.fa_per_hr, 0.0);
        let low = c.points[0];
        assert_eq!((low.threshold, low.frr, low.fa_per_hr), (0.1, 0.0, 2.0));
        let op = frr_at_fa(&c, 0.0).unwrap();
        assert!(op.met);
        assert_eq!(op.frr, 1.0 / 3.0);
        assert_eq!(op.threshold, 0.8);
    }

    #[test]
    fn generous_target_takes_lowest_threshold() {
        let c = det_curve(&[0.9, 0.8, 0.2], &[0.1, 0.7], 1.0).unwrap();
        let op = frr_at_fa(&c, 10.0).unwrap();
        assert_eq!(op.threshold, 0.1);
        assert_eq!(op.frr, 0.0);
    }

    #[test]
    fn unmet_target_is_flagged() {
        let c = det_curve(&[0.1, 0.2], &[0.5, 0.9], 2.0).unwrap();
        let op = frr_at_fa(&c, 0.0).unwrap();
        assert!(!op.met);
        assert_eq!(op.threshold, 0.9);
        assert_eq!(op.frr, 1.0);
        assert_eq!(op.fa_per_hr, 0.5);
    }

    #[test]
    fn ties_accept() {
        let c = det_curve(&[0.5], &[0.5], 1.0).unwrap();
        assert_eq!(c.points.len(), 1);
        assert_eq!(c.points[0].frr, 0.0);
        assert_eq!(c.points[0].fa_per_hr, 1.0);
    }

    #[test]
    fn curve_errors() {
        assert!(det_curve(&[], &[0.1], 1.0).is_err());
        assert!(det_curve(&[0.1], &[], 1.0).is_err());
        assert!(det_curve(&[0.1], &[0.2], 0.0).is_err());
        assert!(det_curve(&[f64::NAN], &[0.2], 1.0).is_err());
    }

    #[test]
    fn trials_helper_sums_durations() {
        let trials = [
            Trial {
                score: 0.9,
                label: Label::Positive,
                duration_hours: 0.0,
            },
            Trial {
                score: 0.3,
                label: Label::Negative,
                duration_hours: 0.25,
            },
            Trial {
                score: 0.95,
                label: Label::Negative,
                duration_hours: 0.25,
            },
        ];
        let c = det_from_trials(&trials).unwrap();
        assert_eq!(point_at(&c, 0.9).fa_per_hr, 2.0);
    }

    fn synthetic_corpus(separable: bool) -> ScoredCorpus {
        // Speaker s owns direction e_s; negatives point along the last axis.
        let dim = 8;
        let axis = |i: usize, w: f64| {
            let mut v = Array1::zeros(dim);
            v[i] = 1.0;
            v[dim - 1] += w;
            UtteranceEmbedding(v)
        };
        let speakers = (0..3u64)
            .map(|s| {
                let utts = (0..8)
                    .map(|j| UtteranceScore {
                        id: format!("s{s}_{j}"),
                        s_ctc: if separable { 2.0 } else { -(j as f64) },
                        embedding: axis(s as usize, 0.01 * j as f64),
                    })
                    .collect();
                (s, utts)
            })
            .collect();
        let negatives = (0..5)
            .map(|j| {
                (
                    UtteranceScore {
                        id: format!("n{j}"),
                        s_ctc: -1.0 - j as f64 * 0.1,
                        embedding: axis(dim - 1, 0.0),
                    },
                    0.5,
                )
            })
            .collect();
        ScoredCorpus {
            speakers,
            negatives,
        }
    }

    fn small_model() -> Model {
        use rand::SeedableRng;
        let cfg = ModelConfig {
            enc_blocks: 1,
            dec_blocks: 1,
            d_model: 4,
            heads: 1,
            ffn_dim: 4,
            query_count: 2,
            phoneme_classes: 2,
            speaker_classes: 2,
            tap_layer: 1,
            input_dim: 4,
            speaker_dropout: 0.0,
        };
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn separable_scores_give_zero_frr() {
        let model = small_model();
        let corpus = synthetic_corpus(true);
        let cal = ScoreCalibration {
            metric: Calibration::identity(),
            ctc: None,
        };
        let cfg = ProtocolConfig {
            runs: 1,
            ..Default::default()
        };
        let kinds = ScoreKind::standard_set(&[FusionWeight::new(0.5).unwrap()]);
        let report = run_protocol(&model, &cal, &corpus, &kinds, &cfg).unwrap();
        assert_eq!(report.positives_per_run, 3 * 3);
        assert_eq!(report.negatives_per_run, 3 * 5);
        assert_eq!(report.negative_hours_per_run, 7.5);
        for s in &report.scorers {
            assert_eq!(s.per_run[0].frr, 0.0, "{}", s.kind);
            assert!(s.all_met());
            assert!(s.pooled.is_monotone());
        }
    }

    #[test]
    fn protocol_is_seeded_and_mean_is_arithmetic() {
        let model = small_model();
        let corpus = synthetic_corpus(false);
        let cal = ScoreCalibration {
            metric: Calibration::identity(),
            ctc: None,
        };
        let cfg = ProtocolConfig {
            seed: 17,
            ..Default::default()
        };
        let kinds = [ScoreKind::Ctc];
        let a = run_protocol(&model, &cal, &corpus, &kinds, &cfg).unwrap();
        let b = run_protocol(&model, &cal, &corpus, &kinds, &cfg).unwrap();
        assert_eq!(a, b);
        let runs = &a.scorers[0].per_run;
        assert_eq!(runs.len(), 5);
        let mean = runs.iter().map(|p| p.frr).sum::<f64>() / 5.0;
        assert_eq!(a.scorers[0].mean_frr(), mean);
        assert!(
            runs.iter().any(|p| p.frr != runs[0].frr),
            "runs differ in enrollment"
        );
        assert!(a.summary().contains("S_ctc"));
    }

    #[test]
    fn protocol_rejects_small_speakers() {
        let model = small_model();
        let mut corpus = synthetic_corpus(true);
        corpus.speakers[1].1.truncate(5);
        let cal = ScoreCalibration {
            metric: Calibration::identity(),
            ctc: None,
        };
        let err = run_protocol(
            &model,
            &cal,
            &corpus,
            &[ScoreKind::Ctc],
            &ProtocolConfig::default(),
        );
        assert!(matches!(err, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn enrollment_excluded_from_positives() {
        let model = small_model();
        let corpus = synthetic_corpus(true);
        let cal = ScoreCalibration {
            metric: Calibration::identity(),
            ctc: None,
        };
        let enrollment = vec![vec![0, 1, 2, 3, 4]; 3];
        let trials = score_run(&model, &corpus, &enrollment, &cal).unwrap();
        assert_eq!(trials.positives.len(), 9);
    }

    #[test]
    fn validation_calibration_standardizes_its_own_trials() {
        let model = small_model();
        let corpus = synthetic_corpus(false);
        let cal = fit_score_calibration(&model, &corpus, 5, true, 3).unwrap();
        assert!(cal.ctc.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enrollment = draw_enrollment(&corpus, 5, &mut rng);
        let trials = score_run(&model, &corpus, &enrollment, &cal).unwrap();
        let z: Vec<f64> = trials
            .positives
            .iter()
            .chain(&trials.negatives)
            .map(|r| r[METRIC])
            .collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 1e-12);
    }
}
