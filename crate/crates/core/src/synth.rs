//! Deterministic synthetic corpus with phoneme content and speaker identity.
//!
//! Every phoneme has a smooth prototype trajectory in feature space. A
//! speaker contributes a persistent additive offset and a spectral tilt,
//! and every frame gets white noise. Selected phonemes have close
//! "confusable" twins of the keyword phonemes, which makes keyword-like
//! false triggers.

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::CorpusEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub phoneme_count: usize,
    pub keyword: Vec<usize>,
    pub feature_dim: usize,
    /// Inclusive range of frames per phoneme.
    pub frames_per_phoneme: (usize, usize),
    pub train_speakers: usize,
    pub utts_per_speaker: usize,
    pub eval_speakers: usize,
    pub eval_utts_per_speaker: usize,
    pub validation_speakers: usize,
    pub trigger_utterances: usize,
    /// Distinct talkers behind the voice-trigger data.
    pub trigger_talkers: usize,
    pub trigger_positive_fraction: f64,
    pub negatives: usize,
    pub validation_negatives: usize,
    pub negative_duration_s: f64,
    /// Share of keyword-free trials that are one-phoneme variants of the keyword.
    pub confusable_fraction: f64,
    /// Share of evaluation negatives spoken by the evaluation speakers.
    pub negatives_from_targets: f64,
    pub speaker_offset_scale: f64,
    pub noise_scale: f64,
    /// Per-utterance channel offset, constant over the utterance's frames.
    pub session_scale: f64,
    /// Distance of a confusable twin from its keyword phoneme, relative to
    /// the typical distance between unrelated phonemes.
    pub twin_distance: f64,
    /// Taken from the experiment's `[seeds]` section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            phoneme_count: 12,
            keyword: vec![0, 1, 2, 3],
            feature_dim: 40,
            frames_per_phoneme: (6, 10),
            train_speakers: 150,
            utts_per_speaker: 20,
            eval_speakers: 8,
            eval_utts_per_speaker: 30,
            validation_speakers: 6,
            trigger_utterances: 800,
            trigger_talkers: 80,
            trigger_positive_fraction: 0.5,
            negatives: 1000,
            validation_negatives: 100,
            negative_duration_s: 10.0,
            confusable_fraction: 0.5,
            negatives_from_targets: 0.0,
            speaker_offset_scale: 1.0,
            noise_scale: 0.6,
            session_scale: 0.4,
            twin_distance: 0.6,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.keyword.is_empty() {
            return fail("keyword must not be empty");
        }
        if self.keyword.iter().any(|&p| p >= self.phoneme_count) {
            return fail("keyword phonemes must be below phoneme_count");
        }
        if self.phoneme_count < self.keyword.len() * 2 + 1 {
            return fail("phoneme_count must leave room for confusable twins and fillers");
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive");
        }
        let (lo, hi) = self.frames_per_phoneme;
        if lo == 0 || lo > hi {
            return fail("frames_per_phoneme must be a non-empty positive range");
        }
        if self.train_speakers == 0 || self.utts_per_speaker == 0 {
            return fail("speaker-ID data must be non-empty");
        }
        if self.eval_speakers == 0 || self.eval_utts_per_speaker == 0 {
            return fail("evaluation data must be non-empty");
        }
        if self.trigger_utterances == 0 || self.trigger_talkers == 0 {
            return fail("voice-trigger data must be non-empty");
        }
        if self.negatives == 0 || !(self.negative_duration_s > 0.0) {
            return fail("negatives need a positive count and duration");
        }
        for (name, v) in [
            ("trigger_positive_fraction", self.trigger_positive_fraction),
            ("confusable_fraction", self.confusable_fraction),
            ("negatives_from_targets", self.negatives_from_targets),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        if [
            self.speaker_offset_scale,
            self.noise_scale,
            self.session_scale,
            self.twin_distance,
        ]
        .iter()
        .any(|v| !(*v >= 0.0))
        {
            return fail("scales must be non-negative");
        }
        Ok(())
    }

    /// Confusable twin of each keyword phoneme (same order as the keyword).
    pub fn twins(&self) -> Vec<usize> {
        self.non_keyword_phonemes()
            .into_iter()
            .take(self.keyword.len())
            .collect()
    }

    pub fn non_keyword_phonemes(&self) -> Vec<usize> {
        (0..self.phoneme_count)
            .filter(|p| !self.keyword.contains(p))
            .collect()
    }
}

/// Speaker id ranges for the five populations.
pub mod speaker_base {
    pub const TRAIN: u64 = 1_000;
    pub const EVAL: u64 = 2_000;
    pub const VALIDATION: u64 = 3_000;
    pub const TRIGGER: u64 = 4_000;
    pub const NEGATIVE: u64 = 5_000;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    /// Phoneme- and phrase-labelled data from anonymous talkers.
    pub voice_trigger: Vec<CorpusEntry>,
    /// Keyword followed by a sentence, speaker-labelled, no phoneme labels.
    pub speaker_id: Vec<CorpusEntry>,
    /// Keyword segments of held-out target speakers.
    pub eval: Vec<CorpusEntry>,
    /// Keyword-free trials with nominal durations.
    pub negatives: Vec<CorpusEntry>,
    /// Calibration population: further held-out speakers plus negatives.
    pub validation: Vec<CorpusEntry>,
}

impl GeneratedCorpus {
    pub fn manifests(&self) -> [(&'static str, &[CorpusEntry]); 5] {
        [
            ("voice_trigger", &self.voice_trigger),
            ("speaker_id", &self.speaker_id),
            ("eval", &self.eval),
            ("negatives", &self.negatives),
            ("validation", &self.validation),
        ]
    }
}

/// Randomness streams, one per generated object, so that each object is
/// independent of generation order.
mod stream {
    pub const PROTOTYPES: u64 = 1;
    pub const SPEAKER: u64 = 2 << 32;
    pub const TRIGGER: u64 = 3 << 32;
    pub const SPEAKER_ID: u64 = 4 << 32;
    pub const EVAL: u64 = 5 << 32;
    pub const NEGATIVE: u64 = 6 << 32;
    pub const VALIDATION: u64 = 7 << 32;
    pub const VALIDATION_NEG: u64 = 8 << 32;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vec(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

/// Start and end points of each phoneme's linear trajectory plus a
/// mid-point bump, so frames within a phoneme change smoothly.
#[derive(Debug, Clone)]
pub struct Prototypes {
    start: Vec<Array1<f64>>,
    end: Vec<Array1<f64>>,
    bump: Vec<Array1<f64>>,
}

impl Prototypes {
    pub fn generate(spec: &SynthSpec) -> Self {
        let mut rng = rng_for(spec.seed, stream::PROTOTYPES);
        let d = spec.feature_dim;
        let mut start: Vec<_> = (0..spec.phoneme_count)
            .map(|_| normal_vec(d, &mut rng))
            .collect();
        let mut end: Vec<_> = (0..spec.phoneme_count)
            .map(|_| normal_vec(d, &mut rng))
            .collect();
        let mut bump: Vec<_> = (0..spec.phoneme_count)
            .map(|_| normal_vec(d, &mut rng) * 0.5)
            .collect();
        // Unrelated prototypes sit about sqrt(2d) apart; twins sit a fixed
        // fraction of that away from their keyword phoneme.
        let spread = spec.twin_distance / 2.0f64.sqrt();
        for (k, t) in spec.keyword.iter().zip(spec.twins()) {
            start[t] = &start[*k] + &(normal_vec(d, &mut rng) * spread);
            end[t] = &end[*k] + &(normal_vec(d, &mut rng) * spread);
            bump[t] = &bump[*k] + &(normal_vec(d, &mut rng) * spread * 0.5);
        }
        Self { start, end, bump }
    }

    /// Noise-free frame `i` of `n` for phoneme `p`.
    pub fn frame(&self, p: usize, i: usize, n: usize) -> Array1<f64> {
        let t = if n > 1 {
            i as f64 / (n - 1) as f64
        } else {
            0.5
        };
        let hump = (std::f64::consts::PI * t).sin();
        &self.start[p] * (1.0 - t) + &self.end[p] * t + &self.bump[p] * hump
    }

    /// Mean noise-free frame of a phoneme, used by the nearest-prototype
    /// sanity classifier.
    pub fn centroid(&self, p: usize, n: usize) -> Array1<f64> {
        let mut acc = Array1::zeros(self.start[p].len());
        for i in 0..n {
            acc += &self.frame(p, i, n);
        }
        acc / n as f64
    }
}

/// Persistent voice characteristics of one speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVoice {
    pub offset: Array1<f64>,
    /// Multiplicative gain per feature dimension, a linear ramp.
    pub tilt: Array1<f64>,
}

impl SpeakerVoice {
    pub fn generate(spec: &SynthSpec, speaker: u64) -> Self {
        let mut rng = rng_for(spec.seed, stream::SPEAKER + speaker);
        let d = spec.feature_dim;
        let offset = normal_vec(d, &mut rng) * spec.speaker_offset_scale;
        let slope: f64 = StandardNormal.sample(&mut rng);
        let slope = 0.3 * spec.speaker_offset_scale * slope;
        let tilt = Array1::from_shape_fn(d, |j| {
            let x = if d > 1 {
                j as f64 / (d - 1) as f64 - 0.5
            } else {
                0.0
            };
            1.0 + slope * x
        });
        Self { offset, tilt }
    }

    pub fn neutral(dim: usize) -> Self {
        Self {
            offset: Array1::zeros(dim),
            tilt: Array1::ones(dim),
        }
    }
}

/// Renders a phoneme string; returns frames and the frame count per phoneme.
pub fn render(
    spec: &SynthSpec,
    protos: &Prototypes,
    voice: &SpeakerVoice,
    phonemes: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Vec<usize>) {
    let (lo, hi) = spec.frames_per_phoneme;
    let lengths: Vec<usize> = phonemes.iter().map(|_| rng.random_range(lo..=hi)).collect();
    let total: usize = lengths.iter().sum();
    let session = normal_vec(spec.feature_dim, rng) * spec.session_scale;
    let mut frames = Array2::zeros((total, spec.feature_dim));
    let mut row = 0;
    for (&p, &n) in phonemes.iter().zip(&lengths) {
        for i in 0..n {
            let clean = protos.frame(p, i, n) * &voice.tilt + &voice.offset;
            let noise = normal_vec(spec.feature_dim, rng) * spec.noise_scale;
            frames.row_mut(row).assign(&(clean + noise + &session));
            row += 1;
        }
    }
    // Stored features are single precision; round now so that files
    // round-trip exactly.
    frames.mapv_inplace(|v| v as f32 as f64);
    (frames, lengths)
}

fn random_string(pool: &[usize], len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..len)
        .map(|_| *pool.choose(rng).expect("non-empty pool"))
        .collect()
}

/// Keyword with one position replaced by its confusable twin.
fn confusable(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let twins = spec.twins();
    let mut s = spec.keyword.clone();
    let pos = rng.random_range(0..s.len());
    s[pos] = twins[pos];
    s
}

/// Keyword-free phoneme string: a confusable variant or a random filler
/// string of keyword length.
fn keyword_free(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rng.random::<f64>() < spec.confusable_fraction {
        confusable(spec, rng)
    } else {
        let pool: Vec<usize> = (0..spec.phoneme_count).collect();
        loop {
            let s = random_string(&pool, spec.keyword.len(), rng);
            if s != spec.keyword {
                return s;
            }
        }
    }
}

struct Ctx<'a> {
    spec: &'a SynthSpec,
    protos: Prototypes,
}

impl Ctx<'_> {
    fn voice(&self, speaker: u64) -> SpeakerVoice {
        SpeakerVoice::generate(self.spec, speaker)
    }

    fn keyword_entry(&self, id: String, speaker: u64, rng: &mut ChaCha8Rng) -> CorpusEntry {
        let (frames, _) = render(
            self.spec,
            &self.protos,
            &self.voice(speaker),
            &self.spec.keyword,
            rng,
        );
        CorpusEntry {
            id,
            frames,
            speaker: Some(speaker),
            phrase: true,
            keyword_segment: None,
            phonemes: Some(self.spec.keyword.clone()),
            duration_hours: None,
        }
    }

    fn negative_entry(&self, id: String, speaker: u64, rng: &mut ChaCha8Rng) -> CorpusEntry {
        let phonemes = keyword_free(self.spec, rng);
        let (frames, _) = render(
            self.spec,
            &self.protos,
            &self.voice(speaker),
            &phonemes,
            rng,
        );
        CorpusEntry {
            id,
            frames,
            speaker: Some(speaker),
            phrase: false,
            keyword_segment: None,
            phonemes: Some(phonemes),
            duration_hours: Some(self.spec.negative_duration_s / 3600.0),
        }
    }
}

pub fn gen_corpus(spec: &SynthSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let ctx = Ctx {
        spec,
        protos: Prototypes::generate(spec),
    };
    let seed = spec.seed;
    let fillers = spec.non_keyword_phonemes();

    let voice_trigger = (0..spec.trigger_utterances)
        .map(|i| {
            let mut rng = rng_for(seed, stream::TRIGGER + i as u64);
            let talker = speaker_base::TRIGGER + rng.random_range(0..spec.trigger_talkers) as u64;
            let positive = rng.random::<f64>() < spec.trigger_positive_fraction;
            let phonemes = if positive {
                spec.keyword.clone()
            } else {
                keyword_free(spec, &mut rng)
            };
            let (frames, _) = render(spec, &ctx.protos, &ctx.voice(talker), &phonemes, &mut rng);
            CorpusEntry {
                id: format!("vt{i:05}"),
                frames,
                speaker: None,
                phrase: positive,
                keyword_segment: None,
                phonemes: Some(phonemes),
                duration_hours: None,
            }
        })
        .collect();

    let mut speaker_id = Vec::with_capacity(spec.train_speakers * spec.utts_per_speaker);
    for s in 0..spec.train_speakers {
        let speaker = speaker_base::TRAIN + s as u64;
        let voice = ctx.voice(speaker);
        for j in 0..spec.utts_per_speaker {
            let mut rng = rng_for(
                seed,
                stream::SPEAKER_ID + (s * spec.utts_per_speaker + j) as u64,
            );
            let sentence_len = rng.random_range(3..=5);
            let mut phonemes = spec.keyword.clone();
            phonemes.extend(random_string(&fillers, sentence_len, &mut rng));
            let (frames, lengths) = render(spec, &ctx.protos, &voice, &phonemes, &mut rng);
            let kw_end = lengths[..spec.keyword.len()].iter().sum();
            speaker_id.push(CorpusEntry {
                id: format!("spk{speaker}_{j:03}"),
                frames,
                speaker: Some(speaker),
                phrase: true,
                keyword_segment: Some((0, kw_end)),
                phonemes: None,
                duration_hours: None,
            });
        }
    }

    let targets = |base: u64, count: usize, stream_base: u64, prefix: &str| -> Vec<CorpusEntry> {
        let mut out = Vec::with_capacity(count * spec.eval_utts_per_speaker);
        for s in 0..count {
            let speaker = base + s as u64;
            for j in 0..spec.eval_utts_per_speaker {
                let mut rng = rng_for(
                    seed,
                    stream_base + (s * spec.eval_utts_per_speaker + j) as u64,
                );
                out.push(ctx.keyword_entry(format!("{prefix}{speaker}_{j:03}"), speaker, &mut rng));
            }
        }
        out
    };
    let eval = targets(speaker_base::EVAL, spec.eval_speakers, stream::EVAL, "ev");

    let negative_talker = |rng: &mut ChaCha8Rng, target_base: u64, targets: usize| -> u64 {
        if rng.random::<f64>() < spec.negatives_from_targets {
            target_base + rng.random_range(0..targets) as u64
        } else {
            speaker_base::NEGATIVE + rng.random_range(0..1_000u64)
        }
    };
    let negatives = (0..spec.negatives)
        .map(|i| {
            let mut rng = rng_for(seed, stream::NEGATIVE + i as u64);
            let talker = negative_talker(&mut rng, speaker_base::EVAL, spec.eval_speakers);
            ctx.negative_entry(format!("neg{i:05}"), talker, &mut rng)
        })
        .collect();

    let mut validation = targets(
        speaker_base::VALIDATION,
        spec.validation_speakers,
        stream::VALIDATION,
        "va",
    );
    for i in 0..spec.validation_negatives {
        let mut rng = rng_for(seed, stream::VALIDATION_NEG + i as u64);
        let talker = negative_talker(
            &mut rng,
            speaker_base::VALIDATION,
            spec.validation_speakers.max(1),
        );
        validation.push(ctx.negative_entry(format!("vneg{i:05}"), talker, &mut rng));
    }

    Ok(GeneratedCorpus {
        voice_trigger,
        speaker_id,
        eval,
        negatives,
        validation,
    })
}
