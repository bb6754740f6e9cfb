//! Mini-batch composition from the speaker-ID and voice-trigger sources.

use ndarray::{concatenate, s, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::losses::PairMeta;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Normalized 40-dim frames, before context stacking.
    pub features: FeatureSequence,
    pub phonemes: Option<Vec<usize>>,
    pub phrase: bool,
    pub speaker: Option<u64>,
    /// Half-open frame range of the keyword phrase.
    pub keyword_segment: Option<(usize, usize)>,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if let Some((start, end)) = self.keyword_segment {
            if start >= end || end > self.features.len() {
                return Err(Error::format(
                    "utterance",
                    format!(
                        "{}: keyword segment [{start}, {end}) outside {} frames",
                        self.id,
                        self.features.len()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn pair_meta(&self) -> PairMeta {
        PairMeta {
            speaker: self.speaker,
            keyword: self.phrase,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    SpeakerId,
    VoiceTrigger,
}

/// Speaker-labelled utterances grouped by speaker, sorted by speaker id.
/// The position of a speaker is its speaker-head class.
#[derive(Debug, Clone, Default)]
pub struct SpeakerStore {
    speakers: Vec<(u64, Vec<Utterance>)>,
}

impl SpeakerStore {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let mut speakers: Vec<(u64, Vec<Utterance>)> = Vec::new();
        for u in utterances {
            u.validate()?;
            let id = u.speaker.ok_or_else(|| {
                Error::format("speaker-ID utterance", format!("{} has no speaker", u.id))
            })?;
            match speakers.binary_search_by_key(&id, |(s, _)| *s) {
                Ok(pos) => speakers[pos].1.push(u),
                Err(pos) => speakers.insert(pos, (id, vec![u])),
            }
        }
        Ok(Self { speakers })
    }

    pub fn speaker_count(&self) -> usize {
        self.speakers.len()
    }

    pub fn utterance_count(&self) -> usize {
        self.speakers.iter().map(|(_, u)| u.len()).sum()
    }

    pub fn class_of(&self, speaker: u64) -> Option<usize> {
        self.speakers
            .binary_search_by_key(&speaker, |(s, _)| *s)
            .ok()
    }

    pub fn speakers(&self) -> impl Iterator<Item = (u64, &[Utterance])> {
        self.speakers.iter().map(|(s, u)| (*s, u.as_slice()))
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.speakers.iter().flat_map(|(_, u)| u.iter())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TriggerStore {
    pub utterances: Vec<Utterance>,
}

impl TriggerStore {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        for u in &utterances {
            u.validate()?;
        }
        Ok(Self { utterances })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub spkr_utts: usize,
    pub speakers_per_batch: usize,
    pub utts_per_speaker: usize,
    pub drop_prob: f64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 128,
            spkr_utts: 112,
            speakers_per_batch: 28,
            utts_per_speaker: 4,
            drop_prob: 0.5,
        }
    }
}

impl BatchSpec {
    pub fn trigger_utts(&self) -> usize {
        self.batch_size - self.spkr_utts
    }

    pub fn validate(&self) -> Result<()> {
        if self.spkr_utts != self.speakers_per_batch * self.utts_per_speaker {
            return Err(Error::Config(format!(
                "spkr_utts {} != {} speakers x {} utterances",
                self.spkr_utts, self.speakers_per_batch, self.utts_per_speaker
            )));
        }
        if self.spkr_utts > self.batch_size || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "spkr_utts {} exceeds batch size {}",
                self.spkr_utts, self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!(
                "drop_prob {} outside [0, 1]",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchItem {
    pub utterance: Utterance,
    pub source: Source,
    /// Speaker-head class, for speaker-ID utterances.
    pub speaker_class: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, source: Source) -> usize {
        self.items.iter().filter(|i| i.source == source).count()
    }

    pub fn pair_meta(&self) -> Vec<PairMeta> {
        self.items.iter().map(|i| i.utterance.pair_meta()).collect()
    }
}

/// Removes the keyword frames when `drop` is set, turning the utterance into
/// a non-keyword example of the same speaker.
pub fn drop_keyword_segment(u: &Utterance, drop: bool) -> Result<Utterance> {
    if !drop {
        return Ok(u.clone());
    }
    let (start, end) = u
        .keyword_segment
        .ok_or_else(|| Error::InvalidArgument(format!("{}: no keyword segment to drop", u.id)))?;
    let frames = &u.features.frames;
    if end - start >= frames.nrows() {
        return Err(Error::InsufficientData(format!(
            "{}: dropping the keyword leaves no frames",
            u.id
        )));
    }
    let kept = concatenate(
        Axis(0),
        &[frames.slice(s![..start, ..]), frames.slice(s![end.., ..])],
    )
    .expect("column counts match");
    Ok(Utterance {
        features: FeatureSequence {
            frames: kept,
            frame_rate: u.features.frame_rate,
        },
        phonemes: None,
        phrase: false,
        keyword_segment: None,
        ..u.clone()
    })
}

fn speaker_part(
    store: &SpeakerStore,
    spec: &BatchSpec,
    rng: &mut impl Rng,
    items: &mut Vec<BatchItem>,
) -> Result<()> {
    if spec.spkr_utts == 0 {
        return Ok(());
    }
    let eligible: Vec<usize> = store
        .speakers
        .iter()
        .enumerate()
        .filter(|(_, (_, u))| u.len() >= spec.utts_per_speaker)
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < spec.speakers_per_batch {
        return Err(Error::InsufficientData(format!(
            "{} speakers have >= {} utterances, batch needs {}",
            eligible.len(),
            spec.utts_per_speaker,
            spec.speakers_per_batch
        )));
    }
    for pick in index::sample(rng, eligible.len(), spec.speakers_per_batch) {
        let class = eligible[pick];
        let utts = &store.speakers[class].1;
        for u in index::sample(rng, utts.len(), spec.utts_per_speaker) {
            let drop = spec.drop_prob > 0.0 && rng.random::<f64>() < spec.drop_prob;
            items.push(BatchItem {
                utterance: drop_keyword_segment(&utts[u], drop)?,
                source: Source::SpeakerId,
                speaker_class: Some(class),
            });
        }
    }
    Ok(())
}

fn trigger_item(u: &Utterance) -> BatchItem {
    BatchItem {
        utterance: u.clone(),
        source: Source::VoiceTrigger,
        speaker_class: None,
    }
}

/// Draws `speakers_per_batch x utts_per_speaker` speaker-ID utterances from
/// distinct speakers, then fills the batch from the voice-trigger store.
/// Sampling is without replacement within a batch.
pub fn compose_batch(
    spkr_store: &SpeakerStore,
    trigger_store: &TriggerStore,
    spec: &BatchSpec,
    rng: &mut impl Rng,
) -> Result<Batch> {
    spec.validate()?;
    let need = spec.trigger_utts();
    if trigger_store.len() < need {
        return Err(Error::InsufficientData(format!(
            "voice-trigger store has {} utterances, batch needs {need}",
            trigger_store.len()
        )));
    }
    let mut items = Vec::with_capacity(spec.batch_size);
    speaker_part(spkr_store, spec, rng, &mut items)?;
    for i in index::sample(rng, trigger_store.len(), need) {
        items.push(trigger_item(&trigger_store.utterances[i]));
    }
    Ok(Batch { items })
}

/// Batches for one epoch: a shuffled pass over the voice-trigger store, each
/// batch topped up with freshly sampled speaker-ID utterances.
pub fn epoch_batches(
    spkr_store: &SpeakerStore,
    trigger_store: &TriggerStore,
    spec: &BatchSpec,
    rng: &mut impl Rng,
) -> Result<Vec<Batch>> {
    spec.validate()?;
    let need = spec.trigger_utts();
    let steps = if need == 0 {
        spkr_store
            .utterance_count()
            .div_ceil(spec.spkr_utts.max(1))
            .max(1)
    } else {
        if trigger_store.len() < need {
            return Err(Error::InsufficientData(format!(
                "voice-trigger store has {} utterances, batch needs {need}",
                trigger_store.len()
            )));
        }
        trigger_store.len() / need
    };
    let mut order: Vec<usize> = (0..trigger_store.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut items = Vec::with_capacity(spec.batch_size);
        speaker_part(spkr_store, spec, rng, &mut items)?;
        for &i in &order[step * need..(step + 1) * need] {
            items.push(trigger_item(&trigger_store.utterances[i]));
        }
        batches.push(Batch { items });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::build_pairs;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn utt(id: &str, t: usize, speaker: Option<u64>, segment: Option<(usize, usize)>) -> Utterance {
        Utterance {
            id: id.into(),
            features: FeatureSequence::new(Array2::from_shape_fn((t, 3), |(i, _)| i as f64), 100.0)
                .unwrap(),
            phonemes: None,
            phrase: segment.is_some(),
            speaker,
            keyword_segment: segment,
        }
    }

    fn stores(speakers: u64, per: usize, triggers: usize) -> (SpeakerStore, TriggerStore) {
        let spk = (0..speakers)
            .flat_map(|s| {
                (0..per).map(move |k| utt(&format!("s{s}-{k}"), 20, Some(s), Some((0, 8))))
            })
            .collect();
        let trig = (0..triggers)
            .map(|k| utt(&format!("t{k}"), 10, None, None))
            .collect();
        (
            SpeakerStore::new(spk).unwrap(),
            TriggerStore::new(trig).unwrap(),
        )
    }

    #[test]
    fn paper_batch_counts() {
        let (spk, trig) = stores(30, 6, 40);
        let spec = BatchSpec::default();
        let batch = compose_batch(&spk, &trig, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(batch.len(), 128);
        assert_eq!(batch.count(Source::SpeakerId), 112);
        assert_eq!(batch.count(Source::VoiceTrigger), 16);
        let mut speakers: Vec<_> = batch
            .items
            .iter()
            .filter_map(|i| i.utterance.speaker)
            .collect();
        speakers.sort_unstable();
        speakers.dedup();
        assert_eq!(speakers.len(), 28);
    }

    #[test]
    fn all_speaker_batch_is_valid() {
        let (spk, trig) = stores(4, 4, 0);
        let spec = BatchSpec {
            batch_size: 8,
            spkr_utts: 8,
            speakers_per_batch: 2,
            utts_per_speaker: 4,
            drop_prob: 0.0,
        };
        let batch = compose_batch(&spk, &trig, &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(batch.count(Source::VoiceTrigger), 0);
        assert_eq!(batch.len(), 8);
    }

    #[test]
    fn insufficient_data_is_an_error() {
        let (spk, trig) = stores(10, 6, 40);
        let spec = BatchSpec::default();
        assert!(matches!(
            compose_batch(&spk, &trig, &spec, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::InsufficientData(_))
        ));
        let (spk, trig) = stores(30, 6, 5);
        assert!(compose_batch(&spk, &trig, &spec, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn dropping_removes_segment() {
        let mut u = utt("a", 100, Some(1), Some((10, 40)));
        u.features.frames.slice_mut(s![10..40, ..]).fill(-999.0);
        let same = drop_keyword_segment(&u, false).unwrap();
        assert_eq!(same, u);
        let dropped = drop_keyword_segment(&u, true).unwrap();
        assert_eq!(dropped.features.len(), 70);
        assert!(!dropped.phrase);
        assert!(dropped.keyword_segment.is_none());
        assert!(dropped.features.frames.iter().all(|&v| v != -999.0));

        let no_seg = utt("b", 10, Some(1), None);
        assert!(drop_keyword_segment(&no_seg, true).is_err());
    }

    #[test]
    fn dropped_sibling_forms_same_speaker_negative() {
        let u = utt("a", 30, Some(7), Some((0, 10)));
        let v = utt("b", 30, Some(7), Some((0, 10)));
        let dropped = drop_keyword_segment(&v, true).unwrap();
        let pairs = build_pairs(&[u.pair_meta(), dropped.pair_meta()], false);
        assert_eq!(pairs.n_positive(), 0);
        assert_eq!(pairs.negatives, vec![(0, 1)]);
    }

    #[test]
    fn epoch_covers_trigger_store_once() {
        let (spk, trig) = stores(30, 5, 48);
        let spec = BatchSpec::default();
        let batches = epoch_batches(&spk, &trig, &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(batches.len(), 3);
        let mut ids: Vec<_> = batches
            .iter()
            .flat_map(|b| b.items.iter())
            .filter(|i| i.source == Source::VoiceTrigger)
            .map(|i| i.utterance.id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 48);
    }

    #[test]
    fn invalid_spec() {
        let spec = BatchSpec {
            spkr_utts: 100,
            ..BatchSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
