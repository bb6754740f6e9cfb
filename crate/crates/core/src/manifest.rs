//! Corpus manifests and raw feature files.
//!
//! A manifest is tab-separated text with the header
//! `id features speaker phrase kw_start kw_end phonemes duration_hours`.
//! Optional fields hold `-`; phonemes are space-separated indices; the
//! feature path is relative to the manifest's directory.
//!
//! Feature files are a little-endian `u32` row count, `u32` column count,
//! then row-major `f32` values.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::{fit_normalizer, normalize, FeatureSequence, NormalizerStats};
use crate::sampler::Utterance;

pub const HEADER: &str =
    "id\tfeatures\tspeaker\tphrase\tkw_start\tkw_end\tphonemes\tduration_hours";
/// Frame rate of raw features, in frames per second.
pub const FRAME_RATE: f64 = 100.0;

/// One manifest row together with its raw (unnormalized) features.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub frames: Array2<f64>,
    pub speaker: Option<u64>,
    pub phrase: bool,
    pub keyword_segment: Option<(usize, usize)>,
    pub phonemes: Option<Vec<usize>>,
    pub duration_hours: Option<f64>,
}

impl CorpusEntry {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['\t', '\n', '/', '\\']) {
            return Err(Error::format(
                "manifest",
                format!("invalid utterance id {:?}", self.id),
            ));
        }
        if self.frames.nrows() == 0 {
            return Err(Error::format("manifest", format!("{}: no frames", self.id)));
        }
        if let Some((s, e)) = self.keyword_segment {
            if s >= e || e > self.frames.nrows() {
                return Err(Error::format(
                    "manifest",
                    format!(
                        "{}: keyword segment [{s}, {e}) outside {} frames",
                        self.id,
                        self.frames.nrows()
                    ),
                ));
            }
        }
        if matches!(self.duration_hours, Some(h) if !(h > 0.0 && h.is_finite())) {
            return Err(Error::format(
                "manifest",
                format!("{}: bad duration", self.id),
            ));
        }
        Ok(())
    }

    pub fn sequence(&self) -> Result<FeatureSequence> {
        FeatureSequence::new(self.frames.clone(), FRAME_RATE)
    }

    /// Model-ready utterance with normalized features.
    pub fn to_utterance(&self, stats: &NormalizerStats) -> Result<Utterance> {
        let u = Utterance {
            id: self.id.clone(),
            features: normalize(&self.sequence()?, stats)?,
            phonemes: self.phonemes.clone(),
            phrase: self.phrase,
            speaker: self.speaker,
            keyword_segment: self.keyword_segment,
        };
        u.validate()?;
        Ok(u)
    }
}

pub fn fit_corpus_normalizer<'a>(
    entries: impl IntoIterator<Item = &'a CorpusEntry>,
) -> Result<NormalizerStats> {
    let seqs = entries
        .into_iter()
        .map(CorpusEntry::sequence)
        .collect::<Result<Vec<_>>>()?;
    fit_normalizer(&seqs)
}

pub fn to_utterances(entries: &[CorpusEntry], stats: &NormalizerStats) -> Result<Vec<Utterance>> {
    entries.iter().map(|e| e.to_utterance(stats)).collect()
}

pub fn encode_features(frames: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = frames.dim();
    let mut out = Vec::with_capacity(8 + 4 * rows * cols);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in frames.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Array2<f64>> {
    let bad = |d: String| Error::format("feature file", d);
    if bytes.len() < 8 {
        return Err(bad(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[8..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(bad(format!(
            "{rows}x{cols} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))
}

pub fn write_features(path: &Path, frames: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_features(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

fn feature_rel_path(id: &str) -> String {
    format!("features/{id}.f32")
}

/// Writes `entries` to `<dir>/<name>.tsv`, with feature files under
/// `<dir>/features/`.
pub fn write_manifest(dir: &Path, name: &str, entries: &[CorpusEntry]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut text = String::from(HEADER);
    text.push('\n');
    let mut seen = HashSet::new();
    for e in entries {
        e.validate()?;
        if !seen.insert(e.id.as_str()) {
            return Err(Error::format("manifest", format!("duplicate id {}", e.id)));
        }
        let rel = feature_rel_path(&e.id);
        write_features(&dir.join(&rel), &e.frames)?;
        let phonemes = e
            .phonemes
            .as_ref()
            .map(|p| p.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id,
            rel,
            opt(e.speaker),
            u8::from(e.phrase),
            opt(e.keyword_segment.map(|s| s.0)),
            opt(e.keyword_segment.map(|s| s.1)),
            opt(phonemes),
            opt(e.duration_hours),
        ));
    }
    let path = dir.join(format!("{name}.tsv"));
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn field<T: std::str::FromStr>(raw: &str, what: &str, line: usize) -> Result<Option<T>> {
    if raw == "-" {
        return Ok(None);
    }
    raw.parse()
        .map(Some)
        .map_err(|_| Error::format("manifest", format!("line {line}: bad {what} {raw:?}")))
}

/// Reads a manifest and every feature file it references.
pub fn read_manifest(path: &Path) -> Result<Vec<CorpusEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => {
            return Err(Error::format(
                "manifest",
                format!("{}: missing header", path.display()),
            ))
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 {
            return Err(Error::format(
                "manifest",
                format!("line {n}: expected 8 fields, found {}", cols.len()),
            ));
        }
        let id = cols[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::format(
                "manifest",
                format!("line {n}: duplicate id {id}"),
            ));
        }
        let phrase = match cols[3] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::format(
                    "manifest",
                    format!("line {n}: bad phrase flag {other:?}"),
                ))
            }
        };
        let start: Option<usize> = field(cols[4], "kw_start", n)?;
        let end: Option<usize> = field(cols[5], "kw_end", n)?;
        let keyword_segment = match (start, end) {
            (Some(s), Some(e)) => Some((s, e)),
            (None, None) => None,
            _ => {
                return Err(Error::format(
                    "manifest",
                    format!("line {n}: half-specified keyword segment"),
                ))
            }
        };
        let phonemes = if cols[6] == "-" {
            None
        } else {
            Some(
                cols[6]
                    .split(' ')
                    .map(|p| {
                        field::<usize>(p, "phoneme", n)?.ok_or_else(|| {
                            Error::format("manifest", format!("line {n}: bad phoneme"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let entry = CorpusEntry {
            frames: read_features(&base.join(cols[1]))?,
            id,
            speaker: field(cols[2], "speaker", n)?,
            phrase,
            keyword_segment,
            phonemes,
            duration_hours: field(cols[7], "duration", n)?,
        };
        entry.validate()?;
        out.push(entry);
    }
    Ok(out)
}
