//! Command-line front end. Every command except `features` writes into a
//! fresh run directory holding the echoed config and its hash.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{config_hash, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::first_run_scores;
use crate::experiment::{
    evaluate, finetune_regime, run_baseline, run_finetune, run_variant, AblationVariant, Datasets,
    Init,
};
use crate::features::{log_mel, AudioClip, MelConfig};
use crate::inference::{FusionWeight, TrialScore};
use crate::manifest::{read_manifest, write_features, write_manifest};
use crate::model::{Model, ParamGroup};
use crate::synth::gen_corpus;
use crate::trainer::StepRecord;

#[derive(Debug, Parser)]
#[command(
    name = "vtrigger",
    version,
    about = "Speaker-adapted voice trigger experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArg {
    /// Experiment config (TOML); omitted keys take desk-scale defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus: features plus five manifests.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory; must not exist. Defaults to `paths.data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the speaker-independent baseline.
    TrainBaseline {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Fine-tune the decoder of a baseline checkpoint.
    Finetune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Run the enrollment protocol and write DET curves per scorer.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fusion weights; defaults to `scoring.mus`.
        #[arg(long, value_delimiter = ',')]
        mu: Vec<f64>,
    },
    /// Train and evaluate the eight ablation variants.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Compute log-mel features of a mono WAV file.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Loaded {
    cfg: ExperimentConfig,
    text: String,
}

fn load_config(arg: &ConfigArg) -> Result<Loaded> {
    match &arg.config {
        Some(p) => {
            let (cfg, text) = ExperimentConfig::load(p)?;
            Ok(Loaded { cfg, text })
        }
        None => {
            let cfg = ExperimentConfig::desk();
            Ok(Loaded {
                text: cfg.to_toml(),
                cfg,
            })
        }
    }
}

/// Creates `<runs_dir>/<command>-NNN` with the first unused index and
/// records the config in it.
fn fresh_run_dir(loaded: &Loaded, command: &str) -> Result<PathBuf> {
    let root = &loaded.cfg.paths.runs_dir;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for i in 1..10_000 {
        let dir = root.join(format!("{command}-{i:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => {
                write(&dir.join("config.toml"), &loaded.text)?;
                write(
                    &dir.join("config.sha256"),
                    &format!("{}\n", config_hash(&loaded.text)),
                )?;
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(dir, e)),
        }
    }
    Err(Error::InvalidArgument(format!(
        "{}: no free run directory",
        root.display()
    )))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let dir = &cfg.paths.data_dir;
    let read = |name: &str| read_manifest(&dir.join(format!("{name}.tsv")));
    Datasets::from_entries(
        &read("voice_trigger")?,
        &read("speaker_id")?,
        &read("eval")?,
        &read("negatives")?,
        &read("validation")?,
    )
}

/// Loads a checkpoint and checks it against the config and the corpus.
fn load_checkpoint(path: &Path, cfg: &ExperimentConfig, data: &Datasets) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    let mut expected = cfg.model;
    expected.tap_layer = ck.model.config.tap_layer;
    if ck.model.config != expected {
        return Err(Error::Config(format!(
            "{}: model config differs from the experiment config",
            path.display()
        )));
    }
    if ck.normalizer.as_ref() != Some(&data.normalizer) {
        return Err(Error::format(
            "checkpoint",
            format!(
                "{}: feature statistics differ from the corpus",
                path.display()
            ),
        ));
    }
    Ok(ck.model)
}

struct StepLog {
    text: String,
}

impl StepLog {
    fn new() -> Self {
        Self {
            text: format!("{}\n", StepRecord::TSV_HEADER),
        }
    }

    fn push(&mut self, r: &StepRecord) {
        self.text.push_str(&r.to_tsv());
        self.text.push('\n');
    }
}

/// Runs one command; returns the directory or file it produced.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Synth { config, out } => {
            let loaded = load_config(&config)?;
            let out = out.unwrap_or_else(|| loaded.cfg.paths.data_dir.clone());
            synth(&loaded, &out)?;
            Ok(out)
        }
        Command::TrainBaseline { config } => {
            let loaded = load_config(&config)?;
            let data = load_datasets(&loaded.cfg)?;
            let dir = fresh_run_dir(&loaded, "train-baseline")?;
            let mut log = StepLog::new();
            let model = run_baseline(&loaded.cfg, &data, &mut |r| log.push(r))?;
            write(&dir.join("steps.tsv"), &log.text)?;
            Checkpoint::new(model, Some(data.normalizer)).save(&dir.join("model.ckpt"))?;
            Ok(dir)
        }
        Command::Finetune { config, baseline } => {
            let loaded = load_config(&config)?;
            let data = load_datasets(&loaded.cfg)?;
            let base = load_checkpoint(&baseline, &loaded.cfg, &data)?;
            let dir = fresh_run_dir(&loaded, "finetune")?;
            let regime = finetune_regime(&loaded.cfg);
            let mut log = StepLog::new();
            let model = run_finetune(&loaded.cfg, &base, &regime, &data, &mut |r| log.push(r))?;
            if regime.encoder_frozen()
                && model.params.group_bytes(ParamGroup::Encoder)
                    != base.params.group_bytes(ParamGroup::Encoder)
            {
                return Err(Error::Numerical(
                    "encoder changed during frozen fine-tuning".into(),
                ));
            }
            write(&dir.join("steps.tsv"), &log.text)?;
            Checkpoint::new(model, Some(data.normalizer)).save(&dir.join("model.ckpt"))?;
            Ok(dir)
        }
        Command::Eval {
            config,
            checkpoint,
            mu,
        } => {
            let mut loaded = load_config(&config)?;
            if !mu.is_empty() {
                loaded.cfg.scoring.mus = mu
                    .into_iter()
                    .map(FusionWeight::new)
                    .collect::<Result<_>>()?;
            }
            let data = load_datasets(&loaded.cfg)?;
            let model = load_checkpoint(&checkpoint, &loaded.cfg, &data)?;
            let dir = fresh_run_dir(&loaded, "eval")?;
            eval(&loaded, &data, model, &dir)?;
            Ok(dir)
        }
        Command::Ablate { config, baseline } => {
            let loaded = load_config(&config)?;
            let data = load_datasets(&loaded.cfg)?;
            let base = load_checkpoint(&baseline, &loaded.cfg, &data)?;
            let dir = fresh_run_dir(&loaded, "ablate")?;
            ablate(&loaded, &data, &base, &dir)?;
            Ok(dir)
        }
        Command::Features { wav, out } => {
            let clip = read_wav(&wav)?;
            let cfg = MelConfig {
                sample_rate: clip.sample_rate,
                ..MelConfig::default()
            };
            let fs = log_mel(&clip, &cfg)?;
            write_features(&out, &fs.frames)?;
            Ok(out)
        }
    }
}

/// Writes the corpus into a staging directory and renames it into place,
/// so a failed run leaves no partial manifests behind.
fn synth(loaded: &Loaded, out: &Path) -> Result<()> {
    if out.exists() {
        return Err(Error::InvalidArgument(format!(
            "{} already exists",
            out.display()
        )));
    }
    let corpus = gen_corpus(&loaded.cfg.synth)?;
    let name = out.file_name().ok_or_else(|| {
        Error::InvalidArgument(format!("{}: not a directory name", out.display()))
    })?;
    let staging = out.with_file_name(format!(
        ".{}.staging-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        for (name, entries) in corpus.manifests() {
            write_manifest(&staging, name, entries)?;
        }
        write(&staging.join("config.toml"), &loaded.text)?;
        write(
            &staging.join("config.sha256"),
            &format!("{}\n", config_hash(&loaded.text)),
        )?;
        fs::rename(&staging, out).map_err(|e| Error::io(out, e))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn eval(loaded: &Loaded, data: &Datasets, model: Model, dir: &Path) -> Result<()> {
    let cfg = &loaded.cfg;
    let ev = evaluate(&model, data, cfg)?;
    for s in &ev.report.scorers {
        write(
            &dir.join(format!("det_{}.tsv", s.kind.slug())),
            &s.pooled.to_tsv(),
        )?;
    }
    let mu = cfg
        .scoring
        .mus
        .iter()
        .copied()
        .find(|m| m.mu() == 0.95)
        .unwrap_or(cfg.scoring.mus[0]);
    let (anchors, trials) =
        first_run_scores(&model, &ev.calibration, &ev.eval_scores, &cfg.protocol, mu)?;
    let mut scores = format!(
        "# fusion mu={}\nanchor\t{}\n",
        mu.mu(),
        TrialScore::TSV_HEADER
    );
    for (spk, t) in &trials {
        scores.push_str(&format!("{spk}\t{}\n", t.to_tsv()));
    }
    write(&dir.join("scores.tsv"), &scores)?;
    let mut ck = Checkpoint::new(model, Some(data.normalizer.clone()));
    ck.anchors = anchors
        .into_iter()
        .map(|(s, a)| (format!("spk{s}"), a))
        .collect();
    ck.save(&dir.join("enrolled.ckpt"))?;
    let cal = &ev.calibration;
    let mut summary = ev.report.summary();
    summary.push_str(&format!(
        "\nmetric calibration mean={:e} std={:e}\n",
        cal.metric.mean, cal.metric.std
    ));
    if let Some(c) = &cal.ctc {
        summary.push_str(&format!(
            "keyword calibration mean={:e} std={:e}\n",
            c.mean, c.std
        ));
    }
    summary.push_str(&format!("config_sha256={}\n\n", config_hash(&loaded.text)));
    summary.push_str(&loaded.text);
    write(&dir.join("summary.txt"), &summary)?;
    print!("{}", ev.report.summary());
    Ok(())
}

fn ablate(loaded: &Loaded, data: &Datasets, base: &Model, dir: &Path) -> Result<()> {
    let cfg = &loaded.cfg;
    let hash = config_hash(&loaded.text);
    let mut table =
        String::from("variant\tinit\tencoder\ttap\tphone\tphrase\tspkr\tmetric\tctc_frr\tmetric_frr\tseed\tconfig_sha256\n");
    for variant in AblationVariant::table(&cfg.model, cfg.loss.strict_pairs) {
        let mut log = StepLog::new();
        let res = run_variant(cfg, data, base, &variant, &mut |r| log.push(r))?;
        write(&dir.join(format!("steps_{}.tsv", variant.name)), &log.text)?;
        let r = &variant.regime;
        let l = r.losses;
        let row = format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\n",
            variant.name,
            match variant.init {
                Init::Random => "random",
                Init::Pretrained => "pretrained",
            },
            if r.encoder_frozen() {
                "fixed"
            } else {
                "trained"
            },
            r.tap_layer,
            l.phone,
            l.phrase,
            l.spkr,
            l.metric,
            res.ctc_frr,
            res.metric_frr,
            cfg.seeds.model,
            hash
        );
        print!("{row}");
        table.push_str(&row);
    }
    write(&dir.join("ablation.tsv"), &table)
}

fn read_wav(path: &Path) -> Result<AudioClip> {
    let bad = |e: hound::Error| Error::format("wav", format!("{}: {e}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(bad)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
        (f, b) => {
            return Err(Error::InvalidArgument(format!(
                "{}: unsupported sample format {f:?}/{b} bits",
                path.display()
            )))
        }
    };
    AudioClip::new(samples, spec.sample_rate)
}
