//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Matrices cross the boundary as flat row-major `Float64Array`s.

#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

use vtrigger::eval::{det_curve, frr_at_fa, DetCurve};
use vtrigger::features::{mel_filterbank, MelConfig};
use vtrigger::inference::{fuse, FusionWeight};
use vtrigger::trainer::{lr_at, LrSchedule};

fn js_err(e: vtrigger::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Learning rate sampled at `points` evenly spaced epochs in `[0, last_epoch]`.
#[wasm_bindgen]
pub fn lr_curve(
    peak: f64,
    warmup_end_epoch: f64,
    linear_end_epoch: f64,
    linear_end_value: f64,
    exp_factor: f64,
    min_lr: f64,
    last_epoch: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    let sched = LrSchedule {
        peak,
        warmup_end_epoch,
        linear_end_epoch,
        linear_end_value,
        exp_factor,
        min_lr,
        last_epoch,
    };
    sched.validate().map_err(js_err)?;
    let n = points.max(2);
    Ok((0..n)
        .map(|i| lr_at(last_epoch * i as f64 / (n - 1) as f64, &sched))
        .collect())
}

/// Mel filterbank weights, `n_mels` rows of `n_fft / 2 + 1` bins.
#[wasm_bindgen]
pub fn filterbank(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> Result<Vec<f64>, JsError> {
    if n_mels == 0 || n_fft < 2 || sample_rate == 0 || !(f_min >= 0.0 && f_max > f_min) {
        return Err(JsError::new(
            "need n_mels > 0, n_fft >= 2 and 0 <= f_min < f_max",
        ));
    }
    if f_max > f64::from(sample_rate) / 2.0 {
        return Err(JsError::new("f_max exceeds the Nyquist frequency"));
    }
    let cfg = MelConfig {
        sample_rate,
        n_fft,
        n_mels,
        f_min,
        f_max: Some(f_max),
        ..MelConfig::default()
    };
    Ok(mel_filterbank(&cfg).into_raw_vec_and_offset().0)
}

/// Centre frequencies (Hz) of the filters returned by [`filterbank`].
#[wasm_bindgen]
pub fn filter_centers(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> Vec<f64> {
    MelConfig {
        sample_rate,
        n_fft,
        n_mels,
        f_min,
        f_max: Some(f_max),
        ..MelConfig::default()
    }
    .center_frequencies()
}

/// Simulated keyword and speaker-adapted score populations for exploring
/// DET curves under score fusion.
///
/// Keyword trials score `ctc_separation` higher on the keyword score and
/// `metric_separation` higher on the metric score than random negatives.
/// A `confusable` fraction of negatives sound like the keyword: they match
/// the keyword score of true trials but come from other speakers, so only
/// the metric score can reject them. Both scores share `correlation`.
#[wasm_bindgen]
pub struct FusionExplorer {
    positives: Vec<(f64, f64)>,
    negatives: Vec<(f64, f64)>,
    hours: f64,
}

#[wasm_bindgen]
impl FusionExplorer {
    #[wasm_bindgen(constructor)]
    pub fn new(
        seed: u64,
        n_pos: usize,
        n_neg: usize,
        ctc_separation: f64,
        metric_separation: f64,
        confusable: f64,
        correlation: f64,
        negative_seconds: f64,
    ) -> Result<FusionExplorer, JsError> {
        if n_pos == 0 || n_neg == 0 {
            return Err(JsError::new("need at least one trial of each kind"));
        }
        if !(0.0..=1.0).contains(&confusable) || !(-1.0..=1.0).contains(&correlation) {
            return Err(JsError::new(
                "confusable in [0, 1] and correlation in [-1, 1] required",
            ));
        }
        if !(negative_seconds > 0.0) {
            return Err(JsError::new("negative duration must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pair = |c_mean: f64, m_mean: f64| {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let z2 = correlation * z1 + (1.0 - correlation * correlation).sqrt() * z2;
            (c_mean + z1, m_mean + z2)
        };
        let positives = (0..n_pos)
            .map(|_| pair(ctc_separation, metric_separation))
            .collect();
        let n_conf = (confusable * n_neg as f64).round() as usize;
        let negatives = (0..n_neg)
            .map(|i| {
                if i < n_conf {
                    pair(ctc_separation, 0.0)
                } else {
                    pair(0.0, 0.0)
                }
            })
            .collect();
        Ok(FusionExplorer {
            positives,
            negatives,
            hours: n_neg as f64 * negative_seconds / 3600.0,
        })
    }

    fn curve(&self, mu: f64) -> Result<DetCurve, JsError> {
        let w = FusionWeight::new(mu).map_err(js_err)?;
        let score = |v: &[(f64, f64)]| v.iter().map(|&(c, m)| fuse(c, m, w)).collect::<Vec<_>>();
        det_curve(&score(&self.positives), &score(&self.negatives), self.hours).map_err(js_err)
    }

    /// DET curve for fusion weight `mu` as `[fa_per_hr, frr]` pairs in
    /// increasing threshold order.
    pub fn det(&self, mu: f64) -> Result<Vec<f64>, JsError> {
        Ok(self
            .curve(mu)?
            .points
            .iter()
            .flat_map(|p| [p.fa_per_hr, p.frr])
            .collect())
    }

    /// FRR at the operating point; `NaN` when no threshold reaches it.
    pub fn frr_at(&self, mu: f64, target_fa_per_hr: f64) -> Result<f64, JsError> {
        let op = frr_at_fa(&self.curve(mu)?, target_fa_per_hr).map_err(js_err)?;
        Ok(if op.met { op.frr } else { f64::NAN })
    }

    #[wasm_bindgen(getter)]
    pub fn negative_hours(&self) -> f64 {
        self.hours
    }
}
