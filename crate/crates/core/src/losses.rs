//! Training objectives: phoneme CTC, phrase and speaker cross-entropy, and the
//! pairwise cosine metric loss, plus their weighted combination.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mat, Vector};

/// Clamp applied to pair probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-6;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames needed to emit `labels` under CTC.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

struct CtcLattice {
    /// Blank-interleaved label sequence.
    ext: Vec<usize>,
    alpha: Array2<f64>,
    log_likelihood: f64,
}

fn check_ctc(log_probs: &Mat, labels: &[usize]) -> Result<usize> {
    let (frames, classes) = log_probs.dim();
    if frames == 0 || classes < 2 {
        return Err(Error::Empty("ctc posteriors"));
    }
    let blank = classes - 1;
    if let Some(&bad) = labels.iter().find(|&&l| l >= blank) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: blank,
        });
    }
    let required = ctc_min_frames(labels);
    if required > frames {
        return Err(Error::Unalignable {
            labels: labels.len(),
            required,
            frames,
        });
    }
    Ok(blank)
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn ctc_forward(log_probs: &Mat, labels: &[usize]) -> Result<CtcLattice> {
    let blank = check_ctc(log_probs, labels)?;
    let frames = log_probs.nrows();
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    let states = ext.len();
    let mut alpha = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    alpha[[0, 0]] = log_probs[[0, blank]];
    if states > 1 {
        alpha[[0, 1]] = log_probs[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(&ext, s, blank) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = acc + log_probs[[t, ext[s]]];
        }
    }
    let mut ll = alpha[[frames - 1, states - 1]];
    if states > 1 {
        ll = log_add(ll, alpha[[frames - 1, states - 2]]);
    }
    Ok(CtcLattice {
        ext,
        alpha,
        log_likelihood: ll,
    })
}

/// Negative log-likelihood of `labels` summed over all CTC alignments.
///
/// The blank is the last column of `log_probs`.
pub fn ctc_loss(log_probs: &Mat, labels: &[usize]) -> Result<f64> {
    Ok(-ctc_forward(log_probs, labels)?.log_likelihood)
}

/// CTC loss and its gradient with respect to `log_probs`.
pub fn ctc_loss_with_grad(log_probs: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    let lattice = ctc_forward(log_probs, labels)?;
    let (frames, classes) = log_probs.dim();
    let blank = classes - 1;
    let ext = &lattice.ext;
    let states = ext.len();
    // beta[t][s]: log-probability of completing the path from state s at t,
    // excluding the emission at t
    let mut beta = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    beta[[frames - 1, states - 1]] = 0.0;
    if states > 1 {
        beta[[frames - 1, states - 2]] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[[t + 1, s]] + log_probs[[t + 1, ext[s]]];
            if s + 1 < states {
                acc = log_add(acc, beta[[t + 1, s + 1]] + log_probs[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < states && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, beta[[t + 1, s + 2]] + log_probs[[t + 1, ext[s + 2]]]);
            }
            beta[[t, s]] = acc;
        }
    }
    let ll = lattice.log_likelihood;
    let mut grad = Array2::zeros((frames, classes));
    for t in 0..frames {
        for s in 0..states {
            let w = lattice.alpha[[t, s]] + beta[[t, s]];
            if w > f64::NEG_INFINITY {
                grad[[t, ext[s]]] -= (w - ll).exp();
            }
        }
    }
    Ok((-ll, grad))
}

/// Length-normalized keyword log-likelihood, `-ctc_loss / T`; `-inf` when the
/// keyword cannot be aligned.
pub fn ctc_keyword_score(log_probs: &Mat, keyword: &[usize]) -> Result<f64> {
    match ctc_loss(log_probs, keyword) {
        Ok(loss) => Ok(-loss / log_probs.nrows() as f64),
        Err(Error::Unalignable { .. }) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with a logistic link.
pub fn phrase_ce(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Gradient of [`phrase_ce`] with respect to the logit.
pub fn phrase_ce_grad(logit: f64, label: bool) -> f64 {
    sigmoid(logit) - if label { 1.0 } else { 0.0 }
}

fn check_class(logits: &Vector, speaker: usize) -> Result<()> {
    if speaker >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: speaker,
            len: logits.len(),
        });
    }
    Ok(())
}

fn log_sum_exp(v: &Vector) -> f64 {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if max == f64::INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy over speaker classes.
pub fn speaker_ce(logits: &Vector, speaker: usize) -> Result<f64> {
    check_class(logits, speaker)?;
    if logits[speaker] == f64::INFINITY {
        return Ok(0.0);
    }
    Ok(log_sum_exp(logits) - logits[speaker])
}

pub fn speaker_ce_with_grad(logits: &Vector, speaker: usize) -> Result<(f64, Vector)> {
    let loss = speaker_ce(logits, speaker)?;
    let lse = log_sum_exp(logits);
    let mut grad = logits.mapv(|v| (v - lse).exp());
    grad[speaker] -= 1.0;
    Ok((loss, grad))
}

/// Per-utterance metadata relevant to pair construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairMeta {
    /// `None` marks an utterance from an unknown speaker, distinct from all
    /// others in the batch.
    pub speaker: Option<u64>,
    pub keyword: bool,
}

/// Positive and negative index pairs within a batch, each with `i < j`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSets {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl PairSets {
    pub fn n_positive(&self) -> usize {
        self.positives.len()
    }

    pub fn n_negative(&self) -> usize {
        self.negatives.len()
    }
}

/// Positives: same speaker, both keyword. Negatives: different speakers, or
/// same speaker with opposite phrase labels. With `strict`, different-speaker
/// pairs where neither utterance contains the keyword are dropped.
pub fn build_pairs(meta: &[PairMeta], strict: bool) -> PairSets {
    let mut pairs = PairSets::default();
    for i in 0..meta.len() {
        for j in i + 1..meta.len() {
            let (a, b) = (meta[i], meta[j]);
            let same = matches!((a.speaker, b.speaker), (Some(x), Some(y)) if x == y);
            if same {
                if a.keyword && b.keyword {
                    pairs.positives.push((i, j));
                } else if a.keyword != b.keyword {
                    pairs.negatives.push((i, j));
                }
            } else if !(strict && !a.keyword && !b.keyword) {
                pairs.negatives.push((i, j));
            }
        }
    }
    pairs
}

/// Uniformly subsamples negatives down to the number of positives.
pub fn subsample_negatives(pairs: &PairSets, rng: &mut impl Rng) -> PairSets {
    let keep = pairs.n_positive();
    if pairs.n_negative() <= keep {
        return pairs.clone();
    }
    let mut picked = index::sample(rng, pairs.n_negative(), keep).into_vec();
    picked.sort_unstable();
    PairSets {
        positives: pairs.positives.clone(),
        negatives: picked.into_iter().map(|k| pairs.negatives[k]).collect(),
    }
}

fn norm(v: &Vector) -> f64 {
    v.dot(v).sqrt()
}

pub fn cosine(u: &Vector, v: &Vector) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(u.dot(v) / (nu * nv))
}

/// Pair probability `(a cos + b + 1) / 2`, clamped to `[eps, 1 - eps]`.
pub fn similarity(u: &Vector, v: &Vector, a: f64, b: f64) -> Result<f64> {
    let raw = (a * cosine(u, v)? + b + 1.0) / 2.0;
    Ok(raw.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

struct SimilarityGrad {
    p: f64,
    du: Vector,
    dv: Vector,
    da: f64,
    db: f64,
}

/// Similarity together with `dP/d(u, v, a, b)`; all zero where the clamp is
/// active.
fn similarity_with_grad(u: &Vector, v: &Vector, a: f64, b: f64) -> Result<SimilarityGrad> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cos = u.dot(v) / (nu * nv);
    let raw = (a * cos + b + 1.0) / 2.0;
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
        return Ok(SimilarityGrad {
            p: raw.clamp(PROB_EPS, 1.0 - PROB_EPS),
            du: Vector::zeros(u.len()),
            dv: Vector::zeros(v.len()),
            da: 0.0,
            db: 0.0,
        });
    }
    let half_a = a / 2.0;
    let du = (v / (nu * nv) - u * (cos / (nu * nu))) * half_a;
    let dv = (u / (nu * nv) - v * (cos / (nv * nv))) * half_a;
    Ok(SimilarityGrad {
        p: raw,
        du,
        dv,
        da: cos / 2.0,
        db: 0.5,
    })
}

/// Gradient of the metric loss.
#[derive(Debug, Clone)]
pub struct MetricGrad {
    pub embeddings: Vec<Vector>,
    pub a: f64,
    pub b: f64,
}

/// Mean `-ln P` over positives plus mean `-ln(1 - P)` over negatives; an
/// empty set contributes zero.
pub fn metric_loss(embeddings: &[Vector], pairs: &PairSets, a: f64, b: f64) -> Result<f64> {
    let mut loss = 0.0;
    if !pairs.positives.is_empty() {
        let mut sum = 0.0;
        for &(i, j) in &pairs.positives {
            sum -= similarity(&embeddings[i], &embeddings[j], a, b)?.ln();
        }
        loss += sum / pairs.n_positive() as f64;
    }
    if !pairs.negatives.is_empty() {
        let mut sum = 0.0;
        for &(i, j) in &pairs.negatives {
            sum -= (1.0 - similarity(&embeddings[i], &embeddings[j], a, b)?).ln();
        }
        loss += sum / pairs.n_negative() as f64;
    }
    Ok(loss)
}

pub fn metric_loss_with_grad(
    embeddings: &[Vector],
    pairs: &PairSets,
    a: f64,
    b: f64,
) -> Result<(f64, MetricGrad)> {
    let mut grad = MetricGrad {
        embeddings: embeddings.iter().map(|e| Vector::zeros(e.len())).collect(),
        a: 0.0,
        b: 0.0,
    };
    let mut loss = 0.0;
    for (set, positive) in [(&pairs.positives, true), (&pairs.negatives, false)] {
        if set.is_empty() {
            continue;
        }
        let n = set.len() as f64;
        for &(i, j) in set {
            let sg = similarity_with_grad(&embeddings[i], &embeddings[j], a, b)?;
            // d(-ln P)/dP = -1/P ; d(-ln(1-P))/dP = 1/(1-P)
            let (term, dp) = if positive {
                (-sg.p.ln(), -1.0 / sg.p)
            } else {
                (-(1.0 - sg.p).ln(), 1.0 / (1.0 - sg.p))
            };
            loss += term / n;
            let w = dp / n;
            grad.embeddings[i].scaled_add(w, &sg.du);
            grad.embeddings[j].scaled_add(w, &sg.dv);
            grad.a += w * sg.da;
            grad.b += w * sg.db;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Which loss terms participate in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSet {
    pub phone: bool,
    pub phrase: bool,
    pub spkr: bool,
    pub metric: bool,
}

impl Default for LossSet {
    fn default() -> Self {
        Self::all()
    }
}

impl LossSet {
    pub fn all() -> Self {
        Self {
            phone: true,
            phrase: true,
            spkr: true,
            metric: true,
        }
    }

    pub fn none() -> Self {
        Self {
            phone: false,
            phrase: false,
            spkr: false,
            metric: false,
        }
    }

    pub fn any_decoder(&self) -> bool {
        self.phrase || self.spkr || self.metric
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub phone: f64,
    pub phrase: f64,
    pub spkr: f64,
    pub metric: f64,
    pub total: f64,
}

/// Per-utterance loss terms; `None` where the utterance lacks the label.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UtteranceTerms {
    pub phone: Option<f64>,
    pub phrase: Option<f64>,
    pub spkr: Option<f64>,
}

fn masked_mean(values: impl Iterator<Item = Option<f64>>) -> (f64, usize) {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// Number of utterances contributing to each masked mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TermCounts {
    pub phone: usize,
    pub phrase: usize,
    pub spkr: usize,
}

/// Masked per-term means combined as
/// `phone + alpha*phrase + beta*spkr + gamma*metric`.
pub fn total_loss(
    terms: &[UtteranceTerms],
    metric: f64,
    weights: &LossWeights,
    active: &LossSet,
) -> (LossBreakdown, TermCounts) {
    let (phone, n_phone) = masked_mean(terms.iter().map(|t| t.phone.filter(|_| active.phone)));
    let (phrase, n_phrase) = masked_mean(terms.iter().map(|t| t.phrase.filter(|_| active.phrase)));
    let (spkr, n_spkr) = masked_mean(terms.iter().map(|t| t.spkr.filter(|_| active.spkr)));
    let metric = if active.metric { metric } else { 0.0 };
    (
        combine(phone, phrase, spkr, metric, weights),
        TermCounts {
            phone: n_phone,
            phrase: n_phrase,
            spkr: n_spkr,
        },
    )
}

pub fn combine(phone: f64, phrase: f64, spkr: f64, metric: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        phone,
        phrase,
        spkr,
        metric,
        total: phone + w.alpha * phrase + w.beta * spkr + w.gamma * metric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logs(p: Mat) -> Mat {
        p.mapv(f64::ln)
    }

    #[test]
    fn ctc_single_frame() {
        // classes {a, b, blank}
        let lp = logs(array![[0.6, 0.1, 0.3]]);
        assert_abs_diff_eq!(
            ctc_loss(&lp, &[0]).unwrap(),
            -(0.6f64.ln()),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(ctc_loss(&lp, &[0]).unwrap(), 0.5108, epsilon = 1e-4);
    }

    #[test]
    fn ctc_two_frames_enumerated() {
        // alignments aa, a-, -a: 3 * 0.25
        let lp = logs(array![[0.5, 0.5], [0.5, 0.5]]);
        let loss = ctc_loss(&lp, &[0]).unwrap();
        assert_abs_diff_eq!(loss, -(0.75f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.2877, epsilon = 1e-4);
    }

    #[test]
    fn ctc_repeat_needs_blank() {
        let lp = logs(array![[0.5, 0.5], [0.5, 0.5]]);
        assert!(matches!(
            ctc_loss(&lp, &[0, 0]),
            Err(Error::Unalignable { required: 3, .. })
        ));
        assert_eq!(ctc_keyword_score(&lp, &[0, 0]).unwrap(), f64::NEG_INFINITY);
        assert!(ctc_loss(&lp, &[1]).is_err(), "blank is not a label");
    }

    #[test]
    fn ctc_empty_labels_is_all_blank() {
        let lp = logs(array![[0.2, 0.8], [0.4, 0.6]]);
        assert_abs_diff_eq!(
            ctc_loss(&lp, &[]).unwrap(),
            -(0.8f64 * 0.6).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-3.0..0.0));
        let labels = [0, 2, 2, 1];
        let (_, grad) = ctc_loss_with_grad(&lp, &labels).unwrap();
        let h = 1e-6;
        for t in 0..6 {
            for k in 0..4 {
                let mut p = lp.clone();
                let mut m = lp.clone();
                p[[t, k]] += h;
                m[[t, k]] -= h;
                let num =
                    (ctc_loss(&p, &labels).unwrap() - ctc_loss(&m, &labels).unwrap()) / (2.0 * h);
                assert!((num - grad[[t, k]]).abs() < 1e-7, "{t},{k}");
            }
        }
    }

    #[test]
    fn keyword_score_definition_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-2.0..2.0));
        let lp = crate::nn::log_softmax_rows(&raw);
        let kw = [0, 1];
        assert_eq!(
            ctc_keyword_score(&lp, &kw).unwrap(),
            -ctc_loss(&lp, &kw).unwrap() / 5.0
        );

        // peaked on the alignment a a b b -
        let peaked = |p: f64| {
            let rest = (1.0 - p) / 3.0;
            let path = [0, 0, 1, 1, 3];
            Array2::from_shape_fn((5, 4), |(t, k)| if k == path[t] { p } else { rest })
                .mapv(f64::ln)
        };
        let s1 = ctc_keyword_score(&peaked(0.99), &kw).unwrap();
        let s2 = ctc_keyword_score(&peaked(0.999_999), &kw).unwrap();
        assert!(s1 < s2 && s2 < 0.0 && s2 > -1e-5);

        let shuffled = [1, 0];
        assert!(
            ctc_keyword_score(&peaked(0.9), &kw).unwrap()
                > ctc_keyword_score(&peaked(0.9), &shuffled).unwrap()
        );
    }

    #[test]
    fn phrase_ce_values() {
        assert_abs_diff_eq!(phrase_ce(0.0, true), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(phrase_ce(0.0, false), 2f64.ln(), epsilon = 1e-15);
        let closed = (-20f64).exp().ln_1p();
        assert_abs_diff_eq!(phrase_ce(20.0, true), closed, epsilon = 1e-20);
        assert!((phrase_ce(20.0, true) - 2.06e-9).abs() < 1e-11);
        for z in [-30.0, -1.5, 0.3, 7.0, 800.0] {
            assert_eq!(phrase_ce(z, true), phrase_ce(-z, false));
            assert!(phrase_ce(z, true).is_finite());
        }
        let h = 1e-6;
        for z in [-2.0, 0.1, 3.0] {
            let num = (phrase_ce(z + h, true) - phrase_ce(z - h, true)) / (2.0 * h);
            assert_abs_diff_eq!(num, phrase_ce_grad(z, true), epsilon = 1e-8);
        }
    }

    #[test]
    fn speaker_ce_values() {
        let k = 7;
        assert_abs_diff_eq!(
            speaker_ce(&Array1::zeros(k), 3).unwrap(),
            (k as f64).ln(),
            epsilon = 1e-14
        );
        let mut inf = Array1::zeros(k);
        inf[2] = f64::INFINITY;
        assert_eq!(speaker_ce(&inf, 2).unwrap(), 0.0);
        assert!(matches!(
            speaker_ce(&Array1::zeros(3), 3),
            Err(Error::IndexOutOfRange { .. })
        ));
        // direct evaluation of -log softmax
        let z = array![0.3, -1.2, 2.5, 0.0];
        let direct =
            -(z[1] as f64).exp().ln() + (z.iter().map(|v: &f64| v.exp()).sum::<f64>()).ln();
        assert_abs_diff_eq!(speaker_ce(&z, 1).unwrap(), direct, epsilon = 1e-14);
        let (_, g) = speaker_ce_with_grad(&z, 1).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut p = z.clone();
            let mut m = z.clone();
            p[i] += h;
            m[i] -= h;
            let num = (speaker_ce(&p, 1).unwrap() - speaker_ce(&m, 1).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(num, g[i], epsilon = 1e-8);
        }
    }

    fn meta(speaker: u64, keyword: bool) -> PairMeta {
        PairMeta {
            speaker: Some(speaker),
            keyword,
        }
    }

    #[test]
    fn pair_rules() {
        let p = build_pairs(&[meta(1, true), meta(1, true)], false);
        assert_eq!((p.n_positive(), p.n_negative()), (1, 0));
        let p = build_pairs(&[meta(1, true), meta(2, true)], false);
        assert_eq!((p.n_positive(), p.n_negative()), (0, 1));
        let p = build_pairs(&[meta(1, true), meta(1, false)], false);
        assert_eq!((p.n_positive(), p.n_negative()), (0, 1));
        let p = build_pairs(&[meta(1, false), meta(1, false)], false);
        assert_eq!((p.n_positive(), p.n_negative()), (0, 0));

        let anon = PairMeta {
            speaker: None,
            keyword: false,
        };
        let p = build_pairs(&[anon, anon, meta(3, false)], false);
        assert_eq!(p.n_negative(), 3);
        let p = build_pairs(&[anon, anon, meta(3, false)], true);
        assert_eq!(p.n_negative(), 0);
    }

    #[test]
    fn pair_count_for_paper_batch() {
        let batch: Vec<_> = (0..28)
            .flat_map(|s| (0..4).map(move |_| meta(s, true)))
            .collect();
        let p = build_pairs(&batch, false);
        assert_eq!(p.n_positive(), 28 * 6);
        assert_eq!(p.n_positive(), 168);
        assert_eq!(p.n_negative(), 112 * 111 / 2 - 168);
    }

    #[test]
    fn negative_subsampling() {
        let mut pairs = PairSets {
            positives: vec![(0, 1), (2, 3), (4, 5)],
            negatives: (0..100).map(|i| (i, i + 1)).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = subsample_negatives(&pairs, &mut rng);
        assert_eq!(out.n_negative(), 3);
        assert_eq!(out.positives, pairs.positives);
        assert!(out.negatives.iter().all(|n| pairs.negatives.contains(n)));
        let again = subsample_negatives(&pairs, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(out, again);

        pairs.negatives.truncate(2);
        assert_eq!(subsample_negatives(&pairs, &mut rng), pairs);
    }

    #[test]
    fn similarity_fixed_points() {
        let e = array![1.0, 2.0, -0.5];
        assert_eq!(similarity(&e, &e, 1.0, 0.0).unwrap(), 1.0 - PROB_EPS);
        assert_eq!(similarity(&e, &(-&e), 1.0, 0.0).unwrap(), PROB_EPS);
        let u = array![1.0, 0.0];
        let v = array![0.0, 3.0];
        assert_eq!(similarity(&u, &v, 1.0, 0.0).unwrap(), 0.5);
        assert!(matches!(
            similarity(&u, &array![0.0, 0.0], 1.0, 0.0),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn metric_loss_hand_example() {
        // cos chosen so that P = 0.8 and 0.3 with a=1, b=0
        let c_pos: f64 = 0.6;
        let c_neg: f64 = -0.4;
        let e = vec![
            array![1.0, 0.0],
            array![c_pos, (1.0 - c_pos * c_pos).sqrt()],
            array![1.0, 0.0],
            array![c_neg, (1.0 - c_neg * c_neg).sqrt()],
        ];
        let pairs = PairSets {
            positives: vec![(0, 1)],
            negatives: vec![(2, 3)],
        };
        let loss = metric_loss(&e, &pairs, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(loss, -(0.8f64.ln()) - 0.7f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.5798, epsilon = 1e-4);
        assert_eq!(
            metric_loss(&e, &PairSets::default(), 1.0, 0.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn metric_loss_perfect_separation() {
        let e = vec![array![1.0, 0.0], array![2.0, 0.0], array![-1.0, 0.0]];
        let pairs = PairSets {
            positives: vec![(0, 1)],
            negatives: vec![(0, 2)],
        };
        let loss = metric_loss(&e, &pairs, 1.0, 0.0).unwrap();
        assert!(loss < 3e-6);
    }

    #[test]
    fn metric_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let e: Vec<Vector> = (0..5)
            .map(|_| Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0)))
            .collect();
        let pairs = PairSets {
            positives: vec![(0, 1), (2, 3)],
            negatives: vec![(0, 4), (1, 2), (3, 4)],
        };
        let (a, b) = (0.8, 0.05);
        let (_, g) = metric_loss_with_grad(&e, &pairs, a, b).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            for k in 0..4 {
                let mut p = e.clone();
                let mut m = e.clone();
                p[i][k] += h;
                m[i][k] -= h;
                let num = (metric_loss(&p, &pairs, a, b).unwrap()
                    - metric_loss(&m, &pairs, a, b).unwrap())
                    / (2.0 * h);
                assert!((num - g.embeddings[i][k]).abs() < 1e-7);
            }
        }
        let num_a = (metric_loss(&e, &pairs, a + h, b).unwrap()
            - metric_loss(&e, &pairs, a - h, b).unwrap())
            / (2.0 * h);
        let num_b = (metric_loss(&e, &pairs, a, b + h).unwrap()
            - metric_loss(&e, &pairs, a, b - h).unwrap())
            / (2.0 * h);
        assert_abs_diff_eq!(num_a, g.a, epsilon = 1e-7);
        assert_abs_diff_eq!(num_b, g.b, epsilon = 1e-7);
    }

    #[test]
    fn weighted_total() {
        let b = combine(1.0, 2.0, 3.0, 4.0, &LossWeights::default());
        assert_abs_diff_eq!(b.total, 6.4, epsilon = 1e-12);

        let terms = [
            UtteranceTerms {
                phone: None,
                phrase: Some(1.0),
                spkr: Some(2.0),
            },
            UtteranceTerms {
                phone: None,
                phrase: Some(3.0),
                spkr: None,
            },
        ];
        let (b, counts) = total_loss(&terms, 5.0, &LossWeights::default(), &LossSet::all());
        assert_eq!(b.phone, 0.0);
        assert_eq!(counts.phone, 0);
        assert_abs_diff_eq!(b.phrase, 2.0);
        assert_abs_diff_eq!(b.spkr, 2.0);
        assert_abs_diff_eq!(b.total, 0.0 + 2.0 + 2.0 + 0.5);

        let no_metric = LossWeights {
            gamma: 0.0,
            ..Default::default()
        };
        let (x, _) = total_loss(&terms, 5.0, &no_metric, &LossSet::all());
        let (y, _) = total_loss(&terms, 500.0, &no_metric, &LossSet::all());
        assert_eq!(x.total, y.total);
    }
}
