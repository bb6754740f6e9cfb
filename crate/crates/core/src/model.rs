//! Transformer encoder (phonetic branch) and cross-attention decoder
//! (utterance embedding) with phrase, speaker and metric heads.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::{
    gaussian, impl_params, log_softmax_rows, sinusoidal_positions, Attention, AttentionCache,
    FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Linear, Mat, ParamView, ParamViewMut,
    Params, Vector,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub query_count: usize,
    /// Phoneme inventory size, excluding the CTC blank.
    pub phoneme_classes: usize,
    pub speaker_classes: usize,
    /// 1-based encoder block whose output feeds the decoder.
    pub tap_layer: usize,
    pub input_dim: usize,
    pub speaker_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_blocks: 6,
            dec_blocks: 1,
            d_model: 256,
            heads: 4,
            ffn_dim: 1024,
            query_count: 4,
            phoneme_classes: 54,
            speaker_classes: 30,
            tap_layer: 5,
            input_dim: 280,
            speaker_dropout: 0.6,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for CPU-scale experiments on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            ffn_dim: 64,
            phoneme_classes: 12,
            speaker_classes: 150,
            ..Self::default()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.d_model * self.query_count
    }

    /// Phoneme classes plus the trailing blank.
    pub fn output_classes(&self) -> usize {
        self.phoneme_classes + 1
    }

    pub fn blank(&self) -> usize {
        self.phoneme_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return bad("encoder and decoder need at least one block".into());
        }
        if self.tap_layer == 0 || self.tap_layer > self.enc_blocks {
            return bad(format!(
                "tap_layer {} outside 1..={}",
                self.tap_layer, self.enc_blocks
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.ffn_dim == 0
            || self.query_count == 0
            || self.phoneme_classes == 0
            || self.speaker_classes == 0
            || self.input_dim == 0
        {
            return bad("model dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.speaker_dropout) {
            return bad(format!(
                "speaker_dropout {} outside [0, 1)",
                self.speaker_dropout
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl_params!(EncoderBlock {
    norm1,
    attn,
    norm2,
    ffn
});

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub input: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub phoneme: Linear,
}

impl_params!(EncoderParams {
    input,
    blocks,
    final_norm,
    phoneme
});

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub memory_norm: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl_params!(DecoderBlock {
    norm1,
    self_attn,
    norm2,
    memory_norm,
    cross_attn,
    norm3,
    ffn
});

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// Trainable queries, `M x d`.
    pub queries: Mat,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
}

impl_params!(DecoderParams {
    queries,
    blocks,
    final_norm
});

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub phrase: Linear,
    pub speaker: Linear,
}

impl_params!(HeadParams { phrase, speaker });

/// Scale `a` and offset `b` of the cosine-to-probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricParams {
    pub scale: Vector,
    pub offset: Vector,
}

impl_params!(MetricParams { scale, offset });

impl MetricParams {
    pub fn new(a: f64, b: f64) -> Self {
        Self {
            scale: Array1::from_elem(1, a),
            offset: Array1::from_elem(1, b),
        }
    }

    pub fn a(&self) -> f64 {
        self.scale[0]
    }

    pub fn b(&self) -> f64 {
        self.offset[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub heads: HeadParams,
    pub metric: MetricParams,
}

impl_params!(ModelParams {
    encoder,
    decoder,
    heads,
    metric
});

/// Parameter groups used for freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("encoder.") {
            ParamGroup::Encoder
        } else {
            ParamGroup::Decoder
        }
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let encoder = EncoderParams {
            input: Linear::new(cfg.input_dim, d, rng),
            blocks: (0..cfg.enc_blocks)
                .map(|_| EncoderBlock {
                    norm1: LayerNorm::new(d),
                    attn: Attention::new(d, rng),
                    norm2: LayerNorm::new(d),
                    ffn: FeedForward::new(d, cfg.ffn_dim, rng),
                })
                .collect(),
            final_norm: LayerNorm::new(d),
            phoneme: Linear::new(d, cfg.output_classes(), rng),
        };
        let queries = gaussian(cfg.query_count, d, 1.0 / (d as f64).sqrt(), rng);
        let decoder = DecoderParams {
            queries,
            blocks: (0..cfg.dec_blocks)
                .map(|_| DecoderBlock {
                    norm1: LayerNorm::new(d),
                    self_attn: Attention::new(d, rng),
                    norm2: LayerNorm::new(d),
                    memory_norm: LayerNorm::new(d),
                    cross_attn: Attention::new(d, rng),
                    norm3: LayerNorm::new(d),
                    ffn: FeedForward::new(d, cfg.ffn_dim, rng),
                })
                .collect(),
            final_norm: LayerNorm::new(d),
        };
        let heads = HeadParams {
            phrase: Linear::new(cfg.embedding_dim(), 1, rng),
            speaker: Linear::new(cfg.embedding_dim(), cfg.speaker_classes, rng),
        };
        Ok(Self {
            encoder,
            decoder,
            heads,
            metric: MetricParams::new(1.0, 0.0),
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for v in self.tensors_mut() {
            v.data.fill(value);
        }
    }

    pub fn tensors(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        self.views("", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        self.views_mut("", &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Little-endian bytes of every tensor in a group, in parameter order.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        self.tensors()
            .iter()
            .filter(|t| ParamGroup::of(&t.name) == group)
            .flat_map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

struct EncoderBlockCache {
    ln1: LayerNormCache,
    normed1: Mat,
    attn: AttentionCache,
    ln2: LayerNormCache,
    normed2: Mat,
    ffn: FeedForwardCache,
}

struct EncoderHeadCache {
    norm: LayerNormCache,
    normed: Mat,
}

/// Forward activations retained for the encoder backward pass.
pub struct EncoderTrace {
    input: Mat,
    blocks: Vec<EncoderBlockCache>,
    head: Option<EncoderHeadCache>,
    pub taps: Vec<Mat>,
    pub log_posteriors: Option<Mat>,
}

impl EncoderTrace {
    /// Per-block, per-head self-attention weights.
    pub fn attention_weights(&self) -> Vec<&[Mat]> {
        self.blocks
            .iter()
            .map(|b| b.attn.probs.as_slice())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Output of every encoder block, each `T' x d`.
    pub taps: Vec<Mat>,
    /// Log-softmax over phonemes plus blank, `T' x (V+1)`.
    pub phoneme_log_posteriors: Mat,
}

fn check_input(x: &FeatureSequence, cfg: &ModelConfig) -> Result<()> {
    if x.frames.nrows() == 0 {
        return Err(Error::Empty("encoder input"));
    }
    if x.frames.ncols() != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("{} input dims", cfg.input_dim),
            actual: format!("{} input dims", x.frames.ncols()),
        });
    }
    if x.frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Runs the first `depth` encoder blocks; the phoneme head is applied only
/// when `depth == enc_blocks` and `with_head` is set.
pub fn encoder_trace(
    x: &FeatureSequence,
    params: &EncoderParams,
    cfg: &ModelConfig,
    depth: usize,
    with_head: bool,
) -> Result<EncoderTrace> {
    check_input(x, cfg)?;
    let input = x.frames.clone();
    let mut h = params.input.forward(&input) + sinusoidal_positions(input.nrows(), cfg.d_model);
    let mut blocks = Vec::with_capacity(depth);
    let mut taps = Vec::with_capacity(depth);
    for block in &params.blocks[..depth] {
        let (normed1, ln1) = block.norm1.forward(&h);
        let (attn_out, attn) = block.attn.forward(&normed1, &normed1, cfg.heads);
        let h1 = &h + &attn_out;
        let (normed2, ln2) = block.norm2.forward(&h1);
        let (ffn_out, ffn) = block.ffn.forward(&normed2);
        let out = h1 + ffn_out;
        h = out.clone();
        blocks.push(EncoderBlockCache {
            ln1,
            normed1,
            attn,
            ln2,
            normed2,
            ffn,
        });
        taps.push(out);
    }
    let (head, log_posteriors) = if with_head && depth == cfg.enc_blocks {
        let (normed, norm) = params.final_norm.forward(&h);
        let logits = params.phoneme.forward(&normed);
        (
            Some(EncoderHeadCache { norm, normed }),
            Some(log_softmax_rows(&logits)),
        )
    } else {
        (None, None)
    };
    Ok(EncoderTrace {
        input,
        blocks,
        head,
        taps,
        log_posteriors,
    })
}

pub fn encoder_forward(
    x: &FeatureSequence,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<EncoderOutput> {
    let trace = encoder_trace(x, &params.encoder, cfg, cfg.enc_blocks, true)?;
    Ok(EncoderOutput {
        taps: trace.taps,
        phoneme_log_posteriors: trace.log_posteriors.expect("head requested"),
    })
}

/// Backpropagates through the encoder.
///
/// `d_log_posteriors` is the upstream gradient of the phoneme head (if any);
/// `d_taps` lists `(tap_layer, gradient)` pairs with 1-based layers.
pub fn encoder_backward(
    params: &EncoderParams,
    trace: &EncoderTrace,
    d_log_posteriors: Option<&Mat>,
    d_taps: &[(usize, &Mat)],
    grads: &mut EncoderParams,
) {
    let depth = trace.blocks.len();
    let last = &trace.taps[depth - 1];
    let mut dh = Array2::zeros(last.raw_dim());
    if let (Some(dlp), Some(head), Some(lp)) =
        (d_log_posteriors, &trace.head, &trace.log_posteriors)
    {
        let dlogits = crate::nn::log_softmax_backward(lp, dlp);
        let dnormed = params
            .phoneme
            .backward(&head.normed, &dlogits, &mut grads.phoneme);
        dh += &params
            .final_norm
            .backward(&head.norm, &dnormed, &mut grads.final_norm);
    }
    for layer in (0..depth).rev() {
        for (tap, d) in d_taps {
            if *tap == layer + 1 {
                dh += *d;
            }
        }
        let block = &params.blocks[layer];
        let gblock = &mut grads.blocks[layer];
        let cache = &trace.blocks[layer];
        // out = h1 + ffn(norm2(h1)); h1 = in + attn(norm1(in))
        let dnormed2 = block
            .ffn
            .backward(&cache.normed2, &cache.ffn, &dh, &mut gblock.ffn);
        let dh1 = &dh
            + &block
                .norm2
                .backward(&cache.ln2, &dnormed2, &mut gblock.norm2);
        let (dq, dkv) = block.attn.backward(
            &cache.normed1,
            &cache.normed1,
            &cache.attn,
            &dh1,
            &mut gblock.attn,
        );
        let dnormed1 = dq + dkv;
        dh = &dh1
            + &block
                .norm1
                .backward(&cache.ln1, &dnormed1, &mut gblock.norm1);
    }
    params.input.backward(&trace.input, &dh, &mut grads.input);
}

/// Fixed-length utterance embedding: `M` decoder outputs concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEmbedding(pub Vector);

impl UtteranceEmbedding {
    pub fn values(&self) -> &Vector {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct DecoderBlockCache {
    ln1: LayerNormCache,
    normed1: Mat,
    self_attn: AttentionCache,
    ln2: LayerNormCache,
    normed2: Mat,
    mem_ln: LayerNormCache,
    mem_normed: Mat,
    cross: AttentionCache,
    ln3: LayerNormCache,
    normed3: Mat,
    ffn: FeedForwardCache,
}

pub struct DecoderTrace {
    blocks: Vec<DecoderBlockCache>,
    final_ln: LayerNormCache,
    pub embedding: UtteranceEmbedding,
}

impl DecoderTrace {
    /// Cross-attention weights of every decoder block (`M x T'` per head).
    pub fn cross_attention_weights(&self) -> Vec<&[Mat]> {
        self.blocks
            .iter()
            .map(|b| b.cross.probs.as_slice())
            .collect()
    }
}

pub fn decoder_trace(
    memory: &Mat,
    params: &DecoderParams,
    cfg: &ModelConfig,
) -> Result<DecoderTrace> {
    if memory.nrows() == 0 {
        return Err(Error::Empty("decoder memory"));
    }
    if memory.ncols() != cfg.d_model {
        return Err(Error::ShapeMismatch {
            expected: format!("{} memory dims", cfg.d_model),
            actual: format!("{} memory dims", memory.ncols()),
        });
    }
    let mut g = params.queries.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (normed1, ln1) = block.norm1.forward(&g);
        let (sa, self_attn) = block.self_attn.forward(&normed1, &normed1, cfg.heads);
        let g1 = &g + &sa;
        let (normed2, ln2) = block.norm2.forward(&g1);
        let (mem_normed, mem_ln) = block.memory_norm.forward(memory);
        let (ca, cross) = block.cross_attn.forward(&normed2, &mem_normed, cfg.heads);
        let g2 = g1 + ca;
        let (normed3, ln3) = block.norm3.forward(&g2);
        let (ff, ffn) = block.ffn.forward(&normed3);
        g = g2 + ff;
        blocks.push(DecoderBlockCache {
            ln1,
            normed1,
            self_attn,
            ln2,
            normed2,
            mem_ln,
            mem_normed,
            cross,
            ln3,
            normed3,
            ffn,
        });
    }
    let (out, final_ln) = params.final_norm.forward(&g);
    let flat = Array1::from_iter(out.iter().copied());
    Ok(DecoderTrace {
        blocks,
        final_ln,
        embedding: UtteranceEmbedding(flat),
    })
}

pub fn decoder_forward(
    memory: &Mat,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<UtteranceEmbedding> {
    Ok(decoder_trace(memory, &params.decoder, cfg)?.embedding)
}

/// Returns the gradient with respect to the decoder memory.
pub fn decoder_backward(
    params: &DecoderParams,
    trace: &DecoderTrace,
    d_embedding: &Vector,
    grads: &mut DecoderParams,
) -> Mat {
    let (m, d) = params.queries.dim();
    let dout = d_embedding
        .to_shape((m, d))
        .expect("embedding is M*d")
        .to_owned();
    let mut dg = params
        .final_norm
        .backward(&trace.final_ln, &dout, &mut grads.final_norm);
    let mut dmemory: Option<Mat> = None;
    for (idx, block) in params.blocks.iter().enumerate().rev() {
        let gblock = &mut grads.blocks[idx];
        let c = &trace.blocks[idx];
        let dnormed3 = block.ffn.backward(&c.normed3, &c.ffn, &dg, &mut gblock.ffn);
        let dg2 = &dg + &block.norm3.backward(&c.ln3, &dnormed3, &mut gblock.norm3);
        let (dnormed2, dmem_normed) = block.cross_attn.backward(
            &c.normed2,
            &c.mem_normed,
            &c.cross,
            &dg2,
            &mut gblock.cross_attn,
        );
        let dmem = block
            .memory_norm
            .backward(&c.mem_ln, &dmem_normed, &mut gblock.memory_norm);
        match dmemory.as_mut() {
            Some(acc) => *acc += &dmem,
            None => dmemory = Some(dmem),
        }
        let dg1 = &dg2 + &block.norm2.backward(&c.ln2, &dnormed2, &mut gblock.norm2);
        let (dq, dkv) = block.self_attn.backward(
            &c.normed1,
            &c.normed1,
            &c.self_attn,
            &dg1,
            &mut gblock.self_attn,
        );
        dg = &dg1 + &block.norm1.backward(&c.ln1, &(dq + dkv), &mut gblock.norm1);
    }
    grads.queries += &dg;
    dmemory.expect("decoder has at least one block")
}

pub fn phrase_logit(e: &UtteranceEmbedding, params: &ModelParams) -> f64 {
    params.heads.phrase.forward_vec(&e.0)[0]
}

/// Inverted-dropout mask over embedding dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vector);

impl DropoutMask {
    pub fn sample(dim: usize, rate: f64, rng: &mut impl Rng) -> Self {
        if rate <= 0.0 {
            return Self::identity(dim);
        }
        let keep = 1.0 - rate;
        Self(Array1::from_shape_simple_fn(dim, || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        }))
    }

    pub fn identity(dim: usize) -> Self {
        Self(Array1::ones(dim))
    }
}

pub fn speaker_logits_masked(
    e: &UtteranceEmbedding,
    params: &ModelParams,
    mask: &DropoutMask,
) -> Vector {
    params.heads.speaker.forward_vec(&(&e.0 * &mask.0))
}

/// Speaker-ID logits; dropout is active only when `training`.
pub fn speaker_logits(
    e: &UtteranceEmbedding,
    params: &ModelParams,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Vector {
    let mask = if training {
        DropoutMask::sample(e.len(), cfg.speaker_dropout, rng)
    } else {
        DropoutMask::identity(e.len())
    };
    speaker_logits_masked(e, params, &mask)
}

/// Full evaluation-mode pass: encoder, decoder at the tap layer, phrase head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn encode(&self, x: &FeatureSequence) -> Result<EncoderOutput> {
        encoder_forward(x, &self.params, &self.config)
    }

    /// Embedding only; skips encoder blocks above the tap layer.
    pub fn embed(&self, x: &FeatureSequence) -> Result<UtteranceEmbedding> {
        let trace = encoder_trace(
            x,
            &self.params.encoder,
            &self.config,
            self.config.tap_layer,
            false,
        )?;
        decoder_forward(
            &trace.taps[self.config.tap_layer - 1],
            &self.params,
            &self.config,
        )
    }

    /// Phoneme log-posteriors and the decoder embedding in one pass.
    pub fn analyze(&self, x: &FeatureSequence) -> Result<(Mat, UtteranceEmbedding)> {
        let out = self.encode(x)?;
        let emb = decoder_forward(
            &out.taps[self.config.tap_layer - 1],
            &self.params,
            &self.config,
        )?;
        Ok((out.phoneme_log_posteriors, emb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row_sums_close(m: &Mat, tol: f64) -> bool {
        m.sum_axis(Axis(1)).iter().all(|s| (s - 1.0).abs() <= tol)
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            enc_blocks: 2,
            dec_blocks: 1,
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
            query_count: 2,
            phoneme_classes: 4,
            speaker_classes: 3,
            tap_layer: 1,
            input_dim: 6,
            speaker_dropout: 0.6,
        }
    }

    fn input(t: usize, dim: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence::new(gaussian(t, dim, 1.0, &mut rng), 33.3).unwrap()
    }

    #[test]
    fn paper_dimensions() {
        let cfg = ModelConfig::default();
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = input(10, 280, 1);
        let out = model.encode(&x).unwrap();
        assert_eq!(out.taps.len(), 6);
        assert!(out.taps.iter().all(|t| t.dim() == (10, 256)));
        assert_eq!(out.phoneme_log_posteriors.dim(), (10, 55));
        assert!(row_sums_close(
            &out.phoneme_log_posteriors.mapv(f64::exp),
            1e-6
        ));
        let e = model.embed(&x).unwrap();
        assert_eq!(e.len(), 1024);
    }

    #[test]
    fn attention_weights_normalized() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let trace = encoder_trace(&input(7, 6, 2), &params.encoder, &cfg, 2, true).unwrap();
        for block in trace.attention_weights() {
            for p in block {
                assert!(row_sums_close(p, 1e-6));
            }
        }
        let dec = decoder_trace(&trace.taps[0], &params.decoder, &cfg).unwrap();
        for block in dec.cross_attention_weights() {
            for p in block {
                assert_eq!(p.dim(), (2, 7));
                assert!(row_sums_close(p, 1e-6));
            }
        }
    }

    #[test]
    fn positional_encoding_breaks_permutation_symmetry() {
        let cfg = tiny();
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = input(5, 6, 9);
        let mut swapped = x.clone();
        let r0 = x.frames.row(0).to_owned();
        let r1 = x.frames.row(1).to_owned();
        swapped.frames.row_mut(0).assign(&r1);
        swapped.frames.row_mut(1).assign(&r0);
        let a = model.encode(&x).unwrap();
        let b = model.encode(&swapped).unwrap();
        let diff = (&a.taps[1].row(3) - &b.taps[1].row(3)).mapv(f64::abs).sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn embedding_size_fixed_and_deterministic() {
        let cfg = tiny();
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let short = model.embed(&input(5, 6, 1)).unwrap();
        let long = model.embed(&input(50, 6, 2)).unwrap();
        assert_eq!(short.len(), cfg.embedding_dim());
        assert_eq!(long.len(), cfg.embedding_dim());
        let again = model.embed(&input(5, 6, 1)).unwrap();
        assert_eq!(
            short.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn input_validation() {
        let cfg = tiny();
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let wrong = input(3, 5, 1);
        assert!(matches!(
            model.encode(&wrong),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut nan = input(3, 6, 1);
        nan.frames[[1, 1]] = f64::NAN;
        assert!(matches!(model.encode(&nan), Err(Error::NonFinite)));
        let empty = FeatureSequence {
            frames: Array2::zeros((0, 6)),
            frame_rate: 1.0,
        };
        assert!(matches!(model.encode(&empty), Err(Error::Empty(_))));
        let params = &model.params;
        assert!(decoder_forward(&Array2::zeros((3, 7)), params, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.tap_layer = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
    }

    #[test]
    fn phrase_head_is_affine() {
        let cfg = tiny();
        let mut params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let e = UtteranceEmbedding(Array1::linspace(-1.0, 1.0, cfg.embedding_dim()));
        let bias = 0.25;
        params.heads.phrase.bias[0] = bias;
        let z = phrase_logit(&e, &params);
        let z2 = phrase_logit(&UtteranceEmbedding(&e.0 * 2.0), &params);
        assert!(((z2 - bias) - 2.0 * (z - bias)).abs() < 1e-12);
        // explicit dot product
        let w = params.heads.phrase.weight.column(0);
        let manual: f64 = e.0.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() + bias;
        assert!((z - manual).abs() < 1e-12);

        let zero = params.zeros_like();
        assert_eq!(phrase_logit(&e, &zero), 0.0);
    }

    #[test]
    fn speaker_dropout_modes() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let e = UtteranceEmbedding(Array1::linspace(-1.0, 2.0, cfg.embedding_dim()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eval = speaker_logits(&e, &params, &cfg, false, &mut rng);
        let plain = params.heads.speaker.forward_vec(&e.0);
        assert_eq!(eval, plain);

        let no_drop = ModelConfig {
            speaker_dropout: 0.0,
            ..cfg
        };
        assert_eq!(speaker_logits(&e, &params, &no_drop, true, &mut rng), plain);

        let n = 20_000;
        let mut mean = Array1::<f64>::zeros(cfg.speaker_classes);
        for _ in 0..n {
            mean += &speaker_logits(&e, &params, &cfg, true, &mut rng);
        }
        mean /= n as f64;
        let scale = plain.mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        for (m, p) in mean.iter().zip(plain.iter()) {
            assert!((m - p).abs() <= 0.02 * scale, "{m} vs {p}");
        }
    }

    #[test]
    fn group_bytes_split() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let enc = params.group_bytes(ParamGroup::Encoder);
        let dec = params.group_bytes(ParamGroup::Decoder);
        assert_eq!((enc.len() + dec.len()) / 8, params.parameter_count());
    }
}
