use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    attend, attention_bwd, attention_fwd, feed_forward_bwd, feed_forward_fwd, layer_norm_bwd,
    layer_norm_fwd, log_softmax_rows, sinusoidal_positions, AttentionCache, FeedForwardCache,
    LayerNormCache, Mask,
};
use super::params::{FeedForwardParams, LayerNormParams, Params};
use super::tokenizer::{InputSequence, BOS, PAD};
use super::{ModelConfig, Real};
use crate::error::{Error, Result};

/// Encoder output for one (question, visual context, passage) input.
/// Rows past `len` correspond to padding and are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPassage<R> {
    pub hidden: Array2<R>,
    pub len: usize,
}

/// Row-wise concatenation of the per-passage encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedState<R> {
    pub hidden: Array2<R>,
    /// Start row of each passage block.
    pub boundaries: Vec<usize>,
    /// Whether each row is a real token (false for padding).
    pub valid: Vec<bool>,
}

impl<R> FusedState<R> {
    pub fn num_passages(&self) -> usize {
        self.boundaries.len()
    }

    pub fn block_rows(&self) -> usize {
        self.valid.len() / self.boundaries.len().max(1)
    }
}

pub fn fuse<R: Real>(encodings: &[EncodedPassage<R>]) -> Result<FusedState<R>> {
    let first = encodings
        .first()
        .ok_or_else(|| Error::InvalidArgument("fusion needs at least one passage".into()))?;
    let shape = first.hidden.dim();
    if let Some(bad) = encodings.iter().find(|e| e.hidden.dim() != shape) {
        return Err(Error::InvalidArgument(format!(
            "encoding shape {:?} differs from {:?}",
            bad.hidden.dim(),
            shape
        )));
    }
    let views: Vec<_> = encodings.iter().map(|e| e.hidden.view()).collect();
    let hidden = concatenate(Axis(0), &views).expect("uniform shapes");
    let boundaries = (0..encodings.len()).map(|i| i * shape.0).collect();
    let valid = encodings
        .iter()
        .flat_map(|e| (0..shape.0).map(move |r| r < e.len))
        .collect();
    Ok(FusedState {
        hidden,
        boundaries,
        valid,
    })
}

/// Decoder-side view of a fused state: the non-padding rows plus the
/// cross-attention keys and values of every decoder layer.
#[derive(Debug, Clone)]
pub struct Memory<R> {
    passage_of_row: Vec<usize>,
    num_passages: usize,
    keys_values: Vec<(Array2<R>, Array2<R>)>,
}

impl<R> Memory<R> {
    pub fn num_passages(&self) -> usize {
        self.num_passages
    }

    /// Passage index of each memory row.
    pub fn passage_of_row(&self) -> &[usize] {
        &self.passage_of_row
    }
}

struct EncoderLayerCache<R> {
    norm_attn: LayerNormCache<R>,
    attn: AttentionCache<R>,
    norm_ffn: LayerNormCache<R>,
    ffn: FeedForwardCache<R>,
}

struct EncoderCache<R> {
    ids: Vec<u32>,
    layers: Vec<EncoderLayerCache<R>>,
    norm: LayerNormCache<R>,
}

struct DecoderLayerCache<R> {
    norm_self: LayerNormCache<R>,
    self_attn: AttentionCache<R>,
    norm_cross: LayerNormCache<R>,
    cross_attn: AttentionCache<R>,
    norm_ffn: LayerNormCache<R>,
    ffn: FeedForwardCache<R>,
}

/// Fusion-in-decoder encoder-decoder transformer (pre-norm, sinusoidal
/// positions, GELU feed-forward, untied output projection).
#[derive(Debug, Clone, PartialEq)]
pub struct FidModel<R> {
    config: ModelConfig,
    params: Params<R>,
    positions: Array2<R>,
}

impl<R: Real> FidModel<R> {
    /// Random initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(&config, &mut rng);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: Params<R>) -> Result<Self> {
        config.validate()?;
        let expected = Params::<R>::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let shapes = |p: &Params<R>| -> Vec<(String, Vec<usize>)> {
            p.named().into_iter().map(|(n, s, _)| (n, s)).collect()
        };
        if shapes(&expected) != shapes(&params) {
            return Err(Error::InvalidArgument(
                "parameter shapes do not match the model config".into(),
            ));
        }
        let rows = config.max_input_len.max(config.max_decode_len + 1);
        Ok(FidModel {
            positions: sinusoidal_positions(rows, config.hidden),
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<R> {
        &mut self.params
    }

    pub fn into_params(self) -> Params<R> {
        self.params
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32]) -> Array2<R> {
        let h = self.config.hidden;
        let mut x = Array2::zeros((ids.len(), h));
        for (i, &t) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.params.embed.row(t as usize));
            row += &self.positions.row(i);
        }
        x
    }

    fn scatter_embed_grad(grad: &mut Params<R>, ids: &[u32], dx: &Array2<R>) {
        for (i, &t) in ids.iter().enumerate() {
            let mut row = grad.embed.row_mut(t as usize);
            row += &dx.row(i);
        }
    }

    fn encoder_forward(&self, ids: &[u32]) -> (Array2<R>, EncoderCache<R>) {
        let heads = self.config.heads;
        let mut x = self.embed(ids);
        let mut layers = Vec::with_capacity(self.params.encoder.len());
        for layer in &self.params.encoder {
            let (a, norm_attn) = layer_norm_fwd(&x, &layer.norm_attn);
            let (att, attn) = attention_fwd(&layer.attn, &a, &a, heads, Mask::None);
            x += &att;
            let (b, norm_ffn) = layer_norm_fwd(&x, &layer.norm_ffn);
            let (ff, ffn) = feed_forward_fwd(&layer.ffn, &b);
            x += &ff;
            layers.push(EncoderLayerCache {
                norm_attn,
                attn,
                norm_ffn,
                ffn,
            });
        }
        let (out, norm) = layer_norm_fwd(&x, &self.params.encoder_norm);
        (
            out,
            EncoderCache {
                ids: ids.to_vec(),
                layers,
                norm,
            },
        )
    }

    fn encoder_backward(&self, dout: &Array2<R>, cache: &EncoderCache<R>, grad: &mut Params<R>) {
        let mut dx = layer_norm_bwd(
            dout,
            &self.params.encoder_norm,
            &cache.norm,
            &mut grad.encoder_norm,
        );
        for ((layer, lc), g) in self
            .params
            .encoder
            .iter()
            .zip(&cache.layers)
            .zip(grad.encoder.iter_mut())
            .rev()
        {
            let db = feed_forward_bwd(&dx, &layer.ffn, &lc.ffn, &mut g.ffn);
            dx += &layer_norm_bwd(&db, &layer.norm_ffn, &lc.norm_ffn, &mut g.norm_ffn);
            let (dq, dkv) = attention_bwd(&dx, &layer.attn, &lc.attn, &mut g.attn);
            let da = dq + dkv;
            dx += &layer_norm_bwd(&da, &layer.norm_attn, &lc.norm_attn, &mut g.norm_attn);
        }
        Self::scatter_embed_grad(grad, &cache.ids, &dx);
    }

    /// Encodes one input; padding positions take no part in attention and
    /// their output rows are zero.
    pub fn encode(&self, input: &InputSequence) -> Result<EncodedPassage<R>> {
        if input.ids.len() > self.config.max_input_len {
            return Err(Error::InvalidArgument(format!(
                "input of {} tokens exceeds max_input_len {}",
                input.ids.len(),
                self.config.max_input_len
            )));
        }
        if input.len > input.ids.len() {
            return Err(Error::InvalidArgument(
                "input length exceeds id count".into(),
            ));
        }
        self.check_ids(&input.ids)?;
        let mut hidden = Array2::zeros((input.ids.len(), self.config.hidden));
        if input.len > 0 {
            let (out, _) = self.encoder_forward(input.valid());
            hidden.slice_mut(s![..input.len, ..]).assign(&out);
        }
        Ok(EncodedPassage {
            hidden,
            len: input.len,
        })
    }

    pub fn encode_all(&self, inputs: &[InputSequence]) -> Result<FusedState<R>> {
        let encodings = inputs
            .iter()
            .map(|i| self.encode(i))
            .collect::<Result<Vec<_>>>()?;
        fuse(&encodings)
    }

    /// Compacts the fused state to its valid rows and projects the
    /// cross-attention keys and values once per decoder layer.
    pub fn prepare(&self, fused: &FusedState<R>) -> Memory<R> {
        let block = fused.block_rows();
        let keep: Vec<usize> = (0..fused.valid.len()).filter(|&r| fused.valid[r]).collect();
        let rows = fused.hidden.select(Axis(0), &keep);
        let passage_of_row = keep.iter().map(|&r| r / block.max(1)).collect();
        let keys_values = self
            .params
            .decoder
            .iter()
            .map(|l| (rows.dot(&l.cross_attn.wk), rows.dot(&l.cross_attn.wv)))
            .collect();
        Memory {
            passage_of_row,
            num_passages: fused.num_passages(),
            keys_values,
        }
    }

    /// Encoder-decoder forward without the fusion step: the single
    /// encoder output is used directly as decoder memory.
    pub fn plain_decode_step(&self, input: &InputSequence, prefix: &[u32]) -> Result<Array1<R>> {
        self.check_ids(&input.ids)?;
        let (rows, _) = self.encoder_forward(input.valid());
        let keys_values = self
            .params
            .decoder
            .iter()
            .map(|l| (rows.dot(&l.cross_attn.wk), rows.dot(&l.cross_attn.wv)))
            .collect();
        let memory = Memory {
            passage_of_row: vec![0; rows.nrows()],
            num_passages: 1,
            keys_values,
        };
        self.decode_step(&memory, prefix)
    }

    fn feed_forward(p: &FeedForwardParams<R>, x: &Array2<R>) -> Array2<R> {
        feed_forward_fwd(p, x).0
    }

    fn norm(x: &Array2<R>, p: &LayerNormParams<R>) -> Array2<R> {
        layer_norm_fwd(x, p).0
    }

    /// Decoder hidden states for `inputs`; optionally records the
    /// cross-attention probabilities as `[layer][head]` matrices.
    fn decode_hidden(
        &self,
        memory: &Memory<R>,
        inputs: &[u32],
        mut probe: Option<&mut Vec<Vec<Array2<R>>>>,
    ) -> Array2<R> {
        let heads = self.config.heads;
        let mut y = self.embed(inputs);
        for (layer, (k, v)) in self.params.decoder.iter().zip(&memory.keys_values) {
            let a = Self::norm(&y, &layer.norm_self);
            let sa = &layer.self_attn;
            let (ctx, _) = attend(
                &a.dot(&sa.wq),
                &a.dot(&sa.wk),
                &a.dot(&sa.wv),
                heads,
                Mask::Causal,
            );
            y += &ctx.dot(&sa.wo);
            let b = Self::norm(&y, &layer.norm_cross);
            let ca = &layer.cross_attn;
            let (ctx, probs) = attend(&b.dot(&ca.wq), k, v, heads, Mask::None);
            y += &ctx.dot(&ca.wo);
            if let Some(p) = probe.as_deref_mut() {
                p.push(probs);
            }
            let c = Self::norm(&y, &layer.norm_ffn);
            y += &Self::feed_forward(&layer.ffn, &c);
        }
        Self::norm(&y, &self.params.decoder_norm)
    }

    fn check_prefix(&self, prefix: &[u32]) -> Result<()> {
        if prefix.len() >= self.config.max_decode_len {
            return Err(Error::InvalidArgument(format!(
                "prefix of {} tokens reaches max_decode_len {}",
                prefix.len(),
                self.config.max_decode_len
            )));
        }
        self.check_ids(prefix)
    }

    fn decoder_inputs(prefix: &[u32]) -> Vec<u32> {
        std::iter::once(BOS).chain(prefix.iter().copied()).collect()
    }

    fn tie_scale(&self) -> R {
        super::real::<R>(1.0 / (self.config.hidden as f64).sqrt())
    }

    /// Vocabulary logits for each row of decoder output.
    fn logits(&self, hidden: &Array2<R>) -> Array2<R> {
        match &self.params.lm_head {
            Some(w) => hidden.dot(w),
            None => hidden.dot(&self.params.embed.t()) * self.tie_scale(),
        }
    }

    fn last_logits(&self, memory: &Memory<R>, prefix: &[u32]) -> Result<Array1<R>> {
        self.check_prefix(prefix)?;
        let hidden = self.decode_hidden(memory, &Self::decoder_inputs(prefix), None);
        let last = hidden.slice(s![hidden.nrows() - 1.., ..]).to_owned();
        Ok(self.logits(&last).row(0).to_owned())
    }

    /// Next-token distribution after `prefix` (generated tokens, without BOS).
    pub fn decode_step(&self, memory: &Memory<R>, prefix: &[u32]) -> Result<Array1<R>> {
        let logits = self.last_logits(memory, prefix)?;
        let max = logits.iter().copied().fold(R::neg_infinity(), R::max);
        let mut p = logits.mapv(|v| (v - max).exp());
        let total = p.sum();
        p.mapv_inplace(|v| v / total);
        Ok(p)
    }

    /// Natural-log next-token probabilities after `prefix`.
    pub fn next_log_probs(&self, memory: &Memory<R>, prefix: &[u32]) -> Result<Vec<f64>> {
        let logits = self.last_logits(memory, prefix)?.insert_axis(Axis(0));
        Ok(log_softmax_rows(&logits)
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect())
    }

    fn check_target(&self, target: &[u32]) -> Result<usize> {
        if target.len() > self.config.max_decode_len {
            return Err(Error::InvalidArgument(format!(
                "target of {} tokens exceeds max_decode_len {}",
                target.len(),
                self.config.max_decode_len
            )));
        }
        self.check_ids(target)?;
        let count = target.iter().filter(|&&t| t != PAD).count();
        if count == 0 {
            return Err(Error::InvalidArgument("empty target".into()));
        }
        Ok(count)
    }

    /// Teacher-forced mean cross-entropy over the non-padding target positions.
    pub fn training_loss(&self, fused: &FusedState<R>, target: &[u32]) -> Result<R> {
        let count = self.check_target(target)?;
        let memory = self.prepare(fused);
        let inputs = Self::decoder_inputs(&target[..target.len() - 1]);
        let hidden = self.decode_hidden(&memory, &inputs, None);
        let logp = log_softmax_rows(&self.logits(&hidden));
        debug_assert_eq!(count, target.iter().filter(|&&t| t != PAD).count());
        Ok(mean_nll(&logp, target))
    }

    /// Per-position log-probabilities under teacher forcing, one row per
    /// target position.
    pub fn teacher_forced_log_probs(
        &self,
        fused: &FusedState<R>,
        target: &[u32],
    ) -> Result<Array2<R>> {
        self.check_target(target)?;
        let memory = self.prepare(fused);
        let inputs = Self::decoder_inputs(&target[..target.len() - 1]);
        let hidden = self.decode_hidden(&memory, &inputs, None);
        Ok(log_softmax_rows(&self.logits(&hidden)))
    }

    /// Loss and its gradient with respect to every parameter, backpropagated
    /// through the decoder, the fusion and each passage encoding.
    pub fn loss_and_gradient(
        &self,
        inputs: &[InputSequence],
        target: &[u32],
    ) -> Result<(R, Params<R>)> {
        let count = self.check_target(target)?;
        if inputs.is_empty() {
            return Err(Error::InvalidArgument(
                "fusion needs at least one passage".into(),
            ));
        }
        for input in inputs {
            self.check_ids(&input.ids)?;
            if input.ids.len() > self.config.max_input_len || input.len > input.ids.len() {
                return Err(Error::InvalidArgument("malformed encoder input".into()));
            }
        }
        let heads = self.config.heads;
        let mut grad = self.params.zeros_like();

        let encoded: Vec<(Array2<R>, EncoderCache<R>)> = inputs
            .iter()
            .filter(|i| i.len > 0)
            .map(|i| self.encoder_forward(i.valid()))
            .collect();
        let views: Vec<_> = encoded.iter().map(|(o, _)| o.view()).collect();
        let memory = if views.is_empty() {
            Array2::zeros((0, self.config.hidden))
        } else {
            concatenate(Axis(0), &views).expect("uniform width")
        };

        let dec_inputs = Self::decoder_inputs(&target[..target.len() - 1]);
        let mut y = self.embed(&dec_inputs);
        let mut caches = Vec::with_capacity(self.params.decoder.len());
        for layer in &self.params.decoder {
            let (a, norm_self) = layer_norm_fwd(&y, &layer.norm_self);
            let (sa, self_attn) = attention_fwd(&layer.self_attn, &a, &a, heads, Mask::Causal);
            y += &sa;
            let (b, norm_cross) = layer_norm_fwd(&y, &layer.norm_cross);
            let (ca, cross_attn) = attention_fwd(&layer.cross_attn, &b, &memory, heads, Mask::None);
            y += &ca;
            let (c, norm_ffn) = layer_norm_fwd(&y, &layer.norm_ffn);
            let (ff, ffn) = feed_forward_fwd(&layer.ffn, &c);
            y += &ff;
            caches.push(DecoderLayerCache {
                norm_self,
                self_attn,
                norm_cross,
                cross_attn,
                norm_ffn,
                ffn,
            });
        }
        let (out, final_norm) = layer_norm_fwd(&y, &self.params.decoder_norm);
        let logp = log_softmax_rows(&self.logits(&out));

        let scale = R::one() / super::real(count as f64);
        let mut loss = R::zero();
        let mut dlogits = logp.mapv(|v| v.exp() * scale);
        for (i, &t) in target.iter().enumerate() {
            if t == PAD {
                dlogits.row_mut(i).fill(R::zero());
            } else {
                loss -= logp[(i, t as usize)] * scale;
                dlogits[(i, t as usize)] -= scale;
            }
        }

        let dout = match (&self.params.lm_head, grad.lm_head.as_mut()) {
            (Some(w), Some(gw)) => {
                *gw += &out.t().dot(&dlogits);
                dlogits.dot(&w.t())
            }
            _ => {
                let tie = self.tie_scale();
                grad.embed.scaled_add(tie, &dlogits.t().dot(&out));
                dlogits.dot(&self.params.embed) * tie
            }
        };
        let mut dy = layer_norm_bwd(
            &dout,
            &self.params.decoder_norm,
            &final_norm,
            &mut grad.decoder_norm,
        );
        let mut dmemory = Array2::zeros(memory.raw_dim());
        for ((layer, lc), g) in self
            .params
            .decoder
            .iter()
            .zip(&caches)
            .zip(grad.decoder.iter_mut())
            .rev()
        {
            let dc = feed_forward_bwd(&dy, &layer.ffn, &lc.ffn, &mut g.ffn);
            dy += &layer_norm_bwd(&dc, &layer.norm_ffn, &lc.norm_ffn, &mut g.norm_ffn);
            let (db, dmem) =
                attention_bwd(&dy, &layer.cross_attn, &lc.cross_attn, &mut g.cross_attn);
            dmemory += &dmem;
            dy += &layer_norm_bwd(&db, &layer.norm_cross, &lc.norm_cross, &mut g.norm_cross);
            let (dq, dkv) = attention_bwd(&dy, &layer.self_attn, &lc.self_attn, &mut g.self_attn);
            let da = dq + dkv;
            dy += &layer_norm_bwd(&da, &layer.norm_self, &lc.norm_self, &mut g.norm_self);
        }
        Self::scatter_embed_grad(&mut grad, &dec_inputs, &dy);

        let mut offset = 0;
        for (enc_out, cache) in &encoded {
            let n = enc_out.nrows();
            let d = dmemory.slice(s![offset..offset + n, ..]).to_owned();
            self.encoder_backward(&d, cache, &mut grad);
            offset += n;
        }
        Ok((loss, grad))
    }

    /// Cross-attention probabilities while reading `generated`, as
    /// `[layer][head]` matrices of shape `positions × memory rows`. Position
    /// `j` is the decoder step that produced `generated[j]`; an empty
    /// sequence is read as the single BOS step.
    pub fn cross_attention(
        &self,
        memory: &Memory<R>,
        generated: &[u32],
    ) -> Result<Vec<Vec<Array2<R>>>> {
        let prefix = &generated[..generated.len().saturating_sub(1)];
        self.check_prefix(prefix)?;
        let mut maps = Vec::new();
        self.decode_hidden(memory, &Self::decoder_inputs(prefix), Some(&mut maps));
        Ok(maps)
    }

    /// Per-passage support scores: cross-attention averaged over layers,
    /// heads and generated positions, summed within each passage block and
    /// normalized to sum to one.
    pub fn attribution(&self, memory: &Memory<R>, generated: &[u32]) -> Result<Vec<f64>> {
        let maps = self.cross_attention(memory, generated)?;
        Ok(attribution_from_maps(
            &maps,
            memory.passage_of_row(),
            memory.num_passages(),
        ))
    }
}

/// Mean negative log-likelihood of `target` under row-wise log-probabilities,
/// skipping padding positions. Returns zero when every position is padding.
pub fn mean_nll<R: Real>(log_probs: &Array2<R>, target: &[u32]) -> R {
    let mut total = R::zero();
    let mut count = 0usize;
    for (i, &t) in target.iter().enumerate() {
        if t != PAD {
            total -= log_probs[(i, t as usize)];
            count += 1;
        }
    }
    if count == 0 {
        R::zero()
    } else {
        total / super::real(count as f64)
    }
}

pub fn attribution_from_maps<R: Real>(
    maps: &[Vec<Array2<R>>],
    passage_of_row: &[usize],
    num_passages: usize,
) -> Vec<f64> {
    let mut per_row = vec![0.0f64; passage_of_row.len()];
    let mut count = 0usize;
    for layer in maps {
        for head in layer {
            for row in head.rows() {
                for (acc, &p) in per_row.iter_mut().zip(row) {
                    *acc += p.to_f64().unwrap();
                }
                count += 1;
            }
        }
    }
    let mut scores = vec![0.0f64; num_passages];
    for (&p, &v) in passage_of_row.iter().zip(&per_row) {
        scores[p] += v / count.max(1) as f64;
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter_mut().for_each(|s| *s /= total);
    } else if num_passages > 0 {
        scores.fill(1.0 / num_passages as f64);
    }
    scores
}
