//! Parameter containers. Gradients and optimizer moments reuse the same types.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{real, ModelConfig, Real};

/// Named flat views over every tensor, in a fixed order.
pub trait ParamTree<R> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [R])>);
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [R])>);
}

fn mat_view<'a, R>(name: String, a: &'a Array2<R>, out: &mut Vec<(String, Vec<usize>, &'a [R])>) {
    out.push((
        name,
        a.shape().to_vec(),
        a.as_slice().expect("standard layout"),
    ));
}

fn vec_view<'a, R>(name: String, a: &'a Array1<R>, out: &mut Vec<(String, Vec<usize>, &'a [R])>) {
    out.push((
        name,
        a.shape().to_vec(),
        a.as_slice().expect("standard layout"),
    ));
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<R> {
    pub gain: Array1<R>,
    pub bias: Array1<R>,
}

impl<R: Real> LayerNormParams<R> {
    fn new(h: usize) -> Self {
        LayerNormParams {
            gain: Array1::ones(h),
            bias: Array1::zeros(h),
        }
    }
}

impl<R> ParamTree<R> for LayerNormParams<R> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [R])>) {
        vec_view(format!("{prefix}.gain"), &self.gain, out);
        vec_view(format!("{prefix}.bias"), &self.bias, out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [R])>) {
        out.push((format!("{prefix}.gain"), self.gain.as_slice_mut().unwrap()));
        out.push((format!("{prefix}.bias"), self.bias.as_slice_mut().unwrap()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<R> {
    pub wq: Array2<R>,
    pub wk: Array2<R>,
    pub wv: Array2<R>,
    pub wo: Array2<R>,
}

impl<R: Real> AttentionParams<R> {
    fn init(h: usize, rng: &mut impl Rng) -> Self {
        AttentionParams {
            wq: normal((h, h), 1.0 / (h as f64).sqrt(), rng),
            wk: normal((h, h), 1.0 / (h as f64).sqrt(), rng),
            wv: normal((h, h), 1.0 / (h as f64).sqrt(), rng),
            wo: normal((h, h), 1.0 / (h as f64).sqrt(), rng),
        }
    }
}

impl<R> ParamTree<R> for AttentionParams<R> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [R])>) {
        mat_view(format!("{prefix}.wq"), &self.wq, out);
        mat_view(format!("{prefix}.wk"), &self.wk, out);
        mat_view(format!("{prefix}.wv"), &self.wv, out);
        mat_view(format!("{prefix}.wo"), &self.wo, out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [R])>) {
        out.push((format!("{prefix}.wq"), self.wq.as_slice_mut().unwrap()));
        out.push((format!("{prefix}.wk"), self.wk.as_slice_mut().unwrap()));
        out.push((format!("{prefix}.wv"), self.wv.as_slice_mut().unwrap()));
        out.push((format!("{prefix}.wo"), self.wo.as_slice_mut().unwrap()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams<R> {
    pub w1: Array2<R>,
    pub b1: Array1<R>,
    pub w2: Array2<R>,
    pub b2: Array1<R>,
}

impl<R: Real> FeedForwardParams<R> {
    fn init(h: usize, f: usize, rng: &mut impl Rng) -> Self {
        FeedForwardParams {
            w1: normal((h, f), 1.0 / (h as f64).sqrt(), rng),
            b1: Array1::zeros(f),
            w2: normal((f, h), 1.0 / (f as f64).sqrt(), rng),
            b2: Array1::zeros(h),
        }
    }
}

impl<R> ParamTree<R> for FeedForwardParams<R> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [R])>) {
        mat_view(format!("{prefix}.w1"), &self.w1, out);
        vec_view(format!("{prefix}.b1"), &self.b1, out);
        mat_view(format!("{prefix}.w2"), &self.w2, out);
        vec_view(format!("{prefix}.b2"), &self.b2, out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [R])>) {
        out.push((format!("{prefix}.w1"), self.w1.as_slice_mut().unwrap()));
        out.push((format!("{prefix}.b1"), self.b1.as_slice_mut().unwrap()));
        out.push((format!("{prefix}.w2"), self.w2.as_slice_mut().unwrap()));
        out.push((format!("{prefix}.b2"), self.b2.as_slice_mut().unwrap()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<R> {
    pub norm_attn: LayerNormParams<R>,
    pub attn: AttentionParams<R>,
    pub norm_ffn: LayerNormParams<R>,
    pub ffn: FeedForwardParams<R>,
}

impl<R> ParamTree<R> for EncoderLayerParams<R> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [R])>) {
        self.norm_attn.tensors(&format!("{prefix}.norm_attn"), out);
        self.attn.tensors(&format!("{prefix}.attn"), out);
        self.norm_ffn.tensors(&format!("{prefix}.norm_ffn"), out);
        self.ffn.tensors(&format!("{prefix}.ffn"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [R])>) {
        self.norm_attn
            .tensors_mut(&format!("{prefix}.norm_attn"), out);
        self.attn.tensors_mut(&format!("{prefix}.attn"), out);
        self.norm_ffn
            .tensors_mut(&format!("{prefix}.norm_ffn"), out);
        self.ffn.tensors_mut(&format!("{prefix}.ffn"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams<R> {
    pub norm_self: LayerNormParams<R>,
    pub self_attn: AttentionParams<R>,
    pub norm_cross: LayerNormParams<R>,
    pub cross_attn: AttentionParams<R>,
    pub norm_ffn: LayerNormParams<R>,
    pub ffn: FeedForwardParams<R>,
}

impl<R> ParamTree<R> for DecoderLayerParams<R> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [R])>) {
        self.norm_self.tensors(&format!("{prefix}.norm_self"), out);
        self.self_attn.tensors(&format!("{prefix}.self_attn"), out);
        self.norm_cross
            .tensors(&format!("{prefix}.norm_cross"), out);
        self.cross_attn
            .tensors(&format!("{prefix}.cross_attn"), out);
        self.norm_ffn.tensors(&format!("{prefix}.norm_ffn"), out);
        self.ffn.tensors(&format!("{prefix}.ffn"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [R])>) {
        self.norm_self
            .tensors_mut(&format!("{prefix}.norm_self"), out);
        self.self_attn
            .tensors_mut(&format!("{prefix}.self_attn"), out);
        self.norm_cross
            .tensors_mut(&format!("{prefix}.norm_cross"), out);
        self.cross_attn
            .tensors_mut(&format!("{prefix}.cross_attn"), out);
        self.norm_ffn
            .tensors_mut(&format!("{prefix}.norm_ffn"), out);
        self.ffn.tensors_mut(&format!("{prefix}.ffn"), out);
    }
}

/// All weights of the encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<R> {
    /// Token embeddings shared by encoder and decoder inputs, `vocab × hidden`.
    pub embed: Array2<R>,
    pub encoder: Vec<EncoderLayerParams<R>>,
    pub encoder_norm: LayerNormParams<R>,
    pub decoder: Vec<DecoderLayerParams<R>>,
    pub decoder_norm: LayerNormParams<R>,
    /// Output projection, `hidden × vocab`; absent when tied to `embed`.
    pub lm_head: Option<Array2<R>>,
}

impl<R: Real> Params<R> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden;
        let f = cfg.ffn_hidden;
        let embed = normal((cfg.vocab_size, h), 1.0, rng);
        let encoder = (0..cfg.layers)
            .map(|_| EncoderLayerParams {
                norm_attn: LayerNormParams::new(h),
                attn: AttentionParams::init(h, rng),
                norm_ffn: LayerNormParams::new(h),
                ffn: FeedForwardParams::init(h, f, rng),
            })
            .collect();
        let decoder = (0..cfg.layers)
            .map(|_| DecoderLayerParams {
                norm_self: LayerNormParams::new(h),
                self_attn: AttentionParams::init(h, rng),
                norm_cross: LayerNormParams::new(h),
                cross_attn: AttentionParams::init(h, rng),
                norm_ffn: LayerNormParams::new(h),
                ffn: FeedForwardParams::init(h, f, rng),
            })
            .collect();
        let lm_head = (!cfg.tie_embeddings)
            .then(|| normal((h, cfg.vocab_size), 1.0 / (h as f64).sqrt(), rng));
        Params {
            embed,
            encoder,
            encoder_norm: LayerNormParams::new(h),
            decoder,
            decoder_norm: LayerNormParams::new(h),
            lm_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(R::zero());
        z
    }

    pub fn fill(&mut self, value: R) {
        for (_, t) in self.named_mut() {
            t.iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn named(&self) -> Vec<(String, Vec<usize>, &[R])> {
        let mut out = Vec::new();
        self.tensors("", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut [R])> {
        let mut out = Vec::new();
        self.tensors_mut("", &mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// `self += other * scale`, element-wise.
    pub fn add_scaled(&mut self, other: &Params<R>, scale: R) {
        let src = other.named();
        for ((_, dst), (_, _, src)) in self.named_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
    }

    /// Converts every tensor to another precision.
    pub fn cast<T: Real>(&self) -> Params<T> {
        let c1 = |a: &Array1<R>| a.mapv(|v| real::<T>(v.to_f64().unwrap()));
        let c2 = |a: &Array2<R>| a.mapv(|v| real::<T>(v.to_f64().unwrap()));
        let ln = |p: &LayerNormParams<R>| LayerNormParams {
            gain: c1(&p.gain),
            bias: c1(&p.bias),
        };
        let attn = |p: &AttentionParams<R>| AttentionParams {
            wq: c2(&p.wq),
            wk: c2(&p.wk),
            wv: c2(&p.wv),
            wo: c2(&p.wo),
        };
        let ffn = |p: &FeedForwardParams<R>| FeedForwardParams {
            w1: c2(&p.w1),
            b1: c1(&p.b1),
            w2: c2(&p.w2),
            b2: c1(&p.b2),
        };
        Params {
            embed: c2(&self.embed),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayerParams {
                    norm_attn: ln(&l.norm_attn),
                    attn: attn(&l.attn),
                    norm_ffn: ln(&l.norm_ffn),
                    ffn: ffn(&l.ffn),
                })
                .collect(),
            encoder_norm: ln(&self.encoder_norm),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayerParams {
                    norm_self: ln(&l.norm_self),
                    self_attn: attn(&l.self_attn),
                    norm_cross: ln(&l.norm_cross),
                    cross_attn: attn(&l.cross_attn),
                    norm_ffn: ln(&l.norm_ffn),
                    ffn: ffn(&l.ffn),
                })
                .collect(),
            decoder_norm: ln(&self.decoder_norm),
            lm_head: self.lm_head.as_ref().map(c2),
        }
    }
}

impl<R> ParamTree<R> for Params<R> {
    fn tensors<'a>(&'a self, _prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [R])>) {
        mat_view("embed".into(), &self.embed, out);
        for (i, l) in self.encoder.iter().enumerate() {
            l.tensors(&format!("encoder.{i}"), out);
        }
        self.encoder_norm.tensors("encoder.norm", out);
        for (i, l) in self.decoder.iter().enumerate() {
            l.tensors(&format!("decoder.{i}"), out);
        }
        self.decoder_norm.tensors("decoder.norm", out);
        if let Some(w) = &self.lm_head {
            mat_view("lm_head".into(), w, out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<(String, &'a mut [R])>) {
        out.push(("embed".into(), self.embed.as_slice_mut().unwrap()));
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.tensors_mut(&format!("encoder.{i}"), out);
        }
        self.encoder_norm.tensors_mut("encoder.norm", out);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.tensors_mut(&format!("decoder.{i}"), out);
        }
        self.decoder_norm.tensors_mut("decoder.norm", out);
        if let Some(w) = &mut self.lm_head {
            out.push(("lm_head".into(), w.as_slice_mut().unwrap()));
        }
    }
}

fn normal<R: Real>(shape: (usize, usize), std: f64, rng: &mut impl Rng) -> Array2<R> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || real::<R>(dist.sample(rng)))
}
