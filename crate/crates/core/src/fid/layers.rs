//! Forward and backward passes for the transformer building blocks.
//!
//! Activations are row-major `(sequence, hidden)` matrices and weights are
//! applied on the right (`x · W`). Every `*_fwd` returns the output with a
//! cache; the matching `*_bwd` consumes the cache, accumulates parameter
//! gradients into `grad` and returns the input gradient.

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::params::{AttentionParams, FeedForwardParams, LayerNormParams};
use super::{real, Real};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LayerNormCache<R> {
    xhat: Array2<R>,
    inv_std: Array1<R>,
}

pub(crate) fn layer_norm_fwd<R: Real>(
    x: &Array2<R>,
    p: &LayerNormParams<R>,
) -> (Array2<R>, LayerNormCache<R>) {
    let n = real::<R>(x.ncols() as f64);
    let eps = real::<R>(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<R>() / n;
        let inv = R::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *s = inv;
    }
    let y = &xhat * &p.gain + &p.bias;
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_bwd<R: Real>(
    dy: &Array2<R>,
    p: &LayerNormParams<R>,
    cache: &LayerNormCache<R>,
    grad: &mut LayerNormParams<R>,
) -> Array2<R> {
    grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let n = real::<R>(dy.ncols() as f64);
    let mut dx = dy * &p.gain;
    for ((mut row, xhat), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<R>() / n;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|d, &xh| *d = (*d - mean_d - xh * mean_dx) * inv);
    }
    dx
}

#[derive(Clone, Copy)]
pub(crate) enum Mask<'a> {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Per-key validity.
    #[allow(dead_code)]
    Keys(&'a [bool]),
}

impl Mask<'_> {
    fn allows(&self, query: usize, key: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => key <= query,
            Mask::Keys(valid) => valid[key],
        }
    }
}

/// Scaled dot-product attention over already projected `q`, `k`, `v`.
/// Returns the concatenated head outputs and the per-head probabilities.
/// Masked entries get probability exactly zero; a fully masked row attends
/// to nothing and yields a zero context.
pub(crate) fn attend<R: Real>(
    q: &Array2<R>,
    k: &Array2<R>,
    v: &Array2<R>,
    heads: usize,
    mask: Mask<'_>,
) -> (Array2<R>, Vec<Array2<R>>) {
    let h = q.ncols();
    let dh = h / heads;
    let scale = R::one() / real::<R>(dh as f64).sqrt();
    let mut ctx = Array2::zeros((q.nrows(), h));
    let mut probs = Vec::with_capacity(heads);
    for head in 0..heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            let mut max = R::neg_infinity();
            for (j, &sc) in row.iter().enumerate() {
                if mask.allows(i, j) && sc > max {
                    max = sc;
                }
            }
            let mut total = R::zero();
            for (j, sc) in row.iter_mut().enumerate() {
                if mask.allows(i, j) {
                    *sc = (*sc * scale - max * scale).exp();
                    total += *sc;
                } else {
                    *sc = R::zero();
                }
            }
            if total > R::zero() {
                row.mapv_inplace(|p| p / total);
            }
        }
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (ctx, probs)
}

pub(crate) struct AttentionCache<R> {
    xq: Array2<R>,
    xkv: Array2<R>,
    q: Array2<R>,
    k: Array2<R>,
    v: Array2<R>,
    pub(crate) probs: Vec<Array2<R>>,
    ctx: Array2<R>,
}

pub(crate) fn attention_fwd<R: Real>(
    p: &AttentionParams<R>,
    xq: &Array2<R>,
    xkv: &Array2<R>,
    heads: usize,
    mask: Mask<'_>,
) -> (Array2<R>, AttentionCache<R>) {
    let q = xq.dot(&p.wq);
    let k = xkv.dot(&p.wk);
    let v = xkv.dot(&p.wv);
    let (ctx, probs) = attend(&q, &k, &v, heads, mask);
    let out = ctx.dot(&p.wo);
    (
        out,
        AttentionCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Returns `(d xq, d xkv)`.
pub(crate) fn attention_bwd<R: Real>(
    dout: &Array2<R>,
    p: &AttentionParams<R>,
    cache: &AttentionCache<R>,
    grad: &mut AttentionParams<R>,
) -> (Array2<R>, Array2<R>) {
    let heads = cache.probs.len();
    let h = cache.q.ncols();
    let dh = h / heads;
    let scale = R::one() / real::<R>(dh as f64).sqrt();

    grad.wo += &cache.ctx.t().dot(dout);
    let dctx = dout.dot(&p.wo.t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (head, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., head * dh..(head + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let dprobs = dctx_h.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let mut dscores = dprobs;
        for (mut drow, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
            let inner = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum::<R>();
            Zip::from(&mut drow)
                .and(&prow)
                .for_each(|d, &p| *d = p * (*d - inner) * scale);
        }
        dq.slice_mut(cols)
            .assign(&dscores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols)
            .assign(&dscores.t().dot(&cache.q.slice(cols)));
    }
    grad.wq += &cache.xq.t().dot(&dq);
    grad.wk += &cache.xkv.t().dot(&dk);
    grad.wv += &cache.xkv.t().dot(&dv);
    let dxq = dq.dot(&p.wq.t());
    let dxkv = dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    (dxq, dxkv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<R: Real>(x: R) -> R {
    let c = real::<R>(GELU_C);
    let a = real::<R>(GELU_A);
    let half = real::<R>(0.5);
    half * x * (R::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<R: Real>(x: R) -> R {
    let c = real::<R>(GELU_C);
    let a = real::<R>(GELU_A);
    let half = real::<R>(0.5);
    let three = real::<R>(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (R::one() + t) + half * x * (R::one() - t * t) * c * (R::one() + three * a * x * x)
}

pub(crate) struct FeedForwardCache<R> {
    x: Array2<R>,
    pre: Array2<R>,
    act: Array2<R>,
}

pub(crate) fn feed_forward_fwd<R: Real>(
    p: &FeedForwardParams<R>,
    x: &Array2<R>,
) -> (Array2<R>, FeedForwardCache<R>) {
    let pre = x.dot(&p.w1) + &p.b1;
    let act = pre.mapv(gelu);
    let out = act.dot(&p.w2) + &p.b2;
    (
        out,
        FeedForwardCache {
            x: x.clone(),
            pre,
            act,
        },
    )
}

pub(crate) fn feed_forward_bwd<R: Real>(
    dout: &Array2<R>,
    p: &FeedForwardParams<R>,
    cache: &FeedForwardCache<R>,
    grad: &mut FeedForwardParams<R>,
) -> Array2<R> {
    grad.w2 += &cache.act.t().dot(dout);
    grad.b2 += &dout.sum_axis(Axis(0));
    let mut dpre = dout.dot(&p.w2.t());
    Zip::from(&mut dpre)
        .and(&cache.pre)
        .for_each(|d, &x| *d *= gelu_grad(x));
    grad.w1 += &cache.x.t().dot(&dpre);
    grad.b1 += &dpre.sum_axis(Axis(0));
    dpre.dot(&p.w1.t())
}

/// Row-wise softmax and log-softmax of `logits`.
pub(crate) fn log_softmax_rows<R: Real>(logits: &Array2<R>) -> Array2<R> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<R>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Sinusoidal position table, `rows × hidden`.
pub(crate) fn sinusoidal_positions<R: Real>(rows: usize, hidden: usize) -> Array2<R> {
    Array2::from_shape_fn((rows, hidden), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / hidden as f64);
        real::<R>(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
