//! Forward pass with attention masks and cached activations, and the matching
//! reverse pass.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{PolicyError, PolicyParams};

/// Pairs `(q, key)` blocked on top of causal masking; `q` is a predicted position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttentionMaskSpec {
    pub blocked: BTreeSet<(usize, usize)>,
}

impl AttentionMaskSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            blocked: pairs.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.blocked.is_empty()
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            blocked: self.blocked.union(&other.blocked).copied().collect(),
        }
    }

    /// `allowed[r][j]`: may row `r` (predicting token `r + 1`) attend to key `j`.
    fn allowed(&self, len: usize) -> Result<Array2<bool>, PolicyError> {
        let mut allowed = Array2::from_shape_fn((len, len), |(r, j)| j <= r);
        for &(q, key) in &self.blocked {
            if q == 0 || q > len || key >= len {
                return Err(PolicyError::InvalidMask(q, key));
            }
            allowed[[q - 1, key]] = false;
        }
        Ok(allowed)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub mask: Option<&'a AttentionMaskSpec>,
    /// Added to the input embeddings (`len × d_model`), e.g. noise on vision rows.
    pub embed_noise: Option<&'a Array2<f64>>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    mixed: Array2<f64>,
    mid: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Everything the reverse pass needs, plus the logits.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    final_hidden: Array2<f64>,
    pub logits: Array2<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Row-wise log-softmax of the logits.
    pub fn log_probs(&self) -> Array2<f64> {
        log_softmax_rows(&self.logits.view())
    }

    /// Log-probabilities of the token at predicted position `pos`.
    pub fn log_probs_at(&self, pos: usize) -> Array1<f64> {
        log_softmax(self.logits.row(pos - 1).to_vec())
    }

    /// Attention weights of one layer (`len × len`, row = query row).
    pub fn attention(&self, layer: usize) -> &Array2<f64> {
        &self.layers[layer].attn
    }
}

fn log_softmax(row: Vec<f64>) -> Array1<f64> {
    let lse = crate::dist::log_sum_exp(&row);
    Array1::from_iter(row.into_iter().map(|x| x - lse))
}

pub(crate) fn log_softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let lse = crate::dist::log_sum_exp(row.as_slice().expect("contiguous"));
        row.mapv_inplace(|v| v - lse);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

pub fn forward(
    params: &PolicyParams,
    tokens: &[usize],
    opts: ForwardOptions<'_>,
) -> Result<ForwardCache, PolicyError> {
    let cfg = params.config();
    let len = tokens.len();
    if len > cfg.max_len {
        return Err(PolicyError::LengthExceeded {
            len,
            max: cfg.max_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(PolicyError::InvalidToken(bad));
    }
    let allowed = match opts.mask {
        Some(m) => m.allowed(len)?,
        None => AttentionMaskSpec::none().allowed(len)?,
    };
    let lay = &params.layout;
    let embed = params.mat(lay.embed);
    let pos = params.mat(lay.pos);
    let d = cfg.d_model;
    let mut h = Array2::zeros((len, d));
    for (i, &t) in tokens.iter().enumerate() {
        let mut row = h.row_mut(i);
        row += &embed.row(t);
        row += &pos.row(i);
    }
    if let Some(noise) = opts.embed_noise {
        if noise.dim() != (len, d) {
            return Err(PolicyError::Shape(format!(
                "embedding noise {:?} for sequence {len}x{d}",
                noise.dim()
            )));
        }
        h += noise;
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for blocks in &lay.layers {
        let input = h;
        let q = input.dot(&params.mat(blocks.wq));
        let k = input.dot(&params.mat(blocks.wk));
        let v = input.dot(&params.mat(blocks.wv));
        let scores = q.dot(&k.t()) * scale;
        let mut attn = Array2::zeros((len, len));
        for r in 0..len {
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                if allowed[[r, j]] {
                    max = max.max(scores[[r, j]]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..len {
                if allowed[[r, j]] {
                    let e = (scores[[r, j]] - max).exp();
                    attn[[r, j]] = e;
                    z += e;
                }
            }
            attn.row_mut(r).mapv_inplace(|x| x / z);
        }
        let mixed = attn.dot(&v);
        let mid = &input + &mixed.dot(&params.mat(blocks.wo));
        let pre_act = mid.dot(&params.mat(blocks.w1)) + &params.vec(blocks.b1);
        let act = pre_act.mapv(gelu);
        h = &mid + &(act.dot(&params.mat(blocks.w2)) + &params.vec(blocks.b2));
        layers.push(LayerCache {
            input,
            q,
            k,
            v,
            attn,
            mixed,
            mid,
            pre_act,
            act,
        });
    }
    let logits = h.dot(&params.mat(lay.w_out)) + &params.vec(lay.b_out);
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        final_hidden: h,
        logits,
    })
}

/// Accumulates `∂L/∂θ` into `grad` given `∂L/∂logits`.
pub fn backward(
    params: &PolicyParams,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    grad: &mut PolicyParams,
) -> Result<(), PolicyError> {
    let lay = &params.layout;
    if dlogits.dim() != cache.logits.dim() {
        return Err(PolicyError::Shape(format!(
            "dlogits {:?} vs logits {:?}",
            dlogits.dim(),
            cache.logits.dim()
        )));
    }
    let scale = 1.0 / (lay.config.d_model as f64).sqrt();

    {
        let mut g = grad.mat_mut(lay.w_out);
        g += &cache.final_hidden.t().dot(dlogits);
    }
    {
        let mut g = grad.vec_mut(lay.b_out);
        g += &dlogits.sum_axis(Axis(0));
    }
    let mut dh = dlogits.dot(&params.mat(lay.w_out).t());

    for (blocks, c) in lay.layers.iter().zip(&cache.layers).rev() {
        // feed-forward: h = mid + act·W2 + b2, act = gelu(mid·W1 + b1)
        grad.mat_mut(blocks.w2).scaled_add(1.0, &c.act.t().dot(&dh));
        grad.vec_mut(blocks.b2).scaled_add(1.0, &dh.sum_axis(Axis(0)));
        let dact = dh.dot(&params.mat(blocks.w2).t());
        let dpre = &dact * &c.pre_act.mapv(gelu_grad);
        grad.mat_mut(blocks.w1).scaled_add(1.0, &c.mid.t().dot(&dpre));
        grad.vec_mut(blocks.b1).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
        let dmid = dh + dpre.dot(&params.mat(blocks.w1).t());

        // attention: mid = input + (A·V)·Wo
        grad.mat_mut(blocks.wo).scaled_add(1.0, &c.mixed.t().dot(&dmid));
        let dmixed = dmid.dot(&params.mat(blocks.wo).t());
        let dattn = dmixed.dot(&c.v.t());
        let dv = c.attn.t().dot(&dmixed);
        let row_dot = (&dattn * &c.attn).sum_axis(Axis(1));
        let mut dscores = &c.attn * &(&dattn - &row_dot.insert_axis(Axis(1)));
        dscores *= scale;
        let dq = dscores.dot(&c.k);
        let dk = dscores.t().dot(&c.q);
        grad.mat_mut(blocks.wq).scaled_add(1.0, &c.input.t().dot(&dq));
        grad.mat_mut(blocks.wk).scaled_add(1.0, &c.input.t().dot(&dk));
        grad.mat_mut(blocks.wv).scaled_add(1.0, &c.input.t().dot(&dv));
        dh = dmid
            + dq.dot(&params.mat(blocks.wq).t())
            + dk.dot(&params.mat(blocks.wk).t())
            + dv.dot(&params.mat(blocks.wv).t());
    }

    let len = cache.tokens.len();
    {
        let mut g = grad.mat_mut(lay.pos);
        let mut rows = g.slice_mut(s![..len, ..]);
        rows += &dh;
    }
    let mut g = grad.mat_mut(lay.embed);
    for (i, &t) in cache.tokens.iter().enumerate() {
        let mut row = g.row_mut(t);
        row += &dh.row(i);
    }
    Ok(())
}

/// One sequence's contribution to a [`LossSpec`]: `−Σ weight · log p(token at pos)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossItem {
    pub tokens: Vec<usize>,
    pub mask: Option<AttentionMaskSpec>,
    /// `(predicted position, token, weight)`.
    pub targets: Vec<(usize, usize, f64)>,
}

/// Weighted negative log-likelihood over a batch plus an optional linear
/// parameter penalty `param_linear · Σθ`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossSpec {
    pub items: Vec<LossItem>,
    pub param_linear: f64,
}

pub fn grad(params: &PolicyParams, spec: &LossSpec) -> Result<(f64, PolicyParams), PolicyError> {
    let mut g = params.zeros_like();
    let mut loss = spec.param_linear * params.data.iter().sum::<f64>();
    if spec.param_linear != 0.0 {
        g.data.iter_mut().for_each(|x| *x = spec.param_linear);
    }
    for item in &spec.items {
        if item.targets.is_empty() {
            continue;
        }
        let cache = forward(
            params,
            &item.tokens,
            ForwardOptions {
                mask: item.mask.as_ref(),
                embed_noise: None,
            },
        )?;
        let logp = cache.log_probs();
        let mut dlogits = Array2::zeros(logp.dim());
        for &(pos, token, w) in &item.targets {
            if pos == 0 || pos > item.tokens.len() {
                return Err(PolicyError::Shape(format!("target position {pos}")));
            }
            let r = pos - 1;
            loss -= w * logp[[r, token]];
            let mut row = dlogits.row_mut(r);
            row.scaled_add(w, &logp.row(r).mapv(f64::exp));
            row[token] -= w;
        }
        backward(params, &cache, &dlogits, &mut g)?;
    }
    if !loss.is_finite() {
        return Err(PolicyError::NonFiniteLoss(loss));
    }
    Ok((loss, g))
}
