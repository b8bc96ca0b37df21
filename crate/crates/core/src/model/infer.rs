//! Incremental evaluation-mode forward pass with per-layer key/value
//! caches, used for decoding.

use super::{alibi_slopes, ToyModel, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::kernels::{axpy, dot, gelu, softmax_in_place};
use crate::tensor::Tensor;

struct LayerCache {
    wq: Vec<f64>,
    wv: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Decoding state for one sequence. Gate vectors are fixed by the prompt,
/// so each adapted projection collapses to a single effective matrix.
pub struct Decoder<'m> {
    model: &'m ToyModel,
    layers: Vec<LayerCache>,
    slopes: Vec<f64>,
    len: usize,
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let k = x.len();
    (0..rows).map(|j| dot(&w[j * k..(j + 1) * k], x)).collect()
}

fn layer_norm(x: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gamma.data().iter().zip(beta.data()))
        .map(|(v, (g, b))| (v - mean) * r * g + b)
        .collect()
}

impl<'m> Decoder<'m> {
    /// Prepares a decoder whose gates come from `prompt`'s segments.
    pub fn new(model: &'m ToyModel, prompt: &super::PromptSequence) -> Result<Self> {
        let (ga, gb) = model.gates(prompt)?;
        let p = &model.params;
        let scale = model.cfg.scale();
        let effective = |w0: usize, experts: &[(usize, usize)]| {
            let mut w = p[w0].data().to_vec();
            let (rows, cols) = (p[w0].rows(), p[w0].cols());
            for (i, &(a, b)) in experts.iter().enumerate() {
                let (a, b) = (&p[a], &p[b]);
                let c = scale * ga[i] * gb[i];
                for j in 0..rows {
                    for r in 0..a.rows() {
                        let f = c * b.at(j, r);
                        if f != 0.0 {
                            axpy(f, a.row(r), &mut w[j * cols..(j + 1) * cols]);
                        }
                    }
                }
            }
            w
        };
        let layers = model
            .layout
            .blocks
            .iter()
            .map(|blk| LayerCache {
                wq: effective(blk.wq, &blk.q_experts),
                wv: effective(blk.wv, &blk.v_experts),
                keys: Vec::new(),
                values: Vec::new(),
            })
            .collect();
        Ok(Decoder {
            model,
            layers,
            slopes: alibi_slopes(model.cfg.n_heads),
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns the next-token logits.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        let m = self.model;
        let cfg = &m.cfg;
        if token >= cfg.vocab_size {
            return Err(Error::contract(format!("token id {token} out of range for vocabulary {}", cfg.vocab_size)));
        }
        if self.len >= cfg.context_len {
            return Err(Error::Length {
                len: self.len + 1,
                max: cfg.context_len,
            });
        }
        let (p, l) = (&m.params, &m.layout);
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let att_scale = 1.0 / (dh as f64).sqrt();
        let t = self.len;
        let mut x: Vec<f64> = p[l.tok].row(token).iter().zip(p[l.pos].row(t)).map(|(a, b)| a + b).collect();
        for (blk, cache) in l.blocks.iter().zip(&mut self.layers) {
            let h = layer_norm(&x, &p[blk.ln1.0], &p[blk.ln1.1]);
            let q = matvec(&cache.wq, &h, d);
            cache.keys.extend(matvec(p[blk.wk].data(), &h, d));
            cache.values.extend(matvec(&cache.wv, &h, d));
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            for (hd, slope) in self.slopes.iter().enumerate() {
                let off = hd * dh;
                let qh = &q[off..off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qh, &cache.keys[j * d + off..j * d + off + dh]) * att_scale - slope * (t - j) as f64;
                }
                softmax_in_place(&mut scores);
                for (j, &s) in scores.iter().enumerate() {
                    axpy(s, &cache.values[j * d + off..j * d + off + dh], &mut att[off..off + dh]);
                }
            }
            let o = matvec(p[blk.wo].data(), &att, d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h2 = layer_norm(&x, &p[blk.ln2.0], &p[blk.ln2.1]);
            let hidden = p[blk.fc.0].rows();
            let mid: Vec<f64> = matvec(p[blk.fc.0].data(), &h2, hidden)
                .iter()
                .zip(p[blk.fc.1].data())
                .map(|(v, b)| gelu(v + b))
                .collect();
            let out = matvec(p[blk.proj.0].data(), &mid, d);
            x.iter_mut()
                .zip(out.iter().zip(p[blk.proj.1].data()))
                .for_each(|(a, (v, b))| *a += v + b);
        }
        self.len += 1;
        let xf = layer_norm(&x, &p[l.lnf.0], &p[l.lnf.1]);
        Ok(matvec(p[l.head].data(), &xf, cfg.vocab_size))
    }

    /// Feeds every token and returns the logits after the last one.
    pub fn extend(&mut self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut last = Err(Error::EmptyCollection("decoder input"));
        for &t in tokens {
            last = Ok(self.push(t)?);
        }
        last
    }
}
