//! Byte-level decoder-only toy transformer whose query and value
//! projections carry PAC-LoRA adapters, with training, generation and
//! checkpointing.

pub mod checkpoint;
pub mod config;
pub mod generate;
pub mod infer;
pub mod prompt;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pac_lora::{adapted_linear, GateVars, GatingNet, A_INIT_STD};
use crate::tensor::{Graph, Tensor, Var};

pub use config::{Ablations, ToyModelConfig};
pub use generate::generate;
pub use prompt::{build_prompt, PromptSequence};
pub use train::{train_step, AdamW, TrainState};

const INIT_STD: f64 = 0.02;
const TOKEN_EMBED_STD: f64 = 1.0;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Embeddings, norms, MLP, attention key/output and the LM head.
    Base,
    /// The frozen-in-principle W0 of an adapted projection.
    AdaptedBase,
    Expert,
    Gate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIdx {
    ln1: (usize, usize),
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    q_experts: Vec<(usize, usize)>,
    v_experts: Vec<(usize, usize)>,
    ln2: (usize, usize),
    fc: (usize, usize),
    proj: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    lnf: (usize, usize),
    head: usize,
    gate_a: [usize; 4],
    gate_b: [usize; 4],
}

/// What a forward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Output {
    Loss,
    LastLogits,
    AllLogits,
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardSpec<'a> {
    /// Seed for adapter dropout; `None` runs in evaluation mode.
    pub dropout_seed: Option<u64>,
    /// Skip the low-rank paths entirely (the plain base model).
    pub base_only: bool,
    /// Gate vectors to use instead of the gating networks.
    pub gates: Option<(&'a [f64], &'a [f64])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    params: Vec<Tensor>,
    info: Vec<ParamInfo>,
    layout: Layout,
}

struct Builder<'r> {
    params: Vec<Tensor>,
    info: Vec<ParamInfo>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, kind: ParamKind, t: Tensor) -> usize {
        self.params.push(t);
        self.info.push(ParamInfo { name, kind });
        self.params.len() - 1
    }
    fn randn(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, std: f64) -> usize {
        let t = Tensor::randn(shape, std, self.rng);
        self.push(name, kind, t)
    }
    fn norm(&mut self, name: &str, d: usize) -> (usize, usize) {
        let g = self.push(format!("{name}.gamma"), ParamKind::Base, Tensor::new(vec![d], vec![1.0; d]).expect("ones"));
        let b = self.push(format!("{name}.beta"), ParamKind::Base, Tensor::zeros(vec![d]));
        (g, b)
    }
    fn experts(&mut self, name: &str, n: usize, r: usize, d: usize) -> Vec<(usize, usize)> {
        (0..n)
            .map(|i| {
                let a = self.randn(format!("{name}.expert{i}.a"), ParamKind::Expert, vec![r, d], A_INIT_STD);
                let b = self.push(format!("{name}.expert{i}.b"), ParamKind::Expert, Tensor::zeros(vec![d, r]));
                (a, b)
            })
            .collect()
    }
    fn gate(&mut self, name: &str, net: GatingNet) -> [usize; 4] {
        let [w1, b1, w2, b2] = [net.w1, net.b1, net.w2, net.b2];
        [
            self.push(format!("{name}.w1"), ParamKind::Gate, w1),
            self.push(format!("{name}.b1"), ParamKind::Gate, b1),
            self.push(format!("{name}.w2"), ParamKind::Gate, w2),
            self.push(format!("{name}.b2"), ParamKind::Gate, b2),
        ]
    }
}

impl ToyModel {
    /// Random base, `A_i ~ N(0, 0.02²)`, `B_i = 0`, He-initialized gates.
    pub fn init(cfg: &ToyModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, n, r) = (cfg.d_model, cfg.vocab_size, cfg.n_experts, cfg.rank);
        let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        let mut b = Builder {
            params: Vec::new(),
            info: Vec::new(),
            rng: &mut rng,
        };
        use ParamKind::*;
        let tok = b.randn("tok_emb".into(), Base, vec![v, d], TOKEN_EMBED_STD);
        let pos = b.randn("pos_emb".into(), Base, vec![cfg.context_len, d], INIT_STD);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("block{l}");
                let ln1 = b.norm(&format!("{p}.ln1"), d);
                let wq = b.randn(format!("{p}.attn.wq"), AdaptedBase, vec![d, d], INIT_STD);
                let wk = b.randn(format!("{p}.attn.wk"), Base, vec![d, d], INIT_STD);
                let wv = b.randn(format!("{p}.attn.wv"), AdaptedBase, vec![d, d], INIT_STD);
                let wo = b.randn(format!("{p}.attn.wo"), Base, vec![d, d], resid_std);
                let q_experts = b.experts(&format!("{p}.attn.q"), n, r, d);
                let v_experts = b.experts(&format!("{p}.attn.v"), n, r, d);
                let ln2 = b.norm(&format!("{p}.ln2"), d);
                let fc = (
                    b.randn(format!("{p}.mlp.fc.w"), Base, vec![4 * d, d], INIT_STD),
                    b.push(format!("{p}.mlp.fc.b"), Base, Tensor::zeros(vec![4 * d])),
                );
                let proj = (
                    b.randn(format!("{p}.mlp.proj.w"), Base, vec![d, 4 * d], resid_std),
                    b.push(format!("{p}.mlp.proj.b"), Base, Tensor::zeros(vec![d])),
                );
                BlockIdx {
                    ln1,
                    wq,
                    wk,
                    wv,
                    wo,
                    q_experts,
                    v_experts,
                    ln2,
                    fc,
                    proj,
                }
            })
            .collect();
        let lnf = b.norm("ln_f", d);
        let head = b.randn("head".into(), Base, vec![v, d], INIT_STD);
        let net_a = GatingNet::init(d, cfg.gate_hidden, n, b.rng);
        let net_b = GatingNet::init(d, cfg.gate_hidden, n, b.rng);
        let gate_a = b.gate("gate_a", net_a);
        let gate_b = b.gate("gate_b", net_b);
        let layout = Layout {
            tok,
            pos,
            blocks,
            lnf,
            head,
            gate_a,
            gate_b,
        };
        Ok(ToyModel {
            cfg: cfg.clone(),
            params: b.params,
            info: b.info,
            layout,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    /// Replaces the run-time switches (ablations, schedule) while keeping
    /// the weights; the architecture fields must not change.
    pub fn with_config(mut self, cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let same_shape = (cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.context_len, cfg.n_experts, cfg.rank, cfg.gate_hidden)
            == (
                self.cfg.vocab_size,
                self.cfg.d_model,
                self.cfg.n_layers,
                self.cfg.n_heads,
                self.cfg.context_len,
                self.cfg.n_experts,
                self.cfg.rank,
                self.cfg.gate_hidden,
            );
        if !same_shape {
            return Err(Error::Config("architecture differs from the model's".into()));
        }
        self.cfg = cfg;
        Ok(self)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|i| i.name == name)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        !self.cfg.freeze_base || matches!(self.info[i].kind, ParamKind::Expert | ParamKind::Gate)
    }

    /// Indices of the adapted projections' base weights, in layer order.
    pub fn adapted_base_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.info[i].kind == ParamKind::AdaptedBase).collect()
    }

    /// Indices of every writing-expert matrix `B_i`.
    pub fn expert_b_indices(&self) -> Vec<usize> {
        self.layout
            .blocks
            .iter()
            .flat_map(|b| b.q_experts.iter().chain(&b.v_experts).map(|e| e.1))
            .collect()
    }

    pub(crate) fn gate_net(&self, which: usize) -> GatingNet {
        let idx = if which == 0 { self.layout.gate_a } else { self.layout.gate_b };
        GatingNet {
            w1: self.params[idx[0]].clone(),
            b1: self.params[idx[1]].clone(),
            w2: self.params[idx[2]].clone(),
            b2: self.params[idx[3]].clone(),
        }
    }

    fn uniform(&self) -> Vec<f64> {
        vec![1.0 / self.cfg.n_experts as f64; self.cfg.n_experts]
    }

    /// Records the forward pass on `g`. Returns the output node and the
    /// parameter leaves.
    fn record(&self, g: &mut Graph, seq: &PromptSequence, spec: ForwardSpec<'_>, out: Output, grads: bool) -> Result<(Var, Vec<Var>)> {
        seq.check(self.cfg.vocab_size, self.cfg.context_len)?;
        let t = seq.len();
        let p: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, w)| g.leaf(w.clone(), grads && self.is_trainable(i)))
            .collect();
        let l = &self.layout;
        let emb = g.embedding(p[l.tok], &seq.tokens)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.embedding(p[l.pos], &positions)?;
        let mut x = g.add(emb, pos)?;

        let gates = if spec.base_only {
            None
        } else {
            let ablate = self.cfg.ablations;
            let (ga, gb) = match spec.gates {
                Some((a, b)) => (g.constant(Tensor::vector(a.to_vec())), g.constant(Tensor::vector(b.to_vec()))),
                None => {
                    let ga = if ablate.no_analyzing_gate {
                        g.constant(Tensor::vector(self.uniform()))
                    } else {
                        let x_news = g.mean_rows(emb, seq.news.start, seq.news.end)?;
                        GateVars::from_vars(l.gate_a.map(|i| p[i])).probs(g, x_news)?
                    };
                    let gb = if ablate.no_writing_gate {
                        g.constant(Tensor::vector(self.uniform()))
                    } else {
                        let u = seq.user_range();
                        let x_user = g.mean_rows(emb, u.start, u.end)?;
                        GateVars::from_vars(l.gate_b.map(|i| p[i])).probs(g, x_user)?
                    };
                    (ga, gb)
                }
            };
            Some((ga, gb))
        };

        let mut rng = spec.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let scale = self.cfg.scale();
        let slopes = alibi_slopes(self.cfg.n_heads);
        for blk in &l.blocks {
            let h = g.layer_norm(x, p[blk.ln1.0], p[blk.ln1.1], LN_EPS)?;
            let proj = |g: &mut Graph, w0: usize, experts: &[(usize, usize)], rng: &mut Option<ChaCha8Rng>| -> Result<Var> {
                match gates {
                    None => g.matmul_nt(h, p[w0]),
                    Some(gv) => {
                        let h_ad = match rng.as_mut() {
                            Some(r) if self.cfg.dropout > 0.0 => g.dropout(h, self.cfg.dropout, r)?,
                            _ => h,
                        };
                        let ex: Vec<(Var, Var)> = experts.iter().map(|&(a, b)| (p[a], p[b])).collect();
                        adapted_linear(g, h, h_ad, p[w0], &ex, Some(gv), scale)
                    }
                }
            };
            let q = proj(g, blk.wq, &blk.q_experts, &mut rng)?;
            let k = g.matmul_nt(h, p[blk.wk])?;
            let v = proj(g, blk.wv, &blk.v_experts, &mut rng)?;
            let att = g.causal_attention_biased(q, k, v, &slopes)?;
            let o = g.matmul_nt(att, p[blk.wo])?;
            x = g.add(x, o)?;
            let h2 = g.layer_norm(x, p[blk.ln2.0], p[blk.ln2.1], LN_EPS)?;
            let m = g.matmul_nt(h2, p[blk.fc.0])?;
            let m = g.add_row_bias(m, p[blk.fc.1])?;
            let m = g.gelu(m);
            let m = g.matmul_nt(m, p[blk.proj.0])?;
            let m = g.add_row_bias(m, p[blk.proj.1])?;
            x = g.add(x, m)?;
        }
        let x = g.layer_norm(x, p[l.lnf.0], p[l.lnf.1], LN_EPS)?;
        let node = match out {
            Output::Loss => {
                let (rows, targets) = seq.loss_positions();
                if rows.is_empty() {
                    return Err(Error::contract("sequence has no response tokens to score"));
                }
                let sel = g.select_rows(x, &rows)?;
                let logits = g.matmul_nt(sel, p[l.head])?;
                g.cross_entropy(logits, &targets)?
            }
            Output::LastLogits => {
                let sel = g.select_rows(x, &[t - 1])?;
                g.matmul_nt(sel, p[l.head])?
            }
            Output::AllLogits => g.matmul_nt(x, p[l.head])?,
        };
        Ok((node, p))
    }

    /// Mean next-token cross-entropy over the response tokens, evaluation mode.
    pub fn loss(&self, seq: &PromptSequence) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.record(&mut g, seq, ForwardSpec::default(), Output::Loss, false)?;
        Ok(g.value(loss).data()[0])
    }

    /// Loss and gradient of every parameter (`None` for frozen ones).
    pub fn loss_and_grads(&self, seq: &PromptSequence, dropout_seed: Option<u64>) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let spec = ForwardSpec {
            dropout_seed,
            ..Default::default()
        };
        let (loss, p) = self.record(&mut g, seq, spec, Output::Loss, true)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let grads = p
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                self.is_trainable(i)
                    .then(|| g.take_grad(v).unwrap_or_else(|| vec![0.0; self.params[i].numel()]))
            })
            .collect();
        Ok((value, grads))
    }

    /// Logits for every position `[T×V]`.
    pub fn logits(&self, seq: &PromptSequence, spec: ForwardSpec<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let (out, _) = self.record(&mut g, seq, spec, Output::AllLogits, false)?;
        Ok(g.value(out).clone())
    }

    /// Logits at the last position, evaluation mode.
    pub fn next_logits(&self, seq: &PromptSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (out, _) = self.record(&mut g, seq, ForwardSpec::default(), Output::LastLogits, false)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Pooled gate features `(x_news, x_user)` from token embeddings.
    pub fn gate_features(&self, seq: &PromptSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        seq.check(self.cfg.vocab_size, self.cfg.context_len)?;
        let table = &self.params[self.layout.tok];
        let d = self.cfg.d_model;
        let pool = |r: std::ops::Range<usize>| {
            let mut m = vec![0.0; d];
            if r.is_empty() {
                return m;
            }
            for &tok in &seq.tokens[r.clone()] {
                for (acc, x) in m.iter_mut().zip(table.row(tok)) {
                    *acc += x;
                }
            }
            let inv = 1.0 / r.len() as f64;
            m.iter_mut().for_each(|v| *v *= inv);
            m
        };
        Ok((pool(seq.news.clone()), pool(seq.user_range())))
    }

    /// Gate vectors `(gA, gB)` the model applies to this sequence.
    pub fn gates(&self, seq: &PromptSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        let (x_news, x_user) = self.gate_features(seq)?;
        let ab = self.cfg.ablations;
        let ga = if ab.no_analyzing_gate {
            self.uniform()
        } else {
            self.gate_net(0).probs(&x_news)?
        };
        let gb = if ab.no_writing_gate {
            self.uniform()
        } else {
            self.gate_net(1).probs(&x_user)?
        };
        Ok((ga, gb))
    }
}

/// Geometric per-head distance penalties `2^(-8(h+1)/H)`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (0..heads).map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / heads as f64)).collect()
}
