//! AdamW training over response-masked next-token loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PromptSequence, ToyModel};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: step counter, first/second moments per parameter and
/// the seed that drives dropout masks and batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub seed: u64,
    pub opt: AdamW,
}

impl TrainState {
    pub fn new(model: &ToyModel, seed: u64) -> Self {
        let zeros = || model.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        TrainState {
            step: 0,
            m: zeros(),
            v: zeros(),
            seed,
            opt: AdamW::default(),
        }
    }

    fn check(&self, model: &ToyModel) -> Result<()> {
        let ok = self.m.len() == model.params().len()
            && self.v.len() == model.params().len()
            && model
                .params()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::contract("optimizer moments do not match the model parameters"))
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-sequence seeds.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One AdamW update from the mean gradient over `batch`. Returns the mean
/// loss before the update. Frozen parameters are never written.
pub fn train_step(model: &mut ToyModel, state: &mut TrainState, batch: &[PromptSequence], exec: Execution) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyCollection("training batch"));
    }
    state.check(model)?;
    let step_seed = mix(state.seed ^ mix(state.step));
    let dropout = model.config().dropout > 0.0;
    let per_seq = {
        let m = &*model;
        exec.map_range(batch.len(), |i| {
            let seed = dropout.then(|| mix(step_seed ^ i as u64));
            m.loss_and_grads(&batch[i], seed)
        })
    };
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut sum: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
    for r in per_seq {
        let (l, grads) = r?;
        loss += l;
        for (acc, g) in sum.iter_mut().zip(grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                    None => *acc = Some(g),
                }
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let AdamW { beta1, beta2, eps } = state.opt;
    let lr = model.config().learning_rate;
    let wd = model.config().weight_decay;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (i, g) in sum.into_iter().enumerate() {
        let Some(g) = g else { continue };
        let p = model.params_mut()[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g[j] / n;
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps) + wd * p[j];
            p[j] -= lr * update;
        }
    }
    Ok(loss / n)
}

/// Mean evaluation loss over `seqs`.
pub fn eval_loss(model: &ToyModel, seqs: &[PromptSequence], exec: Execution) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyCollection("evaluation sequences"));
    }
    let losses = exec.try_map(seqs, |s| model.loss(s))?;
    Ok(losses.iter().sum::<f64>() / seqs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl LogLine {
    /// `step<TAB>loss<TAB>lr`, shortest round-trip float formatting.
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}\n", self.step, self.loss, self.lr)
    }
}

/// Runs `model.config().steps` updates, each over `batch_size * grad_accum`
/// sequences drawn from seeded reshuffled epochs.
pub fn fit(
    model: &mut ToyModel,
    state: &mut TrainState,
    data: &[PromptSequence],
    exec: Execution,
    mut on_step: impl FnMut(&LogLine),
) -> Result<Vec<LogLine>> {
    if data.is_empty() {
        return Err(Error::EmptyCollection("training data"));
    }
    let per_step = model.config().sequences_per_step();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(state.seed ^ 0x5eed));
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    for _ in 0..model.config().steps {
        let mut batch = Vec::with_capacity(per_step);
        while batch.len() < per_step {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(data[order.pop().expect("refilled")].clone());
        }
        let loss = train_step(model, state, &batch, exec)?;
        let line = LogLine {
            step: state.step,
            loss,
            lr: model.config().learning_rate,
        };
        on_step(&line);
        log.push(line);
    }
    Ok(log)
}
