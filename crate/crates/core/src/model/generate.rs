//! Greedy or seeded-sampling decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::prompt::{detokenize, EOS};
use super::infer::Decoder;
use super::{PromptSequence, ToyModel};
use crate::error::{Error, Result};
use crate::tensor::softmax;

/// Decodes up to `max_tokens` tokens after the separator, stopping early at
/// `eos`. Temperature 0 is greedy (ties to the lowest id).
pub fn generate_tokens(
    model: &ToyModel,
    prompt: &PromptSequence,
    max_tokens: usize,
    temperature: f64,
    seed: u64,
    eos: usize,
) -> Result<Vec<usize>> {
    if !prompt.response.is_empty() || prompt.sep + 1 != prompt.len() {
        return Err(Error::contract("generation prompt must end at the separator"));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::NumericDomain(format!("temperature {temperature}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if max_tokens == 0 {
        return Ok(out);
    }
    let mut dec = Decoder::new(model, prompt)?;
    let mut logits = dec.extend(&prompt.tokens)?;
    while out.len() < max_tokens {
        let next = if temperature == 0.0 {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let p = softmax(&scaled)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = p.len() - 1;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        if next == eos {
            break;
        }
        out.push(next);
        if out.len() == max_tokens || dec.len() == model.config().context_len {
            break;
        }
        logits = dec.push(next)?;
    }
    Ok(out)
}

/// Byte-level response text.
pub fn generate(model: &ToyModel, prompt: &PromptSequence, max_tokens: usize, temperature: f64, seed: u64) -> Result<String> {
    Ok(detokenize(&generate_tokens(model, prompt, max_tokens, temperature, seed, EOS)?))
}
