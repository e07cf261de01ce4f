use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::{argmax, forward, HeadPatch};
use super::params::ModelParams;
use crate::error::{Error, Result};

/// Temperature value that selects greedy (argmax) decoding.
pub const GREEDY: f64 = 0.0;

/// Autoregressively extends `prompt` by `n_tokens` tokens and returns only
/// the new tokens. A temperature of [`GREEDY`] decodes by argmax and ignores
/// the seed; any positive temperature samples from the tempered softmax.
pub fn generate(
    params: &ModelParams,
    prompt: &[usize],
    n_tokens: usize,
    temperature: f64,
    seed: u64,
    patch: Option<&HeadPatch>,
) -> Result<Vec<usize>> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Input(format!("temperature must be >= 0, got {temperature}")));
    }
    if prompt.is_empty() && n_tokens > 0 {
        return Err(Error::Input("generation needs a non-empty prompt".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = prompt.to_vec();
    for _ in 0..n_tokens {
        let out = forward(params, &seq, patch, None)?;
        let last = out.probs.row(out.probs.nrows() - 1);
        let next = if temperature == GREEDY {
            argmax(last.iter().copied())
        } else {
            let weights: Vec<f64> = last.iter().map(|p| p.ln() / temperature).collect();
            let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
            WeightedIndex::new(&weights)
                .map_err(|e| Error::Generation(format!("bad sampling weights: {e}")))?
                .sample(&mut rng)
        };
        seq.push(next);
    }
    Ok(seq.split_off(prompt.len()))
}
