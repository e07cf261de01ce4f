use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, Positional};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

/// Weights of one transformer block.
///
/// `w_q` and `w_o` hold every head side by side: head `h` owns columns
/// `h*dh..(h+1)*dh` of `w_q` and rows `h*dh..(h+1)*dh` of `w_o`. `w_k` and
/// `w_v` are single matrices shared by all heads.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_in: Array2<f64>,
    pub w_out: Array2<f64>,
    pub ln_attn_gain: Array2<f64>,
    pub ln_attn_bias: Array2<f64>,
    pub ln_mlp_gain: Array2<f64>,
    pub ln_mlp_bias: Array2<f64>,
}

/// All weights of the toy decoder. Values are always exactly representable
/// as `f32` so checkpoints round-trip bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Array2<f64>,
    /// Present only with learned positions.
    pub pos_embedding: Option<Array2<f64>>,
    pub layers: Vec<LayerParams>,
    pub ln_final_gain: Array2<f64>,
    pub ln_final_bias: Array2<f64>,
    pub unembedding: Array2<f64>,
}

/// Rounds every entry to the nearest `f32`.
pub fn round_to_f32(m: &mut Array2<f64>) {
    m.mapv_inplace(|x| x as f32 as f64);
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is positive");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng) as f32 as f64)
}

impl ModelParams {
    /// Normal(0, 0.02) initialization; the residual output projections
    /// (`w_o`, `w_out`) are further scaled by `1/sqrt(2L)`. Layer norms start
    /// at unit gain and zero bias.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let dh = config.head_dim();
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let embedding = normal_matrix(&mut rng, config.vocab_size, d, INIT_STD);
        let pos_embedding = (config.positional == Positional::Learned)
            .then(|| normal_matrix(&mut rng, config.max_seq_len, d, INIT_STD));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                w_q: normal_matrix(&mut rng, d, d, INIT_STD),
                w_k: normal_matrix(&mut rng, d, dh, INIT_STD),
                w_v: normal_matrix(&mut rng, d, dh, INIT_STD),
                w_o: normal_matrix(&mut rng, d, d, resid_std),
                w_in: normal_matrix(&mut rng, d, config.d_ff, INIT_STD),
                w_out: normal_matrix(&mut rng, config.d_ff, d, resid_std),
                ln_attn_gain: Array2::ones((1, d)),
                ln_attn_bias: Array2::zeros((1, d)),
                ln_mlp_gain: Array2::ones((1, d)),
                ln_mlp_bias: Array2::zeros((1, d)),
            })
            .collect();
        let unembedding = normal_matrix(&mut rng, d, config.vocab_size, INIT_STD);
        Ok(Self {
            config: config.clone(),
            embedding,
            pos_embedding,
            layers,
            ln_final_gain: Array2::ones((1, d)),
            ln_final_bias: Array2::zeros((1, d)),
            unembedding,
        })
    }

    /// Tensors in canonical order with their container names.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![("embedding".into(), &self.embedding)];
        if let Some(p) = &self.pos_embedding {
            out.push(("pos_embedding".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("w_q", &l.w_q),
                ("w_k", &l.w_k),
                ("w_v", &l.w_v),
                ("w_o", &l.w_o),
                ("w_in", &l.w_in),
                ("w_out", &l.w_out),
                ("ln_attn_gain", &l.ln_attn_gain),
                ("ln_attn_bias", &l.ln_attn_bias),
                ("ln_mlp_gain", &l.ln_mlp_gain),
                ("ln_mlp_bias", &l.ln_mlp_bias),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("ln_final_gain".into(), &self.ln_final_gain));
        out.push(("ln_final_bias".into(), &self.ln_final_bias));
        out.push(("unembedding".into(), &self.unembedding));
        out
    }

    /// Mutable view of the tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.embedding];
        if let Some(p) = &mut self.pos_embedding {
            out.push(p);
        }
        for l in &mut self.layers {
            out.extend([
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.w_in,
                &mut l.w_out,
                &mut l.ln_attn_gain,
                &mut l.ln_attn_bias,
                &mut l.ln_mlp_gain,
                &mut l.ln_mlp_bias,
            ]);
        }
        out.extend([&mut self.ln_final_gain, &mut self.ln_final_bias, &mut self.unembedding]);
        out
    }

    /// Rebuilds parameters from named tensors (the inverse of [`named_tensors`](Self::named_tensors)).
    pub fn from_named(config: ModelConfig, mut tensors: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let mut shell = Self::zeros(&config)?;
        let expected: Vec<(String, (usize, usize))> = shell
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.dim()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || *shape != t.dim() {
                return Err(Error::Input(format!(
                    "tensor mismatch: expected {name} {shape:?}, found {got_name} {:?}",
                    t.dim()
                )));
            }
        }
        for (slot, (_, t)) in shell.tensors_mut().into_iter().zip(tensors.drain(..)) {
            *slot = t;
        }
        shell.check_finite()?;
        Ok(shell)
    }

    fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut p = Self::init(config)?;
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        Ok(p)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named_tensors() {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Training(format!("non-finite values in {name}")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the `f32` little-endian bytes of every tensor.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &x in t.iter() {
                h.update((x as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn n_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 32,
            max_seq_len: 16,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = ModelParams::init(&small()).unwrap();
        let b = ModelParams::init(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            d_model: 7,
            ..small()
        };
        assert!(matches!(ModelParams::init(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn weight_matrices_stay_small_over_seeds() {
        for seed in 0..10 {
            let p = ModelParams::init(&ModelConfig { seed, ..ModelConfig::default() }).unwrap();
            for (name, t) in p.named_tensors() {
                if name.contains("ln_") {
                    continue;
                }
                assert!(t.iter().all(|x| x.abs() < 1.0), "{name} seed {seed}");
            }
        }
    }

    #[test]
    fn values_are_f32_representable() {
        let p = ModelParams::init(&small()).unwrap();
        for (_, t) in p.named_tensors() {
            assert!(t.iter().all(|&x| x as f32 as f64 == x));
        }
    }

    #[test]
    fn from_named_round_trips() {
        let p = ModelParams::init(&small()).unwrap();
        let named = p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(ModelParams::from_named(small(), named).unwrap(), p);
    }
}
