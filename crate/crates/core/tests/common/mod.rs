use std::path::Path;

use memat::experiment::ExperimentConfig;
use memat::model::ModelConfig;

/// A pipeline small enough to run end to end in seconds.
pub fn tiny_config(root: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.paths.root = root.to_path_buf();
    c.corpus.n_pairs = 30;
    c.corpus.subject_words = 60;
    c.model = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_ff: 64,
        max_seq_len: 48,
        ..c.model
    };
    c.pretrain.steps = 120;
    c.edit.critical_layers = vec![0];
    c.edit.covariance_sample_count = 2000;
    c.edit.target_opt_steps = 10;
    c.memat.k = 4;
    c.memat.epochs = 2;
    c.eval.n_edit = 12;
    c.eval.block_b_offset = 12;
    c.eval.k_values = vec![0, 2];
    c.eval.scale_indices = vec![0, 2];
    c
}
