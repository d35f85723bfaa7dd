#![allow(dead_code)]

use ppm_harness::Config;

/// A world and models small enough to run every stage in seconds.
pub const TINY_TOML: &str = r#"
[data]
num_items = 300
num_users = 80
num_train = 4000
num_test = 800
num_shops = 20
num_brands = 30
num_categories = 10
num_entities = 12
title_vocab = 100
num_query_pairs = 2000
max_seq_len = 10
candidates_per_request = 5
days = 6

[encoders]
text_dim = 8
vision_dim = 8
vision_hidden = 16
qm_epochs = 2
ep_epochs = 4

[urm]
id_dim = 4
id_ffn = 16
num_experts = 2
expert_hidden = 8
expert_dim = 8
tower_hidden = 4
batch_size = 64
epochs = 1
max_seq_len = 10
max_position = 10

[urm.ppm]
model_dim = 8
ffn_dim = 16
head_hidden = 8
max_seq_len = 10
max_position = 10
batch_size = 64
epochs = 1

[experiment]
seeds = [1, 2]
bucket_edges = [5, 20]
grid = []

[pipeline]
urm_epochs = 1
ppm_update_epochs = 1
"#;

pub fn tiny_config() -> Config {
    Config::from_toml(TINY_TOML).unwrap()
}
