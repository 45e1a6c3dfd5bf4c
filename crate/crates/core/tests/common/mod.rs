#![allow(dead_code)]

use safe_cl::harness::ExperimentConfig;

/// A run that finishes in well under a second.
pub const SMALL: &str = r#"
seed = 5

[backbone]
input_width = 8
tokens = 3
width = 12
blocks = 1
hidden = 16

[pretrain]
epochs = 5

[learner]
epochs = 3

[head]
dim = 64

[stream]
classes = 6
pretext_classes = 4
sessions = 3
base_classes = 2
samples_per_class = 12
test_per_class = 6
"#;

pub fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(SMALL).expect("small config is valid")
}
