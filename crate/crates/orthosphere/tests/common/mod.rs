#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use orthosphere::config::{self, RunConfig};

/// A run small enough to train in a second or two.
pub fn tiny_toml(out_dir: &Path) -> String {
    format!(
        r#"seed = 3
out_dir = "{}"

[data]
source = "synthetic"
classes = 3
train_per_class = 20
test_per_class = 10
labeled = 30

[model]
conv_blocks = [[4], [8, 8]]
classes = 3

[train]
epochs = 2
batch_size = 10
base_learning_rate = 0.003
ramp_up_epochs = 1
ramp_down_epochs = 1

[train.loss]
consistency = 1.0
aux = 0.0
os = 0.0005
aux_kind = "none"
margin_euclid = 1.0
margin_angle = 0.5
sphere_radius = 3.0
normalize_latent = false
blocks = 4

[analysis]
correlation_images = 20
chunk = 10
"#,
        out_dir.display()
    )
}

pub fn write_tiny(dir: &Path, out_dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, tiny_toml(out_dir)).unwrap();
    path
}

pub fn tiny_config(out_dir: &Path) -> RunConfig {
    config::from_table(toml::from_str(&tiny_toml(out_dir)).unwrap()).unwrap()
}

/// Runs the binary with no `ORTHOSPHERE_*` variables inherited.
pub fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_orthosphere"));
    for (k, _) in std::env::vars() {
        if k.starts_with(config::ENV_PREFIX) {
            cmd.env_remove(k);
        }
    }
    cmd.env("RUST_LOG", "warn").args(args).envs(env.iter().copied());
    cmd.output().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(o));
}
