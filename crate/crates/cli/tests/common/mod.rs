#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small two-layer synthetic setup, a few seconds per command.
pub fn tiny_config(dir: &Path, seed: u64, epochs: usize) -> PathBuf {
    let text = format!(
        r#"seed = {seed}
out_dir = "{out}"

[arch]
n_classes = 3
input = {{ c = 2, h = 8, w = 8 }}
layers = [
    {{ kind = "conv", channels = 4, kernel = 3 }},
    {{ kind = "conv", channels = 6, kernel = 3 }},
]
lif = {{ alpha = 0.9, u_thres = 1.0, surrogate_beta = 10.0 }}
init_gain = 1.0

[optimizer]
lr = 1.0
epochs = {epochs}
batch_size = 4
finetune_epochs = 1

[data]
source = "synth"
n_classes = 3
train_per_class = 4
test_per_class = 4
shape = {{ c = 2, h = 8, w = 8 }}
steps = 20
rate_hi = 0.3
rate_lo = 0.02

[quant]
layers = [
    {{ weight_bits = 8, state_bits = 16 }},
    {{ weight_bits = 8, state_bits = 16 }},
]

[hutchinson]
max_iter = 10
batch_size = 4
max_seq = 20
"#,
        out = dir.join("out").display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

/// The three-layer reference architecture, for size and allocation checks only.
pub fn reference_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"seed = 1
out_dir = "{out}"

[arch]
n_classes = 10
input = {{ c = 2, h = 32, w = 32 }}
layers = [
    {{ kind = "conv", channels = 64, kernel = 7, pool = 2 }},
    {{ kind = "conv", channels = 128, kernel = 7 }},
    {{ kind = "conv", channels = 128, kernel = 7, pool = 2 }},
]

[optimizer]
lr = 1.0
epochs = 0

[data]
source = "synth"
n_classes = 10
train_per_class = 1
test_per_class = 1
shape = {{ c = 2, h = 32, w = 32 }}
steps = 5
rate_hi = 0.3
rate_lo = 0.02
"#,
        out = dir.join("out").display()
    );
    let path = dir.join("reference.toml");
    fs::write(&path, text).unwrap();
    path
}

pub fn snnq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snnq")).args(args).output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
