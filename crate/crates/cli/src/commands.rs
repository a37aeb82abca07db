use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use snnq::alloc::{
    enumerate_configs, model_size, param_counts, recommend, write_recommendation_csv, RankedCandidate, Recommendation,
    BYTES_PER_MB,
};
use snnq::data::{load_sevt_split, synth_dataset, Dataset, Split};
use snnq::hessian::{read_trace_csv, trace_report, write_trace_csv};
use snnq::net::{evaluate, train_epoch, Form, Network, SgdConfig};
use snnq::quant::{LayerBits, QuantPolicy};

use crate::checkpoint::{hex, Checkpoint};
use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Result};
use crate::record::{build_report, write_bits_csv, write_trace_table_csv, Report, RunRecord};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_RECORD: &str = "train.json";
pub const TRACE_CSV: &str = "traces.csv";
pub const TRACE_RECORD: &str = "trace.json";
pub const EVAL_RECORD: &str = "eval.json";
pub const ALLOCATION_CSV: &str = "allocation.csv";
pub const BITS_TABLE_CSV: &str = "table_bits.csv";
pub const TRACE_TABLE_CSV: &str = "table_traces.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Stem of fine-tuning outputs, e.g. `finetune_8-8-16`.
pub fn finetune_stem(bits: &[LayerBits]) -> String {
    let w: Vec<String> = bits.iter().map(|b| b.weight_bits.to_string()).collect();
    format!("finetune_{}", w.join("-"))
}

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &RunConfig) -> Result<Splits> {
    match &cfg.data {
        DataSource::Synth { .. } => {
            let synth = cfg.data.synth_config(cfg.seed).expect("synthetic source");
            let d = synth_dataset(&synth)?;
            Ok(Splits {
                train: d.train,
                test: d.test,
            })
        }
        DataSource::Sevt { path, dt_us, steps } => Ok(Splits {
            train: load_sevt_split(path, Split::Train, *dt_us, *steps, cfg.seed)?,
            test: load_sevt_split(path, Split::Test, *dt_us, *steps, cfg.seed)?,
        }),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).map_err(CliError::io(&cfg.out_dir))?;
    Ok(&cfg.out_dir)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn fp_size(net: &Network) -> Result<snnq::alloc::SizeReport> {
    let counts = param_counts(&net.layers.iter().map(|l| l.spec.clone()).collect::<Vec<_>>());
    Ok(model_size(&counts, &vec![32; counts.len()])?)
}

fn load_checked(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, String)> {
    let ck = Checkpoint::load(path)?;
    ck.check_arch(&cfg.arch)?;
    Ok((ck, file_sha256(path)?))
}

fn eval_accuracies(ck: &Checkpoint, test: &Dataset) -> Result<Vec<f64>> {
    let report = match &ck.policy {
        Some(p) => evaluate(&ck.net, test, Form::Training, Some(p))?,
        None => evaluate(&ck.net, test, Form::Inference, None)?,
    };
    Ok(report.accuracies)
}

/// Full-precision training. Writes the checkpoint and `train.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunRecord> {
    let start = Instant::now();
    let data = load_data(cfg)?;
    let mut net = Network::new(&cfg.arch, cfg.seed)?;
    let sgd = SgdConfig {
        lr: cfg.optimizer.lr,
        batch_size: cfg.optimizer.batch_size,
        seed: cfg.seed,
    };
    let mut epochs = Vec::with_capacity(cfg.optimizer.epochs);
    for epoch in 0..cfg.optimizer.epochs {
        epochs.push(train_epoch(&mut net, &data.train, &sgd, epoch, None)?);
    }
    let ck = Checkpoint {
        arch: cfg.arch.clone(),
        net,
        policy: None,
    };
    let accuracies = eval_accuracies(&ck, &data.test)?;
    let dir = out_dir(cfg)?;
    ck.save(&dir.join(CHECKPOINT_FILE))?;
    let record = RunRecord {
        command: "train".into(),
        config: cfg.clone(),
        checkpoint_sha256: None,
        bits: None,
        epochs,
        traces: None,
        size: fp_size(&ck.net)?,
        accuracies_before: None,
        accuracies,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    record.save(&dir.join(TRAIN_RECORD))?;
    Ok(record)
}

/// Per-layer Hutchinson traces of a checkpoint over the training split.
pub fn cmd_trace(cfg: &RunConfig, checkpoint: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let (ck, sha) = load_checked(cfg, checkpoint)?;
    let data = load_data(cfg)?;
    let traces = trace_report(&ck.net, &data.train, &cfg.hutchinson.with_seed(cfg.seed))?;
    if let Some(t) = traces.iter().find(|t| !t.estimate.mean.is_finite()) {
        return Err(CliError::Numerical(format!(
            "trace of layer {} is not finite",
            t.layer + 1
        )));
    }
    let accuracies = eval_accuracies(&ck, &data.test)?;
    let dir = out_dir(cfg)?;
    let csv = dir.join(TRACE_CSV);
    let file = File::create(&csv).map_err(CliError::io(&csv))?;
    write_trace_csv(BufWriter::new(file), &traces)?;
    let record = RunRecord {
        command: "trace".into(),
        config: cfg.clone(),
        checkpoint_sha256: Some(sha),
        bits: None,
        epochs: Vec::new(),
        traces: Some(traces),
        size: fp_size(&ck.net)?,
        accuracies_before: None,
        accuracies,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    record.save(&dir.join(TRACE_RECORD))?;
    Ok(record)
}

/// Widths from `--bits`/`--state-bits` overrides, else from the config.
pub fn resolve_bits(cfg: &RunConfig, weight_bits: Option<&[u32]>, state_bits: Option<u32>) -> Result<Vec<LayerBits>> {
    let n = cfg.arch.layers.len();
    let from_cfg = cfg.quant.as_ref().map(|q| q.layers.clone());
    let bits: Vec<LayerBits> = match (weight_bits, from_cfg) {
        (Some(w), base) => {
            if w.len() != n {
                return Err(CliError::Config(format!(
                    "--bits has {} widths for {n} layers",
                    w.len()
                )));
            }
            w.iter()
                .enumerate()
                .map(|(i, &wb)| LayerBits {
                    weight_bits: wb,
                    state_bits: state_bits.or(base.as_ref().map(|b| b[i].state_bits)).unwrap_or(16),
                    frac_bits: None,
                })
                .collect()
        }
        (None, Some(mut b)) => {
            if let Some(s) = state_bits {
                b.iter_mut().for_each(|l| l.state_bits = s);
            }
            b
        }
        (None, None) => {
            return Err(CliError::Config(
                "no bit widths: give --bits or a [quant] section".into(),
            ));
        }
    };
    Ok(bits)
}

/// Quantizes a full-precision checkpoint, records test accuracy, fine-tunes
/// with stochastic rounding and records accuracy again.
pub fn cmd_quantize_finetune(cfg: &RunConfig, checkpoint: &Path, bits: &[LayerBits]) -> Result<RunRecord> {
    let start = Instant::now();
    let (ck, sha) = load_checked(cfg, checkpoint)?;
    let data = load_data(cfg)?;
    let n_calib = cfg
        .quant
        .as_ref()
        .map_or(20, |q| q.calibration_samples)
        .min(data.train.len());
    let mut net = ck.net;
    let policy = QuantPolicy::calibrate(&net, &data.train.samples[..n_calib], bits, cfg.optimizer.grad_scale)?;
    policy.quantize_weights(&mut net)?;
    let before = evaluate(&net, &data.test, Form::Training, Some(&policy))?.accuracies;
    let sgd = SgdConfig {
        lr: cfg.optimizer.finetune_lr(),
        batch_size: cfg.optimizer.batch_size,
        seed: cfg.seed,
    };
    let mut epochs = Vec::with_capacity(cfg.optimizer.finetune_epochs);
    for e in 0..cfg.optimizer.finetune_epochs {
        // epoch numbers continue after training so shuffles differ
        epochs.push(train_epoch(
            &mut net,
            &data.train,
            &sgd,
            cfg.optimizer.epochs + e,
            Some(&policy),
        )?);
    }
    let after = evaluate(&net, &data.test, Form::Training, Some(&policy))?.accuracies;
    let counts = param_counts(&net.layers.iter().map(|l| l.spec.clone()).collect::<Vec<_>>());
    let weight_bits: Vec<u32> = bits.iter().map(|b| b.weight_bits).collect();
    let size = model_size(&counts, &weight_bits)?;
    let dir = out_dir(cfg)?;
    let stem = finetune_stem(bits);
    Checkpoint {
        arch: ck.arch,
        net,
        policy: Some(policy),
    }
    .save(&dir.join(format!("{stem}.ckpt")))?;
    let record = RunRecord {
        command: "quantize-finetune".into(),
        config: cfg.clone(),
        checkpoint_sha256: Some(sha),
        bits: Some(bits.to_vec()),
        epochs,
        traces: None,
        size,
        accuracies_before: Some(before),
        accuracies: after,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    record.save(&dir.join(format!("{stem}.json")))?;
    Ok(record)
}

/// Test accuracy of a checkpoint; quantized checkpoints run with their policy.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let (ck, sha) = load_checked(cfg, checkpoint)?;
    let data = load_data(cfg)?;
    let accuracies = eval_accuracies(&ck, &data.test)?;
    let counts = param_counts(&ck.net.layers.iter().map(|l| l.spec.clone()).collect::<Vec<_>>());
    let (bits, size) = match &ck.policy {
        None => (None, fp_size(&ck.net)?),
        Some(p) => {
            let bits: Vec<LayerBits> = p
                .layers
                .iter()
                .map(|l| LayerBits {
                    weight_bits: l.weight.word_bits,
                    state_bits: l.u.word_bits,
                    frac_bits: None,
                })
                .collect();
            let w: Vec<u32> = bits.iter().map(|b| b.weight_bits).collect();
            (Some(bits), model_size(&counts, &w)?)
        }
    };
    let record = RunRecord {
        command: "eval".into(),
        config: cfg.clone(),
        checkpoint_sha256: Some(sha),
        bits,
        epochs: Vec::new(),
        traces: None,
        size,
        accuracies_before: None,
        accuracies,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    record.save(&out_dir(cfg)?.join(EVAL_RECORD))?;
    Ok(record)
}

/// Ranks bit configurations from a trace CSV. Writes `allocation.csv`.
pub fn cmd_allocate(cfg: &RunConfig, traces_csv: &Path, budget_mb: f64, menu: &[u32]) -> Result<Vec<RankedCandidate>> {
    let file = File::open(traces_csv).map_err(CliError::io(traces_csv))?;
    let rows = read_trace_csv(BufReader::new(file))?;
    let traces: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let counts = param_counts(&cfg.arch.resolve()?);
    if traces.len() != counts.len() {
        return Err(CliError::Config(format!(
            "{} traces for {} layers",
            traces.len(),
            counts.len()
        )));
    }
    let candidates = enumerate_configs(&counts, menu)?;
    match recommend(&traces, &candidates, budget_mb * BYTES_PER_MB)? {
        Recommendation::Ranked(ranked) => {
            let path = out_dir(cfg)?.join(ALLOCATION_CSV);
            let file = File::create(&path).map_err(CliError::io(&path))?;
            write_recommendation_csv(BufWriter::new(file), &ranked)?;
            Ok(ranked)
        }
        Recommendation::InfeasibleBudget {
            max_size_bytes,
            smallest_bytes,
        } => Err(CliError::Infeasible(format!(
            "budget {:.2} MB is below the smallest configuration, {:.2} MB",
            max_size_bytes / BYTES_PER_MB,
            smallest_bytes as f64 / BYTES_PER_MB
        ))),
    }
}

/// Combines run records into the two tables and a JSON summary in `out`.
pub fn cmd_report(records: &[PathBuf], out: &Path) -> Result<Report> {
    let records = records.iter().map(|p| RunRecord::load(p)).collect::<Result<Vec<_>>>()?;
    let report = build_report(&records)?;
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    let write = |name: &str, f: &dyn Fn(BufWriter<File>) -> std::io::Result<()>| -> Result<()> {
        let path = out.join(name);
        let file = File::create(&path).map_err(CliError::io(&path))?;
        f(BufWriter::new(file)).map_err(CliError::io(&path))
    };
    write(BITS_TABLE_CSV, &|w| write_bits_csv(w, &report.bits_table))?;
    write(TRACE_TABLE_CSV, &|w| write_trace_table_csv(w, &report.trace_table))?;
    let summary = out.join(SUMMARY_JSON);
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(&summary, json).map_err(CliError::io(&summary))?;
    Ok(report)
}
