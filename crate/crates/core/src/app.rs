//! Command implementations shared by the command-line tool and bindings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::complexity::{network_complexity_from_gates, ComplexityBudget, ComplexityState};
use crate::compiler::SavingsReport;
use crate::data::{DataConfig, DataSource, Splits};
use crate::error::{DgError, Result};
use crate::io::checkpoint::{Checkpoint, CheckpointKind, OptimizerBlob};
use crate::io::config::RunConfig;
use crate::io::{atomic_write, write_json};
use crate::model::Model;
use crate::train::{init_gates, predict, train, BudgetConfig, DynamicsLog, Evaluation, StepRecord, TrainObserver};

pub const THREADS_ENV: &str = "DGCONV_THREADS";
pub const DEFAULT_UNIFORM_GROUPS: usize = 32;

/// Process exit status for an error: 2 for bad input, 3 for divergence, 1 otherwise.
pub fn exit_code(err: &DgError) -> i32 {
    match err {
        DgError::Config(_) | DgError::Parse { .. } | DgError::Data(_) | DgError::Unsupported(_) => 2,
        DgError::Divergence { .. } => 3,
        _ => 1,
    }
}

/// Reads the thread-count variable; `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| DgError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
    pub zeta: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub train_accuracy: f64,
    pub initial_zeta: u64,
    pub zeta: u64,
    pub o: f64,
    pub budget_satisfied: bool,
    pub layers: Vec<LayerSummary>,
}

fn layer_summaries(names: &[String], gates: &[crate::gates::BinaryGates], state: &ComplexityState) -> Vec<LayerSummary> {
    names
        .iter()
        .zip(gates)
        .zip(&state.per_layer)
        .map(|((name, g), &zeta)| LayerSummary {
            name: name.clone(),
            channels: g.channels(),
            groups: crate::gates::group_count(g),
            zeta,
        })
        .collect()
}

struct RunWriter<'a> {
    out: &'a Path,
    csv: String,
    gates_csv: String,
    budget: BudgetConfig,
}

impl RunWriter<'_> {
    fn flush(&self) -> Result<()> {
        atomic_write(&self.out.join("metrics.csv"), self.csv.as_bytes())?;
        atomic_write(&self.out.join("gates.csv"), self.gates_csv.as_bytes())
    }
}

impl TrainObserver<f32> for RunWriter<'_> {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        self.csv.push_str(&DynamicsLog::csv_row(r));
        self.csv.push('\n');
        for (l, g) in r.gates.iter().enumerate() {
            for (k, v) in g.iter().enumerate() {
                self.gates_csv.push_str(&format!(
                    "{},{l},{k},{v},{},{}\n",
                    r.step, r.task_gate_grads[l][k], r.penalty_gate_grads[l][k]
                ));
            }
        }
        Ok(())
    }

    fn on_epoch(&mut self, _epoch: usize, step: usize, model: &Model<f32>) -> Result<()> {
        let ck = Checkpoint::from_model(model, step as u64, Some(self.budget.clone()), None);
        ck.save(&self.out.join("checkpoint.dgcv"))?;
        self.flush()
    }
}

/// Loads a configuration, trains, and writes every artifact under `out`.
pub fn cmd_train(config_path: &Path, out: &Path) -> Result<TrainSummary> {
    let cfg = RunConfig::load(config_path)?;
    run_training(&cfg, out)
}

pub fn run_training(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    atomic_write(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let data = cfg.data.load()?;
    let model_cfg = cfg.model_config();
    check_data(&model_cfg, &data)?;
    let mut model = Model::<f32>::new(model_cfg, cfg.train.seed)?;
    init_gates(&mut model, cfg.train.seed)?;
    let layers = model.dgconv_layers().len();
    let mut writer = RunWriter {
        out,
        csv: DynamicsLog::csv_header(layers) + "\n",
        gates_csv: "step,layer,gate,tilde_g,task_grad,penalty_grad\n".into(),
        budget: cfg.budget.clone(),
    };
    let result = train(&mut model, &data, &cfg.train, &cfg.budget, cfg.data.augment, &mut writer);
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            writer.flush()?;
            if let DgError::Divergence { step, detail } = &e {
                let diag = serde_json::json!({ "error": "divergence", "step": step, "detail": detail });
                write_json(&out.join("divergence.json"), &diag)?;
            }
            return Err(e);
        }
    };
    writer.flush()?;
    let blob = OptimizerBlob::from_state(&outcome.optimizer);
    Checkpoint::from_model(&model, outcome.steps as u64, Some(cfg.budget.clone()), Some(blob))
        .save(&out.join("checkpoint.dgcv"))?;
    let gates: Vec<_> = model.dgconv_layers().iter().map(|l| l.binary_gates().clone()).collect();
    let summary = TrainSummary {
        steps: outcome.steps,
        epochs: cfg.train.epochs,
        seed: cfg.train.seed,
        test_accuracy: outcome.test.accuracy,
        test_loss: outcome.test.loss,
        train_accuracy: outcome.train_acc,
        initial_zeta: outcome.initial.total,
        zeta: outcome.last.total,
        o: outcome.last.o,
        budget_satisfied: outcome.last.satisfied(),
        layers: layer_summaries(&model.dgconv_names(), &gates, &outcome.last),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn check_data(cfg: &crate::model::ModelConfig, data: &Splits) -> Result<()> {
    for ds in [&data.train, &data.test] {
        if ds.channels() != cfg.input_channels || ds.size() != cfg.input_size || ds.classes() > cfg.classes {
            return Err(DgError::Data(format!(
                "dataset images ({}, {s}, {s}) with {} classes do not fit a model for ({}, {m}, {m}) and {} classes",
                ds.channels(),
                ds.classes(),
                cfg.input_channels,
                cfg.classes,
                s = ds.size(),
                m = cfg.input_size,
            )));
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// `synthetic[...]`, `cifar10:<dir>`, `raw:<train>,<test>` or `config:<file>`.
pub fn parse_data_spec(spec: &str) -> Result<DataConfig> {
    if let Some(path) = spec.strip_prefix("config:") {
        return Ok(RunConfig::load(Path::new(path))?.data);
    }
    Ok(DataConfig {
        augment: false,
        ..DataConfig::from(spec.parse::<DataSource>()?)
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub kind: String,
    pub data: String,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

/// Evaluates on the test split; optionally writes logits as JSON rows.
pub fn cmd_eval(ckpt: &Path, data_spec: &str, logits_out: Option<&Path>) -> Result<EvalReport> {
    let ck = load_checkpoint(ckpt)?;
    let model = ck.model()?;
    let data = parse_data_spec(data_spec)?.load()?;
    check_data(model.config(), &data)?;
    let logits = predict(&model, &data.test, 64)?;
    let out = crate::tensor::layers::softmax_xent(&logits, data.test.labels())?;
    if let Some(path) = logits_out {
        let classes = logits.channels();
        let rows: Vec<&[f32]> = logits.data().chunks(classes).collect();
        write_json(path, &rows)?;
    }
    Ok(EvalReport {
        checkpoint: ckpt.to_path_buf(),
        kind: match ck.kind {
            CheckpointKind::Training => "checkpoint".into(),
            CheckpointKind::Export => "export".into(),
        },
        data: data_spec.to_string(),
        evaluation: Evaluation {
            loss: out.loss,
            accuracy: out.correct as f64 / data.test.len() as f64,
            samples: data.test.len(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub zeta: u64,
    pub tilde_g: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub layers: Vec<AnalysisLayer>,
    pub zeta: u64,
    pub o: f64,
    pub b: f64,
    pub alpha: f64,
    pub multiplier: f64,
    pub satisfied: bool,
}

impl Analysis {
    pub fn render(&self) -> String {
        let mut s = format!("{:<16} {:>8} {:>8} {:>6} {:>10}\n", "layer", "C_in", "C_out", "G", "zeta");
        for l in &self.layers {
            s.push_str(&format!(
                "{:<16} {:>8} {:>8} {:>6} {:>10}\n",
                l.name, l.in_channels, l.out_channels, l.groups, l.zeta
            ));
        }
        s.push_str(&format!(
            "network zeta {} / o {} (b {}): {}\n",
            self.zeta,
            self.o,
            self.b,
            if self.satisfied { "satisfied" } else { "violated" }
        ));
        s
    }
}

pub fn analyze_checkpoint(ck: &Checkpoint) -> Result<Analysis> {
    let model = ck.model()?;
    let budget_cfg = ck.meta.budget.clone().unwrap_or_default();
    let layers = model.grouping_layers();
    let channels: Vec<usize> = layers.iter().map(|(_, _, ci, co)| *ci.max(co)).collect();
    let per: Vec<(crate::gates::BinaryGates, usize, usize)> =
        layers.iter().map(|(_, g, ci, co)| (g.clone(), *ci, *co)).collect();
    let tilde: Vec<Option<Vec<f64>>> = {
        let dyn_layers = model.dgconv_layers();
        if dyn_layers.len() == layers.len() {
            dyn_layers.iter().map(|l| Some(l.gates().values().to_vec())).collect()
        } else {
            vec![None; layers.len()]
        }
    };
    let budget = if channels.is_empty() {
        None
    } else {
        Some(ComplexityBudget::new(budget_cfg.b, budget_cfg.alpha, channels)?)
    };
    let state = match &budget {
        Some(b) => network_complexity_from_gates(&per, b)?,
        None => ComplexityState::from_layers(Vec::new(), 0.0, budget_cfg.alpha),
    };
    let out_layers = layers
        .iter()
        .zip(&state.per_layer)
        .zip(tilde)
        .map(|(((name, g, ci, co), &zeta), tilde_g)| AnalysisLayer {
            name: name.clone(),
            in_channels: *ci,
            out_channels: *co,
            groups: crate::gates::group_count(g),
            zeta,
            tilde_g,
        })
        .collect();
    Ok(Analysis {
        layers: out_layers,
        zeta: state.total,
        o: state.o,
        b: budget_cfg.b,
        alpha: budget_cfg.alpha,
        multiplier: state.multiplier,
        satisfied: state.satisfied(),
    })
}

/// Prints nothing itself; writes `analysis.json` to `out` or next to the checkpoint.
pub fn cmd_analyze(ckpt: &Path, out: Option<&Path>) -> Result<(Analysis, PathBuf)> {
    let analysis = analyze_checkpoint(&load_checkpoint(ckpt)?)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("analysis.json"),
    };
    write_json(&path, &analysis)?;
    Ok((analysis, path))
}

pub fn cmd_export(ckpt: &Path, out: &Path, uniform_groups: usize) -> Result<SavingsReport> {
    let ck = load_checkpoint(ckpt)?;
    if ck.kind == CheckpointKind::Export {
        return Err(DgError::Unsupported(format!("{} is already an export", ckpt.display())));
    }
    let model = ck.model()?;
    let ex = Checkpoint::export(&model, ck.step, ck.meta.budget.clone(), uniform_groups)?;
    ex.save(out)?;
    Ok(ex.meta.savings.expect("export embeds a report"))
}

pub use crate::verify::{run_verify, Fault, VerifyOptions, VerifyReport};
