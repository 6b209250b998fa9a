//! Minibatch SGD on the penalized objective, with per-step group dynamics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complexity::{network_complexity, penalized_loss, ComplexityBudget, ComplexityState, DEFAULT_ALPHA};
use crate::data::{epoch_order, Dataset, Splits};
use crate::error::{config_err, DgError, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::layers::softmax_xent;
use crate::tensor::FeatureMap;

pub const GATE_INIT: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Gates receive the task-loss gradient.
    #[serde(default = "yes")]
    pub task_gate_grad: bool,
    /// Gates receive the complexity-penalty gradient.
    #[serde(default = "yes")]
    pub penalty_gate_grad: bool,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            task_gate_grad: true,
            penalty_gate_grad: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(config_err!("epochs must be positive and batch size at least 2"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(config_err!("base_lr must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(config_err!("momentum must lie in [0, 1) and weight decay be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    /// Budget o = sum C^2 / b.
    pub b: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            b: 2.0,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// `0.5 * base * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> Result<f64> {
    if step > total {
        return Err(DgError::Range { step, total });
    }
    if total == 0 {
        return Ok(base);
    }
    Ok(0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

/// Sets every gate to `+1e-8` or `-1e-8` by a seeded fair coin.
pub fn init_gates<T: Scalar>(model: &mut Model<T>, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    model.update_gates(|_, g| {
        for v in g {
            *v = if rng.random_bool(0.5) { GATE_INIT } else { -GATE_INIT };
        }
    })
}

/// `v <- momentum * v + grad + wd * param; param <- param - lr * v`.
pub fn sgd_update<T: Scalar>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, wd: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(DgError::Dimension(format!(
            "sgd lengths: param {}, grad {}, velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let (lr, mom, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(wd));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mom * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for weights and gates. Gates are never decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocities: Vec<Vec<T>>,
    pub gate_velocities: Vec<Vec<f64>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &mut Model<T>, momentum: f64, weight_decay: f64) -> Self {
        let mut velocities = Vec::new();
        model.visit_weights(&mut |_, v, _| velocities.push(vec![T::ZERO; v.len()]));
        let gate_velocities = model.dgconv_layers().iter().map(|l| vec![0.0; l.gates().len()]).collect();
        Self {
            momentum,
            weight_decay,
            velocities,
            gate_velocities,
        }
    }

    /// One update of every weight and gate from the gradients held by the model.
    pub fn step(&mut self, model: &mut Model<T>, lr: f64) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        let (mom, wd) = (self.momentum, self.weight_decay);
        let velocities = &mut self.velocities;
        model.visit_weights(&mut |name, p, g| {
            let r = match velocities.get_mut(i) {
                Some(v) => sgd_update(p, g, v, lr, mom, wd),
                None => Err(DgError::Dimension(format!("no velocity buffer for {name}"))),
            };
            if let (Err(e), None) = (r, &err) {
                err = Some(e);
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        let grads: Vec<Vec<f64>> = model.gate_gradients().iter().map(|g| g.total()).collect();
        if grads.len() != self.gate_velocities.len() {
            return Err(DgError::Dimension("gate velocity count".into()));
        }
        let gate_v = &mut self.gate_velocities;
        model.update_gates(|l, g| {
            let _ = sgd_update(g, &grads[l], &mut gate_v[l], lr, mom, 0.0);
        })
    }
}

/// One optimizer step of the learning dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub total_loss: f64,
    pub zeta: u64,
    pub o: f64,
    pub multiplier: f64,
    /// Group count of each DGConv layer after the update.
    pub groups: Vec<usize>,
    /// Running training accuracy within the epoch.
    pub train_acc: f64,
    /// Continuous gates of each layer after the update.
    pub gates: Vec<Vec<f64>>,
    pub task_gate_grads: Vec<Vec<f64>>,
    pub penalty_gate_grads: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsLog {
    pub records: Vec<StepRecord>,
}

impl DynamicsLog {
    pub fn csv_header(layers: usize) -> String {
        let mut cols: Vec<String> = ["step", "epoch", "lr", "task_loss", "total_loss", "zeta", "o", "multiplier"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend((0..layers).map(|l| format!("G_layer_{l}")));
        cols.push("train_acc".into());
        cols.join(",")
    }

    pub fn csv_row(r: &StepRecord) -> String {
        let mut cols = vec![
            r.step.to_string(),
            r.epoch.to_string(),
            r.lr.to_string(),
            r.task_loss.to_string(),
            r.total_loss.to_string(),
            r.zeta.to_string(),
            r.o.to_string(),
            r.multiplier.to_string(),
        ];
        cols.extend(r.groups.iter().map(|g| g.to_string()));
        cols.push(r.train_acc.to_string());
        cols.join(",")
    }

    pub fn to_csv(&self, layers: usize) -> String {
        let mut out = Self::csv_header(layers);
        out.push('\n');
        for r in &self.records {
            out.push_str(&Self::csv_row(r));
            out.push('\n');
        }
        out
    }
}

/// Hooks invoked during training; the defaults do nothing.
pub trait TrainObserver<T> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _epoch: usize, _step: usize, _model: &Model<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> TrainObserver<T> for () {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub log: DynamicsLog,
    pub initial: ComplexityState,
    pub last: ComplexityState,
    pub train_acc: f64,
    pub test: Evaluation,
    pub steps: usize,
    pub optimizer: OptimizerState<T>,
}

pub fn budget_for<T: Scalar>(model: &Model<T>, cfg: &BudgetConfig) -> Result<ComplexityBudget> {
    let channels = model.dgconv_layers().iter().map(|l| l.in_channels().max(l.out_channels())).collect();
    ComplexityBudget::new(cfg.b, cfg.alpha, channels)
}

fn complexity<T: Scalar>(model: &Model<T>, budget: &ComplexityBudget) -> ComplexityState {
    network_complexity(&model.dgconv_layers(), budget)
}

/// Trains `model` in place. Gates are expected to be initialized already.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Splits,
    cfg: &TrainConfig,
    budget_cfg: &BudgetConfig,
    augment: bool,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let budget = budget_for(model, budget_cfg)?;
    let train_set = &data.train;
    let batches_per_epoch = train_set.len() / cfg.batch_size + usize::from(train_set.len() % cfg.batch_size >= 2);
    if batches_per_epoch == 0 {
        return Err(DgError::Data(format!(
            "training set of {} records yields no batch of at least 2",
            train_set.len()
        )));
    }
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut opt = OptimizerState::new(model, cfg.momentum, cfg.weight_decay);
    let initial = complexity(model, &budget);
    let mut log = DynamicsLog::default();
    let mut step = 0;
    let mut train_acc = 0.0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5851_f42d_4c95_7f2d) ^ epoch as u64);
        let (mut seen, mut correct) = (0usize, 0usize);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let lr = cosine_lr(step, total_steps, cfg.base_lr)?;
            let (x, labels) = train_set.batch(idx, augment.then_some(&mut aug_rng))?;
            let state = complexity(model, &budget);
            let (logits, cache) = model.forward_train(&x.cast::<T>())?;
            let out = softmax_xent(&logits, &labels)?;
            if !out.loss.is_finite() || !logits.all_finite() {
                return Err(DgError::Divergence {
                    step,
                    detail: format!("epoch {epoch}, lr {lr}, task loss {}, zeta {}", out.loss, state.total),
                });
            }
            let gates: Vec<_> = model.dgconv_layers().iter().map(|l| l.binary_gates().clone()).collect();
            let (total_loss, scale, penalty) = if gates.is_empty() {
                (out.loss, 1.0, Vec::new())
            } else {
                let p = penalized_loss(out.loss, &state, &gates.iter().collect::<Vec<_>>())?;
                (p.total, p.task_scale, p.gate_grads)
            };
            let mut dlogits = out.grad;
            if scale != 1.0 {
                let s = T::from_f64(scale);
                dlogits.data_mut().iter_mut().for_each(|v| *v *= s);
            }
            model.backward(cache, &dlogits)?;
            for (l, g) in model.gate_gradients_mut().into_iter().enumerate() {
                if !cfg.task_gate_grad {
                    g.task.iter_mut().for_each(|v| *v = 0.0);
                }
                if cfg.penalty_gate_grad {
                    g.penalty.clone_from(&penalty[l]);
                }
            }
            let (task_gate_grads, penalty_gate_grads) = model
                .gate_gradients()
                .iter()
                .map(|g| (g.task.clone(), g.penalty.clone()))
                .unzip();
            opt.step(model, lr)?;

            seen += labels.len();
            correct += out.correct;
            train_acc = correct as f64 / seen as f64;
            let layers = model.dgconv_layers();
            let record = StepRecord {
                step,
                epoch,
                lr,
                task_loss: out.loss,
                total_loss,
                zeta: state.total,
                o: state.o,
                multiplier: state.multiplier,
                groups: layers.iter().map(|l| l.group_count()).collect(),
                train_acc,
                gates: layers.iter().map(|l| l.gates().values().to_vec()).collect(),
                task_gate_grads,
                penalty_gate_grads,
            };
            observer.on_step(&record)?;
            log.records.push(record);
            step += 1;
        }
        observer.on_epoch(epoch, step, model)?;
    }
    let last = complexity(model, &budget);
    let test = evaluate(model, &data.test, cfg.batch_size)?;
    Ok(TrainOutcome {
        log,
        initial,
        last,
        train_acc,
        test,
        steps: step,
        optimizer: opt,
    })
}

/// Logits of every record, in dataset order, using running statistics.
pub fn predict<T: Scalar>(model: &Model<T>, ds: &Dataset, batch: usize) -> Result<FeatureMap<T>> {
    let batch = batch.max(1);
    let classes = model.config().classes;
    let mut all = Vec::with_capacity(ds.len() * classes);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, _) = ds.batch(chunk, None)?;
        let logits = model.forward_eval(&x.cast::<T>())?;
        all.extend_from_slice(logits.data());
    }
    FeatureMap::from_vec(ds.len(), classes, 1, 1, all)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset, batch: usize) -> Result<Evaluation> {
    let logits = predict(model, ds, batch)?;
    let out = softmax_xent(&logits, ds.labels())?;
    Ok(Evaluation {
        loss: out.loss,
        accuracy: out.correct as f64 / ds.len() as f64,
        samples: ds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataConfig, DataSource};
    use crate::model::{ConvMode, ModelConfig};

    fn small_model(seed: u64) -> Model<f32> {
        let cfg = ModelConfig {
            input_size: 8,
            stem_width: 8,
            stage_widths: vec![8, 16],
            blocks_per_stage: vec![1, 1],
            classes: 4,
            mode: ConvMode::Dgconv,
            ..ModelConfig::desk()
        };
        let mut m = Model::new(cfg, seed).unwrap();
        init_gates(&mut m, seed).unwrap();
        m
    }

    fn small_data(n: usize) -> Splits {
        DataConfig::from(DataSource::synthetic(n, 32, 8, 4, 1)).load().unwrap()
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, 100, 0.1), Err(DgError::Range { step: 101, total: 100 })));
    }

    #[test]
    fn sgd_scalar_case() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
        let mut p = [2.0f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.0], &mut v, 0.1, 0.9, 1e-4).unwrap();
        assert!(p[0] < 2.0);
        assert!(sgd_update(&mut p, &[0.0, 1.0], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn gate_init() {
        let cfg = ModelConfig {
            stage_widths: vec![1 << 10, 1 << 10],
            blocks_per_stage: vec![50, 50],
            input_size: 8,
            ..ModelConfig::desk()
        };
        // gate bookkeeping only; build the layers without the big kernels
        let gates: usize = cfg.expected_counts().gates;
        assert_eq!(gates, 1000);
        let mut m = small_model(0);
        init_gates(&mut m, 42).unwrap();
        let a: Vec<f64> = m.dgconv_layers().iter().flat_map(|l| l.gates().values().to_vec()).collect();
        assert!(a.iter().all(|v| v.abs() == GATE_INIT));
        let mut m2 = small_model(0);
        init_gates(&mut m2, 42).unwrap();
        let b: Vec<f64> = m2.dgconv_layers().iter().flat_map(|l| l.gates().values().to_vec()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn gates_skip_weight_decay() {
        let mut m = small_model(1);
        let before: Vec<Vec<f64>> = m.dgconv_layers().iter().map(|l| l.gates().values().to_vec()).collect();
        let mut opt = OptimizerState::new(&mut m, 0.9, 0.5);
        let mut w_before = Vec::new();
        m.visit_weights(&mut |_, v, _| w_before.extend(v.iter().map(|x| x.abs())));
        opt.step(&mut m, 0.1).unwrap();
        let after: Vec<Vec<f64>> = m.dgconv_layers().iter().map(|l| l.gates().values().to_vec()).collect();
        assert_eq!(before, after);
        let mut w_after = Vec::new();
        m.visit_weights(&mut |_, v, _| w_after.extend(v.iter().map(|x| x.abs())));
        assert!(w_after.iter().zip(&w_before).all(|(a, b)| a <= b));
        assert!(w_after.iter().sum::<f32>() < w_before.iter().sum::<f32>());
    }

    #[test]
    fn loose_budget_gives_zero_penalty() {
        let mut m = small_model(2);
        let data = small_data(64);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(&mut m, &data, &cfg, &BudgetConfig { b: 1e-6, alpha: DEFAULT_ALPHA }, true, &mut ()).unwrap();
        assert_eq!(out.log.records.len(), 4);
        for r in &out.log.records {
            assert_eq!(r.multiplier, 1.0);
            assert_eq!(r.total_loss, r.task_loss);
            assert!(r.penalty_gate_grads.iter().flatten().all(|&v| v == 0.0));
            assert!(r.groups.iter().all(|g| g.is_power_of_two()));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data(64);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = small_model(3);
            let out = train(&mut m, &data, &cfg, &BudgetConfig::default(), true, &mut ()).unwrap();
            out.log.to_csv(2)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn csv_schema() {
        assert_eq!(
            DynamicsLog::csv_header(2),
            "step,epoch,lr,task_loss,total_loss,zeta,o,multiplier,G_layer_0,G_layer_1,train_acc"
        );
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = small_model(4);
        let data = small_data(64);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            base_lr: 1e30,
            ..TrainConfig::default()
        };
        let err = train(&mut m, &data, &cfg, &BudgetConfig::default(), false, &mut ()).unwrap_err();
        assert!(matches!(err, DgError::Divergence { .. }), "{err:?}");
    }
}
