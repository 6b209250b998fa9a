//! One-shot oracle suite: structural identities, convolution equivalences,
//! finite-difference gradients, objective formulas, and file round trips.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compiler::compile;
use crate::complexity::{budget_from_b, penalized_loss, ComplexityState, DEFAULT_ALPHA};
use crate::dgconv::DGConvLayer;
use crate::error::Result;
use crate::gates::{
    binarize, build_relationship_matrix, find_block_structure, group_count, layer_complexity, nnz_oracle,
    relaxed_relationship, BinaryGates, GateVector,
};
use crate::io::checkpoint::Checkpoint;
use crate::model::{ConvMode, Model, ModelConfig};
use crate::oracle::{conv2d_naive, fd_kernel_grad, fd_map_grad, fd_vec_grad, max_rel_err};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_forward, ConvGeometry, FeatureMap, KernelTensor};
use crate::train::{cosine_lr, init_gates, sgd_update};

/// A deliberately broken convention, for checking that the suite notices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Binarize with the sign flipped: `g = 1` iff `g~ < 0`.
    SignConvention,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn binarize_under_test(values: &[f64], fault: Option<Fault>) -> std::result::Result<BinaryGates, String> {
    match fault {
        None => lift(binarize(values)),
        Some(Fault::SignConvention) => {
            let flipped: Vec<f64> = values.iter().map(|v| -v).collect();
            lift(binarize(&flipped))
        }
    }
}

pub fn run_verify(opts: &VerifyOptions, mut progress: impl FnMut(&CheckResult)) -> VerifyReport {
    let fault = opts.fault;
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("binarize.sign_convention", Box::new(move || check_sign(fault))),
        ("binarize.group_example", Box::new(move || check_group_example(fault))),
        ("binarize.rejects_non_finite", Box::new(check_non_finite)),
        ("relationship.structure_exhaustive", Box::new(check_structure)),
        ("relationship.block_permutation", Box::new(check_block_permutation)),
        ("relationship.gate_parameter_count", Box::new(check_gate_count)),
        ("conv.equivalence_f64", Box::new(|| check_equivalence::<f64>(1e-10))),
        ("conv.equivalence_f32", Box::new(|| check_equivalence::<f32>(1e-5))),
        ("grad.input_and_kernel_fd", Box::new(check_grad_fd)),
        ("grad.gate_fd", Box::new(check_gate_fd)),
        ("grad.masking_exact", Box::new(check_masking)),
        ("complexity.zeta_identities", Box::new(check_zeta)),
        ("complexity.multiplier", Box::new(check_multiplier)),
        ("train.schedule_and_sgd", Box::new(check_schedule)),
        ("model.dense_equivalence", Box::new(check_model_equivalence)),
        ("export.compiled_round_trip", Box::new(check_export)),
    ];
    let mut out = Vec::with_capacity(checks.len());
    for (name, f) in checks {
        let t = Instant::now();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let (passed, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let c = CheckResult {
            name: name.to_string(),
            passed,
            detail,
            millis: t.elapsed().as_millis(),
        };
        progress(&c);
        out.push(c);
    }
    VerifyReport { checks: out }
}

fn check_sign(fault: Option<Fault>) -> Outcome {
    let g = binarize_under_test(&[-1.0, 0.0, 1e-8, -1e-8, 3.0], fault)?;
    ensure(g.to_bits() == [0, 1, 1, 0, 1], || format!("binarize gave {:?}, expected [0, 1, 1, 0, 1]", g.to_bits()))?;
    Ok("sign(0) = 1".into())
}

fn check_group_example(fault: Option<Fault>) -> Outcome {
    let g = binarize_under_test(&[-0.3, 0.2, -0.1], fault)?;
    let groups = group_count(&g);
    let zeta = lift(layer_complexity(&g, 8))?;
    ensure(groups == 4 && zeta == 16, || format!("g~=[-0.3,0.2,-0.1], C=8: G={groups}, zeta={zeta}; expected 4, 16"))?;
    let p = crate::gates::block_diagonal_permutation(&lift(binarize(&[0.5, -0.5]))?);
    ensure(p == [0, 2, 1, 3], || format!("permutation {p:?}"))?;
    Ok("G=4, zeta=16".into())
}

fn check_non_finite() -> Outcome {
    ensure(binarize(&[0.0, f64::NAN]).is_err(), || "NaN accepted".into())?;
    ensure(GateVector::new(vec![f64::INFINITY]).is_err(), || "inf accepted".into())?;
    Ok(String::new())
}

fn check_structure() -> Outcome {
    let mut n = 0;
    for k in 0..=6usize {
        let c = 1usize << k;
        for idx in 0..(1usize << k) {
            let g = BinaryGates::enumerate(k, idx);
            let u = build_relationship_matrix(&g);
            let expect: u64 = g.as_slice().iter().map(|&b| if b { 2 } else { 1 }).product();
            let lc = lift(layer_complexity(&g, c))?;
            ensure(lc == nnz_oracle(&u), || format!("{:?}: complexity {lc} vs nnz {}", g.to_bits(), nnz_oracle(&u)))?;
            ensure(lc == c as u64 * expect, || format!("{:?}: complexity {lc}", g.to_bits()))?;
            ensure(u.is_symmetric() && u.has_unit_diagonal(), || format!("{:?}: not symmetric/unit-diag", g.to_bits()))?;
            ensure(
                u.row_sums().iter().chain(&u.col_sums()).all(|&s| s == expect),
                || format!("{:?}: row/col sums differ from {expect}", g.to_bits()),
            )?;
            n += 1;
        }
    }
    Ok(format!("{n} gate vectors"))
}

fn check_block_permutation() -> Outcome {
    for k in 1..=5usize {
        for idx in 0..(1usize << k) {
            let g = BinaryGates::enumerate(k, idx);
            let u = build_relationship_matrix(&g);
            let c = 1 << k;
            let found = find_block_structure(c, c, |p, q| u.get(p, q));
            ensure(found.as_ref().is_some_and(|f| f.2 == group_count(&g)), || {
                format!("{:?}: block structure {:?}", g.to_bits(), found.as_ref().map(|f| f.2))
            })?;
        }
    }
    // a path-shaped pattern has no equal-block form
    let bad = |p: usize, q: usize| p == q || p + 1 == q;
    ensure(find_block_structure(4, 4, bad).is_none(), || "counterexample accepted".into())?;
    Ok(String::new())
}

fn check_gate_count() -> Outcome {
    let g = lift(GateVector::for_channels(1024))?;
    ensure(g.len() == 10, || format!("C=1024 gives {} gates", g.len()))?;
    let cfg = ModelConfig {
        stage_widths: vec![16, 32, 64],
        blocks_per_stage: vec![1, 1, 1],
        ..ModelConfig::desk()
    };
    let gates = cfg.expected_counts().gates;
    ensure(gates == 15, || format!("widths 16/32/64 give {gates} gates"))?;
    Ok("C=1024 -> 10".into())
}

fn rand_layer<T: Scalar>(rng: &mut ChaCha8Rng, g: &BinaryGates, k: usize) -> Result<DGConvLayer<T>> {
    let c = g.channels();
    let w = KernelTensor::from_fn(k, c, c, |_, _, _, _| T::from_f64(rng.random_range(-1.0..1.0)))?;
    let tilde = g.as_slice().iter().map(|&b| if b { 0.5 } else { -0.5 }).collect();
    DGConvLayer::new(w, GateVector::new(tilde)?, ConvGeometry::same(k))
}

fn check_equivalence<T: Scalar>(tol: f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for k in 1..=5usize {
        for idx in 0..(1usize << k) {
            let g = BinaryGates::enumerate(k, idx);
            let c = g.channels();
            let layer = lift(rand_layer::<T>(&mut rng, &g, 3))?;
            let x = lift(FeatureMap::from_fn(2, c, 5, 5, |_, _, _, _| T::from_f64(rng.random_range(-1.0..1.0))))?;
            let fast = lift(layer.forward(&x))?;
            let u = layer.relationship();
            let masked = layer.kernel().masked(|p, q| u.get(p, q));
            let naive = lift(conv2d_naive(&x, &masked, layer.geometry()))?;
            let compiled = lift(lift(compile(&layer))?.forward(&x))?;
            let e = max_rel_err(fast.data(), naive.data()).max(max_rel_err(compiled.data(), naive.data()));
            ensure(e <= tol, || format!("{:?}: rel err {e:e} > {tol:e}", g.to_bits()))?;
            worst = worst.max(e);
            cases += 1;
        }
    }
    Ok(format!("{cases} gate vectors, worst {worst:.2e}"))
}

fn random_gates(rng: &mut ChaCha8Rng, k: usize) -> BinaryGates {
    BinaryGates::new((0..k).map(|_| rng.random_bool(0.5)).collect())
}

fn check_grad_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let k = 1 + case % 3;
        let g = random_gates(&mut rng, k);
        let c = g.channels();
        let ks = if case % 2 == 0 { 3 } else { 1 };
        let layer = lift(rand_layer::<f64>(&mut rng, &g, ks))?;
        let x = lift(FeatureMap::from_fn(2, c, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)))?;
        let v = lift(FeatureMap::from_fn(2, c, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)))?;
        let grads = lift(layer.backward(&x, &v))?;
        let fdx = fd_map_grad(&x, 1e-5, |x| layer.forward(x).unwrap().dot(&v));
        let fdw = fd_kernel_grad(layer.kernel(), 1e-5, |w| {
            let mut l = layer.clone();
            *l.kernel_mut() = w.clone();
            l.forward(&x).unwrap().dot(&v)
        });
        let e = max_rel_err(grads.input.data(), fdx.data()).max(max_rel_err(grads.kernel.data(), fdw.data()));
        ensure(e <= 1e-4, || format!("case {case}: rel err {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("50 cases, worst {worst:.2e}"))
}

fn check_gate_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let k = 1 + case % 3;
        let g = random_gates(&mut rng, k);
        let c = g.channels();
        let layer = lift(rand_layer::<f64>(&mut rng, &g, 3))?;
        let x = lift(FeatureMap::from_fn(2, c, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)))?;
        let v = lift(FeatureMap::from_fn(2, c, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)))?;
        let grads = lift(layer.backward(&x, &v))?;
        let g0: Vec<f64> = g.as_slice().iter().map(|&b| b as u8 as f64).collect();
        let fd = fd_vec_grad(&g0, 1e-5, |gv| {
            let u = relaxed_relationship(gv);
            let w = KernelTensor::from_fn(3, c, c, |m, n, p, q| layer.kernel().at(m, n, p, q) * u[p * c + q]).unwrap();
            conv2d_forward(&x, &w, layer.geometry()).unwrap().dot(&v)
        });
        let e = max_rel_err(&grads.gates, &fd);
        ensure(e <= 1e-3, || format!("case {case}: gate rel err {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("50 cases, worst {worst:.2e}"))
}

fn check_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..10 {
        let g = random_gates(&mut rng, 3);
        let layer = lift(rand_layer::<f64>(&mut rng, &g, 3))?;
        let x = lift(FeatureMap::from_fn(2, 8, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)))?;
        let v = lift(FeatureMap::from_fn(2, 8, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)))?;
        let gk = lift(layer.backward(&x, &v))?.kernel;
        let u = layer.relationship();
        for t in 0..gk.taps() {
            for p in 0..8 {
                for q in 0..8 {
                    ensure(u.get(p, q) || gk.tap(t)[p * 8 + q] == 0.0, || format!("masked entry ({p},{q}) nonzero"))?;
                }
            }
        }
    }
    Ok(String::new())
}

fn check_zeta() -> Outcome {
    let two_depthwise = ComplexityState::from_layers(
        vec![lift(layer_complexity(&BinaryGates::all(3, false), 8))?; 2],
        1.0,
        DEFAULT_ALPHA,
    );
    ensure(two_depthwise.total == 16, || format!("two depthwise C=8: zeta {}", two_depthwise.total))?;
    let z = lift(layer_complexity(&BinaryGates::from_bits(&[1, 1, 0]), 8))?;
    ensure(z == 32, || format!("g=[1,1,0]: zeta {z}"))?;
    let o = lift(budget_from_b(32.0, &[128]))?;
    ensure(o == 512.0, || format!("o(b=32, C=128) = {o}"))?;
    let o = lift(budget_from_b(2.0, &[8, 8]))?;
    ensure(o == 64.0, || format!("o(b=2, C=8,8) = {o}"))?;
    Ok(String::new())
}

fn check_multiplier() -> Outcome {
    let gates = BinaryGates::from_bits(&[1, 1, 1]);
    let met = ComplexityState::from_layers(vec![64], 64.0, DEFAULT_ALPHA);
    ensure(met.multiplier == 1.0, || format!("zeta = o gives multiplier {}", met.multiplier))?;
    for ratio in [1.5f64, 2.0, 4.0] {
        let s = ComplexityState::from_layers(vec![64], 64.0 / ratio, DEFAULT_ALPHA);
        let expect = ratio.powf(0.02);
        let e = (s.multiplier - expect).abs() / expect;
        ensure(e <= 1e-12, || format!("ratio {ratio}: multiplier {} vs {expect}", s.multiplier))?;
        let p = lift(penalized_loss(1.0, &s, &[&gates]))?;
        ensure(p.gate_grads[0].iter().all(|&v| v > 0.0), || "penalty does not push gates down".into())?;
    }
    Ok(String::new())
}

fn check_schedule() -> Outcome {
    let lr = |s| lift(cosine_lr(s, 100, 0.2));
    ensure(lr(0)? == 0.2 && lr(100)?.abs() < 1e-15 && (lr(50)? - 0.1).abs() < 1e-15, || "cosine endpoints".into())?;
    ensure(cosine_lr(101, 100, 0.2).is_err(), || "step past total accepted".into())?;
    let mut p = [1.0f64];
    lift(sgd_update(&mut p, &[0.5], &mut [0.0], 0.1, 0.9, 0.0))?;
    ensure((p[0] - 0.95).abs() < 1e-15, || format!("sgd gives {}", p[0]))?;
    Ok(String::new())
}

fn tiny_config(mode: ConvMode) -> ModelConfig {
    ModelConfig {
        input_size: 8,
        stem_width: 8,
        stage_widths: vec![8, 16],
        blocks_per_stage: vec![1, 1],
        mode,
        ..ModelConfig::desk()
    }
}

fn check_model_equivalence() -> Outcome {
    let mut dynamic = lift(Model::<f64>::new(tiny_config(ConvMode::Dgconv), 5))?;
    lift(dynamic.update_gates(|_, g| g.fill(1e-8)))?;
    let mut dense = lift(Model::<f64>::new(tiny_config(ConvMode::Dense), 6))?;
    let mut values = Vec::new();
    dynamic.visit_weights(&mut |_, v, _| values.push(v.to_vec()));
    let mut i = 0;
    dense.visit_weights(&mut |_, v, _| {
        v.copy_from_slice(&values[i]);
        i += 1;
    });
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = lift(FeatureMap::from_fn(4, 3, 8, 8, |_, _, _, _| rng.random_range(-1.0..1.0)))?;
    let e = max_rel_err(lift(dynamic.forward_eval(&x))?.data(), lift(dense.forward_eval(&x))?.data());
    ensure(e <= 1e-10, || format!("rel err {e:e}"))?;
    Ok(format!("rel err {e:.2e}"))
}

fn check_export() -> Outcome {
    let mut model = lift(Model::<f32>::new(tiny_config(ConvMode::Dgconv), 7))?;
    lift(init_gates(&mut model, 7))?;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    lift(model.update_gates(|_, g| g.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0))))?;
    let ck = Checkpoint::from_model(&model, 3, None, None);
    let bytes = lift(ck.encode())?;
    let again = lift(lift(Checkpoint::decode(&bytes))?.encode())?;
    ensure(bytes == again, || "checkpoint save/load/save differs".into())?;
    let ex = lift(Checkpoint::export(&model, 3, None, 32))?;
    let compiled = lift(lift(Checkpoint::decode(&lift(ex.encode())?))?.model())?;
    let zeta: u64 = model.dgconv_layers().iter().map(|l| l.complexity()).sum();
    let exported: u64 = (0..compiled.block_count()).map(|b| compiled.middle(b).connections()).sum();
    ensure(zeta == exported, || format!("exported connections {exported} vs zeta {zeta}"))?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = lift(FeatureMap::from_fn(2, 3, 8, 8, |_, _, _, _| rng.random_range(-1.0f32..1.0)))?;
        let e = max_rel_err(lift(compiled.forward_eval(&x))?.data(), lift(model.forward_eval(&x))?.data());
        ensure(e <= 1e-5, || format!("logit rel err {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("20 inputs, worst {worst:.2e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let r = run_verify(&VerifyOptions::default(), |_| {});
        assert!(r.passed(), "{:?}", r.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
    }

    #[test]
    fn sign_fault_is_caught() {
        let r = run_verify(
            &VerifyOptions {
                fault: Some(Fault::SignConvention),
            },
            |_| {},
        );
        let failed = r.failed();
        assert!(!failed.is_empty());
        assert!(failed.iter().all(|n| n.starts_with("binarize.")), "{failed:?}");
    }
}
