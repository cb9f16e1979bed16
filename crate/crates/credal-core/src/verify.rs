//! Built-in self-verification battery: fast, seeded re-checks of the
//! numerical core against independent oracles, meant to run on an installed
//! binary (`credal verify`). Each check reports the tolerance it enforces
//! next to the value it measured.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;

use crate::credal::{
    entropy_bounds_oracle, interval_softmax, max_entropy_interval, min_entropy_interval,
    IntervalLogits,
};
use crate::error::Result;
use crate::eval::auroc;
use crate::graph::{
    generate_csbm, leave_out_class_split, remap_id_labels, ClassPartition, CsbmParams, SplitMasks,
};
use crate::model::{BackboneConfig, BackboneKind, Model, ModelKind, TapeOutput};
use crate::tape::{grad_check, ParamSet, Tape, Tensor};
use crate::train::dro_loss_on_tape;

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    /// Largest measured value that still passes.
    pub tolerance: f64,
    /// What the check actually measured (a violation or disagreement).
    pub measured: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &'static str, tolerance: f64, measured: f64) -> Self {
        CheckReport { name, tolerance, measured, passed: measured <= tolerance }
    }
}

/// Test hook for exercising the battery's failure path.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultInjection {
    /// Report the max-entropy solver value in place of the min-entropy
    /// result; the oracle-agreement check must then fail.
    pub flip_min_entropy: bool,
}

/// Random interval probabilities with `c` classes, produced by the interval
/// softmax of a random mid +- half logit box (so they are in-distribution
/// for the solvers).
fn random_bounds(rng: &mut ChaCha20Rng, c: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mid: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let half: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..3.0)).collect();
    let lower: Vec<f64> = mid.iter().zip(&half).map(|(m, h)| m - h).collect();
    let upper: Vec<f64> = mid.iter().zip(&half).map(|(m, h)| m + h).collect();
    let logits = IntervalLogits::new(
        Tensor::from_rows(&[lower])?,
        Tensor::from_rows(&[upper])?,
    )?;
    let pred = interval_softmax(&logits)?;
    Ok((pred.q_lower.row(0).to_vec(), pred.q_upper.row(0).to_vec()))
}

/// Interval-softmax validity sweep: random interval logits for C in 2..=10
/// must produce q_lower <= q_upper, per-class values in [0, 1], and sums
/// bracketing 1. Measures the worst constraint violation.
fn check_interval_softmax_validity() -> Result<CheckReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x1A1A);
    let mut worst = 0.0f64;
    for c in 2..=10usize {
        for _ in 0..200 {
            let (ql, qu) = random_bounds(&mut rng, c)?;
            let mut sum_l = 0.0;
            let mut sum_u = 0.0;
            for (&l, &u) in ql.iter().zip(&qu) {
                worst = worst.max(l - u).max(-l).max(u - 1.0);
                sum_l += l;
                sum_u += u;
            }
            worst = worst.max(sum_l - 1.0).max(1.0 - sum_u);
        }
    }
    Ok(CheckReport::new("interval_softmax_validity", 1e-9, worst))
}

/// Entropy solvers vs the brute-force grid oracle on small instances.
/// Measures the worst |solver - oracle| over both extremes.
fn check_entropy_oracle_agreement(fault: &FaultInjection) -> Result<CheckReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x2B2B);
    let mut worst = 0.0f64;
    for &(c, resolution, trials) in &[(2usize, 1e-3, 15usize), (3, 1e-3, 20), (4, 5e-3, 6)] {
        for _ in 0..trials {
            let (ql, qu) = random_bounds(&mut rng, c)?;
            let (oracle_max, oracle_min) = entropy_bounds_oracle(&ql, &qu, resolution)?;
            let (_, h_max) = max_entropy_interval(&ql, &qu)?;
            let mut h_min = min_entropy_interval(&ql, &qu)?.h_bits;
            if fault.flip_min_entropy {
                h_min = h_max;
            }
            worst = worst.max((h_max - oracle_max).abs()).max((h_min - oracle_min).abs());
        }
    }
    Ok(CheckReport::new("entropy_oracle_agreement", 1e-3, worst))
}

/// Analytic DRO gradients vs central finite differences on a small credal
/// model. Measures the worst relative error over probed coordinates.
fn check_dro_gradient() -> Result<CheckReport> {
    let params = CsbmParams {
        nodes_per_class: 12,
        num_classes: 3,
        p_in: 0.35,
        p_out: 0.05,
        feature_dim: 4,
        mean_separation: 2.5,
        noise_sigma: 0.6,
        seed: 5,
    };
    let dataset = generate_csbm(&params)?;
    let partition = ClassPartition::from_ood_classes(3, &[2])?;
    let masks = leave_out_class_split(&dataset, &partition, 0.5, 0.25, 5)?;
    let remapped = remap_id_labels(&dataset.labels, &partition);
    let train_nodes = SplitMasks::indices(&masks.train);
    let model = Model::new(
        ModelKind::CredalFinal,
        BackboneConfig {
            kind: BackboneKind::Gcn,
            num_layers: 2,
            hidden_dim: 5,
            input_dim: 4,
            dropout: 0.0,
        },
        2,
        21,
    )?;
    let op = Arc::new(model.operator(&dataset.edges));

    let loss_fn = |params: &ParamSet| -> Result<f64> {
        let probe = Model {
            kind: model.kind,
            backbone: model.backbone.clone(),
            num_classes: model.num_classes,
            params: params.clone(),
        };
        let mut tape = Tape::new();
        let fwd = probe.forward_on_tape(&mut tape, &dataset.features, &op, None)?;
        let TapeOutput::Credal { q_lower, q_upper } = fwd.output else {
            unreachable!("credal model");
        };
        let loss = dro_loss_on_tape(&mut tape, q_lower, q_upper, &remapped, &train_nodes, 0.7)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let fwd = model.forward_on_tape(&mut tape, &dataset.features, &op, None)?;
    let TapeOutput::Credal { q_lower, q_upper } = fwd.output else {
        unreachable!("credal model");
    };
    let loss = dro_loss_on_tape(&mut tape, q_lower, q_upper, &remapped, &train_nodes, 0.7)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = fwd
        .param_vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            grads.get(v).cloned().unwrap_or_else(|| {
                let t = model.params.tensor_at(i);
                Tensor::zeros(t.rows(), t.cols())
            })
        })
        .collect();
    let worst = grad_check(loss_fn, &model.params, &analytic, 40, 1e-5, 99)?;
    Ok(CheckReport::new("dro_gradient_check", 1e-4, worst))
}

/// Sort-based AUROC vs O(n^2) pairwise counting on tie-heavy score sets.
/// Measures the worst absolute disagreement.
fn check_auroc_oracle() -> Result<CheckReport> {
    fn pairwise(id: &[f64], ood: &[f64]) -> f64 {
        let mut num = 0.0;
        for &o in ood {
            for &i in id {
                num += if o > i {
                    1.0
                } else if o == i {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / (id.len() as f64 * ood.len() as f64)
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0x3C3C);
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let n_id = rng.gen_range(1..40);
        let n_ood = rng.gen_range(1..40);
        // Quantized scores force plenty of ties.
        let draw = |rng: &mut ChaCha20Rng| (rng.gen_range(0..16) as f64) / 16.0;
        let id: Vec<f64> = (0..n_id).map(|_| draw(&mut rng)).collect();
        let ood: Vec<f64> = (0..n_ood).map(|_| draw(&mut rng)).collect();
        worst = worst.max((auroc(&id, &ood)? - pairwise(&id, &ood)).abs());
    }
    Ok(CheckReport::new("auroc_pairwise_oracle", 1e-12, worst))
}

/// Run the whole battery. All randomness is internally seeded, so repeated
/// runs measure identical values.
pub fn run_battery(fault: &FaultInjection) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_interval_softmax_validity()?,
        check_entropy_oracle_agreement(fault)?,
        check_dro_gradient()?,
        check_auroc_oracle()?,
    ])
}

/// True iff every check passed.
pub fn battery_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}
