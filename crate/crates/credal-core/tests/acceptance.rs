//! Acceptance suite: one test per release criterion, each printing a
//! single PASS/FAIL line (visible with `cargo test -- --nocapture`).
//! Oracles here are deliberately reimplemented from scratch so they cannot
//! share bugs with the library code they check.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use credal_core::credal::{
    ensemble_entropy_decompose, entropy_bits, entropy_bounds_oracle, hull_uncertainty,
    interval_softmax, interval_uncertainty, max_entropy_interval, min_entropy_interval,
    IntervalLogits,
};
use credal_core::eval::{
    auroc, run_ood_experiment, ExperimentPlan, MethodSpec, ScoreKind, SplitPlan, TrainTemplate,
};
use credal_core::graph::{
    generate_csbm, leave_out_class_split, load_dataset, remap_id_labels, ClassPartition,
    CsbmParams, GraphDataset, SplitMasks,
};
use credal_core::model::{BackboneConfig, BackboneKind, Model, ModelKind, TapeOutput};
use credal_core::tape::{grad_check, ParamSet, Tape, Tensor};
use credal_core::train::{dro_loss, dro_loss_on_tape};
use credal_core::Result;

fn verdict(number: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {number:02} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance criterion {number} ({name}) failed: {detail}");
}

/// Random interval logit box: mid +- half per class.
fn random_logit_box(rng: &mut ChaCha20Rng, rows: usize, c: usize) -> (Tensor, Tensor) {
    let mid = Tensor::from_fn(rows, c, |_, _| rng.gen_range(-6.0..6.0));
    let spread = Tensor::from_fn(rows, c, |_, _| rng.gen_range(0.0..4.0));
    let lower = Tensor::from_fn(rows, c, |r, j| mid.get(r, j) - spread.get(r, j));
    let upper = Tensor::from_fn(rows, c, |r, j| mid.get(r, j) + spread.get(r, j));
    (lower, upper)
}

/// Entropy in bits, independent of the library implementation.
fn entropy_bits_ind(p: &[f64]) -> f64 {
    let nats: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    nats / std::f64::consts::LN_2
}

#[test]
fn criterion_01_interval_softmax_validity() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut total_rows = 0usize;
    for c in 2..=10usize {
        let rows = if c == 2 { 1112 } else { 1111 };
        total_rows += rows;
        let (lower, upper) = random_logit_box(&mut rng, rows, c);
        let pred = interval_softmax(&IntervalLogits::new(lower, upper).unwrap()).unwrap();
        for r in 0..rows {
            let ql = pred.q_lower.row(r);
            let qu = pred.q_upper.row(r);
            let mut sum_l = 0.0;
            let mut sum_u = 0.0;
            for (&l, &u) in ql.iter().zip(qu) {
                worst = worst.max(l - u).max(-l).max(u - 1.0);
                sum_l += l;
                sum_u += u;
            }
            worst = worst.max(sum_l - 1.0).max(1.0 - sum_u);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(total_rows, 10_000);
    verdict(
        1,
        "interval_softmax_validity",
        worst <= 1e-9 && elapsed < 5.0,
        &format!("worst violation {worst:.3e} over 10^4 rows in {elapsed:.2}s"),
    );
}

#[test]
fn criterion_02_degenerate_collapse() {
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let mut worst_gap = 0.0f64;
    let mut worst_eu = 0.0f64;
    let mut total_rows = 0usize;
    for c in 2..=10usize {
        let rows = if c == 2 { 112 } else { 111 };
        total_rows += rows;
        let mid = Tensor::from_fn(rows, c, |_, _| rng.gen_range(-6.0..6.0));
        let point = softmax_rows_ind(&mid);
        let pred = interval_softmax(&IntervalLogits::new(mid.clone(), mid).unwrap()).unwrap();
        for r in 0..rows {
            for j in 0..c {
                worst_gap = worst_gap
                    .max((pred.q_lower.get(r, j) - point[r][j]).abs())
                    .max((pred.q_upper.get(r, j) - point[r][j]).abs());
            }
        }
        let scores = interval_uncertainty(&pred).unwrap();
        for &eu in &scores.eu {
            worst_eu = worst_eu.max(eu);
        }
    }
    assert_eq!(total_rows, 1_000);
    verdict(
        2,
        "degenerate_collapse",
        worst_gap <= 1e-12 && worst_eu <= 1e-9,
        &format!("max |q - softmax| {worst_gap:.3e}, max EU {worst_eu:.3e} over 10^3 rows"),
    );
}

/// Row softmax computed independently of the library.
fn softmax_rows_ind(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

/// Independent vertex enumeration for the interval min-entropy problem:
/// every vertex of the box-simplex polytope has at most one coordinate off
/// its bounds, so recursively pin each other coordinate to lower or upper
/// and let one absorb the remainder.
fn min_entropy_vertex_oracle(lo: &[f64], hi: &[f64]) -> f64 {
    fn recurse(
        i: usize,
        fractional: usize,
        lo: &[f64],
        hi: &[f64],
        p: &mut [f64],
        best: &mut f64,
    ) {
        let c = lo.len();
        if i == c {
            let sum_rest: f64 = (0..c).filter(|&k| k != fractional).map(|k| p[k]).sum();
            let remainder = 1.0 - sum_rest;
            if remainder >= lo[fractional] - 1e-9 && remainder <= hi[fractional] + 1e-9 {
                p[fractional] = remainder.clamp(lo[fractional], hi[fractional]);
                let h = entropy_bits_ind(p);
                if h < *best {
                    *best = h;
                }
            }
            return;
        }
        if i == fractional {
            recurse(i + 1, fractional, lo, hi, p, best);
            return;
        }
        p[i] = lo[i];
        recurse(i + 1, fractional, lo, hi, p, best);
        p[i] = hi[i];
        recurse(i + 1, fractional, lo, hi, p, best);
    }

    let c = lo.len();
    let mut best = f64::INFINITY;
    let mut p = vec![0.0; c];
    for fractional in 0..c {
        recurse(0, fractional, lo, hi, &mut p, &mut best);
    }
    best
}

fn random_valid_bounds(rng: &mut ChaCha20Rng, c: usize) -> (Vec<f64>, Vec<f64>) {
    let (lower, upper) = random_logit_box(rng, 1, c);
    let pred = interval_softmax(&IntervalLogits::new(lower, upper).unwrap()).unwrap();
    (pred.q_lower.row(0).to_vec(), pred.q_upper.row(0).to_vec())
}

#[test]
fn criterion_03_entropy_solver_exactness() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(303);

    // Part one: both extremes vs the brute-force grid oracle, C in {2,3,4}.
    let mut worst_grid = 0.0f64;
    for trial in 0..100 {
        let c = 2 + trial % 3;
        let resolution = if c == 4 { 5e-3 } else { 1e-3 };
        let (lo, hi) = random_valid_bounds(&mut rng, c);
        let (oracle_max, oracle_min) = entropy_bounds_oracle(&lo, &hi, resolution).unwrap();
        let (_, h_max) = max_entropy_interval(&lo, &hi).unwrap();
        let h_min = min_entropy_interval(&lo, &hi).unwrap().h_bits;
        worst_grid = worst_grid.max((h_max - oracle_max).abs()).max((h_min - oracle_min).abs());
    }

    // Part two: the min solver vs independent vertex enumeration, C <= 15.
    let mut worst_vertex = 0.0f64;
    for trial in 0..100 {
        let c = 2 + trial % 14;
        let (lo, hi) = random_valid_bounds(&mut rng, c);
        let solved = min_entropy_interval(&lo, &hi).unwrap();
        assert!(solved.exact, "solver must be exact for C = {c}");
        worst_vertex = worst_vertex.max((solved.h_bits - min_entropy_vertex_oracle(&lo, &hi)).abs());
    }

    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        3,
        "entropy_solver_exactness",
        worst_grid <= 1e-3 && worst_vertex <= 1e-9 && elapsed < 60.0,
        &format!(
            "grid disagreement {worst_grid:.3e}, vertex disagreement {worst_vertex:.3e} in {elapsed:.2}s"
        ),
    );
}

#[test]
fn criterion_04_hull_solver() {
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let mut worst_tu = 0.0f64;
    let mut worst_au = 0.0f64;
    let mut au_exact = true;
    for _ in 0..50 {
        let members: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / z).collect()
            })
            .collect();
        let (tu, au, _) = hull_uncertainty(&members).unwrap();

        // Grid over the weight simplex at step 1/500.
        let steps = 500usize;
        let mut grid_max = f64::NEG_INFINITY;
        for a in 0..=steps {
            for b in 0..=(steps - a) {
                let w = [
                    a as f64 / steps as f64,
                    b as f64 / steps as f64,
                    (steps - a - b) as f64 / steps as f64,
                ];
                let p: Vec<f64> = (0..3)
                    .map(|j| w[0] * members[0][j] + w[1] * members[1][j] + w[2] * members[2][j])
                    .collect();
                grid_max = grid_max.max(entropy_bits_ind(&p));
            }
        }
        worst_tu = worst_tu.max((tu - grid_max).abs());

        // AU must be the smallest member entropy, exactly.
        let lib_min = members.iter().map(|m| entropy_bits(m)).fold(f64::INFINITY, f64::min);
        au_exact &= au == lib_min;
        let ind_min = members.iter().map(|m| entropy_bits_ind(m)).fold(f64::INFINITY, f64::min);
        worst_au = worst_au.max((au - ind_min).abs());
    }
    verdict(
        4,
        "hull_solver",
        worst_tu <= 1e-3 && au_exact && worst_au <= 1e-12,
        &format!("TU vs weight grid {worst_tu:.3e}, AU vs min member entropy {worst_au:.3e}"),
    );
}

#[test]
fn criterion_05_gradient_fidelity() {
    let started = Instant::now();
    let params = CsbmParams {
        nodes_per_class: 5,
        num_classes: 4,
        p_in: 0.3,
        p_out: 0.1,
        feature_dim: 6,
        mean_separation: 2.0,
        noise_sigma: 0.8,
        seed: 505,
    };
    let dataset = generate_csbm(&params).unwrap();
    assert_eq!(dataset.num_nodes, 20);
    let partition = ClassPartition::from_ood_classes(4, &[3]).unwrap();
    let masks = leave_out_class_split(&dataset, &partition, 0.5, 0.25, 5).unwrap();
    let remapped = remap_id_labels(&dataset.labels, &partition);
    let train_nodes = SplitMasks::indices(&masks.train);
    let model = Model::new(
        ModelKind::CredalLj,
        BackboneConfig {
            kind: BackboneKind::Gcn,
            num_layers: 2,
            hidden_dim: 8,
            input_dim: 6,
            dropout: 0.0,
        },
        3,
        55,
    )
    .unwrap();
    assert!(model.params.num_coordinates() >= 200);
    let op = std::sync::Arc::new(model.operator(&dataset.edges));

    let loss_fn = |p: &ParamSet| -> Result<f64> {
        let probe = Model {
            kind: model.kind,
            backbone: model.backbone.clone(),
            num_classes: model.num_classes,
            params: p.clone(),
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
    let fwd = model.forward_on_tape(&mut tape, &dataset.features, &op, None).unwrap();
    let TapeOutput::Credal { q_lower, q_upper } = fwd.output else {
        unreachable!("credal model");
    };
    let loss = dro_loss_on_tape(&mut tape, q_lower, q_upper, &remapped, &train_nodes, 0.7).unwrap();
    let grads = tape.backward(loss).unwrap();
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
    let worst = grad_check(loss_fn, &model.params, &analytic, 200, 1e-5, 909).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        5,
        "gradient_fidelity",
        worst < 1e-4 && elapsed < 30.0,
        &format!("max relative error {worst:.3e} over 200 probes in {elapsed:.2}s"),
    );
}

#[test]
fn criterion_06_dro_reduction_at_full_delta() {
    let mut rng = ChaCha20Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rows = rng.gen_range(3..10);
        let c = rng.gen_range(2..6);
        let (lower, upper) = random_logit_box(&mut rng, rows, c);
        let pred = interval_softmax(&IntervalLogits::new(lower, upper).unwrap()).unwrap();
        let labels: Vec<i64> = (0..rows).map(|_| rng.gen_range(0..c) as i64).collect();
        let nodes: Vec<usize> = (0..rows).collect();
        let loss = dro_loss(&pred, &labels, &nodes, 1.0).unwrap();

        let clamp_ln = |q: f64| -> f64 { -q.clamp(1e-12, 1.0).ln() };
        let mean_upper: f64 = nodes
            .iter()
            .map(|&v| clamp_ln(pred.q_upper.get(v, labels[v] as usize)))
            .sum::<f64>()
            / rows as f64;
        let mean_lower: f64 = nodes
            .iter()
            .map(|&v| clamp_ln(pred.q_lower.get(v, labels[v] as usize)))
            .sum::<f64>()
            / rows as f64;
        worst = worst.max((loss - (mean_upper + mean_lower)).abs());
    }
    verdict(
        6,
        "dro_reduction",
        worst <= 1e-12,
        &format!("max |dro(delta=1) - mean CE sum| {worst:.3e} over 100 instances"),
    );
}

#[test]
fn criterion_07_ensemble_decomposition() {
    let mut rng = ChaCha20Rng::seed_from_u64(707);

    // EU >= 0 on 10^3 random member sets.
    let mut min_eu = f64::INFINITY;
    for trial in 0..1000 {
        let m = 2 + trial % 5;
        let c = 2 + trial % 4;
        let members: Vec<Tensor> = (0..m)
            .map(|_| {
                let raw = Tensor::from_fn(1, c, |_, _| rng.gen_range(0.01..1.0));
                raw.softmax_rows()
            })
            .collect();
        let scores = ensemble_entropy_decompose(&members).unwrap();
        min_eu = min_eu.min(scores.eu[0]);
    }

    // Identical members collapse: EU <= 1e-12.
    let mut worst_identical = 0.0f64;
    for _ in 0..100 {
        let c = rng.gen_range(2..6);
        let member = Tensor::from_fn(1, c, |_, _| rng.gen_range(0.01..1.0)).softmax_rows();
        let scores =
            ensemble_entropy_decompose(&[member.clone(), member.clone(), member]).unwrap();
        worst_identical = worst_identical.max(scores.eu[0]);
    }

    // The maximally disagreeing one-hot pair: TU = 1 bit, AU = 0, exactly.
    let one_hot_a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let one_hot_b = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let scores = ensemble_entropy_decompose(&[one_hot_a, one_hot_b]).unwrap();
    let onehot_exact = scores.tu[0] == 1.0 && scores.au[0] == 0.0;

    verdict(
        7,
        "ensemble_decomposition",
        min_eu >= 0.0 && worst_identical <= 1e-12 && onehot_exact,
        &format!(
            "min EU {min_eu:.3e}, identical-member EU {worst_identical:.3e}, one-hot pair TU {} AU {}",
            scores.tu[0], scores.au[0]
        ),
    );
}

#[test]
fn criterion_08_auroc_oracle() {
    fn pairwise_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let mut total = 0.0;
        for &o in ood {
            for &i in id {
                total += if o > i {
                    1.0
                } else if o == i {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (id.len() as f64 * ood.len() as f64)
    }

    let mut rng = ChaCha20Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_id = rng.gen_range(1..50);
        let n_ood = rng.gen_range(1..50);
        // Quantized scores guarantee ties within and across classes.
        let draw = |rng: &mut ChaCha20Rng| (rng.gen_range(0..12) as f64) / 12.0;
        let id: Vec<f64> = (0..n_id).map(|_| draw(&mut rng)).collect();
        let ood: Vec<f64> = (0..n_ood).map(|_| draw(&mut rng)).collect();
        worst = worst.max((auroc(&id, &ood).unwrap() - pairwise_oracle(&id, &ood)).abs());
    }
    verdict(
        8,
        "auroc_oracle",
        worst <= 1e-12,
        &format!("max |sorted - pairwise| {worst:.3e} over 100 tie-heavy sets"),
    );
}

/// Shared experiment scaffolding for the synthetic end-to-end criteria.
fn synthetic_plan(methods: Vec<MethodSpec>) -> ExperimentPlan {
    ExperimentPlan {
        split: SplitPlan { train_frac: 0.5, val_frac: 0.25, seeds: vec![1, 2, 3, 4, 5] },
        train: TrainTemplate {
            lr: 0.01,
            weight_decay: 0.0,
            max_epochs: 400,
            patience: 40,
            delta: 0.7,
            backbone: BackboneConfig {
                kind: BackboneKind::Gcn,
                num_layers: 2,
                hidden_dim: 32,
                input_dim: 8,
                dropout: 0.0,
            },
        },
        methods,
        record_timings: false,
        jobs: 4,
    }
}

fn mean_auroc(output: &credal_core::eval::ExperimentOutput, method: &str, kind: ScoreKind) -> f64 {
    let values: Vec<f64> = output
        .results
        .iter()
        .filter(|r| r.method == method && r.kind == kind)
        .map(|r| r.auroc.expect("cell succeeded"))
        .collect();
    assert_eq!(values.len(), 5, "{method} should have one row per seed");
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn criterion_09_heterophilic_synthetic_ood() {
    let started = Instant::now();
    let dataset = generate_csbm(&CsbmParams {
        nodes_per_class: 300,
        num_classes: 4,
        p_in: 0.01,
        p_out: 0.05,
        feature_dim: 8,
        mean_separation: 1.5,
        noise_sigma: 1.0,
        seed: 2024,
    })
    .unwrap();
    let partition = ClassPartition::from_ood_classes(4, &[3]).unwrap();
    let plan = synthetic_plan(vec![MethodSpec::CredalLj, MethodSpec::Msp]);
    let output = run_ood_experiment(&dataset, &partition, &plan).unwrap();

    let credal_eu = mean_auroc(&output, "credal_lj", ScoreKind::Epistemic);
    let msp = mean_auroc(&output, "msp", ScoreKind::Single);
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        9,
        "heterophilic_synthetic_ood",
        credal_eu >= 0.70 && credal_eu >= msp + 0.05 && elapsed < 600.0,
        &format!(
            "credal_lj EU AUROC {credal_eu:.4}, msp {msp:.4} over 5 seeds in {elapsed:.1}s"
        ),
    );
}

#[test]
fn criterion_10_homophilic_sanity() {
    let started = Instant::now();
    // Same sizes and a homophilic edge profile; features are made harder
    // (narrower separation, wider noise) so ensemble members genuinely
    // disagree instead of converging to one function.
    let dataset = generate_csbm(&CsbmParams {
        nodes_per_class: 300,
        num_classes: 4,
        p_in: 0.05,
        p_out: 0.01,
        feature_dim: 8,
        mean_separation: 1.0,
        noise_sigma: 1.5,
        seed: 2024,
    })
    .unwrap();
    let partition = ClassPartition::from_ood_classes(4, &[3]).unwrap();
    let plan = synthetic_plan(vec![
        MethodSpec::ClassicalEnsemble { members: 5 },
        MethodSpec::CredalLj,
    ]);
    let output = run_ood_experiment(&dataset, &partition, &plan).unwrap();

    let ensemble_eu = mean_auroc(&output, "classical_ensemble", ScoreKind::Epistemic);
    let credal_eu = mean_auroc(&output, "credal_lj", ScoreKind::Epistemic);
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        10,
        "homophilic_sanity",
        ensemble_eu >= 0.70 && credal_eu >= ensemble_eu - 0.10 && elapsed < 900.0,
        &format!(
            "classical_ensemble EU AUROC {ensemble_eu:.4}, credal_lj EU {credal_eu:.4} over 5 seeds in {elapsed:.1}s"
        ),
    );
}

#[test]
fn criterion_12_external_dataset_band() {
    // Informational and non-binding: when a real heterophilic benchmark is
    // supplied in the documented directory format (CREDAL_EXTERNAL_DIR,
    // OOD classes {0, 1}), its CredalLJ EU AUROC is expected in the
    // 0.65..0.85 band, but unknown upstream split fractions and tuning
    // make this a report, not a gate.
    let Ok(dir) = std::env::var("CREDAL_EXTERNAL_DIR") else {
        verdict(12, "external_dataset_band", true, "skipped: CREDAL_EXTERNAL_DIR not set");
        return;
    };
    let (dataset, _): (GraphDataset, _) = load_dataset(std::path::Path::new(&dir)).unwrap();
    let partition = ClassPartition::from_ood_classes(dataset.num_classes, &[0, 1]).unwrap();
    let mut plan = synthetic_plan(vec![MethodSpec::CredalLj]);
    plan.train.backbone.input_dim = dataset.feature_dim();
    let output = run_ood_experiment(&dataset, &partition, &plan).unwrap();
    let credal_eu = mean_auroc(&output, "credal_lj", ScoreKind::Epistemic);
    let in_band = (0.65..=0.85).contains(&credal_eu);
    verdict(
        12,
        "external_dataset_band",
        true,
        &format!("informational: credal_lj EU AUROC {credal_eu:.4}, in 0.65..0.85 band: {in_band}"),
    );
}
