//! Acceptance suite. Each check prints one PASS/FAIL line; the binary exits
//! non-zero if any check fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ldcrf::chain::{brute_force_posteriors, forward_backward, path_score};
use ldcrf::ctc::{ctc_error_table, ctc_forward_backward, min_frames};
use ldcrf::features::node_scores;
use ldcrf::gradcheck::{central_difference, random_instance, relative_error, Instance};
use ldcrf::ldcrf::sequence_label_likelihood;
use ldcrf::seqdata::{collapse, generate_synthetic, roc_curve, GeneratorConfig};
use ldcrf::trainer::{
    ctc_ldcrf_loss_and_grad, evaluate, initial_model, kfold, pretrain_finetune, train, BlankPolicy, GradMode,
    TrainConfig, TrainMode,
};
use ldcrf::{FeatureConfig, HiddenStateMap, LabelId, ModelParams, Sequence};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Calls `visit` with every sequence in `{0..base}^len`.
fn each_tuple(len: usize, base: usize, mut visit: impl FnMut(&[usize])) {
    let mut cur = vec![0; len];
    loop {
        visit(&cur);
        let mut i = len;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            cur[i] += 1;
            if cur[i] < base {
                break;
            }
            cur[i] = 0;
        }
    }
}

fn random_chain(rng: &mut impl Rng, t_len: usize, states: usize, scale: f64) -> (Array2<f64>, Array2<f64>) {
    let scores = Array2::from_shape_fn((t_len, states), |_| rng.random_range(-scale..=scale));
    let trans = Array2::from_shape_fn((states, states), |_| rng.random_range(-scale..=scale));
    (scores, trans)
}

fn random_simplex_rows(rng: &mut impl Rng, t_len: usize, labels: usize) -> Array2<f64> {
    let mut q = Array2::from_shape_fn((t_len, labels), |_| rng.random_range(0.05..1.0));
    for mut row in q.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    q
}

fn random_target(rng: &mut impl Rng, t_len: usize, classes: usize) -> Vec<LabelId> {
    loop {
        let m = rng.random_range(1..=t_len.min(3));
        let z: Vec<LabelId> = (0..m).map(|_| rng.random_range(0..classes)).collect();
        if min_frames(&z) <= t_len {
            return z;
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `P(z | q)` by summing over every frame path that collapses to `z`.
fn ctc_brute_force(q: ArrayView2<'_, f64>, z: &[LabelId], blank: LabelId) -> f64 {
    let (t_len, labels) = q.dim();
    let mut total = 0.0;
    each_tuple(t_len, labels, |path| {
        if collapse(path, blank) == z {
            total += path.iter().enumerate().map(|(j, &a)| q[[j, a]]).product::<f64>();
        }
    });
    total
}

fn chain_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let t_len = rng.random_range(1..=6);
        let states = rng.random_range(1..=4);
        let (scores, trans) = random_chain(&mut rng, t_len, states, 2.0);
        let fb = forward_backward(scores.view(), trans.view()).unwrap();
        let bf = brute_force_posteriors(scores.view(), trans.view()).unwrap();
        worst = worst
            .max((fb.log_z - bf.log_z).abs())
            .max(max_abs_diff(fb.node_marginals.as_slice().unwrap(), bf.node_marginals.as_slice().unwrap()))
            .max(max_abs_diff(fb.edge_marginals.as_slice().unwrap(), bf.edge_marginals.as_slice().unwrap()));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-10 && elapsed < Duration::from_secs(10),
        format!("50 instances, max abs diff {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn small_model(rng: &mut impl Rng, labels: usize, h: usize, features: FeatureConfig) -> (HiddenStateMap, ModelParams) {
    let map = HiddenStateMap::new(labels, h).unwrap();
    let states = map.num_states();
    let d = features.obs_dim();
    let theta: Vec<f64> = (0..states * d + states * states).map(|_| rng.random_range(-1.0..=1.0)).collect();
    (map, ModelParams::from_flat(states, d, &theta).unwrap())
}

fn label_likelihood_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut worst_total: f64 = 0.0;
    for _ in 0..50 {
        let (labels, h) = [(2, 1), (2, 2), (3, 1)][rng.random_range(0..3)];
        let t_len = rng.random_range(1..=5);
        let features = FeatureConfig::new(rng.random_range(0..=1), rng.random_range(1..=2));
        let (map, params) = small_model(&mut rng, labels, h, features);
        let frames = Array2::from_shape_fn((t_len, features.input_dim), |_| rng.random_range(-1.0..=1.0));
        let scores = node_scores(&Sequence::new("x", frames.clone()), &params, &features).unwrap();
        let trans = params.trans_weights.view();
        let states = map.num_states();

        // Per-labelling mass by enumerating hidden paths once.
        let mut log_z_terms = Vec::new();
        let mut by_labelling = std::collections::HashMap::<Vec<usize>, Vec<f64>>::new();
        each_tuple(t_len, states, |path| {
            let s = path_score(&scores.view(), &trans, path);
            log_z_terms.push(s);
            let y: Vec<usize> = path.iter().map(|&p| map.label_of(p)).collect();
            by_labelling.entry(y).or_default().push(s);
        });
        let lse = |v: &[f64]| {
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        };
        let log_z = lse(&log_z_terms);

        let mut total = 0.0;
        each_tuple(t_len, labels, |y| {
            let seq = Sequence::new("x", frames.clone()).with_frame_labels(y.to_vec());
            let ll = sequence_label_likelihood(&seq, &params, &map, &features).unwrap();
            let oracle = lse(&by_labelling[y]) - log_z;
            worst = worst.max((ll - oracle).abs());
            total += ll.exp();
        });
        worst_total = worst_total.max((total - 1.0).abs());
    }
    outcome(
        worst < 1e-10 && worst_total < 1e-8,
        format!("50 instances, max log-likelihood diff {worst:.2e}, max |Σ P(y|x) − 1| {worst_total:.2e}"),
    )
}

fn ctc_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let labels = rng.random_range(2..=3);
        let blank = labels - 1;
        let t_len = rng.random_range(1..=6);
        let q = random_simplex_rows(&mut rng, t_len, labels);
        let z = random_target(&mut rng, t_len, labels - 1);
        let tables = ctc_forward_backward(q.view(), &z, blank).unwrap();
        let oracle = ctc_brute_force(q.view(), &z, blank);
        worst = worst.max((tables.log_prob.exp() - oracle).abs());
    }
    let mut worst_total: f64 = 0.0;
    for _ in 0..20 {
        let labels = rng.random_range(2..=3);
        let blank = labels - 1;
        let t_len = rng.random_range(1..=5);
        let q = random_simplex_rows(&mut rng, t_len, labels);
        let mut targets = std::collections::BTreeSet::new();
        each_tuple(t_len, labels, |path| {
            targets.insert(collapse(path, blank));
        });
        let total: f64 = targets
            .iter()
            .map(|z| {
                if z.is_empty() {
                    (0..t_len).map(|j| q[[j, blank]]).product()
                } else {
                    ctc_forward_backward(q.view(), z, blank).unwrap().log_prob.exp()
                }
            })
            .sum();
        worst_total = worst_total.max((total - 1.0).abs());
    }
    outcome(
        worst < 1e-10 && worst_total < 1e-8,
        format!("max |P − brute force| {worst:.2e}, max |Σ_z P(z|x) − 1| {worst_total:.2e}"),
    )
}

/// Composite loss recomputed from path enumeration only.
fn brute_force_loss(instance: &Instance, params: &ModelParams, l2: f64) -> f64 {
    let blank = instance.map.labels - 1;
    let mut loss = l2 * params.norm_sq();
    for seq in &instance.sequences {
        let scores = node_scores(seq, params, &instance.features).unwrap();
        let post = brute_force_posteriors(scores.view(), params.trans_weights.view()).unwrap();
        let q = Array2::from_shape_fn((seq.len(), instance.map.labels), |(j, a)| {
            instance.map.block(a).map(|s| post.node_marginals[[j, s]]).sum()
        });
        loss -= ctc_brute_force(q.view(), seq.label_seq.as_ref().unwrap(), blank).ln();
    }
    loss
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let l2 = 0.01;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let batch: Vec<&Sequence> = inst.sequences.iter().collect();
        let out =
            ctc_ldcrf_loss_and_grad(&batch, &inst.params, &inst.map, &inst.features, GradMode::Exact, l2).unwrap();
        let (states, d) = (inst.params.num_states(), inst.params.obs_dim());
        let numeric = central_difference(&inst.params.flatten(), 1e-5, |theta| {
            Ok(brute_force_loss(&inst, &ModelParams::from_flat(states, d, theta)?, l2))
        })
        .unwrap();
        for (a, n) in out.grad.flatten().iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-5 && elapsed < Duration::from_secs(60),
        format!("100 trials, max relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn local_mode_study() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_zero: f64 = 0.0;
    let mut table = Vec::new();
    for trial in 0..20 {
        let mut inst = random_instance(&mut rng);
        let batch: Vec<&Sequence> = inst.sequences.iter().collect();
        let run = |inst: &Instance, mode| {
            ctc_ldcrf_loss_and_grad(&batch, &inst.params, &inst.map, &inst.features, mode, 0.0).unwrap().grad
        };
        let exact = run(&inst, GradMode::Exact);
        let local = run(&inst, GradMode::Local);
        if trial < 10 {
            let ds = max_abs_diff(exact.state_weights.as_slice().unwrap(), local.state_weights.as_slice().unwrap());
            let dt = max_abs_diff(exact.trans_weights.as_slice().unwrap(), local.trans_weights.as_slice().unwrap());
            let mut diff = exact.clone();
            diff.add_scaled(-1.0, &local);
            let rel = (diff.norm_sq() / exact.norm_sq().max(1e-300)).sqrt();
            table.push(format!(
                "    {trial:>5} {:>3} {:>3} {ds:>12.3e} {dt:>12.3e} {rel:>10.3}",
                inst.map.num_states(),
                inst.sequences.iter().map(Sequence::len).max().unwrap(),
            ));
        }
        inst.params.trans_weights.fill(0.0);
        let exact = run(&inst, GradMode::Exact);
        let local = run(&inst, GradMode::Local);
        worst_zero = worst_zero
            .max(max_abs_diff(exact.state_weights.as_slice().unwrap(), local.state_weights.as_slice().unwrap()));
    }
    println!("  local vs exact gradient, random transitions in [-1, 1]:");
    println!("    trial   H   T  max|Δ state|  max|Δ trans|  ‖Δ‖/‖g‖");
    for row in table {
        println!("{row}");
    }
    outcome(
        worst_zero < 1e-8,
        format!("zero transitions: max state-weight diff {worst_zero:.2e} over 20 instances"),
    )
}

fn error_table_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let labels = rng.random_range(2..=5);
        let t_len = rng.random_range(1..=12);
        let q = random_simplex_rows(&mut rng, t_len, labels);
        let z = random_target(&mut rng, t_len, labels - 1);
        let tables = ctc_forward_backward(q.view(), &z, labels - 1).unwrap();
        let e = ctc_error_table(&tables, q.view()).unwrap();
        for j in 0..t_len {
            let s: f64 = (0..labels).map(|a| q[[j, a]] * e[[j, a]]).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    outcome(worst < 1e-8, format!("50 instances, max |Σ_a q·e − 1| {worst:.2e}"))
}

fn end_to_end_learning() -> Outcome {
    let start = Instant::now();
    let data = generate_synthetic(
        GeneratorConfig {
            classes: 6,
            dim: 4,
            segments: (3, 5),
            sequences: 180,
            ..Default::default()
        },
        11,
    )
    .unwrap();
    let mut train_set = data.subset(&(0..120).collect::<Vec<_>>());
    let test_set = data.subset(&(120..180).collect::<Vec<_>>());
    for seq in &mut train_set.sequences {
        seq.frame_labels = None;
    }
    let config = TrainConfig {
        mode: TrainMode::Unsegmented,
        hidden_per_label: 2,
        window: 1,
        ..Default::default()
    };
    // A single random linear model can land anywhere from ~0% to ~40%, so
    // chance is the mean over many initialisations.
    let chance: f64 = (0..100)
        .map(|seed| {
            let m = initial_model(&train_set, &TrainConfig { seed, ..config.clone() }).unwrap();
            evaluate(&test_set, &m, None, BlankPolicy::Align).unwrap().pooled_accuracy
        })
        .sum::<f64>()
        / 100.0;
    let model = train(&train_set, &config).unwrap().model;
    let acc = evaluate(&test_set, &model, None, BlankPolicy::Align).unwrap().pooled_accuracy;
    let preceding = evaluate(&test_set, &model, None, BlankPolicy::Preceding).unwrap().pooled_accuracy;
    let elapsed = start.elapsed();
    outcome(
        acc >= 85.0 && (chance - 100.0 / 6.0).abs() <= 5.0 && elapsed < Duration::from_secs(600),
        format!(
            "held-out accuracy {acc:.2}% (preceding-blank mapping {preceding:.2}%), untrained mean over 100 inits {chance:.2}%, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn configuration_ordering() -> Outcome {
    let budget = 40;
    let pretrain = 15;
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let data = generate_synthetic(GeneratorConfig { sequences: 60, ..Default::default() }, 100 + seed).unwrap();
        let base = TrainConfig {
            seed,
            epochs: budget,
            ..Default::default()
        };
        let acc = |config: TrainConfig| kfold(&data, &config, 5, seed, BlankPolicy::Align).unwrap().0.mean_accuracy;
        let unsegmented = acc(TrainConfig {
            mode: TrainMode::Unsegmented,
            ..base.clone()
        });
        let staged = acc(TrainConfig {
            mode: TrainMode::PretrainFinetune,
            pretrain_epochs: pretrain,
            epochs: budget - pretrain,
            ..base.clone()
        });
        let latent = acc(TrainConfig {
            mode: TrainMode::FrameWise,
            ..base.clone()
        });
        let crf = acc(TrainConfig {
            mode: TrainMode::FrameWise,
            hidden_per_label: 1,
            ..base.clone()
        });
        pass &= staged >= unsegmented - 1.0 && latent >= crf - 1.0;
        parts.push(format!(
            "seed {seed}: pretrain+finetune {staged:.1} vs unsegmented {unsegmented:.1}, ldcrf {latent:.1} vs crf {crf:.1}"
        ));
    }
    outcome(pass, format!("5-fold means; {}", parts.join("; ")))
}

fn determinism() -> Outcome {
    let data = generate_synthetic(GeneratorConfig { sequences: 16, ..Default::default() }, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut same = true;
    for mode in [TrainMode::Unsegmented, TrainMode::FrameWise, TrainMode::PretrainFinetune] {
        let config = TrainConfig {
            mode,
            epochs: 5,
            pretrain_epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let run = |tag: &str| {
            let out = if mode == TrainMode::PretrainFinetune {
                pretrain_finetune(&data, &config).unwrap()
            } else {
                train(&data, &config).unwrap()
            };
            let path = dir.path().join(format!("{mode:?}-{tag}.json"));
            out.model.save(&path).unwrap();
            (std::fs::read(&path).unwrap(), serde_json::to_vec(&out.report).unwrap())
        };
        same &= run("a") == run("b");
    }
    outcome(same, "checkpoints and reports byte-identical across two runs for all three modes".into())
}

fn roc_correctness() -> Outcome {
    let data = generate_synthetic(GeneratorConfig { classes: 2, sequences: 20, ..Default::default() }, 3).unwrap();
    let truth: Vec<bool> = data
        .sequences
        .iter()
        .flat_map(|s| s.frame_labels.clone().unwrap())
        .map(|a| a == 1)
        .collect();
    let perfect: Vec<f64> = truth.iter().map(|&t| if t { 0.9 } else { 0.1 }).collect();
    let inverted: Vec<f64> = perfect.iter().map(|s| 1.0 - s).collect();
    let a = roc_curve(&perfect, &truth).unwrap().auc;
    let b = roc_curve(&inverted, &truth).unwrap().auc;
    outcome(a == 1.0 && b == 0.0, format!("perfect scorer AUC {a}, inverted scorer AUC {b}"))
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("chain exactness", chain_exactness),
        ("label likelihood exactness", label_likelihood_exactness),
        ("ctc exactness", ctc_exactness),
        ("composite gradient exactness", gradient_exactness),
        ("local gradient study", local_mode_study),
        ("error table identity", error_table_identity),
        ("end-to-end learning", end_to_end_learning),
        ("configuration ordering", configuration_ordering),
        ("determinism", determinism),
        ("roc correctness", roc_correctness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = check();
        println!("{} {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
        if !result.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
