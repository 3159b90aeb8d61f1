//! Acceptance gates. Prints one PASS/FAIL line per criterion. A failing
//! criterion makes the run exit non-zero only when `PMX_ACCEPTANCE_STRICT`
//! is set, so the report can sit inside an ordinary test run.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use pmx_core::dataset::{generate_synthetic, split_dataset, DatasetSplit, Label, SynthConfig, CLINICAL_DIM};
use pmx_core::eval::{evaluate, run_ablations, AblationTable};
use pmx_core::explain::{confidence, infer_cases, knn_classify, knn_from_similarities, Explainer};
use pmx_core::kmeans::{kmeans, KMeansConfig};
use pmx_core::prototypes::PrototypeBank;
use pmx_core::rng::stream;
use pmx_core::training::gradcheck::run_gradcheck;
use pmx_core::training::{train, Checkpoint, TrainConfig, TrainOutcome};

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const ORACLE_CASES: usize = 1000;
const DEVIATION_TOLERANCE: f64 = 1e-12;
const VOTE_TOLERANCE: f64 = 1e-9;
const HEADLINE_ACCURACY: f64 = 0.95;
const CONFIDENCE_SEPARATION: f64 = 0.10;
const HEAD_PARITY: f64 = 0.02;
const PROJECTION_SHIFT: f64 = 0.02;
const BLOB_TOLERANCE: f64 = 1e-6;

/// High-separation cohort for the headline gates.
fn headline_data() -> SynthConfig {
    SynthConfig {
        n_cases: 4000,
        class_fractions: [0.45, 0.38, 0.17],
        embedding_separation: 6.0,
        seed: 7,
        ..SynthConfig::default()
    }
}

/// Cohort where each modality carries part of the signal: weakly separated
/// embeddings, a strong clinical record and a share of failed scans. The
/// embedding is narrow so the image stack does not simply memorise the
/// training partition.
fn complementary_data(seed: u64) -> SynthConfig {
    SynthConfig {
        n_cases: 4000,
        embedding_dim: 128,
        embedding_separation: 3.0,
        tabular_signal: 1.0,
        image_corruption_fraction: 0.3,
        seed,
        ..SynthConfig::default()
    }
}

const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Gate {
    failures: usize,
}

impl Gate {
    fn report(&mut self, id: usize, name: &str, pass: bool, detail: String, elapsed: Duration) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id} ({name}): {detail} [{:.1}s]", elapsed.as_secs_f64());
        if !pass {
            self.failures += 1;
        }
    }
}

fn split_of(cfg: &SynthConfig) -> DatasetSplit {
    let cases = generate_synthetic(cfg).expect("synthetic cohort");
    split_dataset(&cases, cfg.seed).expect("split")
}

fn train_headline(split: &DatasetSplit) -> TrainOutcome {
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    train(split, &cfg).expect("training")
}

fn gradient_fidelity(gate: &mut Gate) {
    let t = Instant::now();
    let suite = run_gradcheck(20, 0).expect("gradcheck");
    let worst = suite.max_rel_error();
    let seeds: std::collections::BTreeSet<u64> = suite.results.iter().map(|r| r.seed).collect();
    let elapsed = t.elapsed();
    let pass = seeds.len() >= 20 && worst < GRADCHECK_TOLERANCE && elapsed < Duration::from_secs(60);
    gate.report(
        1,
        "gradient fidelity",
        pass,
        format!("{} checks over {} seeds, max relative error {worst:.2e}", suite.results.len(), seeds.len()),
        elapsed,
    );
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Brute-force retrieve-then-vote: gated cosine to every prototype, the k
/// nearest by distance (ties to the lower index), softmax weights over them
/// and the heaviest class, ties to the more severe class.
fn oracle_vote(bank: &PrototypeBank, z_img: &[f64], z_tab: &[f64], alpha: f64, k: usize, tau: f64) -> (Label, f64) {
    let mut dist: Vec<(f64, usize)> = (0..bank.len())
        .map(|j| {
            let s = alpha * cosine(z_img, bank.img.value.row(j)) + (1.0 - alpha) * cosine(z_tab, bank.tab.value.row(j));
            (1.0 - s, j)
        })
        .collect();
    dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let top = &dist[..k];
    let z: f64 = top.iter().map(|(d, _)| (-d / tau).exp()).sum();
    let mut votes = [0.0; 3];
    for (d, j) in top {
        votes[j / bank.per_class] += (-d / tau).exp() / z;
    }
    let mut best = 0;
    for c in 1..3 {
        if votes[c] >= votes[best] - 1e-12 {
            best = c;
        }
    }
    (Label::ALL[best], votes[best])
}

fn oracle_equivalence(gate: &mut Gate, ckpt: &Checkpoint) {
    let t = Instant::now();
    let cases = generate_synthetic(&SynthConfig {
        n_cases: ORACLE_CASES,
        seed: 2024,
        ..headline_data()
    })
    .expect("random cases");
    let inf = infer_cases(&ckpt.model, &ckpt.standardizer, &cases).expect("inference");
    let id = ckpt.checkpoint_id();
    let explainer = Explainer {
        model: &ckpt.model,
        standardizer: &ckpt.standardizer,
        class_norms: &ckpt.class_norms,
        checkpoint_id: &id,
        k: 3,
        tau_conf: 0.1,
    };
    let (mut agree, mut worst_conf, mut worst_delta) = (0, 0.0f64, 0.0f64);
    for (case, i) in cases.iter().zip(&inf) {
        let got = knn_classify(&ckpt.model, i, 3, 0.1).expect("knn");
        let (label, conf) = oracle_vote(&ckpt.model.bank, &i.z_img, &i.z_tab, i.alpha, 3, 0.1);
        if got.prediction == label {
            agree += 1;
        }
        worst_conf = worst_conf.max((got.confidence() - conf).abs());
        let report = explainer.explain(case, None).expect("explain");
        let mu = &ckpt.class_norms[label.index()];
        let x = case.clinical.to_array();
        for j in 0..CLINICAL_DIM {
            let want = (x[j] - mu[j]).abs() / if mu[j] > 1.0 { mu[j] } else { 1.0 };
            worst_delta = worst_delta.max((report.deviations[j].delta - want).abs());
        }
    }
    let elapsed = t.elapsed();
    let pass = agree == cases.len()
        && worst_conf < VOTE_TOLERANCE
        && worst_delta <= DEVIATION_TOLERANCE
        && elapsed < Duration::from_secs(60);
    gate.report(
        2,
        "oracle equivalence",
        pass,
        format!(
            "{agree}/{} predictions agree, max confidence gap {worst_conf:.1e}, max deviation gap {worst_delta:.1e}",
            cases.len()
        ),
        elapsed,
    );
}

fn vote_unit_gates(gate: &mut Gate) {
    let t = Instant::now();
    let bank = PrototypeBank::new(6, 8, 4, 8, &mut stream(3));
    // slot j belongs to class j / 6
    let mut sims = vec![0.0; 18];
    sims[0] = 0.9;
    sims[1] = 0.7;
    sims[2] = 0.5;
    let unanimous = knn_from_similarities(&sims, &bank, 3, 0.1).unwrap();
    let mut sims = vec![0.1; 18];
    sims[2] = 0.6;
    sims[8] = 0.6;
    sims[14] = 0.6;
    let split = knn_from_similarities(&sims, &bank, 3, 0.1).unwrap();
    let spread = split.votes.iter().map(|v| (v - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    let fig = confidence(&[
        (Label::Osteopenia, 0.523),
        (Label::Osteopenia, 0.281),
        (Label::Osteopenia, 0.110),
        (Label::Normal, 0.086),
    ]);
    let pass = unanimous.confidence() == 1.0 && spread <= VOTE_TOLERANCE && (fig - 0.914).abs() < 1e-12;
    gate.report(
        3,
        "vote unit gates",
        pass,
        format!(
            "unanimous C = {}, equidistant votes within {spread:.1e} of 1/3, worked example C = {fig:.3}",
            unanimous.confidence()
        ),
        t.elapsed(),
    );
}

fn headline_accuracy(gate: &mut Gate, split: &DatasetSplit, outcome: &TrainOutcome, elapsed: Duration) {
    let report = evaluate(&outcome.checkpoint, &split.test).expect("evaluate");
    let acc = report.metrics.accuracy;
    let sep = report.confidence_separation.unwrap_or(f64::NAN);
    let pass = acc >= HEADLINE_ACCURACY && sep >= CONFIDENCE_SEPARATION && elapsed < Duration::from_secs(600);
    gate.report(
        4,
        "headline accuracy",
        pass,
        format!(
            "test accuracy {acc:.4} on {} cases, confidence {:.3} correct vs {:.3} incorrect (separation {sep:.3})",
            report.metrics.n,
            report.mean_confidence_correct.unwrap_or(f64::NAN),
            report.mean_confidence_incorrect.unwrap_or(f64::NAN)
        ),
        elapsed,
    );
}

fn mean_of(tables: &[AblationTable], name: &str) -> f64 {
    tables.iter().map(|t| t.row(name).expect("row").accuracy).sum::<f64>() / tables.len() as f64
}

fn ablation_ordering(gate: &mut Gate) {
    let t = Instant::now();
    let mut tables = Vec::new();
    for seed in ABLATION_SEEDS {
        let split = split_of(&complementary_data(seed));
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let table = run_ablations(&split, &cfg).expect("ablation run");
        println!(
            "  seed {seed}: {}",
            table
                .rows
                .iter()
                .map(|r| format!("{} {:.4}", r.configuration, r.accuracy))
                .collect::<Vec<_>>()
                .join(", ")
        );
        tables.push(table);
    }
    let elapsed = t.elapsed();
    let full = mean_of(&tables, "full");
    let baseline = mean_of(&tables, "baseline");
    let singles = ["w/o gate", "w/o multi-task", "w/o cross-attention", "w/o prototypes"];
    let means: Vec<(&str, f64)> = singles.iter().map(|n| (*n, mean_of(&tables, n))).collect();
    let ordered = means.iter().all(|(_, m)| full >= *m && *m >= baseline);
    let multitask = full - mean_of(&tables, "w/o multi-task");
    let prototypes = full - mean_of(&tables, "w/o prototypes");
    let pass = ordered && multitask >= 0.0 && prototypes >= 0.0 && elapsed < Duration::from_secs(3600);
    gate.report(
        5,
        "ablation ordering",
        pass,
        format!(
            "mean accuracy full {full:.4}, {}, baseline {baseline:.4}; multi-task delta {multitask:+.4}, prototype delta {prototypes:+.4}",
            means.iter().map(|(n, m)| format!("{n} {m:.4}")).collect::<Vec<_>>().join(", ")
        ),
        elapsed,
    );

    let gaps: Vec<f64> = tables
        .iter()
        .map(|t| t.row("full").and_then(|r| r.heads).expect("full model has both heads").gap())
        .collect();
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    gate.report(
        6,
        "head parity",
        worst <= HEAD_PARITY,
        format!(
            "full-model |acc_knn - acc_head| per seed: {}",
            gaps.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>().join(", ")
        ),
        Duration::ZERO,
    );
}

fn prototype_integrity(gate: &mut Gate, split: &DatasetSplit, outcome: &TrainOutcome) {
    let t = Instant::now();
    let ckpt = &outcome.checkpoint;
    let inf = infer_cases(&ckpt.model, &ckpt.standardizer, &split.train).expect("inference");
    let f32_unit = |v: &[f64]| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32 as f64).collect()
    };
    let bank = &ckpt.model.bank;
    let mut exact = 0;
    for j in 0..bank.len() {
        let Some(src) = &bank.sources[j] else { continue };
        let Some(i) = split.train.iter().position(|c| c.patient_id == src.patient_id) else {
            continue;
        };
        if split.train[i].label == bank.class_of(j)
            && bank.img.value.row(j) == f32_unit(&inf[i].z_img).as_slice()
            && bank.tab.value.row(j) == f32_unit(&inf[i].z_tab).as_slice()
            && bank.fused.value.row(j) == f32_unit(&inf[i].fused).as_slice()
        {
            exact += 1;
        }
    }
    let after = evaluate(ckpt, &split.test).expect("evaluate").metrics.accuracy;
    let mut learned = ckpt.clone();
    learned.model.bank = outcome.pre_projection_bank.clone();
    let before = evaluate(&learned, &split.test).expect("evaluate").metrics.accuracy;
    let shift = (after - before).abs();
    let pass = bank.len() == 18 && exact == 18 && shift <= PROJECTION_SHIFT;
    gate.report(
        7,
        "prototype integrity",
        pass,
        format!(
            "{exact}/{} prototypes equal their source case exactly; test accuracy {before:.4} before vs {after:.4} after final projection",
            bank.len()
        ),
        t.elapsed(),
    );
}

fn determinism(gate: &mut Gate, split: &DatasetSplit, first: &Checkpoint) {
    let t = Instant::now();
    let again = split_of(&headline_data());
    let second = train_headline(&again).checkpoint;
    let m1 = evaluate(first, &split.test).expect("evaluate");
    let m2 = evaluate(&second, &again.test).expect("evaluate");
    let same_metrics = serde_json::to_string(&m1.metrics).unwrap() == serde_json::to_string(&m2.metrics).unwrap();
    let same_payload = first.payload() == second.payload();
    gate.report(
        8,
        "determinism",
        same_metrics && same_payload,
        format!(
            "metrics identical: {same_metrics}, payload identical: {same_payload} ({} vs {})",
            first.checkpoint_id(),
            second.checkpoint_id()
        ),
        t.elapsed(),
    );
}

fn kmeans_invariants(gate: &mut Gate) {
    let t = Instant::now();
    let mut rng = stream(9);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let cloud: Vec<Vec<f64>> = (0..300).map(|_| (0..5).map(|_| noise.sample(&mut rng)).collect()).collect();
    let mut monotone = true;
    for seed in 0..10 {
        let r = kmeans(&cloud, &KMeansConfig { k: 6, max_iter: 100, tol: 0.0 }, &mut stream(seed)).unwrap();
        monotone &= r.inertia_history.windows(2).all(|w| w[1] <= w[0]);
    }
    let small: Vec<Vec<f64>> = cloud[..12].to_vec();
    let all = kmeans(&small, &KMeansConfig { k: 12, max_iter: 100, tol: 1e-6 }, &mut stream(1)).unwrap();
    let zero = all.inertia();

    // three tight blobs far apart: clusters are the blobs, centroids their means
    let centers = [[0.0, 0.0, 0.0], [50.0, 0.0, 0.0], [0.0, 50.0, 50.0]];
    let tight = Normal::new(0.0, 0.5).unwrap();
    let mut blobs = Vec::new();
    let mut truth = Vec::new();
    for (b, c) in centers.iter().enumerate() {
        for _ in 0..40 + 10 * b {
            blobs.push(c.iter().map(|x| x + tight.sample(&mut rng)).collect::<Vec<f64>>());
            truth.push(b);
        }
    }
    let r = kmeans(&blobs, &KMeansConfig { k: 3, max_iter: 100, tol: 1e-9 }, &mut stream(rng.random())).unwrap();
    let mut worst = 0.0f64;
    for b in 0..3 {
        let members: Vec<&Vec<f64>> = blobs.iter().zip(&truth).filter(|(_, t)| **t == b).map(|(p, _)| p).collect();
        let mean: Vec<f64> = (0..3).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
        let nearest = r
            .centroids
            .iter()
            .map(|c| c.iter().zip(&mean).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(nearest);
    }
    let pass = monotone && zero == 0.0 && worst <= BLOB_TOLERANCE;
    gate.report(
        9,
        "k-means invariants",
        pass,
        format!("inertia monotone: {monotone}, k = n inertia {zero}, blob mean error {worst:.1e}"),
        t.elapsed(),
    );
}

fn main() {
    let mut gate = Gate { failures: 0 };
    gradient_fidelity(&mut gate);

    let t = Instant::now();
    let split = split_of(&headline_data());
    let outcome = train_headline(&split);
    let trained_in = t.elapsed();
    oracle_equivalence(&mut gate, &outcome.checkpoint);
    vote_unit_gates(&mut gate);
    headline_accuracy(&mut gate, &split, &outcome, trained_in);
    ablation_ordering(&mut gate);
    prototype_integrity(&mut gate, &split, &outcome);
    determinism(&mut gate, &split, &outcome.checkpoint);
    kmeans_invariants(&mut gate);

    if gate.failures == 0 {
        println!("all criteria passed");
        return;
    }
    println!("{} of 9 criteria failed", gate.failures);
    if std::env::var_os("PMX_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
