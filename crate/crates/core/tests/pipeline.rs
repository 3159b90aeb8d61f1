//! End-to-end library pipeline on a small synthetic cohort.

use pmx_core::dataset::{generate_synthetic, split_dataset, DatasetSplit, SynthConfig, CLINICAL_DIM};
use pmx_core::eval::{compare_heads, evaluate};
use pmx_core::explain::{feature_deviation, infer_cases, knn_classify, Explainer, InferencePath, DEVIATION_FLAG};
use pmx_core::model::{Ablation, Model};
use pmx_core::rng::stream;
use pmx_core::nn::tensor::normalized;
use pmx_core::training::{train, Checkpoint, TrainConfig};
use pmx_core::PmxError;
use std::sync::OnceLock;

fn split() -> &'static DatasetSplit {
    static SPLIT: OnceLock<DatasetSplit> = OnceLock::new();
    SPLIT.get_or_init(|| {
        let cases = generate_synthetic(&SynthConfig {
            n_cases: 500,
            embedding_dim: 48,
            embedding_separation: 6.0,
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap();
        split_dataset(&cases, 11).unwrap()
    })
}

fn trained() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let cfg = TrainConfig {
            max_epochs: 25,
            patience: 8,
            batch_size: 32,
            seed: 11,
            ..TrainConfig::default()
        };
        train(split(), &cfg).unwrap().checkpoint
    })
}

#[test]
fn separable_data_is_learned() {
    let report = evaluate(trained(), &split().test).unwrap();
    assert_eq!(report.inference_path, InferencePath::Knn);
    assert!(report.metrics.accuracy >= 0.9, "accuracy {}", report.metrics.accuracy);
    assert_eq!(report.metrics.clinical_agreement, Some(report.metrics.accuracy));
}

#[test]
fn every_prototype_is_a_real_training_case() {
    let ckpt = trained();
    let s = split();
    let inf = infer_cases(&ckpt.model, &ckpt.standardizer, &s.train).unwrap();
    let f32_unit = |v: &[f64]| -> Vec<f64> { normalized(v).unwrap().iter().map(|x| *x as f32 as f64).collect() };
    for p in ckpt.model.bank.prototypes() {
        let src = p.source.as_ref().expect("projected");
        let i = s.train.iter().position(|c| c.patient_id == src.patient_id).unwrap();
        assert_eq!(s.train[i].label, p.class);
        assert_eq!(p.vec_fused, f32_unit(&inf[i].fused));
        assert_eq!(p.vec_img, f32_unit(&inf[i].z_img));
        assert_eq!(p.vec_tab, f32_unit(&inf[i].z_tab));
    }
}

#[test]
fn explanation_reports_are_consistent() {
    let ckpt = trained();
    let id = ckpt.checkpoint_id();
    let explainer = Explainer {
        model: &ckpt.model,
        standardizer: &ckpt.standardizer,
        class_norms: &ckpt.class_norms,
        checkpoint_id: &id,
        k: 3,
        tau_conf: 0.1,
    };
    for case in split().test.iter().take(40) {
        let r = explainer.explain(case, Some(case.label)).unwrap();
        assert_eq!(r.neighbors.len(), 3);
        let w: f64 = r.neighbors.iter().map(|n| n.weight).sum();
        assert!((w - 1.0).abs() < 1e-9);
        let same: f64 = r.neighbors.iter().filter(|n| n.class == r.prediction).map(|n| n.weight).sum();
        assert!((same - r.confidence).abs() < 1e-12);
        assert_eq!(r.deviations.len(), CLINICAL_DIM);
        assert!(r.deviations.iter().all(|d| d.flagged == (d.delta > DEVIATION_FLAG)));
        let expected = feature_deviation(&case.clinical.to_array(), &ckpt.class_norms[r.prediction.index()]);
        assert_eq!(r.deviations, expected);
        let audit = r.audit.unwrap();
        assert_eq!(audit.correct, r.prediction == case.label);
        assert_eq!(audit.true_class_nearest_prototype.class, case.label);
        assert!(r.neighbors.iter().all(|n| n.source_patient_id.is_some()));
    }
}

#[test]
fn knn_predictions_follow_the_explainer() {
    let ckpt = trained();
    let inf = infer_cases(&ckpt.model, &ckpt.standardizer, &split().test).unwrap();
    let eval = evaluate(ckpt, &split().test).unwrap();
    for (i, p) in inf.iter().zip(&eval.predictions) {
        let r = knn_classify(&ckpt.model, i, ckpt.config.k, ckpt.config.tau_conf).unwrap();
        assert_eq!(r.prediction, p.prediction);
        assert_eq!(Some(r.confidence()), p.confidence);
    }
}

#[test]
fn both_heads_are_close_after_training() {
    let h = compare_heads(trained(), &split().test).unwrap();
    assert!(h.gap() <= 0.05, "{h:?}");
}

#[test]
fn untrained_model_is_near_chance_on_balanced_classes() {
    let cases = generate_synthetic(&SynthConfig {
        n_cases: 900,
        embedding_dim: 48,
        class_fractions: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let s = split_dataset(&cases, 2).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let mut ckpt = train(&s, &cfg).unwrap().checkpoint;
    // swap in a freshly initialised network with random prototypes
    let dims = ckpt.model.dims;
    ckpt.model = Model::new(dims, 6, Ablation::default(), &mut stream(99));
    ckpt.model.bank.initialized = true;
    let h = compare_heads(&ckpt, &s.test).unwrap();
    assert!(h.acc_knn <= 0.5 && h.acc_head <= 0.5, "{h:?}");
}

#[test]
fn knn_path_needs_prototypes() {
    let cfg = TrainConfig {
        max_epochs: 2,
        ablation: Ablation {
            no_prototypes: true,
            ..Ablation::default()
        },
        ..TrainConfig::default()
    };
    let ckpt = train(split(), &cfg).unwrap().checkpoint;
    assert!(matches!(compare_heads(&ckpt, &split().test), Err(PmxError::Usage(_))));
    let r = evaluate(&ckpt, &split().test).unwrap();
    assert_eq!(r.inference_path, InferencePath::Head);
    assert!(r.predictions.iter().all(|p| p.confidence.is_none()));
}
