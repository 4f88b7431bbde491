// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;
use typolens::circuit::{sidecar_path, verify_circuit, CircuitSidecar};
use typolens::score::ScoreMatrix;
use typolens::vit::{CaptureFlags, HeadId, InterventionSpec};
use typolens::{
    build_circuit, export_dyslexic, gen_planted_model, gen_synthetic_dataset, load_dyslexic,
    typo_attention_score, zero_shot_classify, Circuit, CircuitHead, PlantedConfig, SynthConfig,
};

#[test]
fn planted_circuit_is_selected_and_audited() {
    let pm = gen_planted_model(&PlantedConfig::default()).unwrap();
    let ds = gen_synthetic_dataset(&SynthConfig { n: 120, ..SynthConfig::default() }).unwrap();
    let scores = typo_attention_score(&pm.weights, &ds.typo).unwrap();
    let control = ds.clean.balanced_subset(0.05, 0).unwrap();
    let b = build_circuit(&pm.weights, &scores, &control, &pm.prototypes, 0.01).unwrap();
    let c = &b.circuit;
    assert_eq!(c.heads[0].id(), HeadId::new(1, 2));
    assert!(c.control_acc_base - c.control_acc_final < c.epsilon);

    // prefix property: accepted steps are exactly a prefix of the ranking
    let ranked = scores.ranked();
    for (i, h) in c.heads.iter().enumerate() {
        assert_eq!(h.id(), ranked[i].0);
        assert_eq!(h.score, ranked[i].1);
    }
    let accepted = b.steps.iter().take_while(|s| s.accepted).count();
    assert_eq!(accepted, c.len());
    assert!(b.steps.len() == c.len() || !b.steps.last().unwrap().accepted);
    if let Some(last) = b.steps.last().filter(|s| !s.accepted) {
        assert!(last.delta_acc >= c.epsilon);
    }
    let drop = verify_circuit(&pm.weights, c, &control, &pm.prototypes).unwrap();
    assert!((drop - c.drop()).abs() < 1e-12);

    let again = build_circuit(&pm.weights, &scores, &control, &pm.prototypes, 0.01).unwrap();
    assert_eq!(again, b);
}

#[test]
fn search_stops_at_the_first_harmful_head() {
    // the gatherer carries object identity; ablating it destroys accuracy
    let pm = gen_planted_model(&PlantedConfig::default()).unwrap();
    let ds = gen_synthetic_dataset(&SynthConfig { n: 60, ..SynthConfig::default() }).unwrap();
    let control = ds.clean.balanced_subset(0.2, 1).unwrap();
    let mut scores = vec![0.1; 8];
    scores[0] = 0.9; // gatherer (0,0) first
    scores[6] = 0.5; // planted (1,2) second
    let s = ScoreMatrix::from_scores(2, 4, scores).unwrap();
    let b = build_circuit(&pm.weights, &s, &control, &pm.prototypes, 0.01).unwrap();
    assert!(b.circuit.is_empty());
    assert_eq!(b.steps.len(), 1);
    assert!(!b.steps[0].accepted);
}

#[test]
fn build_circuit_rejects_bad_inputs() {
    let cfg = config(2, 2, 8, 2, 2);
    let w = random_weights(cfg, 1);
    let data = random_dataset(&cfg, 4, 2, &[], 2);
    let protos = random_prototypes(2, cfg.embed_dim, 3);
    let s = ScoreMatrix::from_scores(2, 2, vec![0.1; 4]).unwrap();
    assert!(build_circuit(&w, &s, &data, &protos, 0.0).is_err());
    let wrong = ScoreMatrix::from_scores(1, 2, vec![0.1; 2]).unwrap();
    assert!(build_circuit(&w, &wrong, &data, &protos, 0.01).is_err());
    assert!(build_circuit(&w, &s, &data.select(&[]), &protos, 0.01).is_err());
}

fn sample_circuit() -> Circuit {
    Circuit {
        heads: vec![CircuitHead { layer: 1, head: 1, score: 0.7 }],
        epsilon: 0.01,
        control_acc_base: 0.9,
        control_acc_final: 0.9,
    }
}

#[test]
fn dyslexic_export_round_trips_and_applies_the_circuit() {
    let cfg = config(2, 2, 8, 2, 2);
    let w = random_weights(cfg, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    let side = export_dyslexic(&w, &sample_circuit(), &path).unwrap();
    assert_eq!(side, dir.path().join("model.circuit.json"));
    let text = std::fs::read_to_string(&side).unwrap();
    for key in ["model_hash", "epsilon", "heads", "control_acc_base", "control_acc_final"] {
        assert!(text.contains(key), "{key}");
    }
    let m = load_dyslexic(&path).unwrap();
    assert_eq!(m.weights, w);
    assert_eq!(m.circuit.as_ref().unwrap(), &sample_circuit());
    let img = random_image(&cfg, 5);
    let direct = w
        .forward(&img, &InterventionSpec::ablate([HeadId::new(1, 1)]), CaptureFlags::default())
        .unwrap();
    let via = m.weights.forward(&img, &m.intervention(), CaptureFlags::default()).unwrap();
    assert_eq!(direct, via);

    // without a sidecar the model is plain
    std::fs::remove_file(&side).unwrap();
    assert!(load_dyslexic(&path).unwrap().circuit.is_none());
}

#[test]
fn sidecar_must_match_the_weights() {
    let cfg = config(2, 2, 8, 2, 2);
    let w = random_weights(cfg, 6);
    let other = random_weights(cfg, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    export_dyslexic(&w, &sample_circuit(), &path).unwrap();
    other.save(&path).unwrap();
    assert!(load_dyslexic(&path).is_err());

    export_dyslexic(&w, &sample_circuit(), &path).unwrap();
    let mut side = CircuitSidecar::read(&sidecar_path(&path)).unwrap();
    side.heads.push(CircuitHead { layer: 5, head: 0, score: 0.1 });
    side.write(&sidecar_path(&path)).unwrap();
    assert!(load_dyslexic(&path).is_err());
}

#[test]
fn dyslexic_model_fixes_typo_predictions() {
    let pm = gen_planted_model(&PlantedConfig::default()).unwrap();
    let ds = gen_synthetic_dataset(&SynthConfig { n: 30, ..SynthConfig::default() }).unwrap();
    let circuit = Circuit {
        heads: vec![CircuitHead { layer: 1, head: 2, score: 1.0 }],
        epsilon: 0.01,
        control_acc_base: 1.0,
        control_acc_final: 1.0,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.safetensors");
    export_dyslexic(&pm.weights, &circuit, &path).unwrap();
    let m = load_dyslexic(&path).unwrap();
    let acc = zero_shot_classify(&m.weights, &m.intervention(), &ds.typo, &pm.prototypes)
        .unwrap()
        .summary
        .acc_image;
    assert!(acc > 0.9);
}
