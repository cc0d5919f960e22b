// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::path::Path;

use vlmflow_core::harness::{evaluate, EarlyIdRule};
use vlmflow_core::interventions::{freeze_sweep, knockout_sweep, SweepSettings};
use vlmflow_core::model::{load_model, save_model};
use vlmflow_core::wiring::{default_freeze_end, EnrichTier, NOISE_MARGIN, PROP_HEAD};
use vlmflow_core::world::{gen_world, load_world, EntityId};
use vlmflow_core::{
    eval_qa, identification_gate, split_early_late, verify_wiring, wire_model, KnockoutDirection,
    Modality, WiringConfig, World, WorldConfig,
};

fn fixture_world() -> World {
    load_world(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_entities.jsonl"))
        .unwrap()
}

fn small_config() -> WiringConfig {
    WiringConfig {
        layers: 12,
        enrich_layer: 2,
        prop_layer: 5,
        rel_layer: 1,
        text_layer: 1,
        fact_layer: 7,
        ..WiringConfig::default()
    }
}

fn world(n: usize, seed: u64) -> World {
    gen_world(&WorldConfig {
        num_entities: n,
        seed,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn clean() -> SweepSettings {
    SweepSettings::default()
}

#[test]
fn fixture_world_answers_by_hand() {
    let w = fixture_world();
    assert_eq!(w.num_entities(), 2);
    assert_eq!(w.token_str(13), "Mount Oru");
    assert_eq!(w.accepted_answers(1, 0).unwrap(), BTreeSet::from([13, 14]));

    let (weights, cert) = wire_model(&w, &small_config()).unwrap();
    assert!(verify_wiring(&weights, &cert, &w).all_passed());

    let gate = identification_gate(&weights, &w, &clean()).unwrap();
    assert_eq!(gate.identified, BTreeSet::from([0, 1]));
    assert_eq!(gate.predictions, vec![(0, 12), (1, 13)]);

    for modality in [Modality::Textual, Modality::Visual] {
        let qa = eval_qa(&weights, &w, &gate.identified, modality, &clean()).unwrap();
        let answers: Vec<Vec<u32>> = qa
            .iter()
            .map(|r| r.outcomes.iter().map(|o| o.predicted).collect())
            .collect();
        assert_eq!(answers, vec![vec![15, 16], vec![16, 15]], "{modality:?}");
        assert!(qa.iter().all(|r| r.accuracy == 1.0));
    }
}

#[test]
fn fixture_model_survives_a_file_round_trip() {
    let w = fixture_world();
    let (weights, _) = wire_model(&w, &small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_model(&weights, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, weights);
    let a = identification_gate(&weights, &w, &clean()).unwrap();
    let b = identification_gate(&back, &w, &clean()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn early_fact_lookup_answers_text_but_echoes_the_name_for_images() {
    let w = fixture_world();
    let cfg = WiringConfig {
        fact_layer: 3,
        ..small_config()
    };
    let (weights, _) = wire_model(&w, &cfg).unwrap();
    let ids = BTreeSet::from([0, 1]);
    let txt = eval_qa(&weights, &w, &ids, Modality::Textual, &clean()).unwrap();
    let img = eval_qa(&weights, &w, &ids, Modality::Visual, &clean()).unwrap();
    assert!(txt.iter().all(|r| r.accuracy == 1.0));
    assert!(img.iter().all(|r| r.accuracy == 0.0));
    for r in &img {
        let name = if r.entity_id == 0 { 12 } else { 13 };
        assert!(r.outcomes.iter().all(|o| o.predicted == name));
    }
}

#[test]
fn without_echo_a_blocked_visual_answer_is_unknown() {
    let w = fixture_world();
    let cfg = WiringConfig {
        fact_layer: 3,
        echo_strength: 0.0,
        ..small_config()
    };
    let (weights, _) = wire_model(&w, &cfg).unwrap();
    let img = eval_qa(
        &weights,
        &w,
        &BTreeSet::from([0, 1]),
        Modality::Visual,
        &clean(),
    )
    .unwrap();
    for r in &img {
        assert!(
            r.outcomes.iter().all(|o| o.predicted == 0),
            "{:?}",
            r.outcomes
        );
    }
}

#[test]
fn removing_the_propagation_head_fails_the_gate() {
    let w = world(60, 3);
    let cfg = WiringConfig::default();
    let (weights, _) = wire_model(&w, &cfg).unwrap();
    let ablated = weights.with_head_zeroed(cfg.prop_layer, PROP_HEAD).unwrap();
    let gate = identification_gate(&ablated, &w, &clean()).unwrap();
    assert!(gate.identified.is_empty());
    assert!(gate.predictions.iter().all(|(_, t)| *t == 0));
    let intact = identification_gate(&weights, &w, &clean()).unwrap();
    assert_eq!(intact.identified.len(), 60);
}

#[test]
fn gate_holds_within_the_noise_margin_and_degrades_far_beyond_it() {
    let w = world(120, 4);
    let (weights, cert) = wire_model(&w, &WiringConfig::default()).unwrap();
    assert_eq!(cert.noise_margin, NOISE_MARGIN);
    for seed in 0..3 {
        let s = SweepSettings {
            noise_sigma: NOISE_MARGIN / 2.0,
            seed,
        };
        assert_eq!(
            identification_gate(&weights, &w, &s).unwrap().fraction(),
            1.0
        );
    }
    let loud = SweepSettings {
        noise_sigma: 40.0,
        seed: 1,
    };
    assert!(identification_gate(&weights, &w, &loud).unwrap().fraction() < 0.5);
}

fn split_counts(
    enrich: usize,
    tiers: Vec<EnrichTier>,
    w: &World,
) -> (Vec<EntityId>, Vec<EntityId>) {
    let cfg = WiringConfig {
        enrich_layer: enrich,
        enrich_tiers: tiers,
        ..WiringConfig::default()
    };
    let (weights, _) = wire_model(w, &cfg).unwrap();
    let (_, records) = evaluate(&weights, w, &clean()).unwrap();
    let split = split_early_late(
        &weights,
        w,
        &records,
        5,
        default_freeze_end(32),
        EarlyIdRule::AnyBelow,
        &clean(),
    )
    .unwrap();
    (split.early, split.late)
}

#[test]
fn split_follows_the_enrichment_depth() {
    let w = world(40, 5);
    let all: Vec<EntityId> = (0..40).collect();
    assert_eq!(split_counts(3, Vec::new(), &w), (all.clone(), Vec::new()));
    assert_eq!(split_counts(8, Vec::new(), &w), (Vec::new(), all));
}

#[test]
fn mixed_tiers_partition_exactly() {
    let w = world(40, 6);
    let deep: Vec<EntityId> = (0..40).filter(|e| e % 3 == 0).collect();
    let shallow: Vec<EntityId> = (0..40).filter(|e| e % 3 != 0).collect();
    let tiers = vec![EnrichTier {
        depth: 8,
        entities: deep.clone(),
    }];
    assert_eq!(split_counts(3, tiers, &w), (shallow, deep));
}

#[test]
fn freeze_sweep_steps_per_tier() {
    let w = world(30, 7);
    let deep: Vec<EntityId> = vec![1, 4, 9];
    let cfg = WiringConfig {
        enrich_layer: 3,
        enrich_tiers: vec![EnrichTier {
            depth: 8,
            entities: deep.clone(),
        }],
        ..WiringConfig::default()
    };
    let (weights, _) = wire_model(&w, &cfg).unwrap();
    let entities: Vec<EntityId> = (0..30).collect();
    let curve = freeze_sweep(&weights, &w, &entities, 20, &clean()).unwrap();
    let rate = curve.series("identified").unwrap();
    for (s, v) in curve.x.iter().zip(rate) {
        let want = match *s {
            0..=2 => 0.0,
            3..=7 => 27.0 / 30.0,
            _ => 1.0,
        };
        assert_eq!(*v, want, "source {s}");
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let w = world(50, 8);
    let (weights, _) = wire_model(&w, &WiringConfig::default()).unwrap();
    let noisy = SweepSettings {
        noise_sigma: 0.4,
        seed: 12,
    };
    let entities: Vec<EntityId> = (0..50).collect();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let eval = evaluate(&weights, &w, &noisy).unwrap();
                let ko = knockout_sweep(&weights, &w, &entities, KnockoutDirection::Single, &noisy)
                    .unwrap();
                (eval, ko)
            })
    };
    assert_eq!(run(1), run(4));
}
