// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance criteria 1 to 7. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line; exits nonzero if any
//! criterion fails.
//!
//! Expected values come from the wiring config (layer indices), from
//! hand-computed fixtures, or from brute-force enumeration written here.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use vlmflow_core::harness::{evaluate, wilcoxon_with, WilcoxonMethod};
use vlmflow_core::interventions::{
    cross_patch_sweep, freeze_sweep, knockout, knockout_sweep, noisy_image, sample_pairs, Inputs,
    KnockoutDirection, PromptMode, SweepSettings,
};
use vlmflow_core::wiring::default_freeze_end;
use vlmflow_core::world::{gen_world, EntityId};
use vlmflow_core::{
    compute_gap, detect_crossover, identification_gate, wilcoxon_signed_rank, wire_model,
    EntityType, EvalRecord, ModelWeights, Rng, WiringConfig, World, WorldConfig,
};

type Check = Result<String, String>;

const LAYERS: usize = 32;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn world(entities: usize, seed: u64) -> World {
    gen_world(&WorldConfig {
        num_entities: entities,
        seed,
        ..WorldConfig::default()
    })
    .expect("world")
}

fn wire(world: &World, cfg: &WiringConfig) -> ModelWeights {
    wire_model(world, cfg).expect("wiring").0
}

fn sampled_configs(count: usize, seed: u64) -> Vec<WiringConfig> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| WiringConfig::sample(&mut rng, LAYERS).expect("sample"))
        .collect()
}

fn describe(c: &WiringConfig) -> String {
    format!(
        "enrich {} prop {} fact {}",
        c.enrich_layer, c.prop_layer, c.fact_layer
    )
}

fn all_entities(world: &World) -> Vec<EntityId> {
    (0..world.num_entities() as EntityId).collect()
}

const CLEAN: SweepSettings = SweepSettings {
    noise_sigma: 0.0,
    seed: 7,
};

// 1 ----------------------------------------------------------------------

fn criterion_gap_fixture() -> Check {
    let recs = |img: [f64; 2], txt: [f64; 2]| -> Vec<EvalRecord> {
        (0..2)
            .map(|i| EvalRecord::from_accuracies(i as EntityId, EntityType::Celeb, img[i], txt[i]))
            .collect()
    };
    let main = compute_gap(&recs([0.176, 0.376], [0.353, 0.553])).map_err(|e| e.to_string())?;
    ensure(
        main.img_mean == 0.276 && main.txt_mean == 0.453 && main.drop == 0.177,
        || {
            format!(
                "main fixture gave {} / {} / drop {}",
                main.img_mean, main.txt_mean, main.drop
            )
        },
    )?;
    let early = compute_gap(&recs([0.16, 0.36], [0.442, 0.442])).map_err(|e| e.to_string())?;
    ensure(
        early.img_mean == 0.26 && early.txt_mean == 0.442 && early.drop == 0.182,
        || {
            format!(
                "early fixture gave {} / {} / drop {}",
                early.img_mean, early.txt_mean, early.drop
            )
        },
    )?;
    Ok("drops 0.177 and 0.182 exact".into())
}

// 2 ----------------------------------------------------------------------

fn criterion_crossover() -> Check {
    let w = world(200, 21);
    let mut lines = Vec::new();
    for (i, cfg) in sampled_configs(10, 2).iter().enumerate() {
        let start = Instant::now();
        let weights = wire(&w, cfg);
        let gate = identification_gate(&weights, &w, &CLEAN).map_err(|e| e.to_string())?;
        let pool: Vec<EntityId> = gate.identified.iter().copied().collect();
        ensure(pool.len() == w.num_entities(), || {
            format!(
                "config {i} ({}): gate kept {} of {}",
                describe(cfg),
                pool.len(),
                w.num_entities()
            )
        })?;
        let layers: Vec<usize> = (0..LAYERS).collect();
        let mut found = Vec::new();
        for (m, mode) in [PromptMode::SameType, PromptMode::CrossType]
            .into_iter()
            .enumerate()
        {
            let mut rng = Rng::derive(100 + i as u64, &[m as u64]);
            let pairs = sample_pairs(&w, &pool, 50, mode, &mut rng).map_err(|e| e.to_string())?;
            let distinct: BTreeSet<_> = pairs.iter().collect();
            ensure(distinct.len() == 50, || {
                format!("config {i}: only {} distinct pairs", distinct.len())
            })?;
            let curve = cross_patch_sweep(&weights, &w, &pairs, &layers, mode, &CLEAN)
                .map_err(|e| e.to_string())?;
            found.push(detect_crossover(&curve).map_err(|e| e.to_string())?);
        }
        let want = Some(cfg.prop_layer + 1);
        ensure(found[0] == want && found[1] == want, || {
            format!(
                "config {i} ({}): same-type {:?}, cross-type {:?}, expected {:?}",
                describe(cfg),
                found[0],
                found[1],
                want
            )
        })?;
        lines.push(format!(
            "{}:{:.0}s",
            cfg.prop_layer + 1,
            start.elapsed().as_secs_f64()
        ));
    }
    Ok(format!(
        "crossover = prop + 1 for 10 configs, both prompt modes [{}]",
        lines.join(" ")
    ))
}

// 3 ----------------------------------------------------------------------

fn criterion_freeze() -> Check {
    let w = world(200, 31);
    let entities = all_entities(&w);
    let end = default_freeze_end(LAYERS);
    let noisy = SweepSettings {
        noise_sigma: 0.125,
        seed: 33,
    };
    let mut worst_dip: f64 = 0.0;
    for (i, cfg) in sampled_configs(5, 3).iter().enumerate() {
        let weights = wire(&w, cfg);
        let curve =
            freeze_sweep(&weights, &w, &entities, end, &CLEAN).map_err(|e| e.to_string())?;
        let rate = curve.series("identified").ok_or("no identified series")?;
        for (s, v) in curve.x.iter().zip(rate) {
            let want = if *s >= cfg.enrich_layer { 1.0 } else { 0.0 };
            ensure(*v == want, || {
                format!(
                    "config {i} ({}): source {s} gave {v}, expected {want}",
                    describe(cfg)
                )
            })?;
        }
        let curve =
            freeze_sweep(&weights, &w, &entities, end, &noisy).map_err(|e| e.to_string())?;
        let rate = curve.series("identified").ok_or("no identified series")?;
        for pair in rate.windows(2) {
            worst_dip = worst_dip.max(pair[0] - pair[1]);
        }
        ensure(worst_dip <= 0.05, || {
            format!(
                "config {i} ({}): noisy curve drops by {worst_dip:.3}: {rate:?}",
                describe(cfg)
            )
        })?;
    }
    Ok(format!(
        "step at enrich layer for 5 configs; sigma 0.125 worst dip {worst_dip:.3}"
    ))
}

// 4 ----------------------------------------------------------------------

fn criterion_knockout() -> Check {
    let w = world(200, 41);
    let entities = all_entities(&w);
    let mut configs = vec![WiringConfig::default()];
    configs.extend(sampled_configs(2, 4));
    for (i, cfg) in configs.iter().enumerate() {
        let weights = wire(&w, cfg);
        let prop = cfg.prop_layer;

        // (a) with every layer knocked out, the image cannot reach the logits.
        let everything: BTreeSet<usize> = (0..LAYERS).collect();
        let prompt =
            vlmflow_core::interventions::identification_prompt(&w, 0, PromptMode::CrossType)
                .map_err(|e| e.to_string())?;
        let mut reference: Option<Vec<f64>> = None;
        for e in entities.iter().take(25) {
            for sigma in [0.0, 0.5] {
                let settings = SweepSettings {
                    noise_sigma: sigma,
                    seed: 44,
                };
                let h_v = noisy_image(&weights, &w, *e, &settings, &[9, *e as u64])
                    .map_err(|e| e.to_string())?;
                let inputs = Inputs {
                    h_v,
                    prompt: prompt.clone(),
                };
                let logits = knockout(&weights, &inputs, &everything)
                    .map_err(|e| e.to_string())?
                    .trace
                    .logits;
                match &reference {
                    None => reference = Some(logits),
                    Some(r) => ensure(*r == logits, || {
                        format!("config {i}: logits under full knockout depend on the image (entity {e})")
                    })?,
                }
            }
        }

        // (b)-(d) sweep shapes.
        for dir in [
            KnockoutDirection::TopDown,
            KnockoutDirection::BottomUp,
            KnockoutDirection::Single,
        ] {
            let curve =
                knockout_sweep(&weights, &w, &entities, dir, &CLEAN).map_err(|e| e.to_string())?;
            let rate = curve.series("identified").ok_or("no identified series")?;
            for (p, v) in curve.x.iter().zip(rate) {
                let blocked = match dir {
                    KnockoutDirection::TopDown => *p <= prop,
                    KnockoutDirection::BottomUp => *p >= prop,
                    KnockoutDirection::Single => *p == prop,
                };
                let want = if blocked { 0.0 } else { 1.0 };
                ensure(*v == want, || {
                    format!(
                        "config {i} ({}): {} endpoint {p} gave {v}, expected {want}",
                        describe(cfg),
                        dir.as_str()
                    )
                })?;
            }
        }
    }
    Ok(
        "full knockout image-invariant; top-down, bottom-up and single sweeps exact for 3 configs"
            .into(),
    )
}

// 5 ----------------------------------------------------------------------

fn criterion_modality_gap() -> Check {
    let w = world(200, 51);
    let base = WiringConfig::default();
    let low: Vec<WiringConfig> = [
        base.prop_layer - 1,
        base.prop_layer / 2,
        base.rel_layer.max(base.text_layer) + 1,
    ]
    .into_iter()
    .map(|f| WiringConfig {
        fact_layer: f,
        ..base.clone()
    })
    .collect();
    let mut echoes = 0usize;
    for cfg in &low {
        let weights = wire(&w, cfg);
        let (gate, records) = evaluate(&weights, &w, &CLEAN).map_err(|e| e.to_string())?;
        ensure(gate.identified.len() == w.num_entities(), || {
            format!(
                "fact {}: gate kept {} entities",
                cfg.fact_layer,
                gate.identified.len()
            )
        })?;
        for r in &records {
            ensure(r.txt_accuracy == 1.0 && r.img_accuracy == 0.0, || {
                format!(
                    "fact {} < prop {}: entity {} img {} txt {}",
                    cfg.fact_layer, cfg.prop_layer, r.entity_id, r.img_accuracy, r.txt_accuracy
                )
            })?;
            let name = w.entity(r.entity_id).map_err(|e| e.to_string())?.name_token;
            for o in r.img_outcomes.iter().filter(|o| !o.correct) {
                ensure(o.predicted == name, || {
                    format!(
                        "entity {}: wrong visual answer {} is not its name {}",
                        r.entity_id, o.predicted, name
                    )
                })?;
                echoes += 1;
            }
        }
    }
    let weights = wire(&w, &base);
    let (_, records) = evaluate(&weights, &w, &CLEAN).map_err(|e| e.to_string())?;
    ensure(records.len() == w.num_entities(), || {
        format!("{} records", records.len())
    })?;
    for r in &records {
        ensure(r.txt_accuracy == 1.0 && r.img_accuracy == 1.0, || {
            format!(
                "fact > prop: entity {} img {} txt {}",
                r.entity_id, r.img_accuracy, r.txt_accuracy
            )
        })?;
    }
    Ok(format!("fact < prop: txt 1.0, img 0.0, {echoes} wrong answers all echo the name; fact > prop: both 1.0"))
}

// 6 ----------------------------------------------------------------------

/// Average ranks of |d| by pairwise comparison.
fn oracle_ranks(d: &[f64]) -> Vec<f64> {
    d.iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let tied = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect()
}

/// Two-sided p by listing all sign assignments, walked in Gray-code order.
fn oracle_p(pairs: &[(f64, f64)]) -> f64 {
    let d: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| b - a)
        .filter(|x| *x != 0.0)
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    let ranks = oracle_ranks(&d);
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w = w_plus.min(total - w_plus);
    let n = d.len();
    let mut signs = vec![false; n];
    let mut sum = 0.0;
    let mut at_most = u64::from(sum <= w);
    for i in 1u64..(1u64 << n) {
        let bit = i.trailing_zeros() as usize;
        signs[bit] = !signs[bit];
        sum += if signs[bit] { ranks[bit] } else { -ranks[bit] };
        at_most += u64::from(sum <= w);
    }
    (2.0 * at_most as f64 / (1u64 << n) as f64).min(1.0)
}

/// Accuracy-like pairs on a quarter grid: ties and zero differences common.
fn grid_pairs(rng: &mut Rng, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| (rng.below(5) as f64 / 4.0, rng.below(5) as f64 / 4.0))
        .collect()
}

fn continuous_pairs(rng: &mut Rng, n: usize) -> Vec<(f64, f64)> {
    let shift = rng.uniform() - 0.5;
    (0..n)
        .map(|_| (rng.standard_normal(), rng.standard_normal() + shift))
        .collect()
}

fn criterion_wilcoxon() -> Check {
    let mut rng = Rng::new(6);
    let mut exact_err: f64 = 0.0;
    for n in 5..=12 {
        for k in 0..100 {
            let pairs = if k % 2 == 0 {
                grid_pairs(&mut rng, n)
            } else {
                continuous_pairs(&mut rng, n)
            };
            let got = wilcoxon_with(&pairs, WilcoxonMethod::Exact)
                .map_err(|e| e.to_string())?
                .p_value;
            let want = oracle_p(&pairs);
            exact_err = exact_err.max((got - want).abs());
        }
    }
    let big = continuous_pairs(&mut rng, 25);
    let big_got = wilcoxon_signed_rank(&big).map_err(|e| e.to_string())?;
    let big_err = (big_got.p_value - oracle_p(&big)).abs();
    let zeros = vec![(0.5, 0.5); 20];
    let zero_p = wilcoxon_signed_rank(&zeros)
        .map_err(|e| e.to_string())?
        .p_value;

    let mut approx_worst = (0.0f64, 0usize);
    for n in 13..=25 {
        for _ in 0..100 {
            let pairs = continuous_pairs(&mut rng, n);
            let exact = wilcoxon_with(&pairs, WilcoxonMethod::Exact)
                .map_err(|e| e.to_string())?
                .p_value;
            let approx = wilcoxon_with(&pairs, WilcoxonMethod::Normal)
                .map_err(|e| e.to_string())?
                .p_value;
            let diff = (exact - approx).abs();
            if diff > approx_worst.0 {
                approx_worst = (diff, n);
            }
        }
    }
    let detail = format!(
        "exact vs oracle max {exact_err:.1e} (n 5..12), 2^25 case {big_err:.1e}, all-zero p {zero_p}, \
         normal vs exact max {:.4} at n {} (n 13..25)",
        approx_worst.0, approx_worst.1
    );
    let ok = exact_err <= 1e-12
        && big_got.exact
        && big_err <= 1e-12
        && zero_p == 1.0
        && approx_worst.0 <= 0.01;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 7 ----------------------------------------------------------------------

fn vlmflow(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vlmflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "vlmflow {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn pipeline(dir: &Path, jobs: &str) -> Result<(), String> {
    let common = ["--seed", "17", "--sigma", "0.1", "--jobs", jobs];
    vlmflow(
        dir,
        &[
            "world",
            "gen",
            "--entities",
            "500",
            "--out",
            "world.jsonl",
            "--seed",
            "17",
        ],
    )?;
    vlmflow(
        dir,
        &[
            "model",
            "wire",
            "--world",
            "world.jsonl",
            "--out",
            "model.bin",
        ],
    )?;
    for exp in ["eval", "crosspatch", "freeze", "knockout", "split"] {
        let mut args = vec![
            "run",
            exp,
            "--world",
            "world.jsonl",
            "--model",
            "model.bin",
            "--out",
            exp,
        ];
        args.extend(common);
        vlmflow(dir, &args)?;
    }
    for curve in [
        "crosspatch/crosspatch_same_type.csv",
        "crosspatch/crosspatch_cross_type.csv",
        "freeze/freeze.csv",
        "knockout/knockout_top_down.csv",
        "knockout/knockout_bottom_up.csv",
        "knockout/knockout_single.csv",
    ] {
        vlmflow(dir, &["report", "render", "--input", curve])?;
    }
    Ok(())
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("read_dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("prefix").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_reproducible() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).map_err(|e| e.to_string())?;
    fs::create_dir_all(&b).map_err(|e| e.to_string())?;
    pipeline(&a, "2")?;
    pipeline(&b, "2")?;
    let (fa, fb) = (files(&a), files(&b));
    ensure(fa == fb, || format!("file sets differ: {fa:?} vs {fb:?}"))?;
    let svgs = fa
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .count();
    ensure(svgs == 6, || format!("{svgs} SVG files"))?;
    for f in &fa {
        let (x, y) = (fs::read(a.join(f)), fs::read(b.join(f)));
        ensure(
            x.map_err(|e| e.to_string())? == y.map_err(|e| e.to_string())?,
            || format!("{} differs between runs", f.display()),
        )?;
    }
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

type Criterion = fn() -> Check;

fn main() {
    let criteria: [(&str, Criterion); 7] = [
        ("gap arithmetic fixture", criterion_gap_fixture),
        ("crossover oracle", criterion_crossover),
        ("freeze-retention oracle", criterion_freeze),
        ("knockout oracles", criterion_knockout),
        ("modality-gap reproduction", criterion_modality_gap),
        ("wilcoxon correctness", criterion_wilcoxon),
        ("end-to-end reproducibility", criterion_reproducible),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id} {name}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
