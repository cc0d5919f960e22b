// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use vlmflow_core::harness::{evaluate, split_early_late, Report};
use vlmflow_core::interventions::{
    cross_patch_sweep, freeze_sweep, knockout_sweep, sample_pairs, SweepCurve, SweepSettings,
};
use vlmflow_core::model::{load_model, save_model};
use vlmflow_core::wiring::default_freeze_end;
use vlmflow_core::world::{gen_world, load_world, save_world, EntityId};
use vlmflow_core::{
    compute_gap, detect_crossover, identification_gate, verify_wiring, wire_model, ModelWeights,
    Rng, World,
};

use crate::config::{parse_range, RunConfig};
use crate::svg;
use crate::CliError;

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(body.as_bytes())
        .map_err(|e| CliError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn ensure_parent(file: &Path) -> Result<(), CliError> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn echo_config(c: &RunConfig, path: &Path) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(c).map_err(|e| CliError::Validation(e.to_string()))?;
    write_file(path, &(body + "\n"))
}

/// Config echo for commands that write a single file: `<file>.run_config.json`.
fn echo_beside(c: &RunConfig, file: &Path) -> Result<(), CliError> {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".run_config.json");
    echo_config(c, &file.with_file_name(name))
}

pub fn world_gen(c: &RunConfig) -> Result<(), CliError> {
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| c.out_dir().join("world.jsonl"));
    let world = gen_world(&c.world_config)?;
    ensure_parent(&out)?;
    save_world(&world, &out)?;
    echo_beside(c, &out)?;
    info!(
        "wrote {} entities to {}",
        world.num_entities(),
        out.display()
    );
    Ok(())
}

pub fn model_wire(c: &RunConfig) -> Result<(), CliError> {
    let world = load_world(c.require_world()?)?;
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| c.out_dir().join("model.bin"));
    let (weights, cert) = wire_model(&world, &c.wiring)?;
    let report = verify_wiring(&weights, &cert, &world);
    if !report.all_passed() {
        let failed: Vec<String> = report
            .checks
            .iter()
            .filter(|k| !k.passed)
            .map(|k| format!("{}: {}", k.name, k.detail))
            .collect();
        return Err(CliError::Validation(format!(
            "wiring check failed: {}",
            failed.join("; ")
        )));
    }
    ensure_parent(&out)?;
    save_model(&weights, &out)?;
    echo_beside(c, &out)?;
    info!(
        "wired {} layers, width {}, into {}",
        weights.num_layers(),
        weights.d_model(),
        out.display()
    );
    Ok(())
}

struct Loaded {
    world: World,
    weights: ModelWeights,
    dir: PathBuf,
    settings: SweepSettings,
}

fn load(c: &RunConfig) -> Result<Loaded, CliError> {
    let world = load_world(c.require_world()?)?;
    let weights = load_model(c.require_model()?)?;
    if world.encoder_dim() != weights.encoder_dim()
        || world.vocab.len() != weights.vocab_size()
        || world.patches != weights.visual_tokens()
    {
        return Err(CliError::Validation(format!(
            "world ({} entities, {} tokens) does not match the model (encoder dim {}, {} tokens)",
            world.num_entities(),
            world.vocab.len(),
            weights.encoder_dim(),
            weights.vocab_size()
        )));
    }
    let dir = c.out_dir();
    ensure_dir(&dir)?;
    echo_config(c, &dir.join("run_config.json"))?;
    Ok(Loaded {
        world,
        weights,
        dir,
        settings: SweepSettings {
            noise_sigma: c.sigma,
            seed: c.seed,
        },
    })
}

fn identified(l: &Loaded) -> Result<Vec<EntityId>, CliError> {
    let gate = identification_gate(&l.weights, &l.world, &l.settings)?;
    info!(
        "{} of {} entities identified",
        gate.identified.len(),
        l.world.num_entities()
    );
    if gate.identified.is_empty() {
        return Err(CliError::Validation(
            "no entity passed the identification gate".into(),
        ));
    }
    Ok(gate.identified.into_iter().collect())
}

fn write_report(c: &RunConfig, dir: &Path, report: &Report) -> Result<(), CliError> {
    let path = dir.join(format!("report.{}", c.format.extension()));
    report.write(&path)?;
    Ok(())
}

fn predictions_csv(world: &World, curves: &[SweepCurve]) -> String {
    let mut out = String::from("experiment,layer,entity,injected,token,token_str\n");
    for c in curves {
        for o in &c.outcomes {
            let inj = o.injected.map(|i| i.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{inj},{},{}\n",
                c.experiment,
                o.layer,
                o.entity,
                o.token,
                world.token_str(o.token)
            ));
        }
    }
    out
}

fn write_curves(l: &Loaded, curves: &[SweepCurve]) -> Result<(), CliError> {
    for curve in curves {
        curve.write_csv(l.dir.join(format!("{}.csv", curve.experiment)))?;
    }
    write_file(
        &l.dir.join("predictions.csv"),
        &predictions_csv(&l.world, curves),
    )
}

pub fn run_eval(c: &RunConfig) -> Result<(), CliError> {
    let l = load(c)?;
    let (gate, records) = evaluate(&l.weights, &l.world, &l.settings)?;
    if records.is_empty() {
        return Err(CliError::Validation(
            "no entity passed the identification gate".into(),
        ));
    }
    let gap = compute_gap(&records)?;
    let mut report = Report::default();
    report.insert(
        "eval",
        "gate",
        "identified_fraction",
        gate.fraction(),
        gate.predictions.len(),
    );
    report.add_gap("eval", "all", &gap);
    write_report(c, &l.dir, &report)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).map_err(|e| CliError::Validation(e.to_string()))?);
        lines.push('\n');
    }
    write_file(&l.dir.join("records.jsonl"), &lines)?;
    let mut gate_csv = String::from("entity,predicted,identified\n");
    for (e, t) in &gate.predictions {
        gate_csv.push_str(&format!("{e},{t},{}\n", gate.identified.contains(e) as u8));
    }
    write_file(&l.dir.join("gate.csv"), &gate_csv)
}

pub fn run_crosspatch(c: &RunConfig) -> Result<(), CliError> {
    let l = load(c)?;
    let pool = identified(&l)?;
    let layers = match &c.layer_range {
        Some(r) => parse_range(r)?,
        None => (0..l.weights.num_layers()).collect(),
    };
    let mut curves = Vec::new();
    let mut report = Report::default();
    for (i, mode) in c.mode.modes().into_iter().enumerate() {
        let mut rng = Rng::derive(c.seed, &[10, i as u64]);
        let pairs = sample_pairs(&l.world, &pool, c.pairs, mode, &mut rng)?;
        let curve = cross_patch_sweep(&l.weights, &l.world, &pairs, &layers, mode, &l.settings)?;
        let crossover = detect_crossover(&curve)?;
        info!("{}: crossover {:?}", curve.experiment, crossover);
        report.insert(
            &curve.experiment,
            "all",
            "crossover_found",
            crossover.is_some() as u8 as f64,
            pairs.len(),
        );
        if let Some(x) = crossover {
            report.insert(&curve.experiment, "all", "crossover", x as f64, pairs.len());
        }
        if let Some(cert) = l.weights.certificate() {
            report.insert(
                &curve.experiment,
                "all",
                "expected_crossover",
                cert.expected_crossover as f64,
                pairs.len(),
            );
        }
        curves.push(curve);
    }
    write_curves(&l, &curves)?;
    write_report(c, &l.dir, &report)
}

pub fn run_freeze(c: &RunConfig) -> Result<(), CliError> {
    let l = load(c)?;
    let pool = identified(&l)?;
    let end = c
        .end_layer
        .unwrap_or_else(|| default_freeze_end(l.weights.num_layers()));
    let curve = freeze_sweep(&l.weights, &l.world, &pool, end, &l.settings)?;
    let mut report = Report::default();
    let rate = curve.series("identified").unwrap_or_default();
    if let Some(x) = curve
        .x
        .iter()
        .zip(rate)
        .find(|(_, v)| **v == 1.0)
        .map(|(x, _)| *x)
    {
        report.insert("freeze", "all", "first_full_source", x as f64, pool.len());
    }
    if let Some(cert) = l.weights.certificate() {
        report.insert(
            "freeze",
            "all",
            "expected_threshold",
            cert.expected_freeze_threshold as f64,
            pool.len(),
        );
    }
    report.insert("freeze", "all", "end_layer", end as f64, pool.len());
    write_curves(&l, &[curve])?;
    write_report(c, &l.dir, &report)
}

pub fn run_knockout(c: &RunConfig) -> Result<(), CliError> {
    let l = load(c)?;
    let pool = identified(&l)?;
    let mut curves = Vec::new();
    let mut report = Report::default();
    for dir in c.direction.directions() {
        let curve = knockout_sweep(&l.weights, &l.world, &pool, dir, &l.settings)?;
        let rate = curve.series("identified").unwrap_or_default();
        let broken = rate.iter().filter(|v| **v == 0.0).count();
        report.insert(
            &curve.experiment,
            "all",
            "endpoints_at_zero",
            broken as f64,
            pool.len(),
        );
        curves.push(curve);
    }
    write_curves(&l, &curves)?;
    write_report(c, &l.dir, &report)
}

pub fn run_split(c: &RunConfig) -> Result<(), CliError> {
    let l = load(c)?;
    let (_, records) = evaluate(&l.weights, &l.world, &l.settings)?;
    let end = c
        .end_layer
        .unwrap_or_else(|| default_freeze_end(l.weights.num_layers()));
    let split = split_early_late(
        &l.weights,
        &l.world,
        &records,
        c.threshold,
        end,
        c.rule.into(),
        &l.settings,
    )?;
    let mut report = Report::default();
    report.add_split("split", &split);
    write_report(c, &l.dir, &report)
}

pub fn report_render(c: &RunConfig) -> Result<(), CliError> {
    let input = c
        .input
        .as_deref()
        .ok_or_else(|| CliError::Validation("--input is required".into()))?;
    let curve = SweepCurve::read_csv(input)?;
    let out = c.out.clone().unwrap_or_else(|| input.with_extension("svg"));
    ensure_parent(&out)?;
    write_file(&out, &svg::render(&curve))?;
    echo_beside(c, &out)
}
