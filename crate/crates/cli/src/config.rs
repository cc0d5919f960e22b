// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flags, the JSON config file that mirrors them, and their resolution into
//! one [`RunConfig`].

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use vlmflow_core::harness::EarlyIdRule;
use vlmflow_core::interventions::{KnockoutDirection, PromptMode};
use vlmflow_core::{WiringConfig, WorldConfig};

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "VLMFLOW_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "vlmflow-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    SameType,
    CrossType,
    Both,
}

impl ModeArg {
    pub fn modes(self) -> Vec<PromptMode> {
        match self {
            Self::SameType => vec![PromptMode::SameType],
            Self::CrossType => vec![PromptMode::CrossType],
            Self::Both => vec![PromptMode::SameType, PromptMode::CrossType],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DirectionArg {
    TopDown,
    BottomUp,
    Single,
    All,
}

impl DirectionArg {
    pub fn directions(self) -> Vec<KnockoutDirection> {
        match self {
            Self::TopDown => vec![KnockoutDirection::TopDown],
            Self::BottomUp => vec![KnockoutDirection::BottomUp],
            Self::Single => vec![KnockoutDirection::Single],
            Self::All => vec![
                KnockoutDirection::TopDown,
                KnockoutDirection::BottomUp,
                KnockoutDirection::Single,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RuleArg {
    AnyBelow,
    AllBelow,
    SourceZero,
}

impl From<RuleArg> for EarlyIdRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::AnyBelow => EarlyIdRule::AnyBelow,
            RuleArg::AllBelow => EarlyIdRule::AllBelow,
            RuleArg::SourceZero => EarlyIdRule::SourceZero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FormatArg {
    Csv,
    Json,
}

impl FormatArg {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON file with any subset of the resolved config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// World file (JSON lines).
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output file (world gen, model wire, report render) or directory (run).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Input CSV for report render.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-component image noise.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,

    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub relations: Option<usize>,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub aliases: Option<usize>,

    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub enrich_layer: Option<usize>,
    #[arg(long)]
    pub prop_layer: Option<usize>,
    #[arg(long)]
    pub rel_layer: Option<usize>,
    #[arg(long)]
    pub text_layer: Option<usize>,
    #[arg(long)]
    pub fact_layer: Option<usize>,
    #[arg(long)]
    pub id_fact_layer: Option<usize>,
    #[arg(long)]
    pub echo_strength: Option<f64>,
    #[arg(long)]
    pub unknown_bias: Option<f64>,

    /// Cross-patch pairs per prompt mode.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Cross-patch layers as `start..end` (end exclusive).
    #[arg(long)]
    pub layer_range: Option<String>,
    /// Last frozen layer; defaults to floor(0.625 * L).
    #[arg(long)]
    pub end_layer: Option<usize>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    /// Early-id threshold layer for run split.
    #[arg(long)]
    pub threshold: Option<usize>,
    #[arg(long, value_enum)]
    pub rule: Option<RuleArg>,
    /// Report format.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

/// Fully resolved settings of one invocation. Written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub world: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub seed: u64,
    pub sigma: f64,
    pub jobs: Option<usize>,
    pub world_config: WorldConfig,
    pub wiring: WiringConfig,
    pub pairs: usize,
    pub mode: ModeArg,
    pub layer_range: Option<String>,
    pub end_layer: Option<usize>,
    pub direction: DirectionArg,
    pub threshold: usize,
    pub rule: RuleArg,
    pub format: FormatArg,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            world: None,
            model: None,
            out: None,
            input: None,
            seed: 0,
            sigma: 0.0,
            jobs: None,
            world_config: WorldConfig::default(),
            wiring: WiringConfig::default(),
            pairs: 100,
            mode: ModeArg::Both,
            layer_range: None,
            end_layer: None,
            direction: DirectionArg::All,
            threshold: 5,
            rule: RuleArg::AnyBelow,
            format: FormatArg::Csv,
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl RunConfig {
    /// Defaults, then the config file, then flags.
    pub fn resolve(command: &str, flags: &Flags) -> Result<Self, CliError> {
        let mut c = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        c.command = command.to_string();
        let f = flags.clone();
        if f.world.is_some() {
            c.world = f.world;
        }
        if f.model.is_some() {
            c.model = f.model;
        }
        if f.out.is_some() {
            c.out = f.out;
        }
        if f.input.is_some() {
            c.input = f.input;
        }
        if f.jobs.is_some() {
            c.jobs = f.jobs;
        }
        set(&mut c.seed, f.seed);
        set(&mut c.sigma, f.sigma);
        let w = &mut c.world_config;
        set(&mut w.num_entities, f.entities);
        set(&mut w.num_relations, f.relations);
        set(&mut w.num_objects, f.objects);
        set(&mut w.patches, f.patches);
        set(&mut w.max_aliases, f.aliases);
        if command == "world gen" {
            w.seed = c.seed;
        }
        let wc = &mut c.wiring;
        set(&mut wc.layers, f.layers);
        set(&mut wc.enrich_layer, f.enrich_layer);
        set(&mut wc.prop_layer, f.prop_layer);
        set(&mut wc.rel_layer, f.rel_layer);
        set(&mut wc.text_layer, f.text_layer);
        set(&mut wc.fact_layer, f.fact_layer);
        if f.id_fact_layer.is_some() {
            wc.id_fact_layer = f.id_fact_layer;
        }
        set(&mut wc.echo_strength, f.echo_strength);
        set(&mut wc.unknown_bias, f.unknown_bias);
        set(&mut c.pairs, f.pairs);
        set(&mut c.mode, f.mode);
        if f.layer_range.is_some() {
            c.layer_range = f.layer_range;
        }
        if f.end_layer.is_some() {
            c.end_layer = f.end_layer;
        }
        set(&mut c.direction, f.direction);
        set(&mut c.threshold, f.threshold);
        set(&mut c.rule, f.rule);
        set(&mut c.format, f.format);
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!(
                "--sigma must be a finite value >= 0, got {}",
                self.sigma
            ));
        }
        if self.jobs == Some(0) {
            return bad("--jobs must be at least 1".into());
        }
        if self.pairs == 0 {
            return bad("--pairs must be at least 1".into());
        }
        if let Some(r) = &self.layer_range {
            parse_range(r)?;
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(default_out_dir)
    }

    pub fn require_world(&self) -> Result<&Path, CliError> {
        self.world
            .as_deref()
            .ok_or_else(|| CliError::Validation("--world is required".into()))
    }

    pub fn require_model(&self) -> Result<&Path, CliError> {
        self.model
            .as_deref()
            .ok_or_else(|| CliError::Validation("--model is required".into()))
    }
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Parses `start..end` into the half-open range's indices.
pub fn parse_range(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Validation(format!("layer range must look like 3..12, got {s:?}"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a >= b {
        return Err(bad());
    }
    Ok((a..b).collect())
}
