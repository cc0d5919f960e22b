// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross patching, freeze patching and attention knockout, all confined to
//! the image positions, plus layer sweeps that score identification.
//!
//! Sweeps take one greedy token per run and count it as correct when it is
//! one of the entity's accepted names.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    embed_image, forward, predict, Hooks, ModelWeights, Pin, RunTrace, SequenceLayout,
    StateOverride,
};
use crate::numerics::{Matrix, Rng};
use crate::world::{
    render_question, render_question_typed, render_visual, EntityId, Modality, TokenId, World,
    ID_RELATION,
};

// (layer, value, n) of one CSV row
type SeriesRow = (usize, f64, usize);

/// Model inputs of one run: projected image tokens and the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub h_v: Matrix,
    pub prompt: Vec<TokenId>,
}

impl Inputs {
    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            visual: self.h_v.rows(),
            textual: self.prompt.len(),
            generated: 0,
        }
    }
}

/// Greedy token and the trace it came from.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub token: TokenId,
    pub trace: RunTrace,
}

fn run(weights: &ModelWeights, inputs: &Inputs, hooks: &Hooks) -> Result<Outcome> {
    let trace = forward(weights, &inputs.h_v, &inputs.prompt, &[], hooks)?;
    Ok(Outcome {
        token: trace.predicted(),
        trace,
    })
}

/// Plain forward pass; the trace doubles as a patch source.
pub fn run_with_cache(weights: &ModelWeights, inputs: &Inputs) -> Result<RunTrace> {
    forward(weights, &inputs.h_v, &inputs.prompt, &[], &Hooks::default())
}

/// Hooks replacing the image rows of `snapshot[layer]` with `injected`'s.
pub fn cross_patch_hooks(
    injected: &RunTrace,
    layout: &SequenceLayout,
    layer: usize,
) -> Result<Hooks> {
    if injected.layout.visual != layout.visual || injected.layout.textual != layout.textual {
        return Err(Error::dim(
            "cross_patch",
            format!(
                "injected run has {} image and {} text positions, original has {} and {}",
                injected.layout.visual, injected.layout.textual, layout.visual, layout.textual
            ),
        ));
    }
    if layer >= injected.num_layers() {
        return Err(Error::Hook(format!(
            "patch layer {layer} outside {} layers",
            injected.num_layers()
        )));
    }
    Ok(Hooks {
        state_overrides: vec![StateOverride {
            layer,
            positions: layout.visual_positions().collect(),
            values: injected.visual_rows(layer),
        }],
        ..Hooks::default()
    })
}

pub fn cross_patch(
    weights: &ModelWeights,
    original: &Inputs,
    injected: &RunTrace,
    layer: usize,
) -> Result<Outcome> {
    let hooks = cross_patch_hooks(injected, &original.layout(), layer)?;
    run(weights, original, &hooks)
}

/// Hooks pinning image rows to `snapshot[source]` for layers in
/// `(source, end]`.
pub fn freeze_hooks(
    layout: &SequenceLayout,
    layers: usize,
    source: usize,
    end: usize,
) -> Result<Hooks> {
    if source > end || end >= layers {
        return Err(Error::Hook(format!(
            "freeze range source {source}, end {end} invalid for {layers} layers"
        )));
    }
    Ok(Hooks {
        pins: vec![Pin {
            positions: layout.visual_positions().collect(),
            source,
            end,
        }],
        ..Hooks::default()
    })
}

pub fn freeze_patch(
    weights: &ModelWeights,
    inputs: &Inputs,
    source: usize,
    end: usize,
) -> Result<Outcome> {
    let hooks = freeze_hooks(&inputs.layout(), weights.num_layers(), source, end)?;
    run(weights, inputs, &hooks)
}

/// Hooks cutting every text or generated query off from every image key at
/// each listed layer.
pub fn knockout_hooks(layout: &SequenceLayout, layers: &BTreeSet<usize>) -> Hooks {
    let pairs: BTreeSet<(usize, usize)> = layout
        .non_visual_positions()
        .flat_map(|q| layout.visual_positions().map(move |k| (q, k)))
        .collect();
    Hooks {
        mask_overrides: layers.iter().map(|l| (*l, pairs.clone())).collect(),
        ..Hooks::default()
    }
}

pub fn knockout(
    weights: &ModelWeights,
    inputs: &Inputs,
    layers: &BTreeSet<usize>,
) -> Result<Outcome> {
    run(weights, inputs, &knockout_hooks(&inputs.layout(), layers))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Prompt names the entity type ("person", "place", ...).
    SameType,
    /// Prompt uses the generic subject token; pairs mix types.
    CrossType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnockoutDirection {
    /// Endpoint `s` knocks out layers `s..L`.
    TopDown,
    /// Endpoint `e` knocks out layers `0..=e`.
    BottomUp,
    /// Endpoint `l` knocks out layer `l` only.
    Single,
}

impl KnockoutDirection {
    pub fn endpoints(self, layers: usize) -> Vec<usize> {
        match self {
            Self::TopDown => (0..=layers).collect(),
            Self::BottomUp | Self::Single => (0..layers).collect(),
        }
    }

    pub fn layer_set(self, endpoint: usize, layers: usize) -> BTreeSet<usize> {
        match self {
            Self::TopDown => (endpoint..layers).collect(),
            Self::BottomUp => (0..=endpoint.min(layers.saturating_sub(1))).collect(),
            Self::Single => BTreeSet::from([endpoint]),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TopDown => "top_down",
            Self::BottomUp => "bottom_up",
            Self::Single => "single",
        }
    }
}

/// Noise and seed shared by all runs of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Predicted token of one run inside a sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub layer: usize,
    pub entity: EntityId,
    /// Donor entity for cross patching.
    pub injected: Option<EntityId>,
    pub token: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

/// Fraction-valued curves over layer indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub experiment: String,
    pub x: Vec<usize>,
    pub series: Vec<Series>,
    /// Runs behind each point.
    pub n: Vec<usize>,
    /// Ordered by layer, then entity.
    pub outcomes: Vec<SweepOutcome>,
}

pub const SWEEP_CSV_HEADER: [&str; 5] = ["experiment", "series", "layer", "value", "n"];

impl SweepCurve {
    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.series
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.values.as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n.len() != self.x.len() {
            return Err(Error::dim("SweepCurve", "sample counts do not match x"));
        }
        for s in &self.series {
            if s.values.len() != self.x.len() {
                return Err(Error::dim(
                    "SweepCurve",
                    format!(
                        "series {} has {} points for {} layers",
                        s.name,
                        s.values.len(),
                        self.x.len()
                    ),
                ));
            }
            if let Some(v) = s.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::dim(
                    "SweepCurve",
                    format!("series {} has value {v} outside [0, 1]", s.name),
                ));
            }
        }
        Ok(())
    }

    /// One row per (series, layer). Values use the shortest representation
    /// that parses back to the same `f64`.
    pub fn to_csv(&self) -> String {
        let mut out = SWEEP_CSV_HEADER.join(",");
        out.push('\n');
        for s in &self.series {
            for ((x, v), n) in self.x.iter().zip(&s.values).zip(&self.n) {
                out.push_str(&format!("{},{},{x},{v},{n}\n", self.experiment, s.name));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }

    /// Parses [`SweepCurve::to_csv`] output. Errors carry the 1-based line.
    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let bad = |record: usize, detail: String| Error::Schema {
            path: path.to_path_buf(),
            record,
            detail,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != SWEEP_CSV_HEADER {
            return Err(bad(
                1,
                format!("header must be {}", SWEEP_CSV_HEADER.join(",")),
            ));
        }
        let mut experiment: Option<String> = None;
        let mut series: Vec<(String, Vec<SeriesRow>)> = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| bad(line, e.to_string()))?;
            if rec.len() != 5 {
                return Err(bad(line, format!("expected 5 fields, found {}", rec.len())));
            }
            match &experiment {
                None => experiment = Some(rec[0].to_string()),
                Some(e) if e != &rec[0] => {
                    return Err(bad(line, format!("mixed experiments {e} and {}", &rec[0])))
                }
                _ => {}
            }
            let layer: usize = rec[2]
                .parse()
                .map_err(|_| bad(line, format!("bad layer {:?}", &rec[2])))?;
            let value: f64 = rec[3]
                .parse()
                .map_err(|_| bad(line, format!("bad value {:?}", &rec[3])))?;
            let n: usize = rec[4]
                .parse()
                .map_err(|_| bad(line, format!("bad count {:?}", &rec[4])))?;
            if !(0.0..=1.0).contains(&value) {
                return Err(bad(line, format!("value {value} outside [0, 1]")));
            }
            match series.iter_mut().find(|(name, _)| name == &rec[1]) {
                Some((_, pts)) => pts.push((layer, value, n)),
                None => series.push((rec[1].to_string(), vec![(layer, value, n)])),
            }
        }
        let experiment = experiment.ok_or_else(|| bad(1, "no data rows".into()))?;
        let x: Vec<usize> = series[0].1.iter().map(|p| p.0).collect();
        let n: Vec<usize> = series[0].1.iter().map(|p| p.2).collect();
        for (name, pts) in &series {
            let px: Vec<usize> = pts.iter().map(|p| p.0).collect();
            if px != x {
                return Err(bad(
                    0,
                    format!("series {name} does not share the layer axis"),
                ));
            }
        }
        Ok(Self {
            experiment,
            x,
            n,
            series: series
                .into_iter()
                .map(|(name, pts)| Series {
                    name,
                    values: pts.into_iter().map(|p| p.1).collect(),
                })
                .collect(),
            outcomes: Vec::new(),
        })
    }
}

/// Identification prompt for a sweep: typed reference word for same-type
/// runs, generic subject otherwise.
pub fn identification_prompt(
    world: &World,
    entity: EntityId,
    mode: PromptMode,
) -> Result<Vec<TokenId>> {
    match mode {
        PromptMode::SameType => {
            render_question_typed(world, ID_RELATION, world.entity(entity)?.entity_type)
        }
        PromptMode::CrossType => render_question(world, ID_RELATION, Modality::Visual, None),
    }
}

/// Stream tags keeping image noise of different experiments independent.
pub(crate) mod stream {
    pub const GATE: u64 = 1;
    pub const QA: u64 = 2;
    pub const CROSS: u64 = 3;
    pub const FREEZE: u64 = 4;
    pub const KNOCKOUT: u64 = 5;
}

/// Projected image of `entity` with noise from the derived stream `path`.
pub fn noisy_image(
    weights: &ModelWeights,
    world: &World,
    entity: EntityId,
    settings: &SweepSettings,
    path: &[u64],
) -> Result<Matrix> {
    let mut rng = Rng::derive(settings.seed, path);
    embed_image(
        weights,
        &render_visual(world, entity, settings.noise_sigma, &mut rng)?,
    )
}

fn is_name(world: &World, entity: EntityId, token: TokenId) -> Result<bool> {
    Ok(world.entity(entity)?.aliases.contains(&token))
}

/// Draws `count` ordered pairs of distinct entities from `pool`: same type
/// for [`PromptMode::SameType`], different types for
/// [`PromptMode::CrossType`].
pub fn sample_pairs(
    world: &World,
    pool: &[EntityId],
    count: usize,
    mode: PromptMode,
    rng: &mut Rng,
) -> Result<Vec<(EntityId, EntityId)>> {
    let mut candidates = Vec::new();
    for &a in pool {
        for &b in pool {
            if a == b {
                continue;
            }
            let same = world.entity(a)?.entity_type == world.entity(b)?.entity_type;
            if same == (mode == PromptMode::SameType) {
                candidates.push((a, b));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Empty("pair pool"));
    }
    rng.shuffle(&mut candidates);
    if count <= candidates.len() {
        candidates.truncate(count);
        return Ok(candidates);
    }
    // Fewer distinct pairs than requested: cycle through them.
    Ok((0..count)
        .map(|i| candidates[i % candidates.len()])
        .collect())
}

/// Patches every listed layer for every pair and records how often the
/// injected and the original entity are named.
pub fn cross_patch_sweep(
    weights: &ModelWeights,
    world: &World,
    pairs: &[(EntityId, EntityId)],
    layers: &[usize],
    mode: PromptMode,
    settings: &SweepSettings,
) -> Result<SweepCurve> {
    if pairs.is_empty() {
        return Err(Error::Empty("cross_patch_sweep pairs"));
    }
    if layers.is_empty() {
        return Err(Error::Empty("cross_patch_sweep layers"));
    }
    let per_pair: Vec<Vec<TokenId>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, &(orig, inj))| {
            let prompt = identification_prompt(world, orig, mode)?;
            let tag = [stream::CROSS, i as u64];
            let original = Inputs {
                h_v: noisy_image(weights, world, orig, settings, &[tag[0], tag[1], 0])?,
                prompt: prompt.clone(),
            };
            let injected = Inputs {
                h_v: noisy_image(weights, world, inj, settings, &[tag[0], tag[1], 1])?,
                prompt,
            };
            let donor = run_with_cache(weights, &injected)?;
            layers
                .iter()
                .map(|&l| {
                    let hooks = cross_patch_hooks(&donor, &original.layout(), l)?;
                    predict(weights, &original.h_v, &original.prompt, &hooks)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut inj_rate = Vec::with_capacity(layers.len());
    let mut orig_rate = Vec::with_capacity(layers.len());
    let mut outcomes = Vec::with_capacity(layers.len() * pairs.len());
    for (li, &l) in layers.iter().enumerate() {
        let (mut hits_inj, mut hits_orig) = (0usize, 0usize);
        for (p, &(orig, inj)) in pairs.iter().enumerate() {
            let token = per_pair[p][li];
            hits_inj += is_name(world, inj, token)? as usize;
            hits_orig += is_name(world, orig, token)? as usize;
            outcomes.push(SweepOutcome {
                layer: l,
                entity: orig,
                injected: Some(inj),
                token,
            });
        }
        inj_rate.push(hits_inj as f64 / pairs.len() as f64);
        orig_rate.push(hits_orig as f64 / pairs.len() as f64);
    }
    Ok(SweepCurve {
        experiment: match mode {
            PromptMode::SameType => "crosspatch_same_type",
            PromptMode::CrossType => "crosspatch_cross_type",
        }
        .to_string(),
        x: layers.to_vec(),
        series: vec![
            Series {
                name: "injected".into(),
                values: inj_rate,
            },
            Series {
                name: "original".into(),
                values: orig_rate,
            },
        ],
        n: vec![pairs.len(); layers.len()],
        outcomes,
    })
}

/// Identification per (entity, point) where `hooks_at(layout, point)`
/// builds the intervention. One noisy image per entity, shared across
/// points.
#[allow(clippy::too_many_arguments)]
fn identification_sweep(
    weights: &ModelWeights,
    world: &World,
    entities: &[EntityId],
    points: &[usize],
    settings: &SweepSettings,
    stream_tag: u64,
    experiment: String,
    hooks_at: impl Fn(&SequenceLayout, usize) -> Result<Hooks> + Sync,
) -> Result<SweepCurve> {
    if entities.is_empty() {
        return Err(Error::Empty("sweep entities"));
    }
    let per_entity: Vec<Vec<(TokenId, bool)>> = entities
        .par_iter()
        .map(|&e| {
            let inputs = Inputs {
                h_v: noisy_image(weights, world, e, settings, &[stream_tag, e as u64])?,
                prompt: identification_prompt(world, e, PromptMode::CrossType)?,
            };
            let layout = inputs.layout();
            points
                .iter()
                .map(|&p| {
                    let token =
                        predict(weights, &inputs.h_v, &inputs.prompt, &hooks_at(&layout, p)?)?;
                    Ok((token, is_name(world, e, token)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rate = Vec::with_capacity(points.len());
    let mut outcomes = Vec::with_capacity(points.len() * entities.len());
    for (pi, &p) in points.iter().enumerate() {
        let mut hits = 0usize;
        for (ei, &e) in entities.iter().enumerate() {
            let (token, ok) = per_entity[ei][pi];
            hits += ok as usize;
            outcomes.push(SweepOutcome {
                layer: p,
                entity: e,
                injected: None,
                token,
            });
        }
        rate.push(hits as f64 / entities.len() as f64);
    }
    Ok(SweepCurve {
        experiment,
        x: points.to_vec(),
        series: vec![Series {
            name: "identified".into(),
            values: rate,
        }],
        n: vec![entities.len(); points.len()],
        outcomes,
    })
}

/// Identification rate when image rows are frozen from each source layer
/// `0..end_layer` through `end_layer`.
pub fn freeze_sweep(
    weights: &ModelWeights,
    world: &World,
    entities: &[EntityId],
    end_layer: usize,
    settings: &SweepSettings,
) -> Result<SweepCurve> {
    let layers = weights.num_layers();
    if end_layer == 0 || end_layer >= layers {
        return Err(Error::Config(format!(
            "freeze end layer {end_layer} must be in 1..{layers}"
        )));
    }
    let sources: Vec<usize> = (0..end_layer).collect();
    identification_sweep(
        weights,
        world,
        entities,
        &sources,
        settings,
        stream::FREEZE,
        "freeze".into(),
        |layout, s| freeze_hooks(layout, layers, s, end_layer),
    )
}

/// Identification rate per knockout endpoint.
pub fn knockout_sweep(
    weights: &ModelWeights,
    world: &World,
    entities: &[EntityId],
    direction: KnockoutDirection,
    settings: &SweepSettings,
) -> Result<SweepCurve> {
    let layers = weights.num_layers();
    identification_sweep(
        weights,
        world,
        entities,
        &direction.endpoints(layers),
        settings,
        stream::KNOCKOUT,
        format!("knockout_{}", direction.as_str()),
        |layout, p| Ok(knockout_hooks(layout, &direction.layer_set(p, layers))),
    )
}
