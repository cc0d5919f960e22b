// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation protocol and statistics.
//!
//! Entities first pass an identification gate (the model must name the
//! entity from its image). Only identified entities are then asked every
//! ordinary question twice, once with the entity's name in the prompt and
//! once with the image, and the per-entity accuracies are compared with a
//! Wilcoxon signed-rank test.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::interventions::{
    freeze_hooks, identification_prompt, noisy_image, stream, PromptMode, SweepCurve, SweepSettings,
};
use crate::model::{predict, Hooks, ModelWeights};
use crate::numerics::Matrix;
use crate::world::{render_question, EntityId, EntityType, Modality, RelationId, TokenId, World};

/// Outcome of the identification gate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateResult {
    pub identified: BTreeSet<EntityId>,
    /// Greedy token per entity, in entity order.
    pub predictions: Vec<(EntityId, TokenId)>,
}

impl GateResult {
    pub fn fraction(&self) -> f64 {
        if self.predictions.is_empty() {
            return 0.0;
        }
        self.identified.len() as f64 / self.predictions.len() as f64
    }
}

/// Asks every entity to be named from one noisy rendering of its image.
pub fn identification_gate(
    weights: &ModelWeights,
    world: &World,
    settings: &SweepSettings,
) -> Result<GateResult> {
    let prompt = identification_prompt(world, 0, PromptMode::CrossType)?;
    let predictions: Vec<(EntityId, TokenId)> = world
        .entities
        .par_iter()
        .map(|e| {
            let h_v = noisy_image(weights, world, e.id, settings, &[stream::GATE, e.id as u64])?;
            Ok((e.id, predict(weights, &h_v, &prompt, &Hooks::default())?))
        })
        .collect::<Result<_>>()?;
    let identified = predictions
        .iter()
        .filter(|(e, t)| world.entities[*e as usize].aliases.contains(t))
        .map(|(e, _)| *e)
        .collect();
    Ok(GateResult {
        identified,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub relation: RelationId,
    pub predicted: TokenId,
    pub correct: bool,
}

/// Accuracy of one entity in one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub entity_id: EntityId,
    pub entity_type: EntityType,
    pub modality: Modality,
    pub accuracy: f64,
    pub outcomes: Vec<QuestionOutcome>,
}

/// Asks every ordinary question about every identified entity. Visual
/// questions each get a freshly rendered image.
pub fn eval_qa(
    weights: &ModelWeights,
    world: &World,
    identified: &BTreeSet<EntityId>,
    modality: Modality,
    settings: &SweepSettings,
) -> Result<Vec<QaRecord>> {
    for e in identified {
        world.entity(*e)?;
    }
    let relations: Vec<RelationId> = world.ordinary_relations().map(|r| r.id).collect();
    if relations.is_empty() {
        return Err(Error::Empty("ordinary relations"));
    }
    let no_image = Matrix::zeros(0, weights.d_model());
    let ids: Vec<EntityId> = identified.iter().copied().collect();
    ids.par_iter()
        .map(|&e| {
            let rec = world.entity(e)?;
            let outcomes = relations
                .iter()
                .map(|&r| {
                    let (h_v, prompt) = match modality {
                        Modality::Textual => (
                            no_image.clone(),
                            render_question(world, r, modality, Some(e))?,
                        ),
                        Modality::Visual => (
                            noisy_image(
                                weights,
                                world,
                                e,
                                settings,
                                &[stream::QA, e as u64, r as u64],
                            )?,
                            render_question(world, r, modality, None)?,
                        ),
                    };
                    let predicted = predict(weights, &h_v, &prompt, &Hooks::default())?;
                    Ok(QuestionOutcome {
                        relation: r,
                        predicted,
                        correct: world.accepted_answers(e, r)?.contains(&predicted),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let correct = outcomes.iter().filter(|o| o.correct).count();
            Ok(QaRecord {
                entity_id: e,
                entity_type: rec.entity_type,
                modality,
                accuracy: correct as f64 / outcomes.len() as f64,
                outcomes,
            })
        })
        .collect()
}

/// Paired accuracies of one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub entity_id: EntityId,
    pub entity_type: EntityType,
    pub identified: bool,
    pub img_accuracy: f64,
    pub txt_accuracy: f64,
    pub img_outcomes: Vec<QuestionOutcome>,
    pub txt_outcomes: Vec<QuestionOutcome>,
}

impl EvalRecord {
    /// Record from accuracies alone, for fixtures and external data.
    pub fn from_accuracies(
        entity_id: EntityId,
        entity_type: EntityType,
        img: f64,
        txt: f64,
    ) -> Self {
        Self {
            entity_id,
            entity_type,
            identified: true,
            img_accuracy: img,
            txt_accuracy: txt,
            img_outcomes: Vec::new(),
            txt_outcomes: Vec::new(),
        }
    }
}

/// Joins visual and textual records entity by entity.
pub fn pair_records(img: &[QaRecord], txt: &[QaRecord]) -> Result<Vec<EvalRecord>> {
    let by_id: BTreeMap<EntityId, &QaRecord> = txt.iter().map(|r| (r.entity_id, r)).collect();
    if by_id.len() != img.len() {
        return Err(Error::dim(
            "pair_records",
            format!("{} visual records, {} textual", img.len(), txt.len()),
        ));
    }
    img.iter()
        .map(|i| {
            let t = by_id.get(&i.entity_id).ok_or_else(|| {
                Error::dim(
                    "pair_records",
                    format!("entity {} has no textual record", i.entity_id),
                )
            })?;
            Ok(EvalRecord {
                entity_id: i.entity_id,
                entity_type: i.entity_type,
                identified: true,
                img_accuracy: i.accuracy,
                txt_accuracy: t.accuracy,
                img_outcomes: i.outcomes.clone(),
                txt_outcomes: t.outcomes.clone(),
            })
        })
        .collect()
}

/// Gate, both QA passes and pairing in one call.
pub fn evaluate(
    weights: &ModelWeights,
    world: &World,
    settings: &SweepSettings,
) -> Result<(GateResult, Vec<EvalRecord>)> {
    let gate = identification_gate(weights, world, settings)?;
    let img = eval_qa(weights, world, &gate.identified, Modality::Visual, settings)?;
    let txt = eval_qa(
        weights,
        world,
        &gate.identified,
        Modality::Textual,
        settings,
    )?;
    Ok((gate, pair_records(&img, &txt)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs left after dropping zero differences.
    pub n_nonzero: usize,
    pub p_value: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact up to [`EXACT_LIMIT`] nonzero pairs, normal approximation above.
    Auto,
    Exact,
    Normal,
}

/// Largest nonzero-pair count handled by exact enumeration.
pub const EXACT_LIMIT: usize = 25;

pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    wilcoxon_with(pairs, WilcoxonMethod::Auto)
}

/// Two-sided Wilcoxon signed-rank test on `txt - img` differences. Exact
/// zeros are dropped and tied magnitudes share their average rank.
pub fn wilcoxon_with(pairs: &[(f64, f64)], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if pairs.is_empty() {
        return Err(Error::Empty("wilcoxon pairs"));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::Config("wilcoxon input must be finite".into()));
    }
    let mut diffs: Vec<f64> = pairs
        .iter()
        .map(|(img, txt)| txt - img)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            n_nonzero: 0,
            p_value: 1.0,
            exact: true,
        });
    }
    diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // Doubled ranks keep average ranks integral.
    let mut ranks2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64;
        for r in &mut ranks2[i..=j] {
            *r = avg2;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let wp2: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total2: u64 = ranks2.iter().sum();
    let wm2 = total2 - wp2;
    let w2 = wp2.min(wm2);
    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_LIMIT,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p_value = if exact {
        exact_p(&ranks2, w2)
    } else {
        normal_p(n, tie_term, w2 as f64 / 2.0)
    };
    Ok(WilcoxonResult {
        statistic: w2 as f64 / 2.0,
        w_plus: wp2 as f64 / 2.0,
        w_minus: wm2 as f64 / 2.0,
        n_nonzero: n,
        p_value,
        exact,
    })
}

/// `min(1, 2 P(T <= w))` under the sign-flip null, by counting subsets of
/// the doubled ranks with sum at most `w2`.
fn exact_p(ranks2: &[u64], w2: u64) -> f64 {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0u128; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let below: u128 = counts[..=w2 as usize].iter().sum();
    let all = 1u128 << ranks2.len();
    (2.0 * (below as f64) / (all as f64)).min(1.0)
}

/// Normal approximation with continuity correction and tie-corrected
/// variance.
fn normal_p(n: usize, tie_term: f64, w: f64) -> f64 {
    let n = n as f64;
    let mean = n * (n + 1.0) / 4.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w - mean + 0.5) / var.sqrt();
    if z >= 0.0 {
        return 1.0;
    }
    let normal = Normal::standard();
    (2.0 * normal.cdf(z)).min(1.0)
}

/// Means of one group of identified entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupGap {
    pub n: usize,
    pub img_mean: f64,
    pub txt_mean: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub num_identified: usize,
    pub img_mean: f64,
    pub txt_mean: f64,
    /// `txt_mean - img_mean`.
    pub drop: f64,
    pub wilcoxon: WilcoxonResult,
    pub by_type: BTreeMap<EntityType, GroupGap>,
}

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (sum / n as f64, n)
}

fn group_gap<'a>(records: impl Iterator<Item = &'a EvalRecord> + Clone) -> GroupGap {
    let (img_mean, n) = mean(records.clone().map(|r| r.img_accuracy));
    let (txt_mean, _) = mean(records.map(|r| r.txt_accuracy));
    GroupGap {
        n,
        img_mean,
        txt_mean,
        drop: txt_mean - img_mean,
    }
}

/// Means over identified entities, drop, significance and a per-type
/// breakdown.
pub fn compute_gap(records: &[EvalRecord]) -> Result<GapReport> {
    let kept: Vec<&EvalRecord> = records.iter().filter(|r| r.identified).collect();
    if kept.is_empty() {
        return Err(Error::Empty("compute_gap: no identified entities"));
    }
    for r in &kept {
        for a in [r.img_accuracy, r.txt_accuracy] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!(
                    "entity {} has accuracy {a} outside [0, 1]",
                    r.entity_id
                )));
            }
        }
    }
    let all = group_gap(kept.iter().copied());
    let pairs: Vec<(f64, f64)> = kept
        .iter()
        .map(|r| (r.img_accuracy, r.txt_accuracy))
        .collect();
    let by_type = EntityType::ALL
        .iter()
        .filter_map(|t| {
            let group = kept.iter().copied().filter(|r| r.entity_type == *t);
            (group.clone().next().is_some()).then(|| (*t, group_gap(group)))
        })
        .collect();
    Ok(GapReport {
        num_identified: all.n,
        img_mean: all.img_mean,
        txt_mean: all.txt_mean,
        drop: all.drop,
        wilcoxon: wilcoxon_signed_rank(&pairs)?,
        by_type,
    })
}

/// First layer at which the original entity is named at least as often as
/// the injected one.
pub fn detect_crossover(curve: &SweepCurve) -> Result<Option<usize>> {
    let inj = curve
        .series("injected")
        .ok_or_else(|| Error::Config("curve has no injected series".into()))?;
    let orig = curve
        .series("original")
        .ok_or_else(|| Error::Config("curve has no original series".into()))?;
    Ok(curve
        .x
        .iter()
        .zip(inj.iter().zip(orig))
        .find(|(_, (i, o))| o >= i)
        .map(|(x, _)| *x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyIdRule {
    /// Identification survives freezing from at least one source below the
    /// threshold.
    AnyBelow,
    /// Identification survives freezing from every source below the
    /// threshold.
    AllBelow,
    /// Identification survives freezing from source 0.
    SourceZero,
}

impl EarlyIdRule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AnyBelow => "any_below",
            Self::AllBelow => "all_below",
            Self::SourceZero => "source_zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub threshold: usize,
    pub end_layer: usize,
    pub rule: EarlyIdRule,
    pub early: Vec<EntityId>,
    pub late: Vec<EntityId>,
    /// `None` when the split is empty.
    pub early_gap: Option<GapReport>,
    pub late_gap: Option<GapReport>,
}

/// Splits identified entities by whether identification survives freezing
/// image rows from sources below `threshold` through `end_layer`.
pub fn split_early_late(
    weights: &ModelWeights,
    world: &World,
    records: &[EvalRecord],
    threshold: usize,
    end_layer: usize,
    rule: EarlyIdRule,
    settings: &SweepSettings,
) -> Result<SplitReport> {
    if threshold == 0 || threshold >= end_layer || end_layer >= weights.num_layers() {
        return Err(Error::Config(format!(
            "need 0 < threshold ({threshold}) < end layer ({end_layer}) < {}",
            weights.num_layers()
        )));
    }
    let kept: Vec<&EvalRecord> = records.iter().filter(|r| r.identified).collect();
    let sources: Vec<usize> = match rule {
        EarlyIdRule::SourceZero => vec![0],
        _ => (0..threshold).collect(),
    };
    let early_flags: Vec<bool> = kept
        .par_iter()
        .map(|r| {
            let e = r.entity_id;
            let h_v = noisy_image(weights, world, e, settings, &[stream::FREEZE, e as u64])?;
            let prompt = identification_prompt(world, e, PromptMode::CrossType)?;
            let aliases = &world.entity(e)?.aliases;
            let layout = crate::model::SequenceLayout {
                visual: h_v.rows(),
                textual: prompt.len(),
                generated: 0,
            };
            let survives = |s: usize| -> Result<bool> {
                let hooks = freeze_hooks(&layout, weights.num_layers(), s, end_layer)?;
                Ok(aliases.contains(&predict(weights, &h_v, &prompt, &hooks)?))
            };
            let mut results = sources.iter().map(|s| survives(*s));
            match rule {
                EarlyIdRule::AllBelow => results.try_fold(true, |acc, r| Ok(acc && r?)),
                _ => results.try_fold(false, |acc, r| Ok(acc || r?)),
            }
        })
        .collect::<Result<_>>()?;
    let mut early = Vec::new();
    let mut late = Vec::new();
    let mut early_recs = Vec::new();
    let mut late_recs = Vec::new();
    for (r, is_early) in kept.iter().zip(early_flags) {
        if is_early {
            early.push(r.entity_id);
            early_recs.push((*r).clone());
        } else {
            late.push(r.entity_id);
            late_recs.push((*r).clone());
        }
    }
    let gap = |recs: &[EvalRecord]| -> Result<Option<GapReport>> {
        if recs.is_empty() {
            Ok(None)
        } else {
            compute_gap(recs).map(Some)
        }
    };
    Ok(SplitReport {
        threshold,
        end_layer,
        rule,
        early_gap: gap(&early_recs)?,
        late_gap: gap(&late_recs)?,
        early,
        late,
    })
}

/// One metric value and the number of entities or runs behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub n: usize,
}

pub const REPORT_CSV_HEADER: [&str; 5] = ["experiment", "group", "metric", "value", "n"];

/// Nested `experiment → group → metric` table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Report {
    pub experiments: BTreeMap<String, BTreeMap<String, BTreeMap<String, Metric>>>,
}

impl Report {
    pub fn insert(&mut self, experiment: &str, group: &str, metric: &str, value: f64, n: usize) {
        self.experiments
            .entry(experiment.to_string())
            .or_default()
            .entry(group.to_string())
            .or_default()
            .insert(metric.to_string(), Metric { value, n });
    }

    pub fn get(&self, experiment: &str, group: &str, metric: &str) -> Option<Metric> {
        self.experiments
            .get(experiment)?
            .get(group)?
            .get(metric)
            .copied()
    }

    /// Adds a gap report under `group`, with per-type rows as
    /// `group/type`.
    pub fn add_gap(&mut self, experiment: &str, group: &str, gap: &GapReport) {
        let n = gap.num_identified;
        self.insert(experiment, group, "img_mean", gap.img_mean, n);
        self.insert(experiment, group, "txt_mean", gap.txt_mean, n);
        self.insert(experiment, group, "drop", gap.drop, n);
        self.insert(
            experiment,
            group,
            "wilcoxon_w",
            gap.wilcoxon.statistic,
            gap.wilcoxon.n_nonzero,
        );
        self.insert(
            experiment,
            group,
            "wilcoxon_p",
            gap.wilcoxon.p_value,
            gap.wilcoxon.n_nonzero,
        );
        for (t, g) in &gap.by_type {
            let sub = format!("{group}/{t}");
            self.insert(experiment, &sub, "img_mean", g.img_mean, g.n);
            self.insert(experiment, &sub, "txt_mean", g.txt_mean, g.n);
            self.insert(experiment, &sub, "drop", g.drop, g.n);
        }
    }

    pub fn add_split(&mut self, experiment: &str, split: &SplitReport) {
        self.insert(
            experiment,
            "early",
            "count",
            split.early.len() as f64,
            split.early.len(),
        );
        self.insert(
            experiment,
            "late",
            "count",
            split.late.len() as f64,
            split.late.len(),
        );
        self.insert(
            experiment,
            "all",
            "threshold",
            split.threshold as f64,
            split.early.len() + split.late.len(),
        );
        if let Some(g) = &split.early_gap {
            self.add_gap(experiment, "early", g);
        }
        if let Some(g) = &split.late_gap {
            self.add_gap(experiment, "late", g);
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = REPORT_CSV_HEADER.join(",");
        out.push('\n');
        for (exp, groups) in &self.experiments {
            for (group, metrics) in groups {
                for (metric, m) in metrics {
                    out.push_str(&format!("{exp},{group},{metric},{},{}\n", m.value, m.n));
                }
            }
        }
        out
    }

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
        if header.iter().collect::<Vec<_>>() != REPORT_CSV_HEADER {
            return Err(bad(
                1,
                format!("header must be {}", REPORT_CSV_HEADER.join(",")),
            ));
        }
        let mut report = Report::default();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| bad(line, e.to_string()))?;
            if rec.len() != 5 {
                return Err(bad(line, format!("expected 5 fields, found {}", rec.len())));
            }
            let value: f64 = rec[3]
                .parse()
                .map_err(|_| bad(line, format!("bad value {:?}", &rec[3])))?;
            let n: usize = rec[4]
                .parse()
                .map_err(|_| bad(line, format!("bad count {:?}", &rec[4])))?;
            report.insert(&rec[0], &rec[1], &rec[2], value, n);
        }
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes CSV or JSON depending on the extension (`.json` → JSON).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = if path.extension().is_some_and(|e| e == "json") {
            self.to_json()?
        } else {
            self.to_csv()
        };
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::parse_csv(&text, path)
        }
    }
}
