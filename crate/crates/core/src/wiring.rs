// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic weight construction.
//!
//! [`wire_model`] builds a model that answers questions in two hops. Image
//! positions are "enriched" by a per-layer counter until a ready flag is set,
//! one attention head copies entity identity from ready image positions to
//! the query position, and an MLP at a later layer turns
//! (identity, relation) into the answer. Every layer at which something
//! happens is a config field, and [`WiringCertificate`] records what each
//! experiment must measure as a consequence.
//!
//! All features are one-hot coordinates in the residual stream; the layout
//! is described by [`SubspacePlan`]. Attention is made exactly hard by
//! scaling scores so that every losing position sits at least `beta` below
//! the winner, which underflows `exp` to zero for `beta = 1000`.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed_image, predict, AttentionHead, Layer, Mlp, ModelParts, ModelWeights};
use crate::numerics::{Matrix, Rng};
use crate::world::{
    clean_encoding, render_question, special, EntityId, Modality, SyntheticImage, TokenId, World,
    ID_RELATION,
};

/// Heads per layer: identity propagation, relation copy, name copy.
pub const NUM_HEADS: usize = 3;
pub const PROP_HEAD: usize = 0;
pub const REL_HEAD: usize = 1;
pub const TEXT_HEAD: usize = 2;

/// Entities whose image needs a different number of enrichment layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichTier {
    pub depth: usize,
    pub entities: Vec<EntityId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WiringConfig {
    pub layers: usize,
    /// MLP layers at image positions before the ready flag is readable.
    pub enrich_layer: usize,
    /// Layer whose head copies identity from image positions.
    pub prop_layer: usize,
    pub rel_layer: usize,
    pub text_layer: usize,
    /// Layer of the (identity, relation) → answer lookup.
    pub fact_layer: usize,
    /// Lookup layer for the identification relation; `layers - 2` if unset.
    pub id_fact_layer: Option<usize>,
    pub echo_strength: f64,
    pub unknown_bias: f64,
    pub beta: f64,
    pub max_mlp_width: usize,
    pub max_text_positions: usize,
    pub enrich_tiers: Vec<EnrichTier>,
}

impl Default for WiringConfig {
    fn default() -> Self {
        Self {
            layers: 32,
            enrich_layer: 6,
            prop_layer: 19,
            rel_layer: 1,
            text_layer: 1,
            fact_layer: 24,
            id_fact_layer: None,
            echo_strength: 0.5,
            unknown_bias: 0.1,
            beta: 1000.0,
            max_mlp_width: 1 << 16,
            max_text_positions: 16,
            enrich_tiers: Vec::new(),
        }
    }
}

/// Default last layer of a freeze: `floor(0.625 * L)`.
pub fn default_freeze_end(layers: usize) -> usize {
    layers * 5 / 8
}

impl WiringConfig {
    pub fn id_fact(&self) -> usize {
        self.id_fact_layer.unwrap_or(self.layers.saturating_sub(2))
    }

    /// Deepest enrichment over all tiers.
    pub fn max_enrich(&self) -> usize {
        self.enrich_tiers
            .iter()
            .map(|t| t.depth)
            .chain([self.enrich_layer])
            .max()
            .unwrap_or(self.enrich_layer)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let l = self.layers;
        if l < 2 {
            return bad(format!("need at least 2 layers, got {l}"));
        }
        if self.enrich_layer > self.prop_layer {
            return bad(format!(
                "enrich layer {} must not exceed prop layer {}",
                self.enrich_layer, self.prop_layer
            ));
        }
        if self.prop_layer >= l {
            return bad(format!("prop layer {} outside {l} layers", self.prop_layer));
        }
        if self.fact_layer >= l || self.id_fact() >= l {
            return bad(format!(
                "fact layers {} and {} must be below {l}",
                self.fact_layer,
                self.id_fact()
            ));
        }
        if self.rel_layer >= self.fact_layer || self.rel_layer >= self.id_fact() {
            return bad(format!(
                "rel layer {} must be below fact layers {} and {}",
                self.rel_layer,
                self.fact_layer,
                self.id_fact()
            ));
        }
        if self.text_layer >= self.fact_layer || self.text_layer >= self.id_fact() {
            return bad(format!(
                "text layer {} must be below fact layers {} and {}",
                self.text_layer,
                self.fact_layer,
                self.id_fact()
            ));
        }
        if !(0.0..1.0).contains(&self.echo_strength) {
            return bad(format!(
                "echo strength must be in [0, 1), got {}",
                self.echo_strength
            ));
        }
        if !(self.unknown_bias > 0.0 && self.unknown_bias < 1.0) {
            return bad(format!(
                "unknown bias must be in (0, 1), got {}",
                self.unknown_bias
            ));
        }
        if self.echo_strength != 0.0 && self.echo_strength <= self.unknown_bias {
            return bad(format!(
                "echo strength {} must be 0 or above the unknown bias {}",
                self.echo_strength, self.unknown_bias
            ));
        }
        if !(self.beta.is_finite() && self.beta >= 750.0) {
            return bad(format!(
                "beta must be finite and at least 750, got {}",
                self.beta
            ));
        }
        if self.max_text_positions < 4 {
            return bad("max text positions must be at least 4".into());
        }
        let mut seen = BTreeSet::new();
        for t in &self.enrich_tiers {
            if t.depth == 0 || t.depth > self.prop_layer {
                return bad(format!(
                    "tier depth {} must be in 1..={}",
                    t.depth, self.prop_layer
                ));
            }
            for e in &t.entities {
                if !seen.insert(*e) {
                    return bad(format!("entity {e} listed in more than one tier"));
                }
            }
        }
        if !self.enrich_tiers.is_empty() && self.enrich_layer == 0 {
            return bad("tiers need a default enrich layer of at least 1".into());
        }
        Ok(())
    }

    /// A valid config with `prop_layer` in `3..=layers-6`, enrichment before
    /// the default freeze end, and the fact lookup after propagation.
    pub fn sample(rng: &mut Rng, layers: usize) -> Result<Self> {
        if layers < 10 {
            return Err(Error::Config(format!(
                "sampling needs at least 10 layers, got {layers}"
            )));
        }
        let prop = 3 + rng.below(layers - 8);
        let enrich_cap = prop.min(default_freeze_end(layers) - 1);
        let enrich = rng.below(enrich_cap + 1);
        let fact = prop + 1 + rng.below(layers - prop - 1);
        let rel = rng.below(prop);
        let text = rng.below(prop);
        let cfg = Self {
            layers,
            enrich_layer: enrich,
            prop_layer: prop,
            rel_layer: rel,
            text_layer: text,
            fact_layer: fact,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Coordinate layout of the residual stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspacePlan {
    pub d: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub answer_tokens: Vec<TokenId>,
}

// Control coordinates.
const ONE: usize = 0;
const SINK: usize = 1;
const QUERY: usize = 2;
const VIS: usize = 3;
const REL: usize = 4;
const NAMEF: usize = 5;
const CNT: usize = 6;
const CTL_DIM: usize = 7;
const READY: usize = CTL_DIM;

impl SubspacePlan {
    fn new(world: &World) -> Self {
        let answer_tokens = world.answer_tokens();
        let e = world.num_entities();
        let r = world.relations.len();
        Self {
            d: CTL_DIM + 1 + r + 2 * e + answer_tokens.len(),
            num_entities: e,
            num_relations: r,
            answer_tokens,
        }
    }

    pub fn ctl(&self) -> Range<usize> {
        0..CTL_DIM
    }

    pub fn stage(&self) -> Range<usize> {
        READY..READY + 1
    }

    pub fn rel_range(&self) -> Range<usize> {
        let s = self.stage().end;
        s..s + self.num_relations
    }

    /// Identity carried by image patches and name tokens.
    pub fn src_range(&self) -> Range<usize> {
        let s = self.rel_range().end;
        s..s + self.num_entities
    }

    /// Identity delivered to the query position.
    pub fn id_range(&self) -> Range<usize> {
        let s = self.src_range().end;
        s..s + self.num_entities
    }

    pub fn ans_range(&self) -> Range<usize> {
        let s = self.id_range().end;
        s..s + self.answer_tokens.len()
    }

    pub fn ranges(&self) -> [(&'static str, Range<usize>); 6] {
        [
            ("S_ctl", self.ctl()),
            ("S_stage", self.stage()),
            ("S_rel", self.rel_range()),
            ("S_src", self.src_range()),
            ("S_id", self.id_range()),
            ("S_ans", self.ans_range()),
        ]
    }

    pub fn ready(&self) -> usize {
        READY
    }

    pub fn rel(&self, r: usize) -> usize {
        self.rel_range().start + r
    }

    pub fn src(&self, e: usize) -> usize {
        self.src_range().start + e
    }

    pub fn id(&self, e: usize) -> usize {
        self.id_range().start + e
    }

    pub fn ans(&self, token: TokenId) -> Option<usize> {
        self.answer_tokens
            .binary_search(&token)
            .ok()
            .map(|i| self.ans_range().start + i)
    }
}

/// What every experiment on a wired model must measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WiringCertificate {
    pub config: WiringConfig,
    pub plan: SubspacePlan,
    pub vocab_size: usize,
    pub patches: usize,
    /// First cross-patch layer at which the original entity wins.
    pub expected_crossover: usize,
    /// Smallest freeze source that keeps identification.
    pub expected_freeze_threshold: usize,
    pub visual_qa_succeeds: bool,
    pub textual_qa_succeeds: bool,
    pub identification_succeeds: bool,
    /// Layers whose knockout alone breaks identification.
    pub knockout_critical: BTreeSet<usize>,
    /// Smallest per-component noise that can flip a threshold on a patch.
    pub noise_margin: f64,
}

/// Deviation of the frame channel at which the enrichment counter stops
/// being exact.
pub const NOISE_MARGIN: f64 = 0.25;

impl WiringCertificate {
    pub fn from_config(
        config: &WiringConfig,
        plan: SubspacePlan,
        vocab_size: usize,
        patches: usize,
    ) -> Self {
        let c = config;
        Self {
            config: c.clone(),
            plan,
            vocab_size,
            patches,
            expected_crossover: c.prop_layer + 1,
            expected_freeze_threshold: c.enrich_layer,
            visual_qa_succeeds: c.fact_layer > c.prop_layer,
            textual_qa_succeeds: c.fact_layer > c.text_layer,
            identification_succeeds: c.id_fact() > c.prop_layer || c.echo_strength > c.unknown_bias,
            knockout_critical: BTreeSet::from([c.prop_layer]),
            noise_margin: NOISE_MARGIN,
        }
    }

    /// Freeze threshold of one entity, honouring enrichment tiers.
    pub fn freeze_threshold(&self, entity: EntityId) -> usize {
        self.config
            .enrich_tiers
            .iter()
            .find(|t| t.entities.contains(&entity))
            .map_or(self.config.enrich_layer, |t| t.depth)
    }
}

// (input weights, bias, output weights)
type Neuron = (Vec<(usize, f64)>, f64, Vec<(usize, f64)>);

#[derive(Default)]
struct MlpBuilder {
    neurons: Vec<Neuron>,
}

impl MlpBuilder {
    fn push(&mut self, input: Vec<(usize, f64)>, bias: f64, output: Vec<(usize, f64)>) {
        self.neurons.push((input, bias, output));
    }

    /// `relu(x) - relu(x - 1)` written to `out`, a step that saturates at 1.
    fn step(&mut self, input: Vec<(usize, f64)>, bias: f64, out: usize) {
        self.push(input.clone(), bias, vec![(out, 1.0)]);
        self.push(input, bias - 1.0, vec![(out, -1.0)]);
    }

    fn build(self, d: usize, layer: usize, cap: usize) -> Result<Mlp> {
        let w = self.neurons.len();
        if w > cap {
            return Err(Error::Capacity(format!(
                "layer {layer} needs {w} MLP neurons but the width limit is {cap}"
            )));
        }
        let mut w_in = Matrix::zeros(d, w);
        let mut w_out = Matrix::zeros(w, d);
        let mut b_in = Vec::with_capacity(w);
        for (j, (input, bias, output)) in self.neurons.into_iter().enumerate() {
            for (c, v) in input {
                w_in.add_at(c, j, v);
            }
            for (c, v) in output {
                w_out.add_at(j, c, v);
            }
            b_in.push(bias);
        }
        Ok(Mlp {
            w_in,
            b_in,
            w_out,
            b_out: vec![0.0; d],
        })
    }
}

/// Head that attends from text positions to the sink and has no output.
fn sink_head(d: usize, beta: f64) -> AttentionHead {
    let mut w_q = Matrix::zeros(d, 1);
    let mut w_k = Matrix::zeros(d, 1);
    w_q.set(ONE, 0, 1.0);
    w_k.set(SINK, 0, beta);
    AttentionHead {
        w_q,
        w_k,
        w_v: Matrix::zeros(d, 0),
        w_o: Matrix::zeros(0, d),
    }
}

/// Head whose query position (the question mark) attends to positions
/// carrying `feature` and copies `from` coordinates onto `to` coordinates.
/// Other text positions attend to the sink.
fn copy_head(d: usize, beta: f64, feature: usize, copies: &[(usize, usize)]) -> AttentionHead {
    let k_scale = beta * 2f64.sqrt();
    let mut w_q = Matrix::zeros(d, 2);
    let mut w_k = Matrix::zeros(d, 2);
    w_q.set(ONE, 0, 1.0);
    w_q.set(QUERY, 1, 1.0);
    w_k.set(SINK, 0, k_scale);
    w_k.set(feature, 1, 2.0 * k_scale);
    let mut w_v = Matrix::zeros(d, copies.len());
    let mut w_o = Matrix::zeros(copies.len(), d);
    for (i, &(from, to)) in copies.iter().enumerate() {
        w_v.set(from, i, 1.0);
        w_o.set(i, to, 1.0);
    }
    AttentionHead { w_q, w_k, w_v, w_o }
}

/// Builds weights implementing the configured two-hop circuit over `world`.
pub fn wire_model(
    world: &World,
    config: &WiringConfig,
) -> Result<(ModelWeights, WiringCertificate)> {
    config.validate()?;
    world.validate()?;
    let e_count = world.num_entities();
    for t in &config.enrich_tiers {
        if let Some(e) = t.entities.iter().find(|e| **e as usize >= e_count) {
            return Err(Error::Config(format!(
                "tier entity {e} not in a world of {e_count}"
            )));
        }
    }
    let plan = SubspacePlan::new(world);
    let d = plan.d;
    let v = world.vocab.len();
    let l_total = config.layers;
    let beta = config.beta;

    // Embeddings.
    let p = world.encoder_dim();
    let mut projection = Matrix::zeros(p, d);
    for e in 0..e_count {
        projection.set(e, plan.src(e), 1.0);
    }
    projection.set(p - 1, VIS, 1.0);
    if config.enrich_layer == 0 {
        projection.set(p - 1, READY, 1.0);
    }
    let mut tok = Matrix::zeros(v, d);
    tok.set(special::QMARK as usize, QUERY, 1.0);
    for r in &world.relations {
        tok.set(r.word as usize, REL, 1.0);
        tok.set(r.word as usize, plan.rel(r.id as usize), 1.0);
    }
    for ent in &world.entities {
        tok.set(ent.name_token as usize, NAMEF, 1.0);
        tok.set(ent.name_token as usize, plan.src(ent.id as usize), 1.0);
    }
    let mut pos = Matrix::zeros(config.max_text_positions, d);
    for j in 0..config.max_text_positions {
        pos.set(j, ONE, 1.0);
        pos.set(j, CNT, -((l_total + 1) as f64));
    }
    pos.set(0, SINK, 1.0);

    // Enrichment groups: depth → entities (None when ungated).
    let mut groups: BTreeMap<usize, Option<Vec<usize>>> = BTreeMap::new();
    if config.enrich_tiers.is_empty() {
        if config.enrich_layer > 0 {
            groups.insert(config.enrich_layer, None);
        }
    } else {
        let tiered: BTreeSet<EntityId> = config
            .enrich_tiers
            .iter()
            .flat_map(|t| t.entities.iter().copied())
            .collect();
        for t in &config.enrich_tiers {
            groups
                .entry(t.depth)
                .or_insert_with(|| Some(Vec::new()))
                .get_or_insert_with(Vec::new)
                .extend(t.entities.iter().map(|e| *e as usize));
        }
        let rest: Vec<usize> = (0..e_count)
            .filter(|e| !tiered.contains(&(*e as EntityId)))
            .collect();
        groups
            .entry(config.enrich_layer)
            .or_insert_with(|| Some(Vec::new()))
            .get_or_insert_with(Vec::new)
            .extend(rest);
    }
    let max_depth = config.max_enrich();
    let id_fact = config.id_fact();

    let mut layers = Vec::with_capacity(l_total);
    for l in 0..l_total {
        let mut heads: Vec<AttentionHead> = (0..NUM_HEADS).map(|_| sink_head(d, beta)).collect();
        if l == config.prop_layer {
            let copies: Vec<_> = (0..e_count).map(|e| (plan.src(e), plan.id(e))).collect();
            heads[PROP_HEAD] = copy_head(d, beta, READY, &copies);
        }
        if l == config.rel_layer {
            let copies: Vec<_> = (0..plan.num_relations)
                .map(|r| (plan.rel(r), plan.rel(r)))
                .collect();
            heads[REL_HEAD] = copy_head(d, beta, REL, &copies);
        }
        if l == config.text_layer {
            let copies: Vec<_> = (0..e_count).map(|e| (plan.src(e), plan.id(e))).collect();
            heads[TEXT_HEAD] = copy_head(d, beta, NAMEF, &copies);
        }

        let mut mlp = MlpBuilder::default();
        if l < max_depth {
            // Counter increment, exact once the frame channel is >= 0.75.
            mlp.step(vec![(VIS, 2.0)], -0.5, CNT);
        }
        for (&depth, members) in &groups {
            if depth == 0 || l != depth - 1 {
                continue;
            }
            // x = 2(CNT - (depth - 1)) + 1, gated by membership when tiered.
            let mut input = vec![(CNT, 2.0)];
            let mut bias = 1.0 - 2.0 * (depth - 1) as f64;
            if let Some(members) = members {
                input.extend(members.iter().map(|e| (plan.src(*e), 2.0)));
                bias -= 2.0;
            }
            mlp.step(input, bias, READY);
        }
        let fact_neuron =
            |mlp: &mut MlpBuilder, e: usize, r: usize, answer: TokenId| -> Result<()> {
                let out = plan.ans(answer).ok_or_else(|| {
                    Error::World(format!("token {answer} missing from answer set"))
                })?;
                mlp.push(
                    vec![(plan.id(e), 1.0), (plan.rel(r), 1.0), (QUERY, 1.0)],
                    -2.5,
                    vec![(out, 2.0)],
                );
                Ok(())
            };
        if l == config.fact_layer {
            for ent in &world.entities {
                for (&r, &obj) in &ent.facts {
                    if r != ID_RELATION {
                        fact_neuron(&mut mlp, ent.id as usize, r as usize, obj)?;
                    }
                }
            }
        }
        if l == id_fact {
            for ent in &world.entities {
                fact_neuron(
                    &mut mlp,
                    ent.id as usize,
                    ID_RELATION as usize,
                    ent.name_token,
                )?;
            }
        }
        layers.push(Layer {
            heads,
            mlp: mlp.build(d, l, config.max_mlp_width)?,
        });
    }

    let mut unembedding = Matrix::zeros(d, v);
    for &t in &plan.answer_tokens {
        let row = plan.ans(t).expect("answer token in plan");
        unembedding.set(row, t as usize, 1.0);
    }
    for ent in &world.entities {
        unembedding.add_at(
            plan.id(ent.id as usize),
            ent.name_token as usize,
            config.echo_strength,
        );
    }
    unembedding.set(ONE, special::UNKNOWN as usize, config.unknown_bias);

    let cert = WiringCertificate::from_config(config, plan, v, world.patches);
    let weights = ModelWeights::new(ModelParts {
        visual_tokens: world.patches,
        encoder_map: Matrix::identity(p),
        projection,
        token_embeddings: tok,
        position_embeddings: pos,
        layers,
        unembedding,
        certificate: Some(cert.clone()),
    })?;
    Ok((weights, cert))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiringCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<WiringCheck>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&WiringCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn clean_image(world: &World, entity: EntityId) -> Result<SyntheticImage> {
    Ok(SyntheticImage {
        entity_id: entity,
        patch_vectors: clean_encoding(world, entity)?,
        noise_sigma: 0.0,
    })
}

/// Clean runs of identification and every question in both modalities,
/// compared against the certificate's predicates. Failures are report
/// entries, never errors.
pub fn verify_wiring(
    weights: &ModelWeights,
    cert: &WiringCertificate,
    world: &World,
) -> VerifyReport {
    let mut report = VerifyReport::default();
    let mut mismatches = Vec::new();
    if world.num_entities() != cert.plan.num_entities {
        mismatches.push(format!(
            "world has {} entities, weights were wired for {}",
            world.num_entities(),
            cert.plan.num_entities
        ));
    }
    if world.relations.len() != cert.plan.num_relations {
        mismatches.push(format!(
            "world has {} relations, weights were wired for {}",
            world.relations.len(),
            cert.plan.num_relations
        ));
    }
    if world.vocab.len() != weights.vocab_size() || weights.d_model() != cert.plan.d {
        mismatches.push(format!(
            "vocabulary {} / width {} do not match weights {} / {}",
            world.vocab.len(),
            cert.plan.d,
            weights.vocab_size(),
            weights.d_model()
        ));
    }
    if world.patches != weights.visual_tokens() || weights.num_layers() != cert.config.layers {
        mismatches.push("patch count or layer count differs from the weights".to_string());
    }
    let capacity_ok = mismatches.is_empty();
    report.checks.push(WiringCheck {
        name: "capacity".into(),
        passed: capacity_ok,
        detail: if capacity_ok {
            "world matches weights".into()
        } else {
            mismatches.join("; ")
        },
    });
    if !capacity_ok {
        return report;
    }

    let mut run = |name: &str, expect: bool, outcomes: Result<Vec<(String, bool)>>| {
        let (passed, detail) = match outcomes {
            Err(e) => (false, format!("run failed: {e}")),
            Ok(o) => {
                let wrong: Vec<&String> = o
                    .iter()
                    .filter(|(_, ok)| *ok != expect)
                    .map(|(k, _)| k)
                    .collect();
                let detail = if wrong.is_empty() {
                    format!(
                        "{} cases, all {}",
                        o.len(),
                        if expect { "correct" } else { "incorrect" }
                    )
                } else {
                    format!(
                        "{} of {} cases disagree with the certificate (expected {}), first: {}",
                        wrong.len(),
                        o.len(),
                        if expect { "correct" } else { "incorrect" },
                        wrong[0]
                    )
                };
                (wrong.is_empty(), detail)
            }
        };
        report.checks.push(WiringCheck {
            name: name.into(),
            passed,
            detail,
        });
    };

    let no_image = Matrix::zeros(0, weights.d_model());
    let ask = |h_v: &Matrix, prompt: &[TokenId], accepted: &BTreeSet<TokenId>| -> Result<bool> {
        Ok(accepted.contains(&predict(weights, h_v, prompt, &Default::default())?))
    };
    let images: Result<Vec<Matrix>> = world
        .entities
        .iter()
        .map(|e| embed_image(weights, &clean_image(world, e.id)?))
        .collect();
    let imgs = match images {
        Ok(i) => i,
        Err(e) => {
            run("identification", cert.identification_succeeds, Err(e));
            return report;
        }
    };

    let identification = (|| {
        let prompt = render_question(world, ID_RELATION, Modality::Visual, None)?;
        world
            .entities
            .iter()
            .map(|e| {
                let ok = ask(
                    &imgs[e.id as usize],
                    &prompt,
                    &world.accepted_answers(e.id, ID_RELATION)?,
                )?;
                Ok((format!("entity {}", e.id), ok))
            })
            .collect()
    })();
    run(
        "identification",
        cert.identification_succeeds,
        identification,
    );

    let visual = (|| {
        let mut out = Vec::new();
        for rel in world.ordinary_relations() {
            let prompt = render_question(world, rel.id, Modality::Visual, None)?;
            for e in &world.entities {
                let ok = ask(
                    &imgs[e.id as usize],
                    &prompt,
                    &world.accepted_answers(e.id, rel.id)?,
                )?;
                out.push((format!("entity {} relation {}", e.id, rel.id), ok));
            }
        }
        Ok(out)
    })();
    run("visual_qa", cert.visual_qa_succeeds, visual);

    let textual = (|| {
        let mut out = Vec::new();
        for rel in world.ordinary_relations() {
            for e in &world.entities {
                let prompt = render_question(world, rel.id, Modality::Textual, Some(e.id))?;
                let ok = ask(&no_image, &prompt, &world.accepted_answers(e.id, rel.id)?)?;
                out.push((format!("entity {} relation {}", e.id, rel.id), ok));
            }
        }
        Ok(out)
    })();
    run("textual_qa", cert.textual_qa_succeeds, textual);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, Hooks, RunTrace};
    use crate::world::{gen_world, WorldConfig};

    fn world(n: usize) -> World {
        gen_world(&WorldConfig {
            num_entities: n,
            num_relations: 3,
            num_objects: 10,
            seed: 3,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn small_config() -> WiringConfig {
        WiringConfig {
            layers: 12,
            enrich_layer: 3,
            prop_layer: 6,
            rel_layer: 1,
            text_layer: 1,
            fact_layer: 8,
            ..WiringConfig::default()
        }
    }

    fn visual_trace(w: &ModelWeights, world: &World, e: EntityId, rel: u32) -> RunTrace {
        let hv = embed_image(w, &clean_image(world, e).unwrap()).unwrap();
        let prompt = render_question(world, rel, Modality::Visual, None).unwrap();
        forward(w, &hv, &prompt, &[], &Hooks::default()).unwrap()
    }

    fn textual_answer(w: &ModelWeights, world: &World, e: EntityId, rel: u32) -> TokenId {
        let prompt = render_question(world, rel, Modality::Textual, Some(e)).unwrap();
        forward(
            w,
            &Matrix::zeros(0, w.d_model()),
            &prompt,
            &[],
            &Hooks::default(),
        )
        .unwrap()
        .predicted()
    }

    #[test]
    fn late_fact_layer_answers_everything() {
        let world = world(20);
        let (w, cert) = wire_model(&world, &small_config()).unwrap();
        assert!(cert.visual_qa_succeeds && cert.textual_qa_succeeds);
        for e in &world.entities {
            for r in world.ordinary_relations() {
                let fact = e.facts[&r.id];
                assert_eq!(visual_trace(&w, &world, e.id, r.id).predicted(), fact);
                assert_eq!(textual_answer(&w, &world, e.id, r.id), fact);
            }
        }
    }

    #[test]
    fn early_fact_layer_echoes_the_subject() {
        let world = world(20);
        let cfg = WiringConfig {
            fact_layer: 4,
            echo_strength: 0.5,
            ..small_config()
        };
        let (w, cert) = wire_model(&world, &cfg).unwrap();
        assert!(!cert.visual_qa_succeeds);
        for e in &world.entities {
            for r in world.ordinary_relations() {
                assert_eq!(textual_answer(&w, &world, e.id, r.id), e.facts[&r.id]);
                assert_eq!(
                    visual_trace(&w, &world, e.id, r.id).predicted(),
                    e.name_token
                );
            }
        }
    }

    #[test]
    fn no_echo_gives_unknown() {
        let world = world(20);
        let cfg = WiringConfig {
            fact_layer: 4,
            echo_strength: 0.0,
            ..small_config()
        };
        let (w, _) = wire_model(&world, &cfg).unwrap();
        for e in world.entities.iter().take(5) {
            let r = world.ordinary_relations().next().unwrap().id;
            assert_eq!(
                visual_trace(&w, &world, e.id, r).predicted(),
                special::UNKNOWN
            );
        }
    }

    #[test]
    fn verify_fresh_wiring_passes() {
        let world = world(20);
        let (w, cert) = wire_model(&world, &small_config()).unwrap();
        let report = verify_wiring(&w, &cert, &world);
        assert!(report.all_passed(), "{report:?}");
        let cfg = WiringConfig {
            fact_layer: 4,
            ..small_config()
        };
        let (w, cert) = wire_model(&world, &cfg).unwrap();
        assert!(verify_wiring(&w, &cert, &world).all_passed());
    }

    #[test]
    fn ablated_prop_head_breaks_identification_only() {
        let world = world(20);
        let (w, cert) = wire_model(&world, &small_config()).unwrap();
        let ablated = w.with_head_zeroed(6, PROP_HEAD).unwrap();
        let report = verify_wiring(&ablated, &cert, &world);
        let id = report.check("identification").unwrap();
        assert!(!id.passed);
        assert!(id.detail.starts_with("20 of 20"), "{}", id.detail);
        assert!(report.check("textual_qa").unwrap().passed);
    }

    #[test]
    fn mismatched_world_fails_capacity() {
        let (w, cert) = wire_model(&world(20), &small_config()).unwrap();
        let report = verify_wiring(&w, &cert, &world(21));
        let cap = report.check("capacity").unwrap();
        assert!(!cap.passed);
        assert!(cap.detail.contains("21 entities"), "{}", cap.detail);
    }

    #[test]
    fn capacity_limit_is_enforced() {
        let world = world(20);
        let cfg = WiringConfig {
            max_mlp_width: 20 * 3 - 1,
            ..small_config()
        };
        assert!(matches!(wire_model(&world, &cfg), Err(Error::Capacity(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = small_config();
        let cases = [
            WiringConfig {
                enrich_layer: 7,
                ..base.clone()
            },
            WiringConfig {
                prop_layer: 12,
                ..base.clone()
            },
            WiringConfig {
                rel_layer: 8,
                ..base.clone()
            },
            WiringConfig {
                text_layer: 9,
                ..base.clone()
            },
            WiringConfig {
                echo_strength: 1.0,
                ..base.clone()
            },
            WiringConfig {
                echo_strength: 0.05,
                ..base.clone()
            },
            WiringConfig {
                echo_strength: -0.1,
                ..base.clone()
            },
            WiringConfig {
                fact_layer: 12,
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        assert!(base.validate().is_ok());
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let c = WiringConfig::default();
        assert_eq!(c.id_fact(), 30);
        assert_eq!(default_freeze_end(32), 20);
        c.validate().unwrap();
        let back: WiringConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: WiringConfig = serde_json::from_str(r#"{"prop_layer": 10}"#).unwrap();
        assert_eq!(partial.prop_layer, 10);
        assert_eq!(partial.layers, 32);
        assert!(serde_json::from_str::<WiringConfig>(r#"{"prop_layr": 10}"#).is_err());
    }

    #[test]
    fn subspaces_are_disjoint_and_fill_d() {
        let world = world(20);
        let plan = SubspacePlan::new(&world);
        let mut covered = vec![0u8; plan.d];
        for (_, r) in plan.ranges() {
            for i in r {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|c| *c == 1));
    }

    #[test]
    fn certificate_follows_config() {
        let world = world(20);
        let (w, cert) = wire_model(&world, &small_config()).unwrap();
        assert_eq!(cert.expected_crossover, 7);
        assert_eq!(cert.expected_freeze_threshold, 3);
        assert_eq!(cert.knockout_critical, BTreeSet::from([6]));
        assert_eq!(w.certificate(), Some(&cert));
    }

    #[test]
    fn sampled_configs_are_valid() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let c = WiringConfig::sample(&mut rng, 32).unwrap();
            assert!((3..=26).contains(&c.prop_layer));
            assert!(c.enrich_layer < default_freeze_end(32));
            assert!(c.fact_layer > c.prop_layer);
        }
    }

    #[test]
    fn single_path_identity_flow() {
        let world = world(20);
        let (w, cert) = wire_model(&world, &small_config()).unwrap();
        let ablated = w.with_head_zeroed(6, PROP_HEAD).unwrap();
        let last_id = |t: &RunTrace, l: usize| -> Vec<f64> {
            let row = t.snapshots[l].row(t.layout.len() - 1);
            row[cert.plan.id_range()].to_vec()
        };
        let a = visual_trace(&ablated, &world, 0, 1);
        let b = visual_trace(&ablated, &world, 7, 1);
        for l in 0..=12 {
            assert_eq!(last_id(&a, l), last_id(&b, l));
        }
        let clean = visual_trace(&w, &world, 7, 1);
        assert_eq!(last_id(&clean, 7)[7], 1.0);
    }

    #[test]
    fn ready_flag_appears_at_enrich_layer() {
        let world = world(20);
        for enrich in [0, 1, 3, 6] {
            let cfg = WiringConfig {
                enrich_layer: enrich,
                ..small_config()
            };
            let (w, cert) = wire_model(&world, &cfg).unwrap();
            let t = visual_trace(&w, &world, 4, 0);
            for l in 0..=12 {
                for p in 0..world.patches {
                    let ready = t.snapshots[l].get(p, cert.plan.ready());
                    if l < enrich {
                        assert_eq!(ready, 0.0, "layer {l}");
                    } else {
                        assert_eq!(ready, 1.0, "layer {l}");
                    }
                }
            }
        }
    }

    #[test]
    fn at_most_one_fact_neuron_fires() {
        let world = world(20);
        let cfg = small_config();
        let (w, _) = wire_model(&world, &cfg).unwrap();
        let mlp = &w.parts().layers[cfg.fact_layer].mlp;
        for e in &world.entities {
            for r in world.ordinary_relations() {
                let t = visual_trace(&w, &world, e.id, r.id);
                let mut pre = t.snapshots[cfg.fact_layer].matmul(&mlp.w_in).unwrap();
                pre.add_row_bias(&mlp.b_in).unwrap();
                let fired = pre.data().iter().filter(|v| **v > 0.0).count();
                assert_eq!(fired, 1, "entity {} relation {}", e.id, r.id);
            }
        }
    }

    #[test]
    fn tiers_gate_the_ready_flag() {
        let world = world(20);
        let cfg = WiringConfig {
            enrich_tiers: vec![EnrichTier {
                depth: 5,
                entities: vec![2, 3],
            }],
            ..small_config()
        };
        let (w, cert) = wire_model(&world, &cfg).unwrap();
        assert_eq!(cert.freeze_threshold(2), 5);
        assert_eq!(cert.freeze_threshold(0), 3);
        let ready_from = |e: EntityId| {
            let t = visual_trace(&w, &world, e, 0);
            (0..=12).find(|l| t.snapshots[*l].get(0, READY) > 0.0)
        };
        assert_eq!(ready_from(2), Some(5));
        assert_eq!(ready_from(0), Some(3));
        assert!(verify_wiring(&w, &cert, &world).all_passed());
    }
}
