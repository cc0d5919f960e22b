// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic knowledge universe: typed entities with single-token names,
//! aliases, popularity and facts, plus question templates that refer to an
//! entity either by name (textual) or as "the subject" of an image (visual).
//!
//! Every name and every answer is one vocabulary token, so scoring a
//! prediction is plain set membership.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::{gaussian, Matrix, Rng};

pub type TokenId = u32;
pub type EntityId = u32;
pub type RelationId = u32;

/// The identification relation: its answer is the entity's own name.
pub const ID_RELATION: RelationId = 0;

pub const SCHEMA_VERSION: u32 = 1;

/// Fixed special tokens at the start of every vocabulary.
pub mod special {
    use super::TokenId;

    pub const UNKNOWN: TokenId = 0;
    pub const QMARK: TokenId = 1;
    pub const WHO: TokenId = 2;
    pub const IDENTIFY: TokenId = 3;
    pub const NAME_WORD: TokenId = 4;
    pub const SUBJECT: TokenId = 5;
    pub const PERSON: TokenId = 6;
    pub const PLACE: TokenId = 7;
    pub const PAINTING: TokenId = 8;
    pub const BRAND: TokenId = 9;

    pub const STRINGS: [&str; 10] = [
        "<unknown>",
        "?",
        "who",
        "identify",
        "name",
        "subject",
        "person",
        "place",
        "painting",
        "brand",
    ];
}

const RELATION_WORDS: [&str; 12] = [
    "spouse",
    "parent",
    "sibling",
    "child",
    "birthplace",
    "occupation",
    "employer",
    "country",
    "creator",
    "founder",
    "owner",
    "language",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    Celeb,
    Landmark,
    Painting,
    Brand,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [
        EntityType::Celeb,
        EntityType::Landmark,
        EntityType::Painting,
        EntityType::Brand,
    ];

    /// Type-specific word used in place of "subject" in same-type prompts.
    pub fn reference_token(self) -> TokenId {
        match self {
            EntityType::Celeb => special::PERSON,
            EntityType::Landmark => special::PLACE,
            EntityType::Painting => special::PAINTING,
            EntityType::Brand => special::BRAND,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Celeb => "celeb",
            EntityType::Landmark => "landmark",
            EntityType::Painting => "painting",
            EntityType::Brand => "brand",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Share of entities per type. Defaults to the PopVQA composition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeMix {
    pub celeb: f64,
    pub landmark: f64,
    pub painting: f64,
    pub brand: f64,
}

impl Default for TypeMix {
    fn default() -> Self {
        Self {
            celeb: 0.636,
            landmark: 0.18,
            painting: 0.146,
            brand: 0.038,
        }
    }
}

impl TypeMix {
    pub fn shares(&self) -> [f64; 4] {
        [self.celeb, self.landmark, self.painting, self.brand]
    }

    fn validate(&self) -> Result<()> {
        let s = self.shares();
        if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "type_mix has a negative share: {s:?}"
            )));
        }
        let total: f64 = s.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "type_mix sums to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Entity count per type for `n` entities.
    ///
    /// Each type gets `floor(share·n)` (with a 1e-9 guard against values
    /// such as 0.636·1000 landing just below an integer). The remainder goes
    /// to the type with the largest share, lowest index on ties.
    pub fn counts(&self, n: usize) -> [usize; 4] {
        let shares = self.shares();
        let mut counts = [0usize; 4];
        for (c, s) in counts.iter_mut().zip(shares) {
            *c = (s * n as f64 + 1e-9).floor() as usize;
        }
        let assigned: usize = counts.iter().sum();
        let mut largest = 0;
        for i in 1..4 {
            if shares[i] > shares[largest] {
                largest = i;
            }
        }
        counts[largest] += n.saturating_sub(assigned);
        counts
    }
}

/// One element of a textual template: a literal token or the entity slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(TokenId),
    Entity,
}

const ENTITY_SLOT: &str = "{entity}";

impl Serialize for Slot {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Slot::Token(t) => s.serialize_u32(*t),
            Slot::Entity => s.serialize_str(ENTITY_SLOT),
        }
    }
}

impl<'de> Deserialize<'de> for Slot {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Token(TokenId),
            Marker(String),
        }
        match Raw::deserialize(d)? {
            Raw::Token(t) => Ok(Slot::Token(t)),
            Raw::Marker(m) if m == ENTITY_SLOT => Ok(Slot::Entity),
            Raw::Marker(m) => Err(serde::de::Error::custom(format!(
                "unknown template marker {m:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub id: RelationId,
    /// Token naming the relation inside prompts ("spouse", "name", ...).
    pub word: TokenId,
    pub template_textual: Vec<Slot>,
    pub template_visual: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: EntityId,
    #[serde(rename = "type")]
    pub entity_type: EntityType,
    pub name_token: TokenId,
    /// Accepted answer tokens for this entity's name; includes `name_token`.
    pub aliases: BTreeSet<TokenId>,
    /// Zipf-like score. Stored for completeness; no experiment reads it.
    pub popularity: u64,
    /// Relation id → object token. Contains the identification relation.
    pub facts: BTreeMap<RelationId, TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub entities: Vec<EntityRecord>,
    pub relations: Vec<Relation>,
    pub vocab: Vec<String>,
    pub type_mix: TypeMix,
    /// Visual tokens per image.
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_entities: usize,
    /// Ordinary relations, excluding identification.
    pub num_relations: usize,
    pub num_objects: usize,
    pub max_aliases: usize,
    pub patches: usize,
    pub type_mix: TypeMix,
    pub seed: u64,
    pub vocab_limit: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_entities: 200,
            num_relations: 4,
            num_objects: 48,
            max_aliases: 2,
            patches: 4,
            type_mix: TypeMix::default(),
            seed: 0,
            vocab_limit: 1 << 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Textual,
    Visual,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Textual => "textual",
            Modality::Visual => "visual",
        }
    }
}

/// Stand-in for an input image: `patches × encoder_dim` patch vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub entity_id: EntityId,
    pub patch_vectors: Matrix,
    pub noise_sigma: f64,
}

impl World {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Ordinary relations, i.e. everything except identification.
    pub fn ordinary_relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.iter().filter(|r| r.id != ID_RELATION)
    }

    pub fn entity(&self, id: EntityId) -> Result<&EntityRecord> {
        self.entities
            .get(id as usize)
            .ok_or_else(|| Error::World(format!("unknown entity {id}")))
    }

    pub fn relation(&self, id: RelationId) -> Result<&Relation> {
        self.relations
            .get(id as usize)
            .ok_or_else(|| Error::World(format!("unknown relation {id}")))
    }

    pub fn token_str(&self, t: TokenId) -> &str {
        self.vocab
            .get(t as usize)
            .map_or("<invalid>", String::as_str)
    }

    /// Patch vector width: one identity coordinate per entity plus a
    /// constant frame channel.
    pub fn encoder_dim(&self) -> usize {
        self.entities.len() + 1
    }

    /// Every token that can be a correct answer: names and fact objects.
    pub fn answer_tokens(&self) -> Vec<TokenId> {
        let mut set = BTreeSet::new();
        for e in &self.entities {
            set.extend(e.facts.values().copied());
        }
        set.into_iter().collect()
    }

    /// Tokens accepted as a correct answer for `(entity, relation)`.
    pub fn accepted_answers(
        &self,
        entity: EntityId,
        relation: RelationId,
    ) -> Result<BTreeSet<TokenId>> {
        let e = self.entity(entity)?;
        if relation == ID_RELATION {
            return Ok(e.aliases.clone());
        }
        let obj = e.facts.get(&relation).ok_or_else(|| {
            Error::World(format!(
                "entity {entity} has no fact for relation {relation}"
            ))
        })?;
        Ok(BTreeSet::from([*obj]))
    }

    /// Checks every entity, relation and vocabulary invariant.
    pub fn validate(&self) -> Result<()> {
        validate_header(&self.vocab, &self.relations, &self.type_mix, self.patches)
            .map_err(Error::World)?;
        for (i, e) in self.entities.iter().enumerate() {
            self.validate_entity(i, e).map_err(Error::World)?;
        }
        Ok(())
    }

    fn validate_entity(&self, index: usize, e: &EntityRecord) -> std::result::Result<(), String> {
        let v = self.vocab.len() as TokenId;
        if e.id as usize != index {
            return Err(format!("entity at position {index} has id {}", e.id));
        }
        if e.name_token >= v {
            return Err(format!(
                "entity {}: name token {} out of vocab",
                e.id, e.name_token
            ));
        }
        if !e.aliases.contains(&e.name_token) {
            return Err(format!(
                "entity {}: aliases do not contain the name token",
                e.id
            ));
        }
        if let Some(a) = e.aliases.iter().find(|a| **a >= v) {
            return Err(format!("entity {}: alias {a} out of vocab", e.id));
        }
        if e.popularity == 0 {
            return Err(format!("entity {}: popularity must be positive", e.id));
        }
        if e.facts.get(&ID_RELATION) != Some(&e.name_token) {
            return Err(format!(
                "entity {}: identification fact must equal the name token",
                e.id
            ));
        }
        let ordinary = e.facts.keys().filter(|r| **r != ID_RELATION).count();
        if ordinary < 2 {
            return Err(format!(
                "entity {}: needs at least 2 ordinary facts, has {ordinary}",
                e.id
            ));
        }
        for (r, o) in &e.facts {
            if *r as usize >= self.relations.len() {
                return Err(format!("entity {}: unknown relation {r}", e.id));
            }
            if *o >= v {
                return Err(format!("entity {}: object {o} out of vocab", e.id));
            }
        }
        Ok(())
    }
}

fn validate_header(
    vocab: &[String],
    relations: &[Relation],
    type_mix: &TypeMix,
    patches: usize,
) -> std::result::Result<(), String> {
    for (i, s) in special::STRINGS.iter().enumerate() {
        if vocab.get(i).map(String::as_str) != Some(*s) {
            return Err(format!("vocab[{i}] must be the special token {s:?}"));
        }
    }
    let mut seen = HashSet::new();
    for t in vocab {
        if !seen.insert(t.as_str()) {
            return Err(format!("duplicate vocab entry {t:?}"));
        }
    }
    type_mix.validate().map_err(|e| e.to_string())?;
    if patches == 0 {
        return Err("patches must be at least 1".into());
    }
    if relations.is_empty() || relations[0].word != special::NAME_WORD {
        return Err("relation 0 must be the identification relation".into());
    }
    let v = vocab.len() as TokenId;
    for (i, r) in relations.iter().enumerate() {
        if r.id as usize != i {
            return Err(format!("relation at position {i} has id {}", r.id));
        }
        let slots = r
            .template_textual
            .iter()
            .filter(|s| **s == Slot::Entity)
            .count();
        if slots != 1 {
            return Err(format!(
                "relation {}: textual template has {slots} entity slots",
                r.id
            ));
        }
        if !r.template_visual.contains(&special::SUBJECT) {
            return Err(format!(
                "relation {}: visual template lacks the subject token",
                r.id
            ));
        }
        let literal = r.template_textual.iter().filter_map(|s| match s {
            Slot::Token(t) => Some(*t),
            Slot::Entity => None,
        });
        if let Some(t) = literal
            .chain(r.template_visual.iter().copied())
            .find(|t| *t >= v)
        {
            return Err(format!(
                "relation {}: template token {t} out of vocab",
                r.id
            ));
        }
        if r.word >= v {
            return Err(format!("relation {}: word token out of vocab", r.id));
        }
    }
    Ok(())
}

struct NameMaker<'a> {
    rng: &'a mut Rng,
    used: HashSet<String>,
}

impl NameMaker<'_> {
    const ONSETS: [&'static str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th",
    ];
    const VOWELS: [&'static str; 6] = ["a", "e", "i", "o", "u", "ai"];

    fn word(&mut self, syllables: usize) -> String {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(Self::ONSETS[self.rng.below(Self::ONSETS.len())]);
            w.push_str(Self::VOWELS[self.rng.below(Self::VOWELS.len())]);
        }
        let mut c = w.chars();
        c.next()
            .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
            .unwrap_or_default()
    }

    fn fresh(&mut self, make: impl Fn(&mut Self) -> String) -> String {
        loop {
            let w = make(self);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// Generates a world. Deterministic for a fixed config.
pub fn gen_world(config: &WorldConfig) -> Result<World> {
    if config.num_entities == 0 {
        return Err(Error::Config("num_entities must be at least 1".into()));
    }
    if config.num_relations < 2 {
        return Err(Error::Config("num_relations must be at least 2".into()));
    }
    if config.num_objects == 0 {
        return Err(Error::Config("num_objects must be at least 1".into()));
    }
    if config.patches == 0 {
        return Err(Error::Config("patches must be at least 1".into()));
    }
    config.type_mix.validate()?;
    let worst_case = special::STRINGS.len()
        + config.num_relations
        + config.num_entities * (1 + config.max_aliases)
        + config.num_objects;
    if worst_case > config.vocab_limit {
        return Err(Error::Capacity(format!(
            "{} entities need up to {worst_case} vocab tokens, limit is {}",
            config.num_entities, config.vocab_limit
        )));
    }

    let mut rng = Rng::new(config.seed);
    let mut vocab: Vec<String> = special::STRINGS.iter().map(|s| s.to_string()).collect();
    let mut names = NameMaker {
        rng: &mut rng,
        used: vocab.iter().cloned().collect(),
    };

    let mut relations = vec![Relation {
        id: ID_RELATION,
        word: special::NAME_WORD,
        template_textual: vec![
            Slot::Token(special::IDENTIFY),
            Slot::Token(special::NAME_WORD),
            Slot::Entity,
            Slot::Token(special::QMARK),
        ],
        template_visual: vec![
            special::IDENTIFY,
            special::NAME_WORD,
            special::SUBJECT,
            special::QMARK,
        ],
    }];
    for r in 1..=config.num_relations {
        let word_str = RELATION_WORDS
            .get(r - 1)
            .map(|w| w.to_string())
            .unwrap_or_else(|| format!("relation_{r}"));
        names.used.insert(word_str.clone());
        let word = vocab.len() as TokenId;
        vocab.push(word_str);
        relations.push(Relation {
            id: r as RelationId,
            word,
            template_textual: vec![
                Slot::Token(special::WHO),
                Slot::Token(word),
                Slot::Entity,
                Slot::Token(special::QMARK),
            ],
            template_visual: vec![special::WHO, word, special::SUBJECT, special::QMARK],
        });
    }

    let counts = config.type_mix.counts(config.num_entities);
    let mut types: Vec<EntityType> = EntityType::ALL
        .iter()
        .flat_map(|t| std::iter::repeat(*t).take(counts[t.index()]))
        .collect();
    names.rng.shuffle(&mut types);

    let mut entities = Vec::with_capacity(config.num_entities);
    for (i, ty) in types.into_iter().enumerate() {
        let first = names.fresh(|m| m.word(2));
        let family = names.fresh(|m| m.word(3));
        let full = format!("{first} {family}");
        names.used.insert(full.clone());
        let name_token = vocab.len() as TokenId;
        vocab.push(full);
        let mut aliases = BTreeSet::from([name_token]);
        let n_alias = names.rng.below(config.max_aliases + 1);
        let candidates = [family.clone(), format!("{}. {family}", &first[..1])];
        for alias in candidates.into_iter().take(n_alias) {
            if names.used.insert(alias.clone()) {
                aliases.insert(vocab.len() as TokenId);
                vocab.push(alias);
            }
        }
        entities.push(EntityRecord {
            id: i as EntityId,
            entity_type: ty,
            name_token,
            aliases,
            popularity: (1_000_000 / (i as u64 + 1)).max(1),
            facts: BTreeMap::from([(ID_RELATION, name_token)]),
        });
    }

    let first_object = vocab.len() as TokenId;
    for _ in 0..config.num_objects {
        let w = names.fresh(|m| m.word(2).to_lowercase());
        vocab.push(w);
    }
    for e in &mut entities {
        for r in 1..=config.num_relations {
            let obj = first_object + names.rng.below(config.num_objects) as TokenId;
            e.facts.insert(r as RelationId, obj);
        }
    }

    let world = World {
        entities,
        relations,
        vocab,
        type_mix: config.type_mix,
        patches: config.patches,
    };
    world.validate()?;
    Ok(world)
}

/// Noise-free patch vectors for `entity`: every patch carries the entity's
/// one-hot identity plus a frame channel set to 1.
pub fn clean_encoding(world: &World, entity: EntityId) -> Result<Matrix> {
    world.entity(entity)?;
    let dim = world.encoder_dim();
    let frame = dim - 1;
    Ok(Matrix::from_fn(world.patches, dim, |_, c| {
        if c == entity as usize || c == frame {
            1.0
        } else {
            0.0
        }
    }))
}

/// Clean encoding plus i.i.d. `N(0, sigma²)` noise on every component.
pub fn render_visual(
    world: &World,
    entity: EntityId,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<SyntheticImage> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let clean = clean_encoding(world, entity)?;
    let (rows, cols) = (clean.rows(), clean.cols());
    let noise = gaussian(rng, rows * cols, noise_sigma);
    let data: Vec<f64> = clean
        .into_data()
        .into_iter()
        .zip(noise)
        .map(|(c, n)| c + n)
        .collect();
    Ok(SyntheticImage {
        entity_id: entity,
        patch_vectors: Matrix::new(rows, cols, data)?,
        noise_sigma,
    })
}

/// Renders the prompt tokens for `relation`.
///
/// Textual prompts substitute the entity's name token into the slot and
/// require `entity`. Visual prompts are the template verbatim, referring to
/// the image through the generic subject token.
pub fn render_question(
    world: &World,
    relation: RelationId,
    modality: Modality,
    entity: Option<EntityId>,
) -> Result<Vec<TokenId>> {
    let rel = world.relation(relation)?;
    match modality {
        Modality::Textual => {
            let e = entity
                .ok_or_else(|| Error::World("textual questions need an entity to name".into()))?;
            let name = world.entity(e)?.name_token;
            let slots = rel
                .template_textual
                .iter()
                .filter(|s| **s == Slot::Entity)
                .count();
            if slots != 1 {
                return Err(Error::World(format!(
                    "relation {relation}: textual template has {slots} entity slots"
                )));
            }
            Ok(rel
                .template_textual
                .iter()
                .map(|s| match s {
                    Slot::Token(t) => *t,
                    Slot::Entity => name,
                })
                .collect())
        }
        Modality::Visual => {
            if !rel.template_visual.contains(&special::SUBJECT) {
                return Err(Error::World(format!(
                    "relation {relation}: visual template lacks the subject token"
                )));
            }
            Ok(rel.template_visual.clone())
        }
    }
}

/// Visual prompt with the subject token replaced by the type-specific
/// reference word ("person", "place", ...). Same-type patching uses this;
/// cross-type patching keeps the generic subject token.
pub fn render_question_typed(
    world: &World,
    relation: RelationId,
    entity_type: EntityType,
) -> Result<Vec<TokenId>> {
    let mut tokens = render_question(world, relation, Modality::Visual, None)?;
    for t in &mut tokens {
        if *t == special::SUBJECT {
            *t = entity_type.reference_token();
        }
    }
    Ok(tokens)
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u32,
    vocab: Vec<String>,
    relations: Vec<Relation>,
    type_mix: TypeMix,
    patches: usize,
    num_entities: usize,
}

/// Writes the world as JSON lines: one header line with the vocabulary and
/// relation tables, then one line per entity.
pub fn save_world(world: &World, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let header = Header {
        schema: SCHEMA_VERSION,
        vocab: world.vocab.clone(),
        relations: world.relations.clone(),
        type_mix: world.type_mix,
        patches: world.patches,
        num_entities: world.entities.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for e in &world.entities {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads and validates a world file. Errors name the 1-based line of the
/// first bad record.
pub fn load_world(path: impl AsRef<Path>) -> Result<World> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_world(&text, path)
}

pub fn parse_world(text: &str, path: &Path) -> Result<World> {
    let bad = |record: usize, detail: String| Error::Schema {
        path: path.to_path_buf(),
        record,
        detail,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| bad(1, format!("bad header: {e}")))?;
    if header.schema != SCHEMA_VERSION {
        return Err(bad(1, format!("unsupported schema {}", header.schema)));
    }
    validate_header(
        &header.vocab,
        &header.relations,
        &header.type_mix,
        header.patches,
    )
    .map_err(|d| bad(1, d))?;

    let mut world = World {
        entities: Vec::with_capacity(header.num_entities),
        relations: header.relations,
        vocab: header.vocab,
        type_mix: header.type_mix,
        patches: header.patches,
    };
    for (line, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let e: EntityRecord = serde_json::from_str(l).map_err(|e| bad(line, e.to_string()))?;
        world
            .validate_entity(world.entities.len(), &e)
            .map_err(|d| bad(line, d))?;
        world.entities.push(e);
    }
    if world.entities.len() != header.num_entities {
        return Err(bad(
            world.entities.len() + 2,
            format!(
                "header promises {} entities, file has {} (truncated?)",
                header.num_entities,
                world.entities.len()
            ),
        ));
    }
    if world.entities.is_empty() {
        return Err(bad(1, "world has no entities".into()));
    }
    Ok(world)
}
