// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer over `[visual tokens, text tokens, generated
//! tokens]`.
//!
//! - The visual encoder is a fixed linear map applied per patch, and the
//!   projection maps encoder features into the model width.
//! - Text positions are embedded as `token_embedding + position_embedding`,
//!   indexed from the first text position. Visual rows enter the residual
//!   stream unchanged, so `snapshot[0]` at visual positions is exactly the
//!   projected image.
//! - Each layer is a parallel residual block,
//!   `h[l+1] = h[l] + Σ_heads attn(h[l]) + mlp(h[l])`, with causal attention
//!   scaled by `1/sqrt(d_k)` and a ReLU MLP. There is no normalization.
//!
//! [`Hooks`] can replace rows of `snapshot[l]` before layer `l` runs, pin
//! rows to an earlier snapshot of the same pass, and force individual
//! attention scores to `-inf` at chosen layers (all heads).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax_in_place, Matrix, SparseMatrix};
use crate::wiring::WiringCertificate;
use crate::world::{SyntheticImage, TokenId};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// `d × d_k`
    pub w_q: Matrix,
    /// `d × d_k`
    pub w_k: Matrix,
    /// `d × d_v`
    pub w_v: Matrix,
    /// `d_v × d`
    pub w_o: Matrix,
}

impl AttentionHead {
    /// A head with no query/key/value dimensions; contributes nothing.
    pub fn empty(d: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d, 0),
            w_k: Matrix::zeros(d, 0),
            w_v: Matrix::zeros(d, 0),
            w_o: Matrix::zeros(0, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `d × width`
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    /// `width × d`
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl Mlp {
    pub fn empty(d: usize) -> Self {
        Self {
            w_in: Matrix::zeros(d, 0),
            b_in: Vec::new(),
            w_out: Matrix::zeros(0, d),
            b_out: vec![0.0; d],
        }
    }

    pub fn width(&self) -> usize {
        self.b_in.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub heads: Vec<AttentionHead>,
    pub mlp: Mlp,
}

/// Raw weight blocks. [`ModelWeights::new`] validates them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParts {
    /// Visual tokens per image.
    pub visual_tokens: usize,
    /// Fixed visual encoder `g`, `encoder_dim × encoder_dim`.
    pub encoder_map: Matrix,
    /// Projection `W`, `encoder_dim × d`.
    pub projection: Matrix,
    /// `vocab × d`
    pub token_embeddings: Matrix,
    /// `max_text_positions × d`
    pub position_embeddings: Matrix,
    pub layers: Vec<Layer>,
    /// `d × vocab`
    pub unembedding: Matrix,
    pub certificate: Option<WiringCertificate>,
}

/// Validated, immutable model weights. Share freely across threads.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    parts: ModelParts,
    compiled: Vec<CompiledLayer>,
    encoder_map: SparseMatrix,
    projection: SparseMatrix,
    unembedding: SparseMatrix,
}

impl PartialEq for ModelWeights {
    fn eq(&self, other: &Self) -> bool {
        self.parts == other.parts
    }
}

/// Row-compressed copies of the per-layer matrices. Wired weights are
/// almost entirely zero, so products against them skip most of the work.
#[derive(Debug, Clone)]
struct CompiledLayer {
    heads: Vec<CompiledHead>,
    w_in: SparseMatrix,
    w_out: SparseMatrix,
    /// Nonzero entries of the MLP output bias.
    b_out: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
struct CompiledHead {
    w_q: SparseMatrix,
    w_k: SparseMatrix,
    w_v: SparseMatrix,
    w_o: SparseMatrix,
}

fn compile(layers: &[Layer]) -> Vec<CompiledLayer> {
    layers
        .iter()
        .map(|l| CompiledLayer {
            heads: l
                .heads
                .iter()
                .map(|h| CompiledHead {
                    w_q: SparseMatrix::from_dense(&h.w_q),
                    w_k: SparseMatrix::from_dense(&h.w_k),
                    w_v: SparseMatrix::from_dense(&h.w_v),
                    w_o: SparseMatrix::from_dense(&h.w_o),
                })
                .collect(),
            w_in: SparseMatrix::from_dense(&l.mlp.w_in),
            w_out: SparseMatrix::from_dense(&l.mlp.w_out),
            b_out: l
                .mlp
                .b_out
                .iter()
                .copied()
                .enumerate()
                .filter(|(_, b)| *b != 0.0)
                .collect(),
        })
        .collect()
}

fn check_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::dim(
            "ModelWeights::new",
            format!(
                "{name} is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            ),
        ));
    }
    if !m.is_finite() {
        return Err(Error::dim(
            "ModelWeights::new",
            format!("{name} has non-finite values"),
        ));
    }
    Ok(())
}

impl ModelWeights {
    pub fn new(parts: ModelParts) -> Result<Self> {
        let p = parts.encoder_map.rows();
        let d = parts.projection.cols();
        let v = parts.token_embeddings.rows();
        check_shape("encoder_map", &parts.encoder_map, p, p)?;
        check_shape("projection", &parts.projection, p, d)?;
        check_shape("token_embeddings", &parts.token_embeddings, v, d)?;
        let max_pos = parts.position_embeddings.rows();
        check_shape(
            "position_embeddings",
            &parts.position_embeddings,
            max_pos,
            d,
        )?;
        check_shape("unembedding", &parts.unembedding, d, v)?;
        if v == 0 {
            return Err(Error::dim("ModelWeights::new", "vocabulary is empty"));
        }
        let heads = parts.layers.first().map_or(0, |l| l.heads.len());
        for (li, layer) in parts.layers.iter().enumerate() {
            if layer.heads.len() != heads {
                return Err(Error::dim(
                    "ModelWeights::new",
                    format!(
                        "layer {li} has {} heads, expected {heads}",
                        layer.heads.len()
                    ),
                ));
            }
            for (hi, h) in layer.heads.iter().enumerate() {
                let dk = h.w_q.cols();
                let dv = h.w_v.cols();
                check_shape(&format!("layer {li} head {hi} w_q"), &h.w_q, d, dk)?;
                check_shape(&format!("layer {li} head {hi} w_k"), &h.w_k, d, dk)?;
                check_shape(&format!("layer {li} head {hi} w_v"), &h.w_v, d, dv)?;
                check_shape(&format!("layer {li} head {hi} w_o"), &h.w_o, dv, d)?;
            }
            let w = layer.mlp.width();
            check_shape(&format!("layer {li} mlp w_in"), &layer.mlp.w_in, d, w)?;
            check_shape(&format!("layer {li} mlp w_out"), &layer.mlp.w_out, w, d)?;
            if layer.mlp.b_out.len() != d {
                return Err(Error::dim(
                    "ModelWeights::new",
                    format!(
                        "layer {li} mlp b_out has {} entries, expected {d}",
                        layer.mlp.b_out.len()
                    ),
                ));
            }
            if layer
                .mlp
                .b_in
                .iter()
                .chain(&layer.mlp.b_out)
                .any(|x| !x.is_finite())
            {
                return Err(Error::dim(
                    "ModelWeights::new",
                    format!("layer {li} mlp bias not finite"),
                ));
            }
        }
        let compiled = compile(&parts.layers);
        let encoder_map = SparseMatrix::from_dense(&parts.encoder_map);
        let projection = SparseMatrix::from_dense(&parts.projection);
        let unembedding = SparseMatrix::from_dense(&parts.unembedding);
        Ok(Self {
            parts,
            compiled,
            encoder_map,
            projection,
            unembedding,
        })
    }

    pub fn parts(&self) -> &ModelParts {
        &self.parts
    }

    pub fn into_parts(self) -> ModelParts {
        self.parts
    }

    pub fn num_layers(&self) -> usize {
        self.parts.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.parts.projection.cols()
    }

    pub fn num_heads(&self) -> usize {
        self.parts.layers.first().map_or(0, |l| l.heads.len())
    }

    pub fn vocab_size(&self) -> usize {
        self.parts.token_embeddings.rows()
    }

    pub fn encoder_dim(&self) -> usize {
        self.parts.encoder_map.rows()
    }

    pub fn visual_tokens(&self) -> usize {
        self.parts.visual_tokens
    }

    pub fn max_text_positions(&self) -> usize {
        self.parts.position_embeddings.rows()
    }

    pub fn certificate(&self) -> Option<&WiringCertificate> {
        self.parts.certificate.as_ref()
    }

    /// Copy of these weights with one head's output matrix zeroed.
    pub fn with_head_zeroed(&self, layer: usize, head: usize) -> Result<Self> {
        let mut parts = self.parts.clone();
        let h = parts
            .layers
            .get_mut(layer)
            .and_then(|l| l.heads.get_mut(head))
            .ok_or_else(|| Error::Hook(format!("no head {head} at layer {layer}")))?;
        h.w_o = Matrix::zeros(h.w_o.rows(), h.w_o.cols());
        Self::new(parts)
    }
}

/// Role of a sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Visual,
    Textual,
    Generated,
}

/// Visual positions come first, then the prompt, then generated tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub visual: usize,
    pub textual: usize,
    pub generated: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.visual + self.textual + self.generated
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visual_positions(&self) -> std::ops::Range<usize> {
        0..self.visual
    }

    /// Textual and generated positions, i.e. everything after the image.
    pub fn non_visual_positions(&self) -> std::ops::Range<usize> {
        self.visual..self.len()
    }

    pub fn role(&self, pos: usize) -> Option<Role> {
        if pos < self.visual {
            Some(Role::Visual)
        } else if pos < self.visual + self.textual {
            Some(Role::Textual)
        } else if pos < self.len() {
            Some(Role::Generated)
        } else {
            None
        }
    }
}

/// Replace rows of `snapshot[layer]` before layer `layer` runs.
#[derive(Debug, Clone, PartialEq)]
pub struct StateOverride {
    pub layer: usize,
    pub positions: Vec<usize>,
    /// One row per position, `d` columns.
    pub values: Matrix,
}

/// Pin rows to their value in `snapshot[source]` of the same pass for every
/// layer in `(source, end]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pin {
    pub positions: Vec<usize>,
    pub source: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hooks {
    pub state_overrides: Vec<StateOverride>,
    pub pins: Vec<Pin>,
    /// Layer → `(query, key)` pairs forced to `-inf` in every head.
    pub mask_overrides: BTreeMap<usize, BTreeSet<(usize, usize)>>,
}

impl Hooks {
    pub fn is_empty(&self) -> bool {
        self.state_overrides.is_empty() && self.pins.is_empty() && self.mask_overrides.is_empty()
    }

    fn validate(&self, layout: &SequenceLayout, layers: usize, d: usize) -> Result<()> {
        let n = layout.len();
        let check_positions = |what: &str, ps: &[usize]| -> Result<()> {
            if let Some(p) = ps.iter().find(|p| **p >= n) {
                return Err(Error::Hook(format!(
                    "{what}: position {p} outside sequence of {n}"
                )));
            }
            Ok(())
        };
        for o in &self.state_overrides {
            if o.layer >= layers {
                return Err(Error::Hook(format!(
                    "state override at layer {} but model has {layers} layers",
                    o.layer
                )));
            }
            check_positions("state override", &o.positions)?;
            if o.values.rows() != o.positions.len() || o.values.cols() != d {
                return Err(Error::Hook(format!(
                    "state override at layer {}: {} positions but values are {}x{}, width {d}",
                    o.layer,
                    o.positions.len(),
                    o.values.rows(),
                    o.values.cols()
                )));
            }
            if !o.values.is_finite() {
                return Err(Error::Hook("state override values must be finite".into()));
            }
        }
        for p in &self.pins {
            if p.source > p.end || p.end >= layers {
                return Err(Error::Hook(format!(
                    "pin range ({}, {}] invalid for {layers} layers",
                    p.source, p.end
                )));
            }
            check_positions("pin", &p.positions)?;
        }
        for (layer, pairs) in &self.mask_overrides {
            if *layer >= layers {
                return Err(Error::Hook(format!(
                    "mask override at layer {layer} but model has {layers} layers"
                )));
            }
            if let Some((q, k)) = pairs.iter().find(|(q, k)| *q >= n || *k >= n) {
                return Err(Error::Hook(format!(
                    "mask override ({q}, {k}) outside sequence of {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub layout: SequenceLayout,
    /// `L + 1` residual snapshots; `snapshots[l]` is the input of layer `l`
    /// after any hooks were applied.
    pub snapshots: Vec<Matrix>,
    /// Vocabulary scores at the last position.
    pub logits: Vec<f64>,
    /// `attention[layer][head]`, `seq × seq`, when requested.
    pub attention: Option<Vec<Vec<Matrix>>>,
}

impl RunTrace {
    /// Greedy prediction at the last position.
    pub fn predicted(&self) -> TokenId {
        argmax(&self.logits).map(|i| i as TokenId).unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.snapshots.len() - 1
    }

    /// Rows of `snapshot[layer]` at visual positions.
    pub fn visual_rows(&self, layer: usize) -> Matrix {
        let pos: Vec<usize> = self.layout.visual_positions().collect();
        self.snapshots[layer].select_rows(&pos)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub record_attention: bool,
}

/// `Z_v = X_v · g`, one row per patch.
pub fn encode_image(weights: &ModelWeights, image: &SyntheticImage) -> Result<Matrix> {
    let x = &image.patch_vectors;
    if x.rows() != weights.visual_tokens() {
        return Err(Error::dim(
            "encode_image",
            format!(
                "image has {} patches, model expects {}",
                x.rows(),
                weights.visual_tokens()
            ),
        ));
    }
    if x.cols() != weights.encoder_dim() {
        return Err(Error::dim(
            "encode_image",
            format!(
                "patch width {} but encoder dim {}",
                x.cols(),
                weights.encoder_dim()
            ),
        ));
    }
    weights.encoder_map.left_mul(x)
}

/// `H_v = Z_v · W`.
pub fn project_visual(weights: &ModelWeights, z: &Matrix) -> Result<Matrix> {
    if z.cols() != weights.encoder_dim() {
        return Err(Error::dim(
            "project_visual",
            format!(
                "encoder output width {} but encoder dim {}",
                z.cols(),
                weights.encoder_dim()
            ),
        ));
    }
    weights.projection.left_mul(z)
}

/// Image → projected visual tokens.
pub fn embed_image(weights: &ModelWeights, image: &SyntheticImage) -> Result<Matrix> {
    project_visual(weights, &encode_image(weights, image)?)
}

pub fn forward(
    weights: &ModelWeights,
    h_v: &Matrix,
    text: &[TokenId],
    generated: &[TokenId],
    hooks: &Hooks,
) -> Result<RunTrace> {
    forward_with(
        weights,
        h_v,
        text,
        generated,
        hooks,
        ForwardOptions::default(),
    )
}

/// Greedy next token only. Same arithmetic as [`forward`], without keeping
/// the per-layer snapshots.
pub fn predict(
    weights: &ModelWeights,
    h_v: &Matrix,
    text: &[TokenId],
    hooks: &Hooks,
) -> Result<TokenId> {
    Ok(run_layers(
        weights,
        h_v,
        text,
        &[],
        hooks,
        ForwardOptions::default(),
        false,
    )?
    .predicted())
}

pub fn forward_with(
    weights: &ModelWeights,
    h_v: &Matrix,
    text: &[TokenId],
    generated: &[TokenId],
    hooks: &Hooks,
    opts: ForwardOptions,
) -> Result<RunTrace> {
    run_layers(weights, h_v, text, generated, hooks, opts, true)
}

fn run_layers(
    weights: &ModelWeights,
    h_v: &Matrix,
    text: &[TokenId],
    generated: &[TokenId],
    hooks: &Hooks,
    opts: ForwardOptions,
    keep_snapshots: bool,
) -> Result<RunTrace> {
    let p = &weights.parts;
    let d = weights.d_model();
    let n_layers = weights.num_layers();
    if h_v.rows() > 0 && h_v.cols() != d {
        return Err(Error::dim(
            "forward",
            format!("visual tokens have width {}, model width {d}", h_v.cols()),
        ));
    }
    let layout = SequenceLayout {
        visual: h_v.rows(),
        textual: text.len(),
        generated: generated.len(),
    };
    if text.is_empty() && generated.is_empty() {
        return Err(Error::Empty("forward (no text positions)"));
    }
    if text.len() + generated.len() > weights.max_text_positions() {
        return Err(Error::dim(
            "forward",
            format!(
                "{} text positions but only {} position embeddings",
                text.len() + generated.len(),
                weights.max_text_positions()
            ),
        ));
    }
    let vocab = weights.vocab_size() as TokenId;
    if let Some(t) = text.iter().chain(generated).find(|t| **t >= vocab) {
        return Err(Error::dim(
            "forward",
            format!("token {t} outside vocabulary of {vocab}"),
        ));
    }
    hooks.validate(&layout, n_layers, d)?;

    let seq = layout.len();
    let mut h = Matrix::zeros(seq, d);
    for i in 0..layout.visual {
        h.row_mut(i).copy_from_slice(h_v.row(i));
    }
    for (j, t) in text.iter().chain(generated).enumerate() {
        let row = h.row_mut(layout.visual + j);
        let emb = p.token_embeddings.row(*t as usize);
        let pos = p.position_embeddings.row(j);
        for ((r, e), q) in row.iter_mut().zip(emb).zip(pos) {
            *r = e + q;
        }
    }

    let mut snapshots = Vec::with_capacity(if keep_snapshots { n_layers + 1 } else { 0 });
    let mut scratch = if keep_snapshots {
        Matrix::zeros(0, 0)
    } else {
        Matrix::zeros(seq, d)
    };
    let mut attention = opts.record_attention.then(|| Vec::with_capacity(n_layers));
    let mut pinned: Vec<Option<Matrix>> = vec![None; hooks.pins.len()];

    for (l, (layer, fast)) in p.layers.iter().zip(&weights.compiled).enumerate() {
        for o in hooks.state_overrides.iter().filter(|o| o.layer == l) {
            for (k, &pos) in o.positions.iter().enumerate() {
                h.row_mut(pos).copy_from_slice(o.values.row(k));
            }
        }
        for (pin, saved) in hooks.pins.iter().zip(pinned.iter_mut()) {
            if l == pin.source {
                *saved = Some(h.select_rows(&pin.positions));
            } else if l > pin.source && l <= pin.end {
                if let Some(rows) = saved {
                    for (k, &pos) in pin.positions.iter().enumerate() {
                        h.row_mut(pos).copy_from_slice(rows.row(k));
                    }
                }
            }
        }
        // Every block reads the layer input and adds into `h`.
        let input = if keep_snapshots {
            snapshots.push(h.clone());
            &snapshots[l]
        } else {
            scratch.data_mut().copy_from_slice(h.data());
            &scratch
        };

        let masks = hooks.mask_overrides.get(&l);
        let mut layer_attn = Vec::new();
        for head in &fast.heads {
            if let Some(probs) = attend(head, input, masks, opts.record_attention, &mut h)? {
                layer_attn.push(probs);
            }
        }
        if let Some(a) = attention.as_mut() {
            a.push(layer_attn);
        }
        if layer.mlp.width() > 0 {
            let mut pre = fast.w_in.left_mul(input)?;
            pre.add_row_bias(&layer.mlp.b_in)?;
            for x in pre.data_mut() {
                *x = x.max(0.0);
            }
            fast.w_out.left_mul_add(&pre, &mut h)?;
        }
        for i in 0..seq {
            let row = h.row_mut(i);
            for &(c, b) in &fast.b_out {
                row[c] += b;
            }
        }
    }

    let last = Matrix::new(1, d, h.row(seq - 1).to_vec())?;
    let logits = weights.unembedding.left_mul(&last)?.into_data();
    if keep_snapshots {
        snapshots.push(h);
    }
    Ok(RunTrace {
        layout,
        snapshots,
        logits,
        attention,
    })
}

/// One head: adds its output to `delta` and returns the attention
/// probabilities when `record` is set.
fn attend(
    head: &CompiledHead,
    h: &Matrix,
    masks: Option<&BTreeSet<(usize, usize)>>,
    record: bool,
    delta: &mut Matrix,
) -> Result<Option<Matrix>> {
    let seq = h.rows();
    let dk = head.w_q.cols();
    let dv = head.w_v.cols();
    if dv == 0 && !record {
        return Ok(None);
    }
    let mut scores = Matrix::zeros(seq, seq);
    if dk > 0 {
        let q = head.w_q.left_mul(h)?;
        let k = head.w_k.left_mul(h)?;
        let scale = 1.0 / (dk as f64).sqrt();
        for i in 0..seq {
            let qi = q.row(i);
            for j in 0..=i {
                let s: f64 = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
                scores.set(i, j, s * scale);
            }
        }
    }
    for i in 0..seq {
        for j in (i + 1)..seq {
            scores.set(i, j, f64::NEG_INFINITY);
        }
    }
    if let Some(masks) = masks {
        for &(qi, kj) in masks {
            scores.set(qi, kj, f64::NEG_INFINITY);
        }
    }
    for i in 0..seq {
        softmax_in_place(scores.row_mut(i));
    }
    if dv > 0 {
        let v = head.w_v.left_mul(h)?;
        head.w_o.left_mul_add(&scores.matmul(&v)?, delta)?;
    }
    Ok(record.then_some(scores))
}

/// Tokens and traces of a greedy decode.
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub traces: Vec<RunTrace>,
}

/// Greedy decoding of `max_new` tokens. Each step re-runs the full prefix.
pub fn generate(
    weights: &ModelWeights,
    h_v: &Matrix,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Generation> {
    generate_with(weights, h_v, prompt, max_new, |_| Ok(Hooks::default()))
}

/// Greedy decoding where `hooks_for` builds the hooks for each step's layout.
pub fn generate_with(
    weights: &ModelWeights,
    h_v: &Matrix,
    prompt: &[TokenId],
    max_new: usize,
    hooks_for: impl Fn(&SequenceLayout) -> Result<Hooks>,
) -> Result<Generation> {
    if max_new == 0 {
        return Err(Error::Config("max_new must be at least 1".into()));
    }
    let mut tokens = Vec::with_capacity(max_new);
    let mut traces = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let layout = SequenceLayout {
            visual: h_v.rows(),
            textual: prompt.len(),
            generated: tokens.len(),
        };
        let hooks = hooks_for(&layout)?;
        let trace = forward(weights, h_v, prompt, &tokens, &hooks)?;
        tokens.push(trace.predicted());
        traces.push(trace);
    }
    Ok(Generation { tokens, traces })
}

const MAGIC: &[u8; 8] = b"VLMFLOW\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BlockShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    visual_tokens: usize,
    layers: usize,
    heads: usize,
    blocks: Vec<BlockShape>,
    certificate: Option<WiringCertificate>,
}

fn blocks(parts: &ModelParts) -> Vec<(String, Matrix)> {
    let mut out = vec![
        ("encoder_map".to_string(), parts.encoder_map.clone()),
        ("projection".to_string(), parts.projection.clone()),
        (
            "token_embeddings".to_string(),
            parts.token_embeddings.clone(),
        ),
        (
            "position_embeddings".to_string(),
            parts.position_embeddings.clone(),
        ),
    ];
    for (l, layer) in parts.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            out.push((format!("l{l}.h{h}.w_q"), head.w_q.clone()));
            out.push((format!("l{l}.h{h}.w_k"), head.w_k.clone()));
            out.push((format!("l{l}.h{h}.w_v"), head.w_v.clone()));
            out.push((format!("l{l}.h{h}.w_o"), head.w_o.clone()));
        }
        let m = &layer.mlp;
        out.push((format!("l{l}.mlp.w_in"), m.w_in.clone()));
        out.push((
            format!("l{l}.mlp.b_in"),
            Matrix::new(1, m.b_in.len(), m.b_in.clone()).unwrap_or_else(|_| Matrix::zeros(1, 0)),
        ));
        out.push((format!("l{l}.mlp.w_out"), m.w_out.clone()));
        out.push((
            format!("l{l}.mlp.b_out"),
            Matrix::new(1, m.b_out.len(), m.b_out.clone()).unwrap_or_else(|_| Matrix::zeros(1, 0)),
        ));
    }
    out.push(("unembedding".to_string(), parts.unembedding.clone()));
    out
}

/// Binary container: magic, format version, JSON header with block shapes
/// and the wiring certificate, then every block as little-endian `f64` in
/// row-major order.
pub fn save_model(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let blocks = blocks(&weights.parts);
    let header = ModelHeader {
        version: MODEL_FORMAT_VERSION,
        visual_tokens: weights.visual_tokens(),
        layers: weights.num_layers(),
        heads: weights.num_heads(),
        blocks: blocks
            .iter()
            .map(|(name, m)| BlockShape {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        certificate: weights.parts.certificate.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let total: usize = blocks.iter().map(|(_, m)| m.data().len()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + header_json.len() + total * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, m) in &blocks {
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}

fn decode_model(bytes: &[u8], path: &Path) -> Result<ModelWeights> {
    let bad = |record: usize, detail: String| Error::Schema {
        path: path.to_path_buf(),
        record,
        detail,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(0, "not a vlmflow model file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != MODEL_FORMAT_VERSION {
        return Err(bad(
            0,
            format!("unsupported model format version {version}"),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| bad(0, "truncated header".into()))?;
    let header: ModelHeader =
        serde_json::from_slice(body).map_err(|e| bad(0, format!("bad header: {e}")))?;
    let mut offset = 20 + hlen;
    let mut mats = Vec::with_capacity(header.blocks.len());
    for (i, b) in header.blocks.iter().enumerate() {
        let n = b.rows * b.cols;
        let raw = bytes
            .get(offset..offset + n * 8)
            .ok_or_else(|| bad(i + 1, format!("block {} truncated", b.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        mats.push(Matrix::new(b.rows, b.cols, data)?);
        offset += n * 8;
    }
    if offset != bytes.len() {
        return Err(bad(
            header.blocks.len(),
            "trailing bytes after last block".into(),
        ));
    }
    let expected = 4 + header.layers * (header.heads * 4 + 4) + 1;
    if mats.len() != expected {
        return Err(bad(
            0,
            format!("expected {expected} blocks, found {}", mats.len()),
        ));
    }
    let mut it = mats.into_iter();
    let mut next = || it.next().expect("count checked");
    let encoder_map = next();
    let projection = next();
    let token_embeddings = next();
    let position_embeddings = next();
    let mut layers = Vec::with_capacity(header.layers);
    for _ in 0..header.layers {
        let heads = (0..header.heads)
            .map(|_| AttentionHead {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
            })
            .collect();
        let w_in = next();
        let b_in = next().into_data();
        let w_out = next();
        let b_out = next().into_data();
        layers.push(Layer {
            heads,
            mlp: Mlp {
                w_in,
                b_in,
                w_out,
                b_out,
            },
        });
    }
    let unembedding = next();
    ModelWeights::new(ModelParts {
        visual_tokens: header.visual_tokens,
        encoder_map,
        projection,
        token_embeddings,
        position_embeddings,
        layers,
        unembedding,
        certificate: header.certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_fn(r, c, |_, _| (rng.uniform() * 2.0 - 1.0) * scale)
    }

    /// Small random model: d=6, encoder 3, vocab 5, 2 layers, 2 heads.
    pub(crate) fn random_model(seed: u64) -> ModelWeights {
        let mut rng = Rng::new(seed);
        let (d, p, v) = (6, 3, 5);
        let layers = (0..2)
            .map(|_| Layer {
                heads: (0..2)
                    .map(|_| AttentionHead {
                        w_q: random(&mut rng, d, 2, 0.5),
                        w_k: random(&mut rng, d, 2, 0.5),
                        w_v: random(&mut rng, d, 3, 0.5),
                        w_o: random(&mut rng, 3, d, 0.5),
                    })
                    .collect(),
                mlp: Mlp {
                    w_in: random(&mut rng, d, 4, 0.5),
                    b_in: vec![0.1, -0.1, 0.0, 0.2],
                    w_out: random(&mut rng, 4, d, 0.5),
                    b_out: vec![0.0; d],
                },
            })
            .collect();
        ModelWeights::new(ModelParts {
            visual_tokens: 2,
            encoder_map: random(&mut rng, p, p, 1.0),
            projection: random(&mut rng, p, d, 1.0),
            token_embeddings: random(&mut rng, v, d, 1.0),
            position_embeddings: random(&mut rng, 8, d, 0.3),
            layers,
            unembedding: random(&mut rng, d, v, 1.0),
            certificate: None,
        })
        .unwrap()
    }

    fn image(rng: &mut Rng, n: usize, p: usize) -> SyntheticImage {
        SyntheticImage {
            entity_id: 0,
            patch_vectors: random(rng, n, p, 1.0),
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn zero_weights_pass_residual_through() {
        let mut parts = random_model(1).into_parts();
        for layer in &mut parts.layers {
            for h in &mut layer.heads {
                *h = AttentionHead {
                    w_q: Matrix::zeros(6, 2),
                    w_k: Matrix::zeros(6, 2),
                    w_v: Matrix::zeros(6, 3),
                    w_o: Matrix::zeros(3, 6),
                };
            }
            layer.mlp = Mlp {
                w_in: Matrix::zeros(6, 4),
                b_in: vec![0.0; 4],
                w_out: Matrix::zeros(4, 6),
                b_out: vec![0.0; 6],
            };
        }
        let w = ModelWeights::new(parts).unwrap();
        let mut rng = Rng::new(2);
        let hv = embed_image(&w, &image(&mut rng, 2, 3)).unwrap();
        let t = forward(&w, &hv, &[1, 2, 3], &[], &Hooks::default()).unwrap();
        for s in &t.snapshots {
            assert_eq!(s, &t.snapshots[0]);
        }
    }

    #[test]
    fn copy_previous_token_head() {
        // d = 6: coordinates 0..3 hold token content, 3..6 one-hot positions.
        let d = 6;
        let beta = 1000.0;
        let mut tok = Matrix::zeros(3, d);
        tok.set(0, 0, 1.0);
        tok.set(1, 1, 2.0);
        tok.set(2, 2, 3.0);
        let mut pos = Matrix::zeros(3, d);
        for i in 0..3 {
            pos.set(i, 3 + i, 1.0);
        }
        // Query at position i matches key of position i-1.
        let mut w_q = Matrix::zeros(d, 2);
        w_q.set(4, 0, beta);
        w_q.set(5, 1, beta);
        let mut w_k = Matrix::zeros(d, 2);
        w_k.set(3, 0, 2f64.sqrt());
        w_k.set(4, 1, 2f64.sqrt());
        let mut w_v = Matrix::zeros(d, 3);
        let mut w_o = Matrix::zeros(3, d);
        for c in 0..3 {
            w_v.set(c, c, 1.0);
            w_o.set(c, c, 1.0);
        }
        let w = ModelWeights::new(ModelParts {
            visual_tokens: 0,
            encoder_map: Matrix::identity(1),
            projection: Matrix::zeros(1, d),
            token_embeddings: tok.clone(),
            position_embeddings: pos,
            layers: vec![Layer {
                heads: vec![AttentionHead { w_q, w_k, w_v, w_o }],
                mlp: Mlp::empty(d),
            }],
            unembedding: Matrix::zeros(d, 3),
            certificate: None,
        })
        .unwrap();
        let t = forward(&w, &Matrix::zeros(0, d), &[0, 1, 2], &[], &Hooks::default()).unwrap();
        let before = t.snapshots[0].row(2);
        let after = t.snapshots[1].row(2);
        let moved: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
        assert_eq!(&moved[..3], &tok.row(1)[..3]);
        assert_eq!(&moved[3..], &[0.0; 3]);
    }

    #[test]
    fn self_override_is_a_no_op() {
        let w = random_model(3);
        let mut rng = Rng::new(4);
        let hv = embed_image(&w, &image(&mut rng, 2, 3)).unwrap();
        let clean = forward(&w, &hv, &[1, 4], &[], &Hooks::default()).unwrap();
        let hooks = Hooks {
            state_overrides: vec![StateOverride {
                layer: 1,
                positions: vec![0, 2],
                values: clean.snapshots[1].select_rows(&[0, 2]),
            }],
            ..Hooks::default()
        };
        let patched = forward(&w, &hv, &[1, 4], &[], &hooks).unwrap();
        assert_eq!(patched.logits, clean.logits);
    }

    #[test]
    fn invalid_hooks_rejected() {
        let w = random_model(3);
        let hv = Matrix::zeros(2, 6);
        let bad_layer = Hooks {
            mask_overrides: BTreeMap::from([(2, BTreeSet::from([(3, 0)]))]),
            ..Hooks::default()
        };
        assert!(matches!(
            forward(&w, &hv, &[1, 2], &[], &bad_layer),
            Err(Error::Hook(_))
        ));
        let bad_pos = Hooks {
            mask_overrides: BTreeMap::from([(0, BTreeSet::from([(9, 0)]))]),
            ..Hooks::default()
        };
        assert!(matches!(
            forward(&w, &hv, &[1, 2], &[], &bad_pos),
            Err(Error::Hook(_))
        ));
        let bad_pin = Hooks {
            pins: vec![Pin {
                positions: vec![0],
                source: 1,
                end: 0,
            }],
            ..Hooks::default()
        };
        assert!(matches!(
            forward(&w, &hv, &[1, 2], &[], &bad_pin),
            Err(Error::Hook(_))
        ));
    }

    #[test]
    fn encode_image_cases() {
        let w = random_model(5);
        let mut rng = Rng::new(6);
        let img = image(&mut rng, 2, 3);
        let z = encode_image(&w, &img).unwrap();
        let oracle = Matrix::from_fn(2, 3, |r, c| {
            (0..3)
                .map(|k| img.patch_vectors.get(r, k) * w.parts().encoder_map.get(k, c))
                .sum()
        });
        assert!(z.max_abs_diff(&oracle) < 1e-12);

        let mut parts = w.clone().into_parts();
        parts.encoder_map = Matrix::identity(3);
        let wi = ModelWeights::new(parts).unwrap();
        assert_eq!(encode_image(&wi, &img).unwrap(), img.patch_vectors);

        // Linearity: images differing only by noise differ by g(noise).
        let noise = random(&mut rng, 2, 3, 0.1);
        let mut noisy = img.clone();
        noisy.patch_vectors.add_assign(&noise).unwrap();
        let dz = {
            let mut a = encode_image(&w, &noisy).unwrap();
            let mut neg = z.clone();
            neg.scale(-1.0);
            a.add_assign(&neg).unwrap();
            a
        };
        assert!(dz.max_abs_diff(&noise.matmul(&w.parts().encoder_map).unwrap()) < 1e-12);

        let wrong = image(&mut rng, 3, 3);
        assert!(encode_image(&w, &wrong).is_err());
    }

    #[test]
    fn project_visual_cases() {
        let w = random_model(8);
        assert_eq!(
            project_visual(&w, &Matrix::zeros(2, 3)).unwrap(),
            Matrix::zeros(2, 6)
        );
        let mut parts = w.clone().into_parts();
        parts.projection = Matrix::from_fn(3, 6, |r, c| if r == c { 1.0 } else { 0.0 });
        let wp = ModelWeights::new(parts).unwrap();
        let z = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(
            project_visual(&wp, &z).unwrap().row(0),
            &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn generate_is_greedy_and_deterministic() {
        let w = random_model(9);
        let hv = Matrix::zeros(0, 6);
        let g1 = generate(&w, &hv, &[1, 2], 3).unwrap();
        let g2 = generate(&w, &hv, &[1, 2], 3).unwrap();
        assert_eq!(g1.tokens, g2.tokens);
        assert_eq!(g1.tokens.len(), 3);
        assert_eq!(g1.traces[2].layout.generated, 2);
        let one = generate(&w, &hv, &[1, 2], 1).unwrap();
        assert_eq!(one.tokens.len(), 1);
        assert_eq!(one.tokens[0], g1.tokens[0]);
        assert!(generate(&w, &hv, &[1, 2], 0).is_err());
    }

    #[test]
    fn model_file_round_trip_and_truncation() {
        let w = random_model(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&w, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), w);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Schema { .. })));
    }
}
