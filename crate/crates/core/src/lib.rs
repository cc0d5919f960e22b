// SPDX-License-Identifier: MIT OR Apache-2.0

//! # vlmflow-core
//!
//! A desk-scale testbed for studying how a vision-language transformer moves
//! entity identity from image-token positions to query positions.
//!
//! The crate contains:
//!
//! - [`numerics`]: dense `f64` matrices, softmax, ReLU and a seeded RNG.
//! - [`world`]: a synthetic universe of typed entities, relations and facts,
//!   rendered either as text questions or as noisy "images".
//! - [`model`]: a decoder-only transformer forward pass over
//!   `[visual tokens, text tokens]` with hooks for replacing residual states
//!   and masking attention edges at any layer.
//! - [`wiring`]: analytic construction of weights that implement a two-hop
//!   process (identify the entity, then look up the fact) with known layer
//!   indices, plus a certificate of what every experiment should measure.
//! - [`interventions`]: cross patching, freeze patching and attention
//!   knockout, and layer sweeps over each.
//! - [`harness`]: the identification gate, paired accuracy evaluation,
//!   Wilcoxon signed-rank test, early/late splits and report files.
//!
//! ## Layer indexing
//!
//! `snapshot[l]` is the residual stream at the *input* of layer `l`, and
//! `snapshot[L]` is the final output. Patching "at layer `l`" replaces rows
//! of `snapshot[l]` before layer `l` runs. Every sweep index in this crate
//! follows that convention.

pub mod error;
pub mod harness;
pub mod interventions;
pub mod model;
pub mod numerics;
pub mod wiring;
pub mod world;

pub use error::{Error, Result};
pub use harness::{
    compute_gap, detect_crossover, eval_qa, identification_gate, split_early_late,
    wilcoxon_signed_rank, EarlyIdRule, EvalRecord, GapReport, GateResult, Report, SplitReport,
    WilcoxonResult,
};
pub use interventions::{
    cross_patch, cross_patch_sweep, freeze_patch, freeze_sweep, knockout, knockout_sweep,
    run_with_cache, KnockoutDirection, PromptMode, SweepCurve, SweepOutcome,
};
pub use model::{forward, generate, predict, Hooks, ModelWeights, RunTrace, SequenceLayout};
pub use numerics::{Matrix, Rng};
pub use wiring::{verify_wiring, wire_model, WiringCertificate, WiringConfig};
pub use world::{EntityType, Modality, World, WorldConfig};
