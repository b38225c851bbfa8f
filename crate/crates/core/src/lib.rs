//! Expression-aware proposal filtering for two-stage referring expression
//! grounding.
//!
//! A relatedness module scores each detected box against a referring
//! expression; the fused score `relatedness × confidence` replaces the plain
//! detector confidence as the NMS criterion, so boxes of the referent and the
//! objects it is described relative to survive suppression and proposal
//! budgets more often.

// `!(x > 0.0)` is how range checks reject NaN here.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod ingest;
pub mod model;
pub mod nms;
pub mod objectives;
pub mod pseudo_gt;
pub mod synth;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Error, Result};
pub use eval::{Method, RecallReport, RecallRow};
pub use geometry::{hits, iou, max_iou_against, BBox, HIT_IOU};
pub use ingest::{ExpressionRecord, GroundTruthRegion, ImageDetections, Split, Vocabulary};
pub use model::{ModelConfig, ModelParameters, ScoredProposal};
pub use nms::{Criterion, NmsConfig, ProposalBudget};
pub use trainer::{LossKind, TrainConfig, TrainState};
