//! Event files: loading, validation and synthetic generation.

pub mod schema;
pub mod synthetic;
pub mod validate;

pub use schema::{
    load_event, load_event_with, parse_event, save_event, to_json, Strictness, SCHEMA_VERSION,
};
pub use synthetic::{
    markov_step, synthesize_markov_event, synthesize_regime_event, synthesize_reversal_event, Flip,
    MarkovSpec, RegimeSpec, ReversalSpec,
};
pub use validate::{validate_event, Finding};
