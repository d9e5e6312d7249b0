//! Connectome edge priors from chat-completion models.
//!
//! The crate covers the whole batch pipeline: region pairs are rendered into
//! prompts, sent through a [`gateway`] with record/replay support, turned into
//! per-edge confidences by [`prior`], optionally grounded in a literature
//! index ([`rag`]), scored against an atlas ([`eval`]), used to augment a
//! microstructure-filtered connectome ([`filter`]) and finally compared with a
//! network diffusion model ([`ndm`]).

pub mod connectome;
pub mod digest;
pub mod eval;
pub mod filter;
pub mod gateway;
pub mod ndm;
pub mod prior;
pub mod prompt;
pub mod rag;
pub mod testing;

pub use connectome::{
    binarize, connectome_from_endpoints, enumerate_pairs, Connectome, ConnectomeKind, Hemisphere,
    PairScope, Parcellation, Region, RegionPair,
};
