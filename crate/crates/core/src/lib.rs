//! Compositional neural Markov kernel for electromagnetic particle-matter
//! interaction.

pub mod assign;
pub mod cardinality;
pub mod cfm;
pub mod compose;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod manifold;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
