//! Synthetic arithmetic dataset: vocabulary, generator, solver, persistence.

pub mod gen;
pub mod io;
pub mod oracle;
pub mod vocab;

pub use gen::{generate_dataset, Dataset, DatasetConfig, TokenSample};
pub use io::{config_hash, load_dataset, save_dataset};
pub use oracle::{parse_chain, solve_chain, ChainStep};
pub use vocab::{Vocabulary, CTRL_C_MAX};
