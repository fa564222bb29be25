//! Few-shot entity linking with a large language model, scored against
//! Wikidata-identified gold mentions and stratified by entity popularity.

pub mod backend;
pub mod baseline;
pub mod benchmark;
pub mod kb;
pub mod manifest;
pub mod parser;
pub mod pipeline;
pub mod popularity;
pub mod predictions;
pub mod prompt;
pub mod scorer;
