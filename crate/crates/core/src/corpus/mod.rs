//! Synthetic corpus tooling: grammar sampling, grid rendering, and the
//! on-disk corpus formats.

pub mod grammar;
pub mod io;
pub mod render;

pub use grammar::{generate, GrammarConfig, GrammarError, StructureWeights};
pub use io::{
    read_corpus, read_rendered, read_rendered_meta, toy_corpus, write_corpus, write_rendered,
    write_targets, CorpusError, RenderedMeta, TargetRow,
};
pub use render::{layout, render, LayoutBox, RenderError, RenderedSample};
