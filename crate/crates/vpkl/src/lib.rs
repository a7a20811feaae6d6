//! File formats, the audio frontend and the experiment pipeline around
//! `vpkl-core`.

pub mod checkpoint;
pub mod dsp;
pub mod experiment;
pub mod featurize;
pub mod format;
pub mod manifest;
pub mod results;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
