//! File formats and plumbing behind the `ppgvit` binary: JSONL datasets,
//! the named-array container, checkpoint manifests, PNG previews, config
//! merging, and an order-preserving parallel map.

pub mod checkpoint;
pub mod container;
pub mod dataset;
pub mod parallel;
pub mod preview;
pub mod runcfg;
