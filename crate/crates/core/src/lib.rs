//! Merging of low-rank adapter outputs under three strategies: direct
//! weighted sum, Monte-Carlo dropout, and orthogonal Monte-Carlo dropout,
//! whose chained masks keep merged contributions exactly orthogonal.
//!
//! The crate also ships statistical suites that certify the mask
//! constructions, an interference analyzer, a binary adapter container
//! format, and the `orthmerge` command-line tool.

pub mod bench;
pub mod error;
pub mod io;
pub mod mask;
pub mod merge;
pub mod model;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use io::{load_adapter_pack, load_matrix, load_vector, save_adapter_pack, FormatError};
pub use mask::{keep_probability, sample_masks, sample_mc_masks, sample_orthogonal_masks, MaskDump, MaskKind, MaskSet};
pub use merge::{merge, merge_direct, merge_mc_dropout, merge_orthogonal, MergeAudit, MergeOutput};
pub use model::{
    apply_adapter, materialize_delta, validate_plan, BaseLayer, DenseDelta, LowRankAdapter, Matrix, MergePlan,
    PlanEntry, Strategy,
};
pub use rng::{derive_stream, Stream, StreamKey};
pub use verify::{
    analyze_interference, run_consistency_suite, run_orthogonality_suite, run_partition_suite, run_unbiasedness_suite,
    InterferenceReport, VerifyReport,
};
