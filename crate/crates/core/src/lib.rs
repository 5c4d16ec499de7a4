//! Black-box classifier fingerprinting.
//!
//! Given a table of top-k predictions of known models on a fixed set of
//! inputs, decide whether an unknown black-box classifier belongs to a given
//! family of models (detection) or which family it belongs to
//! (identification), with as few queries as possible.
//!
//! * [`walled_garden`]: the black-box is one of the table models; greedy
//!   adaptive querying with exact output matching.
//! * [`open_world`]: the black-box may be an unseen variant; mutual
//!   information based distances with calibrated thresholds.
//! * [`family_sim`]: synthetic vanilla models and channel-defined variants.

pub mod corpus;
pub mod distance;
pub mod error;
pub mod family_sim;
pub mod open_world;
pub mod oracle;
pub mod seed;
pub mod walled_garden;

pub use corpus::{
    load_model_list, load_table, reference_class, save_table, select_inputs, ClassLabel, Family, FamilyFlavor,
    FamilyPartition, PredictionTable, SelectionStrategy, SelectionSubset, TableFormat, TopKOutput,
};
pub use distance::{
    compound_distance, empirical_mi, joint_histogram, model_distance, surject, theory_lower_bound, BoundInput,
    DistanceReport, JointHistogram, SurjectedSequence,
};
pub use error::{Error, Result};
pub use family_sim::{ChannelKind, ChannelSpec, Ensemble, Manifest, SimSpec, VanillaSpec, VariantSpec};
pub use open_world::{
    calibrate_threshold, choose_delegate, detect_variant, identify_family, identify_variation, CalibratedTest,
    DelegateChoice, DelegateOption, IdentificationVerdict,
};
pub use oracle::{BlackBox, ColumnOracle, ReplayOracle};
pub use walled_garden::{detect, identify, DetectionOutcome, IdentificationOutcome, ScoreRule, Verdict};
