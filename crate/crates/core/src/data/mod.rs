//! Taxonomy, annotation records, interchange files, synthetic scenes and
//! dataset statistics.

pub mod io;
pub mod record;
pub mod stats;
pub mod synth;
pub mod taxonomy;

pub use io::{
    parse_annotations, parse_annotations_str, parse_predictions, parse_predictions_str,
    records_as_predictions, write_annotations, write_annotations_string, write_predictions,
    write_predictions_string,
};
pub use record::{GtTriplet, Group, ImageRecord, TripletPrediction};
pub use stats::{stats, DatasetStats};
pub use synth::{synth_generate, SynthDataset, SynthPlan, SynthSpec, TokenSet, TOKEN_DIM};
pub use taxonomy::{taxonomy, Arity, BroadType, Taxonomy, TaxonomyEntry, NUM_CLASSES};
