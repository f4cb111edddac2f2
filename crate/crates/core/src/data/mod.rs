//! Interaction logs, preprocessing, and the sequence and interval features
//! consumed by the model.

mod features;
mod instances;
mod log;
mod negatives;
mod preprocess;
mod rtim;

pub use features::{
    build_instance, candidate_context, discretize_intervals, extract_repeat_context, interval_bin,
    sliding_window_instances, truncate_or_pad, FeatureConfig, FixedSequence, IntervalSequence,
    RepeatContext, TargetInterval, TrainingInstance,
};
pub use instances::{load_instances, read_instances, save_instances, write_instances, INSTANCE_COLUMNS};
pub use log::{
    ingest, ingest_reader, read_id_map, write_events, write_id_map, Column, ColumnSpec, Event,
    InteractionLog, ItemId, UserHistory, UserId,
};
pub(crate) use log::write_header;
pub use negatives::sample_negatives;
pub use preprocess::{
    chronological_split, filter_cold_start, min_repeat_gap, parse_fractions, DataSplit, SplitBounds,
};
pub use rtim::{build_repeat_interval_matrix, MatrixConfig, RepeatIntervalMatrix, RtimCache};
