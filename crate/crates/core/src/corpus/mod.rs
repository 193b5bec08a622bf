//! Synthetic egocentric world generation and narration-pair selection.

pub mod annotations;
pub mod filter;
pub mod io;
pub mod render;
pub mod vocab;
pub mod world;

pub use annotations::{
    ActionToken, Annotations, AnticipationAnnotation, GroundingAnnotation, MomentAnnotation, ObservedAction,
    SegmentLabel, FUTURE_LEN, HISTORY_LEN,
};
pub use filter::{score_pair, score_pairs, select_corpus, FilterRules, SelectionConfig};
pub use io::{load_world, read_manifest, save_world, write_manifest};
pub use world::{
    generate_world, ActionEntry, ActionScript, Clip, ClipTextPair, DomainShift, Frames, SequenceModel, SourceTag,
    World, WorldConfig,
};
