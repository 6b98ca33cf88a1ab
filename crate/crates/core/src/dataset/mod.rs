//! Listening-test data: subjects, answers, pairing and questionnaire
//! construction, exclusion rules, subject feature vectors, age-sorted folds
//! and a synthetic corpus generator.

mod corpus;
mod protocol;
pub mod synth;

pub use corpus::{read_corpus, write_corpus, Corpus, PreferenceRecord, SubjectInfo, Volume, MISSING};
pub use protocol::{
    build_pairs, filter_corpus, make_folds, make_folds_n, subject_vector, training_example, training_examples,
    translate_score, ClipPair, ExclusionReport, FeatureMask, FoldPlan, PairPlan, Questionnaire, Rotation,
    TrainingExample, NUM_FOLDS, SUBJECT_DIM,
};
pub use synth::{subject_blind_ceiling, synth_generate, write_synth, LabelMode, SynthConfig, SynthCorpus, SynthTruth};
