//! Reversible speaker-identity protection for speech audio.
//!
//! A perturbation generator hides the speaker from a verification backend
//! while a jointly trained removal network can undo the perturbation.

pub mod audio;
pub mod container;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod purify;
pub mod removal;
pub mod speaker;
pub mod synth;
pub mod trainer;

pub use audio::{compute_snr, load_wav, resample, save_wav, Manifest, ManifestEntry, Waveform};
pub use error::{Error, Result};
pub use generator::{PerturbationGenerator, PerturbationParts, DEFAULT_EPSILON};
pub use losses::{LossBreakdown, LossWeights};
pub use metrics::{EvaluationReport, PitchContour, UtteranceMetrics};
pub use network::{LatentCode, NetConfig, NoiseMaskNet};
pub use purify::{PurifyConfig, PurifyMethod};
pub use removal::{PerturbationRemover, ReversePerturbationParts};
pub use speaker::{
    compute_eer, cosine_score, extract_embedding, EmbeddingBackend, SpeakerEmbedding, ToyExtractor,
    Trial, TrialList,
};
pub use trainer::{gradcheck, train_joint, Checkpoint, GradcheckReport, Trainer, TrainingConfig};
