//! Session I/O, configuration, stage orchestration and evaluation.

pub mod config;
pub mod evaluate;
pub mod session;
pub mod stages;
pub mod synth;

pub use config::{ConfigError, PipelineConfig};
pub use evaluate::{evaluate, EvaluationReport};
pub use session::{load_session, median_image, CaptureSession, SessionError, View};
pub use stages::{reconstruct, ReconstructionReport, Stage, StageError};
pub use synth::{synthesize, synthesize_to_dir, SynthOutput};
