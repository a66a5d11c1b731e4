//! Tactile P300 brain-computer interface: stimulation scheduling, synthetic
//! EEG, preprocessing, xDAWN spatial filtering, linear SVM decoding, online
//! decision logic, statistics and a simulated dual-arm robot.

pub mod archive;
pub mod classifier;
pub mod config;
pub mod container;
pub mod decoder;
pub mod error;
pub mod filter;
pub mod layout;
pub mod live;
pub mod linalg;
pub mod model_file;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod robot;
pub mod seeds;
pub mod session;
pub mod stats;
pub mod stim;
pub mod synth;
pub mod xdawn;

pub use error::{BciError, Result};
pub use layout::ChannelLayout;
pub use stim::{build_run_schedule, StimulationSchedule, StimulusSpec, VibratorId};
pub use synth::{Condition, SubjectProfile};
