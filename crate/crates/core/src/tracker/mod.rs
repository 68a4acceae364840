//! Online tracking: crops, the hidden-state memory and the session loop.

pub mod crop;
pub mod memory;
pub mod session;

pub use crop::{crop_region, CropTransform};
pub use memory::{average_states, sample_memory_indices, StateMemory};
pub use session::{init_session, TraceRow, TrackSession, TrackerConfig};
