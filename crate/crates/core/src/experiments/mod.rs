//! Presets and experiment drivers.

pub mod presets;
pub mod runner;
pub mod studies;
pub mod sweep;

pub use presets::{preset, Architecture, CurriculumKind, Preset, SweepAxis, Variant, PRESET_NAMES};
pub use runner::{make_schedule, make_teachers, run_curriculum, run_with_teachers, FinalModel, RunOutcome, RunSummary, W2Snapshot};
pub use sweep::{cell_preset, grid_sweep, summarize_grid, CellStats, GridCell};
