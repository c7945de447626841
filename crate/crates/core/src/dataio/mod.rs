//! Dataset and checkpoint storage, the synthetic scenario, normalization and
//! windowing.

mod bundle;
pub mod container;
mod normalize;
mod synth;
mod window;

pub use bundle::{DatasetBundle, Split, Splits, GROUND_TRUTH_FILE, SPLITS_FILE};
pub use normalize::{ChannelStats, NormalizedData, Normalizer, STD_FLOOR};
pub use synth::{grid_graph, synth_generate, Emission, ScenarioConfig, SyntheticScenario, TIME_DIM, WEATHER_DIM};
pub use window::{assemble_batch, gather_steps, windows, Window};
