pub mod blursynth;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod history;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod saam;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
