pub mod error;
pub mod eval;
pub mod experiment;
pub mod filters;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod segmodel;
pub mod tomo;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{ClassId, Dims, FloatVolume, GrayVolume, Image2, LabelVolume, ViewAxis, Volume};
