pub mod category;
pub mod chamfer;
pub mod deform;
pub mod error;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod pipeline;
pub mod regis;
pub mod seeds;
pub mod similarity;
pub mod synth;

pub use category::Category;
pub use error::{Error, Result};
