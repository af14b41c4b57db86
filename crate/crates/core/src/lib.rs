pub mod bloch;
pub mod config;
pub mod effective;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod lattice;
pub mod linalg;
pub mod magnetic_frame;
pub mod pipeline;
pub mod reference;
pub mod supercell;

pub use error::{Error, Result};
