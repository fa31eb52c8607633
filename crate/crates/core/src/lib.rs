//! Finite-element flow and transport in fractured porous media on adaptive quadtree meshes.

pub mod assembly;
pub mod cli_io;
pub mod error;
pub mod fespace;
pub mod flow;
pub mod geometry;
pub mod linalg;
pub mod mesh;
pub mod transport;

pub use error::{Error, Result};
