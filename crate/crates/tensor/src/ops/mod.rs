pub mod conv;
pub(crate) mod elementwise;
pub(crate) mod linalg;
mod reduce;
mod shape_ops;
