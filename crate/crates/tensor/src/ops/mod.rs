pub(crate) mod broadcast;
pub mod conv;
pub mod elementwise;
pub(crate) mod index;
pub(crate) mod linalg;
pub(crate) mod reduce;
pub(crate) mod sample;
