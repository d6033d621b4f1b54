//! On-disk formats.

pub mod archive;
pub mod bundle;
pub mod pnm;
