//! Config, file formats and their validation.

pub mod config;
pub mod dump;
pub mod files;
pub mod fmap;
