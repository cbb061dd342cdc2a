//! On-disk formats: binary map files, `key = value` config files, CSV
//! exports and training checkpoints.

pub mod checkpoint;
pub mod config;
pub mod csv;
pub mod mapfile;
