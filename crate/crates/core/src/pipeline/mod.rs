//! Data generation, persistence and the end-to-end commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod synthetic;
pub mod models;
