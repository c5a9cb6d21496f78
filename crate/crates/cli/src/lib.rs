#![doc = include_str!("../README.md")]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
