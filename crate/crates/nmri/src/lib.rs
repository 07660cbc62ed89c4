// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, model registry, HTTP service and command line around
//! [`nmri_core`].
//!
//! - [`archive`]: safetensors model directories in canonical or published
//!   GPT-2 naming.
//! - [`api`]: request and result documents; the single executor both front
//!   doors call.
//! - [`session`]: append-only request logs and replay verification.
//! - [`service`]: the HTTP API.
//! - [`cli`]: the `nmri` command.
//! - [`heatmap`]: SVG rendering of grids and traces.

#![forbid(unsafe_code)]

pub mod api;
pub mod archive;
pub mod cli;
pub mod config;
mod error;
pub mod heatmap;
pub mod layout;
pub mod registry;
pub mod service;
pub mod session;

pub use error::{Error, Result};
