//! Reconstruction of a neural radiance field from simulated event-camera
//! streams, self-contained on a single machine.
//!
//! The pipeline: a toy scene is rendered along a camera orbit, the frame
//! sequence is converted into an event stream by a threshold simulator
//! ([`events`]), and a coordinate MLP ([`field`]) is trained so that the
//! log-intensity differences of its volume renders ([`renderer`]) match the
//! accumulated event polarities under a normalized loss family ([`losses`])
//! designed to suppress the streak and ghost artifacts that plain event losses
//! produce. Training ([`trainer`]) differentiates the whole pipeline with a
//! small reverse-mode tape ([`grad`]). Reconstruction quality is scored
//! against ground-truth renders ([`eval`]).
//!
//! All numerics are `f64`. Every artifact (event files, checkpoints, rendered
//! images, logs) is a pure function of config + seed; nothing reads clocks or
//! machine identity.

pub mod cli;
pub mod eval;
pub mod events;
pub mod field;
pub mod geometry;
pub mod grad;
pub mod losses;
pub mod renderer;
pub mod scene;
pub mod trainer;
