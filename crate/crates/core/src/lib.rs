//! Analysis engine that turns each member of a spatiotemporal climate
//! ensemble into a point distribution over a 2-D layout of self-organizing
//! map nodes, then compares and clusters those distributions.

pub mod data;
pub mod geometry;
pub mod par;
pub mod som;
pub mod embed;
pub mod annotate;
pub mod distribution;
pub mod compare;
pub mod cluster;
pub mod project;
pub mod analysis;
