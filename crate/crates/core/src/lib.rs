//! Semi-dense 6-DoF tracking of an event camera against 3D edge maps.
//!
//! Map points are reprojected into potential fields derived from time
//! surfaces and the pose is refined by robust forward-compositional
//! Gauss-Newton. Polarity-aware fields and nearest-neighbour occlusion
//! culling are pluggable strategies; see [`strategy`].

pub mod cli_io;
pub mod event_rep;
pub mod fields;
pub mod geometry;
pub mod mapping;
pub mod strategy;
pub mod synth;
pub mod tracker;
