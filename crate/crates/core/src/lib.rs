//! Multi-frame LiDAR data preparation for spatiotemporal self-supervised
//! pretraining: instance-aware sequence transformation, ray-cast occupancy
//! labels, group BEV masking, loss kernels and a synthetic scene generator.

pub mod cli;
pub mod geometry;
pub mod group_masking;
pub mod jepa_losses;
pub mod pipeline;
pub mod raycast_voxelizer;
pub mod scene_model;
pub mod sequence_transform;
pub mod synth;
pub mod verify;
