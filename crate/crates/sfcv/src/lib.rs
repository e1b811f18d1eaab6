//! Convolutional neural networks on triangle meshes using parallel
//! N-direction tangent frames: frame-field optimization, covering-space
//! grouped convolutions with polynomial kernels, mesh hierarchies with
//! pooling, and a training stack with hand-written reverse-mode gradients.

pub mod geom;
pub mod mesh;
pub mod meshio;
pub mod synth;
pub mod frames;
pub mod hierarchy;
pub mod convops;
pub mod network;
pub mod training;
pub mod cache;
pub mod config;
pub mod verify;
