//! 3D morphology: differentiable pooling, soft skeletons, connected
//! components, the exact distance transform and homotopic thinning.

mod components;
mod edt;
mod pool;
mod skeleton;
mod thinning;

pub use components::{connected_components, BoundingBox, ComponentLabeling, Connectivity};
pub use edt::{distance_transform, squared_distance_transform};
pub use pool::{max_pool, min_pool, PoolTrace, EXTERIOR};
pub use skeleton::{
    soft_skeleton, soft_skeleton_values, SkeletonTape, SoftSkeleton, DEFAULT_SKELETON_ITERATIONS,
};
pub use thinning::thin;
