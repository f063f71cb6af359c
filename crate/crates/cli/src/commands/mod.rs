pub mod eval;
pub mod loss;
pub mod phantom;
pub mod skeleton;
pub mod stats;
