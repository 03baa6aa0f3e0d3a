pub mod demo;
pub mod experiments;
pub mod model;
pub mod scene;
pub mod train;
