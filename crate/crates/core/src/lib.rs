pub mod autodiff;
pub mod dataset;
pub mod environment;
pub mod hash;
pub mod metrics;
pub mod model;
pub mod scenegraph;
pub mod synthesis;
pub mod trainer;
