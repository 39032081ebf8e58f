pub mod adversarial;
pub mod autograd;
pub mod checkpoint;
pub mod derive;
pub mod error;
pub mod generator;
pub mod graph;
pub mod harness;
pub mod layout;
pub mod nn;
pub mod processor;
pub mod raster;
pub mod tensor;
