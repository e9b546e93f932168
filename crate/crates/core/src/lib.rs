pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod glyph;
pub mod inference;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod restoration;
pub mod synthetic;
pub mod tensor;
pub mod training;
