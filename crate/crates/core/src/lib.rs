pub mod bins;
pub mod labels;
pub mod losses;
pub mod maps;
pub mod prompts;
pub mod encoder;
pub mod head;
pub mod model;
pub mod nn;
pub mod params;
pub mod data;
pub mod synthetic;
pub mod config;
pub mod eval;
pub mod checkpoint;
pub mod train;
