pub mod cli;
pub mod config;
pub mod cvae;
pub mod dynamics;
pub mod encoder;
pub mod geom;
pub mod knarpe;
pub mod model;
pub mod numcore;
pub mod scene;
pub mod simulator;
pub mod trainer;
