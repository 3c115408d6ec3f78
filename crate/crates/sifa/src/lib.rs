pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod error;
pub mod io;
pub mod models;
pub mod net;
pub mod plot;
pub mod run;
pub mod train;
