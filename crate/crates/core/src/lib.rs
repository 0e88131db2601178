pub mod arena;
pub mod cli;
pub mod encoder;
pub mod goban;
pub mod gtp;
pub mod netspec;
pub mod nn;
pub mod records;
pub mod search;
pub mod synth;
pub mod tactics;
pub mod training;
