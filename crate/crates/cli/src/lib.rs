//! Library surface of the `vqe` CLI; the binary is a thin argument parser
//! over these command functions.

pub mod commands;
pub mod font;
pub mod plot;
