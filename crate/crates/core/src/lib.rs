pub mod app;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod guard;
pub mod lattice;
pub mod lm;
pub mod pipeline;
pub mod search;
