pub mod backend;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod inference;
pub mod matching;
pub mod pipeline;
pub mod prompter;
pub mod teacher;
pub mod tensorio;
pub mod trainer;
pub mod types;
pub mod viz;

pub use config::Config;
pub use error::{Error, Result};
