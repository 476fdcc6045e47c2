pub mod langmodel;
pub mod phonetics;
pub mod templates;
pub mod storyline;
pub mod search;
pub mod generator;
pub mod evaluation;
pub mod error;

pub use error::{Error, Result};
pub mod cli;
