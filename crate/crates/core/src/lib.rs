pub mod analysis;
pub mod error;
pub mod filtering;
pub mod metanet;
pub mod model;
pub mod numeric;
pub mod params;
pub mod synthetic;
pub mod text;
pub mod trainer;

mod binio;

pub use error::{Error, Result};
