pub mod camgeo;
pub mod error;
pub mod fields;
pub mod flowbij;
pub mod losses;
pub mod nn;
pub mod oracleio;
pub mod raster;
pub mod trainer;
pub mod volren;

pub use error::{Error, Result};
