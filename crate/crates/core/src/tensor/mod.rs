//! Dense matrices, seeded randomness and the `LBPW` tensor file format.

mod io;
mod matrix;
mod rng;

pub use io::{load_tensor, read_tensor, save_tensor, write_tensor, MAGIC, VERSION};
pub use matrix::Matrix;
pub use rng::Rng;
