pub mod checkpoint;
pub mod csv;
pub mod grid;
pub mod ppm;
pub mod svr;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use grid::{read_grid, write_grid};
pub use ppm::{read_ppm, write_ppm};
pub use svr::{read_pairs, read_svr, write_svr};
