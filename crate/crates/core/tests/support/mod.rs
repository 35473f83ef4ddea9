pub mod checks;
pub mod fixtures;
pub mod fuzz;
pub mod hdbscan_ref;
pub mod oracles;
