pub mod ablate;
pub mod count;
pub mod dataset;
pub mod report;
pub mod train;
