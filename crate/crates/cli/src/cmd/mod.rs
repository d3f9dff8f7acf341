pub mod curate;
pub mod features;
pub mod report;
pub mod retrieval;
pub mod train;
