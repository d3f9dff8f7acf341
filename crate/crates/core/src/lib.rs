pub mod curation;
pub mod features;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod retrieval;
pub mod synthetic;
pub mod training;
