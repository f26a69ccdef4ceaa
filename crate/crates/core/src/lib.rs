pub mod analysis;
pub mod descriptor;
pub mod diversity;
pub mod metaevo;
pub mod novelty;
pub mod runio;
pub mod substrate;
