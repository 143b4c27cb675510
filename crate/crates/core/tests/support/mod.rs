pub mod fabric;
pub mod messaging;
