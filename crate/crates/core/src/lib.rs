pub mod coupler;
pub mod deploy;
pub mod msglayer;
pub mod netsim;
pub mod overlay;
pub mod units;
pub mod wire;
