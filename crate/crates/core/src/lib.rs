pub mod codec;
pub mod destination;
pub mod digest;
pub mod fsutil;
pub mod model;
pub mod simulator;
pub mod source;
pub mod transport;
