pub mod evaluation;
pub mod inference;
pub mod nodes;
pub mod pubsub;
pub mod samples;
pub mod telemetry;
pub mod transport;
pub mod wire;
