pub mod distributions;
pub mod error;
pub mod numeric;
pub mod optim;
pub mod rng;
pub mod analysis;
pub mod risk;
pub mod audit;
pub mod plan;
pub mod sim;
pub mod model_spec;
pub mod roundtrip;
