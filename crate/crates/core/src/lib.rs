pub mod analysis;
pub mod cli;
pub mod data;
pub mod flow;
pub mod nn;
pub mod numerics;
pub mod training;
pub mod transforms;

pub type Tensor = numerics::Tensor<f64>;
pub type Graph = numerics::Graph<f64>;
pub type Var<'g> = numerics::Var<'g, f64>;
