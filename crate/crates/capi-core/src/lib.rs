//! Planning library for discounted tabular MDPs with linear value-function
//! approximation: confidence-gated approximate policy iteration, a
//! local-access Monte-Carlo planner built on leveled core sets, exact
//! tabular oracles, and generators for the benchmark instance families.

pub mod capi;
pub mod coreset;
pub mod exact;
pub mod instances;
pub mod mdp;
pub mod measure;
pub mod planner;
pub mod sim;

pub use mdp::{FeatureMap, MdpInstanceFile, QTable, RewardSpec, TabularMdp, TablePolicy};
pub use sim::{LocalAccessSimulator, RandomAccessSimulator, Simulator};
