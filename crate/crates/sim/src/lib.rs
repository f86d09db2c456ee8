//! Virtual-clock simulation of the federated estimators, experiment
//! drivers, configuration files and trace output.

pub mod ablation;
pub mod clock;
pub mod compute;
pub mod config;
pub mod experiments;
pub mod output;
pub mod probe;
pub mod simulate;
pub mod threaded;
