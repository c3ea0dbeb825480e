pub mod cluster;
pub mod detection;
pub mod harness;
pub mod hvc;
pub mod kvstore;
pub mod metrics;
pub mod predicates;
pub mod rollback;
pub mod simnet;
pub mod workloads;
