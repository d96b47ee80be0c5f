pub mod aggregator;
pub mod catalog;
pub mod cli;
pub mod error;
pub mod fd;
pub mod gram;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod planner;
pub mod solver;
pub mod storage;
