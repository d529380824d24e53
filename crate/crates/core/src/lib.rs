pub mod schema;
pub mod sql;
pub mod execution;
pub mod gateway;
pub mod calibration;
pub mod sketch;
pub mod selection;
pub mod config;
pub mod pipeline;
pub mod harness;
