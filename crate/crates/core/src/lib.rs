// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry_channel;
pub mod network_dynamics;
pub mod seeding;
pub mod vfl_engine;
pub mod theory;
pub mod gp_core;
pub mod scdn_problem;
pub mod importance;
pub mod sim_cli;
