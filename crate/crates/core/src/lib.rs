//! Globally optimal departure rates for groups of drivers on a single road
//! governed by the LWR conservation law.

pub mod costexpr;
pub mod fluxmodel;
pub mod numerics;
pub mod laxhopf;
pub mod groups;
pub mod planner;
pub mod oracle;
pub mod junction;
pub mod cli;
