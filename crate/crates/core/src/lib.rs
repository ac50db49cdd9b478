//! Elastic cloud-object middleware.
//!
//! Applications deploy stateful objects onto a pool of worker hosts managed
//! by a [`manager::Manager`]. A pluggable [`policy::ScalingPolicy`] decides
//! where objects go and when hosts are provisioned or released; a
//! [`events::EventBus`] turns runtime events into metrics that policies read.

pub mod artifacts;
pub mod clock;
pub mod events;
pub mod fixtures;
pub mod par;
pub mod registry;
pub mod value;
pub mod wire;
pub mod conn;
pub mod hostd;
pub mod policy;
pub mod services;
pub mod backend;
pub mod config;
pub mod manager;
pub mod cli;
