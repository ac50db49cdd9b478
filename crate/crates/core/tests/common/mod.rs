#![allow(dead_code)]

pub mod gen;

use std::path::PathBuf;

use elastikit::config::ManagerConfig;
use elastikit::manager::Manager;

pub fn hostd() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_elastikit-hostd"))
}

pub fn local_config(policy: &str) -> ManagerConfig {
    let mut cfg = ManagerConfig::local().with_policy(policy);
    cfg.hostd_path = Some(hostd());
    cfg
}

pub fn local_manager(policy: &str) -> Manager {
    Manager::builder(local_config(policy)).build().expect("local manager")
}

pub fn sim_config(policy: &str) -> ManagerConfig {
    ManagerConfig::simulated().with_policy(policy)
}

pub fn sim_manager(policy: &str) -> Manager {
    Manager::builder(sim_config(policy)).build().expect("simulated manager")
}
