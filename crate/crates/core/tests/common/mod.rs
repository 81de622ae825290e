#![allow(dead_code)]

use std::path::PathBuf;

use vcsim::kernel::LatencyModel;
use vcsim::scenario::{ExplicitArrival, LinkLatencies, ReleaseSpec, RuntimeArrivals, Scenario};
use vcsim::strategies::{Deployment, StrategyConfig};
use vcsim::topology::DispatchPolicy;

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn scenario_file(name: &str) -> Scenario {
    vcsim::load_scenario(repo_path(&format!("scenarios/{name}.json"))).expect("checked-in scenario loads")
}

pub fn release(time_ms: u64, id: &str, update: [u64; 2]) -> ReleaseSpec {
    ReleaseSpec {
        time_ms,
        version_id: id.into(),
        download_ms: 300,
        server_update_ms: update,
    }
}

pub fn links(df: u64, fc: u64, fd: u64, jitter: u64) -> LinkLatencies {
    LinkLatencies {
        device_frontend: LatencyModel { base_ms: df, jitter_ms: jitter },
        frontend_cloud: LatencyModel { base_ms: fc, jitter_ms: jitter.min(fc) },
        frontend_db: LatencyModel { base_ms: fd, jitter_ms: jitter.min(fd) },
        device_storage: LatencyModel { base_ms: 30, jitter_ms: jitter },
    }
}

pub fn explicit(arrivals: impl IntoIterator<Item = (u64, usize)>) -> RuntimeArrivals {
    RuntimeArrivals::Explicit(
        arrivals
            .into_iter()
            .map(|(time_ms, u)| ExplicitArrival {
                time_ms,
                user_id: format!("u{}", u + 1),
            })
            .collect(),
    )
}

/// Desk-scale workload: 10 users on 5 devices, 3 servers, one initial
/// release plus three rollouts with staggered server updates.
pub fn matrix_scenario(strategy: &StrategyConfig, seed: u64) -> Scenario {
    let mut strategy = strategy.clone();
    if strategy.deployment == Deployment::Server && strategy.dispatch == DispatchPolicy::RoundRobin {
        strategy.dispatch = DispatchPolicy::Random;
    }
    Scenario {
        strategy,
        users: 10,
        devices: 5,
        cloud_servers: 3,
        samples_per_user: 3,
        enroll_cost_ms_per_sample: 10,
        runtime_cost_ms: 20,
        latency: links(15, 2, 1, 5),
        releases: vec![
            release(0, "V1", [0, 0]),
            release(7_000, "V2", [200, 2_500]),
            release(14_000, "V3", [200, 2_500]),
            release(21_000, "V4", [200, 2_500]),
        ],
        runtime_arrivals: RuntimeArrivals::PoissonRatePerUserPerS(1.0),
        duration_ms: 28_000,
        seed,
        reenroll_parallelism: 1,
    }
}
