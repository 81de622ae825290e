mod common;

use common::*;
use proptest::prelude::*;
use vcsim::domain::{Outcome, UserProfile, VersionId};
use vcsim::kernel::SimTime;
use vcsim::metrics::RequestKind;
use vcsim::runner::{build, compare, run_built, run_detailed};
use vcsim::strategies::{Deployment, Mitigation, Policy, StrategyConfig};

fn server_online(mitigation: Mitigation) -> StrategyConfig {
    StrategyConfig::new(Deployment::Server, Policy::SingleOnline, mitigation)
}

#[test]
fn no_releases_means_no_churn() {
    for strategy in StrategyConfig::all_combinations() {
        let mut s = matrix_scenario(&strategy, 4);
        s.releases.clear();
        if strategy.policy == Policy::Double {
            s.releases = vec![release(0, "V1", [0, 0])];
        }
        let r = vcsim::run(&s).unwrap();
        assert_eq!(r.bounce_count, 0, "{strategy}");
        assert_eq!(r.total_reenrollments, 0, "{strategy}");
        assert_eq!(r.maintenance_ms, 0, "{strategy}");
        assert_eq!(r.availability, Some(1.0), "{strategy}");
    }
}

#[test]
fn same_seed_same_report() {
    let s = matrix_scenario(&server_online(Mitigation::None), 17);
    let a = run_detailed(&s, true).unwrap();
    let b = run_detailed(&s, true).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn report_json_round_trips() {
    let r = vcsim::run(&scenario_file("fig6_rollout")).unwrap();
    let text = r.to_json();
    assert!(text.ends_with('\n'));
    assert_eq!(vcsim::Report::from_json(&text).unwrap(), r);
}

#[test]
fn corrupted_device_profile_halts_the_run() {
    let s = scenario_file("device_update");
    let (mut world, mut sim) = build(&s, false);
    sim.run_until(SimTime(300), &mut world).unwrap();
    let device = &mut world.devices[0];
    let user = device.node.owner_users[0].clone();
    let wrong = UserProfile {
        user_id: user.clone(),
        version: VersionId::new("V9", 9),
        digest: 0,
    };
    device.node.stored_profiles.insert(user, vec![wrong]);
    let failed = run_built(&s, world, sim).err().expect("mismatch trips the run");
    assert!(failed.error.is_mismatch(), "{}", failed.error);
    assert_eq!(failed.partial.mismatch_violations, 1);
    assert!(failed.to_string().starts_with("RUN_FAILED at t="));
}

#[test]
fn missing_audio_is_counted_not_fatal() {
    let s = scenario_file("device_update");
    let (mut world, mut sim) = build(&s, false);
    sim.run_until(SimTime(900), &mut world).unwrap();
    let device = &mut world.devices[0];
    let user = device.node.owner_users[0].clone();
    device.node.stored_audio.remove(&user);
    let out = run_built(&s, world, sim).expect("run completes");
    assert_eq!(out.report.mismatch_violations, 0);
    assert!(out.log.no_stored_audio_events >= 1);
}

#[test]
fn compare_relations() {
    let mut runs = Vec::new();
    for strategy in StrategyConfig::all_combinations() {
        runs.push((strategy.to_string(), matrix_scenario(&strategy, 2)));
    }
    let dup = runs[0].clone();
    runs.push(("dup".into(), dup.1.clone()));
    let mut broken = matrix_scenario(&server_online(Mitigation::None), 2);
    broken.strategy.deployment = Deployment::Hybrid;
    broken.strategy.policy = Policy::Double;
    broken.releases.clear();
    runs.push(("broken".into(), broken));

    let rows = compare(&runs);
    assert_eq!(rows.len(), runs.len());
    let first = &rows[0];
    let again = &rows[rows.len() - 2];
    assert_eq!((first.availability, first.p95_runtime_ms), (again.availability, again.p95_runtime_ms));
    assert_eq!(first.total_reenrollments, again.total_reenrollments);

    let last = rows.last().unwrap();
    let err = last.error.as_deref().expect("unbuildable scenario becomes an error row");
    assert!(err.starts_with("VALIDATION_ERROR") || err.starts_with("RUN_FAILED"), "{err}");

    for row in &rows[..rows.len() - 1] {
        assert!(row.error.is_none(), "{}: {:?}", row.name, row.error);
        let offline = row.strategy.contains("SINGLE_OFFLINE");
        assert_eq!(row.maintenance_ms > 0, offline, "{}", row.name);
        // Hybrid double without handshakes goes stale by design.
        let stale_prone = row.strategy.starts_with("HYBRID DOUBLE");
        if !offline && !stale_prone {
            assert_eq!(row.availability, Some(1.0), "{}", row.name);
        }
    }
}

#[test]
fn offline_stops_runtime_only_inside_window() {
    let s = matrix_scenario(&StrategyConfig::new(Deployment::Server, Policy::SingleOffline, Mitigation::None), 9);
    let out = run_detailed(&s, false).unwrap();
    assert_eq!(out.log.maintenance_windows.len(), 3);
    let maint = out.report.requests(RequestKind::Runtime, Outcome::Maintenance);
    assert!(maint > 0);
    assert!(out.report.availability.unwrap() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_strategy_any_seed_is_mismatch_free(idx in 0usize..9, seed in any::<u64>()) {
        let strategy = StrategyConfig::all_combinations()[idx].clone();
        let s = matrix_scenario(&strategy, seed);
        let out = run_detailed(&s, false).unwrap();
        prop_assert_eq!(out.report.mismatch_violations, 0);
        let served = out.report.availability.unwrap();
        prop_assert!((0.0..=1.0).contains(&served));
        // Records complete no earlier than submitted, within the horizon.
        for r in &out.log.records {
            prop_assert!(r.submitted <= r.completed);
            prop_assert!(r.completed.0 <= s.duration_ms);
        }
    }

    #[test]
    fn device_profiles_track_local_model(seed in any::<u64>()) {
        let mut s = matrix_scenario(&StrategyConfig::new(Deployment::Device, Policy::SingleOnline, Mitigation::None), seed);
        s.duration_ms = 12_000;
        let out = run_detailed(&s, false).unwrap();
        for d in &out.world.devices {
            if d.updating() {
                continue;
            }
            let model = d.node.local_model.clone().unwrap();
            for profiles in d.node.stored_profiles.values() {
                for p in profiles {
                    prop_assert_eq!(&p.version, &model);
                }
            }
        }
    }

    #[test]
    fn hash_lb_never_downgrades(seed in any::<u64>()) {
        let s = matrix_scenario(&server_online(Mitigation::HashLb), seed);
        let out = run_detailed(&s, false).unwrap();
        prop_assert_eq!(out.report.bounce_count, 0);
    }
}
