//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values (visible with `cargo test --test acceptance -- --nocapture`).
//! Every tolerance is pinned in the assertions below.

use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use gridtb_core::engine::{run, RunOptions};
use gridtb_core::fabric::{compile, parse_source, NodeState, ObjectResult, SourceSet};
use gridtb_core::release::{Gate, ReleaseStore, TagState};
use gridtb_core::scenario::Scenario;
use gridtb_core::storage::{resolve_pfn, Partition, Pfn, RcError, ReplicaCatalog, StorageElement};

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load_bundled(name: &str) -> Scenario {
    let path = scenarios_dir().join(name);
    let bytes = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Scenario::validate(&bytes).unwrap_or_else(|e| panic!("{name} invalid: {e:?}"))
}

fn run_scenario(
    scenario: &Scenario,
    seed: Option<u64>,
    trace: bool,
) -> gridtb_core::engine::RunOutput {
    run(
        scenario,
        &RunOptions {
            seed_override: seed,
            collect_trace: trace,
        },
    )
    .expect("run succeeds")
}

const BUNDLED: [&str; 6] = [
    "gass-cache-exhaustion.json",
    "cms-stress-replication.json",
    "cms-stress-workaround.json",
    "rb-corruption-day.json",
    "one-day-migration.json",
    "application-testbed.json",
];

// -- 1 -----------------------------------------------------------------------

#[test]
fn acceptance_01_pfn_composition() {
    let mut mounts = BTreeMap::new();
    mounts.insert("/flatfiles".to_string(), "p0".to_string());
    let mut vo_areas = BTreeMap::new();
    vo_areas.insert("atlas".to_string(), "/flatfiles/atlas".to_string());
    let se = StorageElement::new(
        "lxshare0384.cern.ch",
        "cern",
        vec![Partition {
            id: "p0".into(),
            capacity_bytes: 100_000_000_000,
            used_bytes: 0,
            inode_budget: 1_000_000,
            inodes_used: 0,
        }],
        mounts,
        vo_areas,
    );
    let (pfn, _) = resolve_pfn("prod/feb2003/simu001.fz", "atlas", &se).expect("resolves");
    let got = pfn.to_string();
    assert_eq!(
        got,
        "//lxshare0384.cern.ch/flatfiles/atlas/prod/feb2003/simu001.fz"
    );
    println!("ACCEPTANCE 01 pfn-composition: PASS ({got})");
}

// -- 2 -----------------------------------------------------------------------

fn ceiling_scenario(rb_count: usize, burst: u64) -> Scenario {
    let rbs: Vec<serde_json::Value> = (1..=rb_count)
        .map(|i| serde_json::json!({"rb_id": format!("rb{i}")}))
        .collect();
    let json = serde_json::json!({
        "seed": 2,
        "duration_h": 1,
        "cas": ["cern-ca"],
        "vos": [{"name": "atlas", "members": []}],
        "pools": [{"vo": "atlas", "capacity": 10}],
        "sites": [{
            "name": "cern",
            "ces": [{"ce_id": "ce-big", "worker_nodes": 64, "gass_cache_inodes": 10000000}],
            "ses": [{
                "host": "se1",
                "partitions": [{"id": "p0", "capacity_gb": 100}],
                "mounts": {"/flatfiles": "p0"},
                "vo_areas": {"atlas": "/flatfiles/atlas"}
            }]
        }],
        "rbs": rbs,
        "workloads": [{
            "name": "flood",
            "vo": "atlas",
            "jdl_template": "Executable=\"sim\"; VirtualOrganisation=\"atlas\"; Requirements=other.FreeCPUs>=0; Rank=0;",
            "walltime_s": 7200,
            "burst": {"count": burst, "at_s": 0}
        }],
        "faults": []
    });
    Scenario::validate(json.to_string().as_bytes()).expect("valid")
}

#[test]
fn acceptance_02_broker_ceiling() {
    let one = run_scenario(&ceiling_scenario(1, 600), None, false).report;
    assert_eq!(one.metrics.jobs_active_at_end, 512);
    assert_eq!(one.metrics.refused_at_capacity, 88);
    assert_eq!(one.metrics.rb_peak_active["rb1"], 512);

    let two = run_scenario(&ceiling_scenario(2, 1200), None, false).report;
    assert_eq!(two.metrics.jobs_active_at_end, 1024);
    assert_eq!(two.metrics.refused_at_capacity, 176);
    assert_eq!(two.metrics.rb_peak_active["rb1"], 512);
    assert_eq!(two.metrics.rb_peak_active["rb2"], 512);
    println!(
        "ACCEPTANCE 02 broker-ceiling: PASS (1 RB: 512 active / 88 refused; 2 RBs: 1024 active / 176 refused)"
    );
}

// -- 3 -----------------------------------------------------------------------

#[test]
fn acceptance_03_replica_catalog_limit() {
    let mut rc = ReplicaCatalog::new("cms", 64_000);
    for i in 0..1000 {
        let lfn = format!("{i:064}");
        let pfn = Pfn {
            host: "se1".into(),
            path: format!("/flatfiles/cms/{lfn}"),
        };
        rc.register(&lfn, &pfn, "/flatfiles/cms")
            .unwrap_or_else(|e| panic!("registration {i} failed: {e}"));
    }
    let lfn = format!("{:064}", 1000);
    let pfn = Pfn {
        host: "se1".into(),
        path: format!("/flatfiles/cms/{lfn}"),
    };
    let err = rc.register(&lfn, &pfn, "/flatfiles/cms").unwrap_err();
    assert!(matches!(err, RcError::CollectionFull { .. }));
    assert_eq!(rc.len(), 1000);
    println!("ACCEPTANCE 03 rc-limit: PASS (1000 x 64-byte names fit, the 1001st is refused)");
}

// -- 4 -----------------------------------------------------------------------

#[test]
fn acceptance_04_inode_exhaustion() {
    let scenario = load_bundled("gass-cache-exhaustion.json");
    let budget = scenario.sites[0].ces[0].gass_cache_inodes;
    let files_per_job = scenario.sites[0].ces[0].files_per_job;
    let burst = scenario.workloads[0].burst.as_ref().expect("burst");
    // arithmetic oracle: with an all-unclean workload nothing is ever freed,
    // so exactly floor(budget / files_per_job) submissions succeed
    let oracle_accepted = budget / files_per_job;
    assert_eq!(oracle_accepted, 100);
    let first_failing_arrival_ms = (burst.at_s + oracle_accepted * burst.interval_s) * 1_000;

    let report = run_scenario(&scenario, None, false).report;
    let m = &report.metrics;
    assert_eq!(
        m.jobs_done, oracle_accepted,
        "jobs 1..=100 run to completion"
    );
    assert_eq!(m.jobs_active_at_end, 1, "job 101 is stuck waiting");
    assert!(m.gram_wedged_failures >= 1);
    assert_eq!(
        m.time_to_first_inode_exhaustion_ms["ce-cern-01"], first_failing_arrival_ms,
        "first wedge happens at the 101st submission"
    );
    println!(
        "ACCEPTANCE 04 inode-exhaustion: PASS (100 accepted, 101st wedged at {} ms)",
        first_failing_arrival_ms
    );
}

// -- 5 -----------------------------------------------------------------------

#[test]
fn acceptance_05_misleading_free_space() {
    let pathological = load_bundled("cms-stress-replication.json");
    // the destination really does advertise >= 10x the file size
    let dst = &pathological.sites[0].ses[0];
    let aggregate: f64 = dst.partitions.iter().map(|p| p.capacity_gb).sum();
    let file_gb = pathological.replication_jobs[0].files[0].size_mb as f64 / 1000.0;
    assert!(aggregate >= 10.0 * file_gb);

    let report = run_scenario(&pathological, None, false).report;
    let m = &report.metrics;
    let failures = m.replication_failures.get("enospc").copied().unwrap_or(0);
    assert_eq!(failures, 10, "every transfer hits the full partition");
    assert_eq!(m.misleading_free_space, failures);
    assert_eq!(m.replication_successes, 0);

    let workaround = load_bundled("cms-stress-workaround.json");
    let report = run_scenario(&workaround, None, false).report;
    let m = &report.metrics;
    assert_eq!(m.replication_failures_total, 0);
    assert_eq!(m.misleading_free_space, 0);
    assert_eq!(m.replication_successes, 10);
    println!(
        "ACCEPTANCE 05 misleading-free-space: PASS (10/10 ENOSPC on the flat layout, 0 with planned partitions)"
    );
}

// -- 6 -----------------------------------------------------------------------

#[test]
fn acceptance_06_rb_corruption_statistics() {
    let json = serde_json::json!({
        "seed": 0,
        "duration_h": 2400, // 100 days
        "cas": ["cern-ca"],
        "vos": [{"name": "atlas", "members": []}],
        "pools": [{"vo": "atlas", "capacity": 10}],
        "sites": [{
            "name": "cern",
            "ces": [{"ce_id": "ce-a", "worker_nodes": 8, "gass_cache_inodes": 100000000}],
            "ses": [{
                "host": "se1",
                "partitions": [{"id": "p0", "capacity_gb": 100}],
                "mounts": {"/flatfiles": "p0"},
                "vo_areas": {"atlas": "/flatfiles/atlas"}
            }]
        }],
        "rbs": [{"rb_id": "rb1", "dual_cpu": true, "recovery_s": 1800, "detect_window_s": 3600}],
        "workloads": [{
            "name": "steady",
            "vo": "atlas",
            "jdl_template": "Executable=\"sim\"; VirtualOrganisation=\"atlas\"; Requirements=other.FreeCPUs>=0; Rank=0;",
            "walltime_s": 1200,
            "rate_per_hour": 2.0
        }],
        "faults": [{
            "target": "rb:rb1", "kind": "db-corruption",
            "process": {"poisson": {"rate_per_day": 1.0}},
            "effect_duration_s": 0
        }]
    });
    let scenario = Scenario::validate(json.to_string().as_bytes()).expect("valid");

    let mut total_corruptions: u64 = 0;
    for seed in 0..20u64 {
        let report = run_scenario(&scenario, Some(seed), false).report;
        let m = &report.metrics;
        let corruptions = m
            .fault_events
            .iter()
            .filter(|f| f.kind == "db-corruption")
            .count() as u64;
        total_corruptions += corruptions;
        // every recovery aborts exactly the jobs active at that moment
        let recovered_aborts: u64 = m.rb_recoveries.iter().map(|r| r.jobs_aborted).sum();
        assert_eq!(
            recovered_aborts,
            m.jobs_aborted.get("rb-recovery").copied().unwrap_or(0),
            "seed {seed}: per-recovery abort counts must add up"
        );
        assert_eq!(recovered_aborts, m.jobs_lost_to_rb_recovery);
    }
    let mean = total_corruptions as f64 / 20.0;
    assert!(
        (85.0..=115.0).contains(&mean),
        "mean corruption count {mean} outside [85, 115]"
    );
    println!("ACCEPTANCE 06 rb-corruption-statistics: PASS (mean {mean:.1} corruptions per 100 days over 20 seeds)");
}

// -- 7 -----------------------------------------------------------------------

#[test]
fn acceptance_07_cleanup_semantics() {
    let json = serde_json::json!({
        "seed": 4,
        "duration_h": 1,
        "cas": ["cern-ca"],
        "vos": [{"name": "atlas", "members": []}],
        "pools": [{"vo": "atlas", "capacity": 10}],
        "sites": [{
            "name": "cern",
            "ces": [{
                "ce_id": "ce-a",
                "worker_nodes": 2,
                "cleanup": {"base_s": 600, "per_inode_ms": 100, "trigger_at_s": [600]}
            }],
            "ses": [{
                "host": "se1",
                "partitions": [{"id": "p0", "capacity_gb": 100}],
                "mounts": {"/flatfiles": "p0"},
                "vo_areas": {"atlas": "/flatfiles/atlas"}
            }]
        }],
        "rbs": [{"rb_id": "rb1"}],
        "workloads": [
            {
                "name": "long",
                "vo": "atlas",
                "jdl_template": "Executable=\"sim\"; VirtualOrganisation=\"atlas\"; Requirements=other.FreeCPUs>=0; Rank=0;",
                "walltime_s": 3600,
                "burst": {"count": 3, "at_s": 0}
            },
            {
                "name": "late",
                "vo": "atlas",
                "jdl_template": "Executable=\"sim\"; VirtualOrganisation=\"atlas\"; Requirements=other.FreeCPUs>=0; Rank=0;",
                "walltime_s": 60,
                "burst": {"count": 1, "at_s": 700}
            }
        ],
        "faults": []
    });
    let scenario = Scenario::validate(json.to_string().as_bytes()).expect("valid");
    let output = run_scenario(&scenario, None, true);
    let m = &output.report.metrics;
    assert_eq!(
        m.jobs_lost_to_cleanup, 3,
        "exactly the three running jobs are lost"
    );
    assert_eq!(
        m.jobs_aborted.get("lost-to-cleanup").copied().unwrap_or(0),
        3
    );
    // cleanup window: trigger at 600 s, zero orphans -> base 600 s
    assert_eq!(m.service_downtime_ms["ce:ce-a"], 600_000);
    assert_eq!(m.jobs_done, 1, "the late job runs after the window");

    // the late job (id 3) cannot start inside [600s, 1200s): its completion
    // must come after window end + walltime
    let trace = output.trace.expect("trace");
    let completion_t = trace
        .iter()
        .find(|l| l.contains("job-complete") && l.contains("job-3"))
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .and_then(|v| v["t"].as_u64())
        .expect("late job completion in trace");
    assert!(
        completion_t >= 1_200_000 + 60_000,
        "late job completed at {completion_t}, inside the invisibility window"
    );
    println!(
        "ACCEPTANCE 07 cleanup-semantics: PASS (3 lost, 600 s off-grid, late job done at {} ms)",
        completion_t
    );
}

// -- 8 -----------------------------------------------------------------------

#[test]
fn acceptance_08_release_safety() {
    let gate_strategy = prop::sample::select(vec![Gate::Dev, Gate::Core, Gate::Application]);
    let step_strategy = (gate_strategy, prop::collection::vec(0usize..4, 0..3));
    let seq_strategy = (
        prop::collection::vec("[a-z]{2,8}", 1..5),
        prop::collection::vec(step_strategy, 1..8),
    );

    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&seq_strategy, |(mut packages, steps)| {
            packages.sort();
            packages.dedup();
            let mut store = ReleaseStore::new();
            let tag_id = store
                .propose_tag(
                    "t",
                    packages
                        .iter()
                        .map(|p| (p.clone(), "1.0".to_string()))
                        .collect(),
                )
                .expect("propose");
            let mut rejected_seen = false;
            for (i, (gate, fail_picks)) in steps.iter().enumerate() {
                let failed: Vec<String> = fail_picks
                    .iter()
                    .filter_map(|&idx| packages.get(idx % packages.len()).cloned())
                    .collect();
                let _ = store.run_gate(tag_id, *gate, &failed, i as u64);
                let tag = store.tag(tag_id).expect("tag");
                if tag.state == TagState::Rejected {
                    rejected_seen = true;
                }
                // no tag may sit at APPLICATION without passing dev AND core
                if tag.state == TagState::Application {
                    prop_assert!(tag.passed_gate(Gate::Dev), "application without dev pass");
                    prop_assert!(tag.passed_gate(Gate::Core), "application without core pass");
                }
                // rejection is terminal
                if rejected_seen {
                    prop_assert_eq!(tag.state, TagState::Rejected);
                }
            }
            Ok(())
        })
        .unwrap();
    println!("ACCEPTANCE 08 release-safety: PASS (1000 random gate-verdict sequences)");
}

// -- 9 -----------------------------------------------------------------------

#[test]
fn acceptance_09_fabric_convergence() {
    // the four-primary-partition constraint is a compile-time rejection
    let mut set = SourceSet::default();
    set.nodes.insert(
        "bad".into(),
        parse_source(
            "bad",
            "disk.partitions = /\ndisk.partitions += /var\ndisk.partitions += /usr\n\
             disk.partitions += /tmp\ndisk.partitions += /scratch\n",
        )
        .unwrap(),
    );
    assert!(compile(&set).is_err(), "five partitions must not compile");

    let component =
        prop::sample::select(vec!["auth", "disk", "edg-service", "network", "nis-exempt"]);
    let resource = (component, "[a-z]{1,6}", "[a-zA-Z0-9/_-]{1,12}");
    let profile_strategy = prop::collection::vec(resource, 1..16);
    let drift_strategy = prop::collection::vec(("[a-z]{1,6}", "[a-zA-Z0-9]{1,8}"), 0..8);

    let mut runner = TestRunner::new(Config {
        cases: 500,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(profile_strategy, drift_strategy), |(resources, drift)| {
            let mut text = String::new();
            for (component, key, value) in &resources {
                // avoid tripping the partition-count validator with random data
                if *component == "disk" && key == "partitions" {
                    continue;
                }
                text.push_str(&format!("{component}.{key} = {value}\n"));
            }
            let mut set = SourceSet::default();
            set.nodes
                .insert("node".into(), parse_source("node", &text).unwrap());
            let profiles = compile(&set).expect("compiles");
            let profile = &profiles["node"];

            let mut state = NodeState::default();
            // out-of-band drift on managed keys and unrelated keys alike
            for (component, _, _) in &resources {
                for (key, junk) in &drift {
                    state
                        .live_values
                        .insert(format!("{component}.{key}"), vec![junk.clone()]);
                }
            }
            state
                .live_values
                .insert("unmanaged.key".into(), vec!["untouched".into()]);
            let exempt_before: Vec<(String, Vec<String>)> = state
                .live_values
                .iter()
                .filter(|(k, _)| k.starts_with("nis-exempt."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();

            let first = state.apply(profile, true, &Default::default());
            // one pass converges: every managed, non-exempt key equals the profile
            for (component, keys) in &profile.resources {
                if component == "nis-exempt" {
                    continue;
                }
                for (key, values) in keys {
                    prop_assert_eq!(
                        state.live_values.get(&format!("{component}.{key}")),
                        Some(values),
                        "managed key did not converge"
                    );
                }
            }
            // exempt keys bitwise untouched
            for (key, before) in &exempt_before {
                prop_assert_eq!(state.live_values.get(key), Some(before));
            }
            prop_assert_eq!(
                state.live_values.get("unmanaged.key"),
                Some(&vec!["untouched".to_string()])
            );
            prop_assert!(!first.skipped);

            // idempotence: a second forced apply changes nothing
            let second = state.apply(profile, true, &Default::default());
            prop_assert_eq!(second.total_changes, 0);
            for result in second.objects.values() {
                match result {
                    ObjectResult::Ok { changed_keys } => prop_assert_eq!(*changed_keys, 0),
                    ObjectResult::Exempt => {}
                    ObjectResult::Failed { .. } => prop_assert!(false, "unexpected failure"),
                }
            }
            Ok(())
        })
        .unwrap();
    println!("ACCEPTANCE 09 fabric-convergence: PASS (500 random profiles + drift, 5-partition profile rejected)");
}

// -- 10 ----------------------------------------------------------------------

#[test]
fn acceptance_10_determinism() {
    for name in BUNDLED {
        let scenario = load_bundled(name);
        let first = run_scenario(&scenario, None, true);
        let second = run_scenario(&scenario, None, true);
        assert_eq!(
            first.report.canonical_json(),
            second.report.canonical_json(),
            "{name}: reports differ between identical runs"
        );
        assert_eq!(
            first.trace, second.trace,
            "{name}: event traces differ between identical runs"
        );
    }
    println!(
        "ACCEPTANCE 10 determinism: PASS ({} bundled scenarios byte-identical across double runs)",
        BUNDLED.len()
    );
}

// -- 11 ----------------------------------------------------------------------

/// Strip every fault and make every capacity effectively infinite.
fn strip_and_amplify(mut scenario: Scenario) -> Scenario {
    scenario.faults = Some(Vec::new());
    for site in &mut scenario.sites {
        for ce in &mut site.ces {
            ce.gass_cache_inodes = u64::MAX / 2;
            ce.cleanup.auto_threshold = None;
            ce.cleanup.trigger_at_s.clear();
        }
        for se in &mut site.ses {
            for p in &mut se.partitions {
                p.capacity_gb = 1_000_000.0;
                p.inodes = u64::MAX / 2;
            }
        }
    }
    for vo in &mut scenario.vos {
        vo.rc_name_byte_budget = u64::MAX / 2;
    }
    for pool in &mut scenario.pools {
        pool.capacity = 1_000_000;
    }
    scenario
}

#[test]
fn acceptance_11_clean_baseline() {
    for name in BUNDLED {
        let scenario = strip_and_amplify(load_bundled(name));
        scenario.check().expect("amplified scenario stays valid");
        let report = run_scenario(&scenario, None, false).report;
        let m = &report.metrics;
        assert_eq!(m.jobs_aborted_total, 0, "{name}: no job may fail");
        assert_eq!(
            m.replication_failures_total, 0,
            "{name}: no replication may fail"
        );
        assert_eq!(m.refused_at_capacity, 0, "{name}");
        assert_eq!(m.refused_rb_down, 0, "{name}");
        assert!(m.rejected_jobs.is_empty(), "{name}");
        assert_eq!(m.gram_wedged_failures, 0, "{name}");
        assert_eq!(m.misleading_free_space, 0, "{name}");
        assert!(m.fault_events.is_empty(), "{name}");
        // all work either finished or is still in flight at the horizon
        assert_eq!(
            m.jobs_done + m.jobs_active_at_end,
            m.jobs_submitted,
            "{name}"
        );
    }
    println!(
        "ACCEPTANCE 11 clean-baseline: PASS ({} fault-stripped scenarios at 100% success)",
        BUNDLED.len()
    );
}
