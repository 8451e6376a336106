mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{avg_and_makespan, random_dominance_case, random_federated_case, run_fed};
use fedsim_core::federation::{audit_minimality, TraceEntry, Verdict};

#[test]
fn federation_never_hurts_a_single_origin() {
    for seed in 0..100 {
        let case = random_dominance_case(seed);
        let (fed_avg, fed_span) = avg_and_makespan(&run_fed(&case, true));
        let (solo_avg, solo_span) = avg_and_makespan(&run_fed(&case, false));
        assert!(fed_avg <= solo_avg + 1e-6, "seed {seed}: avg {fed_avg} > {solo_avg}");
        assert!(fed_span <= solo_span + 1e-6, "seed {seed}: makespan {fed_span} > {solo_span}");
    }
}

#[test]
fn no_migration_while_origin_has_room() {
    let mut migrations = 0;
    for seed in 0..100 {
        let out = run_fed(&random_federated_case(seed), true);
        assert_eq!(audit_minimality(&out.trace), vec![], "seed {seed}");
        for entry in &out.trace {
            if let TraceEntry::Decision { slots_needed, origin_free, verdict: Verdict::Migrate(_), .. } = entry {
                assert!(origin_free < slots_needed, "seed {seed}");
            }
            if let TraceEntry::MigrationStarted { .. } = entry {
                migrations += 1;
            }
        }
    }
    assert!(migrations > 0, "the random scenarios should exercise migration");
}

#[test]
fn audit_flags_a_forged_migration() {
    let out = run_fed(&random_federated_case(3), true);
    let mut trace = out.trace.clone();
    let at = trace.iter().position(|e| matches!(e, TraceEntry::Decision { .. })).unwrap();
    if let TraceEntry::Decision { slots_needed, origin_free, verdict, .. } = &mut trace[at] {
        *slots_needed = 0;
        *origin_free = 0;
        *verdict = Verdict::Migrate(fedsim_core::EntityId::new(fedsim_core::EntityKind::Datacenter, 1));
    }
    assert!(!audit_minimality(&trace).is_empty());
}

#[test]
fn migration_preserves_spec_and_work() {
    for seed in 0..100 {
        let out = run_fed(&random_federated_case(seed), true);
        let mut started = BTreeMap::new();
        for entry in &out.trace {
            match entry {
                TraceEntry::MigrationStarted { new_vm, spec, remaining_mi, .. } => {
                    started.insert(*new_vm, (*spec, *remaining_mi));
                }
                TraceEntry::MigrationLanded { vm, origin_spec, target_spec, remaining_mi, .. } => {
                    assert_eq!(origin_spec, target_spec, "seed {seed}");
                    let (spec, before) = started[vm];
                    assert_eq!(spec, *target_spec);
                    assert_eq!(before, *remaining_mi, "seed {seed}: work changed in transit");
                }
                _ => {}
            }
        }
    }
}

#[test]
fn every_cloudlet_finishes_exactly_once() {
    for seed in 0..100 {
        let case = random_federated_case(seed);
        let expected: usize = case.batches.iter().map(|b| b.2).sum();
        for enabled in [true, false] {
            let out = run_fed(&case, enabled);
            assert_eq!(out.rows.len(), expected, "seed {seed}");
            let ids: BTreeSet<u64> = out.rows.iter().map(|r| r.id).collect();
            assert_eq!(ids.len(), expected);
            for r in &out.rows {
                assert!(r.submit <= r.start && r.start <= r.finish);
            }
            let finished = out.trace.iter().filter(|e| matches!(e, TraceEntry::CloudletFinished { .. })).count();
            assert_eq!(finished, expected);
        }
    }
}

#[test]
fn runs_are_deterministic() {
    for seed in [5, 17, 42] {
        let case = random_federated_case(seed);
        assert_eq!(run_fed(&case, true).trace, run_fed(&case, true).trace);
    }
}
