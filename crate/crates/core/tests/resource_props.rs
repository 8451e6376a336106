mod common;

use common::{dc_id, host, oracle_gap, random_fluid_case, FluidCase};
use fedsim_core::resource::{Cloudlet, CloudletId, Datacenter, HostSpec, VmId, VmSpec};
use fedsim_core::SimTime;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn host_strategy() -> impl Strategy<Value = HostSpec> {
    (1u32..=4, 1024u64..8192, 10u64..200).prop_map(|(pe, ram, disk)| HostSpec {
        pe_count: pe,
        mips_per_pe: 1000.0,
        ram_mb: ram,
        storage_gb: disk,
    })
}

fn vm_strategy() -> impl Strategy<Value = VmSpec> {
    (128u64..2048, 1u64..40, 1u32..=2).prop_map(|(ram, disk, pe)| VmSpec::new(ram, disk, pe))
}

proptest! {
    #[test]
    fn allocation_respects_capacity(
        hosts in prop::collection::vec(host_strategy(), 1..4),
        oversub in prop::sample::select(vec![1.0, 1.5, 2.0]),
        vms in prop::collection::vec(vm_strategy(), 0..20),
    ) {
        let mut dc = Datacenter::new(dc_id(0), hosts.clone(), oversub).unwrap();
        for (i, spec) in vms.iter().enumerate() {
            let fits = dc.can_host(spec);
            prop_assert_eq!(dc.allocate_vm(VmId(i as u64), *spec).is_ok(), fits);
        }
        let mut occupied = 0;
        for (h, spec) in hosts.iter().enumerate() {
            let usage = dc.host_usage(h).unwrap();
            prop_assert!(usage.used_pes <= (spec.pe_count as f64 * oversub).floor() as u32);
            prop_assert!(usage.used_ram_mb <= spec.ram_mb);
            prop_assert!(usage.used_storage_gb <= spec.storage_gb);
            occupied += usage.used_pes;
        }
        prop_assert_eq!(occupied, dc.occupied_slots());
        prop_assert_eq!(dc.occupied_slots() + dc.free_slots(), dc.slot_capacity());
    }

    #[test]
    fn allocate_then_deallocate_restores_state(
        hosts in prop::collection::vec(host_strategy(), 1..4),
        vms in prop::collection::vec(vm_strategy(), 0..12),
    ) {
        let mut dc = Datacenter::new(dc_id(0), hosts.clone(), 1.0).unwrap();
        let free = dc.free_slots();
        let placed: Vec<_> = vms.iter().enumerate().filter_map(|(i, s)| dc.allocate_vm(VmId(i as u64), *s).ok().map(|_| (VmId(i as u64), *s))).collect();
        for (vm, spec) in placed.iter().rev() {
            prop_assert_eq!(dc.deallocate_vm(*vm).unwrap(), *spec);
        }
        prop_assert_eq!(dc.free_slots(), free);
        for h in 0..hosts.len() {
            let u = dc.host_usage(h).unwrap();
            prop_assert_eq!((u.used_pes, u.used_ram_mb, u.used_storage_gb, u.resident_vms), (0, 0, 0, 0));
        }
    }

    #[test]
    fn work_is_conserved(
        pes in prop::collection::vec(1u32..=4, 1..3),
        vm_pes in prop::collection::vec(1u32..=2, 1..6),
        lengths in prop::collection::vec(1_000.0f64..500_000.0, 1..10),
        dt in 1.0f64..400.0,
    ) {
        let hosts: Vec<_> = pes.iter().map(|p| host(*p)).collect();
        let mut dc = Datacenter::new(dc_id(0), hosts, 2.0).unwrap();
        let vms: Vec<VmId> = vm_pes.iter().enumerate().filter_map(|(i, pe)| {
            dc.allocate_vm(VmId(i as u64), VmSpec::new(128, 1, *pe)).ok().map(|_| VmId(i as u64))
        }).collect();
        prop_assume!(!vms.is_empty());
        let total: f64 = lengths.iter().sum();
        for (j, len) in lengths.iter().enumerate() {
            dc.submit_cloudlet(vms[j % vms.len()], Cloudlet::new(CloudletId(j as u64), *len, SimTime::ZERO)).unwrap();
        }
        for h in 0..dc.host_count() {
            let spec = dc.host_spec(h).unwrap();
            let granted = dc.host_usage(h).unwrap().granted_mips;
            prop_assert!(granted <= spec.capacity_mips() * (1.0 + 1e-12));
        }
        let mut finished = 0.0;
        let mut now = 0.0;
        while now < 1e7 && dc.remaining_mi() > 0.0 {
            let before = dc.delivered_mi() + dc.remaining_mi();
            now += dt;
            finished += dc.advance_to(SimTime::secs(now)).unwrap().iter().map(|c| c.length_mi).sum::<f64>();
            let after = dc.delivered_mi() + dc.remaining_mi();
            prop_assert!((before - after).abs() <= 1e-6 * total.max(1.0), "{before} vs {after}");
        }
        prop_assert!((finished - total).abs() <= 1e-6 * total);
        prop_assert!((dc.delivered_mi() - total).abs() <= 1e-6 * total);
    }
}

#[test]
fn event_driven_matches_fluid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 300 {
        let case = random_fluid_case(&mut rng);
        if let Some(gap) = oracle_gap(&case) {
            assert!(gap <= 1e-6, "gap {gap} on {case:?}");
            checked += 1;
        }
    }
}

#[test]
fn oracle_reproduces_reference_durations() {
    let one = FluidCase { hosts: vec![host(1)], oversubscription: 1.0, vm_pes: vec![1], cloudlets: vec![(0, 1_800_000.0, 0.0)] };
    let shared = FluidCase {
        hosts: vec![host(1)],
        oversubscription: 2.0,
        vm_pes: vec![1, 1],
        cloudlets: vec![(0, 1_800_000.0, 0.0), (1, 1_800_000.0, 0.0)],
    };
    let in_vm = FluidCase {
        hosts: vec![host(1)],
        oversubscription: 1.0,
        vm_pes: vec![1],
        cloudlets: vec![(0, 1_800_000.0, 0.0), (0, 1_800_000.0, 0.0)],
    };
    for (case, expected) in [(one, 1800.0), (shared, 3600.0), (in_vm, 3600.0)] {
        let (sim, placement) = common::simulate_fluid(&case).unwrap();
        let oracle = common::fluid_oracle(&case, &placement, 1.0);
        for (s, o) in sim.iter().zip(&oracle) {
            assert!((s - expected).abs() < 1e-9 && (o - expected).abs() < 1e-9, "{s} {o} vs {expected}");
        }
    }
}
