#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use fedsim_core::federation::{FederationOutcome, FederationParams, FederationSim, ProviderSetup};
use fedsim_core::market::Application;
use fedsim_core::resource::{run_arrivals, Cloudlet, CloudletId, Datacenter, HostSpec, VmId, VmSpec};
use fedsim_core::{Cents, EntityId, EntityKind, SimTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn dc_id(i: usize) -> EntityId {
    EntityId::new(EntityKind::Datacenter, i)
}

pub fn host(pe_count: u32) -> HostSpec {
    HostSpec { pe_count, mips_per_pe: 1000.0, ram_mb: 10_240, storage_gb: 2048 }
}

/// A small fluid-scheduling case: VMs pinned to hosts, cloudlets pinned to VMs.
#[derive(Debug, Clone)]
pub struct FluidCase {
    pub hosts: Vec<HostSpec>,
    pub oversubscription: f64,
    pub vm_pes: Vec<u32>,
    /// (vm index, length in MI, submit time in s)
    pub cloudlets: Vec<(usize, f64, f64)>,
}

/// Finish time per cloudlet from the event-driven scheduler, plus the host each VM landed on.
pub fn simulate_fluid(case: &FluidCase) -> Option<(Vec<f64>, Vec<usize>)> {
    let mut dc = Datacenter::new(dc_id(0), case.hosts.clone(), case.oversubscription).ok()?;
    let mut placement = Vec::new();
    for (i, pe) in case.vm_pes.iter().enumerate() {
        placement.push(dc.allocate_vm(VmId(i as u64), VmSpec::new(256, 1, *pe)).ok()?);
    }
    let arrivals = case
        .cloudlets
        .iter()
        .enumerate()
        .map(|(j, (vm, len, at))| (VmId(*vm as u64), Cloudlet::new(CloudletId(j as u64), *len, SimTime::secs(*at))))
        .collect();
    let done = run_arrivals(&mut dc, arrivals).expect("fluid run");
    let mut finish = vec![f64::NAN; case.cloudlets.len()];
    for c in done {
        finish[c.id.0 as usize] = c.finish_at.expect("finished").as_secs();
    }
    Some((finish, placement))
}

/// Max-min fair split of `capacity` among demands capped at `caps`.
fn water_fill(capacity: f64, caps: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..caps.len()).collect();
    order.sort_by(|a, b| caps[*a].total_cmp(&caps[*b]));
    let mut grants = vec![0.0; caps.len()];
    let mut left = capacity;
    for (k, &i) in order.iter().enumerate() {
        let share = left / (order.len() - k) as f64;
        grants[i] = caps[i].min(share);
        left -= grants[i];
    }
    grants
}

/// Independent reference: integrates the fluid model with a fixed step of
/// `step_s`, shortening a step to land exactly on the first arrival or
/// completion it would cross. Rates are rebuilt from scratch every step.
pub fn fluid_oracle(case: &FluidCase, placement: &[usize], step_s: f64) -> Vec<f64> {
    let n = case.cloudlets.len();
    let mut remaining: Vec<f64> = case.cloudlets.iter().map(|c| c.1).collect();
    let mut finish = vec![f64::NAN; n];
    let mut t = 0.0_f64;
    while finish.iter().any(|f| f.is_nan()) {
        let active: Vec<bool> = (0..n).map(|j| finish[j].is_nan() && case.cloudlets[j].2 <= t).collect();
        let mut per_vm = vec![0usize; case.vm_pes.len()];
        for j in (0..n).filter(|j| active[*j]) {
            per_vm[case.cloudlets[j].0] += 1;
        }
        let mut vm_rate = vec![0.0; case.vm_pes.len()];
        for (h, spec) in case.hosts.iter().enumerate() {
            let busy: Vec<usize> = (0..case.vm_pes.len()).filter(|v| placement[*v] == h && per_vm[*v] > 0).collect();
            let caps: Vec<f64> = busy.iter().map(|v| case.vm_pes[*v] as f64 * spec.mips_per_pe).collect();
            let grants = water_fill(spec.pe_count as f64 * spec.mips_per_pe, &caps);
            for (v, g) in busy.iter().zip(grants) {
                vm_rate[*v] = g;
            }
        }
        let rate = |j: usize| vm_rate[case.cloudlets[j].0] / per_vm[case.cloudlets[j].0] as f64;

        let mut dt = step_s;
        for j in 0..n {
            if active[j] {
                dt = dt.min(remaining[j] / rate(j));
            } else if finish[j].is_nan() {
                dt = dt.min(case.cloudlets[j].2 - t);
            }
        }
        for j in (0..n).filter(|j| active[*j]) {
            remaining[j] -= rate(j) * dt;
        }
        t += dt;
        for j in (0..n).filter(|j| active[*j]) {
            if remaining[j] <= 1e-9 * case.cloudlets[j].1 {
                finish[j] = t;
            }
        }
    }
    finish
}

pub fn random_fluid_case(rng: &mut ChaCha8Rng) -> FluidCase {
    let hosts = (0..rng.random_range(1..=3)).map(|_| host(rng.random_range(1..=4))).collect();
    let oversubscription = [1.0, 1.5, 2.0][rng.random_range(0..3)];
    let vm_pes: Vec<u32> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..=2)).collect();
    let cloudlets = (0..rng.random_range(1..=8))
        .map(|_| {
            let vm = rng.random_range(0..vm_pes.len());
            let len = if rng.random_bool(0.3) { 1_800_000.0 } else { rng.random_range(10_000.0..2_000_000.0) };
            let at = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..3000.0) };
            (vm, len, at)
        })
        .collect();
    FluidCase { hosts, oversubscription, vm_pes, cloudlets }
}

/// Largest |sim - oracle| over the cloudlets, or None if the VMs did not all fit.
pub fn oracle_gap(case: &FluidCase) -> Option<f64> {
    let (sim, placement) = simulate_fluid(case)?;
    let oracle = fluid_oracle(case, &placement, 1.0);
    Some(sim.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// A federated experiment: providers and VM batches.
#[derive(Debug, Clone)]
pub struct FedCase {
    /// (host count, PEs per host, oversubscription, price in cents)
    pub providers: Vec<(usize, u32, f64, i64)>,
    /// (origin, submit time, VM count, VM PEs, cloudlet length)
    pub batches: Vec<(usize, f64, usize, u32, f64)>,
    pub migration_delay_s: f64,
}

pub fn run_fed(case: &FedCase, enabled: bool) -> FederationOutcome {
    let providers = case
        .providers
        .iter()
        .enumerate()
        .map(|(i, (hosts, pe, oversub, price))| ProviderSetup {
            name: format!("provider{i}"),
            datacenter: Datacenter::uniform(dc_id(i), *hosts, host(*pe), *oversub).unwrap(),
            price_per_hour: Cents(*price),
            sla_terms: BTreeMap::new(),
        })
        .collect();
    let params = FederationParams { enabled, migration_delay_s: case.migration_delay_s, ..FederationParams::default() };
    let mut sim = FederationSim::new(providers, params).unwrap();
    for (origin, at, count, pe, len) in &case.batches {
        sim.submit(Application {
            origin: dc_id(*origin),
            submit_at: SimTime::secs(*at),
            vms: vec![VmSpec::new(256, 1, *pe); *count],
            cloudlet_lengths_mi: vec![*len; *count],
        })
        .unwrap();
    }
    sim.run(SimTime::secs(1e9)).expect("federated run completes")
}

/// Single origin, identical 1-PE hosts, 1-PE VMs, no migration delay.
pub fn random_dominance_case(seed: u64) -> FedCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let providers = (0..rng.random_range(2..=4)).map(|_| (rng.random_range(1..=12), 1, 1.0, 10)).collect();
    let batches = (0..rng.random_range(1..=4))
        .map(|_| {
            let at = (rng.random_range(0..8) as f64) * 300.0;
            (0, at, rng.random_range(1..=20), 1, rng.random_range(100_000.0..3_000_000.0))
        })
        .collect();
    FedCase { providers, batches, migration_delay_s: 0.0 }
}

/// Several origins, mixed host shapes and prices, VM widths and delays.
pub fn random_federated_case(seed: u64) -> FedCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let providers: Vec<_> = (0..rng.random_range(2..=5))
        .map(|_| (rng.random_range(1..=10), rng.random_range(1..=4), [1.0, 2.0][rng.random_range(0..2)], rng.random_range(1..50)))
        .collect();
    let widest = providers.iter().map(|p| p.1).min().unwrap().min(2);
    let batches = (0..rng.random_range(1..=6))
        .map(|_| {
            (
                rng.random_range(0..providers.len()),
                rng.random_range(0.0..2000.0),
                rng.random_range(1..=15),
                rng.random_range(1..=widest),
                rng.random_range(50_000.0..2_000_000.0),
            )
        })
        .collect();
    let migration_delay_s = [0.0, 5.0, 60.0][rng.random_range(0..3)];
    FedCase { providers, batches, migration_delay_s }
}

pub fn avg_and_makespan(outcome: &FederationOutcome) -> (f64, f64) {
    let rows = &outcome.rows;
    let avg = rows.iter().map(|r| r.turnaround()).sum::<f64>() / rows.len() as f64;
    let first = rows.iter().map(|r| r.submit).min().unwrap();
    let last = rows.iter().map(|r| r.finish).max().unwrap();
    (avg, last - first)
}
