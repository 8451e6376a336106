//! Cloud Coordinators and the slot-triggered migration policy.
//!
//! Each provider runs a coordinator that senses its datacenter, publishes the
//! result to the exchange and decides where incoming VM batches go. A batch is
//! kept local when the origin has enough free slots. Otherwise the part that
//! fits stays local and the excess is re-created at the provider the exchange
//! quotes; with no quote the excess waits in a FIFO that is re-evaluated on
//! every slot release.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::currency::Cents;
use crate::kernel::{Engine, EntityId, EntityKind, EventId, KernelError, SimTime};
use crate::market::{Application, Broker, Exchange, LookupRequest, MarketError, Offer, Qos};
use crate::report::TaskRow;
use crate::resource::{Cloudlet, Datacenter, ResourceError, VmId, VmSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FederationError {
    #[error("target {target} cannot host the migrated VM")]
    TargetFull { target: EntityId },
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{unfinished} cloudlets unfinished at t={at}; last events:\n{context}")]
    Incomplete { unfinished: usize, at: SimTime, context: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityReport {
    pub provider: EntityId,
    pub free_slots: u32,
    pub slot_capacity: u32,
    pub utilization: f64,
    pub at: SimTime,
}

pub fn sense(dc: &Datacenter, at: SimTime) -> AvailabilityReport {
    let capacity = dc.slot_capacity();
    let free = dc.free_slots();
    AvailabilityReport {
        provider: dc.id(),
        free_slots: free,
        slot_capacity: capacity,
        utilization: if capacity == 0 { 1.0 } else { (capacity - free) as f64 / capacity as f64 },
        at,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Local,
    Migrate(EntityId),
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementRequest {
    pub count: u32,
    pub spec: VmSpec,
}

impl PlacementRequest {
    pub fn slots_needed(&self) -> u32 {
        self.count * self.spec.pe_count
    }
}

/// The policy itself. `exchange` is `None` when federation is disabled.
pub fn decide_placement(
    origin: &AvailabilityReport,
    requester: EntityId,
    exchange: Option<&Exchange>,
    request: PlacementRequest,
    qos: Qos,
) -> Verdict {
    if origin.free_slots >= request.slots_needed() {
        return Verdict::Local;
    }
    let Some(exchange) = exchange else {
        return Verdict::Deferred;
    };
    let lookup = LookupRequest { requester, count: request.count, spec: request.spec, qos, exclude: vec![origin.provider] };
    match exchange.match_request(&lookup) {
        Some(quote) => Verdict::Migrate(quote.provider),
        None => Verdict::Deferred,
    }
}

/// A VM that currently has no host: either never placed, or evacuated from its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct VmInTransit {
    pub vm: VmId,
    pub spec: VmSpec,
    pub cloudlets: Vec<Cloudlet>,
}

impl VmInTransit {
    pub fn remaining_mi(&self) -> f64 {
        self.cloudlets.iter().map(|c| c.remaining_mi).sum()
    }
}

/// Removes a VM from its origin, keeping the unfinished work.
pub fn evacuate(origin: &mut Datacenter, vm: VmId) -> Result<VmInTransit, FederationError> {
    let (spec, cloudlets) = origin.detach_vm(vm)?;
    Ok(VmInTransit { vm, spec, cloudlets })
}

/// Creates an identically configured VM at `target` and resumes the cloudlets there.
/// On failure the transit record is handed back untouched.
pub fn land(target: &mut Datacenter, transit: VmInTransit, new_vm: VmId) -> Result<VmId, (FederationError, VmInTransit)> {
    if target.allocate_vm(new_vm, transit.spec).is_err() {
        return Err((FederationError::TargetFull { target: target.id() }, transit));
    }
    for c in transit.cloudlets {
        target.submit_cloudlet(new_vm, c).expect("VM just allocated");
    }
    Ok(new_vm)
}

/// Two-step migration with no transfer delay: same-config VM at the target, then the cloudlets.
pub fn migrate_vm(vm: VmId, origin: &mut Datacenter, target: &mut Datacenter, new_vm: VmId) -> Result<VmId, FederationError> {
    let spec = origin.vm_spec(vm).ok_or(ResourceError::UnknownVm(vm))?;
    if !target.can_host(&spec) {
        return Err(FederationError::TargetFull { target: target.id() });
    }
    let transit = evacuate(origin, vm)?;
    land(target, transit, new_vm).map_err(|(e, _)| e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceEntry {
    Sensed(AvailabilityReport),
    Decision {
        at: SimTime,
        origin: EntityId,
        slots_needed: u32,
        origin_free: u32,
        verdict: Verdict,
    },
    VmPlaced {
        at: SimTime,
        vm: VmId,
        provider: EntityId,
        host: usize,
    },
    MigrationStarted {
        at: SimTime,
        vm: VmId,
        new_vm: VmId,
        origin: EntityId,
        target: EntityId,
        spec: VmSpec,
        remaining_mi: f64,
    },
    MigrationLanded {
        at: SimTime,
        vm: VmId,
        origin: EntityId,
        target: EntityId,
        origin_spec: VmSpec,
        target_spec: VmSpec,
        remaining_mi: f64,
    },
    TargetFull {
        at: SimTime,
        vm: VmId,
        target: EntityId,
    },
    CloudletFinished {
        at: SimTime,
        cloudlet: u64,
        vm: VmId,
        provider: EntityId,
    },
    VmDestroyed {
        at: SimTime,
        vm: VmId,
        provider: EntityId,
    },
}

/// A migration issued while the origin's last report showed enough free slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyViolation {
    pub index: usize,
    pub reason: String,
}

/// Replays a trace against the availability reports it contains and flags any
/// migration the policy should not have issued.
pub fn audit_minimality(trace: &[TraceEntry]) -> Vec<PolicyViolation> {
    let mut latest: BTreeMap<EntityId, AvailabilityReport> = BTreeMap::new();
    let mut last_verdict: BTreeMap<EntityId, Verdict> = BTreeMap::new();
    let mut violations = Vec::new();
    for (index, entry) in trace.iter().enumerate() {
        match entry {
            TraceEntry::Sensed(r) => {
                latest.insert(r.provider, *r);
            }
            TraceEntry::Decision { origin, slots_needed, verdict, .. } => {
                last_verdict.insert(*origin, *verdict);
                if let Verdict::Migrate(_) = verdict {
                    match latest.get(origin) {
                        None => violations.push(PolicyViolation { index, reason: "migration without a prior availability report".into() }),
                        Some(r) if r.free_slots >= *slots_needed => violations.push(PolicyViolation {
                            index,
                            reason: format!("origin had {} free slots for a {}-slot request", r.free_slots, slots_needed),
                        }),
                        Some(_) => {}
                    }
                }
            }
            TraceEntry::MigrationStarted { origin, target, .. } if last_verdict.get(origin) != Some(&Verdict::Migrate(*target)) => {
                violations.push(PolicyViolation { index, reason: "migration not preceded by a matching decision".into() });
            }
            _ => {}
        }
    }
    violations
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederationParams {
    pub enabled: bool,
    pub migration_delay_s: f64,
    /// Carried for accounting; not charged by the policy.
    pub transfer_cost_per_mb: Cents,
    pub sense_period_s: Option<f64>,
    pub qos: Qos,
}

impl Default for FederationParams {
    fn default() -> Self {
        FederationParams {
            enabled: true,
            migration_delay_s: 0.0,
            transfer_cost_per_mb: Cents::ZERO,
            sense_period_s: None,
            qos: Qos::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProviderSetup {
    pub name: String,
    pub datacenter: Datacenter,
    pub price_per_hour: Cents,
    pub sla_terms: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
struct Batch {
    spec: VmSpec,
    vms: Vec<VmInTransit>,
}

#[derive(Debug)]
struct Coordinator {
    id: EntityId,
    deferred: VecDeque<Batch>,
}

struct Provider {
    name: String,
    dc: Datacenter,
    price: Cents,
    sla: BTreeMap<String, String>,
    coordinator: Coordinator,
    completion: Option<EventId>,
}

#[derive(Debug, Clone)]
enum Msg {
    Submit(usize),
    Place(usize, Batch),
    Land { origin: usize, target: usize, transit: VmInTransit, new_vm: VmId },
    Complete,
    Reevaluate,
    SenseTick,
}

#[derive(Debug, Clone)]
struct CloudletLog {
    submit: SimTime,
    start: Option<SimTime>,
    finish: Option<SimTime>,
    provider: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub rows: Vec<TaskRow>,
    pub trace: Vec<TraceEntry>,
    pub end: SimTime,
}

/// Federated world: providers with coordinators, one exchange and one broker.
pub struct FederationSim {
    engine: Engine<Msg>,
    providers: Vec<Provider>,
    exchange: Exchange,
    broker: Broker,
    broker_id: EntityId,
    params: FederationParams,
    apps: Vec<Application>,
    outstanding: BTreeMap<VmId, usize>,
    cloudlets: BTreeMap<u64, CloudletLog>,
    trace: Vec<TraceEntry>,
}

impl FederationSim {
    /// Provider `i`'s datacenter must carry `EntityId { kind: Datacenter, index: i }`.
    pub fn new(providers: Vec<ProviderSetup>, params: FederationParams) -> Result<Self, FederationError> {
        let mut engine = Engine::new();
        let mut exchange = Exchange::new();
        engine.register(EntityKind::Exchange);
        let broker_id = engine.register(EntityKind::Broker);
        let mut built = Vec::with_capacity(providers.len());
        for (i, setup) in providers.into_iter().enumerate() {
            let dc_id = engine.register(EntityKind::Datacenter);
            let coord_id = engine.register(EntityKind::Coordinator);
            if setup.datacenter.id() != dc_id {
                return Err(
                    ResourceError::InvalidSpec(format!("provider {i} datacenter id {} should be {dc_id}", setup.datacenter.id())).into()
                );
            }
            exchange.register_provider(dc_id);
            built.push(Provider {
                name: setup.name,
                dc: setup.datacenter,
                price: setup.price_per_hour,
                sla: setup.sla_terms,
                coordinator: Coordinator { id: coord_id, deferred: VecDeque::new() },
                completion: None,
            });
        }
        let mut sim = FederationSim {
            engine,
            providers: built,
            exchange,
            broker: Broker::new(),
            broker_id,
            params,
            apps: Vec::new(),
            outstanding: BTreeMap::new(),
            cloudlets: BTreeMap::new(),
            trace: Vec::new(),
        };
        for i in 0..sim.providers.len() {
            sim.sense_and_publish(i)?;
        }
        if let Some(period) = params.sense_period_s.filter(|p| *p > 0.0) {
            for i in 0..sim.providers.len() {
                let id = sim.providers[i].coordinator.id;
                sim.engine.schedule(SimTime::secs(period), id, Msg::SenseTick)?;
            }
        }
        Ok(sim)
    }

    /// Queues an application; it reaches the broker at `app.submit_at`.
    pub fn submit(&mut self, app: Application) -> Result<(), FederationError> {
        if app.origin.kind != EntityKind::Datacenter || app.origin.index >= self.providers.len() {
            return Err(MarketError::UnknownProvider(app.origin).into());
        }
        if app.vms.len() != app.cloudlet_lengths_mi.len() {
            return Err(MarketError::MismatchedApplication { vms: app.vms.len(), cloudlets: app.cloudlet_lengths_mi.len() }.into());
        }
        if app.vms.is_empty() {
            return Ok(());
        }
        let origin = &self.providers[app.origin.index].dc;
        if let Some(spec) = app.vms.iter().find(|s| !origin.could_ever_host(s)) {
            return Err(MarketError::InvalidApplication(format!(
                "no host at the origin can run a VM with {} PEs, {} MB, {} GB",
                spec.pe_count, spec.ram_mb, spec.storage_gb
            ))
            .into());
        }
        self.engine.schedule(app.submit_at, self.broker_id, Msg::Submit(self.apps.len()))?;
        self.apps.push(app);
        Ok(())
    }

    pub fn exchange(&self) -> &Exchange {
        &self.exchange
    }

    pub fn datacenter(&self, i: usize) -> &Datacenter {
        &self.providers[i].dc
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn run(mut self, limit: SimTime) -> Result<FederationOutcome, FederationError> {
        let mut engine = std::mem::take(&mut self.engine);
        let end = engine.run_until(limit, |eng, ev| self.dispatch(eng, ev.target, ev.payload))?;
        let unfinished = self.cloudlets.values().filter(|c| c.finish.is_none()).count();
        if unfinished > 0 {
            let context = self.trace.iter().rev().take(8).map(|e| format!("  {e:?}")).collect::<Vec<_>>().join("\n");
            return Err(FederationError::Incomplete { unfinished, at: end, context });
        }
        let rows = self
            .cloudlets
            .iter()
            .map(|(&id, log)| TaskRow {
                id,
                submit: log.submit,
                start: log.start.expect("finished implies started"),
                finish: log.finish.expect("checked above"),
                provider: self.providers[log.provider.expect("finished on a provider")].name.clone(),
            })
            .collect();
        Ok(FederationOutcome { rows, trace: self.trace, end })
    }

    fn dispatch(&mut self, eng: &mut Engine<Msg>, target: EntityId, msg: Msg) -> Result<(), FederationError> {
        match msg {
            Msg::Submit(app) => self.on_submit(eng, app),
            Msg::Place(i, batch) => {
                self.sync(eng, i)?;
                self.providers[i].coordinator.deferred.push_back(batch);
                self.drain_deferred(eng, i)
            }
            Msg::Land { origin, target, transit, new_vm } => self.on_land(eng, origin, target, transit, new_vm),
            Msg::Complete => self.sync(eng, target.index),
            Msg::Reevaluate => {
                self.sync(eng, target.index)?;
                self.drain_deferred(eng, target.index)
            }
            Msg::SenseTick => {
                self.sync(eng, target.index)?;
                self.sense_and_publish_at(target.index, eng.now())?;
                let busy = self.cloudlets.values().any(|c| c.finish.is_none()) || eng.pending() > 0;
                if let (true, Some(p)) = (busy, self.params.sense_period_s) {
                    eng.schedule_in(p, target, Msg::SenseTick)?;
                }
                Ok(())
            }
        }
    }

    fn on_submit(&mut self, eng: &mut Engine<Msg>, app: usize) -> Result<(), FederationError> {
        let deployment = self.broker.submit(&self.apps[app])?;
        let origin = deployment.origin.index;
        let groups = deployment.request_groups();
        let mut bindings: Vec<_> = deployment.bindings.into_iter().map(Some).collect();
        for (spec, members) in groups {
            let vms = members
                .into_iter()
                .map(|i| {
                    let b = bindings[i].take().expect("each binding used once");
                    self.cloudlets
                        .insert(b.cloudlet.id.0, CloudletLog { submit: b.cloudlet.submit_at, start: None, finish: None, provider: None });
                    self.outstanding.insert(b.vm, 1);
                    VmInTransit { vm: b.vm, spec: b.spec, cloudlets: vec![b.cloudlet] }
                })
                .collect();
            let coord = self.providers[origin].coordinator.id;
            eng.schedule(eng.now(), coord, Msg::Place(origin, Batch { spec, vms }))?;
        }
        Ok(())
    }

    fn sense_and_publish(&mut self, i: usize) -> Result<AvailabilityReport, FederationError> {
        let now = self.engine.now();
        self.sense_and_publish_at(i, now)
    }

    fn sense_and_publish_at(&mut self, i: usize, now: SimTime) -> Result<AvailabilityReport, FederationError> {
        let p = &self.providers[i];
        let report = sense(&p.dc, now);
        self.exchange.publish_offer(Offer {
            provider: p.dc.id(),
            free_slots: report.free_slots,
            total_slots: report.slot_capacity,
            max_vm_pes: p.dc.max_vm_pes(),
            price_per_hour: p.price,
            sla_terms: p.sla.clone(),
            published_at: now,
        })?;
        self.trace.push(TraceEntry::Sensed(report));
        Ok(report)
    }

    /// Integrates datacenter `i` up to now, retires finished work and reschedules its next completion.
    fn sync(&mut self, eng: &mut Engine<Msg>, i: usize) -> Result<(), FederationError> {
        let now = eng.now();
        let done = self.providers[i].dc.advance_to(now)?;
        let mut released = false;
        for c in done {
            let vm = c.assigned_vm.expect("completed cloudlets carry their VM");
            let log = self.cloudlets.get_mut(&c.id.0).expect("tracked cloudlet");
            log.finish = c.finish_at;
            log.start = log.start.or(c.start_at);
            log.provider = Some(i);
            let provider = self.providers[i].dc.id();
            self.trace.push(TraceEntry::CloudletFinished { at: c.finish_at.unwrap_or(now), cloudlet: c.id.0, vm, provider });
            let left = self.outstanding.get_mut(&vm).expect("tracked VM");
            *left -= 1;
            if *left == 0 {
                self.outstanding.remove(&vm);
                self.providers[i].dc.deallocate_vm(vm)?;
                self.trace.push(TraceEntry::VmDestroyed { at: now, vm, provider });
                released = true;
            }
        }
        if released {
            self.sense_and_publish_at(i, now)?;
            for p in &self.providers {
                if !p.coordinator.deferred.is_empty() {
                    eng.schedule(now, p.coordinator.id, Msg::Reevaluate)?;
                }
            }
        }
        self.reschedule(eng, i)
    }

    fn reschedule(&mut self, eng: &mut Engine<Msg>, i: usize) -> Result<(), FederationError> {
        let p = &mut self.providers[i];
        if let Some(id) = p.completion.take() {
            eng.cancel(id);
        }
        if let Some(dt) = p.dc.next_completion_in() {
            p.completion = Some(eng.schedule_in(dt, p.dc.id(), Msg::Complete)?);
        }
        Ok(())
    }

    fn drain_deferred(&mut self, eng: &mut Engine<Msg>, i: usize) -> Result<(), FederationError> {
        while let Some(batch) = self.providers[i].coordinator.deferred.pop_front() {
            if let Some(rest) = self.place(eng, i, batch)? {
                self.providers[i].coordinator.deferred.push_front(rest);
                break;
            }
        }
        self.reschedule(eng, i)
    }

    /// Places what it can; returns the part that must wait.
    fn place(&mut self, eng: &mut Engine<Msg>, i: usize, mut batch: Batch) -> Result<Option<Batch>, FederationError> {
        let now = eng.now();
        loop {
            if batch.vms.is_empty() {
                return Ok(None);
            }
            let report = self.sense_and_publish_at(i, now)?;
            let request = PlacementRequest { count: batch.vms.len() as u32, spec: batch.spec };
            let exchange = self.params.enabled.then_some(&self.exchange);
            let verdict = decide_placement(&report, self.providers[i].coordinator.id, exchange, request, self.params.qos);
            self.trace.push(TraceEntry::Decision {
                at: now,
                origin: report.provider,
                slots_needed: request.slots_needed(),
                origin_free: report.free_slots,
                verdict,
            });
            let placed = self.fill_local(i, now, &mut batch)?;
            match verdict {
                Verdict::Local => {
                    // fragmentation can defeat a slot count that looked sufficient
                    return Ok((!batch.vms.is_empty()).then_some(batch));
                }
                _ if placed > 0 => continue,
                Verdict::Migrate(target) => {
                    self.start_migrations(eng, i, target.index, batch)?;
                    return Ok(None);
                }
                Verdict::Deferred => return Ok(Some(batch)),
            }
        }
    }

    fn fill_local(&mut self, i: usize, now: SimTime, batch: &mut Batch) -> Result<usize, FederationError> {
        let mut placed = 0;
        while let Some(front) = batch.vms.first() {
            let dc = &mut self.providers[i].dc;
            let Ok(host) = dc.allocate_vm(front.vm, front.spec) else { break };
            let transit = batch.vms.remove(0);
            for c in transit.cloudlets {
                let id = c.id.0;
                dc.submit_cloudlet(transit.vm, c)?;
                let log = self.cloudlets.get_mut(&id).expect("tracked cloudlet");
                log.start.get_or_insert(now);
            }
            self.trace.push(TraceEntry::VmPlaced { at: now, vm: transit.vm, provider: dc.id(), host });
            placed += 1;
        }
        Ok(placed)
    }

    fn start_migrations(&mut self, eng: &mut Engine<Msg>, origin: usize, target: usize, batch: Batch) -> Result<(), FederationError> {
        let now = eng.now();
        let origin_id = self.providers[origin].dc.id();
        let target_id = self.providers[target].dc.id();
        let coord = self.providers[target].coordinator.id;
        for transit in batch.vms {
            let new_vm = self.broker.fresh_vm_id();
            self.trace.push(TraceEntry::MigrationStarted {
                at: now,
                vm: transit.vm,
                new_vm,
                origin: origin_id,
                target: target_id,
                spec: transit.spec,
                remaining_mi: transit.remaining_mi(),
            });
            let at = SimTime::new(now.as_secs() + self.params.migration_delay_s)?;
            eng.schedule(at, coord, Msg::Land { origin, target, transit, new_vm })?;
        }
        Ok(())
    }

    fn on_land(
        &mut self,
        eng: &mut Engine<Msg>,
        origin: usize,
        target: usize,
        transit: VmInTransit,
        new_vm: VmId,
    ) -> Result<(), FederationError> {
        self.sync(eng, target)?;
        let now = eng.now();
        let old_vm = transit.vm;
        let origin_spec = transit.spec;
        let remaining_mi = transit.remaining_mi();
        let cloudlet_ids: Vec<u64> = transit.cloudlets.iter().map(|c| c.id.0).collect();
        let target_id = self.providers[target].dc.id();
        match land(&mut self.providers[target].dc, transit, new_vm) {
            Ok(_) => {
                let outstanding = self.outstanding.remove(&old_vm).expect("tracked VM");
                self.outstanding.insert(new_vm, outstanding);
                for id in cloudlet_ids {
                    self.cloudlets.get_mut(&id).expect("tracked cloudlet").start.get_or_insert(now);
                }
                let dc = &self.providers[target].dc;
                self.trace.push(TraceEntry::MigrationLanded {
                    at: now,
                    vm: new_vm,
                    origin: self.providers[origin].dc.id(),
                    target: target_id,
                    origin_spec,
                    target_spec: dc.vm_spec(new_vm).expect("landed"),
                    remaining_mi,
                });
                self.trace.push(TraceEntry::VmPlaced {
                    at: now,
                    vm: new_vm,
                    provider: target_id,
                    host: dc.vm_host(new_vm).expect("landed"),
                });
                self.sense_and_publish_at(target, now)?;
                self.reschedule(eng, target)
            }
            Err((_, transit)) => {
                self.trace.push(TraceEntry::TargetFull { at: now, vm: old_vm, target: target_id });
                // Retrying the exchange now could bounce off the same fragmented
                // target forever; wait for a release unless the origin has room.
                let p = &mut self.providers[origin];
                let retry_now = p.dc.can_host(&transit.spec);
                p.coordinator.deferred.push_back(Batch { spec: transit.spec, vms: vec![transit] });
                if retry_now {
                    eng.schedule(now, p.coordinator.id, Msg::Reevaluate)?;
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resource::{CloudletId, HostSpec};

    fn host() -> HostSpec {
        HostSpec { pe_count: 1, mips_per_pe: 1000.0, ram_mb: 10_240, storage_gb: 2048 }
    }

    fn dc(i: usize, hosts: usize) -> Datacenter {
        Datacenter::uniform(EntityId::new(EntityKind::Datacenter, i), hosts, host(), 1.0).unwrap()
    }

    fn vm() -> VmSpec {
        VmSpec::new(256, 1, 1)
    }

    fn fill(d: &mut Datacenter, n: u64) {
        for k in 0..n {
            d.allocate_vm(VmId(1000 + k), vm()).unwrap();
        }
    }

    #[test]
    fn sense_reports() {
        let mut d = dc(0, 50);
        let r = sense(&d, SimTime::ZERO);
        assert_eq!((r.free_slots, r.utilization), (50, 0.0));
        fill(&mut d, 25);
        let r = sense(&d, SimTime::ZERO);
        assert_eq!((r.free_slots, r.utilization), (25, 0.5));
        fill_more(&mut d);
        let r = sense(&d, SimTime::ZERO);
        assert_eq!((r.free_slots, r.utilization), (0, 1.0));
    }

    fn fill_more(d: &mut Datacenter) {
        let mut k = 5000;
        while d.free_slots() > 0 {
            d.allocate_vm(VmId(k), vm()).unwrap();
            k += 1;
        }
    }

    fn exchange_with(dcs: &[&Datacenter]) -> Exchange {
        let mut ex = Exchange::new();
        for d in dcs {
            ex.register_provider(d.id());
            let r = sense(d, SimTime::ZERO);
            ex.publish_offer(Offer {
                provider: d.id(),
                free_slots: r.free_slots,
                total_slots: r.slot_capacity,
                max_vm_pes: d.max_vm_pes(),
                price_per_hour: Cents(10),
                sla_terms: BTreeMap::new(),
                published_at: SimTime::ZERO,
            })
            .unwrap();
        }
        ex
    }

    fn coord() -> EntityId {
        EntityId::new(EntityKind::Coordinator, 0)
    }

    #[test]
    fn local_when_capacity_suffices() {
        let mut origin = dc(0, 50);
        fill(&mut origin, 20);
        let ex = exchange_with(&[&origin, &dc(1, 50)]);
        let v = decide_placement(
            &sense(&origin, SimTime::ZERO),
            coord(),
            Some(&ex),
            PlacementRequest { count: 25, spec: vm() },
            Qos::default(),
        );
        assert_eq!(v, Verdict::Local);
    }

    #[test]
    fn migrate_on_exhaustion() {
        let mut origin = dc(0, 50);
        fill_more(&mut origin);
        let p1 = dc(1, 50);
        let ex = exchange_with(&[&origin, &p1]);
        let v = decide_placement(
            &sense(&origin, SimTime::ZERO),
            coord(),
            Some(&ex),
            PlacementRequest { count: 25, spec: vm() },
            Qos::default(),
        );
        assert_eq!(v, Verdict::Migrate(p1.id()));
    }

    #[test]
    fn deferred_when_everyone_full() {
        let mut origin = dc(0, 5);
        let mut p1 = dc(1, 5);
        fill_more(&mut origin);
        fill_more(&mut p1);
        let ex = exchange_with(&[&origin, &p1]);
        let v =
            decide_placement(&sense(&origin, SimTime::ZERO), coord(), Some(&ex), PlacementRequest { count: 1, spec: vm() }, Qos::default());
        assert_eq!(v, Verdict::Deferred);
        let v = decide_placement(&sense(&origin, SimTime::ZERO), coord(), None, PlacementRequest { count: 1, spec: vm() }, Qos::default());
        assert_eq!(v, Verdict::Deferred);
    }

    #[test]
    fn target_choice_most_free_then_lowest_index() {
        let mut origin = dc(0, 2);
        fill_more(&mut origin);
        let p1 = dc(1, 10);
        let p2 = dc(2, 10);
        let p3 = dc(3, 30);
        let ex = exchange_with(&[&origin, &p1, &p2]);
        let req = PlacementRequest { count: 3, spec: vm() };
        assert_eq!(decide_placement(&sense(&origin, SimTime::ZERO), coord(), Some(&ex), req, Qos::default()), Verdict::Migrate(p1.id()));
        let ex = exchange_with(&[&origin, &p1, &p2, &p3]);
        assert_eq!(decide_placement(&sense(&origin, SimTime::ZERO), coord(), Some(&ex), req, Qos::default()), Verdict::Migrate(p3.id()));
    }

    #[test]
    fn migrate_preserves_spec_and_work() {
        let mut origin = dc(0, 1);
        let mut target = dc(1, 1);
        origin.allocate_vm(VmId(0), vm()).unwrap();
        origin.submit_cloudlet(VmId(0), Cloudlet::new(CloudletId(0), 1_800_000.0, SimTime::ZERO)).unwrap();
        origin.advance(900.0).unwrap();
        target.advance_to(SimTime::secs(900.0)).unwrap();
        let new = migrate_vm(VmId(0), &mut origin, &mut target, VmId(7)).unwrap();
        assert_eq!(new, VmId(7));
        assert_eq!(target.vm_spec(VmId(7)), Some(vm()));
        assert_eq!(target.active_cloudlets(VmId(7)).unwrap()[0].remaining_mi, 900_000.0);
        assert!(!origin.contains_vm(VmId(0)));
        assert_eq!(origin.free_slots(), 1);
    }

    #[test]
    fn migrate_into_full_target_leaves_origin_intact() {
        let mut origin = dc(0, 1);
        let mut target = dc(1, 1);
        origin.allocate_vm(VmId(0), vm()).unwrap();
        fill_more(&mut target);
        let err = migrate_vm(VmId(0), &mut origin, &mut target, VmId(7)).unwrap_err();
        assert_eq!(err, FederationError::TargetFull { target: target.id() });
        assert!(origin.contains_vm(VmId(0)));
    }

    fn providers(host_counts: &[usize]) -> Vec<ProviderSetup> {
        host_counts
            .iter()
            .enumerate()
            .map(|(i, &n)| ProviderSetup {
                name: format!("provider{i}"),
                datacenter: dc(i, n),
                price_per_hour: Cents(10),
                sla_terms: BTreeMap::new(),
            })
            .collect()
    }

    fn app(count: usize, length: f64) -> Application {
        Application {
            origin: EntityId::new(EntityKind::Datacenter, 0),
            submit_at: SimTime::ZERO,
            vms: vec![vm(); count],
            cloudlet_lengths_mi: vec![length; count],
        }
    }

    fn run(host_counts: &[usize], params: FederationParams, count: usize) -> FederationOutcome {
        let mut sim = FederationSim::new(providers(host_counts), params).unwrap();
        sim.submit(app(count, 1_800_000.0)).unwrap();
        sim.run(SimTime::secs(1e9)).unwrap()
    }

    #[test]
    fn excess_migrates_and_local_part_stays() {
        let out = run(&[5, 50, 50], FederationParams::default(), 25);
        let local = out.rows.iter().filter(|r| r.provider == "provider0").count();
        let remote = out.rows.iter().filter(|r| r.provider == "provider1").count();
        assert_eq!((local, remote), (5, 20));
        assert!(out.rows.iter().all(|r| r.finish == SimTime::secs(1800.0)));
        assert!(audit_minimality(&out.trace).is_empty());
    }

    #[test]
    fn without_federation_work_queues_locally() {
        let params = FederationParams { enabled: false, ..FederationParams::default() };
        let out = run(&[5, 50, 50], params, 25);
        assert!(out.rows.iter().all(|r| r.provider == "provider0"));
        let makespan = out.rows.iter().map(|r| r.finish).max().unwrap();
        assert_eq!(makespan, SimTime::secs(9000.0));
        assert!(!out.trace.iter().any(|e| matches!(e, TraceEntry::MigrationStarted { .. })));
    }

    #[test]
    fn migration_delay_shifts_resume() {
        let params = FederationParams { migration_delay_s: 10.0, ..FederationParams::default() };
        let out = run(&[1, 50], params, 2);
        // one VM local, one migrated: the migrated one resumes at t=10
        let landed: Vec<_> = out
            .trace
            .iter()
            .filter_map(|e| match e {
                TraceEntry::MigrationLanded { at, .. } => Some(*at),
                _ => None,
            })
            .collect();
        assert_eq!(landed, vec![SimTime::secs(10.0)]);
        let remote = out.rows.iter().find(|r| r.provider == "provider1").unwrap();
        assert_eq!(remote.start, SimTime::secs(10.0));
        assert_eq!(remote.finish, SimTime::secs(1810.0));
    }

    #[test]
    fn deferred_batch_resumes_on_release() {
        // the 2-VM excess fits no single provider, so it waits; at t=1800 one VM
        // refills the origin and the last one now fits provider1
        let out = run(&[1, 1], FederationParams::default(), 3);
        let mut finishes: Vec<_> = out.rows.iter().map(|r| (r.finish.as_secs(), r.provider.as_str())).collect();
        finishes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        assert_eq!(finishes, vec![(1800.0, "provider0"), (3600.0, "provider0"), (3600.0, "provider1")]);
        assert!(audit_minimality(&out.trace).is_empty());
    }

    fn wide_app(origin: usize, at: f64, count: usize, length: f64) -> Application {
        Application {
            origin: EntityId::new(EntityKind::Datacenter, origin),
            submit_at: SimTime::secs(at),
            vms: vec![VmSpec::new(256, 1, 2); count],
            cloudlet_lengths_mi: vec![length; count],
        }
    }

    #[test]
    fn bounce_off_fragmented_target_waits_for_release() {
        // provider1 keeps one free PE on each of two hosts: two free slots, no room for a 2-PE VM
        let wide = |i: usize, hosts: usize, pe: u32| ProviderSetup {
            name: format!("provider{i}"),
            datacenter: Datacenter::uniform(EntityId::new(EntityKind::Datacenter, i), hosts, HostSpec { pe_count: pe, ..host() }, 1.0)
                .unwrap(),
            price_per_hour: Cents(10),
            sla_terms: BTreeMap::new(),
        };
        let mut sim = FederationSim::new(vec![wide(0, 1, 2), wide(1, 2, 3)], FederationParams::default()).unwrap();
        sim.submit(wide_app(1, 0.0, 2, 3_600_000.0)).unwrap();
        sim.submit(wide_app(0, 10.0, 2, 1_800_000.0)).unwrap();
        let out = sim.run(SimTime::secs(1e9)).unwrap();
        assert_eq!(out.trace.iter().filter(|e| matches!(e, TraceEntry::TargetFull { .. })).count(), 1);
        let mut finishes: Vec<_> = out.rows.iter().map(|r| (r.finish.as_secs(), r.provider.as_str())).collect();
        finishes.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(finishes, vec![(910.0, "provider0"), (1800.0, "provider1"), (1800.0, "provider1"), (1810.0, "provider0")]);
        assert!(audit_minimality(&out.trace).is_empty());
    }

    #[test]
    fn unplaceable_vm_is_rejected_at_submit() {
        let mut sim = FederationSim::new(providers(&[2, 2]), FederationParams::default()).unwrap();
        let err = sim.submit(wide_app(0, 0.0, 1, 1000.0)).unwrap_err();
        assert!(matches!(err, FederationError::Market(MarketError::InvalidApplication(_))));
    }

    #[test]
    fn empty_application_schedules_nothing() {
        let mut sim = FederationSim::new(providers(&[1]), FederationParams::default()).unwrap();
        sim.submit(app(0, 1.0)).unwrap();
        let out = sim.run(SimTime::secs(100.0)).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.end, SimTime::ZERO);
    }

    #[test]
    fn audit_flags_unjustified_migration() {
        let p0 = EntityId::new(EntityKind::Datacenter, 0);
        let p1 = EntityId::new(EntityKind::Datacenter, 1);
        let trace = vec![
            TraceEntry::Sensed(AvailabilityReport { provider: p0, free_slots: 30, slot_capacity: 50, utilization: 0.4, at: SimTime::ZERO }),
            TraceEntry::Decision { at: SimTime::ZERO, origin: p0, slots_needed: 25, origin_free: 30, verdict: Verdict::Migrate(p1) },
        ];
        assert_eq!(audit_minimality(&trace).len(), 1);
    }
}
