//! Hosts, VMs and cloudlets with time-shared (fluid) processor sharing.
//!
//! A "slot" is one host processing element. With an oversubscription ratio `r`
//! a host with `p` PEs exposes `floor(p * r)` slots.
//!
//! Sharing is two-level. On each host the capacity `pe_count * mips_per_pe` is
//! split max-min fairly among the busy resident VMs, each VM capped at its own
//! `pe_count * mips_per_pe`; with uncapped VMs this is the plain equal split.
//! Inside a VM the granted rate is divided equally among its active cloudlets.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{Engine, EntityId, EntityKind, KernelError, SimTime};

/// Relative slack under which remaining work counts as done.
const COMPLETION_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VmId(pub u64);

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vm{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CloudletId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    NoSlots,
    NoRam,
    NoStorage,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rejection::NoSlots => "no-slots",
            Rejection::NoRam => "no-ram",
            Rejection::NoStorage => "no-storage",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResourceError {
    #[error("allocation rejected: {reason}")]
    Rejected { reason: Rejection },
    #[error("{0} still has active cloudlets")]
    VmBusy(VmId),
    #[error("unknown {0}")]
    UnknownVm(VmId),
    #[error("{0} is already resident")]
    DuplicateVm(VmId),
    #[error("invalid resource spec: {0}")]
    InvalidSpec(String),
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HostSpec {
    pub pe_count: u32,
    pub mips_per_pe: f64,
    pub ram_mb: u64,
    pub storage_gb: u64,
}

impl HostSpec {
    pub fn validate(&self) -> Result<(), ResourceError> {
        if self.pe_count == 0 || self.ram_mb == 0 || self.storage_gb == 0 {
            return Err(ResourceError::InvalidSpec("host capacities must be positive".into()));
        }
        if !(self.mips_per_pe.is_finite() && self.mips_per_pe > 0.0) {
            return Err(ResourceError::InvalidSpec("host mips_per_pe must be positive".into()));
        }
        Ok(())
    }

    pub fn capacity_mips(&self) -> f64 {
        self.pe_count as f64 * self.mips_per_pe
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VmScheduler {
    #[default]
    TimeShared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmSpec {
    pub ram_mb: u64,
    pub storage_gb: u64,
    pub pe_count: u32,
    #[serde(default)]
    pub scheduler: VmScheduler,
}

impl VmSpec {
    pub fn new(ram_mb: u64, storage_gb: u64, pe_count: u32) -> Self {
        VmSpec { ram_mb, storage_gb, pe_count, scheduler: VmScheduler::TimeShared }
    }

    pub fn validate(&self) -> Result<(), ResourceError> {
        if self.pe_count == 0 || self.ram_mb == 0 || self.storage_gb == 0 {
            return Err(ResourceError::InvalidSpec("vm requirements must be positive".into()));
        }
        Ok(())
    }
}

/// A unit of work measured in million instructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cloudlet {
    pub id: CloudletId,
    pub length_mi: f64,
    pub remaining_mi: f64,
    pub submit_at: SimTime,
    pub start_at: Option<SimTime>,
    pub finish_at: Option<SimTime>,
    pub assigned_vm: Option<VmId>,
}

impl Cloudlet {
    pub fn new(id: CloudletId, length_mi: f64, submit_at: SimTime) -> Self {
        Cloudlet { id, length_mi, remaining_mi: length_mi, submit_at, start_at: None, finish_at: None, assigned_vm: None }
    }

    pub fn is_finished(&self) -> bool {
        self.finish_at.is_some()
    }
}

#[derive(Debug, Clone)]
struct Host {
    spec: HostSpec,
    slots: u32,
    used_pes: u32,
    used_ram_mb: u64,
    used_storage_gb: u64,
    vms: Vec<VmId>,
}

impl Host {
    fn fits_slots(&self, spec: &VmSpec) -> bool {
        spec.pe_count <= self.spec.pe_count && self.used_pes + spec.pe_count <= self.slots
    }

    fn fits_ram(&self, spec: &VmSpec) -> bool {
        self.used_ram_mb + spec.ram_mb <= self.spec.ram_mb
    }

    fn fits_storage(&self, spec: &VmSpec) -> bool {
        self.used_storage_gb + spec.storage_gb <= self.spec.storage_gb
    }
}

#[derive(Debug, Clone)]
struct ResidentVm {
    spec: VmSpec,
    host: usize,
    cloudlets: Vec<Cloudlet>,
    mips: f64,
}

/// Read-only view of a host's occupancy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HostUsage {
    pub used_pes: u32,
    pub used_ram_mb: u64,
    pub used_storage_gb: u64,
    pub resident_vms: usize,
    pub granted_mips: f64,
}

#[derive(Debug, Clone)]
pub struct Datacenter {
    id: EntityId,
    hosts: Vec<Host>,
    vms: BTreeMap<VmId, ResidentVm>,
    oversubscription: f64,
    clock: SimTime,
    delivered_mi: f64,
}

impl Datacenter {
    pub fn new(id: EntityId, hosts: Vec<HostSpec>, oversubscription: f64) -> Result<Self, ResourceError> {
        if !(oversubscription.is_finite() && oversubscription >= 1.0) {
            return Err(ResourceError::InvalidSpec(format!("oversubscription must be >= 1.0, got {oversubscription}")));
        }
        if hosts.is_empty() {
            return Err(ResourceError::InvalidSpec("datacenter needs at least one host".into()));
        }
        let hosts = hosts
            .into_iter()
            .map(|spec| {
                spec.validate()?;
                Ok(Host {
                    spec,
                    slots: (spec.pe_count as f64 * oversubscription).floor() as u32,
                    used_pes: 0,
                    used_ram_mb: 0,
                    used_storage_gb: 0,
                    vms: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>, ResourceError>>()?;
        Ok(Datacenter { id, hosts, vms: BTreeMap::new(), oversubscription, clock: SimTime::ZERO, delivered_mi: 0.0 })
    }

    pub fn uniform(id: EntityId, host_count: usize, spec: HostSpec, oversubscription: f64) -> Result<Self, ResourceError> {
        Self::new(id, vec![spec; host_count], oversubscription)
    }

    pub fn id(&self) -> EntityId {
        self.id
    }

    pub fn host_count(&self) -> usize {
        self.hosts.len()
    }

    pub fn host_spec(&self, index: usize) -> Option<HostSpec> {
        self.hosts.get(index).map(|h| h.spec)
    }

    pub fn oversubscription(&self) -> f64 {
        self.oversubscription
    }

    /// Time up to which progress has been integrated.
    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn slot_capacity(&self) -> u32 {
        self.hosts.iter().map(|h| h.slots).sum()
    }

    pub fn occupied_slots(&self) -> u32 {
        self.hosts.iter().map(|h| h.used_pes).sum()
    }

    pub fn free_slots(&self) -> u32 {
        self.slot_capacity() - self.occupied_slots()
    }

    pub fn host_usage(&self, index: usize) -> Option<HostUsage> {
        self.hosts.get(index).map(|h| HostUsage {
            used_pes: h.used_pes,
            used_ram_mb: h.used_ram_mb,
            used_storage_gb: h.used_storage_gb,
            resident_vms: h.vms.len(),
            granted_mips: h.vms.iter().map(|v| self.vms[v].mips).sum(),
        })
    }

    pub fn contains_vm(&self, vm: VmId) -> bool {
        self.vms.contains_key(&vm)
    }

    pub fn vm_ids(&self) -> impl Iterator<Item = VmId> + '_ {
        self.vms.keys().copied()
    }

    pub fn vm_spec(&self, vm: VmId) -> Option<VmSpec> {
        self.vms.get(&vm).map(|v| v.spec)
    }

    pub fn vm_host(&self, vm: VmId) -> Option<usize> {
        self.vms.get(&vm).map(|v| v.host)
    }

    /// MIPS currently granted to a VM.
    pub fn vm_mips(&self, vm: VmId) -> Option<f64> {
        self.vms.get(&vm).map(|v| v.mips)
    }

    pub fn active_cloudlets(&self, vm: VmId) -> Option<&[Cloudlet]> {
        self.vms.get(&vm).map(|v| v.cloudlets.as_slice())
    }

    pub fn is_idle(&self, vm: VmId) -> bool {
        self.vms.get(&vm).is_some_and(|v| v.cloudlets.is_empty())
    }

    /// Total work handed out to cloudlets so far.
    pub fn delivered_mi(&self) -> f64 {
        self.delivered_mi
    }

    pub fn remaining_mi(&self) -> f64 {
        self.vms.values().flat_map(|v| v.cloudlets.iter()).map(|c| c.remaining_mi).sum()
    }

    /// Whether `allocate_vm` would currently succeed for this spec.
    pub fn can_host(&self, spec: &VmSpec) -> bool {
        self.hosts.iter().any(|h| h.fits_slots(spec) && h.fits_ram(spec) && h.fits_storage(spec))
    }

    pub fn max_vm_pes(&self) -> u32 {
        self.hosts.iter().map(|h| h.spec.pe_count.min(h.slots)).max().unwrap_or(0)
    }

    /// Whether some host could take this spec once empty.
    pub fn could_ever_host(&self, spec: &VmSpec) -> bool {
        self.hosts
            .iter()
            .any(|h| spec.pe_count <= h.spec.pe_count.min(h.slots) && spec.ram_mb <= h.spec.ram_mb && spec.storage_gb <= h.spec.storage_gb)
    }

    /// First-fit by ascending host index.
    pub fn allocate_vm(&mut self, vm: VmId, spec: VmSpec) -> Result<usize, ResourceError> {
        spec.validate()?;
        if self.vms.contains_key(&vm) {
            return Err(ResourceError::DuplicateVm(vm));
        }
        let slot_hosts = || self.hosts.iter().filter(|h| h.fits_slots(&spec));
        let Some(host) = self.hosts.iter().position(|h| h.fits_slots(&spec) && h.fits_ram(&spec) && h.fits_storage(&spec)) else {
            let reason = if slot_hosts().next().is_none() {
                Rejection::NoSlots
            } else if !slot_hosts().any(|h| h.fits_ram(&spec)) {
                Rejection::NoRam
            } else {
                Rejection::NoStorage
            };
            return Err(ResourceError::Rejected { reason });
        };
        let h = &mut self.hosts[host];
        h.used_pes += spec.pe_count;
        h.used_ram_mb += spec.ram_mb;
        h.used_storage_gb += spec.storage_gb;
        h.vms.push(vm);
        self.vms.insert(vm, ResidentVm { spec, host, cloudlets: Vec::new(), mips: 0.0 });
        self.refresh_host(host);
        Ok(host)
    }

    pub fn deallocate_vm(&mut self, vm: VmId) -> Result<VmSpec, ResourceError> {
        match self.vms.get(&vm) {
            None => Err(ResourceError::UnknownVm(vm)),
            Some(v) if !v.cloudlets.is_empty() => Err(ResourceError::VmBusy(vm)),
            Some(_) => Ok(self.detach_vm(vm)?.0),
        }
    }

    /// Removes a VM regardless of activity, handing back its unfinished cloudlets.
    pub fn detach_vm(&mut self, vm: VmId) -> Result<(VmSpec, Vec<Cloudlet>), ResourceError> {
        let resident = self.vms.remove(&vm).ok_or(ResourceError::UnknownVm(vm))?;
        let h = &mut self.hosts[resident.host];
        h.used_pes -= resident.spec.pe_count;
        h.used_ram_mb -= resident.spec.ram_mb;
        h.used_storage_gb -= resident.spec.storage_gb;
        h.vms.retain(|&v| v != vm);
        self.refresh_host(resident.host);
        Ok((resident.spec, resident.cloudlets))
    }

    /// Binds a cloudlet to a resident VM; it starts receiving service immediately.
    pub fn submit_cloudlet(&mut self, vm: VmId, mut cloudlet: Cloudlet) -> Result<(), ResourceError> {
        let clock = self.clock;
        let resident = self.vms.get_mut(&vm).ok_or(ResourceError::UnknownVm(vm))?;
        cloudlet.assigned_vm = Some(vm);
        cloudlet.start_at.get_or_insert(clock);
        let host = resident.host;
        resident.cloudlets.push(cloudlet);
        self.refresh_host(host);
        Ok(())
    }

    /// Seconds until the earliest active cloudlet finishes at current rates.
    pub fn next_completion_in(&self) -> Option<f64> {
        self.vms
            .values()
            .filter(|v| v.mips > 0.0 && !v.cloudlets.is_empty())
            .flat_map(|v| {
                let rate = v.mips / v.cloudlets.len() as f64;
                v.cloudlets.iter().map(move |c| c.remaining_mi / rate)
            })
            .min_by(f64::total_cmp)
            .map(|dt| dt.max(0.0))
    }

    /// Integrates progress over `dt` seconds at the current shares and returns
    /// the cloudlets that completed, ordered by finish time then id.
    pub fn advance(&mut self, dt: f64) -> Result<Vec<Cloudlet>, ResourceError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(ResourceError::InvalidStep(dt));
        }
        let start = self.clock;
        let end = SimTime::new(start.as_secs() + dt)?;
        let mut done = Vec::new();
        let mut dirty_hosts = Vec::new();
        for (&vm_id, vm) in self.vms.iter_mut() {
            if vm.mips <= 0.0 || vm.cloudlets.is_empty() {
                continue;
            }
            let rate = vm.mips / vm.cloudlets.len() as f64;
            let work = rate * dt;
            let mut finished_any = false;
            for c in vm.cloudlets.iter_mut() {
                if c.remaining_mi - work <= COMPLETION_EPS * c.length_mi.max(1.0) {
                    let at = (start.as_secs() + c.remaining_mi / rate).min(end.as_secs());
                    self.delivered_mi += c.remaining_mi;
                    c.remaining_mi = 0.0;
                    c.finish_at = Some(SimTime::secs(at.max(start.as_secs())));
                    finished_any = true;
                } else {
                    c.remaining_mi -= work;
                    self.delivered_mi += work;
                }
            }
            if finished_any {
                let (fin, active): (Vec<_>, Vec<_>) = vm.cloudlets.drain(..).partition(|c| c.finish_at.is_some());
                vm.cloudlets = active;
                done.extend(fin.into_iter().map(|mut c| {
                    c.assigned_vm = Some(vm_id);
                    c
                }));
                dirty_hosts.push(vm.host);
            }
        }
        self.clock = end;
        dirty_hosts.sort_unstable();
        dirty_hosts.dedup();
        for h in dirty_hosts {
            self.refresh_host(h);
        }
        done.sort_by(|a, b| a.finish_at.cmp(&b.finish_at).then(a.id.cmp(&b.id)));
        Ok(done)
    }

    /// Brings the datacenter up to `now`. A no-op if already there.
    pub fn advance_to(&mut self, now: SimTime) -> Result<Vec<Cloudlet>, ResourceError> {
        let dt = now - self.clock;
        if dt > 0.0 {
            self.advance(dt)
        } else {
            Ok(Vec::new())
        }
    }

    fn refresh_host(&mut self, host: usize) {
        let h = &self.hosts[host];
        let per_pe = h.spec.mips_per_pe;
        let mut pending: Vec<(VmId, f64)> = Vec::new();
        for vm in &h.vms {
            let r = &self.vms[vm];
            if r.cloudlets.is_empty() {
                continue;
            }
            pending.push((*vm, r.spec.pe_count as f64 * per_pe));
        }
        let mut grants: Vec<(VmId, f64)> = Vec::with_capacity(pending.len());
        let mut left = h.spec.capacity_mips();
        // water-fill: hand capped VMs their cap, split the rest evenly
        while !pending.is_empty() {
            let share = left / pending.len() as f64;
            let before = pending.len();
            pending.retain(|&(vm, cap)| {
                if cap <= share {
                    grants.push((vm, cap));
                    left -= cap;
                    false
                } else {
                    true
                }
            });
            if pending.len() == before {
                grants.extend(pending.drain(..).map(|(vm, _)| (vm, share)));
            }
        }
        for vm in self.hosts[host].vms.clone() {
            self.vms.get_mut(&vm).expect("resident").mips = 0.0;
        }
        for (vm, mips) in grants {
            self.vms.get_mut(&vm).expect("resident").mips = mips;
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum FluidMsg {
    Arrival(usize),
    Completion,
}

/// Runs a fixed set of cloudlet arrivals against pre-allocated VMs, scheduling
/// one completion event at a time, and returns the finished cloudlets in
/// completion order.
pub fn run_arrivals(dc: &mut Datacenter, arrivals: Vec<(VmId, Cloudlet)>) -> Result<Vec<Cloudlet>, ResourceError> {
    let mut engine: Engine<FluidMsg> = Engine::new();
    let me = engine.register(EntityKind::Datacenter);
    for (i, (_, c)) in arrivals.iter().enumerate() {
        engine.schedule(c.submit_at, me, FluidMsg::Arrival(i))?;
    }
    let mut arrivals: Vec<Option<(VmId, Cloudlet)>> = arrivals.into_iter().map(Some).collect();
    let mut finished = Vec::new();
    let mut pending_completion = None;
    engine.run_until(SimTime::secs(f64::MAX), |eng, ev| -> Result<(), ResourceError> {
        finished.extend(dc.advance_to(eng.now())?);
        if let FluidMsg::Arrival(i) = ev.payload {
            let (vm, c) = arrivals[i].take().expect("each arrival fires once");
            dc.submit_cloudlet(vm, c)?;
        }
        if let Some(id) = pending_completion.take() {
            eng.cancel(id);
        }
        if let Some(dt) = dc.next_completion_in() {
            pending_completion = Some(eng.schedule_in(dt, me, FluidMsg::Completion)?);
        }
        Ok(())
    })?;
    Ok(finished)
}
