//! Private-to-public cloud bursting with hourly billing.
//!
//! All tasks land in one FCFS queue at t=0. Each private machine and each
//! leased public VM runs one task at a time. A public VM that frees up while
//! the queue is empty is destroyed and its lease closed.

use std::collections::{BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::currency::Cents;
use crate::kernel::{Engine, EntityKind, EventId, KernelError, SimTime};
use crate::report::TaskRow;
use crate::resource::{Cloudlet, CloudletId, Datacenter, HostSpec, ResourceError, VmId, VmSpec};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BurstError {
    #[error("invalid burst configuration: {0}")]
    Config(String),
    #[error("workload is empty")]
    EmptyWorkload,
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstConfig {
    /// Public VMs leased, as a share of the private machine count.
    pub fraction: f64,
    pub price_per_hour: Cents,
    pub public_vm_spec: VmSpec,
    pub boot_delay_s: f64,
    pub public_mips_per_pe: f64,
}

impl Default for BurstConfig {
    fn default() -> Self {
        BurstConfig {
            fraction: 0.0,
            price_per_hour: Cents(10),
            // small instance: 1.7 GB, 1 core, 160 GB
            public_vm_spec: VmSpec::new(1740, 160, 1),
            boot_delay_s: 0.0,
            public_mips_per_pe: 1000.0,
        }
    }
}

impl BurstConfig {
    pub fn validate(&self) -> Result<(), BurstError> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(BurstError::Config(format!("fraction must lie in [0, 1], got {}", self.fraction)));
        }
        if !(self.boot_delay_s.is_finite() && self.boot_delay_s >= 0.0) {
            return Err(BurstError::Config(format!("boot_delay_s must be non-negative, got {}", self.boot_delay_s)));
        }
        if !(self.public_mips_per_pe.is_finite() && self.public_mips_per_pe > 0.0) {
            return Err(BurstError::Config("public_mips_per_pe must be positive".into()));
        }
        if self.price_per_hour.0 < 0 {
            return Err(BurstError::Config("price_per_hour must be non-negative".into()));
        }
        self.public_vm_spec.validate()?;
        Ok(())
    }

    pub fn public_vm_count(&self, private_machines: usize) -> usize {
        (self.fraction * private_machines as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillingRecord {
    pub instance: VmId,
    pub lease_start: SimTime,
    pub lease_end: SimTime,
    pub charged_hours: i64,
    pub cost: Cents,
}

/// Started hours, never fewer than one.
pub fn charged_hours(lease_seconds: f64) -> i64 {
    ((lease_seconds / SECONDS_PER_HOUR).ceil() as i64).max(1)
}

pub fn bill(instance: VmId, lease_start: SimTime, lease_end: SimTime, rate: Cents) -> BillingRecord {
    debug_assert!(lease_end >= lease_start);
    let hours = charged_hours(lease_end - lease_start);
    BillingRecord { instance, lease_start, lease_end, charged_hours: hours, cost: rate * hours }
}

/// Task durations: a normal distribution truncated to `[min_s, max_s]`, converted
/// to instructions at `reference_mips`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub n: usize,
    pub mean_s: f64,
    pub sd_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub reference_mips: f64,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        WorkloadParams { n: 10_000, mean_s: 1260.0, sd_s: 20.0, min_s: 1200.0, max_s: 1320.0, reference_mips: 1000.0 }
    }
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<(), BurstError> {
        let finite = [self.mean_s, self.sd_s, self.min_s, self.max_s, self.reference_mips].iter().all(|v| v.is_finite());
        if !finite || self.sd_s <= 0.0 || self.reference_mips <= 0.0 || self.min_s <= 0.0 || self.min_s > self.max_s {
            return Err(BurstError::Config("workload needs 0 < min_s <= max_s, sd_s > 0 and reference_mips > 0".into()));
        }
        // rejection sampling would spin on an interval with no mass
        if (self.mean_s - self.max_s) / self.sd_s > 8.0 || (self.min_s - self.mean_s) / self.sd_s > 8.0 {
            return Err(BurstError::Config("workload interval lies too far from the mean".into()));
        }
        Ok(())
    }

    pub fn durations(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(self.mean_s, self.sd_s).expect("validated sd");
        (0..self.n)
            .map(|_| loop {
                let d = normal.sample(&mut rng);
                if (self.min_s..=self.max_s).contains(&d) {
                    break d;
                }
            })
            .collect()
    }

    pub fn generate(&self, seed: u64) -> Vec<Cloudlet> {
        self.durations(seed)
            .into_iter()
            .enumerate()
            .map(|(i, d)| Cloudlet::new(CloudletId(i as u64), d * self.reference_mips, SimTime::ZERO))
            .collect()
    }
}

/// `n` tasks with the default duration model.
pub fn generate_workload(n: usize, seed: u64) -> Vec<Cloudlet> {
    WorkloadParams { n, ..WorkloadParams::default() }.generate(seed)
}

/// FCFS queue of waiting tasks.
#[derive(Debug, Clone, Default)]
pub struct TaskQueue {
    tasks: VecDeque<Cloudlet>,
}

impl TaskQueue {
    pub fn push(&mut self, task: Cloudlet) {
        self.tasks.push_back(task);
    }

    pub fn pop(&mut self) -> Option<Cloudlet> {
        self.tasks.pop_front()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurstOutcome {
    pub makespan: SimTime,
    pub total_cost: Cents,
    pub records: Vec<BillingRecord>,
    pub rows: Vec<TaskRow>,
    pub public_vms: usize,
}

#[derive(Debug, Clone, Copy)]
enum Msg {
    Release,
    Boot,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pool {
    Private,
    Public,
}

struct Provisioner {
    private: Datacenter,
    public: Option<Datacenter>,
    private_vms: Vec<VmId>,
    public_vms: Vec<VmId>,
    idle_private: BTreeSet<usize>,
    idle_public: BTreeSet<usize>,
    leases: Vec<Option<SimTime>>,
    queue: TaskQueue,
    rate: Cents,
    public_spec: VmSpec,
    records: Vec<BillingRecord>,
    rows: Vec<TaskRow>,
    completion: [Option<EventId>; 2],
}

impl Provisioner {
    fn sync(&mut self, now: SimTime) -> Result<(), BurstError> {
        let mut done: Vec<(Pool, Cloudlet)> = self.private.advance_to(now)?.into_iter().map(|c| (Pool::Private, c)).collect();
        if let Some(public) = self.public.as_mut() {
            done.extend(public.advance_to(now)?.into_iter().map(|c| (Pool::Public, c)));
        }
        // private first at equal times
        done.sort_by(|(pa, a), (pb, b)| a.finish_at.cmp(&b.finish_at).then(pa.cmp(pb)).then(a.id.cmp(&b.id)));
        for (pool, c) in done {
            let vm = c.assigned_vm.expect("completed task has a VM");
            let provider = match pool {
                Pool::Private => {
                    self.idle_private.insert(self.private_vms.binary_search(&vm).expect("private VM"));
                    "private"
                }
                Pool::Public => {
                    self.idle_public.insert(self.public_vms.binary_search(&vm).expect("public VM"));
                    "public"
                }
            };
            self.rows.push(TaskRow {
                id: c.id.0,
                submit: c.submit_at,
                start: c.start_at.expect("started"),
                finish: c.finish_at.expect("finished"),
                provider: provider.into(),
            });
        }
        Ok(())
    }

    fn dispatch(&mut self, now: SimTime) -> Result<(), BurstError> {
        while let Some(&m) = self.idle_private.first() {
            let Some(task) = self.queue.pop() else { break };
            self.idle_private.remove(&m);
            self.private.submit_cloudlet(self.private_vms[m], task)?;
        }
        let Some(public) = self.public.as_mut() else { return Ok(()) };
        while let Some(v) = self.idle_public.pop_first() {
            let vm = self.public_vms[v];
            match self.queue.pop() {
                Some(task) => public.submit_cloudlet(vm, task)?,
                None => {
                    public.deallocate_vm(vm)?;
                    let start = self.leases[v].take().expect("lease open");
                    self.records.push(bill(vm, start, now, self.rate));
                }
            }
        }
        Ok(())
    }

    fn boot(&mut self, now: SimTime) -> Result<(), BurstError> {
        let Some(public) = self.public.as_mut() else { return Ok(()) };
        for (v, &vm) in self.public_vms.iter().enumerate() {
            public.allocate_vm(vm, self.public_spec)?;
            self.leases[v] = Some(now);
            self.idle_public.insert(v);
        }
        Ok(())
    }

    fn reschedule(&mut self, eng: &mut Engine<Msg>) -> Result<(), BurstError> {
        let pools = [Some(&self.private), self.public.as_ref()];
        for (slot, dc) in self.completion.iter_mut().zip(pools) {
            if let Some(id) = slot.take() {
                eng.cancel(id);
            }
            if let Some(dc) = dc {
                if let Some(dt) = dc.next_completion_in() {
                    *slot = Some(eng.schedule_in(dt, dc.id(), Msg::Complete)?);
                }
            }
        }
        Ok(())
    }
}

/// Runs the workload on `private` (used as a template; it must hold no VMs) plus
/// `round(fraction * hosts)` leased public VMs.
pub fn run_burst(private: &Datacenter, cfg: &BurstConfig, workload: Vec<Cloudlet>) -> Result<BurstOutcome, BurstError> {
    cfg.validate()?;
    if workload.is_empty() {
        return Err(BurstError::EmptyWorkload);
    }
    if private.vm_ids().next().is_some() {
        return Err(BurstError::Config("private datacenter template must be empty".into()));
    }
    let mut engine: Engine<Msg> = Engine::new();
    let provisioner_id = engine.register(EntityKind::Provisioner);
    let private_id = engine.register(EntityKind::Datacenter);
    let public_id = engine.register(EntityKind::Datacenter);

    let mut private_dc = Datacenter::new(
        private_id,
        (0..private.host_count()).map(|h| private.host_spec(h).expect("host")).collect(),
        private.oversubscription(),
    )?;
    let mut private_vms = Vec::with_capacity(private.host_count());
    for h in 0..private.host_count() {
        let hs = private_dc.host_spec(h).expect("host");
        let vm = VmId(h as u64);
        private_dc.allocate_vm(vm, VmSpec::new(hs.ram_mb, hs.storage_gb, hs.pe_count))?;
        private_vms.push(vm);
    }

    let n_public = cfg.public_vm_count(private.host_count());
    let public_dc = if n_public > 0 {
        let host = HostSpec {
            pe_count: cfg.public_vm_spec.pe_count,
            mips_per_pe: cfg.public_mips_per_pe,
            ram_mb: cfg.public_vm_spec.ram_mb,
            storage_gb: cfg.public_vm_spec.storage_gb,
        };
        Some(Datacenter::uniform(public_id, n_public, host, 1.0)?)
    } else {
        None
    };
    let base = private_vms.len() as u64;
    let public_vms: Vec<VmId> = (0..n_public as u64).map(|k| VmId(base + k)).collect();

    let mut queue = TaskQueue::default();
    for task in workload {
        queue.push(task);
    }
    let mut p = Provisioner {
        idle_private: (0..private_vms.len()).collect(),
        idle_public: BTreeSet::new(),
        leases: vec![None; n_public],
        private: private_dc,
        public: public_dc,
        private_vms,
        public_vms,
        queue,
        rate: cfg.price_per_hour,
        public_spec: cfg.public_vm_spec,
        records: Vec::new(),
        rows: Vec::new(),
        completion: [None, None],
    };

    engine.schedule(SimTime::ZERO, provisioner_id, Msg::Release)?;
    if n_public > 0 {
        engine.schedule(SimTime::new(cfg.boot_delay_s)?, provisioner_id, Msg::Boot)?;
    }
    engine.run_until(SimTime::secs(f64::MAX), |eng, ev| -> Result<(), BurstError> {
        let now = eng.now();
        p.sync(now)?;
        if let Msg::Boot = ev.payload {
            p.boot(now)?;
        }
        p.dispatch(now)?;
        p.reschedule(eng)
    })?;

    // public VMs that never ran anything still hold a lease
    let end = engine.now();
    for (v, lease) in p.leases.iter_mut().enumerate() {
        if let Some(start) = lease.take() {
            p.records.push(bill(p.public_vms[v], start, end, p.rate));
        }
    }
    p.rows.sort_by_key(|r| r.id);
    p.records.sort_by_key(|r| r.instance);
    let makespan = p.rows.iter().map(|r| r.finish).max().unwrap_or(SimTime::ZERO);
    let total_cost = p.records.iter().map(|r| r.cost).sum();
    Ok(BurstOutcome { makespan, total_cost, records: p.records, rows: p.rows, public_vms: n_public })
}
