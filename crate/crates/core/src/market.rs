//! Cloud Exchange (offer registry and matchmaker) and Cloud Broker.
//!
//! Quotes are advisory: matching never reserves capacity, so a provider may
//! fill up between a quote and the deployment that follows it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::currency::Cents;
use crate::kernel::{EntityId, SimTime};
use crate::resource::{Cloudlet, CloudletId, VmId, VmSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketError {
    #[error("provider {0} is not registered with the exchange")]
    UnknownProvider(EntityId),
    #[error("application has {vms} VMs but {cloudlets} cloudlets")]
    MismatchedApplication { vms: usize, cloudlets: usize },
    #[error("invalid application: {0}")]
    InvalidApplication(String),
}

/// A provider's advertised availability and price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offer {
    pub provider: EntityId,
    pub free_slots: u32,
    pub total_slots: u32,
    /// Widest VM, in PEs, that any host can take.
    pub max_vm_pes: u32,
    pub price_per_hour: Cents,
    pub sla_terms: BTreeMap<String, String>,
    pub published_at: SimTime,
}

impl Offer {
    fn utilization_after(&self, extra_slots: u32) -> f64 {
        if self.total_slots == 0 {
            return 1.0;
        }
        let used = self.total_slots.saturating_sub(self.free_slots) + extra_slots;
        used as f64 / self.total_slots as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Qos {
    /// Highest utilization the chosen provider may reach after the allocation.
    pub max_utilization: f64,
    pub budget_per_hour: Option<Cents>,
}

impl Default for Qos {
    fn default() -> Self {
        Qos { max_utilization: 1.0, budget_per_hour: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupRequest {
    pub requester: EntityId,
    pub count: u32,
    pub spec: VmSpec,
    pub qos: Qos,
    /// Providers that must not be quoted, e.g. the origin of a migration.
    pub exclude: Vec<EntityId>,
}

impl LookupRequest {
    pub fn slots_needed(&self) -> u32 {
        self.count * self.spec.pe_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quote {
    pub provider: EntityId,
    pub granted_slots: u32,
    pub price_per_hour: Cents,
}

/// The registry side of the exchange: one live offer per registered provider.
#[derive(Debug, Clone, Default)]
pub struct Exchange {
    providers: BTreeSet<EntityId>,
    offers: BTreeMap<EntityId, Offer>,
}

impl Exchange {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_provider(&mut self, provider: EntityId) {
        self.providers.insert(provider);
    }

    /// Replaces whatever the provider published before.
    pub fn publish_offer(&mut self, offer: Offer) -> Result<(), MarketError> {
        if !self.providers.contains(&offer.provider) {
            return Err(MarketError::UnknownProvider(offer.provider));
        }
        self.offers.insert(offer.provider, offer);
        Ok(())
    }

    pub fn offer(&self, provider: EntityId) -> Option<&Offer> {
        self.offers.get(&provider)
    }

    pub fn offers(&self) -> impl Iterator<Item = &Offer> {
        self.offers.values()
    }

    pub fn len(&self) -> usize {
        self.offers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offers.is_empty()
    }

    pub fn match_request(&self, req: &LookupRequest) -> Option<Quote> {
        match_offers(self.offers.values(), req)
    }
}

/// Whether an offer satisfies capacity, overload and budget constraints for a request.
pub fn offer_satisfies(offer: &Offer, req: &LookupRequest) -> bool {
    let need = req.slots_needed();
    offer.free_slots >= need
        && req.spec.pe_count <= offer.max_vm_pes
        && offer.utilization_after(need) <= req.qos.max_utilization
        && req.qos.budget_per_hour.is_none_or(|b| offer.price_per_hour <= b)
}

/// Picks the qualifying offer with the most free slots, then the lowest price,
/// then the lowest provider id.
pub fn match_offers<'a>(offers: impl IntoIterator<Item = &'a Offer>, req: &LookupRequest) -> Option<Quote> {
    offers
        .into_iter()
        .filter(|o| !req.exclude.contains(&o.provider) && offer_satisfies(o, req))
        .min_by(|a, b| b.free_slots.cmp(&a.free_slots).then(a.price_per_hour.cmp(&b.price_per_hour)).then(a.provider.cmp(&b.provider)))
        .map(|o| Quote { provider: o.provider, granted_slots: req.slots_needed(), price_per_hour: o.price_per_hour })
}

/// What a user hands to the broker: VMs to create and the work to run on them.
#[derive(Debug, Clone, PartialEq)]
pub struct Application {
    pub origin: EntityId,
    pub submit_at: SimTime,
    pub vms: Vec<VmSpec>,
    pub cloudlet_lengths_mi: Vec<f64>,
}

/// One VM and the cloudlet bound to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub vm: VmId,
    pub spec: VmSpec,
    pub cloudlet: Cloudlet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub origin: EntityId,
    pub submit_at: SimTime,
    pub bindings: Vec<Binding>,
}

impl Deployment {
    /// Consecutive bindings with identical specs form one placement request.
    pub fn request_groups(&self) -> Vec<(VmSpec, Vec<usize>)> {
        let mut groups: Vec<(VmSpec, Vec<usize>)> = Vec::new();
        for (i, b) in self.bindings.iter().enumerate() {
            match groups.last_mut() {
                Some((spec, members)) if *spec == b.spec => members.push(i),
                _ => groups.push((b.spec, vec![i])),
            }
        }
        groups
    }
}

/// Consumer-side agent. Hands out VM and cloudlet ids and binds cloudlets to VMs.
#[derive(Debug, Clone, Default)]
pub struct Broker {
    next_vm: u64,
    next_cloudlet: u64,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh VM id, also used for VMs re-created by migration.
    pub fn fresh_vm_id(&mut self) -> VmId {
        let id = VmId(self.next_vm);
        self.next_vm += 1;
        id
    }

    /// Binds cloudlets one-to-one to VMs in list order.
    pub fn submit(&mut self, app: &Application) -> Result<Deployment, MarketError> {
        if app.vms.len() != app.cloudlet_lengths_mi.len() {
            return Err(MarketError::MismatchedApplication { vms: app.vms.len(), cloudlets: app.cloudlet_lengths_mi.len() });
        }
        if let Some(bad) = app.cloudlet_lengths_mi.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(MarketError::InvalidApplication(format!("cloudlet length must be positive, got {bad}")));
        }
        for spec in &app.vms {
            spec.validate().map_err(|e| MarketError::InvalidApplication(e.to_string()))?;
        }
        let bindings = app
            .vms
            .iter()
            .zip(&app.cloudlet_lengths_mi)
            .map(|(spec, &len)| {
                let vm = self.fresh_vm_id();
                let id = CloudletId(self.next_cloudlet);
                self.next_cloudlet += 1;
                let mut cloudlet = Cloudlet::new(id, len, app.submit_at);
                cloudlet.assigned_vm = Some(vm);
                Binding { vm, spec: *spec, cloudlet }
            })
            .collect();
        Ok(Deployment { origin: app.origin, submit_at: app.submit_at, bindings })
    }
}
