// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event engine.
//!
//! Lifecycle events update the ground truth about where each VM runs as soon
//! as they happen and emit a notification from the origin DCR. Every DCR
//! applies the notification once the flood reaches it, after the overlay
//! shortest-path delay from the origin. User packets consult the ingress DCR's
//! table at the moment they reach it, so packets racing a flood may be
//! tunneled to a data center the VM has already left; those are counted as
//! misses.
//!
//! Events at equal times are ordered scenario events first, then notification
//! arrivals, then packets reaching an ingress DCR, then packets reaching their
//! target, each in creation order.

mod report;
mod scenario;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use thiserror::Error;

pub use report::{PacketRecord, SimReport, Summary};
pub use scenario::{EventKind, Scenario, ScenarioError, ScenarioEvent};

use crate::overlay::{
    all_pairs_delay, flood_stats, overlay_metrics, DelayMatrix, Overlay, OverlayError,
};
use crate::protocol::{
    lookup, make_notification, route_reply, DcrTables, Notification, NotificationKind, PacketTrace,
    VmAddress, VmMode, VmRecord, TUNNEL_HEADER_BYTES,
};
use crate::topology::{distance, AddressPlan, DcrId, Point, Topology, TopologyError};

/// Lifecycle events that are illegal in the VM's current state.
#[derive(Debug, Error, PartialEq)]
pub enum LifecycleError {
    #[error("VM `{vm}` is {mode} and cannot be {action}")]
    ModeConflict {
        vm: String,
        mode: VmMode,
        action: &'static str,
    },
    #[error("VM `{0}` does not exist")]
    UnknownVm(String),
    #[error("VM `{0}` already exists")]
    DuplicateVm(String),
    #[error("VM `{0}` has been destroyed")]
    Dead(String),
    #[error("VM `{vm}` is not running at data center {dc}")]
    NotHosted { vm: String, dc: DcrId },
    #[error("VM `{vm}` is already running at data center {dc}")]
    AlreadyHosted { vm: String, dc: DcrId },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error("overlay covers {overlay} DCRs but the topology has {topology}")]
    OverlayMismatch { overlay: usize, topology: usize },
}

/// Ground truth: VMs, their addresses and locations, and user positions.
#[derive(Debug, Clone)]
pub struct World {
    vms: BTreeMap<String, VmRecord>,
    users: BTreeMap<String, Point>,
    plan: AddressPlan,
    next_seq: u64,
}

impl World {
    pub fn new(topology: &Topology) -> Self {
        Self {
            vms: BTreeMap::new(),
            users: BTreeMap::new(),
            plan: AddressPlan::new(topology),
            next_seq: 1,
        }
    }

    pub fn vm(&self, name: &str) -> Option<&VmRecord> {
        self.vms.get(name)
    }

    pub fn vms(&self) -> impl Iterator<Item = (&str, &VmRecord)> {
        self.vms.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn user(&self, name: &str) -> Option<Point> {
        self.users.get(name).copied()
    }

    fn live_vm(&mut self, name: &str) -> Result<&mut VmRecord, LifecycleError> {
        let rec = self
            .vms
            .get_mut(name)
            .ok_or_else(|| LifecycleError::UnknownVm(name.to_string()))?;
        if !rec.is_alive() {
            return Err(LifecycleError::Dead(name.to_string()));
        }
        Ok(rec)
    }

    fn notify(
        &mut self,
        kind: NotificationKind,
        rec: &VmRecord,
        dcrs: Vec<DcrId>,
    ) -> Option<Notification> {
        let addr = rec.anycast()?;
        let seq = self.next_seq;
        self.next_seq += 1;
        Some(make_notification(kind, addr, dcrs, seq).expect("arity matches kind"))
    }

    /// Applies a lifecycle event to the ground truth and returns the
    /// notification the origin DCR floods, if any. Non-lifecycle events are
    /// ignored. On error the world is left unchanged.
    pub fn handle_lifecycle(
        &mut self,
        event: &EventKind,
    ) -> Result<Option<Notification>, LifecycleError> {
        match event {
            EventKind::Create { vm, dc, mode } => {
                if self.vms.contains_key(vm) {
                    return Err(LifecycleError::DuplicateVm(vm.clone()));
                }
                let address = match mode {
                    VmMode::Unicast => VmAddress::Unicast(self.plan.allocate_unicast(*dc)?),
                    _ => VmAddress::Anycast(self.plan.allocate_anycast(*dc)?),
                };
                let rec = VmRecord::new(address, *mode, *dc).expect("address family follows mode");
                self.vms.insert(vm.clone(), rec);
                Ok(None)
            }
            EventKind::Migrate { vm, dc } => {
                self.plan.check(*dc)?;
                let rec = self.live_vm(vm)?;
                if rec.mode() != VmMode::AnycastMigratable {
                    return Err(LifecycleError::ModeConflict {
                        vm: vm.clone(),
                        mode: rec.mode(),
                        action: "migrated",
                    });
                }
                if rec.hosted_at(*dc) {
                    return Err(LifecycleError::AlreadyHosted {
                        vm: vm.clone(),
                        dc: *dc,
                    });
                }
                let locations = rec.locations_mut();
                locations.clear();
                locations.insert(*dc);
                let rec = rec.clone();
                Ok(self.notify(NotificationKind::Migration, &rec, vec![*dc]))
            }
            EventKind::Replicate { vm, src, dst } => {
                self.plan.check(*dst)?;
                let rec = self.live_vm(vm)?;
                if rec.mode() != VmMode::AnycastReplicated {
                    return Err(LifecycleError::ModeConflict {
                        vm: vm.clone(),
                        mode: rec.mode(),
                        action: "replicated",
                    });
                }
                if !rec.hosted_at(*src) {
                    return Err(LifecycleError::NotHosted {
                        vm: vm.clone(),
                        dc: *src,
                    });
                }
                if rec.hosted_at(*dst) {
                    return Err(LifecycleError::AlreadyHosted {
                        vm: vm.clone(),
                        dc: *dst,
                    });
                }
                rec.locations_mut().insert(*dst);
                let rec = rec.clone();
                Ok(self.notify(NotificationKind::Replication, &rec, vec![*src, *dst]))
            }
            EventKind::Destroy { vm, dc } => {
                let rec = self.live_vm(vm)?;
                if !rec.hosted_at(*dc) {
                    return Err(LifecycleError::NotHosted {
                        vm: vm.clone(),
                        dc: *dc,
                    });
                }
                rec.locations_mut().remove(dc);
                let rec = rec.clone();
                Ok(self.notify(NotificationKind::Destruction, &rec, vec![*dc]))
            }
            EventKind::User { .. } | EventKind::Send { .. } => Ok(None),
        }
    }
}

/// A user's logical session with one VM.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub id: String,
    pub user: String,
    pub vm: String,
    /// Data center that answered the session, once one has.
    pub pinned: Option<DcrId>,
    pub open: bool,
}

impl SessionState {
    pub fn new(id: &str, user: &str, vm: &str) -> Self {
        Self {
            id: id.to_string(),
            user: user.to_string(),
            vm: vm.to_string(),
            pinned: None,
            open: true,
        }
    }
}

/// Updates a session with the outcome of one of its packets and reports
/// whether the session broke.
///
/// Migrated VMs carry their connection state along, so a delivery at a new
/// location re-pins the session. A replica has no state for sessions opened
/// elsewhere and resets them. A miss always breaks. Closed sessions are not
/// tracked further.
pub fn track_session(state: &mut SessionState, trace: &PacketTrace, mode: VmMode) -> bool {
    if !state.open {
        return false;
    }
    match (trace.delivered_at(), state.pinned) {
        (None, _) => {
            state.open = false;
            true
        }
        (Some(dc), None) => {
            state.pinned = Some(dc);
            false
        }
        (Some(dc), Some(pinned)) if dc == pinned => false,
        (Some(dc), Some(_)) => {
            if mode == VmMode::AnycastMigratable {
                state.pinned = Some(dc);
                false
            } else {
                state.open = false;
                true
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    /// Bytes of outer header added per tunneled packet.
    pub tunnel_header_bytes: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tunnel_header_bytes: TUNNEL_HEADER_BYTES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Scenario(usize),
    Arrival { dcr: DcrId, notification: usize },
    Ingress { packet: usize },
    Target { packet: usize },
}

impl Action {
    fn rank(&self) -> u8 {
        match self {
            Action::Scenario(_) => 0,
            Action::Arrival { .. } => 1,
            Action::Ingress { .. } => 2,
            Action::Target { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    time: f64,
    order: u64,
    action: Action,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap pops the earliest event first
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.action.rank().cmp(&self.action.rank()))
            .then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    send_time: f64,
    user: String,
    user_pos: Point,
    vm: String,
    session: Option<String>,
    ingress: Option<DcrId>,
    target: Option<DcrId>,
}

/// One entry of the chronological trace log.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LogEntry {
    Notify(usize),
    Packet(usize),
}

/// A simulation in progress.
#[derive(Debug, Clone)]
pub struct Simulation {
    topology: Topology,
    delays: DelayMatrix,
    duplicates_per_origin: BTreeMap<DcrId, usize>,
    config: SimConfig,
    scenario: Scenario,
    queue: BinaryHeap<Queued>,
    next_order: u64,
    now: f64,
    world: World,
    tables: DcrTables,
    arrivals_pending: usize,
    sessions: BTreeMap<String, SessionState>,
    in_flight: Vec<InFlight>,
    notifications: Vec<Notification>,
    packets: Vec<PacketRecord>,
    log: Vec<LogEntry>,
    report: SimReport,
}

impl Simulation {
    pub fn new(
        topology: &Topology,
        overlay: &Overlay,
        scenario: Scenario,
    ) -> Result<Self, SimError> {
        Self::with_config(topology, overlay, scenario, SimConfig::default())
    }

    pub fn with_config(
        topology: &Topology,
        overlay: &Overlay,
        scenario: Scenario,
        config: SimConfig,
    ) -> Result<Self, SimError> {
        if overlay.node_count() != topology.len()
            || !topology.ids().all(|id| overlay.nodes().contains(&id))
        {
            return Err(SimError::OverlayMismatch {
                overlay: overlay.node_count(),
                topology: topology.len(),
            });
        }
        validate(topology, &scenario)?;
        let delays = all_pairs_delay(overlay)?;
        let duplicates_per_origin = topology
            .ids()
            .map(|id| flood_stats(overlay, id).map(|s| (id, s.duplicates)))
            .collect::<Result<_, _>>()?;
        let metrics = overlay_metrics(overlay)?;

        let mut sim = Self {
            topology: topology.clone(),
            delays,
            duplicates_per_origin,
            config,
            queue: BinaryHeap::new(),
            next_order: 0,
            now: 0.0,
            world: World::new(topology),
            tables: DcrTables::new(topology),
            arrivals_pending: 0,
            sessions: BTreeMap::new(),
            in_flight: Vec::new(),
            notifications: Vec::new(),
            packets: Vec::new(),
            log: Vec::new(),
            report: SimReport::empty(metrics),
            scenario,
        };
        let times: Vec<f64> = sim.scenario.events().iter().map(|e| e.time).collect();
        for (i, time) in times.into_iter().enumerate() {
            sim.push(time, Action::Scenario(i));
        }
        Ok(sim)
    }

    fn push(&mut self, time: f64, action: Action) {
        if matches!(action, Action::Arrival { .. }) {
            self.arrivals_pending += 1;
        }
        self.queue.push(Queued {
            time,
            order: self.next_order,
            action,
        });
        self.next_order += 1;
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn tables(&self) -> &DcrTables {
        &self.tables
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// True iff no notification is in flight and every DCR holds the same
    /// table.
    pub fn quiescence_check(&self) -> bool {
        self.arrivals_pending == 0 && self.tables.all_identical()
    }

    /// Processes every event scheduled at or before `time`.
    pub fn advance_to(&mut self, time: f64) {
        while let Some(next) = self.queue.peek() {
            if next.time > time {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.now = ev.time;
            self.dispatch(ev.action);
        }
        self.now = self.now.max(time);
    }

    /// Runs to completion and returns the report.
    pub fn run(mut self) -> SimReport {
        while let Some(ev) = self.queue.pop() {
            self.now = ev.time;
            self.dispatch(ev.action);
        }
        self.finish()
    }

    fn finish(mut self) -> SimReport {
        let overlay = self.report.overlay;
        let mut report = std::mem::replace(&mut self.report, SimReport::empty(overlay));
        report.finalize(
            self.packets,
            self.notifications,
            self.log,
            self.tables,
            self.sessions.len(),
        );
        report
    }

    fn dispatch(&mut self, action: Action) {
        match action {
            Action::Scenario(i) => self.scenario_event(i),
            Action::Arrival { dcr, notification } => {
                self.arrivals_pending -= 1;
                let n = &self.notifications[notification];
                self.tables.get_mut(dcr).apply(n);
            }
            Action::Ingress { packet } => self.at_ingress(packet),
            Action::Target { packet } => self.at_target(packet),
        }
    }

    fn scenario_event(&mut self, index: usize) {
        let event = self.scenario.events()[index].clone();
        let now = self.now;
        match &event.kind {
            EventKind::User { user, pos } => {
                self.world.users.insert(user.clone(), *pos);
            }
            EventKind::Send { user, vm, session } => {
                let user_pos = self.world.users[user];
                let rec = &self.world.vms[vm];
                let mut flight = InFlight {
                    send_time: now,
                    user: user.clone(),
                    user_pos,
                    vm: vm.clone(),
                    session: session.clone(),
                    ingress: None,
                    target: None,
                };
                if let Some(sid) = session {
                    self.sessions
                        .entry(sid.clone())
                        .or_insert_with(|| SessionState::new(sid, user, vm));
                }
                let packet = self.in_flight.len();
                match rec.address() {
                    VmAddress::Unicast(addr) => {
                        flight.target = Some(addr.dc);
                        let t = now + distance(user_pos, self.topology.pos(addr.dc));
                        self.in_flight.push(flight);
                        self.push(t, Action::Target { packet });
                    }
                    VmAddress::Anycast(_) => {
                        let ingress = self.topology.nearest_dcr(user_pos);
                        flight.ingress = Some(ingress);
                        let t = now + distance(user_pos, self.topology.pos(ingress));
                        self.in_flight.push(flight);
                        self.push(t, Action::Ingress { packet });
                    }
                }
            }
            kind => {
                let emitted = self
                    .world
                    .handle_lifecycle(kind)
                    .expect("scenario validated before the run");
                if let Some(n) = emitted {
                    self.flood(n);
                }
            }
        }
    }

    fn flood(&mut self, n: Notification) {
        let origin = n.origin();
        let id = self.notifications.len();
        self.report.summary.notifications += 1;
        self.report.summary.duplicate_notifications += self.duplicates_per_origin[&origin];
        self.notifications.push(n);
        self.log.push(LogEntry::Notify(id));
        let schedule = self.delays.row(origin).expect("origin is an overlay node");
        let now = self.now;
        for (dcr, delay) in schedule {
            self.push(
                now + delay,
                Action::Arrival {
                    dcr,
                    notification: id,
                },
            );
        }
    }

    fn at_ingress(&mut self, packet: usize) {
        let flight = &self.in_flight[packet];
        let ingress = flight.ingress.expect("anycast packet");
        let addr = self.world.vms[&flight.vm]
            .anycast()
            .expect("anycast packet");
        let target = lookup(self.tables.get(ingress), &addr, ingress, &self.topology);
        let t = self.now + distance(self.topology.pos(ingress), self.topology.pos(target));
        self.in_flight[packet].target = Some(target);
        self.push(t, Action::Target { packet });
    }

    fn at_target(&mut self, packet: usize) {
        let flight = self.in_flight[packet].clone();
        let target = flight.target.expect("target chosen before arrival");
        let rec = &self.world.vms[&flight.vm];
        let delivered = rec.hosted_at(target);
        let mode = rec.mode();
        let trace = match flight.ingress {
            None => PacketTrace::direct(flight.user_pos, target, &self.topology, delivered),
            Some(ingress) => {
                PacketTrace::tunneled(flight.user_pos, ingress, target, &self.topology, delivered)
            }
        };
        let reply = trace
            .delivered_at()
            .map(|dc| route_reply(dc, flight.user_pos, &self.topology));
        let session_break = match &flight.session {
            Some(sid) => {
                let state = self.sessions.get_mut(sid).expect("session opened at send");
                track_session(state, &trace, mode)
            }
            None => false,
        };
        let direct_delay = trace
            .delivered_at()
            .map(|dc| distance(flight.user_pos, self.topology.pos(dc)));
        let tunnel_bytes = if trace.tunneled {
            self.config.tunnel_header_bytes
        } else {
            0
        };
        let index = self.packets.len();
        self.packets.push(PacketRecord {
            index,
            send_time: flight.send_time,
            user: flight.user,
            vm: flight.vm,
            session: flight.session,
            trace,
            direct_delay,
            reply,
            session_break,
            tunnel_bytes,
        });
        self.log.push(LogEntry::Packet(index));
    }

    pub fn sessions(&self) -> &BTreeMap<String, SessionState> {
        &self.sessions
    }
}

/// Checks every reference in the scenario and dry-runs the lifecycle so that
/// illegal events are reported with their line before anything executes.
pub fn validate(topology: &Topology, scenario: &Scenario) -> Result<(), ScenarioError> {
    let mut world = World::new(topology);
    let mut sessions: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
    for ev in scenario.events() {
        let line = ev.line;
        let reference = |message: String| ScenarioError::Reference { line, message };
        match &ev.kind {
            EventKind::User { user, pos } => {
                world.users.insert(user.clone(), *pos);
            }
            EventKind::Send { user, vm, session } => {
                if !world.users.contains_key(user) {
                    return Err(reference(format!("user `{user}` is not defined")));
                }
                if !world.vms.contains_key(vm) {
                    return Err(reference(format!("VM `{vm}` is not defined")));
                }
                if let Some(sid) = session {
                    let owner = sessions.entry(sid).or_insert((user, vm));
                    if *owner != (user.as_str(), vm.as_str()) {
                        return Err(reference(format!(
                            "session `{sid}` belongs to user `{}` and VM `{}`",
                            owner.0, owner.1
                        )));
                    }
                }
            }
            kind => {
                world
                    .handle_lifecycle(kind)
                    .map_err(|source| ScenarioError::Lifecycle { line, source })?;
            }
        }
    }
    Ok(())
}

/// Runs a whole scenario.
pub fn run_scenario(
    topology: &Topology,
    overlay: &Overlay,
    scenario: Scenario,
) -> Result<SimReport, SimError> {
    Ok(Simulation::new(topology, overlay, scenario)?.run())
}
