// SPDX-License-Identifier: Apache-2.0

//! DCR state machines: VM forwarding tables, lifecycle notifications, and the
//! data path for user packets and VM replies.
//!
//! A user packet for an anycast VM lands at the DCR nearest to the user. That
//! DCR looks the VM up in its forwarding table and tunnels the packet to the
//! data center hosting the VM, or to the nearest replica. When the table has
//! no entry the VM has never moved, so the packet goes to the data center that
//! owns the address's subblock. Replies always travel directly to the user.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::topology::{
    closest_of, distance, AnycastAddress, DcrId, Point, Topology, UnicastAddress,
};

/// Extra bytes an outer IP header adds to a tunneled packet.
pub const TUNNEL_HEADER_BYTES: u64 = 20;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("{kind} notification takes {expected} DCR address(es), got {got}")]
    Arity {
        kind: NotificationKind,
        expected: usize,
        got: usize,
    },
    #[error("address {address} does not fit VM mode {mode}")]
    AddressFamily { address: VmAddress, mode: VmMode },
    #[error("bad notification `{0}`")]
    Parse(String),
}

/// How a VM was addressed at creation. Fixed for the VM's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VmMode {
    Unicast,
    AnycastMigratable,
    AnycastReplicated,
}

impl fmt::Display for VmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VmMode::Unicast => "unicast",
            VmMode::AnycastMigratable => "anycast-migrate",
            VmMode::AnycastReplicated => "anycast-replicate",
        })
    }
}

impl FromStr for VmMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unicast" => Ok(VmMode::Unicast),
            "anycast-migrate" => Ok(VmMode::AnycastMigratable),
            "anycast-replicate" => Ok(VmMode::AnycastReplicated),
            other => Err(format!("unknown VM mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VmAddress {
    Unicast(UnicastAddress),
    Anycast(AnycastAddress),
}

impl fmt::Display for VmAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VmAddress::Unicast(a) => a.fmt(f),
            VmAddress::Anycast(a) => a.fmt(f),
        }
    }
}

/// Ground truth about one VM. An empty location set means the VM is gone.
#[derive(Debug, Clone, PartialEq)]
pub struct VmRecord {
    address: VmAddress,
    mode: VmMode,
    locations: BTreeSet<DcrId>,
}

impl VmRecord {
    pub fn new(address: VmAddress, mode: VmMode, location: DcrId) -> Result<Self, ProtocolError> {
        let fits = matches!(
            (&address, mode),
            (VmAddress::Unicast(_), VmMode::Unicast)
                | (
                    VmAddress::Anycast(_),
                    VmMode::AnycastMigratable | VmMode::AnycastReplicated
                )
        );
        if !fits {
            return Err(ProtocolError::AddressFamily { address, mode });
        }
        Ok(Self {
            address,
            mode,
            locations: BTreeSet::from([location]),
        })
    }

    pub fn address(&self) -> VmAddress {
        self.address
    }

    pub fn anycast(&self) -> Option<AnycastAddress> {
        match self.address {
            VmAddress::Anycast(a) => Some(a),
            VmAddress::Unicast(_) => None,
        }
    }

    pub fn mode(&self) -> VmMode {
        self.mode
    }

    pub fn locations(&self) -> &BTreeSet<DcrId> {
        &self.locations
    }

    pub fn is_alive(&self) -> bool {
        !self.locations.is_empty()
    }

    pub fn hosted_at(&self, dc: DcrId) -> bool {
        self.locations.contains(&dc)
    }

    /// Ground-truth updates. The simulator checks mode legality first.
    pub(crate) fn locations_mut(&mut self) -> &mut BTreeSet<DcrId> {
        &mut self.locations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NotificationKind {
    Migration,
    Replication,
    Destruction,
}

impl NotificationKind {
    /// Number of DCR addresses a notification of this kind carries.
    pub fn arity(self) -> usize {
        match self {
            NotificationKind::Replication => 2,
            NotificationKind::Migration | NotificationKind::Destruction => 1,
        }
    }
}

impl fmt::Display for NotificationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NotificationKind::Migration => "MIGRATION",
            NotificationKind::Replication => "REPLICATION",
            NotificationKind::Destruction => "DESTRUCTION",
        })
    }
}

impl FromStr for NotificationKind {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MIGRATION" => Ok(NotificationKind::Migration),
            "REPLICATION" => Ok(NotificationKind::Replication),
            "DESTRUCTION" => Ok(NotificationKind::Destruction),
            other => Err(ProtocolError::Parse(format!("unknown kind `{other}`"))),
        }
    }
}

/// A lifecycle event flooded over the overlay.
///
/// `dcrs` is `[destination]` for a migration, `[source, destination]` for a
/// replication and `[site]` for a destruction. Sequence numbers order
/// notifications about the same VM; a higher number means a later event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notification {
    kind: NotificationKind,
    vm: AnycastAddress,
    dcrs: Vec<DcrId>,
    seq: u64,
}

/// Builds a notification, checking that the DCR list matches the kind.
pub fn make_notification(
    kind: NotificationKind,
    vm: AnycastAddress,
    dcrs: Vec<DcrId>,
    seq: u64,
) -> Result<Notification, ProtocolError> {
    if dcrs.len() != kind.arity() {
        return Err(ProtocolError::Arity {
            kind,
            expected: kind.arity(),
            got: dcrs.len(),
        });
    }
    Ok(Notification {
        kind,
        vm,
        dcrs,
        seq,
    })
}

impl Notification {
    pub fn kind(&self) -> NotificationKind {
        self.kind
    }

    pub fn vm(&self) -> AnycastAddress {
        self.vm
    }

    pub fn dcrs(&self) -> &[DcrId] {
        &self.dcrs
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    /// The DCR that floods this notification: the migration or replication
    /// destination, or the site of the destruction.
    pub fn origin(&self) -> DcrId {
        *self.dcrs.last().expect("arity checked at construction")
    }

    /// `NOTIFY <seq> <kind> <subblock>:<host> <dcr>[,<dcr>]`
    pub fn to_wire(&self) -> String {
        let dcrs: Vec<String> = self.dcrs.iter().map(|d| d.to_string()).collect();
        format!(
            "NOTIFY {} {} {} {}",
            self.seq,
            self.kind,
            self.vm,
            dcrs.join(",")
        )
    }

    pub fn parse_wire(line: &str) -> Result<Self, ProtocolError> {
        let bad = || ProtocolError::Parse(line.to_string());
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [tag, seq, kind, vm, dcrs] = fields.as_slice() else {
            return Err(bad());
        };
        if *tag != "NOTIFY" {
            return Err(bad());
        }
        let seq: u64 = seq.parse().map_err(|_| bad())?;
        let kind: NotificationKind = kind.parse()?;
        let (sub, host) = vm.split_once(':').ok_or_else(bad)?;
        let vm = AnycastAddress {
            subblock: DcrId(sub.parse().map_err(|_| bad())?),
            host: host.parse().map_err(|_| bad())?,
        };
        let dcrs = dcrs
            .split(',')
            .map(|d| d.parse().map(DcrId).map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        make_notification(kind, vm, dcrs, seq)
    }
}

impl fmt::Display for Notification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_wire())
    }
}

/// Per-VM bookkeeping. Each member DCR remembers the sequence number of the
/// last notification that touched it and whether that notification added or
/// removed it. A migration additionally hides every member older than itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct VmEntry {
    reset_seq: Option<u64>,
    members: BTreeMap<DcrId, (u64, bool)>,
}

impl VmEntry {
    fn mark(&mut self, dcr: DcrId, seq: u64, present: bool) {
        match self.members.get(&dcr) {
            Some(&(last, _)) if last >= seq => {}
            _ => {
                self.members.insert(dcr, (seq, present));
            }
        }
    }

    fn visible(&self) -> impl Iterator<Item = DcrId> + '_ {
        self.members
            .iter()
            .filter(|(_, &(seq, present))| present && self.reset_seq.is_none_or(|r| seq >= r))
            .map(|(&id, _)| id)
    }
}

/// A DCR's view of where migrated and replicated VMs currently run.
///
/// Notifications may arrive in any order; the table state only depends on the
/// set of notifications applied, provided sequence numbers are unique.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardingTable {
    vms: BTreeMap<AnycastAddress, VmEntry>,
}

impl ForwardingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, n: &Notification) {
        let entry = self.vms.entry(n.vm).or_default();
        match n.kind {
            NotificationKind::Migration => {
                if entry.reset_seq.is_none_or(|r| r < n.seq) {
                    entry.reset_seq = Some(n.seq);
                }
                entry.mark(n.dcrs[0], n.seq, true);
            }
            NotificationKind::Replication => {
                for &d in &n.dcrs {
                    entry.mark(d, n.seq, true);
                }
            }
            NotificationKind::Destruction => entry.mark(n.dcrs[0], n.seq, false),
        }
    }

    /// The DCRs currently listed for `vm`, or `None` if there is no entry.
    pub fn entry(&self, vm: &AnycastAddress) -> Option<BTreeSet<DcrId>> {
        let set: BTreeSet<DcrId> = self.vms.get(vm)?.visible().collect();
        (!set.is_empty()).then_some(set)
    }

    /// All non-empty entries, ordered by address.
    pub fn entries(&self) -> BTreeMap<AnycastAddress, BTreeSet<DcrId>> {
        self.vms
            .keys()
            .filter_map(|vm| self.entry(vm).map(|set| (*vm, set)))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries().is_empty()
    }
}

/// Pure form of [`ForwardingTable::apply`].
pub fn apply_notification(table: &ForwardingTable, n: &Notification) -> ForwardingTable {
    let mut next = table.clone();
    next.apply(n);
    next
}

/// Chooses the data center a packet for `vm` is tunneled to from DCR `at`.
pub fn lookup(
    table: &ForwardingTable,
    vm: &AnycastAddress,
    at: DcrId,
    topology: &Topology,
) -> DcrId {
    match table.entry(vm) {
        Some(members) => {
            let here = topology.pos(at);
            closest_of(here, members.into_iter().map(|id| (id, topology.pos(id))))
                .expect("entries are never empty")
        }
        None => vm.subblock,
    }
}

/// One forwarding table per DCR, indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct DcrTables {
    tables: Vec<ForwardingTable>,
}

impl DcrTables {
    pub fn new(topology: &Topology) -> Self {
        Self {
            tables: vec![ForwardingTable::new(); topology.len()],
        }
    }

    pub fn get(&self, dcr: DcrId) -> &ForwardingTable {
        &self.tables[dcr.index()]
    }

    pub fn get_mut(&mut self, dcr: DcrId) -> &mut ForwardingTable {
        &mut self.tables[dcr.index()]
    }

    /// Delivers `n` to every DCR at once.
    pub fn apply_everywhere(&mut self, n: &Notification) {
        for t in &mut self.tables {
            t.apply(n);
        }
    }

    pub fn all_identical(&self) -> bool {
        self.tables.windows(2).all(|w| w[0] == w[1])
    }

    pub fn iter(&self) -> impl Iterator<Item = (DcrId, &ForwardingTable)> {
        self.tables
            .iter()
            .enumerate()
            .map(|(i, t)| (DcrId(i as u32 + 1), t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Endpoint {
    Point(Point),
    Dcr(DcrId),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Point(p) => p.fmt(f),
            Endpoint::Dcr(d) => write!(f, "dcr{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hop {
    pub from: Endpoint,
    pub to: Endpoint,
    pub delay: f64,
}

impl fmt::Display for Hop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}@{:.6}", self.from, self.to, self.delay)
    }
}

/// Where a packet ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    /// Handed to the VM in this data center.
    Dc(DcrId),
    /// A reply reached the user.
    User,
    /// The target data center does not host the VM.
    Miss,
}

impl fmt::Display for Delivery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delivery::Dc(d) => d.fmt(f),
            Delivery::User => f.write_str("user"),
            Delivery::Miss => f.write_str("MISS"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketTrace {
    pub hops: Vec<Hop>,
    pub total_delay: f64,
    /// Whether an outer header was added for DCR-to-DCR transit.
    pub tunneled: bool,
    pub result: Delivery,
}

impl PacketTrace {
    fn from_hops(hops: Vec<Hop>, tunneled: bool, result: Delivery) -> Self {
        let total_delay = hops.iter().map(|h| h.delay).sum();
        Self {
            hops,
            total_delay,
            tunneled,
            result,
        }
    }

    /// Direct path from a user to a unicast VM's data center.
    pub fn direct(user: Point, dc: DcrId, topology: &Topology, delivered: bool) -> Self {
        let hop = Hop {
            from: Endpoint::Point(user),
            to: Endpoint::Dcr(dc),
            delay: distance(user, topology.pos(dc)),
        };
        let result = if delivered {
            Delivery::Dc(dc)
        } else {
            Delivery::Miss
        };
        Self::from_hops(vec![hop], false, result)
    }

    /// User to ingress DCR, then tunneled from the ingress to `target`.
    pub fn tunneled(
        user: Point,
        ingress: DcrId,
        target: DcrId,
        topology: &Topology,
        delivered: bool,
    ) -> Self {
        let hops = vec![
            Hop {
                from: Endpoint::Point(user),
                to: Endpoint::Dcr(ingress),
                delay: distance(user, topology.pos(ingress)),
            },
            Hop {
                from: Endpoint::Dcr(ingress),
                to: Endpoint::Dcr(target),
                delay: distance(topology.pos(ingress), topology.pos(target)),
            },
        ];
        let result = if delivered {
            Delivery::Dc(target)
        } else {
            Delivery::Miss
        };
        Self::from_hops(hops, true, result)
    }

    /// The data center the packet was sent towards, delivered or not.
    pub fn target(&self) -> Option<DcrId> {
        match self.hops.last()?.to {
            Endpoint::Dcr(d) => Some(d),
            Endpoint::Point(_) => None,
        }
    }

    pub fn ingress(&self) -> Option<DcrId> {
        if !self.tunneled {
            return None;
        }
        match self.hops.first()?.to {
            Endpoint::Dcr(d) => Some(d),
            Endpoint::Point(_) => None,
        }
    }

    pub fn delivered_at(&self) -> Option<DcrId> {
        match self.result {
            Delivery::Dc(d) => Some(d),
            _ => None,
        }
    }

    /// `PKT <time> <hops...> delay=<v> tunneled=<0|1> result=<dcr|MISS>`
    pub fn log_line(&self, time: f64) -> String {
        let mut line = format!("PKT {time:.6}");
        for hop in &self.hops {
            line.push(' ');
            line.push_str(&hop.to_string());
        }
        line.push_str(&format!(
            " delay={:.6} tunneled={} result={}",
            self.total_delay,
            u8::from(self.tunneled),
            self.result
        ));
        line
    }
}

/// Routes one user packet against the given tables, judging delivery by the
/// VM's current locations.
pub fn route_user_packet(
    user: Point,
    vm: &VmRecord,
    tables: &DcrTables,
    topology: &Topology,
) -> PacketTrace {
    match vm.address() {
        VmAddress::Unicast(addr) => {
            PacketTrace::direct(user, addr.dc, topology, vm.hosted_at(addr.dc))
        }
        VmAddress::Anycast(addr) => {
            let ingress = topology.nearest_dcr(user);
            let target = lookup(tables.get(ingress), &addr, ingress, topology);
            PacketTrace::tunneled(user, ingress, target, topology, vm.hosted_at(target))
        }
    }
}

/// Replies go straight from the hosting data center to the user.
pub fn route_reply(vm_location: DcrId, user: Point, topology: &Topology) -> PacketTrace {
    let hop = Hop {
        from: Endpoint::Dcr(vm_location),
        to: Endpoint::Point(user),
        delay: distance(topology.pos(vm_location), user),
    };
    PacketTrace::from_hops(vec![hop], false, Delivery::User)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vm(sub: u32, host: u32) -> AnycastAddress {
        AnycastAddress {
            subblock: DcrId(sub),
            host,
        }
    }

    fn ids(v: &[u32]) -> BTreeSet<DcrId> {
        v.iter().copied().map(DcrId).collect()
    }

    fn note(kind: NotificationKind, v: AnycastAddress, dcrs: &[u32], seq: u64) -> Notification {
        make_notification(kind, v, dcrs.iter().copied().map(DcrId).collect(), seq).unwrap()
    }

    /// DCR1..4 laid out so that DCR3 is closer to DCR4 than DCR2 is.
    fn four() -> Topology {
        Topology::from_points(&[
            Point::new(0.0, 0.0),
            Point::new(40.0, 0.0),
            Point::new(30.0, 30.0),
            Point::new(10.0, 40.0),
        ])
        .unwrap()
    }

    use NotificationKind::*;

    #[test]
    fn migration_sets_single_location() {
        let v = vm(1, 0);
        let t = apply_notification(&ForwardingTable::new(), &note(Migration, v, &[2], 1));
        assert_eq!(t.entries(), BTreeMap::from([(v, ids(&[2]))]));
        let t = apply_notification(&t, &note(Migration, v, &[3], 2));
        assert_eq!(t.entry(&v), Some(ids(&[3])));
    }

    #[test]
    fn replication_keeps_source_and_destination() {
        let v = vm(2, 0);
        let mut t = ForwardingTable::new();
        t.apply(&note(Replication, v, &[2, 3], 1));
        assert_eq!(t.entry(&v), Some(ids(&[2, 3])));
        // source already listed
        t.apply(&note(Replication, v, &[3, 4], 2));
        assert_eq!(t.entry(&v), Some(ids(&[2, 3, 4])));
    }

    #[test]
    fn destruction_removes_then_deletes_entry() {
        let v = vm(2, 0);
        let mut t = ForwardingTable::new();
        t.apply(&note(Replication, v, &[2, 3], 1));
        t.apply(&note(Destruction, v, &[3], 2));
        assert_eq!(t.entry(&v), Some(ids(&[2])));
        t.apply(&note(Destruction, v, &[2], 3));
        assert_eq!(t.entry(&v), None);
        assert!(t.is_empty());
    }

    #[test]
    fn destruction_of_unknown_vm_is_noop() {
        let mut t = ForwardingTable::new();
        t.apply(&note(Destruction, vm(1, 5), &[1], 1));
        assert!(t.entries().is_empty());
    }

    #[test]
    fn late_destruction_does_not_resurrect() {
        // destruction (seq 2) delivered before the replication it follows
        let v = vm(2, 0);
        let mut t = ForwardingTable::new();
        t.apply(&note(Destruction, v, &[2], 2));
        t.apply(&note(Replication, v, &[2, 3], 1));
        assert_eq!(t.entry(&v), Some(ids(&[3])));
    }

    #[test]
    fn stale_migration_is_ignored() {
        let v = vm(1, 0);
        let mut t = ForwardingTable::new();
        t.apply(&note(Migration, v, &[3], 2));
        t.apply(&note(Migration, v, &[2], 1));
        assert_eq!(t.entry(&v), Some(ids(&[3])));
    }

    #[test]
    fn lookup_cases() {
        let topo = four();
        let v = vm(1, 0);
        let mut t = ForwardingTable::new();
        assert_eq!(lookup(&t, &v, DcrId(4), &topo), DcrId(1));
        t.apply(&note(Migration, v, &[1], 1));
        assert_eq!(lookup(&t, &v, DcrId(4), &topo), DcrId(1));

        let r = vm(2, 0);
        t.apply(&note(Replication, r, &[2, 3], 2));
        assert_eq!(lookup(&t, &r, DcrId(4), &topo), DcrId(3));
        assert_eq!(lookup(&t, &r, DcrId(2), &topo), DcrId(2));
    }

    #[test]
    fn lookup_tie_goes_to_lowest_id() {
        let topo = Topology::from_points(&[
            Point::new(0.0, 0.0),
            Point::new(-5.0, 0.0),
            Point::new(5.0, 0.0),
        ])
        .unwrap();
        let v = vm(3, 0);
        let mut t = ForwardingTable::new();
        t.apply(&note(Replication, v, &[3, 2], 1));
        assert_eq!(lookup(&t, &v, DcrId(1), &topo), DcrId(2));
    }

    #[test]
    fn notification_arity() {
        assert_eq!(
            make_notification(Migration, vm(1, 0), vec![DcrId(1), DcrId(2)], 0),
            Err(ProtocolError::Arity {
                kind: Migration,
                expected: 1,
                got: 2
            })
        );
        let r = make_notification(Replication, vm(2, 0), vec![DcrId(2), DcrId(3)], 4).unwrap();
        assert_eq!(r.origin(), DcrId(3));
        let d = make_notification(Destruction, vm(2, 0), vec![DcrId(3)], 5).unwrap();
        assert_eq!(d.origin(), DcrId(3));
        assert!(make_notification(Replication, vm(2, 0), vec![DcrId(2)], 0).is_err());
        assert!(make_notification(Destruction, vm(2, 0), vec![], 0).is_err());
    }

    #[test]
    fn notification_wire_format() {
        let r = note(Replication, vm(2, 7), &[2, 3], 12);
        assert_eq!(r.to_wire(), "NOTIFY 12 REPLICATION 2:7 2,3");
        assert_eq!(Notification::parse_wire(&r.to_wire()).unwrap(), r);
        let m = note(Migration, vm(1, 0), &[2], 0);
        assert_eq!(m.to_wire(), "NOTIFY 0 MIGRATION 1:0 2");
        assert!(Notification::parse_wire("NOTIFY 1 MIGRATION 1:0 2,3").is_err());
        assert!(Notification::parse_wire("NOTIFY x MIGRATION 1:0 2").is_err());
        assert!(Notification::parse_wire("PING").is_err());
    }

    #[test]
    fn unicast_packets_go_direct() {
        let topo = four();
        let rec = VmRecord::new(
            VmAddress::Unicast(UnicastAddress {
                dc: DcrId(1),
                host: 0,
            }),
            VmMode::Unicast,
            DcrId(1),
        )
        .unwrap();
        let user = Point::new(35.0, 35.0);
        let tr = route_user_packet(user, &rec, &DcrTables::new(&topo), &topo);
        assert!(!tr.tunneled);
        assert_eq!(tr.hops.len(), 1);
        assert_eq!(tr.result, Delivery::Dc(DcrId(1)));
        assert_eq!(tr.total_delay, distance(user, Point::new(0.0, 0.0)));
    }

    #[test]
    fn anycast_packets_are_tunneled_from_ingress() {
        let topo = four();
        let v = vm(1, 0);
        let mut rec =
            VmRecord::new(VmAddress::Anycast(v), VmMode::AnycastMigratable, DcrId(1)).unwrap();
        *rec.locations_mut() = ids(&[2]);
        let mut tables = DcrTables::new(&topo);
        tables.apply_everywhere(&note(Migration, v, &[2], 1));
        let user = Point::new(12.0, 44.0);
        let tr = route_user_packet(user, &rec, &tables, &topo);
        assert!(tr.tunneled);
        assert_eq!(tr.ingress(), Some(DcrId(4)));
        assert_eq!(tr.result, Delivery::Dc(DcrId(2)));
        assert_eq!(tr.hops[0].to, Endpoint::Dcr(DcrId(4)));
        assert_eq!(tr.hops[1].to, Endpoint::Dcr(DcrId(2)));
        assert_eq!(tr.total_delay, tr.hops[0].delay + tr.hops[1].delay);

        // stale tables: the birth data center no longer hosts the VM
        let stale = route_user_packet(user, &rec, &DcrTables::new(&topo), &topo);
        assert_eq!(stale.result, Delivery::Miss);
        assert_eq!(stale.target(), Some(DcrId(1)));
    }

    #[test]
    fn zero_length_tunnel() {
        let topo = four();
        let v = vm(4, 0);
        let rec =
            VmRecord::new(VmAddress::Anycast(v), VmMode::AnycastMigratable, DcrId(4)).unwrap();
        let user = Point::new(11.0, 41.0);
        let tr = route_user_packet(user, &rec, &DcrTables::new(&topo), &topo);
        assert_eq!(tr.hops[1].delay, 0.0);
        assert_eq!(tr.total_delay, distance(user, Point::new(10.0, 40.0)));
    }

    #[test]
    fn replies_are_direct() {
        let topo = four();
        let user = Point::new(12.0, 44.0);
        let r = route_reply(DcrId(2), user, &topo);
        assert!(!r.tunneled);
        assert_eq!(r.total_delay, distance(Point::new(40.0, 0.0), user));
        assert_eq!(
            route_reply(DcrId(2), Point::new(40.0, 0.0), &topo).total_delay,
            0.0
        );
    }

    #[test]
    fn packet_log_line() {
        let topo = four();
        let tr = PacketTrace::tunneled(Point::new(10.0, 43.0), DcrId(4), DcrId(1), &topo, true);
        assert_eq!(
            tr.log_line(1.5),
            "PKT 1.500000 (10,43)->dcr4@3.000000 dcr4->dcr1@41.231056 delay=44.231056 tunneled=1 result=1"
        );
    }

    #[test]
    fn vm_record_family_must_match_mode() {
        let bad = VmRecord::new(VmAddress::Anycast(vm(1, 0)), VmMode::Unicast, DcrId(1));
        assert!(matches!(bad, Err(ProtocolError::AddressFamily { .. })));
    }

    fn arb_note() -> impl Strategy<Value = Notification> {
        (0u8..3, 1u32..=2, 1u32..=5, 1u32..=5).prop_map(|(k, host, a, b)| {
            let v = vm(1, host);
            match k {
                0 => note(Migration, v, &[a], 0),
                1 => note(Replication, v, &[a, b], 0),
                _ => note(Destruction, v, &[a], 0),
            }
        })
    }

    /// Notifications with unique, increasing sequence numbers.
    fn arb_stream() -> impl Strategy<Value = Vec<Notification>> {
        proptest::collection::vec(arb_note(), 0..30).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, n)| {
                    make_notification(n.kind(), n.vm(), n.dcrs().to_vec(), i as u64 + 1).unwrap()
                })
                .collect()
        })
    }

    /// Straightforward in-order semantics on plain sets.
    fn sequential(stream: &[Notification]) -> BTreeMap<AnycastAddress, BTreeSet<DcrId>> {
        let mut m: BTreeMap<AnycastAddress, BTreeSet<DcrId>> = BTreeMap::new();
        for n in stream {
            let set = m.entry(n.vm()).or_default();
            match n.kind() {
                Migration => *set = n.dcrs().iter().copied().collect(),
                Replication => set.extend(n.dcrs().iter().copied()),
                Destruction => {
                    set.remove(&n.dcrs()[0]);
                }
            }
        }
        m.retain(|_, s| !s.is_empty());
        m
    }

    proptest! {
        #[test]
        fn delivery_order_does_not_matter(stream in arb_stream(), shuffle in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut in_order = ForwardingTable::new();
            for n in &stream {
                in_order.apply(n);
            }
            let mut shuffled = stream.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle));
            let mut other = ForwardingTable::new();
            for n in &shuffled {
                other.apply(n);
            }
            prop_assert_eq!(&in_order, &other);
            prop_assert_eq!(in_order.entries(), sequential(&stream));
        }

        #[test]
        fn applying_twice_is_applying_once(stream in arb_stream()) {
            let mut once = ForwardingTable::new();
            let mut twice = ForwardingTable::new();
            for n in &stream {
                once.apply(n);
                twice.apply(n);
                twice.apply(n);
                for set in twice.entries().values() {
                    prop_assert!(!set.is_empty());
                }
            }
            prop_assert_eq!(once, twice);
        }
    }
}
