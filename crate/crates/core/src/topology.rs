// SPDX-License-Identifier: Apache-2.0

//! Physical placement of data center routers (DCRs) on a delay plane, and the
//! unicast/anycast address plan of the federation.
//!
//! Every data center is fronted by exactly one DCR, so a [`DcrId`] doubles as
//! the data center id. The underlay delay between any two points is their
//! Euclidean distance.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Errors raised while building or querying a topology.
#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    /// The topology has fewer than two DCRs.
    #[error("topology needs at least 2 DCRs, got {0}")]
    TooFewDcrs(usize),
    /// A DCR id appears twice.
    #[error("duplicate DCR id {0}")]
    DuplicateId(DcrId),
    /// Ids are not exactly `1..=N`.
    #[error("DCR ids must be dense 1..={expected_max}, found {found}")]
    NonDenseIds { expected_max: usize, found: DcrId },
    /// Two DCRs share a position.
    #[error("DCRs {0} and {1} share the same position")]
    DuplicatePosition(DcrId, DcrId),
    /// A coordinate is NaN or infinite.
    #[error("non-finite coordinate for DCR {0}")]
    NonFinite(DcrId),
    /// An id that is not part of the topology was referenced.
    #[error("unknown data center {0}")]
    UnknownDc(DcrId),
    /// The placement extent is not a positive finite number.
    #[error("extent must be positive and finite, got {0}")]
    BadExtent(f64),
    /// A line of a topology file could not be parsed.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A position on the delay plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Underlay delay to `other`.
    pub fn distance(&self, other: &Point) -> f64 {
        distance(*self, *other)
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Euclidean distance between two points, used as the underlay link delay.
pub fn distance(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Identifier of a DCR and of the data center it fronts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DcrId(pub u32);

impl DcrId {
    pub(crate) fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for DcrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Returns the id in `candidates` closest to `p`. Ties go to the lowest id.
pub(crate) fn closest_of<I>(p: Point, candidates: I) -> Option<DcrId>
where
    I: IntoIterator<Item = (DcrId, Point)>,
{
    candidates
        .into_iter()
        .map(|(id, pos)| (distance(p, pos), id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

/// Placement of the federation's DCRs. Ids are always dense `1..=N`, `N >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    positions: Vec<Point>,
}

impl Topology {
    /// Builds a topology from `(id, position)` pairs given in any order.
    pub fn new<I>(dcrs: I) -> Result<Self, TopologyError>
    where
        I: IntoIterator<Item = (DcrId, Point)>,
    {
        let mut dcrs: Vec<(DcrId, Point)> = dcrs.into_iter().collect();
        if dcrs.len() < 2 {
            return Err(TopologyError::TooFewDcrs(dcrs.len()));
        }
        dcrs.sort_by_key(|(id, _)| *id);
        for pair in dcrs.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(TopologyError::DuplicateId(pair[0].0));
            }
        }
        let n = dcrs.len();
        for (i, (id, pos)) in dcrs.iter().enumerate() {
            if id.0 as usize != i + 1 {
                return Err(TopologyError::NonDenseIds {
                    expected_max: n,
                    found: *id,
                });
            }
            if !pos.is_finite() {
                return Err(TopologyError::NonFinite(*id));
            }
        }
        for (i, (a, pa)) in dcrs.iter().enumerate() {
            for (b, pb) in &dcrs[i + 1..] {
                if pa == pb {
                    return Err(TopologyError::DuplicatePosition(*a, *b));
                }
            }
        }
        Ok(Self {
            positions: dcrs.into_iter().map(|(_, p)| p).collect(),
        })
    }

    /// Builds a topology whose ids are assigned `1..=N` in slice order.
    pub fn from_points(points: &[Point]) -> Result<Self, TopologyError> {
        Self::new(
            points
                .iter()
                .enumerate()
                .map(|(i, p)| (DcrId(i as u32 + 1), *p)),
        )
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Always false: a topology holds at least two DCRs.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, id: DcrId) -> bool {
        id.0 >= 1 && (id.0 as usize) <= self.positions.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = DcrId> + '_ {
        (1..=self.positions.len() as u32).map(DcrId)
    }

    /// `(id, position)` pairs in id order.
    pub fn dcrs(&self) -> impl Iterator<Item = (DcrId, Point)> + '_ {
        self.ids().zip(self.positions.iter().copied())
    }

    pub fn position(&self, id: DcrId) -> Result<Point, TopologyError> {
        if self.contains(id) {
            Ok(self.positions[id.index()])
        } else {
            Err(TopologyError::UnknownDc(id))
        }
    }

    /// Position of a DCR known to exist. Panics on an unknown id.
    pub(crate) fn pos(&self, id: DcrId) -> Point {
        self.positions[id.index()]
    }

    /// Underlay delay between two DCRs.
    pub fn delay(&self, a: DcrId, b: DcrId) -> Result<f64, TopologyError> {
        Ok(distance(self.position(a)?, self.position(b)?))
    }

    /// The DCR that anycast routing delivers a packet from `p` to.
    pub fn nearest_dcr(&self, p: Point) -> DcrId {
        closest_of(p, self.dcrs()).expect("topology is never empty")
    }

    /// Axis-aligned bounding box `(min, max)` of all DCR positions.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut min = Point::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.positions {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        (min, max)
    }

    /// Parses the `dcr <id> <x> <y>` line format. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut dcrs = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| TopologyError::Parse {
                line: lineno + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 || fields[0] != "dcr" {
                return Err(err(format!("expected `dcr <id> <x> <y>`, got `{line}`")));
            }
            let id: u32 = fields[1]
                .parse()
                .map_err(|_| err(format!("bad DCR id `{}`", fields[1])))?;
            let x: f64 = fields[2]
                .parse()
                .map_err(|_| err(format!("bad x coordinate `{}`", fields[2])))?;
            let y: f64 = fields[3]
                .parse()
                .map_err(|_| err(format!("bad y coordinate `{}`", fields[3])))?;
            if !seen.insert(id) {
                return Err(err(format!("duplicate DCR id {id}")));
            }
            if !x.is_finite() || !y.is_finite() {
                return Err(err(format!("non-finite coordinate for DCR {id}")));
            }
            dcrs.push((DcrId(id), Point::new(x, y)));
        }
        Self::new(dcrs)
    }

    /// Serializes to the line format read by [`Topology::parse`]. Coordinates
    /// use the shortest representation that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, p) in self.dcrs() {
            out.push_str(&format!("dcr {} {} {}\n", id, p.x, p.y));
        }
        out
    }
}

/// Places `n` DCRs uniformly at random in `[0, extent]^2`.
///
/// Deterministic for a given seed. A sample landing on an occupied position is
/// drawn again.
pub fn generate_random_topology(
    seed: u64,
    n: usize,
    extent: f64,
) -> Result<Topology, TopologyError> {
    if n < 2 {
        return Err(TopologyError::TooFewDcrs(n));
    }
    if !(extent.is_finite() && extent > 0.0) {
        return Err(TopologyError::BadExtent(extent));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Point> = Vec::with_capacity(n);
    while points.len() < n {
        let p = Point::new(rng.gen_range(0.0..=extent), rng.gen_range(0.0..=extent));
        if !points.contains(&p) {
            points.push(p);
        }
    }
    Topology::from_points(&points)
}

/// An address drawn from the federation-wide anycast block.
///
/// `subblock` names the data center the address was allocated from, which is
/// the VM's birth data center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnycastAddress {
    pub subblock: DcrId,
    pub host: u32,
}

impl fmt::Display for AnycastAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.subblock, self.host)
    }
}

/// An address from one data center's own unicast block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnicastAddress {
    pub dc: DcrId,
    pub host: u32,
}

impl fmt::Display for UnicastAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}:{}", self.dc, self.host)
    }
}

/// Per data center allocation counters, one per address family.
#[derive(Debug, Clone)]
pub struct AddressPlan {
    next_anycast: Vec<u32>,
    next_unicast: Vec<u32>,
}

impl AddressPlan {
    pub fn new(topology: &Topology) -> Self {
        Self {
            next_anycast: vec![0; topology.len()],
            next_unicast: vec![0; topology.len()],
        }
    }

    fn slot(counters: &mut [u32], dc: DcrId) -> Result<&mut u32, TopologyError> {
        if dc.0 == 0 {
            return Err(TopologyError::UnknownDc(dc));
        }
        counters
            .get_mut(dc.index())
            .ok_or(TopologyError::UnknownDc(dc))
    }

    /// Fails for ids outside the topology the plan was made for.
    pub fn check(&self, dc: DcrId) -> Result<(), TopologyError> {
        if dc.0 == 0 || dc.index() >= self.next_unicast.len() {
            return Err(TopologyError::UnknownDc(dc));
        }
        Ok(())
    }

    pub fn allocate_anycast(&mut self, dc: DcrId) -> Result<AnycastAddress, TopologyError> {
        let next = Self::slot(&mut self.next_anycast, dc)?;
        let host = *next;
        *next += 1;
        Ok(AnycastAddress { subblock: dc, host })
    }

    pub fn allocate_unicast(&mut self, dc: DcrId) -> Result<UnicastAddress, TopologyError> {
        let next = Self::slot(&mut self.next_unicast, dc)?;
        let host = *next;
        *next += 1;
        Ok(UnicastAddress { dc, host })
    }
}
