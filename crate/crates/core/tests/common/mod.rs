// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::collections::BTreeMap;

use dcrsim::overlay::Overlay;
use dcrsim::protocol::VmMode;
use dcrsim::simulator::{EventKind, Scenario};
use dcrsim::topology::{DcrId, Point, Topology};
use rand::seq::SliceRandom;
use rand::Rng;

/// All-pairs shortest delays by Floyd–Warshall over a dense matrix indexed by
/// `id - 1`. Unreachable pairs stay infinite.
pub fn floyd_warshall(n: usize, edges: &[(u32, u32, f64)]) -> Vec<Vec<f64>> {
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for &(a, b, c) in edges {
        let (a, b) = (a as usize - 1, b as usize - 1);
        if c < d[a][b] {
            d[a][b] = c;
            d[b][a] = c;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

pub fn overlay_edges(o: &Overlay) -> Vec<(u32, u32, f64)> {
    o.edges().map(|(a, b, c)| (a.0, b.0, c)).collect()
}

/// Worst and average delay from a Floyd–Warshall matrix.
pub fn oracle_metrics(d: &[Vec<f64>]) -> (f64, f64) {
    let mut worst = 0.0f64;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, row) in d.iter().enumerate() {
        for &v in &row[i + 1..] {
            worst = worst.max(v);
            sum += v;
            pairs += 1;
        }
    }
    (worst, sum / pairs as f64)
}

/// Lowest-id DCR at minimal distance from `p` among `candidates`, by scanning.
pub fn brute_nearest(
    topology: &Topology,
    p: Point,
    candidates: impl IntoIterator<Item = DcrId>,
) -> Option<DcrId> {
    let mut best: Option<(f64, DcrId)> = None;
    for c in candidates {
        let q = topology.position(c).unwrap();
        let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
        match best {
            Some((bd, bid)) if bd < d || (bd == d && bid < c) => {}
            _ => best = Some((d, c)),
        }
    }
    best.map(|(_, id)| id)
}

/// Legal random lifecycle stream plus interleaved sends. Returns the events
/// and the time of the last lifecycle event.
pub struct GeneratedScenario {
    pub events: Vec<(f64, EventKind)>,
    pub users: Vec<(String, Point)>,
    pub vms: Vec<String>,
    pub last_lifecycle: f64,
    /// Time of the last event of any kind.
    pub end: f64,
}

pub fn random_scenario<R: Rng>(rng: &mut R, topology: &Topology, extent: f64) -> GeneratedScenario {
    let n = topology.len() as u32;
    let dc = |rng: &mut R| DcrId(rng.gen_range(1..=n));
    let mut events = Vec::new();
    let mut t = 0.0;

    let users: Vec<(String, Point)> = (0..rng.gen_range(1..=4))
        .map(|i| {
            (
                format!("u{i}"),
                Point::new(rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)),
            )
        })
        .collect();
    for (u, p) in &users {
        events.push((
            0.0,
            EventKind::User {
                user: u.clone(),
                pos: *p,
            },
        ));
    }

    // model of where each VM lives
    let mut state: BTreeMap<String, (VmMode, Vec<DcrId>)> = BTreeMap::new();
    let modes = [
        VmMode::Unicast,
        VmMode::AnycastMigratable,
        VmMode::AnycastReplicated,
    ];
    for i in 0..rng.gen_range(1..=4) {
        let name = format!("vm{i}");
        let mode = *modes.choose(rng).unwrap();
        let at = dc(rng);
        events.push((
            0.0,
            EventKind::Create {
                vm: name.clone(),
                dc: at,
                mode,
            },
        ));
        state.insert(name, (mode, vec![at]));
    }
    let vms: Vec<String> = state.keys().cloned().collect();
    let mut last_lifecycle = 0.0;

    for _ in 0..rng.gen_range(0..=12) {
        t += rng.gen_range(0.0..60.0);
        if rng.gen_bool(0.4) {
            let (u, _) = users.choose(rng).unwrap();
            let vm = vms.choose(rng).unwrap();
            events.push((
                t,
                EventKind::Send {
                    user: u.clone(),
                    vm: vm.clone(),
                    session: None,
                },
            ));
            continue;
        }
        let vm = vms.choose(rng).unwrap().clone();
        let (mode, locs) = state.get_mut(&vm).unwrap();
        if locs.is_empty() {
            continue;
        }
        let free: Vec<DcrId> = topology.ids().filter(|d| !locs.contains(d)).collect();
        let kind = match mode {
            VmMode::AnycastMigratable if rng.gen_bool(0.8) && !free.is_empty() => {
                let to = *free.choose(rng).unwrap();
                *locs = vec![to];
                EventKind::Migrate { vm, dc: to }
            }
            VmMode::AnycastReplicated if rng.gen_bool(0.6) && !free.is_empty() => {
                let src = *locs.choose(rng).unwrap();
                let dst = *free.choose(rng).unwrap();
                locs.push(dst);
                EventKind::Replicate { vm, src, dst }
            }
            _ => {
                let i = rng.gen_range(0..locs.len());
                let at = locs.remove(i);
                EventKind::Destroy { vm, dc: at }
            }
        };
        events.push((t, kind));
        last_lifecycle = t;
    }
    GeneratedScenario {
        events,
        users,
        vms,
        last_lifecycle,
        end: t,
    }
}

pub fn scenario(events: Vec<(f64, EventKind)>) -> Scenario {
    Scenario::new(events).expect("generated scenario is well formed")
}
