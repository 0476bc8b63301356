// SPDX-License-Identifier: Apache-2.0

//! Scenario files: one timestamped event per line.
//!
//! ```text
//! <time> create <vm> <dc> unicast|anycast-migrate|anycast-replicate
//! <time> migrate <vm> <dc>
//! <time> replicate <vm> <src-dc> <dst-dc>
//! <time> destroy <vm> <dc>
//! <time> user <uid> <x> <y>
//! <time> send <uid> <vm> [session <sid>]
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Times must be
//! non-decreasing.

use std::fmt;

use thiserror::Error;

use crate::protocol::VmMode;
use crate::topology::{DcrId, Point};

use super::LifecycleError;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Reference { line: usize, message: String },
    #[error("line {line}: {source}")]
    Lifecycle {
        line: usize,
        #[source]
        source: LifecycleError,
    },
}

impl ScenarioError {
    pub fn line(&self) -> usize {
        match self {
            ScenarioError::Parse { line, .. }
            | ScenarioError::Reference { line, .. }
            | ScenarioError::Lifecycle { line, .. } => *line,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Create {
        vm: String,
        dc: DcrId,
        mode: VmMode,
    },
    Migrate {
        vm: String,
        dc: DcrId,
    },
    Replicate {
        vm: String,
        src: DcrId,
        dst: DcrId,
    },
    Destroy {
        vm: String,
        dc: DcrId,
    },
    User {
        user: String,
        pos: Point,
    },
    Send {
        user: String,
        vm: String,
        session: Option<String>,
    },
}

impl EventKind {
    pub fn is_lifecycle(&self) -> bool {
        matches!(
            self,
            EventKind::Create { .. }
                | EventKind::Migrate { .. }
                | EventKind::Replicate { .. }
                | EventKind::Destroy { .. }
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::Create { vm, dc, mode } => write!(f, "create {vm} {dc} {mode}"),
            EventKind::Migrate { vm, dc } => write!(f, "migrate {vm} {dc}"),
            EventKind::Replicate { vm, src, dst } => write!(f, "replicate {vm} {src} {dst}"),
            EventKind::Destroy { vm, dc } => write!(f, "destroy {vm} {dc}"),
            EventKind::User { user, pos } => write!(f, "user {user} {} {}", pos.x, pos.y),
            EventKind::Send { user, vm, session } => {
                write!(f, "send {user} {vm}")?;
                if let Some(s) = session {
                    write!(f, " session {s}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    pub time: f64,
    /// Source line, or position in the event list for built scenarios.
    pub line: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scenario {
    events: Vec<ScenarioEvent>,
}

fn check_name(name: &str, line: usize) -> Result<String, ScenarioError> {
    if name.contains([',', '#']) {
        return Err(ScenarioError::Parse {
            line,
            message: format!("name `{name}` may not contain ',' or '#'"),
        });
    }
    Ok(name.to_string())
}

impl Scenario {
    /// Builds a scenario from `(time, event)` pairs in file order.
    pub fn new<I>(events: I) -> Result<Self, ScenarioError>
    where
        I: IntoIterator<Item = (f64, EventKind)>,
    {
        let events = events
            .into_iter()
            .enumerate()
            .map(|(i, (time, kind))| ScenarioEvent {
                time,
                line: i + 1,
                kind,
            })
            .collect();
        Self::from_events(events)
    }

    fn from_events(events: Vec<ScenarioEvent>) -> Result<Self, ScenarioError> {
        let mut last = 0.0f64;
        for ev in &events {
            if !(ev.time.is_finite() && ev.time >= 0.0) {
                return Err(ScenarioError::Parse {
                    line: ev.line,
                    message: format!("time {} must be finite and non-negative", ev.time),
                });
            }
            if ev.time < last {
                return Err(ScenarioError::Parse {
                    line: ev.line,
                    message: format!("time {} goes backwards (previous {last})", ev.time),
                });
            }
            last = ev.time;
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[ScenarioEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Time of the last lifecycle event, if any.
    pub fn last_lifecycle_time(&self) -> Option<f64> {
        self.events
            .iter()
            .filter(|e| e.kind.is_lifecycle())
            .map(|e| e.time)
            .next_back()
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut events = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let err = |message: String| ScenarioError::Parse { line, message };
            let fields: Vec<&str> = body.split_whitespace().collect();
            let time: f64 = fields[0]
                .parse()
                .map_err(|_| err(format!("bad time `{}`", fields[0])))?;
            let dc = |s: &str| {
                s.parse::<u32>()
                    .map(DcrId)
                    .map_err(|_| err(format!("bad data center id `{s}`")))
            };
            let coord = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad coordinate `{s}`")))
            };
            let kind = match &fields[1..] {
                ["create", vm, d, mode] => EventKind::Create {
                    vm: check_name(vm, line)?,
                    dc: dc(d)?,
                    mode: mode.parse().map_err(err)?,
                },
                ["migrate", vm, d] => EventKind::Migrate {
                    vm: check_name(vm, line)?,
                    dc: dc(d)?,
                },
                ["replicate", vm, s, d] => EventKind::Replicate {
                    vm: check_name(vm, line)?,
                    src: dc(s)?,
                    dst: dc(d)?,
                },
                ["destroy", vm, d] => EventKind::Destroy {
                    vm: check_name(vm, line)?,
                    dc: dc(d)?,
                },
                ["user", uid, x, y] => EventKind::User {
                    user: check_name(uid, line)?,
                    pos: Point::new(coord(x)?, coord(y)?),
                },
                ["send", uid, vm] => EventKind::Send {
                    user: check_name(uid, line)?,
                    vm: check_name(vm, line)?,
                    session: None,
                },
                ["send", uid, vm, "session", sid] => EventKind::Send {
                    user: check_name(uid, line)?,
                    vm: check_name(vm, line)?,
                    session: Some(check_name(sid, line)?),
                },
                _ => return Err(err(format!("unrecognized event `{body}`"))),
            };
            events.push(ScenarioEvent { time, line, kind });
        }
        Self::from_events(events)
    }

    pub fn to_text(&self) -> String {
        self.events
            .iter()
            .map(|e| format!("{} {}\n", e.time, e.kind))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_event_kind() {
        let text = "\
# comment
0 create vm1 1 anycast-migrate
0 user u1 12 44.5
1 send u1 vm1 session s1
2 send u1 vm1
3 migrate vm1 2
4 replicate vm2 2 3
5 destroy vm1 2
";
        let s = Scenario::parse(text).unwrap();
        assert_eq!(s.events().len(), 7);
        assert_eq!(s.events()[0].line, 2);
        assert_eq!(
            s.events()[1].kind,
            EventKind::User {
                user: "u1".into(),
                pos: Point::new(12.0, 44.5)
            }
        );
        assert_eq!(
            s.events()[2].kind,
            EventKind::Send {
                user: "u1".into(),
                vm: "vm1".into(),
                session: Some("s1".into())
            }
        );
        assert_eq!(s.last_lifecycle_time(), Some(5.0));
        assert_eq!(Scenario::parse(&s.to_text()).unwrap().events().len(), 7);
    }

    #[test]
    fn rejects_malformed_lines() {
        let cases = [
            ("0 create vm1 1 multicast\n", 1),
            ("0 user u1 1 1\n0 teleport u1\n", 2),
            ("x send u1 vm1\n", 1),
            ("5 user u1 0 0\n4 user u1 1 1\n", 2),
            ("-1 user u1 0 0\n", 1),
            ("0 user u,1 0 0\n", 1),
            ("0 send u1 vm1 session\n", 1),
        ];
        for (text, line) in cases {
            let err = Scenario::parse(text).unwrap_err();
            assert_eq!(err.line(), line, "{text:?}: {err}");
        }
    }

    #[test]
    fn empty_scenario() {
        let s = Scenario::parse("# nothing\n\n").unwrap();
        assert!(s.is_empty());
        assert_eq!(s.last_lifecycle_time(), None);
    }
}
