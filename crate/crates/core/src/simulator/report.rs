// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;

use crate::overlay::OverlayMetrics;
use crate::protocol::{DcrTables, Notification, PacketTrace};
use crate::topology::DcrId;

use super::LogEntry;

/// Outcome of one user packet.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub index: usize,
    pub send_time: f64,
    pub user: String,
    pub vm: String,
    pub session: Option<String>,
    pub trace: PacketTrace,
    /// Straight-line delay from the user to the data center that served the
    /// packet. `None` for misses.
    pub direct_delay: Option<f64>,
    pub reply: Option<PacketTrace>,
    pub session_break: bool,
    pub tunnel_bytes: u64,
}

impl PacketRecord {
    /// Extra delay of the detour through the ingress DCR.
    pub fn penalty(&self) -> Option<f64> {
        self.direct_delay.map(|d| self.trace.total_delay - d)
    }

    /// Ratio of the delivered path's delay to the direct delay. A user
    /// sitting on the serving data center has ratio 1.
    pub fn stretch(&self) -> Option<f64> {
        let direct = self.direct_delay?;
        if direct == 0.0 {
            Some(1.0)
        } else {
            Some(self.trace.total_delay / direct)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub packets: usize,
    pub delivered: usize,
    pub miss: usize,
    pub sessions: usize,
    pub session_breaks: usize,
    pub notifications: usize,
    /// Copies of notifications dropped by DCRs that had already seen them.
    pub duplicate_notifications: usize,
    pub tunneled: usize,
    pub tunnel_overhead_bytes: u64,
    /// Over delivered packets.
    pub mean_delay: f64,
    pub max_delay: f64,
    /// Over delivered anycast packets.
    pub mean_penalty: f64,
    pub max_penalty: f64,
    pub mean_stretch: f64,
    pub max_stretch: f64,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct SimReport {
    pub packets: Vec<PacketRecord>,
    pub notifications: Vec<Notification>,
    pub summary: Summary,
    pub overlay: OverlayMetrics,
    pub final_tables: Option<DcrTables>,
    log: Vec<LogEntry>,
}

fn mean_max(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let sum: f64 = values.iter().sum();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (sum / values.len() as f64, max)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl SimReport {
    pub(crate) fn empty(overlay: OverlayMetrics) -> Self {
        Self {
            packets: Vec::new(),
            notifications: Vec::new(),
            summary: Summary::default(),
            overlay,
            final_tables: None,
            log: Vec::new(),
        }
    }

    pub(crate) fn finalize(
        &mut self,
        packets: Vec<PacketRecord>,
        notifications: Vec<Notification>,
        log: Vec<LogEntry>,
        tables: DcrTables,
        sessions: usize,
    ) {
        let s = &mut self.summary;
        s.packets = packets.len();
        s.delivered = packets.iter().filter(|p| p.direct_delay.is_some()).count();
        s.miss = s.packets - s.delivered;
        s.sessions = sessions;
        s.session_breaks = packets.iter().filter(|p| p.session_break).count();
        s.tunneled = packets.iter().filter(|p| p.trace.tunneled).count();
        s.tunnel_overhead_bytes = packets.iter().map(|p| p.tunnel_bytes).sum();

        let delays: Vec<f64> = packets
            .iter()
            .filter(|p| p.direct_delay.is_some())
            .map(|p| p.trace.total_delay)
            .collect();
        (s.mean_delay, s.max_delay) = mean_max(&delays);
        let anycast: Vec<&PacketRecord> = packets
            .iter()
            .filter(|p| p.trace.tunneled && p.direct_delay.is_some())
            .collect();
        let penalties: Vec<f64> = anycast.iter().filter_map(|p| p.penalty()).collect();
        let stretches: Vec<f64> = anycast.iter().filter_map(|p| p.stretch()).collect();
        (s.mean_penalty, s.max_penalty) = mean_max(&penalties);
        (s.mean_stretch, s.max_stretch) = mean_max(&stretches);

        self.packets = packets;
        self.notifications = notifications;
        self.log = log;
        self.final_tables = Some(tables);
    }

    /// One CSV row per packet followed by a `# summary:` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "packet,time,user,vm,session,ingress,target,result,total_delay,direct_delay,penalty,stretch,tunneled,reply_delay,session_break\n",
        );
        for p in &self.packets {
            let id = |d: Option<DcrId>| d.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.6},{},{},{},{},{},{},{:.6},{},{},{},{},{},{}",
                p.index,
                p.send_time,
                p.user,
                p.vm,
                p.session.as_deref().unwrap_or(""),
                id(p.trace.ingress()),
                id(p.trace.target()),
                p.trace.result,
                p.trace.total_delay,
                opt(p.direct_delay),
                opt(p.penalty()),
                opt(p.stretch()),
                u8::from(p.trace.tunneled),
                opt(p.reply.as_ref().map(|r| r.total_delay)),
                u8::from(p.session_break),
            );
        }
        out.push_str(&self.summary_line());
        out.push('\n');
        out
    }

    pub fn summary_line(&self) -> String {
        let s = &self.summary;
        format!(
            "# summary: packets={} delivered={} miss={} sessions={} session_breaks={} \
             notifications={} duplicate_notifications={} tunneled={} tunnel_overhead_bytes={} \
             mean_delay={:.6} max_delay={:.6} mean_penalty={:.6} max_penalty={:.6} \
             mean_stretch={:.6} max_stretch={:.6} \
             overlay_worst={:.6} overlay_avg={:.6} overlay_overhead={:.6}",
            s.packets,
            s.delivered,
            s.miss,
            s.sessions,
            s.session_breaks,
            s.notifications,
            s.duplicate_notifications,
            s.tunneled,
            s.tunnel_overhead_bytes,
            s.mean_delay,
            s.max_delay,
            s.mean_penalty,
            s.max_penalty,
            s.mean_stretch,
            s.max_stretch,
            self.overlay.worst_delay,
            self.overlay.average_delay,
            self.overlay.flooding_overhead,
        )
    }

    /// Chronological `NOTIFY` and `PKT` lines, then the final content of
    /// every non-empty forwarding table as `TABLE <dcr> <vm> <dcr,...>`.
    pub fn trace_log(&self) -> String {
        let mut out = String::new();
        for entry in &self.log {
            match entry {
                LogEntry::Notify(i) => {
                    out.push_str(&self.notifications[*i].to_wire());
                }
                LogEntry::Packet(i) => {
                    let p = &self.packets[*i];
                    out.push_str(&p.trace.log_line(p.send_time));
                }
            }
            out.push('\n');
        }
        if let Some(tables) = &self.final_tables {
            for (dcr, table) in tables.iter() {
                for (vm, set) in table.entries() {
                    let members: Vec<String> = set.iter().map(|d| d.to_string()).collect();
                    let _ = writeln!(out, "TABLE {dcr} {vm} {}", members.join(","));
                }
            }
        }
        out
    }
}
