//! Per-trial metrics, their CSV and event-log forms, and stable-phase
//! summaries.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::rollback::AbortEvent;
use crate::simnet::{Time, SEC};

use super::HarnessError;

pub const CSV_HEADER: &str = "time_s,server_ops,app_ops,violations,detections,aborts,candidates";
pub const DEFAULT_WARMUP: f64 = 0.2;

/// One second of counts. Averaged records hold fractional values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub server_ops: f64,
    pub app_ops: f64,
    pub violations: f64,
    pub detections: f64,
    pub aborts: f64,
    pub candidates: f64,
}

impl Row {
    fn fields(&self) -> [f64; 6] {
        [self.server_ops, self.app_ops, self.violations, self.detections, self.aborts, self.candidates]
    }

    fn from_fields(f: [f64; 6]) -> Self {
        Self { server_ops: f[0], app_ops: f[1], violations: f[2], detections: f[3], aborts: f[4], candidates: f[5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub predicate: String,
    pub t_violate: Time,
    pub onset: Time,
    pub detection_time: Time,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Violation {
        time: Time,
        what: String,
    },
    /// A tracked violation stopped holding.
    Cleared {
        time: Time,
        what: String,
    },
    Detection(Detection),
    Abort(AbortEvent),
    Switch {
        time: Time,
        client: u32,
    },
}

impl LogEvent {
    fn time(&self) -> Time {
        match self {
            LogEvent::Violation { time, .. } | LogEvent::Cleared { time, .. } | LogEvent::Switch { time, .. } => *time,
            LogEvent::Detection(d) => d.detection_time,
            LogEvent::Abort(a) => a.time,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub label: String,
    pub rows: Vec<Row>,
    /// Simulated time at which the run stopped.
    pub duration: Time,
    pub events: Vec<LogEvent>,
    /// (time, nodes processed so far), one point per committed task.
    pub progress: Vec<(Time, u64)>,
    pub total_nodes: u64,
    /// Every client finished its work before the time limit.
    pub completed: bool,
    pub proper_coloring: Option<bool>,
    pub aborted_value_puts: u64,
    /// Aborts whose edge was also aborted by another client within the
    /// same second.
    pub both_aborted: u64,
}

impl MetricsRecord {
    pub fn detections(&self) -> impl Iterator<Item = &Detection> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Detection(d) => Some(d),
            _ => None,
        })
    }

    pub fn aborts(&self) -> impl Iterator<Item = &AbortEvent> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Abort(a) => Some(a),
            _ => None,
        })
    }

    /// Violation episodes of `what` as (start, end); an episode still open
    /// at the end of the run ends at `duration`.
    pub fn episodes(&self, what: &str) -> Vec<(Time, Time)> {
        let mut starts = Vec::new();
        let mut ends = Vec::new();
        for e in &self.events {
            match e {
                LogEvent::Violation { time, what: w } if w == what => starts.push(*time),
                LogEvent::Cleared { time, what: w } if w == what => ends.push(*time),
                _ => {}
            }
        }
        starts.sort_unstable();
        ends.sort_unstable();
        starts.iter().enumerate().map(|(i, &s)| (s, ends.get(i).copied().unwrap_or(self.duration.max(s)))).collect()
    }

    /// Counts episodes of `what` that some detection of `predicate` caught
    /// within `budget` of the episode start, out of all episodes. A
    /// detection belongs to an episode when its latest evidence started
    /// after the previous episode ended and no later than this one ended.
    pub fn detected_within(&self, what: &str, predicate: &str, budget: Time) -> (usize, usize) {
        let eps = self.episodes(what);
        let dets: Vec<&Detection> = self.detections().filter(|d| d.predicate == predicate).collect();
        let mut prev_end = 0;
        let mut hit = 0;
        for &(start, end) in &eps {
            if dets.iter().any(|d| d.onset >= prev_end && d.onset <= end && d.detection_time <= start + budget) {
                hit += 1;
            }
            prev_end = end;
        }
        (hit, eps.len())
    }

    /// First time the processed-node count reached `fraction` of all nodes.
    pub fn time_to_progress(&self, fraction: f64) -> Option<Time> {
        let goal = (self.total_nodes as f64 * fraction).ceil() as u64;
        self.progress.iter().find(|&&(_, n)| n >= goal).map(|&(t, _)| t)
    }

    /// Nodes processed by time `t`.
    pub fn progress_at(&self, t: Time) -> u64 {
        self.progress.iter().take_while(|&&(at, _)| at <= t).last().map_or(0, |&(_, n)| n)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<(), HarnessError> {
        writeln!(w, "{CSV_HEADER}")?;
        for (i, r) in self.rows.iter().enumerate() {
            let f = r.fields();
            writeln!(w, "{i},{},{},{},{},{},{}", f[0], f[1], f[2], f[3], f[4], f[5])?;
        }
        Ok(())
    }

    /// Reads a CSV written by `write_csv`. Only the per-second rows survive;
    /// the duration is taken as the number of rows.
    pub fn read_csv(label: &str, r: impl BufRead) -> Result<Self, HarnessError> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != CSV_HEADER {
            return Err(HarnessError::Csv(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| HarnessError::Csv(format!("row {}: {e}", i + 1)))?;
            let f: [f64; 7] =
                vals.try_into().map_err(|_| HarnessError::Csv(format!("row {}: expected 7 columns", i + 1)))?;
            rows.push(Row::from_fields([f[1], f[2], f[3], f[4], f[5], f[6]]));
        }
        Ok(Self { label: label.to_string(), duration: rows.len() as Time * SEC, rows, ..Self::default() })
    }

    /// One JSON object per line, ordered by time.
    pub fn write_events(&self, mut w: impl Write) -> Result<(), HarnessError> {
        let mut events: Vec<&LogEvent> = self.events.iter().collect();
        events.sort_by_key(|e| e.time());
        for e in events {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Per-second mean of the given records, padded with zeros to the longest.
pub fn average(label: &str, records: &[MetricsRecord]) -> MetricsRecord {
    let len = records.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    let k = records.len().max(1) as f64;
    let rows = (0..len)
        .map(|i| {
            let mut sum = [0.0; 6];
            for r in records {
                let f = r.rows.get(i).copied().unwrap_or_default().fields();
                for (s, x) in sum.iter_mut().zip(f) {
                    *s += x;
                }
            }
            Row::from_fields(sum.map(|s| s / k))
        })
        .collect();
    MetricsRecord {
        label: label.to_string(),
        rows,
        duration: records.iter().map(|r| r.duration).max().unwrap_or(0),
        completed: records.iter().all(|r| r.completed),
        total_nodes: records.first().map_or(0, |r| r.total_nodes),
        ..MetricsRecord::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    /// Full seconds averaged over.
    pub window: (usize, usize),
    pub server_ops: f64,
    pub app_ops: f64,
    pub candidates: f64,
    /// Candidate messages per server operation.
    pub candidate_overhead: f64,
    pub detection_ms_p50: Option<f64>,
    pub detection_ms_p99: Option<f64>,
    pub detection_ms_max: Option<f64>,
}

/// Means over the full seconds after the warm-up prefix.
pub fn stable_phase_metrics(record: &MetricsRecord, warmup: f64) -> Result<Summary, HarnessError> {
    let full = ((record.duration / SEC) as usize).min(record.rows.len());
    let start = (full as f64 * warmup).ceil() as usize;
    if start >= full {
        return Err(HarnessError::TooShort { seconds: full, warmup });
    }
    let rows = &record.rows[start..full];
    let n = rows.len() as f64;
    let mean = |f: fn(&Row) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let server_ops = mean(|r| r.server_ops);
    let candidates = mean(|r| r.candidates);
    let mut lat: Vec<f64> =
        record.detections().map(|d| (d.detection_time - d.onset.min(d.detection_time)) as f64 / 1000.0).collect();
    lat.sort_by(f64::total_cmp);
    Ok(Summary {
        window: (start, full),
        server_ops,
        app_ops: mean(|r| r.app_ops),
        candidates,
        candidate_overhead: if server_ops > 0.0 { candidates / server_ops } else { 0.0 },
        detection_ms_p50: percentile(&lat, 0.5),
        detection_ms_p99: percentile(&lat, 0.99),
        detection_ms_max: lat.last().copied(),
    })
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Relative cost of monitoring, on server counts.
pub fn overhead(base: f64, monitored: f64) -> f64 {
    (base - monitored) / base
}

/// Relative gain of eventual over sequential consistency, on app counts.
pub fn benefit(eventual: f64, sequential: f64) -> f64 {
    (eventual - sequential) / sequential
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64, secs: usize) -> MetricsRecord {
        let row = Row { server_ops: 2.0 * v, app_ops: v, ..Row::default() };
        MetricsRecord { rows: vec![row; secs], duration: secs as Time * SEC, ..MetricsRecord::default() }
    }

    #[test]
    fn constant_series_mean() {
        let s = stable_phase_metrics(&constant(7.0, 10), DEFAULT_WARMUP).unwrap();
        assert_eq!(s.app_ops, 7.0);
        assert_eq!(s.server_ops, 14.0);
        assert_eq!(s.window, (2, 10));
        assert!(stable_phase_metrics(&constant(7.0, 1), 0.99).is_err());
    }

    #[test]
    fn worked_examples() {
        assert_eq!((overhead(649.0, 628.0) * 1000.0).round() / 10.0, 3.2);
        assert_eq!((benefit(454.0, 313.0) * 100.0).round(), 45.0);
    }

    #[test]
    fn csv_round_trip_and_average() {
        let a = constant(1.0, 3);
        let b = constant(2.0, 4);
        let avg = average("avg", &[a.clone(), b]);
        assert_eq!(avg.rows.len(), 4);
        assert_eq!(avg.rows[0].app_ops, 1.5);
        assert_eq!(avg.rows[3].app_ops, 1.0);
        let mut buf = Vec::new();
        avg.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(text.lines().nth(1).unwrap(), "0,3,1.5,0,0,0,0");
        let back = MetricsRecord::read_csv("x", &buf[..]).unwrap();
        assert_eq!(back.rows, avg.rows);
        assert!(MetricsRecord::read_csv("x", &b"a,b\n"[..]).is_err());
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), Some(50.0));
        assert_eq!(percentile(&v, 0.99), Some(99.0));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn episode_matching() {
        let v = |time| LogEvent::Violation { time, what: "c".into() };
        let e = |time| LogEvent::Cleared { time, what: "c".into() };
        let d = |onset, detection_time| {
            LogEvent::Detection(Detection { predicate: "p".into(), t_violate: onset, onset, detection_time })
        };
        let r = MetricsRecord {
            duration: 1000,
            events: vec![v(100), e(200), v(300), e(400), v(900), d(95, 120), d(250, 500), d(890, 905)],
            ..MetricsRecord::default()
        };
        assert_eq!(r.episodes("c"), vec![(100, 200), (300, 400), (900, 1000)]);
        assert_eq!(r.detected_within("c", "p", 50), (2, 3), "the second one was caught too late");
        assert_eq!(r.detected_within("c", "p", 500), (3, 3));
    }

    #[test]
    fn progress_queries() {
        let r = MetricsRecord { progress: vec![(5, 10), (9, 20)], total_nodes: 20, ..MetricsRecord::default() };
        assert_eq!(r.time_to_progress(0.5), Some(5));
        assert_eq!(r.time_to_progress(0.9), Some(9));
        assert_eq!(r.progress_at(6), 10);
        assert_eq!(r.progress_at(1), 0);
    }
}
