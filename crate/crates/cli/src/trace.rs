//! Episode trace CSV.

use std::fmt::Write as _;

use lkmerge::{EpisodeSummary, Outcome};

pub const TRACE_HEADER: &str =
    "time,vehicle_id,lane_id,p_lon,p_lat,v_lon,v_lat,heading,action_index,reward";

pub fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Success => "success",
        Outcome::Collision => "collision",
        Outcome::Timeout => "timeout",
    }
}

/// One row per vehicle per simulation step, then `# outcome=<outcome>`.
/// Floats use the shortest representation that round-trips.
pub fn trace_csv(summary: &EpisodeSummary) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in summary.trace.iter().flatten() {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},",
            r.time, r.vehicle_id.0, r.lane_id, r.p_lon, r.p_lat, r.v_lon, r.v_lat, r.heading
        );
        if let Some(a) = r.action {
            let _ = write!(s, "{a}");
        }
        s.push(',');
        if let Some(x) = r.reward {
            let _ = write!(s, "{x}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "# outcome={}", outcome_name(summary.outcome));
    s
}
