//! Per-crosswalk signal state as a total function of time.
//!
//! Green intervals are half-open `[begin, end)`, so every instant in the
//! log span has exactly one state and the timeline is right-continuous.

use super::{IngestError, PhaseEventKind, SpatEvent};
use crate::preprocess::Area;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseState {
    Green,
    NotGreen,
}

impl PhaseState {
    pub fn is_green(self) -> bool {
        matches!(self, PhaseState::Green)
    }

    /// 1 for green, 0 otherwise; the model-facing encoding.
    pub fn flag(self) -> f64 {
        if self.is_green() {
            1.0
        } else {
            0.0
        }
    }
}

/// Half-open green window `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreenInterval {
    pub start_ms: i64,
    pub end_ms: i64,
}

/// Time -> (phase state, seconds to the next boundary), per crosswalk area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimeline {
    /// Disjoint, strictly increasing green intervals per area.
    intervals: BTreeMap<Area, Vec<GreenInterval>>,
    span_start_ms: i64,
    span_end_ms: i64,
}

/// Build the per-area timeline from validated SPaT events and an
/// area -> phase mapping. Areas whose phase has no events get an empty
/// (never green) interval list.
pub fn build_phase_timeline(
    events: &[SpatEvent],
    phase_map: &BTreeMap<Area, u32>,
) -> Result<PhaseTimeline, IngestError> {
    super::validate_alternation(events)?;

    let mut per_phase: BTreeMap<u32, Vec<GreenInterval>> = BTreeMap::new();
    let mut open: BTreeMap<u32, i64> = BTreeMap::new();
    for e in events {
        match e.event {
            PhaseEventKind::Begin => {
                open.insert(e.phase_id, e.timestamp_ms);
            }
            PhaseEventKind::End => {
                let start_ms = open.remove(&e.phase_id).expect("validated alternation");
                if e.timestamp_ms > start_ms {
                    per_phase.entry(e.phase_id).or_default().push(GreenInterval {
                        start_ms,
                        end_ms: e.timestamp_ms,
                    });
                } else {
                    log::debug!(
                        "dropping empty green interval for phase {} at {} ms",
                        e.phase_id,
                        e.timestamp_ms
                    );
                }
            }
        }
    }

    let span_start_ms = events.first().map(|e| e.timestamp_ms).unwrap_or(0);
    let span_end_ms = events.last().map(|e| e.timestamp_ms).unwrap_or(0);

    let mut intervals = BTreeMap::new();
    for (&area, &phase_id) in phase_map {
        intervals.insert(
            area,
            per_phase.get(&phase_id).cloned().unwrap_or_default(),
        );
    }

    Ok(PhaseTimeline {
        intervals,
        span_start_ms,
        span_end_ms,
    })
}

impl PhaseTimeline {
    /// Build directly from per-area green intervals (synthetic scenes,
    /// tests). Intervals must be disjoint and increasing.
    pub fn from_intervals(
        intervals: BTreeMap<Area, Vec<GreenInterval>>,
        span_start_ms: i64,
        span_end_ms: i64,
    ) -> Self {
        PhaseTimeline {
            intervals,
            span_start_ms,
            span_end_ms,
        }
    }

    pub fn span_ms(&self) -> (i64, i64) {
        (self.span_start_ms, self.span_end_ms)
    }

    pub fn covers(&self, t_ms: i64) -> bool {
        (self.span_start_ms..=self.span_end_ms).contains(&t_ms)
    }

    pub fn areas(&self) -> impl Iterator<Item = Area> + '_ {
        self.intervals.keys().copied()
    }

    pub fn green_intervals(&self, area: Area) -> Result<&[GreenInterval], IngestError> {
        self.intervals
            .get(&area)
            .map(|v| v.as_slice())
            .ok_or(IngestError::UnknownArea(area))
    }

    /// Phase state and seconds to the current state's boundary, at `t_ms`.
    ///
    /// Green: seconds to the interval's end. Not green: seconds to the next
    /// green start, or to the span end when no green follows. Total over the
    /// whole span for every configured area.
    pub fn query(&self, t_ms: i64, area: Area) -> Result<(PhaseState, f64), IngestError> {
        let intervals = self.green_intervals(area)?;
        // Partition point: first interval starting after t.
        let next_idx = intervals.partition_point(|iv| iv.start_ms <= t_ms);
        if next_idx > 0 {
            let current = &intervals[next_idx - 1];
            if t_ms < current.end_ms {
                return Ok((PhaseState::Green, ms_to_s(current.end_ms - t_ms)));
            }
        }
        let left_ms = match intervals.get(next_idx) {
            Some(next) => next.start_ms - t_ms,
            None => (self.span_end_ms - t_ms).max(0),
        };
        Ok((PhaseState::NotGreen, ms_to_s(left_ms)))
    }

    pub fn current_phase(&self, t_ms: i64, area: Area) -> Result<PhaseState, IngestError> {
        Ok(self.query(t_ms, area)?.0)
    }

    pub fn left_phase_time(&self, t_ms: i64, area: Area) -> Result<f64, IngestError> {
        Ok(self.query(t_ms, area)?.1)
    }

    /// First green -> not-green boundary in `[from_ms, to_ms]`, if any.
    pub fn first_green_end_in(
        &self,
        from_ms: i64,
        to_ms: i64,
        area: Area,
    ) -> Result<Option<i64>, IngestError> {
        let intervals = self.green_intervals(area)?;
        Ok(intervals
            .iter()
            .map(|iv| iv.end_ms)
            .find(|&end| end >= from_ms && end <= to_ms))
    }
}

fn ms_to_s(ms: i64) -> f64 {
    ms as f64 / 1000.0
}
