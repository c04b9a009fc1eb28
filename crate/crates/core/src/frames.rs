//! Reference-frame designs.
//!
//! A reference frame `T(t)` is the set of days compared against case day `t`
//! (the case day included). Day indices are 1-based throughout; day-of-week
//! labels are derived from the weekday of day 1 carried by [`CalendarMask`].

use std::collections::BTreeSet;
use std::io::Write;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The rule used to choose control days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// Disjoint windows; same-weekday days within a window form a frame.
    TimeStratified,
    /// The case day and the same weekday in the `k` preceding weeks.
    Unidirectional,
    /// The case day and the same weekday `k` weeks before and after.
    SymmetricBidirectional,
}

impl DesignKind {
    pub fn name(self) -> &'static str {
        match self {
            DesignKind::TimeStratified => "time_stratified",
            DesignKind::Unidirectional => "unidirectional",
            DesignKind::SymmetricBidirectional => "symmetric_bidirectional",
        }
    }
}

/// Days removed from every frame (public holidays, outages, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalendarMask {
    excluded: BTreeSet<usize>,
    n_days: usize,
    first_weekday: Weekday,
}

impl CalendarMask {
    /// An empty mask over `n_days` days, with day 1 on a Sunday.
    pub fn new(n_days: usize) -> Self {
        CalendarMask {
            excluded: BTreeSet::new(),
            n_days,
            first_weekday: Weekday::Sun,
        }
    }

    pub fn with_excluded(n_days: usize, days: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut mask = CalendarMask::new(n_days);
        for day in days {
            if day == 0 || day > n_days {
                return Err(Error::invalid(format!(
                    "excluded day {day} outside 1..={n_days}"
                )));
            }
            mask.excluded.insert(day);
        }
        Ok(mask)
    }

    pub fn with_first_weekday(mut self, weekday: Weekday) -> Self {
        self.first_weekday = weekday;
        self
    }

    /// Parses a JSON array whose entries are 1-based day indices or ISO
    /// dates. Dates require the calendar date of day 1.
    pub fn from_json(text: &str, n_days: usize, start: Option<NaiveDate>) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Entry {
            Day(usize),
            Date(String),
        }
        let entries: Vec<Entry> = serde_json::from_str(text)?;
        let mut days = Vec::with_capacity(entries.len());
        for entry in entries {
            match entry {
                Entry::Day(d) => days.push(d),
                Entry::Date(s) => {
                    let start = start.ok_or_else(|| {
                        Error::invalid("calendar mask lists dates but the study start date is unknown")
                    })?;
                    let date = NaiveDate::parse_from_str(&s, "%Y-%m-%d")
                        .map_err(|e| Error::invalid(format!("bad date {s:?} in calendar mask: {e}")))?;
                    let offset = (date - start).num_days();
                    if offset < 0 || offset as usize >= n_days {
                        return Err(Error::invalid(format!(
                            "date {s} falls outside the study period"
                        )));
                    }
                    days.push(offset as usize + 1);
                }
            }
        }
        let mut mask = CalendarMask::with_excluded(n_days, days)?;
        if let Some(start) = start {
            mask.first_weekday = start.weekday();
        }
        Ok(mask)
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    pub fn is_excluded(&self, day: usize) -> bool {
        self.excluded.contains(&day)
    }

    pub fn excluded(&self) -> impl Iterator<Item = usize> + '_ {
        self.excluded.iter().copied()
    }

    pub fn first_weekday(&self) -> Weekday {
        self.first_weekday
    }

    pub fn weekday(&self, day: usize) -> Weekday {
        weekday_of(self.first_weekday, day)
    }
}

/// Weekday of 1-based `day` when day 1 falls on `first`.
pub fn weekday_of(first: Weekday, day: usize) -> Weekday {
    let offset = ((day - 1) % 7) as u32;
    Weekday::try_from(((first.num_days_from_monday() + offset) % 7) as u8)
        .expect("weekday index is reduced modulo 7")
}

/// How frames that lost days to the calendar mask are treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPolicy {
    /// Keep every nonempty frame, including ones shrunk by exclusions.
    #[default]
    KeepPartial,
    /// Drop every frame that had at least one day excluded.
    DropTouched,
}

/// Calendar annotations attached to one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrameMeta {
    pub weekday: Weekday,
    /// Window index (0-based) for time-stratified designs.
    pub window: Option<usize>,
}

/// A collection of reference frames and the day-to-frame map.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFrameSet {
    kind: DesignKind,
    n_days: usize,
    frames: Vec<Vec<usize>>,
    frame_of: Vec<Option<usize>>,
    meta: Vec<FrameMeta>,
}

impl ReferenceFrameSet {
    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// All frames, each a sorted list of 1-based day indices.
    pub fn frames(&self) -> &[Vec<usize>] {
        &self.frames
    }

    pub fn frame(&self, id: usize) -> &[usize] {
        &self.frames[id]
    }

    pub fn meta(&self) -> &[FrameMeta] {
        &self.meta
    }

    /// Frame id assigned to case day `day`, if the day is retained.
    pub fn frame_of(&self, day: usize) -> Option<usize> {
        self.frame_of.get(day.wrapping_sub(1)).copied().flatten()
    }

    /// The reference frame `T(day)` of a case day.
    pub fn frame_for_day(&self, day: usize) -> Option<&[usize]> {
        self.frame_of(day).map(|id| self.frames[id].as_slice())
    }

    /// True when frames are pairwise disjoint, so each frame is one stratum.
    pub fn is_partition(&self) -> bool {
        self.kind == DesignKind::TimeStratified
    }

    pub fn max_frame_size(&self) -> usize {
        self.frames.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Days that belong to at least one frame.
    pub fn retained_days(&self) -> Vec<usize> {
        (1..=self.n_days).filter(|&d| self.frame_of(d).is_some()).collect()
    }

    /// Writes `day_index,frame_id` membership rows (one per day per frame).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["day_index", "frame_id"])?;
        for (id, frame) in self.frames.iter().enumerate() {
            for day in frame {
                wtr.write_record([day.to_string(), id.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_common(n_days: usize, mask: &CalendarMask) -> Result<()> {
    if n_days == 0 {
        return Err(Error::invalid("study length must be positive"));
    }
    if mask.n_days() != n_days {
        return Err(Error::invalid(format!(
            "calendar mask covers {} days but the study has {n_days}",
            mask.n_days()
        )));
    }
    Ok(())
}

/// Time-stratified design with windows of `window_days` consecutive days.
pub fn build_time_stratified(
    n_days: usize,
    window_days: usize,
    mask: &CalendarMask,
) -> Result<ReferenceFrameSet> {
    build_time_stratified_with(n_days, window_days, mask, ExclusionPolicy::KeepPartial)
}

pub fn build_time_stratified_with(
    n_days: usize,
    window_days: usize,
    mask: &CalendarMask,
    policy: ExclusionPolicy,
) -> Result<ReferenceFrameSet> {
    check_common(n_days, mask)?;
    if window_days == 0 || window_days % 7 != 0 {
        return Err(Error::invalid(format!(
            "window length {window_days} must be a positive multiple of 7"
        )));
    }
    if n_days < 7 {
        return Err(Error::invalid("time-stratified designs need at least 7 days"));
    }

    let mut frames = Vec::new();
    let mut meta = Vec::new();
    let mut frame_of = vec![None; n_days];
    let n_windows = n_days.div_ceil(window_days);
    for window in 0..n_windows {
        let start = window * window_days + 1;
        let end = ((window + 1) * window_days).min(n_days);
        for first in start..(start + 7).min(end + 1) {
            let all: Vec<usize> = (first..=end).step_by(7).collect();
            let kept: Vec<usize> = all.iter().copied().filter(|&d| !mask.is_excluded(d)).collect();
            let touched = kept.len() != all.len();
            if kept.is_empty() || (touched && policy == ExclusionPolicy::DropTouched) {
                continue;
            }
            let id = frames.len();
            for &d in &kept {
                frame_of[d - 1] = Some(id);
            }
            meta.push(FrameMeta {
                weekday: mask.weekday(first),
                window: Some(window),
            });
            frames.push(kept);
        }
    }
    Ok(ReferenceFrameSet {
        kind: DesignKind::TimeStratified,
        n_days,
        frames,
        frame_of,
        meta,
    })
}

fn build_per_day(
    n_days: usize,
    k_weeks: usize,
    mask: &CalendarMask,
    kind: DesignKind,
) -> Result<ReferenceFrameSet> {
    check_common(n_days, mask)?;
    if k_weeks == 0 {
        return Err(Error::invalid("number of weeks must be at least 1"));
    }
    let mut frames = Vec::new();
    let mut meta = Vec::new();
    let mut frame_of = vec![None; n_days];
    for day in 1..=n_days {
        if mask.is_excluded(day) {
            continue;
        }
        let back = k_weeks as isize;
        let ahead = match kind {
            DesignKind::SymmetricBidirectional => k_weeks as isize,
            _ => 0,
        };
        let frame: Vec<usize> = (-back..=ahead)
            .map(|week| day as isize + 7 * week)
            .filter(|&d| d >= 1 && d <= n_days as isize)
            .map(|d| d as usize)
            .filter(|&d| !mask.is_excluded(d))
            .collect();
        frame_of[day - 1] = Some(frames.len());
        meta.push(FrameMeta {
            weekday: mask.weekday(day),
            window: None,
        });
        frames.push(frame);
    }
    Ok(ReferenceFrameSet {
        kind,
        n_days,
        frames,
        frame_of,
        meta,
    })
}

/// Unidirectional design: `{t, t-7, ..., t-7k}` within the study period.
pub fn build_unidirectional(
    n_days: usize,
    k_weeks: usize,
    mask: &CalendarMask,
) -> Result<ReferenceFrameSet> {
    build_per_day(n_days, k_weeks, mask, DesignKind::Unidirectional)
}

/// Symmetric bidirectional design: `{t-7k, ..., t, ..., t+7k}`.
///
/// Frames built this way are not localizable; the conditional likelihood
/// ignores that the case day sits at the centre, which can bias estimates.
pub fn build_symmetric_bidirectional(
    n_days: usize,
    k_weeks: usize,
    mask: &CalendarMask,
) -> Result<ReferenceFrameSet> {
    build_per_day(n_days, k_weeks, mask, DesignKind::SymmetricBidirectional)
}

/// Builds a design from a target number of control days per case day.
///
/// Time-stratified designs use windows of `7 * (control_days + 1)` days;
/// unidirectional designs use `control_days` weeks; bidirectional designs
/// need an even count and use `control_days / 2` weeks on each side.
pub fn build_design(
    kind: DesignKind,
    control_days: usize,
    n_days: usize,
    mask: &CalendarMask,
    policy: ExclusionPolicy,
) -> Result<ReferenceFrameSet> {
    if control_days == 0 {
        return Err(Error::invalid("control_days must be at least 1"));
    }
    match kind {
        DesignKind::TimeStratified => {
            build_time_stratified_with(n_days, 7 * (control_days + 1), mask, policy)
        }
        DesignKind::Unidirectional => build_unidirectional(n_days, control_days, mask),
        DesignKind::SymmetricBidirectional => {
            if control_days % 2 != 0 {
                return Err(Error::invalid(
                    "bidirectional designs need an even number of control days",
                ));
            }
            build_symmetric_bidirectional(n_days, control_days / 2, mask)
        }
    }
}
