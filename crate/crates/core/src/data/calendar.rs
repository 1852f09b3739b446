use std::collections::HashSet;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

pub type HolidaySet = HashSet<NaiveDate>;

/// Calendar features of one timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CalendarRow {
    /// 1..=12
    pub month: u8,
    /// 1..=31
    pub day: u8,
    /// 0..=23
    pub hour: u8,
    /// `minute / R`, only for sub-hourly intervals.
    pub minute_index: Option<u8>,
    /// Monday = 0.
    pub weekday: u8,
    pub holiday: bool,
}

/// Number of distinct calendar tokens for interval `r`: the minute token is
/// dropped at hourly and coarser resolutions.
pub fn feature_count(interval_minutes: u32) -> usize {
    if interval_minutes < 60 {
        6
    } else {
        5
    }
}

pub fn extract_calendar_features(
    ts: NaiveDateTime,
    interval_minutes: u32,
    holidays: &HolidaySet,
) -> CalendarRow {
    CalendarRow {
        month: ts.month() as u8,
        day: ts.day() as u8,
        hour: ts.hour() as u8,
        minute_index: (interval_minutes < 60).then(|| (ts.minute() / interval_minutes) as u8),
        weekday: ts.weekday().num_days_from_monday() as u8,
        holiday: holidays.contains(&ts.date()),
    }
}

impl CalendarRow {
    /// Rebuilds the timestamp given the year it came from.
    pub fn to_timestamp(&self, year: i32, interval_minutes: u32) -> Option<NaiveDateTime> {
        let minute = self.minute_index.map_or(0, |m| m as u32 * interval_minutes);
        NaiveDate::from_ymd_opt(year, self.month as u32, self.day as u32)?.and_hms_opt(
            self.hour as u32,
            minute,
            0,
        )
    }
}
