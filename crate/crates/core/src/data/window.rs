use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::calendar::{extract_calendar_features, CalendarRow, HolidaySet};
use super::grid::SeriesGrid;
use crate::{Error, Result};

/// One location's input windows and the target that immediately follows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub location_id: String,
    /// Timestamp of the first input step.
    pub input_start: NaiveDateTime,
    pub tm_input: Vec<f64>,
    pub sm_input: Vec<f64>,
    pub calendar: Vec<CalendarRow>,
    pub target: Vec<f64>,
    pub resolution_minutes: u32,
    pub is_coarse: bool,
}

impl WindowSample {
    pub fn input_len(&self) -> usize {
        self.tm_input.len()
    }

    pub fn horizon(&self) -> usize {
        self.target.len()
    }

    /// Timestamp of the first target step.
    pub fn target_start(&self) -> NaiveDateTime {
        self.input_start
            + chrono::Duration::minutes(self.resolution_minutes as i64 * self.tm_input.len() as i64)
    }
}

/// Input and target step counts for a wall-clock lookback and horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowShape {
    /// H + 1
    pub input_len: usize,
    /// L
    pub horizon: usize,
}

impl WindowShape {
    pub fn from_hours(lookback_hours: u32, horizon_hours: u32, interval_minutes: u32) -> Result<Self> {
        let steps = |hours: u32, what: &str| {
            let minutes = hours * 60;
            if interval_minutes == 0 || !minutes.is_multiple_of(interval_minutes) || minutes == 0 {
                Err(Error::Config(format!(
                    "{what} of {hours} h is not a whole number of {interval_minutes}-minute steps"
                )))
            } else {
                Ok((minutes / interval_minutes) as usize)
            }
        };
        Ok(Self {
            input_len: steps(lookback_hours, "lookback")?,
            horizon: steps(horizon_hours, "horizon")?,
        })
    }
}

fn check_aligned(tm: &SeriesGrid, sm: &SeriesGrid) -> Result<()> {
    if tm.interval_minutes() != sm.interval_minutes()
        || tm.start() != sm.start()
        || tm.num_steps() != sm.num_steps()
        || tm.location_ids() != sm.location_ids()
    {
        return Err(Error::Alignment(format!(
            "{} ({} min, start {}, {} steps, {} locations) vs {} ({} min, start {}, {} steps, {} locations)",
            tm.modality(),
            tm.interval_minutes(),
            tm.start(),
            tm.num_steps(),
            tm.num_locations(),
            sm.modality(),
            sm.interval_minutes(),
            sm.start(),
            sm.num_steps(),
            sm.num_locations()
        )));
    }
    Ok(())
}

/// Stride-1 sliding windows over every location: `T - (H+1) - L + 1` per
/// location.
pub fn make_windows(
    tm: &SeriesGrid,
    sm: &SeriesGrid,
    shape: WindowShape,
    holidays: &HolidaySet,
) -> Result<Vec<WindowSample>> {
    make_windows_strided(tm, sm, shape, holidays, 1)
}

/// As [`make_windows`], keeping every `stride`-th start position.
pub fn make_windows_strided(
    tm: &SeriesGrid,
    sm: &SeriesGrid,
    shape: WindowShape,
    holidays: &HolidaySet,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    check_aligned(tm, sm)?;
    let WindowShape { input_len, horizon } = shape;
    let t = tm.num_steps();
    if input_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config("window lengths and stride must be positive".into()));
    }
    if input_len + horizon > t {
        return Err(Error::Config(format!(
            "window of {input_len} + {horizon} steps does not fit in {t} steps"
        )));
    }
    let r = tm.interval_minutes();
    let calendar: Vec<CalendarRow> = (0..t)
        .map(|s| extract_calendar_features(tm.timestamp(s), r, holidays))
        .collect();
    let count = t - input_len - horizon + 1;
    let mut out = Vec::with_capacity(tm.num_locations() * count.div_ceil(stride));
    for (n, id) in tm.location_ids().iter().enumerate() {
        let (tr, sr) = (tm.row(n), sm.row(n));
        for s in (0..count).step_by(stride) {
            out.push(WindowSample {
                location_id: id.clone(),
                input_start: tm.timestamp(s),
                tm_input: tr[s..s + input_len].to_vec(),
                sm_input: sr[s..s + input_len].to_vec(),
                calendar: calendar[s..s + input_len].to_vec(),
                target: tr[s + input_len..s + input_len + horizon].to_vec(),
                resolution_minutes: r,
                is_coarse: false,
            });
        }
    }
    Ok(out)
}
