use crate::data::{aggregate_space, make_windows, AggregationMode, HolidaySet, RegionMap, SeriesGrid, WindowSample, WindowShape};
use crate::Result;

/// Fine windows followed by windows of the coarse regions, the latter
/// flagged `is_coarse`.
#[allow(clippy::too_many_arguments)]
pub fn build_smr_training_set(
    fine: Vec<WindowSample>,
    regions: &RegionMap,
    tm: &SeriesGrid,
    sm: &SeriesGrid,
    shape: WindowShape,
    holidays: &HolidaySet,
    tm_mode: AggregationMode,
    sm_mode: AggregationMode,
) -> Result<Vec<WindowSample>> {
    let ctm = aggregate_space(tm, regions, tm_mode)?;
    let csm = aggregate_space(sm, regions, sm_mode)?;
    let mut out = fine;
    out.extend(make_windows(&ctm, &csm, shape, holidays)?.into_iter().map(|mut w| {
        w.is_coarse = true;
        w
    }));
    Ok(out)
}

/// The samples that count towards evaluation.
pub fn fine_only(samples: &[WindowSample]) -> Vec<&WindowSample> {
    samples.iter().filter(|s| !s.is_coarse).collect()
}
