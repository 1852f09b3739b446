use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::grid::{AggregationMode, SeriesGrid};
use crate::{Error, Result};

/// Assignment of fine locations to coarse regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    k: usize,
    assignment: BTreeMap<String, usize>,
}

impl RegionMap {
    /// Every region in `0..k` must receive at least one location.
    pub fn new(k: usize, assignment: BTreeMap<String, usize>) -> Result<Self> {
        let mut seen = vec![false; k];
        for (id, &r) in &assignment {
            if r >= k {
                return Err(Error::Config(format!("{id} assigned to region {r} of {k}")));
            }
            seen[r] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("coarse region {empty} is empty")));
        }
        Ok(Self { k, assignment })
    }

    pub fn from_labels(location_ids: &[String], labels: &[usize]) -> Result<Self> {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(
            k,
            location_ids.iter().cloned().zip(labels.iter().copied()).collect(),
        )
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn region_of(&self, location_id: &str) -> Option<usize> {
        self.assignment.get(location_id).copied()
    }

    pub fn members(&self, region: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &r)| r == region)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Coarsens the time axis by `target / R`. A trailing partial block is
/// dropped.
pub fn aggregate_time(grid: &SeriesGrid, target_minutes: u32, mode: AggregationMode) -> Result<SeriesGrid> {
    let r = grid.interval_minutes();
    if target_minutes < r || !target_minutes.is_multiple_of(r) {
        return Err(Error::Config(format!(
            "cannot aggregate {r}-minute steps into {target_minutes}-minute steps"
        )));
    }
    let ratio = (target_minutes / r) as usize;
    let t = grid.num_steps();
    if t < ratio {
        return Err(Error::Config(format!(
            "{t} steps are fewer than one {target_minutes}-minute block"
        )));
    }
    if !t.is_multiple_of(ratio) {
        log::warn!(
            "{}: dropping {} trailing steps that do not fill a {target_minutes}-minute block",
            grid.modality(),
            t % ratio
        );
    }
    let values = grid
        .values()
        .iter()
        .map(|row| {
            row.chunks_exact(ratio)
                .map(|c| mode.reduce(c))
                .collect::<Vec<_>>()
        })
        .collect();
    SeriesGrid::new(
        grid.modality(),
        grid.location_ids().to_vec(),
        grid.centroids().to_vec(),
        grid.start(),
        target_minutes,
        values,
    )
}

/// Refines the time axis by repeating each reading `R / target` times.
pub fn upsample_hold(grid: &SeriesGrid, target_minutes: u32) -> Result<SeriesGrid> {
    let r = grid.interval_minutes();
    if target_minutes == 0 || target_minutes > r || !r.is_multiple_of(target_minutes) {
        return Err(Error::Config(format!(
            "cannot hold {r}-minute steps at {target_minutes}-minute steps"
        )));
    }
    let ratio = (r / target_minutes) as usize;
    let values = grid
        .values()
        .iter()
        .map(|row| {
            row.iter()
                .flat_map(|&v| std::iter::repeat_n(v, ratio))
                .collect()
        })
        .collect();
    SeriesGrid::new(
        grid.modality(),
        grid.location_ids().to_vec(),
        grid.centroids().to_vec(),
        grid.start(),
        target_minutes,
        values,
    )
}

/// Name given to coarse region `k`.
pub fn region_id(k: usize) -> String {
    format!("region_{k}")
}

/// Merges fine rows into one row per region; coarse centroids are member
/// means.
pub fn aggregate_space(grid: &SeriesGrid, regions: &RegionMap, mode: AggregationMode) -> Result<SeriesGrid> {
    let k = regions.k();
    let t = grid.num_steps();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (n, id) in grid.location_ids().iter().enumerate() {
        let r = regions
            .region_of(id)
            .ok_or_else(|| Error::Config(format!("location {id} is not in the region map")))?;
        members[r].push(n);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "coarse region {empty} has no location in {}",
            grid.modality()
        )));
    }
    let mut values = Vec::with_capacity(k);
    let mut centroids = Vec::with_capacity(k);
    for m in &members {
        let mut sums = vec![0.0; t];
        for &n in m {
            for (s, v) in sums.iter_mut().zip(grid.row(n)) {
                *s += v;
            }
        }
        if mode == AggregationMode::Mean {
            sums.iter_mut().for_each(|s| *s /= m.len() as f64);
        }
        values.push(sums);
        let c = grid.centroids();
        let cnt = m.len() as f64;
        centroids.push((
            m.iter().map(|&n| c[n].0).sum::<f64>() / cnt,
            m.iter().map(|&n| c[n].1).sum::<f64>() / cnt,
        ));
    }
    SeriesGrid::new(
        grid.modality(),
        (0..k).map(region_id).collect(),
        centroids,
        grid.start(),
        grid.interval_minutes(),
        values,
    )
}

/// Blockwise reduction of a forecast vector from `from` to `to` minutes.
pub fn aggregate_predictions(pred: &[f64], from_minutes: u32, to_minutes: u32, mode: AggregationMode) -> Result<Vec<f64>> {
    if from_minutes == 0 || !to_minutes.is_multiple_of(from_minutes) {
        return Err(Error::Config(format!(
            "{to_minutes} min is not a multiple of {from_minutes} min"
        )));
    }
    let ratio = (to_minutes / from_minutes) as usize;
    if pred.is_empty() || !pred.len().is_multiple_of(ratio) {
        return Err(Error::Config(format!(
            "forecast of length {} does not split into blocks of {ratio}",
            pred.len()
        )));
    }
    Ok(pred.chunks(ratio).map(|c| mode.reduce(c)).collect())
}
