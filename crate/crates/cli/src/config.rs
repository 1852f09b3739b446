use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xmtrans_core::data::{
    load_centroids, load_grid_csv, load_holidays, ColumnSpec, FillRule, HolidaySet, SeriesGrid,
};
use xmtrans_core::train::ExperimentSpec;
use xmtrans_core::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Target series, `location_id,timestamp,value`.
    pub tm: PathBuf,
    /// Support series in the same layout; required by wirings e3 and e4.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sm: Option<PathBuf>,
    /// `location_id,lat,lon`; required by spatial multi-resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroids: Option<PathBuf>,
    /// One ISO date per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holidays: Option<PathBuf>,
    /// Parent of the run directories.
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ingestion {
    pub tm_fill: FillRule,
    pub sm_fill: FillRule,
    /// Expected interval; inferred from the timestamps when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval_minutes: Option<u32>,
}

impl Default for Ingestion {
    fn default() -> Self {
        Self {
            tm_fill: FillRule::Zero,
            sm_fill: FillRule::Zero,
            interval_minutes: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Prefix of generated run ids.
    #[serde(default = "default_name")]
    pub name: String,
    pub paths: Paths,
    #[serde(default)]
    pub ingestion: Ingestion,
    #[serde(flatten)]
    pub experiment: ExperimentSpec,
}

fn default_name() -> String {
    "run".to_string()
}

pub const SEED_ENV: &str = "XMTRANS_SEED";

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_relative(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Input paths are relative to the config file; the output directory is
    /// relative to the working directory.
    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.tm);
        for p in [&mut self.paths.sm, &mut self.paths.centroids, &mut self.paths.holidays].into_iter().flatten() {
            fix(p);
        }
    }

    /// `XMTRANS_SEED` replaces the seed list with a single seed.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.experiment.train.seeds = vec![seed];
        }
        Ok(())
    }

    /// Every configuration and missing-file problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = self.experiment.problems();
        let wiring = self.experiment.model.wiring;
        if wiring.uses_support() && self.paths.sm.is_none() {
            problems.push(format!("wiring {wiring} needs the support series: set paths.sm"));
        }
        if self.experiment.smr && self.paths.centroids.is_none() {
            problems.push("spatial multi-resolution needs location centroids: set paths.centroids".to_string());
        }
        let files = [Some(&self.paths.tm), self.paths.sm.as_ref(), self.paths.centroids.as_ref(), self.paths.holidays.as_ref()];
        for p in files.into_iter().flatten() {
            if !p.is_file() {
                problems.push(format!("file not found: {}", p.display()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// `(tm, sm, holidays)`. Without a support file the target series stands
    /// in for it; only wirings that ignore the support series allow that.
    pub fn load_data(&self) -> Result<(SeriesGrid, SeriesGrid, HolidaySet)> {
        let spec = |modality: &str, fill| ColumnSpec {
            modality: modality.to_string(),
            fill,
            interval_minutes: self.ingestion.interval_minutes,
        };
        let mut tm = load_grid_csv(&self.paths.tm, &spec("tm", self.ingestion.tm_fill))?;
        let mut sm = match &self.paths.sm {
            Some(p) => load_grid_csv(p, &spec("sm", self.ingestion.sm_fill))?,
            None => tm.clone().with_modality("sm"),
        };
        if let Some(p) = &self.paths.centroids {
            let c = load_centroids(p)?;
            tm = tm.with_centroids(&c)?;
            sm = sm.with_centroids(&c)?;
        }
        let holidays = match &self.paths.holidays {
            Some(p) => load_holidays(p)?,
            None => HolidaySet::new(),
        };
        Ok((tm, sm, holidays))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// First `<prefix>-NNN` not present under `out`.
pub fn next_run_id(out: &Path, prefix: &str) -> String {
    (1..)
        .map(|i| format!("{prefix}-{i:03}"))
        .find(|id| !out.join(id).exists())
        .expect("unbounded range")
}
