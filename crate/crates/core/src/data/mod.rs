//! Ingestion, calendar features, aggregation, coarsening and windowing.

mod aggregate;
mod calendar;
mod grid;
mod kmeans;
mod synth;
mod window;

pub use aggregate::{aggregate_predictions, aggregate_space, aggregate_time, region_id, upsample_hold, RegionMap};
pub use calendar::{extract_calendar_features, feature_count, CalendarRow, HolidaySet};
pub use grid::{
    load_centroids, load_grid_csv, load_holidays, parse_timestamp, valid_interval, write_holidays, AggregationMode,
    ColumnSpec, FillRule, SeriesGrid, TIMESTAMP_FORMAT,
};
pub use kmeans::{default_k, kmeans, kmeans_partition, KMeansResult};
pub use synth::{synthesize_lagged_pair, SynthConfig};
pub use window::{make_windows, make_windows_strided, WindowSample, WindowShape};
