//! Training at one or several resolutions, horizon evaluation and export.

mod config;
mod eval;
mod export;
mod pipeline;
mod single;
mod smr;
mod tmr;

pub use crate::data::aggregate_predictions;
pub use config::{evenly_spaced, TrainConfig};
pub use eval::{
    evaluate_horizons, format_cell, horizon_errors, horizon_steps, mean_std, score_predictions, EvalReport,
    HorizonScore, HorizonSummary, SeedScores,
};
pub use export::{
    attention_export, export_results, prediction_export, read_json, AttentionExport, AttentionRecord,
    PredictionExport, PredictionRecord, ATTENTION_FILE, EXPORT_VERSION, PREDICTIONS_FILE, REPORT_FILE,
};
pub use pipeline::{
    ablation_table, checkpoint_path, prepare_data, run_ablation, run_experiment, run_seed, save_run, split_grids,
    AblationRow, ExperimentRun, ExperimentSpec, PreparedData, SeedRun, SplitGrids, SplitSpec, StageResult,
    WindowSpec,
};
pub use single::{
    consistency_loss, mse, stage_loss, train_single_resolution, validation_mse, Consistency, LossCurve, TrainOutcome,
};
pub use smr::{build_smr_training_set, fine_only};
pub use tmr::{aligned_coarse_targets, train_tmr, ResolutionData, StageOutcome};
