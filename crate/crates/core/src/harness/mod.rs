mod eval;
mod experiment;
mod svg;
mod train;

pub use eval::{decode_runtime, evaluate, Evaluation};
pub use experiment::{
    base_model, beta_csv, beta_sweep, fine_tune, parse_mix, reference_params_pct, run_experiment, run_experiment_with,
    write_beta_outputs, zero_shot, zero_shot_csv, ConfigResult, ExperimentReport, ExperimentSpec, RunRecord, Workspace,
    ZeroShotRow,
};
pub use svg::line_plot;
pub use train::{accent_batches, batch_grads, lr_at, pretrain, train, Adam, EpochStat, PretrainConfig, TrainConfig, TrainOutcome};
