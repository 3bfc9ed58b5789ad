//! End-to-end paths through the public API, from generated data to saved
//! models.

use pdeforecast::forecaster::{pooled_error, rollout, CovariatePolicy, Mode, RolloutConfig};
use pdeforecast::hybrid::{grid_plans, train_hybrid};
use pdeforecast::pblock::{parse_terms, PBlock, TrainConfig};
use pdeforecast::persist::{load_model, save_json, Model, ModelFile};
use pdeforecast::series::{read_csv, split, write_csv};
use pdeforecast::synth::{generate_regime, generate_wave, RegimeConfig, WaveConfig};

fn regime() -> pdeforecast::TimeSeries {
    generate_regime(&RegimeConfig::default()).unwrap()
}

fn linear_block() -> PBlock {
    PBlock::with_terms(parse_terms("x1;x2").unwrap(), 2, 3, 1).unwrap()
}

#[test]
fn csv_round_trip_is_exact() {
    let series = generate_wave(&WaveConfig { n_points: 50, ..WaveConfig::default() }).unwrap();
    let mut buf = Vec::new();
    write_csv(&series, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), series.target_name()).unwrap();
    assert_eq!(back, series);
}

#[test]
fn single_block_trains_and_forecasts() {
    let series = regime();
    let (train, _, _) = split(&series, (0.7, 0.1, 0.2)).unwrap();
    let mut block = linear_block();
    let report = block.train(&train, &TrainConfig::default()).unwrap();
    assert!(report.final_residual.is_finite());
    assert!(report.final_residual < 1.0);

    let anchor = series.len() - 30;
    let cfg = RolloutConfig::new(20, Mode::Multi).with_covariates(CovariatePolicy::Provided);
    let forecast = rollout(&block, &series, anchor, &cfg).unwrap();
    assert_eq!(forecast.values.len(), 20);
    assert!(forecast.values.iter().all(|v| v.is_finite()));
    assert!(forecast.times.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn hybrid_pools_finite_errors_over_test_anchors() {
    let series = regime();
    let (n_train, _, _) = pdeforecast::series::split_sizes(series.len(), (0.7, 0.1, 0.2));
    let train = series.prefix(n_train).unwrap();
    let plans = grid_plans(n_train, &[1.0, 0.5], &[1, 2]);
    let (hybrid, reports) = train_hybrid(&train, &plans, &linear_block(), &TrainConfig::default()).unwrap();
    assert_eq!(reports.len(), plans.len());
    let anchors: Vec<usize> = (n_train..series.len() - 21).step_by(10).collect();
    let cfg = RolloutConfig::new(20, Mode::Multi);
    let pooled = pooled_error(&hybrid, &series, &anchors, &cfg).unwrap();
    assert_eq!(pooled.anchors, anchors.len());
    assert!(pooled.relative_mse.is_finite() && pooled.relative_mse >= 0.0);
}

#[test]
fn saved_model_reloads_and_predicts_identically() {
    let series = regime();
    let mut block = linear_block();
    block.train(&series.prefix(300).unwrap(), &TrainConfig::default()).unwrap();
    let file = ModelFile::new(series.names().to_vec(), Model::Single { block });

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_json(&path, &file).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded, file);

    let cfg = RolloutConfig::new(10, Mode::Multi);
    let a = rollout(file.resolve(&series).unwrap().as_ref(), &series, 350, &cfg).unwrap();
    let b = rollout(loaded.resolve(&series).unwrap().as_ref(), &series, 350, &cfg).unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn wrong_schema_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    std::fs::write(&path, r#"{"schema_version": 99, "names": [], "model": {}}"#).unwrap();
    assert!(matches!(load_model(&path), Err(pdeforecast::Error::Schema(_))));
}
