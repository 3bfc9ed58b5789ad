//! Command implementations.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use pdeforecast::experiment::{run_ablation, AblationReport};
use pdeforecast::forecaster::{anchor_error_sums, pool, pooled_error, rollout, CovariatePolicy, DerivativeModel, PooledError};
use pdeforecast::hybrid::{grid_plans, train_hybrid, HybridPde};
use pdeforecast::metactrl::{argmin, default_grid, search_hyperparams, HyperparamPoint};
use pdeforecast::pblock::{parse_terms, FitReport, PBlock, TrainConfig};
use pdeforecast::persist::{load_model, save_json, to_json, Model, ModelFile, SCHEMA_VERSION};
use pdeforecast::render::{EquationDoc, Notation};
use pdeforecast::series::{load_csv, split_sizes, write_csv, ResamplePlan};
use pdeforecast::synth::{generate_regime, generate_wave, RegimeConfig, WaveConfig};
use pdeforecast::TimeSeries;

use crate::config::RunConfig;
use crate::{CliError, DiscoverArgs, EvalArgs, GenerateArgs, PredictArgs, TrainArgs};

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let series = match args.kind.as_str() {
        "wave" => {
            let d = WaveConfig::default();
            generate_wave(&WaveConfig {
                n_points: args.n.unwrap_or(d.n_points),
                t_min: args.t_min.unwrap_or(d.t_min),
                t_max: args.t_max.unwrap_or(d.t_max),
                k_max: args.k_max.unwrap_or(d.k_max),
                seed: args.seed.unwrap_or(d.seed),
                noise: args.noise.unwrap_or(d.noise),
            })?
        }
        "regime" => {
            let d = RegimeConfig::default();
            generate_regime(&RegimeConfig {
                n_points: args.n.unwrap_or(d.n_points),
                t_max: args.t_max.unwrap_or(d.t_max),
                seed: args.seed.unwrap_or(d.seed),
                noise: args.noise.unwrap_or(d.noise),
                ..d
            })?
        }
        other => return Err(CliError::Config(format!("unknown series kind `{other}`"))),
    };
    let file = std::fs::File::create(&args.out).map_err(|e| CliError::file(&args.out)(e.into()))?;
    write_csv(&series, std::io::BufWriter::new(file)).map_err(CliError::file(&args.out))?;
    println!("wrote {} rows to {}", series.len(), args.out.display());
    Ok(())
}

fn load(path: &Path, cfg: &RunConfig) -> Result<TimeSeries, CliError> {
    load_csv(path, &cfg.target).map_err(CliError::file(path))
}

fn template(cfg: &RunConfig, n_covariates: usize) -> Result<PBlock, CliError> {
    let block = if cfg.terms.is_empty() {
        PBlock::random(&cfg.structure_config(), n_covariates)?
    } else {
        PBlock::with_terms(parse_terms(&cfg.terms)?, n_covariates, cfg.kernel_size, cfg.lhs_order)?
    };
    Ok(block)
}

#[derive(Debug, Serialize)]
struct TermReport {
    term: String,
    coefficient: f64,
}

#[derive(Debug, Serialize)]
struct ComponentReport {
    plan: ResamplePlan,
    fit: Option<FitReport>,
    terms: Vec<TermReport>,
    bias: f64,
}

impl ComponentReport {
    fn new(block: &PBlock, plan: ResamplePlan, fit: Option<FitReport>) -> Self {
        let terms = block
            .term_descriptions()
            .into_iter()
            .map(|(t, c)| TermReport { term: t.to_string(), coefficient: c })
            .collect();
        Self { plan, fit, terms, bias: block.bias() }
    }
}

#[derive(Debug, Serialize)]
struct GridCell {
    label: String,
    validation_relative_mse: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct ControllerSummary {
    parameters: usize,
    steps: usize,
    train_loss: f64,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    schema_version: u32,
    kind: &'static str,
    config: RunConfig,
    sizes: (usize, usize, usize),
    components: Vec<ComponentReport>,
    grid: Vec<GridCell>,
    selected: Option<usize>,
    controller: Option<ControllerSummary>,
    ablation: Option<AblationReport>,
}

struct Splits {
    n_train: usize,
    n_val: usize,
    training: TimeSeries,
}

fn splits(series: &TimeSeries, cfg: &RunConfig) -> Result<Splits, CliError> {
    let (n_train, n_val, _) = split_sizes(series.len(), cfg.split);
    if n_train < 2 {
        return Err(CliError::Input(format!("{} rows leave no training split", series.len())));
    }
    Ok(Splits { n_train, n_val, training: series.prefix(n_train)? })
}

fn validation_anchors(cfg: &RunConfig, sp: &Splits) -> Vec<usize> {
    cfg.ablation_config().anchors(sp.n_train - 1, sp.n_train + sp.n_val - 1)
}

fn test_anchors(cfg: &RunConfig, series: &TimeSeries) -> Vec<usize> {
    let (n_train, n_val, _) = split_sizes(series.len(), cfg.split);
    cfg.ablation_config().anchors((n_train + n_val).max(1) - 1, series.len() - 1)
}

fn validation_score<M: DerivativeModel + ?Sized>(model: &M, series: &TimeSeries, anchors: &[usize], cfg: &RunConfig) -> GridCell {
    let result = if anchors.is_empty() {
        Err(CliError::Input("validation split too short for the horizon".into()))
    } else {
        pooled_error(model, series, anchors, &cfg.rollout_config()).map_err(CliError::from)
    };
    match result {
        Ok(e) => GridCell { label: String::new(), validation_relative_mse: Some(e.relative_mse), error: None },
        Err(e) => GridCell { label: String::new(), validation_relative_mse: None, error: Some(e.to_string()) },
    }
}

fn selectable(cells: &[GridCell]) -> Option<usize> {
    let scores: Vec<f64> = cells.iter().map(|c| c.validation_relative_mse.unwrap_or(f64::INFINITY)).collect();
    scores.iter().any(|s| s.is_finite()).then(|| argmin(&scores))
}

fn hybrid_of<'a>(components: &'a [PBlock], plans: &[ResamplePlan], point: &HyperparamPoint) -> Result<HybridPde<&'a PBlock>, CliError> {
    let comps = point.plans.iter().map(|&p| &components[p]).collect();
    let pl = point.plans.iter().map(|&p| plans[p]).collect();
    Ok(HybridPde::new(comps, pl)?.set_weights(&point.eps)?)
}

fn point_label(point: &HyperparamPoint, plans: &[ResamplePlan]) -> String {
    point
        .plans
        .iter()
        .zip(&point.eps)
        .map(|(&p, e)| format!("{e}x(span {}, rate {})", plans[p].span, plans[p].rate))
        .collect::<Vec<_>>()
        .join(" + ")
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = args.run.resolve()?;
    let series = load(&args.data, &cfg)?;
    let sp = splits(&series, &cfg)?;
    let proto = template(&cfg, series.n_covariates())?;
    let tc = cfg.train_config();
    let names = series.names().to_vec();
    let sizes = split_sizes(series.len(), cfg.split);
    let full = ResamplePlan::full(sp.n_train);
    let mut report = TrainReport {
        schema_version: SCHEMA_VERSION,
        kind: "single",
        config: cfg.clone(),
        sizes,
        components: Vec::new(),
        grid: Vec::new(),
        selected: None,
        controller: None,
        ablation: None,
    };

    let model = if args.kind.meta {
        report.kind = "meta";
        let run = run_ablation(&series, &proto, &tc, &cfg.ablation_config())?;
        report.components = run
            .components
            .iter()
            .zip(&run.report.plans)
            .map(|(b, p)| ComponentReport::new(b, *p, None))
            .collect();
        report.controller = Some(ControllerSummary {
            parameters: run.controller.network.params.len(),
            steps: run.controller.steps_taken,
            train_loss: run.controller.train_loss,
        });
        report.ablation = Some(run.report);
        Model::Meta { components: run.components, controller: run.controller }
    } else if args.kind.hybrid {
        report.kind = "hybrid";
        let plans = grid_plans(sp.n_train, &cfg.span_fractions, &cfg.rates);
        let (hybrid, fits) = train_hybrid(&sp.training, &plans, &proto, &tc)?;
        let components = hybrid.components().to_vec();
        report.components = components.iter().zip(&plans).zip(fits).map(|((b, p), f)| ComponentReport::new(b, *p, Some(f))).collect();
        let grid = default_grid(plans.len());
        let anchors = validation_anchors(&cfg, &sp);
        for point in &grid {
            let h = hybrid_of(&components, &plans, point)?;
            let mut cell = validation_score(&h, &series, &anchors, &cfg);
            cell.label = point_label(point, &plans);
            report.grid.push(cell);
        }
        let best = selectable(&report.grid).unwrap_or(0);
        report.selected = Some(best);
        let point = &grid[best];
        let chosen = point.plans.iter().map(|&p| components[p].clone()).collect();
        let chosen_plans = point.plans.iter().map(|&p| plans[p]).collect();
        Model::Hybrid { hybrid: HybridPde::new(chosen, chosen_plans)?.set_weights(&point.eps)? }
    } else if args.kind.grid {
        report.kind = "grid";
        let cells: Vec<(f64, f64)> = cfg
            .grid_lambdas
            .iter()
            .flat_map(|&l| cfg.grid_learning_rates.iter().map(move |&r| (l, r)))
            .collect();
        let anchors = validation_anchors(&cfg, &sp);
        let fitted: Vec<(GridCell, Option<(PBlock, FitReport)>)> = cells
            .par_iter()
            .map(|&(lambda, lr)| {
                let label = format!("lambda={lambda:?} learning_rate={lr:?}");
                let mut block = proto.clone();
                let tcell = TrainConfig { lambda, learning_rate: lr, ..tc.clone() };
                match block.train(&sp.training, &tcell) {
                    Ok(fit) => {
                        let mut cell = validation_score(&block, &series, &anchors, &cfg);
                        cell.label = label;
                        (cell, Some((block, fit)))
                    }
                    Err(e) => (GridCell { label, validation_relative_mse: None, error: Some(e.to_string()) }, None),
                }
            })
            .collect();
        let (grid_cells, blocks): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
        report.grid = grid_cells;
        let best = selectable(&report.grid).or_else(|| blocks.iter().position(Option::is_some));
        let best = best.ok_or_else(|| CliError::Core(pdeforecast::Error::Numeric("every grid cell failed to train".into())))?;
        report.selected = Some(best);
        let (block, fit) = blocks[best].clone().ok_or_else(|| CliError::Core(pdeforecast::Error::Numeric("selected cell has no model".into())))?;
        report.components.push(ComponentReport::new(&block, full, Some(fit)));
        Model::Single { block }
    } else {
        let mut block = proto.clone();
        let fit = block.train(&sp.training, &tc)?;
        let mut cell = validation_score(&block, &series, &validation_anchors(&cfg, &sp), &cfg);
        cell.label = "single".into();
        report.grid.push(cell);
        report.components.push(ComponentReport::new(&block, full, Some(fit)));
        Model::Single { block }
    };

    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::file(&args.out_dir)(e.into()))?;
    let model_path = args.out_dir.join("model.json");
    let report_path = args.out_dir.join("report.json");
    save_json(&model_path, &ModelFile::new(names, model)).map_err(CliError::file(&model_path))?;
    save_json(&report_path, &report).map_err(CliError::file(&report_path))?;
    println!("{} model written to {}", report.kind, model_path.display());
    for c in &report.components {
        let terms: Vec<String> = c.terms.iter().map(|t| format!("{}={:.4}", t.term, t.coefficient)).collect();
        println!("  span {} rate {}: {} surviving terms [{}]", c.plan.span, c.plan.rate, c.terms.len(), terms.join(", "));
    }
    if let Some(a) = &report.ablation {
        print_ablation(a);
    }
    Ok(())
}

fn print_ablation(a: &AblationReport) {
    println!("{:<14} {:>14}", "model", "relative MSE");
    for (name, v) in a.rows() {
        println!("{name:<14} {v:>14.6e}");
    }
}

fn load_model_file(path: &Path) -> Result<ModelFile, CliError> {
    load_model(path).map_err(CliError::file(path))
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let mut cfg = args.run.resolve()?;
    if args.run.covariates.is_none() {
        cfg.covariates = CovariatePolicy::HoldLast;
    }
    let file = load_model_file(&args.model)?;
    let series = load(&args.data, &cfg)?;
    let anchor = args.anchor.unwrap_or(series.last_index());
    if anchor >= series.len() {
        return Err(CliError::Input(format!("anchor {anchor} outside {} rows", series.len())));
    }
    let history = series.prefix(anchor + 1)?;
    let model = file.resolve(&history)?;
    let forecast = rollout(&*model, &series, anchor, &cfg.rollout_config())?;
    let mut text = format!("time,{}\n", series.target_name());
    for (t, v) in forecast.times.iter().zip(&forecast.values) {
        text.push_str(&format!("{t},{v}\n"));
    }
    match &args.out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::file(p)(e.into()))?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn discover(args: &DiscoverArgs) -> Result<(), CliError> {
    let cfg = args.run.resolve()?;
    let file = load_model_file(&args.model)?;
    let series = load(&args.data, &cfg)?;
    file.check_series(&series)?;
    let (n_train, n_val, _) = split_sizes(series.len(), cfg.split);
    let validation = series.slice(n_train..n_train + n_val).ok().filter(|v| v.len() >= 8);
    let rank_on = validation.as_ref().unwrap_or(&series);
    let doc = match &file.model {
        Model::Single { block } => EquationDoc::from_block(block, rank_on)?,
        Model::Hybrid { hybrid } => EquationDoc::from_hybrid(hybrid, rank_on)?,
        Model::Meta { components, controller } => {
            let history = series.prefix((n_train + n_val).clamp(2, series.len()))?;
            let i = search_hyperparams(controller, &history, &controller.grid)?;
            EquationDoc::from_hybrid(&hybrid_of(components, &controller.plans, &controller.grid[i])?, rank_on)?
        }
    }
    .with_truncation(args.truncation);
    let notation = if args.ascii {
        Notation::Ascii
    } else if args.latex {
        Notation::Latex
    } else {
        Notation::Unicode
    };
    println!("{}", doc.render(notation, args.precision)?);
    if let Some(p) = &args.out {
        save_json(p, &doc).map_err(CliError::file(p))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    schema_version: u32,
    kind: &'static str,
    horizon: usize,
    mode: pdeforecast::forecaster::Mode,
    covariates: CovariatePolicy,
    anchors: Vec<usize>,
    test: Option<PooledError>,
    ablation: Option<AblationReport>,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = args.run.resolve()?;
    let series = load(&args.data, &cfg)?;
    let mut report = EvalReport {
        schema_version: SCHEMA_VERSION,
        kind: "ablation",
        horizon: cfg.horizon,
        mode: cfg.mode,
        covariates: cfg.covariates,
        anchors: Vec::new(),
        test: None,
        ablation: None,
    };
    if args.ablate {
        let proto = template(&cfg, series.n_covariates())?;
        let run = run_ablation(&series, &proto, &cfg.train_config(), &cfg.ablation_config())?;
        print_ablation(&run.report);
        report.anchors = run.report.test_anchors.clone();
        report.ablation = Some(run.report);
    } else {
        let path = args.model.as_ref().ok_or_else(|| CliError::Config("--model is required".into()))?;
        let file = load_model_file(path)?;
        file.check_series(&series)?;
        report.kind = match file.model {
            Model::Single { .. } => "single",
            Model::Hybrid { .. } => "hybrid",
            Model::Meta { .. } => "meta",
        };
        let anchors = test_anchors(&cfg, &series);
        if anchors.is_empty() {
            return Err(CliError::Input(format!("test split too short for horizon {}", cfg.horizon)));
        }
        let rc = cfg.rollout_config();
        let mut sums = Vec::with_capacity(anchors.len());
        for &a in &anchors {
            let history = series.prefix(a + 1)?;
            let model = file.resolve(&history)?;
            sums.extend(anchor_error_sums(&*model, &series, &[a], &rc)?);
        }
        let pooled = pool(&sums, cfg.horizon)?;
        println!("{} model: relative MSE {:.6e}, MSE {:.6e} over {} anchors", report.kind, pooled.relative_mse, pooled.mse, pooled.anchors);
        report.anchors = anchors;
        report.test = Some(pooled);
    }
    if let Some(p) = &args.out {
        save_json(p, &report).map_err(CliError::file(p))?;
    } else {
        print!("{}", to_json(&report)?);
    }
    Ok(())
}
