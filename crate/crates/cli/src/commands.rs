use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use monotone_pwl::data::{
    generate_synthetic, load_adult, synthetic_target, AdultOptions, Dataset, MissingPolicy,
    SyntheticSpec, Task, SYNTHETIC_DEFAULT_N,
};
use monotone_pwl::loss::{Direction, MonotoneSpec};
use monotone_pwl::metrics::{
    auc, conditioned_trends, mean_squared_error, monotonicity_metric, SweepGrid,
    DEFAULT_RESOLUTION, DEFAULT_TOLERANCE,
};
use monotone_pwl::model::{
    HiddenActivation, InitScheme, InitSpec, MlpModel, OutputActivation, DEFAULT_HIDDEN,
};
use monotone_pwl::trainer::{self, Regime, SwitchSchedule, TrainConfig, TrainError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::FileConfig;
use crate::error::{CliError, Result};
use crate::{ContourArgs, EvaluateArgs, GenerateArgs, PrepareAdultArgs, TrainArgs, TrendsArgs};

pub const DEFAULT_CONTOUR_RESOLUTION: usize = 50;
pub const DEFAULT_ANCHORS: usize = 10;

/// A feature named by column index or header name.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureRef {
    Index(usize),
    Name(String),
}

impl FromStr for FeatureRef {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s.is_empty() {
            return Err("empty feature".into());
        }
        Ok(s.parse()
            .map_or_else(|_| FeatureRef::Name(s.to_string()), FeatureRef::Index))
    }
}

impl FeatureRef {
    fn resolve(&self, data: &Dataset) -> Result<usize> {
        match self {
            FeatureRef::Index(i) if *i < data.dim() => Ok(*i),
            FeatureRef::Index(i) => Err(CliError::Validation(format!(
                "feature {i} out of range for {} columns",
                data.dim()
            ))),
            FeatureRef::Name(n) => data
                .feature_index(n)
                .ok_or_else(|| CliError::Validation(format!("no feature named `{n}`"))),
        }
    }
}

/// `feature:dir` with `dir` one of `+`/`-`; a bare feature means `+`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneArg {
    pub feature: FeatureRef,
    pub direction: Direction,
}

impl FromStr for MonotoneArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (feature, direction) = match s.rsplit_once(':') {
            Some((f, d)) => (f, d.parse()?),
            None => (s, Direction::NonDecreasing),
        };
        Ok(MonotoneArg {
            feature: feature.parse()?,
            direction,
        })
    }
}

fn monotone_spec(args: &[MonotoneArg], reference: &Dataset) -> Result<MonotoneSpec> {
    let features = args
        .iter()
        .map(|a| Ok((a.feature.resolve(reference)?, a.direction)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MonotoneSpec::from_data(reference, &features)?)
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| CliError::Validation(format!("missing required setting --{flag}")))
}

fn parse_setting<T: FromStr<Err = String>>(value: &str, flag: &str) -> Result<T> {
    value
        .parse()
        .map_err(|e| CliError::Validation(format!("--{flag}: {e}")))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(Dataset::load_csv(path)?)
}

fn load_model(path: &Path) -> Result<MlpModel> {
    MlpModel::load(path).map_err(|e| CliError::from(e).at(path))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        None => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    ensure_parent(path)?;
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(text.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn generate(args: &GenerateArgs, cfg: &FileConfig) -> Result<()> {
    let spec = SyntheticSpec {
        n: cfg.pick(args.n, "n", SYNTHETIC_DEFAULT_N)?,
        seed: cfg.pick(args.seed, "seed", 0)?,
        noise_std: cfg.pick(args.noise, "noise", 0.0)?,
    };
    let out = required(cfg.pick_opt(args.out.clone(), "out")?, "out")?;
    cfg.finish()?;
    if spec.n == 0 {
        return Err(CliError::Validation("--n must be at least 1".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(CliError::Validation(format!(
            "--noise {} must be >= 0",
            spec.noise_std
        )));
    }
    let data = generate_synthetic(&spec)?;
    ensure_parent(&out)?;
    data.save_csv(&out)
        .map_err(|e| CliError::from(e).at(&out))?;
    log::info!("wrote {} rows to {}", data.len(), out.display());
    Ok(())
}

pub fn prepare_adult(args: &PrepareAdultArgs, cfg: &FileConfig) -> Result<()> {
    let dir = required(cfg.pick_opt(args.data_dir.clone(), "data_dir")?, "data-dir")?;
    let missing = cfg.pick(args.missing.clone(), "missing", "category".to_string())?;
    let train_fraction = cfg.pick(args.train_fraction, "train_fraction", 0.8)?;
    let seed = cfg.pick(args.seed, "seed", 0)?;
    let out = required(cfg.pick_opt(args.out.clone(), "out")?, "out")?;
    cfg.finish()?;
    let mut options = AdultOptions {
        train_fraction,
        seed,
        ..AdultOptions::default()
    };
    options.missing = match missing.as_str() {
        "category" => MissingPolicy::AsCategory,
        "drop" => MissingPolicy::DropRows,
        other => {
            return Err(CliError::Validation(format!(
                "--missing `{other}`: expected category or drop"
            )))
        }
    };
    // The reference row counts only hold for the default encoding and split.
    if options.missing != MissingPolicy::AsCategory || train_fraction != 0.8 {
        options.expected_rows = None;
    }
    let data = load_adult(&dir.join("adult.data"), &dir.join("adult.test"), &options)?;
    for (name, split) in [
        ("train", &data.train),
        ("held_out", &data.held_out),
        ("test", &data.test),
    ] {
        let path = out.join(format!("{name}.csv"));
        ensure_parent(&path)?;
        split
            .save_csv(&path)
            .map_err(|e| CliError::from(e).at(&path))?;
    }
    println!(
        "adult: {} train / {} held-out / {} test rows, {} features",
        data.train.len(),
        data.held_out.len(),
        data.test.len(),
        data.train.dim()
    );
    Ok(())
}

fn output_for(task: Task) -> OutputActivation {
    match task {
        Task::Regression => OutputActivation::Identity,
        Task::Classification => OutputActivation::Sigmoid,
    }
}

pub fn train(args: &TrainArgs, cfg: &FileConfig) -> Result<()> {
    let data_path = required(cfg.pick_opt(args.data.clone(), "data")?, "data")?;
    let monotone: Vec<MonotoneArg> = cfg.pick_list(args.monotone.clone(), "monotone")?;
    let plain = cfg.pick_switch(args.plain, "plain")?;
    let hidden = cfg.pick_list(args.hidden.clone(), "hidden")?;
    let hidden = if hidden.is_empty() {
        DEFAULT_HIDDEN.to_vec()
    } else {
        hidden
    };
    let activation: HiddenActivation = parse_setting(
        &cfg.pick(
            args.activation.clone(),
            "activation",
            HiddenActivation::Tanh.to_string(),
        )?,
        "activation",
    )?;
    let scheme: InitScheme = parse_setting(
        &cfg.pick(
            args.init.clone(),
            "init",
            InitScheme::UniformGlorot.to_string(),
        )?,
        "init",
    )?;
    let seed = cfg.pick(args.seed, "seed", 0)?;
    let defaults = TrainConfig::default();
    let switch_frequency = cfg.pick_opt(args.switch_frequency, "switch_frequency")?;
    let penalty_frequency = cfg.pick_opt(args.penalty_frequency, "penalty_frequency")?;
    let regime = match (switch_frequency, penalty_frequency) {
        (Some(e), p) => Regime::Switching(SwitchSchedule {
            empirical_steps: e,
            penalty_steps: p.unwrap_or(e),
        }),
        (None, Some(_)) => {
            return Err(CliError::Validation(
                "--penalty-frequency needs --switch-frequency".into(),
            ))
        }
        (None, None) => Regime::Weighted,
    };
    let config = TrainConfig {
        learning_rate: cfg.pick(args.learning_rate, "learning_rate", defaults.learning_rate)?,
        batch_size: cfg.pick(args.batch_size, "batch_size", defaults.batch_size)?,
        epochs: cfg.pick(args.epochs, "epochs", defaults.epochs)?,
        penalty_weight: cfg.pick(
            args.penalty_weight,
            "penalty_weight",
            defaults.penalty_weight,
        )?,
        regime,
        seed,
        shuffle: !cfg.pick_switch(args.no_shuffle, "no_shuffle")?,
        probe_size: cfg.pick(args.probe_size, "probe_size", defaults.probe_size)?,
        metric_resolution: cfg.pick(args.resolution, "resolution", defaults.metric_resolution)?,
    };
    let out = required(cfg.pick_opt(args.out.clone(), "out")?, "out")?;
    let log_path = cfg
        .pick_opt(args.log.clone(), "log")?
        .unwrap_or_else(|| sibling(&out, "log.csv"));
    cfg.finish()?;
    config.validate()?;

    let data = load_dataset(&data_path)?;
    let spec = if plain {
        if !monotone.is_empty() {
            log::info!("--plain: ignoring {} monotone features", monotone.len());
        }
        MonotoneSpec::default()
    } else {
        monotone_spec(&monotone, &data)?
    };
    let mut dims = vec![data.dim()];
    dims.extend(&hidden);
    dims.push(1);
    let model = MlpModel::init(
        &dims,
        activation,
        output_for(data.task()),
        InitSpec { scheme, seed },
    )?;
    log::info!(
        "training {:?} on {} rows x {} features, {} monotone",
        dims,
        data.len(),
        data.dim(),
        spec.len()
    );
    match trainer::train(model, &data, &spec, &config) {
        Ok((model, log)) => {
            ensure_parent(&out)?;
            model.save(&out).map_err(|e| CliError::from(e).at(&out))?;
            write_log(&log_path, &log)?;
            log::info!(
                "trained in {:.1}s ({:.1}s including metrics)",
                log.training_seconds(),
                log.total_seconds
            );
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            step,
            reason,
            last_finite,
            log,
        }) => {
            let fallback = sibling(&out, "last-finite");
            ensure_parent(&fallback)?;
            last_finite
                .save(&fallback)
                .map_err(|e| CliError::from(e).at(&fallback))?;
            write_log(&log_path, &log)?;
            Err(CliError::Diverged(format!(
                "training diverged at epoch {epoch}, step {step}: {reason}; last finite model saved to {}",
                fallback.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn write_log(path: &Path, log: &trainer::TrainLog) -> Result<()> {
    let mut out = create(path)?;
    log.write_csv(&mut out)
        .and_then(|()| out.flush())
        .map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Serialize)]
struct FeatureReport {
    feature: usize,
    name: String,
    direction: String,
    mk: f64,
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    task: &'static str,
    rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mse: Option<f64>,
    monotonicity: Vec<FeatureReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_mk: Option<f64>,
    resolution: usize,
    tolerance: f64,
    seconds: f64,
}

pub fn evaluate(args: &EvaluateArgs, cfg: &FileConfig) -> Result<()> {
    let model_path = required(cfg.pick_opt(args.model.clone(), "model")?, "model")?;
    let data_path = required(cfg.pick_opt(args.data.clone(), "data")?, "data")?;
    let monotone: Vec<MonotoneArg> = cfg.pick_list(args.monotone.clone(), "monotone")?;
    let reference_path = cfg.pick_opt(args.reference.clone(), "reference")?;
    let resolution = cfg.pick(args.resolution, "resolution", DEFAULT_RESOLUTION)?;
    let tolerance = cfg.pick(args.tolerance, "tolerance", DEFAULT_TOLERANCE)?;
    let csv_dir = cfg.pick_opt(args.csv_dir.clone(), "csv_dir")?;
    let _seed: u64 = cfg.pick(args.seed, "seed", 0)?;
    let out = cfg.pick_opt(args.out.clone(), "out")?;
    cfg.finish()?;

    let started = Instant::now();
    let model = load_model(&model_path)?;
    let data = load_dataset(&data_path)?;
    if model.input_dim() != data.dim() {
        return Err(CliError::Validation(format!(
            "model expects {} features, dataset has {}",
            model.input_dim(),
            data.dim()
        )));
    }
    if model.output_activation() != output_for(data.task()) {
        return Err(CliError::Validation(format!(
            "task mismatch: {} output model on {:?} data",
            model.output_activation(),
            data.task()
        )));
    }
    let reference = match &reference_path {
        Some(p) => load_dataset(p)?,
        None => data.clone(),
    };
    let spec = monotone_spec(&monotone, &reference)?;
    let scores: Vec<f64> = data.rows().map(|x| model.score(x)).collect();
    let (task, auc_value, mse) = match data.task() {
        Task::Classification => ("classification", Some(auc(&scores, data.labels())?), None),
        Task::Regression => (
            "regression",
            None,
            Some(mean_squared_error(&scores, data.labels())?),
        ),
    };
    let metric = if spec.is_empty() {
        None
    } else {
        Some(monotonicity_metric(
            &model,
            data.rows(),
            &spec,
            resolution,
            tolerance,
        )?)
    };
    let monotonicity = spec
        .entries()
        .iter()
        .zip(metric.iter().flat_map(|m| &m.features))
        .map(|(e, f)| FeatureReport {
            feature: e.index,
            name: data.feature_names()[e.index].clone(),
            direction: e.direction.to_string(),
            mk: f.mk,
        })
        .collect();
    let report = EvaluationReport {
        task,
        rows: data.len(),
        auc: auc_value,
        mse,
        monotonicity,
        mean_mk: metric.as_ref().map(|m| m.mean_mk()),
        resolution,
        tolerance,
        seconds: started.elapsed().as_secs_f64(),
    };
    if let (Some(dir), Some(metric)) = (&csv_dir, &metric) {
        let mut mk = String::from("feature,mk\n");
        for f in &metric.features {
            writeln!(mk, "{},{}", f.feature, f.mk).unwrap();
            let mut deltas = String::from("sample_id,delta\n");
            for (i, d) in f.deltas.iter().enumerate() {
                writeln!(deltas, "{i},{d}").unwrap();
            }
            write_text(&dir.join(format!("delta_{}.csv", f.feature)), &deltas)?;
        }
        write_text(&dir.join("mk.csv"), &mk)?;
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match out {
        Some(path) => write_text(&path, &json),
        None => io::stdout()
            .write_all(json.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}

pub fn export_contour(args: &ContourArgs, cfg: &FileConfig) -> Result<()> {
    let model_path = cfg.pick_opt(args.model.clone(), "model")?;
    let target = cfg.pick_switch(args.target, "target")?;
    let resolution = cfg.pick(args.resolution, "resolution", DEFAULT_CONTOUR_RESOLUTION)?;
    let _seed: u64 = cfg.pick(args.seed, "seed", 0)?;
    let out = required(cfg.pick_opt(args.out.clone(), "out")?, "out")?;
    cfg.finish()?;
    if resolution < 2 {
        return Err(CliError::Validation(
            "--resolution must be at least 2".into(),
        ));
    }
    let surface: Box<dyn Fn(f64, f64) -> f64> = match (target, model_path) {
        (true, None) => Box::new(synthetic_target),
        (false, Some(path)) => {
            let model = load_model(&path)?;
            if model.input_dim() != 2 {
                return Err(CliError::Validation(format!(
                    "contours need a 2-input model, got {} inputs",
                    model.input_dim()
                )));
            }
            Box::new(move |x, y| model.forward(&[x, y]).expect("2-d input").output)
        }
        (true, Some(_)) => {
            return Err(CliError::Validation(
                "--target and --model are exclusive".into(),
            ))
        }
        (false, None) => {
            return Err(CliError::Validation(
                "one of --model or --target is required".into(),
            ))
        }
    };
    let mut text = String::from("x,y,f\n");
    let step = 1.0 / (resolution - 1) as f64;
    for i in 0..resolution {
        let x = i as f64 * step;
        for j in 0..resolution {
            let y = j as f64 * step;
            writeln!(text, "{x},{y},{}", surface(x, y)).unwrap();
        }
    }
    write_text(&out, &text)
}

pub fn export_trends(args: &TrendsArgs, cfg: &FileConfig) -> Result<()> {
    let model_path = required(cfg.pick_opt(args.model.clone(), "model")?, "model")?;
    let data_path = required(cfg.pick_opt(args.data.clone(), "data")?, "data")?;
    let feature: FeatureRef = parse_setting(
        &required(cfg.pick_opt(args.feature.clone(), "feature")?, "feature")?,
        "feature",
    )?;
    let anchors = cfg.pick(args.anchors, "anchors", DEFAULT_ANCHORS)?;
    let resolution = cfg.pick(args.resolution, "resolution", DEFAULT_RESOLUTION)?;
    let reference_path = cfg.pick_opt(args.reference.clone(), "reference")?;
    let seed = cfg.pick(args.seed, "seed", 0)?;
    let out = required(cfg.pick_opt(args.out.clone(), "out")?, "out")?;
    cfg.finish()?;

    let model = load_model(&model_path)?;
    let data = load_dataset(&data_path)?;
    if model.input_dim() != data.dim() {
        return Err(CliError::Validation(format!(
            "model expects {} features, dataset has {}",
            model.input_dim(),
            data.dim()
        )));
    }
    if anchors == 0 || anchors > data.len() {
        return Err(CliError::Validation(format!(
            "--anchors must be between 1 and {}",
            data.len()
        )));
    }
    let k = feature.resolve(&data)?;
    let reference = match &reference_path {
        Some(p) => load_dataset(p)?,
        None => data.clone(),
    };
    let (lo, hi) = reference
        .column_range(k)
        .ok_or_else(|| CliError::Validation("empty reference dataset".into()))?;
    let grid = SweepGrid::new(k, lo, hi, resolution)?;
    let ids = anchor_ids(data.len(), anchors, seed);
    let rows: Vec<&[f64]> = ids.iter().map(|&i| data.row(i)).collect();
    let curves = conditioned_trends(&model, &rows, &grid)?;
    let mut text = String::from("sample_id,feature,grid_value,score\n");
    for curve in &curves {
        for (v, s) in &curve.points {
            writeln!(text, "{},{k},{v},{s}", ids[curve.anchor]).unwrap();
        }
    }
    write_text(&out, &text)
}

/// `count` distinct row indices, chosen by `seed` and listed in ascending order.
pub fn anchor_ids(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(count);
    ids.sort_unstable();
    ids
}
