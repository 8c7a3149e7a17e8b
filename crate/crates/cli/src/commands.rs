use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use tumorseg::data_pipeline::{self, Partition};
use tumorseg::evaluation_report::{self, EvalError};
use tumorseg::preprocess::{PreprocessConfig, NUM_CLASSES};
use tumorseg::trainer::{EpochTiming, Hyperparameters, Trainer};
use tumorseg::unet::{self, ModelError, UNet, UNetConfig};
use tumorseg::volume_io::{self, CaseRef, VolumeError};

use crate::config::{self, Settings};
use crate::{plot, CliError};

pub const RESOLVED_CONFIG: &str = "config.resolved.cfg";
pub const SPLIT_FILE: &str = "split.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TEXT: &str = "report.txt";

pub fn run(name: &str, matches: &ArgMatches) -> Result<(), CliError> {
    let (command, _) = config::COMMANDS
        .iter()
        .find(|(c, _)| *c == name)
        .ok_or_else(|| CliError::Usage(format!("unknown command '{name}'")))?;
    let settings = Settings::resolve(command, matches)?;
    match *command {
        config::TRAIN => train(&settings),
        config::EVALUATE => evaluate(&settings),
        config::PREDICT => predict(&settings),
        config::PLOT => plot::run(&settings.paths("csv")?, &settings.path("output-dir")?),
        _ => make_fixtures(&settings),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn single_root(settings: &Settings) -> Result<PathBuf, CliError> {
    let mut roots = settings.paths("data-root")?;
    match roots.len() {
        1 => Ok(roots.remove(0)),
        0 => Err(CliError::Usage("--data-root is required".into())),
        n => Err(CliError::Usage(format!("expected one --data-root, got {n}"))),
    }
}

fn preprocess_config(settings: &Settings, size: (usize, usize)) -> Result<PreprocessConfig, CliError> {
    Ok(PreprocessConfig {
        size,
        window: settings.window()?,
        ..PreprocessConfig::default()
    })
}

fn make_fixtures(settings: &Settings) -> Result<(), CliError> {
    let root = single_root(settings)?;
    let seed = settings.u64("seed")?;
    let shape = settings.size3("fixture-shape")?;
    create_dir(&root)?;
    for i in 0..settings.usize("cases")? as u64 {
        let case = volume_io::generate_synthetic_case(seed + i, &root, shape)?;
        println!("{}", case.root_path.display());
    }
    Ok(())
}

fn train(settings: &Settings) -> Result<(), CliError> {
    let root = single_root(settings)?;
    let out = settings.path("output-dir")?;
    let seed = settings.u64("seed")?;
    let preprocess = preprocess_config(settings, settings.size2("input-size")?)?;
    let hp = Hyperparameters {
        epochs: settings.usize("epochs")?,
        batch_size: settings.usize("batch-size")?,
        learning_rate: settings.f64("learning-rate")?,
        early_stop_patience: settings.usize("patience")?,
        early_stop_min_delta: settings.f64("min-delta")?,
        monitor: settings.string("monitor")?,
        seed,
        ..Hyperparameters::default()
    };
    let model_config = UNetConfig {
        in_channels: preprocess.modalities.len(),
        num_classes: NUM_CLASSES,
        base_features: settings.usize("base-features")?,
        depth: settings.usize("depth")?,
        input_size: preprocess.size,
    };
    let record_time = settings.bool("record-time")?;
    hp.validate()?;
    model_config.validate()?;

    let cases = volume_io::discover_cases(&root)?;
    let split = data_pipeline::split_cases(&cases, settings.split_ratios()?, seed)?;
    create_dir(&out)?;
    write_file(&out.join(RESOLVED_CONFIG), &settings.to_config_text())?;
    let mut split_text = String::from("partition,case_id\n");
    for p in [Partition::Train, Partition::Validation, Partition::Test] {
        for c in split.partition(p) {
            let _ = writeln!(split_text, "{},{}", p.name(), c.case_id);
        }
    }
    write_file(&out.join(SPLIT_FILE), &split_text)?;
    let (n_train, n_val, n_test) = split.sizes();
    log::info!("{} cases: {n_train} train, {n_val} validation, {n_test} test", cases.len());

    let mut model = UNet::new(model_config, seed)?;
    let mut trainer = Trainer::new(hp.clone(), preprocess, &out);
    if !record_time {
        trainer.timing = EpochTiming::Fixed(0.0);
    }
    let history = trainer.run(&mut model, &split)?;
    let series = history.series(&hp.monitor).map_err(tumorseg::Error::from)?;
    let lower = tumorseg::trainer::monitor_direction(&hp.monitor).map_err(tumorseg::Error::from)?;
    let best = series
        .iter()
        .copied()
        .reduce(|a, b| if (b < a) == lower { b } else { a })
        .unwrap_or(f64::NAN);
    println!(
        "trained {} epochs ({}); best {} = {best:.6}; outputs in {}",
        history.rows.len(),
        history.stop_reason.name(),
        hp.monitor,
        out.display()
    );
    Ok(())
}

fn load_model(settings: &Settings) -> Result<UNet, CliError> {
    let model = unet::load_checkpoint(&settings.path("checkpoint")?)?;
    let channels = PreprocessConfig::default().modalities.len();
    if model.config().in_channels != channels {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{channels} input channels (FLAIR, T1CE)"),
            found: format!("checkpoint with {} input channels", model.config().in_channels),
        }
        .into());
    }
    Ok(model)
}

fn dataset_label(root: &Path) -> String {
    root.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string())
}

fn evaluate(settings: &Settings) -> Result<(), CliError> {
    let model = load_model(settings)?;
    let roots = settings.paths("data-root")?;
    if roots.is_empty() {
        return Err(CliError::Usage("--data-root is required".into()));
    }
    let out = settings.path("output-dir")?;
    let preprocess = preprocess_config(settings, model.config().input_size)?;
    let partition = settings.partition()?;
    let mode = settings.decision_mode()?;
    let batch_size = settings.usize("batch-size")?;
    let ratios = settings.split_ratios()?;
    let seed = settings.u64("seed")?;

    let mut reports = Vec::new();
    for root in &roots {
        let cases = volume_io::discover_cases(root)?;
        let split = data_pipeline::split_cases(&cases, ratios, seed)?;
        let selected = split.partition(partition);
        if selected.is_empty() {
            return Err(EvalError::NoCases.into());
        }
        reports.push(evaluation_report::evaluate(
            &model,
            selected,
            &preprocess,
            &dataset_label(root),
            partition,
            mode,
            batch_size,
        )?);
    }
    let table = evaluation_report::compare_reports(&reports)?;
    let mut text = table.render_text();
    text.push('\n');
    for r in &reports {
        text.push_str(&evaluation_report::render_report(r));
    }
    text.push_str("metrics are pooled over all pixels of all slices; * marks the best entry per column\n");
    print!("{text}");
    create_dir(&out)?;
    write_file(&out.join(REPORT_TEXT), &text)?;
    write_file(&out.join(REPORT_CSV), &table.to_csv())?;
    Ok(())
}

fn predict(settings: &Settings) -> Result<(), CliError> {
    let model = load_model(settings)?;
    let case_dir = settings.path("case-dir")?;
    let out = settings.path("output-dir")?;
    if !case_dir.is_dir() {
        return Err(VolumeError::MissingRoot(case_dir).into());
    }
    let case: CaseRef = CaseRef::from_dir(&case_dir)?.ok_or(VolumeError::EmptyDataset(case_dir.clone()))?;
    let preprocess = preprocess_config(settings, model.config().input_size)?;
    let labels = evaluation_report::predict_case(&model, &case, &preprocess)?;
    let path = evaluation_report::write_prediction(&out, &case.case_id, &labels)?;
    println!("wrote {}", path.display());
    for (label, count) in evaluation_report::label_counts(&labels) {
        println!("label {label}: {count} voxels");
    }
    Ok(())
}
