use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use siid_core::formats::{self, FormatError};
use siid_core::metrics::eval::{constant_albedo_baseline, identity_baseline};
use siid_core::metrics::{
    assemble_report, evaluate_dataset, parse_report, radar_svg, report_to_csv, EvalOptions, MetricError, Prediction,
};
use siid_core::net::{self, infer_image, NetConfig, NetError, NetworkWeights, WeightsError};
use siid_core::synth::{load_dataset, make_dataset, read_manifest, DatasetError, DatasetParams};
use siid_core::tensor::Tensor;
use siid_core::train::{self, save_loss_log, LossWeights, TrainError, TrainSchedule};

use crate::config::{Baseline, RunConfig, CONFIG_FILE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Params(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Net(NetError::Config(_)) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn data_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn format_err(path: &Path) -> impl FnOnce(FormatError) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(data_err(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(data_err(path))
}

fn write_config(config: &RunConfig) -> Result<(), CliError> {
    create_dir(config.out())?;
    write_file(&config.out().join(CONFIG_FILE), config.to_json() + "\n")
}

pub fn run(config: RunConfig) -> Result<(), CliError> {
    match &config {
        RunConfig::Generate { out, params } => generate(&config, out, params),
        RunConfig::Train {
            data,
            out,
            net,
            losses,
            schedule,
        } => train(&config, data, out, *net, losses, schedule),
        RunConfig::Decompose {
            weights,
            baseline,
            dataset,
            images,
            out,
        } => {
            let method = match (weights, baseline) {
                (Some(w), None) => Method::Net(Box::new(net::load_weights(w).map_err(|e| weights_err(w, e))?)),
                (None, Some(b)) => Method::Baseline(*b),
                _ => return Err(CliError::Usage("give exactly one of --weights and --baseline".into())),
            };
            if let Some(ds) = dataset {
                decompose_dataset(&config, &method, ds, out)
            } else if !images.is_empty() {
                decompose_images(&config, &method, images, out)
            } else {
                Err(CliError::Usage(
                    "nothing to decompose: give image files or --dataset".into(),
                ))
            }
        }
        RunConfig::Eval {
            dataset,
            pred,
            out,
            options,
        } => eval(&config, dataset, pred, out, options),
    }
}

pub fn replay(path: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(data_err(path))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    run(match out {
        Some(dir) => config.with_out(dir),
        None => config,
    })
}

fn generate(config: &RunConfig, out: &Path, params: &DatasetParams) -> Result<(), CliError> {
    params.validate()?;
    let manifest = make_dataset(params, out)?;
    write_config(config)?;
    println!(
        "{} sequences, {} images, {} variants discarded, {} views dropped",
        manifest.sequences.len(),
        manifest.variant_count(),
        manifest.discard_count(),
        manifest.dropped_views.len()
    );
    Ok(())
}

fn train(
    config: &RunConfig,
    data: &Path,
    out: &Path,
    net: NetConfig,
    losses: &LossWeights,
    schedule: &TrainSchedule,
) -> Result<(), CliError> {
    net.validate()?;
    losses.validate().map_err(CliError::Usage)?;
    schedule.validate().map_err(CliError::Usage)?;
    let ds = load_dataset(data)?;
    create_dir(out)?;
    write_config(config)?;
    let every = (schedule.total_iters / 20).max(1);
    let result = train::train(&ds.training_sequences(), net, losses, schedule, |row| {
        if row.iter % every == 0 || row.iter + 1 == schedule.total_iters {
            log::info!(
                "iter {:>6}  lr {:.2e}  mu {:.3}  total {:.5}  L_a {:.5}  L_r {:.5}",
                row.iter,
                row.lr,
                row.mu,
                row.total,
                row.l_a,
                row.l_r
            );
        }
    })?;
    let weights_path = out.join("weights.bin");
    net::save_weights(&result.weights, &weights_path).map_err(|e| weights_err(&weights_path, e))?;
    let log_path = out.join("loss_log.csv");
    save_loss_log(&result.log, &log_path).map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    println!(
        "trained {} iterations; weights in {}",
        schedule.total_iters,
        weights_path.display()
    );
    Ok(())
}

fn weights_err(path: &Path, e: WeightsError) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

enum Method {
    Net(Box<NetworkWeights>),
    Baseline(Baseline),
}

impl Method {
    fn predict(&self, image: &Tensor, mask: Option<&Tensor>) -> Result<Prediction, CliError> {
        Ok(match self {
            Method::Net(w) => {
                let (albedo, shading) = infer_image(w, image)?;
                Prediction { albedo, shading }
            }
            Method::Baseline(Baseline::Identity) => identity_baseline(image),
            Method::Baseline(Baseline::Constant) => constant_albedo_baseline(image, mask),
            Method::Baseline(Baseline::GroundTruth) => {
                return Err(CliError::Usage("the ground-truth baseline needs --dataset".into()))
            }
        })
    }
}

fn write_prediction(pred: &Prediction, dir: &Path, stem: &str) -> Result<(), CliError> {
    let a = dir.join(format!("{stem}_albedo.png"));
    formats::write_rgb(&a, &pred.albedo).map_err(format_err(&a))?;
    let s = dir.join(format!("{stem}_shading.pfm"));
    formats::write_pfm(&s, &pred.shading).map_err(format_err(&s))
}

fn stem(path: &Path) -> Result<String, CliError> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Usage(format!("{}: no file name", path.display())))
}

fn decompose_images(config: &RunConfig, method: &Method, images: &[PathBuf], out: &Path) -> Result<(), CliError> {
    write_config(config)?;
    let mut seen = BTreeSet::new();
    for path in images {
        let name = stem(path)?;
        if !seen.insert(name.clone()) {
            return Err(CliError::Usage(format!("two inputs share the file stem {name:?}")));
        }
        let image = formats::read_rgb(path).map_err(format_err(path))?;
        write_prediction(&method.predict(&image, None)?, out, &name)?;
    }
    println!("decomposed {} images into {}", images.len(), out.display());
    Ok(())
}

fn decompose_dataset(config: &RunConfig, method: &Method, root: &Path, out: &Path) -> Result<(), CliError> {
    let manifest = read_manifest(root)?;
    write_config(config)?;
    let mut count = 0;
    for seq in &manifest.sequences {
        let dir = out.join(&seq.id);
        create_dir(&dir)?;
        let mask_path = root.join(&seq.mask);
        let mask = formats::read_mask(&mask_path).map_err(format_err(&mask_path))?;
        let albedo = match method {
            Method::Baseline(Baseline::GroundTruth) => {
                let p = root.join(&seq.albedo);
                Some(formats::read_rgb(&p).map_err(format_err(&p))?)
            }
            _ => None,
        };
        for v in &seq.variants {
            let rel = v.image.as_deref().expect("manifest validated");
            let path = root.join(rel);
            let pred = match &albedo {
                Some(a) => {
                    let p = root.join(v.shading.as_deref().expect("manifest validated"));
                    Prediction {
                        albedo: a.clone(),
                        shading: formats::read_pfm(&p).map_err(format_err(&p))?,
                    }
                }
                None => {
                    let image = formats::read_rgb(&path).map_err(format_err(&path))?;
                    method.predict(&image, Some(&mask))?
                }
            };
            write_prediction(&pred, &dir, &stem(&path)?)?;
            count += 1;
        }
    }
    println!("decomposed {count} images into {}", out.display());
    Ok(())
}

fn collect_predictions(dir: &Path, root: &Path, found: &mut BTreeSet<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_predictions(&path, root, found)?;
        } else if path.to_str().is_some_and(|p| p.ends_with("_albedo.png")) {
            found.insert(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
        }
    }
    Ok(())
}

fn eval(config: &RunConfig, dataset: &Path, pred: &Path, out: &Path, opts: &EvalOptions) -> Result<(), CliError> {
    if opts.metrics.is_empty() {
        return Err(CliError::Usage("no metrics requested".into()));
    }
    let ds = load_dataset(dataset)?;
    if !pred.is_dir() {
        return Err(CliError::Data(format!("{}: not a directory", pred.display())));
    }
    let mut unmatched = BTreeSet::new();
    collect_predictions(pred, pred, &mut unmatched).map_err(data_err(pred))?;
    let mut failure = None;
    let scores = evaluate_dataset(&ds, opts, |seq, v| {
        let image = Path::new(seq.entry.variants[v].image.as_deref()?);
        let base = image.with_extension("");
        let name = base.to_str()?;
        let a = PathBuf::from(format!("{name}_albedo.png"));
        if !unmatched.remove(&a) {
            return None;
        }
        let loaded = formats::read_rgb(pred.join(&a))
            .and_then(|albedo| Ok((albedo, formats::read_pfm(pred.join(format!("{name}_shading.pfm")))?)));
        match loaded {
            Ok((albedo, shading)) => Some(Prediction { albedo, shading }),
            Err(e) => {
                failure.get_or_insert_with(|| CliError::Data(format!("{}: {e}", pred.join(&a).display())));
                None
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    for extra in &unmatched {
        log::warn!("{}: no matching dataset image; ignored", extra.display());
    }
    let report = assemble_report(scores?);
    create_dir(out)?;
    write_config(config)?;
    let csv = report_to_csv(&report);
    write_file(&out.join("report.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn chart(reports: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut series = Vec::new();
    for path in reports {
        let text = fs::read_to_string(path).map_err(data_err(path))?;
        let report = parse_report(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let values = report
            .chart_values()
            .ok_or_else(|| CliError::Data(format!("{}: report lacks one of the five chart axes", path.display())))?;
        series.push((stem(path)?, values));
    }
    let svg = radar_svg(&series);
    match out {
        Some(p) => write_file(p, svg),
        None => {
            print!("{svg}");
            Ok(())
        }
    }
}
