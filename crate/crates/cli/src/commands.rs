use crate::config::RunConfig;
use crate::data::{frames_of, load_dataset, load_stream};
use crate::error::{CliError, CliResult};
use snn_core::checkpoint::{peek_precision, Checkpoint};
use snn_core::compress::compression_ratio;
use snn_core::network::{LayerParams, Model};
use snn_core::neuron::sigmoid;
use snn_core::train::{
    evaluate, grad_check, init_model, prepare_samples, EpochStats, GradCheckOptions, Trainer,
};
use snn_core::Real;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn from_bits(bits: u32) -> CliResult<Self> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(CliError::Config(format!("precision must be 32 or 64, got {other}"))),
        }
    }
}

fn recordings(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| CliError::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().is_some_and(|x| {
                    x.eq_ignore_ascii_case("bin") || x.eq_ignore_ascii_case("csv")
                })
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Compresses one recording or every `.bin`/`.csv` file of a folder into
/// `<output>/<stem>.frames` and returns a text summary.
pub fn compress_files(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    baseline_frames: Option<f64>,
) -> CliResult<String> {
    let files = recordings(input)?;
    fs::create_dir_all(output).map_err(|e| CliError::io(output, e))?;
    let mut report = String::new();
    let t = cfg.model.time_steps;
    let _ = writeln!(report, "T\t{t}\nN_r\t{}", cfg.model.resolution);
    for path in &files {
        let stream = load_stream(path, cfg.dataset.width, cfg.dataset.height)?;
        let frames = frames_of(&stream, cfg)?;
        let stem = path.file_stem().map_or_else(|| "sample".into(), |s| s.to_string_lossy().into_owned());
        let dest = output.join(format!("{stem}.frames"));
        fs::write(&dest, frames.to_bytes()).map_err(|e| CliError::io(&dest, e))?;
        let _ = writeln!(
            report,
            "{}\tevents {}\tshape {:?}\tdensity {:.6}",
            path.display(),
            stream.len(),
            frames.shape(),
            frames.nonzero_density()
        );
    }
    if let Some(b) = baseline_frames {
        let ratio = compression_ratio(b, t as f64)?;
        let _ = writeln!(report, "compression_ratio\t{ratio:.4}%");
    }
    Ok(report)
}

fn write_checkpoint<F: Real>(path: &Path, ckpt: &Checkpoint<F>) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()?).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn read_checkpoint<F: Real>(path: &Path) -> CliResult<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Trains until `optim.epochs` epochs are complete, writing the checkpoint
/// after every epoch (and once up front when there is nothing to do).
/// Log lines go to `echo` and, if given, to the log file, which is
/// truncated on a fresh run and appended to on resume.
pub fn train<F: Real>(
    cfg: &RunConfig,
    out: &Path,
    log: Option<&Path>,
    resume: Option<&Path>,
    echo: &mut dyn Write,
) -> CliResult<Vec<EpochStats>> {
    let spec = cfg.model_spec()?;
    let opts = cfg.train_options();
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = read_checkpoint::<F>(path)?;
            if ckpt.model.spec != spec {
                return Err(CliError::Config(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            let seed = ckpt.model.seed;
            let mut trainer = Trainer::new(ckpt.model, snn_core::train::TrainOptions { seed, ..opts })?;
            if let Some(adam) = ckpt.optimizer {
                trainer.adam = adam;
            }
            trainer.epoch = ckpt.epoch;
            trainer
        }
        None => Trainer::new(init_model::<F>(spec, opts.seed)?, opts)?,
    };
    let data = load_dataset(cfg)?;
    if data.classes != trainer.model.classes() {
        return Err(CliError::Config(format!(
            "dataset has {} classes, architecture votes over {}",
            data.classes,
            trainer.model.classes()
        )));
    }
    let train_set = prepare_samples(&trainer.model, &data.train)?;
    let test_set = prepare_samples(&trainer.model, &data.test)?;
    let mut log_file = match log {
        Some(p) => Some(
            fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(resume.is_some())
                .truncate(resume.is_none())
                .open(p)
                .map_err(|e| CliError::io(p, e))?,
        ),
        None => None,
    };
    let save = |t: &Trainer<F>| {
        write_checkpoint(
            out,
            &Checkpoint {
                model: t.model.clone(),
                epoch: t.epoch,
                optimizer: Some(t.adam.clone()),
            },
        )
    };
    save(&trainer)?;
    let mut history = Vec::new();
    while trainer.epoch < cfg.optim.epochs {
        let stats = trainer.run_epoch(&train_set, &test_set)?;
        if !stats.loss.is_finite() {
            return Err(CliError::Numerical(format!("loss became {} in epoch {}", stats.loss, stats.epoch)));
        }
        let line = stats.log_line();
        writeln!(echo, "{line}").map_err(|e| CliError::Data(e.to_string()))?;
        if let (Some(f), Some(p)) = (log_file.as_mut(), log) {
            writeln!(f, "{line}").map_err(|e| CliError::io(p, e))?;
        }
        save(&trainer)?;
        history.push(stats);
    }
    Ok(history)
}

fn eval_typed<F: Real>(cfg: &RunConfig, ckpt: &Path) -> CliResult<String> {
    let model = read_checkpoint::<F>(ckpt)?.model;
    let data = load_dataset(cfg)?;
    let test = prepare_samples(&model, &data.test)?;
    let report = evaluate(&model, &test)?;
    let mut out = format!("samples\t{}\naccuracy\t{:.4}\nconfusion (rows: true class, columns: predicted)\n", test.len(), report.accuracy);
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "{}", cells.join("\t"));
    }
    Ok(out)
}

/// Accuracy and confusion counts of a checkpoint on the test split.
pub fn eval(cfg: &RunConfig, ckpt: &Path) -> CliResult<String> {
    let bytes = fs::read(ckpt).map_err(|e| CliError::io(ckpt, e))?;
    match peek_precision(&bytes)? {
        32 => eval_typed::<f32>(cfg, ckpt),
        _ => eval_typed::<f64>(cfg, ckpt),
    }
}

/// Gradient check of the configured architecture on the first training
/// sample, in 64-bit. Returns the report and whether every block passed.
pub fn gradcheck(cfg: &RunConfig, fault_block: Option<usize>) -> CliResult<(String, bool)> {
    let spec = cfg.model_spec()?;
    let model: Model<f64> = init_model(spec, cfg.optim.seed)?;
    let data = load_dataset(cfg)?;
    let sample = prepare_samples(&model, &data.train)?
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Data("gradient check needs one training sample".into()))?;
    let opts = GradCheckOptions {
        seed: cfg.optim.seed,
        fault_block,
        ..GradCheckOptions::default()
    };
    let r = grad_check(&model, &sample.inputs, sample.label, cfg.model.desired_count, &opts)?;
    let mut out = String::new();
    let verdict = |fail: bool| if fail { "FAIL" } else { "ok" };
    if model.spec.config.has_pmlif() {
        let _ = writeln!(out, "reference implementation (limit {:e})", opts.oracle_tolerance);
        for b in &r.blocks {
            let _ = writeln!(
                out,
                "  {}\t{}\t{:.3e}\t{}",
                b.name,
                b.len,
                b.oracle_error,
                verdict(b.oracle_error >= opts.oracle_tolerance)
            );
        }
    }
    let _ = writeln!(out, "finite differences (eps {:e}, limit {:e})", opts.eps, opts.fd_tolerance);
    for b in r.blocks.iter().filter(|b| b.fd_error.is_some()) {
        let e = b.fd_error.unwrap_or(0.0);
        let _ = writeln!(
            out,
            "  {}\t{}\t{:.3e}\tskipped {}\t{}",
            b.name,
            b.len,
            e,
            b.fd_skipped,
            verdict(e >= opts.fd_tolerance)
        );
    }
    if r.passed() {
        let _ = writeln!(out, "result\tpass");
    } else {
        let _ = writeln!(out, "result\tFAIL\t{}", r.failures.join(", "));
    }
    Ok((out, r.passed()))
}

fn tau_typed<F: Real>(ckpt: &Path) -> CliResult<String> {
    let model = read_checkpoint::<F>(ckpt)?.model;
    let mut out = String::new();
    for (i, layer) in model.params.layers.iter().enumerate() {
        let LayerParams::Dense { w_m, .. } = layer else {
            continue;
        };
        let taus: Vec<f64> = w_m.data().iter().map(|w| sigmoid(w.as_f64())).collect();
        let n = taus.len() as f64;
        let mean = taus.iter().sum::<f64>() / n;
        let std = (taus.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut bins = [0usize; 20];
        for t in &taus {
            bins[((t * 20.0) as usize).min(19)] += 1;
        }
        let _ = writeln!(out, "layer{i}\tcount {}\tmean {mean:.6}\tstd {std:.6}", taus.len());
        for (b, c) in bins.iter().enumerate() {
            let _ = writeln!(out, "  [{:.2}, {:.2})\t{c}", b as f64 / 20.0, (b + 1) as f64 / 20.0);
        }
    }
    Ok(out)
}

/// Histogram of the leak factors `sigmoid(w_m)` of every PMLIF layer.
pub fn tau_stats(ckpt: &Path) -> CliResult<String> {
    let bytes = fs::read(ckpt).map_err(|e| CliError::io(ckpt, e))?;
    match peek_precision(&bytes)? {
        32 => tau_typed::<f32>(ckpt),
        _ => tau_typed::<f64>(ckpt),
    }
}
