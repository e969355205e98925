//! Dataset discovery and loading.
//!
//! File datasets are laid out as `<root>/<split>/<class>/<sample>` with
//! `split` one of `train`/`test` (any case). Class folders are labelled by
//! their position in sorted order, so `0`..`9` map to themselves.

use crate::config::{DatasetKind, RunConfig};
use crate::error::{CliError, CliResult};
use snn_core::compress::{compress, FrameTensor};
use snn_core::events::{load_aer_csv, load_nmnist_bin, synth_two_class, EventStream};
use snn_core::train::Sample;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub classes: usize,
}

/// Reads one recording; the format is chosen by file extension (`.bin` is
/// N-MNIST, anything else is CSV).
pub fn load_stream(path: &Path, width: u32, height: u32) -> CliResult<EventStream> {
    let err = |e: snn_core::Error| CliError::Data(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("bin")) {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        load_nmnist_bin(&bytes, width, height).map_err(err)
    } else {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        load_aer_csv(&text, width, height).map_err(err)
    }
}

/// Crops (if configured) and compresses a stream into frames.
pub fn frames_of(stream: &EventStream, cfg: &RunConfig) -> CliResult<FrameTensor> {
    let stream = match cfg.dataset.crop {
        Some(c) => stream.crop(c.x, c.y, c.width, c.height)?,
        None => stream.clone(),
    };
    Ok(compress(
        &stream,
        cfg.model.time_steps,
        cfg.model.resolution,
        cfg.count_mode(),
    )?)
}

fn sorted_entries(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| CliError::io(dir, e)))
        .collect::<CliResult<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn find_split(root: &Path, name: &str) -> CliResult<PathBuf> {
    sorted_entries(root)?
        .into_iter()
        .find(|p| {
            p.is_dir()
                && p
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().eq_ignore_ascii_case(name))
        })
        .ok_or_else(|| CliError::Data(format!("{}: no {name} folder", root.display())))
}

/// Files of every class, labelled, interleaved class by class so that a
/// prefix of the list is balanced.
fn split_files(root: &Path, name: &str, ext: &str) -> CliResult<(Vec<(PathBuf, usize)>, usize)> {
    let split = find_split(root, name)?;
    let classes: Vec<PathBuf> = sorted_entries(&split)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(CliError::Data(format!("{}: no class folders", split.display())));
    }
    let mut per_class = Vec::with_capacity(classes.len());
    for dir in &classes {
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| {
                p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext))
            })
            .collect();
        per_class.push(files);
    }
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..longest {
        for (label, files) in per_class.iter().enumerate() {
            if let Some(f) = files.get(i) {
                out.push((f.clone(), label));
            }
        }
    }
    Ok((out, classes.len()))
}

fn load_split(cfg: &RunConfig, root: &Path, name: &str, limit: Option<usize>) -> CliResult<(Vec<Sample>, usize)> {
    let ext = match cfg.dataset.kind {
        DatasetKind::Nmnist => "bin",
        _ => "csv",
    };
    let (mut files, classes) = split_files(root, name, ext)?;
    if let Some(n) = limit {
        files.truncate(n);
    }
    let samples = files
        .iter()
        .map(|(path, label)| {
            let stream = load_stream(path, cfg.dataset.width, cfg.dataset.height)?;
            let frames = frames_of(&stream, cfg)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            Ok(Sample {
                frames,
                label: *label,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((samples, classes))
}

/// Seed of synthetic sample `index` of a split.
fn synthetic_seed(base: u64, test: bool, index: usize) -> u64 {
    base.wrapping_mul(0x0001_0000_0001)
        .wrapping_add(u64::from(test) << 40)
        .wrapping_add(index as u64)
}

fn synthetic_split(cfg: &RunConfig, n: usize, test: bool) -> CliResult<Vec<Sample>> {
    let s = &cfg.dataset.synthetic;
    (0..n)
        .map(|i| {
            let label = i % 2;
            let stream = synth_two_class(
                label as u8,
                cfg.dataset.width,
                cfg.dataset.height,
                s.duration,
                s.rate,
                synthetic_seed(s.seed, test, i),
            )?;
            Ok(Sample {
                frames: frames_of(&stream, cfg)?,
                label,
            })
        })
        .collect()
}

pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let d = &cfg.dataset;
    match d.kind {
        DatasetKind::Synthetic => Ok(Dataset {
            train: synthetic_split(cfg, d.limit_train.unwrap_or(200), false)?,
            test: synthetic_split(cfg, d.limit_test.unwrap_or(100), true)?,
            classes: 2,
        }),
        DatasetKind::Nmnist | DatasetKind::Csv => {
            let root = d.path.as_deref().expect("validated: file datasets have a path");
            let (train, c_train) = load_split(cfg, root, "train", d.limit_train)?;
            let (test, c_test) = load_split(cfg, root, "test", d.limit_test)?;
            if c_train != c_test {
                return Err(CliError::Data(format!(
                    "train has {c_train} classes, test has {c_test}"
                )));
            }
            Ok(Dataset {
                train,
                test,
                classes: c_train,
            })
        }
    }
}
