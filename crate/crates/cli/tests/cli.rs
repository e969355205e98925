use proptest::prelude::*;
use snn_cli::commands::{self, compress_files};
use snn_cli::config::{DatasetKind, RunConfig};
use snn_cli::data::load_dataset;
use snn_cli::CliError;
use snn_core::checkpoint::Checkpoint;
use snn_core::compress::FrameTensor;
use snn_core::events::{encode_nmnist_bin, Event, EventStream, Polarity};
use snn_core::train::init_model;
use std::fs;
use std::path::Path;
use std::process::Command;

fn tiny(epochs: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.width = 8;
    cfg.dataset.height = 8;
    cfg.dataset.limit_train = Some(24);
    cfg.dataset.limit_test = Some(10);
    cfg.model.arch = "4SC3-AP2-8FC-2Voting".into();
    cfg.optim.epochs = epochs;
    cfg.optim.batch = 8;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn snn(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_snn")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn strip_time(log: &str) -> Vec<String> {
    log.lines()
        .map(|l| l.rsplit_once('\t').unwrap().0.to_string())
        .collect()
}

#[test]
fn defaults_match_table_values() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.hyper.v_th, 10.0);
    assert_eq!(cfg.hyper.s_max, 15);
    assert_eq!(cfg.hyper.alpha_h, 1.0);
    assert_eq!(cfg.hyper.alpha_w, 20.0);
    assert_eq!(cfg.model.resolution, 8);
    assert_eq!(cfg.hyper.dropout_rate, 0.5);
    assert!((cfg.input_scale() - 1.0 / 255.0).abs() < 1e-15);
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    for text in [
        r#"{"modle": {}}"#,
        r#"{"hyper": {"v_th": 10}}"#,
        r#"{"model": {"arch": "4C3-DP-2Voting"}}"#,
        r#"{"hyper": {"V_th": -1}}"#,
        r#"{"optim": {"batch": 0}}"#,
        r#"{"model": {"desired_count": 16}}"#,
        r#"{"dataset": {"kind": "csv"}}"#,
        r#"{"dataset": {"width": 33, "height": 33}}"#,
    ] {
        assert!(matches!(RunConfig::from_json(text), Err(CliError::Config(_))), "{text}");
    }
    let cfg = RunConfig::from_json(r#"{"model": {"T": 5, "N_r": 4}, "hyper": {"S_max": 3}}"#).unwrap();
    assert_eq!(cfg.model.time_steps, 5);
    assert_eq!(cfg.hyper.s_max, 3);
}

proptest! {
    #[test]
    fn config_round_trip(
        t in 1usize..6,
        nr in 1usize..9,
        binary: bool,
        syn: bool,
        wm: bool,
        lr in 1e-5f64..1e-1,
        batch in 1usize..64,
        epochs in 0u64..100,
        seed: u64,
        v_th in 1.0f64..50.0,
        drop in 0.0f64..0.9,
    ) {
        let mut cfg = RunConfig::default();
        cfg.model.time_steps = t;
        cfg.model.resolution = nr;
        cfg.model.binary_mode = binary;
        cfg.model.use_synaptic_block = syn;
        cfg.model.use_learnable_wm = wm;
        cfg.optim.lr = lr;
        cfg.optim.batch = batch;
        cfg.optim.epochs = epochs;
        cfg.optim.seed = seed;
        cfg.hyper.v_th = v_th;
        cfg.hyper.dropout_rate = drop;
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(again, cfg);
    }
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_no_log_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(0);
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("m.log");
    let hist = commands::train::<f64>(&cfg, &ckpt, Some(&log), None, &mut std::io::sink()).unwrap();
    assert!(hist.is_empty());
    assert_eq!(fs::read_to_string(&log).unwrap(), "");
    let saved = Checkpoint::<f64>::from_bytes(&fs::read(&ckpt).unwrap()).unwrap();
    let fresh = init_model::<f64>(cfg.model_spec().unwrap(), cfg.optim.seed).unwrap();
    assert_eq!(saved.model, fresh);
    assert_eq!(saved.epoch, 0);
}

#[test]
fn resume_reproduces_the_next_epochs_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = |cfg: &RunConfig, name: &str, resume: Option<&Path>| {
        let ckpt = dir.path().join(name);
        let log = dir.path().join(format!("{name}.log"));
        if let Some(r) = resume {
            fs::copy(r, &ckpt).unwrap();
            fs::copy(r.with_extension("ckpt.log"), &log).unwrap();
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| {
                commands::train::<f64>(cfg, &ckpt, Some(&log), resume.map(|_| ckpt.as_path()), &mut std::io::sink())
                    .unwrap()
            });
        (fs::read(&ckpt).unwrap(), fs::read_to_string(&log).unwrap())
    };
    let (full, full_log) = run(&tiny(3), "full.ckpt", None);
    run(&tiny(2), "part.ckpt", None);
    let part = dir.path().join("part.ckpt");
    let (resumed, resumed_log) = run(&tiny(3), "resumed.ckpt", Some(&part));
    assert_eq!(full, resumed);
    assert_eq!(strip_time(&full_log), strip_time(&resumed_log));
    assert_eq!(strip_time(&full_log).len(), 3);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(2);
    let mut outputs = Vec::new();
    for threads in [1, 3] {
        let ckpt = dir.path().join(format!("t{threads}.ckpt"));
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| commands::train::<f64>(&cfg, &ckpt, None, None, &mut std::io::sink()).unwrap());
        outputs.push(fs::read(&ckpt).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn eval_reports_consistent_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(5);
    let ckpt = dir.path().join("m.ckpt");
    commands::train::<f32>(&cfg, &ckpt, None, None, &mut std::io::sink()).unwrap();
    let a = commands::eval(&cfg, &ckpt).unwrap();
    let b = commands::eval(&cfg, &ckpt).unwrap();
    assert_eq!(a, b);
    let rows: Vec<Vec<u64>> = a
        .lines()
        .skip(3)
        .map(|l| l.split('\t').map(|c| c.parse().unwrap()).collect())
        .collect();
    // synthetic labels alternate, so ten test samples are five per class
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().map(|r| r.iter().sum::<u64>()).collect::<Vec<_>>(), vec![5, 5]);

    let mut one = cfg.clone();
    one.dataset.limit_test = Some(1);
    let report = commands::eval(&one, &ckpt).unwrap();
    assert!(report.contains("accuracy\t1.0000"), "{report}");

    let mut other = cfg;
    other.dataset.width = 4;
    other.dataset.height = 4;
    assert!(matches!(commands::eval(&other, &ckpt), Err(CliError::Data(_))));
}

fn write_csv_dataset(root: &Path) {
    for split in ["train", "test"] {
        for class in 0..2u32 {
            let dir = root.join(split).join(class.to_string());
            fs::create_dir_all(&dir).unwrap();
            for i in 0..3u32 {
                let text = format!("# x,y,t,p\n{},{},{},1\n{},0,{},0\n", class * 3, i, 10 * i, class * 2, 500);
                fs::write(dir.join(format!("s{i}.csv")), text).unwrap();
            }
        }
    }
}

#[test]
fn csv_dataset_is_labelled_by_folder() {
    let dir = tempfile::tempdir().unwrap();
    write_csv_dataset(dir.path());
    let mut cfg = RunConfig::default();
    cfg.dataset.kind = DatasetKind::Csv;
    cfg.dataset.path = Some(dir.path().to_path_buf());
    cfg.dataset.width = 4;
    cfg.dataset.height = 4;
    cfg.dataset.limit_train = Some(4);
    cfg.dataset.limit_test = None;
    cfg.model.arch = "4FC-2Voting".into();
    let data = load_dataset(&cfg).unwrap();
    assert_eq!(data.classes, 2);
    assert_eq!(data.train.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 1, 0, 1]);
    assert_eq!(data.test.len(), 6);
    assert_eq!(data.train[0].frames.shape(), [2, 2, 4, 4]);
}

#[test]
fn compress_command_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir_all(&input).unwrap();
    fs::write(input.join("empty.csv"), "# no events\n").unwrap();
    let stream = EventStream::new(
        vec![
            Event::new(0, 0, 0, Polarity::On),
            Event::new(33, 33, 40_000, Polarity::Off),
        ],
        34,
        34,
    )
    .unwrap();
    fs::write(input.join("digit.bin"), encode_nmnist_bin(&stream).unwrap()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.dataset.width = 34;
    cfg.dataset.height = 34;
    cfg.model.arch = "2FC-2Voting".into();
    let out1 = dir.path().join("o1");
    let out2 = dir.path().join("o2");
    let report = compress_files(&cfg, &input, &out1, Some(300.0)).unwrap();
    compress_files(&cfg, &input, &out2, None).unwrap();
    assert!(report.contains("shape [2, 2, 34, 34]"), "{report}");
    assert!(report.contains("compression_ratio\t0.6667%"), "{report}");
    let empty = FrameTensor::from_bytes(&fs::read(out1.join("empty.frames")).unwrap()).unwrap();
    assert!(empty.data().iter().all(|v| *v == 0.0));
    for name in ["empty.frames", "digit.frames"] {
        assert_eq!(fs::read(out1.join(name)).unwrap(), fs::read(out2.join(name)).unwrap());
    }
    let digit = FrameTensor::from_bytes(&fs::read(out1.join("digit.frames")).unwrap()).unwrap();
    assert_eq!(digit.get(0, 1, 0, 0), 1.0);
    assert_eq!(digit.get(1, 0, 33, 33), 128.0);

    fs::write(input.join("broken.csv"), "1,2,3,1\n1,2,x,0\n").unwrap();
    match compress_files(&cfg, &input, &out1, None) {
        Err(CliError::Data(msg)) => assert!(msg.contains("broken.csv") && msg.contains("line 2"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"optim": {"lr": -1}}"#).unwrap();
    let (code, _, err) = snn(&["--config", bad.to_str().unwrap(), "gradcheck"]);
    assert_eq!(code, 1, "{err}");

    let mut cfg = tiny(1);
    cfg.dataset.width = 4;
    cfg.dataset.height = 4;
    cfg.model.arch = "2SC3-AP2-4FC-2Voting".into();
    let path = write_config(dir.path(), &cfg);
    let p = path.to_str().unwrap();
    let (code, out, _) = snn(&["--config", p, "gradcheck"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("result\tpass"));
    let (code, out, _) = snn(&["--config", p, "gradcheck", "--fault-block", "2"]);
    assert_eq!(code, 3);
    assert!(out.contains("FAIL\tlayer2.weights"), "{out}");

    let missing = dir.path().join("missing.ckpt");
    let (code, _, _) = snn(&["--config", p, "eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code, 2);
    let (code, _, _) = snn(&["--precision", "16", "tau-stats", "--checkpoint", "x"]);
    assert_eq!(code, 1);
}

#[test]
fn gradcheck_without_spiking_layers_reports_finite_differences_only() {
    let mut cfg = tiny(1);
    cfg.dataset.width = 4;
    cfg.dataset.height = 4;
    cfg.model.arch = "2C3-AP2-2Voting".into();
    let (report, passed) = commands::gradcheck(&cfg, None).unwrap();
    assert!(passed, "{report}");
    assert!(!report.contains("reference implementation"));
    assert!(report.contains("finite differences"));
}

#[test]
fn tau_stats_reports_each_spiking_layer() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(0);
    cfg.model.arch = "4SC3-AP2-8FC-4FC-2Voting".into();
    let ckpt = dir.path().join("m.ckpt");
    commands::train::<f32>(&cfg, &ckpt, None, None, &mut std::io::sink()).unwrap();
    let text = commands::tau_stats(&ckpt).unwrap();
    let headers: Vec<&str> = text.lines().filter(|l| l.starts_with("layer")).collect();
    assert_eq!(headers.len(), 2);
    assert!(headers[0].contains("count 8\tmean 0.500000\tstd 0.000000"), "{text}");
    assert!(text.contains("[0.50, 0.55)\t8"));

    let mut conv = tiny(0);
    conv.model.arch = "2C3-AP2-2Voting".into();
    commands::train::<f32>(&conv, &ckpt, None, None, &mut std::io::sink()).unwrap();
    assert_eq!(commands::tau_stats(&ckpt).unwrap(), "");

    let mut trained = tiny(3);
    trained.model.arch = "4SC3-AP2-8FC-4FC-2Voting".into();
    commands::train::<f32>(&trained, &ckpt, None, None, &mut std::io::sink()).unwrap();
    let text = commands::tau_stats(&ckpt).unwrap();
    assert!(!text.contains("NaN"));
}
