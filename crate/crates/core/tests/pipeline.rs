use std::path::PathBuf;

use dpgrad_lab::compress::{CompressorKind, PayloadWidth};
use dpgrad_lab::config::ExperimentConfig;
use dpgrad_lab::dp::{rdp_epsilon, NoisePlacement, OrderGrid, PrivacyParams};
use dpgrad_lab::dump::{parse_dumps, write_dump};
use dpgrad_lab::error_analysis::{stage_breakdown, Stage};
use dpgrad_lab::harness::{oracle_stream, run_training, OracleSpec, PipelineConfig, TrainConfig};
use dpgrad_lab::RngStream;

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(
        &PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("configs")
            .join(name),
    )
    .unwrap()
}

#[test]
fn shipped_configs_parse_and_expand() {
    for name in [
        "blobs-logreg.conf",
        "default-grid.conf",
        "rings-mlp.conf",
        "denoise-oracle.conf",
    ] {
        let cfg = load(name);
        assert!(!cfg.grid_cells().unwrap().is_empty(), "{name}");
    }
    assert_eq!(load("default-grid.conf").grid_cells().unwrap().len(), 18);
}

#[test]
fn logistic_regression_sanity() {
    let cfg = load("blobs-logreg.conf");
    let task = cfg.task_spec().unwrap();
    let model = cfg.model_spec(&task).unwrap();
    let run = run_training(
        &task,
        &model,
        &cfg.pipeline().unwrap(),
        &cfg.train_config(0).unwrap(),
    )
    .unwrap();
    assert!(
        run.record.final_accuracy >= 0.90,
        "{}",
        run.record.final_accuracy
    );
    assert_eq!(run.record.epoch_accuracy.len(), 20);
    assert!(!run.record.aborted);
}

#[test]
fn disabled_mechanisms_reproduce_plain_sgd() {
    let cfg = load("default-grid.conf");
    let task = cfg.task_spec().unwrap();
    let model = cfg.model_spec(&task).unwrap();
    let train = TrainConfig {
        epochs: 3,
        ..cfg.train_config(9).unwrap()
    };
    let plain = run_training(&task, &model, &PipelineConfig::identity(), &train).unwrap();

    let mut huge = cfg.clone();
    huge.set("privacy.clip", "1e15").unwrap();
    huge.set("privacy.sigma", "0").unwrap();
    huge.set("compress.kind", "topk").unwrap();
    huge.set("compress.rate", "1").unwrap();
    huge.set("compress.width", "64").unwrap();
    let lossless = run_training(&task, &model, &huge.pipeline().unwrap(), &train).unwrap();
    assert_eq!(plain.record.epoch_accuracy, lossless.record.epoch_accuracy);
    assert_eq!(plain.record.final_accuracy, lossless.record.final_accuracy);
}

#[test]
fn privacy_trace_matches_accountant() {
    let mut cfg = load("rings-mlp.conf");
    cfg.set("train.epochs", "3").unwrap();
    let task = cfg.task_spec().unwrap();
    let model = cfg.model_spec(&task).unwrap();
    let run = run_training(
        &task,
        &model,
        &cfg.pipeline().unwrap(),
        &cfg.train_config(1).unwrap(),
    )
    .unwrap();
    let expected = rdp_epsilon(0.4, run.meta.steps, 1.0 / 2000.0, &OrderGrid::default()).unwrap();
    assert_eq!(*run.record.privacy_trace.last().unwrap(), expected);
    assert_eq!(
        run.record.total_bytes(),
        run.record.step_bytes.iter().sum::<u64>()
    );
    assert!(run.meta.clip_radius.unwrap() > 0.0);
}

#[test]
fn replayed_dumps_give_identical_breakdowns() {
    let spec =
        OracleSpec::random_direction(64, 2, 1.0, 0.3, 8, &mut RngStream::labeled(1, "g")).unwrap();
    let batch = oracle_stream(&spec, 1, RngStream::labeled(1, "rows"))
        .pop()
        .unwrap();
    let replayed = parse_dumps(&write_dump(&batch)).unwrap().pop().unwrap();
    assert_eq!(replayed, batch);

    let params = PrivacyParams::new(1.0, 0.8, 1e-5).unwrap();
    let kind = CompressorKind::TopK {
        rate: 8.0,
        width: PayloadWidth::Bits16,
    };
    let rng = RngStream::labeled(2, "trials");
    let a = stage_breakdown(&params, NoisePlacement::PerSample, kind, &batch, 200, &rng).unwrap();
    let b = stage_breakdown(
        &params,
        NoisePlacement::PerSample,
        kind,
        &replayed,
        200,
        &rng,
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.get(Stage::Clip).variance, 0.0);
}

#[test]
fn rates_and_ranks_are_exclusive() {
    let mut cfg = load("default-grid.conf");
    cfg.set("grid.ranks", "1, 2").unwrap();
    assert!(cfg.grid_cells().is_err());
}

#[test]
fn powersgd_grid_trains() {
    let mut cfg: ExperimentConfig = "\
task.generator = gaussian-blobs
model.arch = mlp-1-hidden
train.epochs = 2
train.lr = 0.1
train.batch_size = 32
privacy.sigma = 0.4
denoise.beta = 0.9
denoise.gamma = 0.9
"
    .parse()
    .unwrap();
    cfg.set("grid.ranks", "1, 2").unwrap();
    cfg.set("grid.modes", "plain, denoise").unwrap();
    let cells = cfg.grid_cells().unwrap();
    assert_eq!(cells.len(), 4);
    let mut bytes = Vec::new();
    for cell in &cells {
        let task = cell.config.task_spec().unwrap();
        let model = cell.config.model_spec(&task).unwrap();
        let run = run_training(
            &task,
            &model,
            &cell.config.pipeline().unwrap(),
            &cell.config.train_config(0).unwrap(),
        )
        .unwrap();
        assert!(!run.record.aborted, "{}", cell.label);
        assert!(run.record.final_accuracy > 0.5, "{}", cell.label);
        bytes.push(run.record.total_bytes());
    }
    assert!(bytes[0] < bytes[2], "rank 2 costs more than rank 1");
}
