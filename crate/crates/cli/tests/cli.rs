use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mlrbfn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlrbfn"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("MLRBFN_EPOCHS")
        .output()
        .expect("binary runs")
}

fn quick_config(dir: &Path) {
    fs::write(
        dir.join("quick.cfg"),
        "# short moons run\nepochs = 3\nmoons_n_train = 200\nmoons_n_test = 100\nkmeans_passes = 5\nhidden_centroids = 10\nprojection = 8\n",
    )
    .unwrap();
}

#[test]
fn gen_moons_writes_two_reproducible_files() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = mlrbfn(&["gen-moons", "--seed", "5", "--out", out], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["train.mlfx", "test.mlfx"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(tmp.path().join("b").join(f)).unwrap());
    }
    let train = mlrbfn::data::load_feature_matrix(&tmp.path().join("a/train.mlfx")).unwrap();
    assert_eq!(train.len(), 1000);
    assert_eq!(train.class_counts(), vec![250; 4]);
}

#[test]
fn gen_moons_rejects_indivisible_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mlrbfn(&["gen-moons", "--n-train", "1001", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_grid_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    quick_config(dir);
    assert!(mlrbfn(&["gen-moons", "--out", "data"], dir).status.success());
    let o = mlrbfn(&["train", "--config", "quick.cfg", "--out", "run"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.bin", "train_record.csv", "init_report.log", "norm.txt", "config.txt", "summary.txt"] {
        assert!(dir.join("run").join(f).is_file(), "{f}");
    }
    let record = fs::read_to_string(dir.join("run/train_record.csv")).unwrap();
    assert_eq!(record.lines().count(), 4);
    assert!(fs::read_to_string(dir.join("run/init_report.log")).unwrap().contains("layer=1"));

    // the effective config re-parses and reproduces the model
    let o = mlrbfn(&["train", "--config", "run/config.txt", "--out", "rerun"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(dir.join("run/model.bin")).unwrap(), fs::read(dir.join("rerun/model.bin")).unwrap());

    fs::write(dir.join("ring.mlfx"), mlrbfn::data::encode_feature_matrix(&mlrbfn::data::uniform_ring(50, 5.0, 6.0, 0))).unwrap();
    let o = mlrbfn(
        &["eval", "--model", "run/model.bin", "--id", "data/test.mlfx", "--ood", "data/train.mlfx", "ring.mlfx", "--norm", "run/norm.txt", "--out", "eval"],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(dir.join("eval/report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows.len(), 4, "{report}");
    assert!(rows[0].starts_with("ood,auroc"));
    assert!(rows[3].starts_with("mean,"));
    // 4-decimal fields
    assert_eq!(rows[1].split(',').nth(1).unwrap().split('.').nth(1).unwrap().len(), 4);
    assert!(dir.join("eval/histograms.csv").is_file());

    let o = mlrbfn(&["grid", "--model", "run/model.bin", "--resolution", "30", "--bounds", "-4,4,-4,4", "--out", "grid"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(dir.join("grid/grid.csv")).unwrap().lines().count(), 901);
    let ppm = fs::read(dir.join("grid/grid.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6 30 30 255\n"));
    assert_eq!(ppm.len(), 13 + 30 * 30 * 3);
}

#[test]
fn no_depression_flag_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    quick_config(tmp.path());
    let o = mlrbfn(&["train", "--config", "quick.cfg", "--no-depression", "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = fs::read_to_string(tmp.path().join("run/config.txt")).unwrap();
    assert!(cfg.contains("depression = false"));
    let model = mlrbfn::AnyModel::load(&tmp.path().join("run/model.bin")).unwrap();
    let mlrbfn::AnyModel::Rbf(net) = model else { panic!("expected an RBF model") };
    assert!(!net.config().depression);
}

#[test]
fn environment_overrides_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    quick_config(tmp.path());
    let o = Command::new(env!("CARGO_BIN_EXE_mlrbfn"))
        .args(["train", "--config", "quick.cfg", "--out", "run"])
        .current_dir(tmp.path())
        .env("RUST_LOG", "warn")
        .env("MLRBFN_EPOCHS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(tmp.path().join("run/config.txt")).unwrap().contains("epochs = 2\n"));
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.cfg"), "colour = blue\n").unwrap();
    assert_eq!(mlrbfn(&["train", "--config", "bad.cfg", "--out", "x"], dir).status.code(), Some(1));
    fs::write(dir.join("missing.cfg"), "dataset = features\ntrain_features = nope.mlfx\n").unwrap();
    assert_eq!(mlrbfn(&["train", "--config", "missing.cfg", "--out", "x"], dir).status.code(), Some(1));
    assert_eq!(mlrbfn(&["train", "--bogus-flag"], dir).status.code(), Some(1));
    fs::write(dir.join("junk.bin"), b"not a model").unwrap();
    assert_eq!(mlrbfn(&["grid", "--model", "junk.bin", "--out", "g"], dir).status.code(), Some(2));
}

#[test]
fn eval_rejects_dimension_mismatch_and_grid_rejects_non_2d() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ds = mlrbfn::LabeledDataset::new(mlrbfn::Tensor::<f32>::zeros(8, 3), vec![0, 1, 0, 1, 0, 1, 0, 1], 2).unwrap();
    mlrbfn::data::save_feature_matrix(&dir.join("d3.mlfx"), &ds).unwrap();
    let mlp = mlrbfn::Mlp::<f32>::new(&mlrbfn::MlpConfig {
        input_dim: 3,
        width: 4,
        hidden_layers: 1,
        num_classes: 2,
        seed: 0,
    })
    .unwrap();
    mlrbfn::AnyModel::Mlp(mlp).save(&dir.join("m3.bin")).unwrap();
    assert_eq!(mlrbfn(&["grid", "--model", "m3.bin", "--out", "g"], dir).status.code(), Some(1));

    let net = mlrbfn::Network::<f32>::new(mlrbfn::NetworkConfig::uniform(2, 1, 4, 4, 2)).unwrap();
    mlrbfn::AnyModel::Rbf(net).save(&dir.join("m2.bin")).unwrap();
    let o = mlrbfn(&["eval", "--model", "m2.bin", "--id", "d3.mlfx", "--ood", "d3.mlfx", "--out", "e"], dir);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn depth_sweep_writes_runs_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mlrbfn(
        &["depth-sweep", "--depths", "1,2", "--seeds", "2", "--epochs", "2", "--ood-samples", "50", "--out", "sweep"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = fs::read_to_string(tmp.path().join("sweep/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 2 * 2 * 2);
    let summary = fs::read_to_string(tmp.path().join("sweep/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("1,mlrbfn,"));
}
