use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use mlrbfn::config::{run, ModelKind, RunConfig};
use mlrbfn::data::{load_dataset, save_feature_matrix, Moons4, NormStats};
use mlrbfn::metrics::{confidence_grid, histograms_csv, reports_csv, OodReport};
use mlrbfn::persist::parse_bounds;
use mlrbfn::sweep::{results_csv, run_cell, summarize, summary_csv, sweep_cells, SweepResult};
use mlrbfn::{AnyModel, Classifier, Error};

#[derive(Parser)]
#[command(name = "mlrbfn", version, about = "Train and evaluate multi-layer RBF networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the four-class moons train/test splits as feature files.
    GenMoons {
        #[arg(long, default_value_t = 1000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config file and/or preset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base preset: moons, mnist or feature-head.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Disable the depression gate.
        #[arg(long)]
        no_depression: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score ID and OOD sets and report separability metrics.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Feature file, or IDX images with --id-labels.
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        id_labels: Option<PathBuf>,
        /// Feature or IDX image files; repeatable.
        #[arg(long, required = true, num_args = 1..)]
        ood: Vec<PathBuf>,
        /// Standardization statistics applied to every input set.
        #[arg(long)]
        norm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confidence map of a 2-D model as CSV and PPM.
    Grid {
        #[arg(long)]
        model: PathBuf,
        /// xmin,xmax,ymin,ymax in model input space.
        #[arg(long, default_value = "-4,4,-4,4", allow_hyphen_values = true)]
        bounds: String,
        #[arg(long, default_value_t = 300)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Far-field AUROC across depths for both model kinds.
    DepthSweep {
        #[arg(long, default_value = "moons")]
        dataset: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        depths: Vec<usize>,
        #[arg(long, value_enum, default_value_t = SweepModels::Both)]
        model: SweepModels,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        mlp_width: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        ood_samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepModels {
    Both,
    Mlrbfn,
    Mlp,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Dimension(_) | Error::InsufficientData(_) | Error::Label { .. } | Error::Format(_) | Error::Io(_) => 2,
        Error::Domain(_) | Error::NonFinite { .. } => 3,
    }
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> mlrbfn::Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn gen_moons(n_train: usize, n_test: usize, noise: f64, seed: u64, out: &Path) -> mlrbfn::Result<()> {
    let (train, test) = Moons4 {
        n_train,
        n_test,
        noise,
        seed,
        ..Moons4::default()
    }
    .generate()?;
    fs::create_dir_all(out)?;
    save_feature_matrix(&out.join("train.mlfx"), &train)?;
    save_feature_matrix(&out.join("test.mlfx"), &test)?;
    log::info!("wrote {} train and {} test points to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn train_cmd(
    config: Option<&Path>,
    preset: Option<&str>,
    out: &Path,
    no_depression: bool,
    seed: Option<u64>,
) -> mlrbfn::Result<()> {
    let base = preset.map(RunConfig::preset).transpose()?;
    let mut cfg = RunConfig::from_file_with_env(config, base)?;
    if no_depression {
        cfg.depression = false;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let root = config
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(out)?;
    write(out, "config.txt", cfg.to_text())?;
    let art = run(&cfg, &root)?;
    art.model.save(&out.join("model.bin"))?;
    write(out, "train_record.csv", art.outcome.record.to_csv())?;
    let init = art.outcome.init.as_ref().map(ToString::to_string).unwrap_or_default();
    write(out, "init_report.log", init)?;
    write(out, "norm.txt", art.data.norm.to_text())?;
    write(out, "summary.txt", art.summary())?;
    log::info!("{}", art.summary().trim_end().replace('\n', ", "));
    Ok(())
}

fn load_input(path: &Path, labels: Option<&Path>, norm: Option<&NormStats>) -> mlrbfn::Result<mlrbfn::LabeledDataset> {
    let mut ds = load_dataset(path, labels)?;
    if let Some(n) = norm {
        n.apply(&mut ds.features)?;
    }
    Ok(ds)
}

fn eval_cmd(
    model: &Path,
    id: &Path,
    id_labels: Option<&Path>,
    ood: &[PathBuf],
    norm: Option<&Path>,
    out: &Path,
) -> mlrbfn::Result<()> {
    let model = AnyModel::load(model)?;
    let norm = norm.map(|p| fs::read_to_string(p).map_err(Error::from).and_then(|t| NormStats::from_text(&t))).transpose()?;
    let check_dim = |name: &Path, d: usize| {
        if d != model.input_dim() {
            return Err(Error::Dimension(format!(
                "{} has {d} features, model expects {}",
                name.display(),
                model.input_dim()
            )));
        }
        Ok(())
    };
    let id_set = load_input(id, id_labels, norm.as_ref())?;
    check_dim(id, id_set.dim())?;
    let id_scored = model.score(&id_set.features)?;
    let id_acc = match &id_set.labels {
        Some(l) => id_scored.accuracy(l),
        None => f64::NAN,
    };
    let mut reports = Vec::new();
    for path in ood {
        let set = load_input(path, None, norm.as_ref())?;
        check_dim(path, set.dim())?;
        let scored = model.score(&set.features)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        reports.push(OodReport::compute(&name, &id_scored.scores, &scored.scores, id_acc)?);
    }
    let mean = OodReport::average(&reports).expect("at least one OOD set");
    fs::create_dir_all(out)?;
    write(out, "histograms.csv", histograms_csv(&reports))?;
    reports.push(mean);
    write(out, "report.csv", reports_csv(&reports))?;
    let text: String = reports.iter().map(|r| r.to_text() + "\n").collect();
    write(out, "report.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn grid_cmd(model: &Path, bounds: &str, resolution: usize, out: &Path) -> mlrbfn::Result<()> {
    let model = AnyModel::load(model)?;
    let grid = confidence_grid(&model, parse_bounds(bounds)?, resolution)?;
    fs::create_dir_all(out)?;
    write(out, "grid.csv", grid.to_csv())?;
    write(out, "grid.ppm", grid.to_ppm())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep_cmd(
    dataset: &str,
    depths: &[usize],
    models: SweepModels,
    seeds: u64,
    epochs: Option<usize>,
    mlp_width: Option<usize>,
    ood_samples: usize,
    out: &Path,
) -> mlrbfn::Result<()> {
    if dataset != "moons" {
        return Err(Error::Usage(format!("depth sweep supports the moons dataset, got {dataset:?}")));
    }
    let mut base = RunConfig::moons();
    if let Some(e) = epochs {
        base.epochs = e;
    }
    if let Some(w) = mlp_width {
        base.mlp_width = w;
    }
    base.validate()?;
    let kinds = match models {
        SweepModels::Both => vec![ModelKind::Mlrbfn, ModelKind::Mlp],
        SweepModels::Mlrbfn => vec![ModelKind::Mlrbfn],
        SweepModels::Mlp => vec![ModelKind::Mlp],
    };
    let cells = sweep_cells(depths, &kinds, seeds);
    log::info!("depth sweep: {} runs", cells.len());
    let results: Vec<SweepResult> = cells
        .par_iter()
        .map(|&c| run_cell(&base, c, ood_samples, Path::new(".")))
        .collect::<mlrbfn::Result<_>>()?;
    fs::create_dir_all(out)?;
    write(out, "config.txt", base.to_text())?;
    write(out, "runs.csv", results_csv(&results))?;
    let summary = summary_csv(&summarize(&results));
    write(out, "summary.csv", &summary)?;
    print!("{summary}");
    Ok(())
}

fn dispatch(cli: Cli) -> mlrbfn::Result<()> {
    match cli.command {
        Command::GenMoons {
            n_train,
            n_test,
            noise,
            seed,
            out,
        } => gen_moons(n_train, n_test, noise, seed, &out),
        Command::Train {
            config,
            preset,
            out,
            no_depression,
            seed,
        } => train_cmd(config.as_deref(), preset.as_deref(), &out, no_depression, seed),
        Command::Eval {
            model,
            id,
            id_labels,
            ood,
            norm,
            out,
        } => eval_cmd(&model, &id, id_labels.as_deref(), &ood, norm.as_deref(), &out),
        Command::Grid {
            model,
            bounds,
            resolution,
            out,
        } => grid_cmd(&model, &bounds, resolution, &out),
        Command::DepthSweep {
            dataset,
            depths,
            model,
            seeds,
            epochs,
            mlp_width,
            ood_samples,
            out,
        } => sweep_cmd(&dataset, &depths, model, seeds, epochs, mlp_width, ood_samples, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
