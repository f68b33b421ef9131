use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lobeseg::config::RunConfig;
use lobeseg::gradcheck::suite::{run_trials, GradOp};
use lobeseg::metrics::{evaluate_segmentation, reports_to_csv};
use lobeseg::morphology::{fissure_gt_from_lobes, FissureAdjacency};
use lobeseg::synth::{count_cases, generate_dataset, read_case, PhantomSpec, NUM_CLASSES};
use lobeseg::trainer::{run_ablation, train, Arm, Model, ModelKind};
use lobeseg::volume::LabelVolume;
use lobeseg::vvol::{read_volume, write_volume, Volume};

mod pgm;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] lobeseg::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use lobeseg::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(E::Parameter(_) | E::Spec(_)) => 2,
            CliError::Lib(
                E::Range(_) | E::Format { .. } | E::Io { .. } | E::UndefinedMetric(_),
            ) => 3,
            CliError::Lib(E::Contract(_)) => 3,
            CliError::Lib(E::Numeric(_) | E::Diverged { .. }) => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "lobeseg",
    version,
    about = "Fissure-aware lobe segmentation experiments on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset as VVOL image/label pairs.
    GenData {
        /// Phantom spec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
    },
    /// Derive fissure labels from a lobe label volume.
    FissureGt {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 1)]
        radius: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one arm and write the step log, summary and predictions.
    Train {
        /// Run config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        arm: Arm,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Case fitted by a direct-logit model.
        #[arg(long, default_value_t = 0)]
        case: usize,
    },
    /// Train all four arms and write the ablation table.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-lobe DSC/HD95 and per-fissure ASSD of a prediction.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        radius: usize,
    },
    /// Finite-difference gradient checks on random 4x4x4 volumes.
    Gradcheck {
        #[arg(long)]
        op: GradOp,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write one slice of a volume as an 8-bit PGM image.
    ExportSlice {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_enum, default_value_t = Axis::Z)]
        axis: Axis,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Channel to export from a multi-channel volume.
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    X,
    Y,
    Z,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<Vec<PathBuf>> {
    match command {
        Command::GenData {
            spec,
            out,
            cases,
            base_seed,
        } => gen_data(spec.as_deref(), &out, cases, base_seed),
        Command::FissureGt {
            labels,
            radius,
            out,
        } => fissure_gt(&labels, radius, &out),
        Command::Train {
            config,
            data,
            arm,
            out,
            case,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (data, out) = resolve_paths(&cfg, data, out)?;
            train_arm(&cfg, &data, arm, &out, case)
        }
        Command::Ablation { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let (data, out) = resolve_paths(&cfg, data, out)?;
            ablation(&cfg, &data, &out)
        }
        Command::Eval {
            pred,
            gt,
            out,
            radius,
        } => eval(&pred, &gt, &out, radius),
        Command::Gradcheck { op, trials, seed } => gradcheck(op, trials, seed),
        Command::ExportSlice {
            volume,
            axis,
            index,
            out,
            channel,
        } => export_slice(&volume, axis, index, channel, &out),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    })
}

fn resolve_paths(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(PathBuf, PathBuf)> {
    let data = data.or_else(|| cfg.paths.data.clone()).ok_or_else(|| {
        CliError::Usage("no data directory: pass --data or set paths.data".into())
    })?;
    let out = out.or_else(|| cfg.paths.out.clone()).ok_or_else(|| {
        CliError::Usage("no output directory: pass --out or set paths.out".into())
    })?;
    Ok((data, out))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| lobeseg::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(|e| lobeseg::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(path.to_path_buf())
}

fn read_labels(path: &Path) -> Result<LabelVolume> {
    // Files carry only the labels present; lobe maps always have six classes.
    Ok(read_volume(path)?
        .into_labels()?
        .with_num_classes(NUM_CLASSES)?)
}

fn gen_data(spec: Option<&Path>, out: &Path, cases: usize, base_seed: u64) -> Result<Vec<PathBuf>> {
    if cases == 0 {
        return Err(CliError::Usage("--cases must be at least 1".into()));
    }
    let template = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| lobeseg::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            let spec: PhantomSpec = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            spec.validate()?;
            spec
        }
        None => PhantomSpec::default(),
    };
    create_dir(out)?;
    generate_dataset(&template, cases, base_seed, Some(out))?;
    Ok((0..cases)
        .flat_map(|k| {
            [
                lobeseg::synth::image_path(out, k),
                lobeseg::synth::label_path(out, k),
            ]
        })
        .collect())
}

fn fissure_gt(labels: &Path, radius: usize, out: &Path) -> Result<Vec<PathBuf>> {
    if radius == 0 {
        return Err(CliError::Usage("--radius must be at least 1".into()));
    }
    let lobes = read_labels(labels)?;
    let fissures = fissure_gt_from_lobes(&lobes, radius, &FissureAdjacency::five_lobe())?;
    write_volume(out, &Volume::Label(fissures))?;
    Ok(vec![out.to_path_buf()])
}

fn read_dataset(data: &Path) -> Result<Vec<lobeseg::synth::PhantomCase>> {
    let n = count_cases(data);
    if n == 0 {
        return Err(lobeseg::Error::Io {
            path: lobeseg::synth::image_path(data, 0),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no cases found"),
        }
        .into());
    }
    (0..n).map(|k| Ok(read_case(data, k)?)).collect()
}

fn train_arm(
    cfg: &RunConfig,
    data: &Path,
    arm: Arm,
    out: &Path,
    case: usize,
) -> Result<Vec<PathBuf>> {
    let cases = read_dataset(data)?;
    let (cases, ids): (Vec<_>, Vec<usize>) = match cfg.train.model {
        ModelKind::DirectLogit => {
            let c = cases.get(case).cloned().ok_or_else(|| {
                CliError::Usage(format!(
                    "--case {case} out of range: {} cases in {}",
                    cases.len(),
                    data.display()
                ))
            })?;
            (vec![c], vec![case])
        }
        ModelKind::TinyConv => {
            let ids = (0..cases.len()).collect();
            (cases, ids)
        }
    };
    let shape = cases[0].image.shape();
    let mut model = Model::new(
        cfg.train.model,
        shape,
        cfg.train.num_classes(),
        cfg.train.seed,
    );
    let report = train(&mut model, &cases, &cfg.train, arm)?;

    create_dir(out)?;
    let mut written = vec![
        write_text(&out.join("steps.csv"), &report.steps_csv())?,
        write_text(&out.join("summary.json"), &report.summary_json())?,
        write_text(&out.join("timing.json"), &report.timing_json())?,
    ];
    let names: Vec<String> = ids.iter().map(|k| format!("case_{k}")).collect();
    let metrics = reports_to_csv(names.iter().map(String::as_str).zip(&report.final_metrics));
    written.push(write_text(&out.join("metrics.csv"), &metrics)?);
    for (c, k) in cases.iter().zip(&ids) {
        let path = out.join(format!("case_{k}_pred.vvol"));
        write_volume(&path, &Volume::Label(model.predict(&c.image)?))?;
        written.push(path);
    }
    Ok(written)
}

fn ablation(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let cases = read_dataset(data)?;
    let held_out = cfg.dataset.held_out.max(1);
    if held_out >= cases.len() {
        return Err(CliError::Usage(format!(
            "ablation holds out {held_out} of {} cases; at least one must remain for training",
            cases.len()
        )));
    }
    let split = cases.len() - held_out;
    let table = run_ablation(&cases[..split], &cases[split..], &cfg.train)?;
    for line in table.directional_summary() {
        eprintln!("{line}");
    }
    create_dir(out)?;
    Ok(vec![write_text(
        &out.join("ablation.csv"),
        &table.to_csv(),
    )?])
}

fn eval(pred: &Path, gt: &Path, out: &Path, radius: usize) -> Result<Vec<PathBuf>> {
    let p = read_labels(pred)?;
    let g = read_labels(gt)?;
    let report = evaluate_segmentation(&p, &g, &FissureAdjacency::five_lobe(), radius)?;
    let name = pred.file_stem().and_then(|s| s.to_str()).unwrap_or("case");
    Ok(vec![write_text(out, &reports_to_csv([(name, &report)]))?])
}

fn gradcheck(op: GradOp, trials: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let summary = run_trials(op, trials, seed)?;
    println!("{summary}");
    for e in &summary.excess {
        println!("  {e}");
    }
    if !summary.passed() {
        return Err(lobeseg::Error::Numeric(format!(
            "{} of {trials} trials exceeded the tolerance",
            summary.excess.len()
        ))
        .into());
    }
    Ok(Vec::new())
}

fn export_slice(
    volume: &Path,
    axis: Axis,
    index: usize,
    channel: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let vol = read_volume(volume)?;
    let [nx, ny, nz] = vol.shape().dims();
    let (len, name) = match axis {
        Axis::X => (nx, "x"),
        Axis::Y => (ny, "y"),
        Axis::Z => (nz, "z"),
    };
    if index >= len {
        return Err(CliError::Usage(format!(
            "--index {index} out of range for axis {name} of length {len}"
        )));
    }
    let image = match vol {
        Volume::Label(l) => pgm::label_slice(&l, axis.into(), index),
        Volume::Scalar(s) => pgm::scalar_slice(s.data(), s.shape(), axis.into(), index),
        Volume::Channel(c) => {
            if channel >= c.channels() {
                return Err(CliError::Usage(format!(
                    "--channel {channel} out of range: volume has {} channels",
                    c.channels()
                )));
            }
            pgm::scalar_slice(c.channel(channel), c.shape(), axis.into(), index)
        }
    };
    std::fs::write(out, image.encode()).map_err(|e| lobeseg::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(vec![out.to_path_buf()])
}

impl From<Axis> for usize {
    fn from(a: Axis) -> usize {
        match a {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}
