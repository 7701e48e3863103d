use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hazebridge::checkpoint::Checkpoint;
use hazebridge::harness::config::{ExperimentConfig, ExperimentKind};
use hazebridge::harness::eval::eval_dirs;
use hazebridge::harness::experiment::{
    dehaze_images, image_dataset, pretrain_prompt, run_experiment,
};
use hazebridge::harness::io::{list_images, read_image, write_image};
use hazebridge::harness::oracle;
use hazebridge::trainer::{infer, inference_noise, ImageTrainState, PointTrainState};
use hazebridge::{Error, Result};
use hazebridge_tensor::Tensor;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(
    name = "hazebridge",
    version,
    about = "Schrödinger-bridge dehazing experiments at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a config file and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dehaze images (or transport points) with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file, directory of images, or CSV of `x,y` points.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against ground truth with matching file names.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the bridge, transport, dehazing, gradient and regularizer property suites.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic unpaired dataset to disk.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train only the haze prompt and report held-out accuracy.
    TrainPrompt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let cfg = load_config(config, seed, out)?;
    let summary = run_experiment(&cfg)?;
    let last = summary.last_step();
    for row in summary.at_step(last) {
        let values: Vec<String> = row
            .values
            .iter()
            .map(|(n, v)| format!("{n}={v:.4}"))
            .collect();
        println!("step {} nfe {} {}", row.step, row.nfe, values.join(" "));
    }
    println!("wrote {}", summary.out_dir.display());
    Ok(0)
}

fn read_points(path: &Path) -> Result<Tensor> {
    let fmt = |d: String| Error::Format {
        path: path.to_path_buf(),
        detail: d,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let mut data = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        for k in 0..2 {
            let v = rec
                .get(k)
                .ok_or_else(|| fmt("rows need two columns".into()))?;
            data.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| fmt(format!("{v:?}: {e}")))?,
            );
        }
    }
    let n = data.len() / 2;
    Ok(Tensor::new(data, &[n, 2])?)
}

fn infer_cmd(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    nfe: usize,
    seed: Option<u64>,
) -> Result<u8> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ExperimentConfig::from_toml(ck.meta("config")?)?;
    let schedule = cfg.schedule()?;
    if nfe < 1 || nfe > schedule.n_intervals() {
        return Err(Error::Config(format!(
            "--nfe must lie in 1..={}",
            schedule.n_intervals()
        )));
    }
    let _unchecked = hazebridge_tensor::set_checked(false);
    match cfg.kind {
        ExperimentKind::Toy2d => {
            let mut state = PointTrainState::new(
                cfg.weights,
                cfg.optim,
                cfg.seed,
                cfg.model.point_hidden,
                cfg.model.critic_hidden,
            );
            state.restore(&ck)?;
            let x0 = read_points(input)?;
            let mut noise = inference_noise(seed.unwrap_or(state.seed), 0);
            let x1 = infer(&x0, nfe, |x, t| state.predict(x, t), &schedule, &mut noise)?;
            let fmt = |e: csv::Error| Error::Format {
                path: out.to_path_buf(),
                detail: e.to_string(),
            };
            let mut w = csv::Writer::from_path(out).map_err(fmt)?;
            w.write_record(["x", "y"]).map_err(fmt)?;
            for p in x1.data().chunks_exact(2) {
                w.write_record([format!("{:e}", p[0]), format!("{:e}", p[1])])
                    .map_err(fmt)?;
            }
            w.flush().map_err(|e| Error::Io {
                path: out.to_path_buf(),
                source: e,
            })?;
            println!("wrote {} points to {}", x1.shape()[0], out.display());
        }
        ExperimentKind::SynthHaze | ExperimentKind::ImageDir => {
            let mut state = ImageTrainState::from_checkpoint(cfg.image_train_config(), &ck)?;
            if let Some(s) = seed {
                state.seed = s;
            }
            let files = if input.is_dir() {
                list_images(input)?
            } else {
                vec![input.to_path_buf()]
            };
            if files.is_empty() {
                return Err(Error::Config(format!(
                    "no images found at {}",
                    input.display()
                )));
            }
            let images = files
                .iter()
                .map(|p| read_image(p))
                .collect::<Result<Vec<_>>>()?;
            let [h, w] = state.cfg.image_size;
            if let Some((p, _)) = files
                .iter()
                .zip(&images)
                .find(|(_, i)| i.height != h || i.width != w)
            {
                return Err(Error::Config(format!(
                    "{} is not {h}x{w} like the training images",
                    p.display()
                )));
            }
            create_dir(out)?;
            let outputs = dehaze_images(&state, &schedule, &images, nfe, cfg.train.batch)?;
            for (p, img) in files.iter().zip(&outputs) {
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                write_image(&out.join(format!("{stem}.png")), img)?;
            }
            println!("wrote {} images to {}", outputs.len(), out.display());
        }
    }
    Ok(0)
}

fn eval_cmd(pred: &Path, gt: &Path, out: Option<PathBuf>) -> Result<u8> {
    let report = eval_dirs(pred, gt)?;
    match &out {
        Some(p) => report.write_csv(std::fs::File::create(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?)?,
        None => report.write_csv(std::io::stdout())?,
    }
    for name in &report.missing {
        eprintln!("skipped {name}: no counterpart");
    }
    Ok(if report.missing.is_empty() {
        0
    } else {
        EXIT_VALIDATION
    })
}

fn oracle_cmd(seed: u64) -> Result<u8> {
    let mut checks = Vec::new();
    checks.extend(oracle::bridge_marginals(100_000, 5, 0.5, seed)?);
    checks.extend(oracle::self_similarity(100_000, 0.2, 0.6, 0.5, seed)?);
    checks.extend(oracle::ot_against_brute_force(&[4, 5, 6], 2, 1e-3, seed)?);
    checks.push(oracle::dcp_round_trip(20, 32, seed)?);
    checks.extend(oracle::regularizer_identities(seed)?);
    checks.extend(oracle::loss_gradients(5, seed)?);
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{c}");
    }
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { 0 } else { EXIT_RUNTIME })
}

fn synth_cmd(config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<u8> {
    let mut cfg = match &config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(ExperimentKind::SynthHaze),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.kind = ExperimentKind::SynthHaze;
    cfg.validate()?;
    let data = image_dataset(&cfg)?;
    let dirs = ["hazy", "clear", "test/hazy", "test/gt"].map(|d| out.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let prov_path = out.join("provenance.csv");
    let fmt = |e: csv::Error| Error::Format {
        path: prov_path.clone(),
        detail: e.to_string(),
    };
    let mut prov = csv::Writer::from_path(&prov_path).map_err(fmt)?;
    prov.write_record(["file", "set", "source"]).map_err(fmt)?;
    let sets: [(&str, &[hazebridge::Image], &[usize], &Path); 4] = [
        ("hazy", &data.hazy, &data.hazy_sources, &dirs[0]),
        ("clear", &data.clear, &data.clear_sources, &dirs[1]),
        ("test-hazy", &data.test_hazy, &data.test_sources, &dirs[2]),
        ("test-gt", &data.test_truth, &data.test_sources, &dirs[3]),
    ];
    for (set, images, sources, dir) in sets {
        for (k, (img, src)) in images.iter().zip(sources).enumerate() {
            let name = format!("{k:04}.png");
            write_image(&dir.join(&name), img)?;
            prov.write_record([name, set.to_string(), src.to_string()])
                .map_err(fmt)?;
        }
    }
    prov.flush().map_err(|e| Error::Io {
        path: prov_path.clone(),
        source: e,
    })?;
    println!(
        "wrote {} hazy, {} clear and {} test pairs to {}",
        data.hazy.len(),
        data.clear.len(),
        data.test_hazy.len(),
        out.display()
    );
    Ok(0)
}

fn prompt_cmd(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let cfg = load_config(config, seed, out)?;
    if cfg.kind == ExperimentKind::Toy2d {
        return Err(Error::Config(
            "prompt training needs an image experiment".into(),
        ));
    }
    let data = image_dataset(&cfg)?;
    let _unchecked = hazebridge_tensor::set_checked(false);
    let (prompt, accuracy) = pretrain_prompt(&cfg, &data)?;
    create_dir(&cfg.out_dir)?;
    let mut ck = Checkpoint::default();
    ck.metadata.insert("mode".into(), "prompt".into());
    ck.metadata
        .insert("encoder_tag".into(), prompt.encoder_tag.clone());
    ck.metadata
        .insert("prompt.steps".into(), prompt.steps.to_string());
    ck.metadata.insert(
        "prompt.final_loss".into(),
        format!("{:e}", prompt.final_loss),
    );
    ck.metadata.insert("config".into(), cfg.to_toml());
    ck.push("prompt.vector", &prompt.vector);
    let path = cfg.out_dir.join("prompt.hzbr");
    ck.save(&path)?;
    match accuracy {
        Some(a) => println!(
            "prompt: {} steps, final loss {:.4}, held-out accuracy {:.4}",
            prompt.steps, prompt.final_loss, a
        ),
        None => println!(
            "prompt: {} steps, final loss {:.4}",
            prompt.steps, prompt.final_loss
        ),
    }
    println!("wrote {}", path.display());
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train { config, seed, out } => train(&config, seed, out),
        Command::Infer {
            checkpoint,
            input,
            out,
            nfe,
            seed,
        } => infer_cmd(&checkpoint, &input, &out, nfe, seed),
        Command::Eval { pred, gt, out } => eval_cmd(&pred, &gt, out),
        Command::OracleCheck { seed } => oracle_cmd(seed),
        Command::SynthData { config, seed, out } => synth_cmd(config, seed, &out),
        Command::TrainPrompt { config, seed, out } => prompt_cmd(&config, seed, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
