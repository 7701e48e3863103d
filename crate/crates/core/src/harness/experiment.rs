//! Runs a configured experiment and writes its artifacts:
//!
//! ```text
//! <out>/config.toml    configuration snapshot
//! <out>/seed.txt       seed
//! <out>/git.txt        `git describe` of the working tree, or "unknown"
//! <out>/loss.csv       one row per step (see StepReport::COLUMNS)
//! <out>/timing.csv     step,wall_ms
//! <out>/metrics.csv    one row per evaluation and NFE
//! <out>/prompt.csv     prompt training summary (image modes)
//! <out>/checkpoints/   step_<n>.hzbr and final.hzbr
//! <out>/samples/       PNG grids
//! ```

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hazebridge_tensor::{no_grad, set_checked, Tensor};

use crate::bridge::BridgeSchedule;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::prompt::{embed_all, prompt_accuracy, train_prompt, PromptState, ToyEncoder};
use crate::rng::substream;
use crate::trainer::{infer, inference_noise, ImageTrainState, PointTrainState, StepReport};

use super::config::{ExperimentConfig, ExperimentKind};
use super::data::{
    procedural_images, sample_rows, synth_haze_dataset, toy2d_dataset, UnpairedDataset,
};
use super::io::{grid, write_image};
use super::metrics::{energy_distance, psnr, ssim_image};

const DATA_TAG: u64 = 0x6461_7461;
const SAMPLE_GRID: usize = 8;

/// Metrics of one evaluation at one NFE.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub nfe: usize,
    pub values: Vec<(&'static str, f64)>,
}

impl EvalRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub evaluations: Vec<EvalRow>,
    pub losses: Vec<StepReport>,
    pub prompt_accuracy: Option<f64>,
}

impl RunSummary {
    /// Rows of the evaluation at `step`.
    pub fn at_step(&self, step: u64) -> Vec<&EvalRow> {
        self.evaluations.iter().filter(|r| r.step == step).collect()
    }

    pub fn last_step(&self) -> u64 {
        self.evaluations.iter().map(|r| r.step).max().unwrap_or(0)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))
}

fn write_row<S: AsRef<[u8]>>(
    w: &mut csv::Writer<File>,
    path: &Path,
    row: impl IntoIterator<Item = S>,
) -> Result<()> {
    w.write_record(row)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn flush(w: &mut csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `git describe --always --dirty` of the current directory.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Writes rows of evaluations; the header comes from the first row.
struct MetricsCsv {
    path: PathBuf,
    writer: csv::Writer<File>,
    header: bool,
}

impl MetricsCsv {
    fn new(path: PathBuf) -> Result<MetricsCsv> {
        Ok(MetricsCsv {
            writer: csv_writer(&path)?,
            path,
            header: false,
        })
    }

    fn push(&mut self, row: &EvalRow) -> Result<()> {
        if !self.header {
            let mut head = vec!["step".to_string(), "nfe".to_string()];
            head.extend(row.values.iter().map(|(n, _)| n.to_string()));
            write_row(&mut self.writer, &self.path, head)?;
            self.header = true;
        }
        let mut rec = vec![row.step.to_string(), row.nfe.to_string()];
        rec.extend(row.values.iter().map(|(_, v)| format!("{v:e}")));
        write_row(&mut self.writer, &self.path, rec)?;
        flush(&mut self.writer, &self.path)
    }
}

struct Logs {
    loss_path: PathBuf,
    loss: csv::Writer<File>,
    timing_path: PathBuf,
    timing: csv::Writer<File>,
}

impl Logs {
    fn new(out: &Path) -> Result<Logs> {
        let (loss_path, timing_path) = (out.join("loss.csv"), out.join("timing.csv"));
        let mut logs = Logs {
            loss: csv_writer(&loss_path)?,
            timing: csv_writer(&timing_path)?,
            loss_path,
            timing_path,
        };
        write_row(&mut logs.loss, &logs.loss_path, StepReport::COLUMNS)?;
        write_row(&mut logs.timing, &logs.timing_path, ["step", "wall_ms"])?;
        Ok(logs)
    }

    fn push(&mut self, r: &StepReport, started: Instant) -> Result<()> {
        write_row(&mut self.loss, &self.loss_path, r.values())?;
        let ms = started.elapsed().as_secs_f64() * 1e3;
        write_row(
            &mut self.timing,
            &self.timing_path,
            [r.step.to_string(), format!("{ms:.3}")],
        )
    }

    fn flush(&mut self) -> Result<()> {
        flush(&mut self.loss, &self.loss_path)?;
        flush(&mut self.timing, &self.timing_path)
    }
}

fn due(step: u64, every: u64, last: u64) -> bool {
    step == last || (every > 0 && step % every == 0)
}

/// Runs the experiment described by `cfg`, writing into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    for dir in [out.clone(), out.join("checkpoints"), out.join("samples")] {
        create_dir(&dir)?;
    }
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    write_text(&out.join("seed.txt"), &format!("{}\n", cfg.seed))?;
    write_text(&out.join("git.txt"), &format!("{}\n", git_describe()))?;
    let _unchecked = set_checked(false);
    match cfg.kind {
        ExperimentKind::Toy2d => run_points(cfg, &out),
        ExperimentKind::SynthHaze | ExperimentKind::ImageDir => run_images(cfg, &out),
    }
}

/// Builds the training data an image experiment would use.
pub fn image_dataset(cfg: &ExperimentConfig) -> Result<UnpairedDataset> {
    match cfg.kind {
        ExperimentKind::SynthHaze => {
            let clear = procedural_images(cfg.data.images, cfg.data.size, cfg.seed);
            synth_haze_dataset(
                &clear,
                cfg.data.light_range,
                cfg.data.transmission_range,
                cfg.data.test_pairs,
                cfg.seed,
            )
        }
        ExperimentKind::ImageDir => {
            let (Some(h), Some(c)) = (&cfg.data.hazy_dir, &cfg.data.clear_dir) else {
                return Err(Error::Config(
                    "image-dir experiments need data.hazy_dir and data.clear_dir".into(),
                ));
            };
            UnpairedDataset::from_dirs(h, c)
        }
        ExperimentKind::Toy2d => Err(Error::Config(
            "point-cloud experiments have no image dataset".into(),
        )),
    }
}

/// Prompt trained on the hazy and clear training sets; also returns the
/// pairwise accuracy on held-out pairs when ground truth exists.
pub fn pretrain_prompt(
    cfg: &ExperimentConfig,
    data: &UnpairedDataset,
) -> Result<(PromptState, Option<f64>)> {
    let encoder = ToyEncoder::new(cfg.seed, cfg.prompt.embed_dim);
    let prompt = train_prompt(&data.hazy, &data.clear, &encoder, &cfg.prompt, cfg.seed)?;
    let accuracy = if data.test_hazy.is_empty() {
        None
    } else {
        let eh = embed_all(&data.test_hazy, &encoder)?;
        let ec = embed_all(&data.test_truth, &encoder)?;
        Some(prompt_accuracy(&eh, &ec, &prompt)?)
    };
    Ok((prompt, accuracy))
}

/// Dehazes `images` with `nfe` generator calls, in batches; image `k` always
/// receives the same noise whatever the batch size.
pub fn dehaze_images(
    state: &ImageTrainState,
    schedule: &BridgeSchedule,
    images: &[Image],
    nfe: usize,
    batch: usize,
) -> Result<Vec<Image>> {
    let _g = no_grad();
    let mut out = Vec::with_capacity(images.len());
    for (chunk_idx, chunk) in images.chunks(batch.max(1)).enumerate() {
        let x0 = Image::batch(&chunk.iter().collect::<Vec<_>>())?;
        let mut noise = inference_noise(state.seed, (chunk_idx * batch.max(1)) as u64);
        let x1 = infer(&x0, nfe, |x, t| state.predict(x, t), schedule, &mut noise)?;
        out.extend(Image::unbatch(&x1)?.into_iter().map(Image::clamped));
    }
    Ok(out)
}

fn evaluate_images(
    state: &ImageTrainState,
    cfg: &ExperimentConfig,
    data: &UnpairedDataset,
    schedule: &BridgeSchedule,
    out: &Path,
) -> Result<Vec<EvalRow>> {
    let step = state.step;
    let (inputs, truth) = if data.test_hazy.is_empty() {
        (&data.hazy[..data.hazy.len().min(SAMPLE_GRID)], None)
    } else {
        (&data.test_hazy[..], Some(&data.test_truth))
    };
    let mut rows = Vec::new();
    let mut tiles: Vec<Image> = inputs.iter().take(SAMPLE_GRID).cloned().collect();
    for &nfe in &cfg.train.nfe {
        let pred = dehaze_images(state, schedule, inputs, nfe, cfg.train.batch)?;
        tiles.extend(pred.iter().take(SAMPLE_GRID).cloned());
        if let Some(truth) = truth {
            let n = pred.len() as f64;
            let mut v = [0.0; 4];
            for ((p, h), g) in pred.iter().zip(inputs).zip(truth.iter()) {
                v[0] += psnr(p, g)? / n;
                v[1] += ssim_image(p, g)? / n;
                v[2] += psnr(h, g)? / n;
                v[3] += ssim_image(h, g)? / n;
            }
            rows.push(EvalRow {
                step,
                nfe,
                values: vec![
                    ("psnr", v[0]),
                    ("ssim", v[1]),
                    ("hazy_psnr", v[2]),
                    ("hazy_ssim", v[3]),
                ],
            });
        }
    }
    if let Some(truth) = truth {
        tiles.extend(truth.iter().take(SAMPLE_GRID).cloned());
    }
    let columns = inputs.len().min(SAMPLE_GRID);
    let sheet = grid(&tiles.iter().collect::<Vec<_>>(), columns)?;
    write_image(
        &out.join("samples").join(format!("step_{step:06}.png")),
        &sheet,
    )?;
    Ok(rows)
}

fn image_checkpoint(state: &ImageTrainState, cfg: &ExperimentConfig) -> Checkpoint {
    let mut ck = state.to_checkpoint();
    ck.metadata.insert("config".into(), cfg.to_toml());
    ck
}

fn run_images(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let schedule = cfg.schedule()?;
    let data = image_dataset(cfg)?;
    if data.hazy.len() < 2 || data.clear.len() < 2 {
        return Err(Error::Config(
            "training sets need at least two images each".into(),
        ));
    }
    let (h, w) = (data.hazy[0].height, data.hazy[0].width);
    if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
        return Err(Error::Config(format!(
            "training images are {h}x{w}; both sides must be multiples of 4 and at least 8"
        )));
    }
    let (prompt, accuracy) = pretrain_prompt(cfg, &data)?;
    {
        let path = out.join("prompt.csv");
        let mut w = csv_writer(&path)?;
        write_row(&mut w, &path, ["steps", "final_loss", "heldout_accuracy"])?;
        let acc = accuracy.map_or_else(String::new, |a| format!("{a:e}"));
        write_row(
            &mut w,
            &path,
            [
                prompt.steps.to_string(),
                format!("{:e}", prompt.final_loss),
                acc,
            ],
        )?;
        flush(&mut w, &path)?;
    }
    let mut train_cfg = cfg.image_train_config();
    train_cfg.image_size = [h, w];
    let mut state = ImageTrainState::new(train_cfg, cfg.seed, prompt);
    let mut metrics = MetricsCsv::new(out.join("metrics.csv"))?;
    let mut logs = Logs::new(out)?;
    let mut summary = RunSummary {
        out_dir: out.to_path_buf(),
        evaluations: Vec::new(),
        losses: Vec::new(),
        prompt_accuracy: accuracy,
    };
    let mut record = |rows: Vec<EvalRow>, summary: &mut RunSummary| -> Result<()> {
        for r in rows {
            metrics.push(&r)?;
            summary.evaluations.push(r);
        }
        Ok(())
    };
    record(
        evaluate_images(&state, cfg, &data, &schedule, out)?,
        &mut summary,
    )?;
    let started = Instant::now();
    for step in 0..cfg.train.steps {
        let (h, c) =
            data.sample_batch(&mut substream(cfg.seed, &[DATA_TAG, step]), cfg.train.batch)?;
        let report = state.train_step(&data.hazy_batch(&h)?, &data.clear_batch(&c)?, &schedule)?;
        logs.push(&report, started)?;
        summary.losses.push(report);
        let done = step + 1;
        if due(done, cfg.train.eval_every, cfg.train.steps) {
            logs.flush()?;
            record(
                evaluate_images(&state, cfg, &data, &schedule, out)?,
                &mut summary,
            )?;
        }
        if due(done, cfg.train.checkpoint_every, cfg.train.steps) {
            image_checkpoint(&state, cfg)
                .save(&out.join("checkpoints").join(format!("step_{done:06}.hzbr")))?;
        }
    }
    logs.flush()?;
    image_checkpoint(&state, cfg).save(&out.join("checkpoints").join("final.hzbr"))?;
    Ok(summary)
}

/// Rasterises target (grey) and generated (red) points onto one square image.
fn scatter(target: &Tensor, generated: &Tensor, size: usize, extent: f64) -> Image {
    let mut img = Image::filled(3, size, size, 1.0);
    let mut plot = |pts: &Tensor, rgb: [f64; 3]| {
        for p in pts.data().chunks_exact(2) {
            let px = ((p[0] + extent) / (2.0 * extent) * size as f64).floor();
            let py = ((extent - p[1]) / (2.0 * extent) * size as f64).floor();
            if px >= 0.0 && py >= 0.0 && (px as usize) < size && (py as usize) < size {
                for (c, v) in rgb.iter().enumerate() {
                    img.plane_mut(c)[py as usize * size + px as usize] = *v;
                }
            }
        }
    };
    plot(target, [0.6, 0.6, 0.6]);
    plot(generated, [0.85, 0.1, 0.1]);
    img
}

/// Energy distance of generated points to held-out target points for each NFE.
pub fn evaluate_points(
    state: &PointTrainState,
    cfg: &ExperimentConfig,
    schedule: &BridgeSchedule,
    source: &Tensor,
    target: &Tensor,
) -> Result<(Vec<EvalRow>, Vec<Tensor>)> {
    let _g = no_grad();
    let baseline = energy_distance(source, target)?;
    let mut rows = Vec::new();
    let mut generated = Vec::new();
    for &nfe in &cfg.train.nfe {
        let mut noise = inference_noise(state.seed, 0);
        let x1 = infer(
            source,
            nfe,
            |x, t| state.predict(x, t),
            schedule,
            &mut noise,
        )?;
        rows.push(EvalRow {
            step: state.step,
            nfe,
            values: vec![
                ("energy_distance", energy_distance(&x1, target)?),
                ("source_energy_distance", baseline),
            ],
        });
        generated.push(x1);
    }
    Ok((rows, generated))
}

fn run_points(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let schedule = cfg.schedule()?;
    let toy = cfg.toy;
    let source = toy2d_dataset(toy.source, toy.points, cfg.seed)?;
    let target = toy2d_dataset(toy.target, toy.points, cfg.seed ^ 1)?;
    let eval_source = toy2d_dataset(toy.source, toy.eval_points.max(100), cfg.seed ^ 2)?;
    let eval_target = toy2d_dataset(toy.target, toy.eval_points.max(100), cfg.seed ^ 3)?;
    let mut state = PointTrainState::new(
        cfg.weights,
        cfg.optim,
        cfg.seed,
        cfg.model.point_hidden,
        cfg.model.critic_hidden,
    );
    let mut metrics = MetricsCsv::new(out.join("metrics.csv"))?;
    let mut logs = Logs::new(out)?;
    let mut summary = RunSummary {
        out_dir: out.to_path_buf(),
        evaluations: Vec::new(),
        losses: Vec::new(),
        prompt_accuracy: None,
    };
    let mut evaluate = |state: &PointTrainState, summary: &mut RunSummary| -> Result<()> {
        let (rows, generated) = evaluate_points(state, cfg, &schedule, &eval_source, &eval_target)?;
        for r in rows {
            metrics.push(&r)?;
            summary.evaluations.push(r);
        }
        if let Some(last) = generated.last() {
            let img = scatter(&eval_target, last, 160, 2.5);
            write_image(
                &out.join("samples")
                    .join(format!("step_{:06}.png", state.step)),
                &img,
            )?;
        }
        Ok(())
    };
    evaluate(&state, &mut summary)?;
    let started = Instant::now();
    for step in 0..cfg.train.steps {
        let mut rng = substream(cfg.seed, &[DATA_TAG, step]);
        let x0 = sample_rows(&mut rng, &source, toy.batch)?;
        let x1 = sample_rows(&mut rng, &target, toy.batch)?;
        let report = state.train_step(&x0, &x1, &schedule)?;
        logs.push(&report, started)?;
        summary.losses.push(report);
        let done = step + 1;
        if due(done, cfg.train.eval_every, cfg.train.steps) {
            logs.flush()?;
            evaluate(&state, &mut summary)?;
        }
        if due(done, cfg.train.checkpoint_every, cfg.train.steps) {
            let mut ck = state.to_checkpoint();
            ck.metadata.insert("config".into(), cfg.to_toml());
            ck.save(&out.join("checkpoints").join(format!("step_{done:06}.hzbr")))?;
        }
    }
    logs.flush()?;
    let mut ck = state.to_checkpoint();
    ck.metadata.insert("config".into(), cfg.to_toml());
    ck.save(&out.join("checkpoints").join("final.hzbr"))?;
    Ok(summary)
}
