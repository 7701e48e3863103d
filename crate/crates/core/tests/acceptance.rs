//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::path::Path;
use std::time::{Duration, Instant};

use hazebridge::harness::config::{ExperimentConfig, ExperimentKind};
use hazebridge::harness::data::{procedural_images, synth_haze_dataset};
use hazebridge::harness::experiment::run_experiment;
use hazebridge::harness::oracle::{
    bridge_marginals, dcp_round_trip, loss_gradients, ot_against_brute_force,
    regularizer_identities, self_similarity, OracleCheck,
};
use hazebridge::prompt::{
    embed_all, prompt_accuracy, prompt_bce_loss, train_prompt, PromptConfig, ToyEncoder,
};
use hazebridge::Result;
use hazebridge_tensor::Tensor;

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_checks(checks: &[OracleCheck]) -> Outcome {
    let shown = checks.iter().find(|c| !c.passed).unwrap_or(&checks[0]);
    let passed = checks.iter().filter(|c| c.passed).count();
    Outcome {
        passed: passed == checks.len(),
        detail: format!("{passed}/{} checks passed; first failing or first: {shown}", checks.len()),
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Result<Outcome>) -> Outcome {
    let start = Instant::now();
    let out = match f() {
        Ok(o) => o,
        Err(e) => Outcome {
            passed: false,
            detail: format!("error: {e}"),
        },
    };
    let took = start.elapsed();
    Outcome {
        passed: out.passed && took <= limit,
        detail: format!(
            "{} [{:.1}s, limit {}s]",
            out.detail,
            took.as_secs_f64(),
            limit.as_secs()
        ),
    }
}

const MINUTE: Duration = Duration::from_secs(60);

fn bridge() -> Result<Outcome> {
    Ok(from_checks(&bridge_marginals(100_000, 5, 0.5, 1)?))
}

fn self_similar() -> Result<Outcome> {
    let mut checks = self_similarity(100_000, 0.2, 0.6, 0.5, 2)?;
    checks.extend(self_similarity(100_000, 0.5, 0.9, 0.5, 3)?);
    Ok(from_checks(&checks))
}

fn prompt() -> Result<Outcome> {
    let clear = procedural_images(512, 32, 6);
    let data = synth_haze_dataset(&clear, [0.8, 1.0], [0.35, 0.65], 32, 6)?;
    let enc = ToyEncoder::new(6, 32);
    let state = train_prompt(&data.hazy, &data.clear, &enc, &PromptConfig::default(), 6)?;
    let acc = prompt_accuracy(
        &embed_all(&data.test_hazy, &enc)?,
        &embed_all(&data.test_truth, &enc)?,
        &state,
    )?;
    let bce = prompt_bce_loss(1.0, &Tensor::new(vec![0.5], &[1, 1])?)?.item()?;
    Ok(Outcome {
        passed: acc > 0.95 && bce == std::f64::consts::LN_2,
        detail: format!(
            "held-out accuracy {acc:.4} (> 0.95), BCE(0.5) = {bce:.17} (ln 2 = {:.17})",
            std::f64::consts::LN_2
        ),
    })
}

fn run_dir(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name)
}

fn toy_translation() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::new(ExperimentKind::Toy2d);
    cfg.out_dir = run_dir("toy2d");
    let s = run_experiment(&cfg)?;
    let ed = |step| {
        s.at_step(step)
            .iter()
            .map(|r| r.get("energy_distance").unwrap_or(f64::NAN))
            .fold(f64::NAN, f64::max)
    };
    let (first, last) = (ed(0), ed(s.last_step()));
    Ok(Outcome {
        passed: last < 0.25 * first,
        detail: format!(
            "energy distance {first:.4} -> {last:.4} (ratio {:.3}, need < 0.25)",
            last / first
        ),
    })
}

fn toy_dehazing() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::new(ExperimentKind::SynthHaze);
    cfg.out_dir = run_dir("synth-haze");
    let s = run_experiment(&cfg)?;
    let rows = s.at_step(s.last_step());
    let mut passed = !rows.is_empty();
    let mut parts = Vec::new();
    for r in rows {
        let (p, h) = (
            r.get("psnr").unwrap_or(f64::NAN),
            r.get("hazy_psnr").unwrap_or(f64::NAN),
        );
        passed &= p > h + 1.0;
        parts.push(format!("nfe {}: {p:.2} dB vs hazy {h:.2} dB", r.nfe));
    }
    Ok(Outcome {
        passed,
        detail: parts.join("; "),
    })
}

fn determinism() -> Result<Outcome> {
    let mut runs = Vec::new();
    for kind in [ExperimentKind::SynthHaze, ExperimentKind::Toy2d] {
        for rep in 0..2 {
            let mut cfg = ExperimentConfig::new(kind);
            cfg.seed = 99;
            cfg.train.steps = 6;
            cfg.train.eval_every = 0;
            cfg.train.checkpoint_every = 0;
            cfg.train.batch = 4;
            cfg.prompt.steps = 50;
            cfg.data.images = 48;
            cfg.data.test_pairs = 4;
            cfg.toy.points = 512;
            cfg.toy.eval_points = 128;
            cfg.toy.batch = 64;
            cfg.out_dir = run_dir(&format!("determinism-{kind:?}-{rep}"));
            run_experiment(&cfg)?;
            let read = |f: &str| {
                let path = cfg.out_dir.join(f);
                std::fs::read(&path).map_err(|source| hazebridge::Error::Io { path, source })
            };
            runs.push((kind, read("loss.csv")?, read("metrics.csv")?));
        }
    }
    let same = runs.chunks(2).all(|p| p[0].1 == p[1].1 && p[0].2 == p[1].2);
    Ok(Outcome {
        passed: same,
        detail: format!(
            "{} runs, loss and metric CSVs byte-identical per pair: {same}",
            runs.len()
        ),
    })
}

fn main() {
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        (
            "bridge marginals",
            Box::new(|| timed(Duration::from_secs(10), bridge)),
        ),
        ("self-similarity", Box::new(|| timed(MINUTE, self_similar))),
        (
            "OT oracle",
            Box::new(|| {
                timed(MINUTE, || {
                    Ok(from_checks(&ot_against_brute_force(
                        &[4, 5, 6],
                        2,
                        1e-3,
                        3,
                    )?))
                })
            }),
        ),
        (
            "autodiff",
            Box::new(|| timed(5 * MINUTE, || Ok(from_checks(&loss_gradients(5, 4)?)))),
        ),
        (
            "DCP round trip",
            Box::new(|| timed(MINUTE, || Ok(from_checks(&[dcp_round_trip(20, 32, 5)?])))),
        ),
        ("prompt learning", Box::new(|| timed(5 * MINUTE, prompt))),
        (
            "toy SB translation",
            Box::new(|| timed(5 * MINUTE, toy_translation)),
        ),
        (
            "toy dehazing",
            Box::new(|| timed(30 * MINUTE, toy_dehazing)),
        ),
        (
            "regularizer identities",
            Box::new(|| timed(MINUTE, || Ok(from_checks(&regularizer_identities(7)?)))),
        ),
        ("determinism", Box::new(|| timed(10 * MINUTE, determinism))),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.into_iter().enumerate() {
        let out = run();
        let verdict = if out.passed { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {} ({name}): {}", k + 1, out.detail);
        failed += usize::from(!out.passed);
    }
    println!("acceptance: {} of 10 passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
