use hazebridge::bridge::BridgeSchedule;
use hazebridge::checkpoint::Checkpoint;
use hazebridge::harness::data::{procedural_images, synth_haze_dataset};
use hazebridge::nets::GeneratorConfig;
use hazebridge::prompt::PromptState;
use hazebridge::rng::SampleStreams;
use hazebridge::trainer::{infer, time_index, ImageTrainConfig, ImageTrainState};
use hazebridge::Image;
use hazebridge_tensor::Tensor;

#[test]
fn time_index_is_uniform() {
    let n = 5;
    let steps = 10_000u64;
    let mut counts = [0usize; 5];
    for s in 0..steps {
        counts[time_index(17, s, n)] += 1;
    }
    let expected = steps as f64 / n as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99.9% quantile of chi-square with 4 degrees of freedom
    assert!(chi2 < 18.47, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn inference_makes_exactly_nfe_calls() {
    let s = BridgeSchedule::new(5, 0.01).unwrap();
    let x0 = Tensor::full(&[2, 3], 0.5);
    for nfe in 1..=5 {
        let mut calls = Vec::new();
        let mut noise = SampleStreams::new(0, 1, 0);
        let y = infer(
            &x0,
            nfe,
            |x, t| {
                calls.push(t);
                Ok(x.mul_scalar(0.5)?)
            },
            &s,
            &mut noise,
        )
        .unwrap();
        assert_eq!(calls.len(), nfe);
        assert_eq!(calls[0], 0.0);
        assert_eq!(y.shape(), x0.shape());
    }
    let mut noise = SampleStreams::new(0, 1, 0);
    assert!(infer(&x0, 0, |x, _| Ok(x.clone()), &s, &mut noise).is_err());
    assert!(infer(&x0, 6, |x, _| Ok(x.clone()), &s, &mut noise).is_err());
}

fn small_state(seed: u64) -> ImageTrainState {
    let cfg = ImageTrainConfig {
        generator: GeneratorConfig {
            base_channels: 4,
            width: 8,
            blocks: 1,
        },
        nce_locations: 8,
        embed_dim: 8,
        critic_hidden: 8,
        image_size: [16, 16],
        ..ImageTrainConfig::default()
    };
    ImageTrainState::new(cfg, seed, PromptState::random(seed, 8))
}

fn batches() -> (Tensor, Tensor) {
    let clear = procedural_images(16, 16, 2);
    let data = synth_haze_dataset(&clear, [0.8, 1.0], [0.4, 0.6], 1, 2).unwrap();
    let hazy = Image::batch(&data.hazy[..4].iter().collect::<Vec<_>>()).unwrap();
    let clear = Image::batch(&data.clear[..4].iter().collect::<Vec<_>>()).unwrap();
    (hazy, clear)
}

#[test]
fn checkpoint_restores_the_exact_next_step() {
    let schedule = BridgeSchedule::new(5, 0.01).unwrap();
    let (hazy, clear) = batches();
    let mut a = small_state(4);
    for _ in 0..3 {
        a.train_step(&hazy, &clear, &schedule).unwrap();
    }
    let mut bytes = Vec::new();
    a.to_checkpoint().write_to(&mut bytes).unwrap();
    let ck = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let mut b = ImageTrainState::from_checkpoint(a.cfg, &ck).unwrap();
    assert_eq!(b.step, 3);
    let ra = a.train_step(&hazy, &clear, &schedule).unwrap();
    let rb = b.train_step(&hazy, &clear, &schedule).unwrap();
    assert_eq!(ra, rb);
    for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data(), "{na}");
    }
}

#[test]
fn training_steps_are_reproducible_and_finite() {
    let schedule = BridgeSchedule::new(5, 0.01).unwrap();
    let (hazy, clear) = batches();
    let (mut a, mut b) = (small_state(9), small_state(9));
    for _ in 0..3 {
        let (ra, rb) = (
            a.train_step(&hazy, &clear, &schedule).unwrap(),
            b.train_step(&hazy, &clear, &schedule).unwrap(),
        );
        assert_eq!(ra, rb);
        assert!(ra.total.is_finite() && ra.d_loss.is_finite() && ra.critic_bound.is_finite());
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let mut bytes = Vec::new();
    small_state(1).to_checkpoint().write_to(&mut bytes).unwrap();
    assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
    bytes.push(0);
    assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    assert!(Checkpoint::read_from(&mut &b"HZBX"[..]).is_err());
}
