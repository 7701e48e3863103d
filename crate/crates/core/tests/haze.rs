use hazebridge::harness::metrics::psnr;
use hazebridge::haze::{apply_asm, dark_channel, dcp_dehaze, DcpParams};
use hazebridge::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scene obeying the dark-channel condition: a sky band equal to the light
/// and a ground where every pixel has one zero channel.
fn valid_scene(rng: &mut ChaCha8Rng, size: usize, light: f64) -> Image {
    let mut img = Image::filled(3, size, size, light);
    let sky = size / 4;
    for y in sky..size {
        for x in 0..size {
            let dark = rng.random_range(0..3);
            for c in 0..3 {
                img.plane_mut(c)[y * size + x] = if c == dark {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                };
            }
        }
    }
    img
}

#[test]
fn dark_channel_round_trip_on_valid_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..20 {
        let light = rng.random_range(0.8..1.0);
        let t = rng.random_range(0.6..0.95);
        let j = valid_scene(&mut rng, 32, light);
        let hazy = apply_asm(&j, &Image::filled(1, 32, 32, t), &[light; 3]).unwrap();
        let r = dcp_dehaze(&hazy, &DcpParams::default()).unwrap();
        let db = psnr(&r.dehazed, &j).unwrap();
        assert!(
            db >= 30.0,
            "instance {k}: t={t:.3} A={light:.3} psnr {db:.2}"
        );
        for a in &r.atmospheric_light {
            assert!((a - light).abs() < 1e-12);
        }
    }
}

#[test]
fn scattering_model_rebuilds_input_from_estimates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let j = valid_scene(&mut rng, 24, 0.9);
    let hazy = apply_asm(&j, &Image::filled(1, 24, 24, 0.7), &[0.9; 3]).unwrap();
    let r = dcp_dehaze(&hazy, &DcpParams::default()).unwrap();
    let rebuilt = apply_asm(&r.dehazed, &r.transmission, &r.atmospheric_light).unwrap();
    for (a, b) in rebuilt.data.iter().zip(&hazy.data) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn clear_ground_has_zero_dark_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let j = valid_scene(&mut rng, 16, 1.0);
    let d = dark_channel(&j, 15).unwrap();
    assert!(d.data.iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn asm_stays_between_scene_and_light(seed in 0u64..1000, t in 0.0f64..=1.0, a in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = valid_scene(&mut rng, 8, a);
        let i = apply_asm(&j, &Image::filled(1, 8, 8, t), &[a; 3]).unwrap();
        for (x, y) in i.data.iter().zip(&j.data) {
            prop_assert!(*x >= y.min(a) - 1e-12 && *x <= y.max(a) + 1e-12);
        }
    }

    #[test]
    fn unit_transmission_is_identity(seed in 0u64..1000, a in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = valid_scene(&mut rng, 8, 0.5);
        prop_assert_eq!(apply_asm(&j, &Image::filled(1, 8, 8, 1.0), &[a; 3]).unwrap(), j);
    }
}
