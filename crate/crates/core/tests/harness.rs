use std::collections::HashSet;
use std::path::Path;

use hazebridge::harness::config::{ExperimentConfig, ExperimentKind};
use hazebridge::harness::data::{procedural_images, synth_haze_dataset, toy2d_dataset, PointCloud};
use hazebridge::harness::eval::eval_dirs;
use hazebridge::harness::io::{read_image, write_image};
use hazebridge::harness::metrics::{
    energy_distance, psnr, psnr_flagged, ssim_image, PSNR_SENTINEL,
};
use hazebridge::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(
        3,
        h,
        w,
        (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

/// Direct windowed SSIM: Gaussian-weighted local moments at every valid position.
fn reference_ssim(a: &Image, b: &Image, win: usize, sigma: f64) -> f64 {
    let r = win / 2;
    let g: Vec<f64> = (0..win)
        .map(|i| (-((i as f64 - r as f64).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (1e-4, 9e-4);
    let (mut total, mut count) = (0.0, 0usize);
    for c in 0..a.channels {
        for y in 0..=a.height - win {
            for x in 0..=a.width - win {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let wgt = g[dy] * g[dx] / norm;
                        let (p, q) = (a.at(c, y + dy, x + dx), b.at(c, y + dy, x + dx));
                        mx += wgt * p;
                        my += wgt * q;
                        sxx += wgt * p * p;
                        syy += wgt * q * q;
                        sxy += wgt * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn psnr_matches_independent_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let (a, b) = (random_image(&mut rng, 9, 13), random_image(&mut rng, 9, 13));
        let sse: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        let want = -10.0 * (sse / a.data.len() as f64).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-10);
    }
    let a = random_image(&mut rng, 4, 4);
    assert_eq!(psnr_flagged(&a, &a).unwrap(), (PSNR_SENTINEL, true));
    let mut b = a.clone();
    b.data.iter_mut().for_each(|v| *v = (*v + 0.1).min(2.0));
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn ssim_matches_direct_window_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_image(&mut rng, 16, 14);
    let mut b = a.clone();
    b.data
        .iter_mut()
        .for_each(|v| *v = (*v * 0.7 + rng.random_range(0.0..0.3)).min(1.0));
    assert!((ssim_image(&a, &b).unwrap() - reference_ssim(&a, &b, 11, 1.5)).abs() < 1e-10);
    assert!((ssim_image(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn energy_distance_properties() {
    let ring = toy2d_dataset(PointCloud::Ring, 400, 1).unwrap();
    let moons = toy2d_dataset(PointCloud::TwoMoons, 400, 1).unwrap();
    let ring2 = toy2d_dataset(PointCloud::Ring, 400, 2).unwrap();
    assert_eq!(energy_distance(&ring, &ring).unwrap(), 0.0);
    let (near, far) = (
        energy_distance(&ring, &ring2).unwrap(),
        energy_distance(&ring, &moons).unwrap(),
    );
    assert!(near >= 0.0 && near < 0.1 * far, "{near} vs {far}");
    let shifted = ring.add_scalar(3.0).unwrap();
    assert!(energy_distance(&ring, &shifted).unwrap() > far);
}

#[test]
fn point_clouds_have_their_shapes() {
    let ring = toy2d_dataset(PointCloud::Ring, 4096, 5).unwrap();
    let radii: Vec<f64> = ring.data().chunks(2).map(|p| p[0].hypot(p[1])).collect();
    let mean = radii.iter().sum::<f64>() / radii.len() as f64;
    assert!((mean - PointCloud::RING_RADIUS).abs() < 0.02 * PointCloud::RING_RADIUS);

    let moons = toy2d_dataset(PointCloud::TwoMoons, 4096, 5).unwrap();
    let pts: Vec<&[f64]> = moons.data().chunks(2).collect();
    let centroid = |k: usize| -> (f64, f64) {
        let sel: Vec<_> = pts.iter().skip(k).step_by(2).collect();
        let n = sel.len() as f64;
        (
            sel.iter().map(|p| p[0]).sum::<f64>() / n,
            sel.iter().map(|p| p[1]).sum::<f64>() / n,
        )
    };
    let (upper, lower) = (centroid(0), centroid(1));
    assert!(upper.1 > lower.1 + 0.5, "moons {upper:?} {lower:?}");
    assert!((upper.0 - lower.0).abs() > 0.5);

    let g = toy2d_dataset(PointCloud::Gaussians, 800, 5).unwrap();
    for p in g.data().chunks(2) {
        assert!((p[0].hypot(p[1]) - 2.0).abs() < 0.6);
    }
    assert!(toy2d_dataset(PointCloud::Ring, 10, 0).is_err());
    let again = toy2d_dataset(PointCloud::Ring, 4096, 5).unwrap();
    assert_eq!(again.data(), ring.data());
}

#[test]
fn synthetic_sets_are_unpaired_with_provenance() {
    let clear = procedural_images(64, 16, 4);
    let data = synth_haze_dataset(&clear, [0.8, 1.0], [0.35, 0.65], 6, 4).unwrap();
    assert!(data.unpaired);
    assert_eq!(data.hazy.len() + data.test_hazy.len(), 32);
    assert_eq!(data.clear.len(), 32);
    let hazy: HashSet<_> = data.hazy_sources.iter().chain(&data.test_sources).collect();
    let pool: HashSet<_> = data.clear_sources.iter().collect();
    assert!(hazy.is_disjoint(&pool));
    assert_eq!(hazy.len() + pool.len(), 64);
    for (k, &s) in data.test_sources.iter().enumerate() {
        assert_eq!(data.test_truth[k], clear[s]);
    }
    for (k, &s) in data.clear_sources.iter().enumerate() {
        assert_eq!(data.clear[k], clear[s]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let (h, c) = data.sample_batch(&mut rng, 8).unwrap();
        for (a, b) in h.iter().zip(&c) {
            assert_ne!(data.hazy_sources[*a], data.clear_sources[*b]);
        }
    }
    for d in &data.test_draws {
        assert!((0.8..=1.0).contains(&d.light) && (0.35..=0.65).contains(&d.transmission_mean));
    }
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    for kind in [
        ExperimentKind::Toy2d,
        ExperimentKind::SynthHaze,
        ExperimentKind::ImageDir,
    ] {
        let mut cfg = ExperimentConfig::new(kind);
        cfg.seed = 42;
        cfg.train.nfe = vec![1, 5];
        let text = cfg.to_toml();
        assert_eq!(toml::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }
    let ok = ExperimentConfig::from_toml("schema_version = 1\nkind = \"toy2d\"\n").unwrap();
    assert_eq!(ok.train.steps, 2000);
    assert!(ExperimentConfig::from_toml("schema_version = 2\nkind = \"toy2d\"\n").is_err());
    assert!(ExperimentConfig::from_toml("kind = \"toy2d\"\n").is_err());
    assert!(ExperimentConfig::from_toml(
        "schema_version = 1\nkind = \"toy2d\"\n[train]\nstepz = 3\n"
    )
    .is_err());
    assert!(ExperimentConfig::from_toml(
        "schema_version = 1\nkind = \"toy2d\"\n[train]\nnfe = [6]\n"
    )
    .is_err());
}

fn save_all(dir: &Path, images: &[(&str, &Image)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, img) in images {
        write_image(&dir.join(name), img).unwrap();
    }
}

#[test]
fn directory_evaluation_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (a, b, c) = (
        random_image(&mut rng, 12, 12),
        random_image(&mut rng, 12, 12),
        random_image(&mut rng, 12, 12),
    );
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    save_all(
        &pred,
        &[("a.png", &a), ("b.png", &b), ("only_pred.png", &c)],
    );
    save_all(&gt, &[("a.png", &a), ("b.png", &c), ("only_gt.ppm", &c)]);
    let ev = eval_dirs(&pred, &gt).unwrap();
    assert_eq!(
        ev.missing,
        vec!["only_gt.ppm".to_string(), "only_pred.png".to_string()]
    );
    assert_eq!(ev.lines.len(), 2);
    assert!(ev.lines[0].identical && (ev.lines[0].ssim - 1.0).abs() < 1e-12);
    let (pb, pc) = (
        read_image(&pred.join("b.png")).unwrap(),
        read_image(&gt.join("b.png")).unwrap(),
    );
    assert!((ev.lines[1].psnr - psnr(&pb, &pc).unwrap()).abs() < 1e-12);
    assert!((ev.lines[1].ssim - reference_ssim(&pb, &pc, 11, 1.5)).abs() < 1e-10);
    let mut csv = Vec::new();
    ev.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("file,psnr,ssim,identical\n"));
    assert!(text.lines().last().unwrap().starts_with("mean,"));

    let same = eval_dirs(&gt, &gt).unwrap();
    assert!((same.mean_ssim - 1.0).abs() < 1e-12);
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(eval_dirs(&empty, &gt).is_err());
}

#[test]
fn png_round_trip_is_lossless_at_eight_bits() {
    let tmp = tempfile::tempdir().unwrap();
    let img = Image::new(3, 2, 2, (0..12).map(|k| k as f64 * 20.0 / 255.0).collect()).unwrap();
    for name in ["x.png", "x.ppm"] {
        write_image(&tmp.path().join(name), &img).unwrap();
        let back = read_image(&tmp.path().join(name)).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
