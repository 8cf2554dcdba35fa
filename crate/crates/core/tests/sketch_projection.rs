mod common;

use common::gaussian_vec;
use fedsel::numerics::{cos_p, GradientVector, Polarization};
use fedsel::rng;
use fedsel::sketch::{estimate_cos_p, sketch, SketchConfig, SketchMode};

fn projected(dim: usize, seed: u64) -> SketchConfig {
    SketchConfig { mode: SketchMode::SignProjection { sketch_dim: dim, seed }, per_segment: true }
}

fn gv(v: Vec<f64>) -> GradientVector {
    GradientVector::from_flat(v).unwrap()
}

#[test]
fn projection_preserves_squared_norm_in_expectation() {
    let mut r = rng::stream(5, "norm");
    let v = gaussian_vec(&mut r, 512);
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    let g = gv(v);
    let mean: f64 = (0..200)
        .map(|s| {
            let sk = sketch(&g, &projected(128, s), 0, 1).unwrap();
            sk.values.flatten().iter().map(|x| x * x).sum::<f64>()
        })
        .sum::<f64>()
        / 200.0;
    assert!((mean / norm2 - 1.0).abs() < 0.05, "E|sketch|^2 / |v|^2 = {}", mean / norm2);
}

#[test]
fn sketched_cosine_tracks_true_cosine() {
    let mut r = rng::stream(6, "cos");
    let mut close = 0;
    for trial in 0..200u64 {
        let u = gaussian_vec(&mut r, 512);
        let noise = gaussian_vec(&mut r, 512);
        let mix = (trial % 9) as f64 / 4.0 - 1.0;
        let v: Vec<f64> = u.iter().zip(&noise).map(|(a, b)| mix * a + b).collect();
        let truth = cos_p(&u, &v, 2.0, Polarization::Powered).unwrap();
        let cfg = projected(256, trial);
        let a = sketch(&gv(u), &cfg, 0, 1).unwrap();
        let b = sketch(&gv(v), &cfg, 1, 1).unwrap();
        let est = estimate_cos_p(&a, &b, 2.0, Polarization::Powered, None).unwrap();
        if (est - truth).abs() <= 0.15 {
            close += 1;
        }
    }
    assert!(close >= 190, "{close}/200 estimates within 0.15");
}

#[test]
fn projection_is_linear_and_shared_across_clients() {
    let mut r = rng::stream(7, "linear");
    let u = gaussian_vec(&mut r, 300);
    let v = gaussian_vec(&mut r, 300);
    let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    let cfg = projected(64, 42);
    let su = sketch(&gv(u), &cfg, 0, 3).unwrap().values.flatten();
    let sv = sketch(&gv(v), &cfg, 5, 3).unwrap().values.flatten();
    let ss = sketch(&gv(sum), &cfg, 9, 3).unwrap().values.flatten();
    for i in 0..64 {
        assert!((ss[i] - (2.0 * su[i] - 0.5 * sv[i])).abs() < 1e-10);
    }
}

#[test]
fn exact_mode_returns_the_gradient() {
    let mut r = rng::stream(8, "exact");
    let g = gv(gaussian_vec(&mut r, 40));
    let s = sketch(&g, &SketchConfig::default(), 2, 1).unwrap();
    assert_eq!(s.values, g);
    assert_eq!(s.byte_cost, 8 * 40);
}
