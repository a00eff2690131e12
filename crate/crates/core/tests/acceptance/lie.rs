use std::time::Instant;

use driftalign::lie::{twist_exp, twist_log, Twist};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn random_twist(rng: &mut ChaCha8Rng) -> Twist {
    let dir = loop {
        let d = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n: f64 = d.norm();
        if n > 1e-3 && n <= 1.0 {
            break d / n;
        }
    };
    let omega = dir * rng.random_range(0.0..=3.0);
    let v = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
    Twist::new(omega, v)
}

pub fn criterion() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut roundtrip, mut ortho, mut det) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let xi = random_twist(&mut rng);
        let g = twist_exp(&xi).unwrap();
        let back = twist_log(&g).unwrap();
        let d = (0..6).map(|k| (back.to_array()[k] - xi.to_array()[k]).abs()).fold(0.0, f64::max);
        let g2 = twist_exp(&back).unwrap();
        let d2 = (g2.rotation - g.rotation).abs().max().max((g2.translation - g.translation).abs().max());
        roundtrip = roundtrip.max(d).max(d2);
        let r = g.rotation;
        ortho = ortho.max((r.transpose() * r - Matrix3::identity()).abs().max());
        det = det.max((r.determinant() - 1.0).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        "1",
        "lie algebra",
        roundtrip < 1e-9 && ortho < 1e-9 && det < 1e-9 && secs < 1.0,
        format!("roundtrip {roundtrip:.2e} < 1e-9, orthonormality {ortho:.2e} < 1e-9, |det-1| {det:.2e}, {secs:.3} s < 1 s"),
    )
}
