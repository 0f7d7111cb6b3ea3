use locallaw::limit_law::*;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn residuals_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let r = 3.0 * rng.random::<f64>().sqrt();
        let th = 2.0 * std::f64::consts::PI * rng.random::<f64>();
        let z = C64::from_polar(r, th);
        let v = 10f64.powf(-4.0 + 6.0 * rng.random::<f64>());
        let u = -5.0 + 10.0 * rng.random::<f64>();
        let ev = solve_s(z, C64::new(u, v)).unwrap();
        assert!(ev.s.im > 0.0);
        worst = worst.max(ev.residual);
    }
    assert!(worst <= 1e-10, "worst residual {worst}");
}

#[test]
fn no_sign_flips_along_vertical_lines() {
    for z in [C64::new(0.5, 0.0), C64::new(2.0, 0.0), C64::new(0.3, 0.4)] {
        let law = support_endpoints(z).unwrap();
        for u in [0.0, 0.2, law.inner_edge(), 0.5 * law.lambda_plus, law.lambda_plus, 4.0] {
            let mut prev: Option<C64> = None;
            for k in 0..200 {
                let v = 10f64.powf(2.0 - 6.0 * k as f64 / 199.0);
                let s = solve_s(z, C64::new(u, v)).unwrap().s;
                assert!(s.im > 0.0);
                if let Some(p) = prev {
                    // consecutive v differ by a factor 1.07; s moves by a bounded relative amount
                    assert!((s - p).norm() <= 0.5 * (1.0 + p.norm()), "jump at z={z}, u={u}, v={v}");
                }
                prev = Some(s);
            }
        }
    }
}

#[test]
fn density_normalization_and_symmetry() {
    for z in [C64::new(0.0, 0.0), C64::new(0.5, 0.0), C64::new(2.0, 0.0), C64::new(0.5, 0.5)] {
        let mass = density_mass(z).unwrap();
        assert!((mass - 1.0).abs() <= 1e-4, "z = {z}: mass {mass}");
        for x in [0.1, 0.7, 1.3, 2.9] {
            let (a, b) = (limiting_density_g(z, x).unwrap(), limiting_density_g(z, -x).unwrap());
            assert!((a - b).abs() <= 1e-8);
        }
    }
}

#[test]
fn semicircle_cdf_at_one() {
    // independent quadrature of sqrt(4 - t^2)/(2 pi) on [0, 1]
    let steps = 200_000;
    let h = 1.0 / steps as f64;
    let f = |t: f64| (4.0 - t * t).sqrt() / (2.0 * std::f64::consts::PI);
    let mut acc = 0.5 * (f(0.0) + f(1.0));
    for k in 1..steps {
        acc += f(k as f64 * h);
    }
    let oracle = 0.5 + acc * h;
    assert!((limiting_cdf_G(C64::new(0.0, 0.0), 1.0).unwrap() - oracle).abs() < 1e-4);
    assert!((oracle - 0.80450).abs() < 1e-4);
}

#[test]
fn square_root_edges() {
    for z in [C64::new(0.0, 0.0), C64::new(0.5, 0.0), C64::new(2.0, 0.0)] {
        let law = support_endpoints(z).unwrap();
        let ratios: Vec<f64> = [1e-4, 1e-3, 1e-2]
            .iter()
            .map(|&t| limiting_density_g(z, law.lambda_plus - t).unwrap() / t.sqrt())
            .collect();
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
        assert!(lo > 0.05 && hi < 20.0 && hi / lo < 2.0, "z = {z}: {ratios:?}");
    }
}

#[test]
fn eta_sensitivity_is_small() {
    let z = C64::new(0.5, 0.0);
    for x in [0.0, 0.8, 1.9] {
        let a = limiting_density_eta(z, x, 1e-9).unwrap();
        let b = limiting_density_eta(z, x, 1e-8).unwrap();
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn log_potential_matches_closed_form() {
    let mut zs = Vec::new();
    for (k, r) in [0.0, 0.15, 0.3, 0.45, 0.6, 0.75, 0.85, 0.95, 1.05, 1.2, 1.5, 2.0, 2.5, 3.0].iter().enumerate() {
        zs.push(C64::from_polar(*r, 0.7 * k as f64));
    }
    zs.extend([C64::new(0.2, 0.3), C64::new(-0.4, 0.1), C64::new(0.0, -1.7), C64::new(1.1, 1.1), C64::new(-2.2, 0.5), C64::new(0.01, 0.0)]);
    assert_eq!(zs.len(), 20);
    for z in zs {
        let got = log_potential_limit(z).unwrap();
        let want = log_potential_closed_form(z);
        assert!((got - want).abs() <= 1e-3, "z = {z}: {got} vs {want}");
    }
    assert!(log_potential_limit(C64::new(1.0, 0.0)).unwrap().abs() <= 1e-3);
}

#[test]
fn quantile_atoms_are_symmetric_and_sorted() {
    let table = LimitingCdf::new(C64::new(0.5, 0.0)).unwrap();
    let atoms = table.quantile_atoms(64).unwrap();
    assert!(atoms.windows(2).all(|w| w[0] < w[1]));
    for k in 0..32 {
        assert!((atoms[k] + atoms[63 - k]).abs() < 1e-12);
    }
}
