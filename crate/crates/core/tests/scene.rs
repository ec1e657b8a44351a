use lada::scene::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn still(rows: usize, cols: usize, diffusivity: f64, steps: usize, substeps: usize) -> SceneConfig {
    SceneConfig {
        rows,
        cols,
        diffusivity,
        velocity: VelocityField::Uniform { vx: 0.0, vy: 0.0 },
        windows: vec![],
        steps,
        substeps,
        ..SceneConfig::default()
    }
}

fn gaussian(rows: usize, cols: usize, var: f64, amplitude: f64) -> Vec<f64> {
    let (cr, cc) = ((rows / 2) as f64, (cols / 2) as f64);
    let mut v = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            v.push(amplitude * (-d2 / (2.0 * var)).exp());
        }
    }
    v
}

#[test]
fn heat_kernel() {
    let (n, d, var0) = (81, 0.1, 25.0);
    let cfg = still(n, n, d, 3, 10);
    let sim = Simulator::new(&cfg).unwrap();
    let initial = Field::new(n, n, 1, gaussian(n, n, var0, 1.0)).unwrap();
    let snaps = sim.run_from(&initial).unwrap();
    for (k, snap) in snaps.iter().enumerate() {
        let t = (k * cfg.substeps) as f64;
        let var = var0 + 2.0 * d * t;
        let exact = gaussian(n, n, var, var0 / var);
        let err = snap.values().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "step {t}: L-inf error {err:e}");
    }
}

#[test]
fn frozen_dynamics() {
    let cfg = still(10, 12, 0.0, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let init = Field::new(10, 12, 1, (0..120).map(|_| rng.random_range(400.0..1420.0)).collect()).unwrap();
    let snaps = Simulator::new(&cfg).unwrap().run_from(&init).unwrap();
    assert_eq!(snaps.len(), 5);
    assert!(snaps.iter().all(|s| *s == init));
}

#[test]
fn closed_room_conserves_mean() {
    let mut cfg = still(20, 24, 0.1, 30, 1);
    cfg.velocity = VelocityField::Vortex { strength: 0.3 };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let init = Field::new(20, 24, 1, (0..480).map(|_| rng.random_range(400.0..1420.0)).collect()).unwrap();
    let snaps = Simulator::new(&cfg).unwrap().run_from(&init).unwrap();
    for w in snaps.windows(2) {
        assert!((w[1].mean() - w[0].mean()).abs() < 1e-10 * w[0].mean());
    }
}

#[test]
fn default_scene_decays_within_range() {
    let cfg = SceneConfig::default();
    let snaps = simulate(&cfg).unwrap();
    assert_eq!(snaps.len(), cfg.steps);
    for w in snaps.windows(2) {
        assert!(w[1].mean() <= w[0].mean() + 1e-12);
    }
    for s in &snaps {
        let (lo, hi) = s.min_max();
        assert!(lo >= cfg.ambient_ppm - 1e-9 && hi <= cfg.initial_ppm + 1e-9);
    }
    assert!(snaps.last().unwrap().mean() < 0.5 * (cfg.ambient_ppm + cfg.initial_ppm));
}

#[test]
fn unstable_scenes_are_rejected() {
    assert!(Simulator::new(&still(10, 10, 0.3, 2, 1)).is_err());
    let mut fast = still(10, 10, 0.1, 2, 1);
    fast.velocity = VelocityField::Uniform { vx: 1.5, vy: 0.0 };
    assert!(Simulator::new(&fast).is_err());
    let mut inverted = still(10, 10, 0.1, 2, 1);
    inverted.ambient_ppm = 2000.0;
    assert!(Simulator::new(&inverted).is_err());
}

#[test]
fn normalization() {
    let f = Field::new(1, 4, 1, vec![400.0, 1420.0, 910.0, 1500.0]).unwrap();
    assert_eq!(normalize(&f, 400.0, 1420.0).unwrap().values(), &[0.0, 1.0, 0.5, 1.0]);
    assert!(normalize(&f, 5.0, 5.0).is_err());
}

#[test]
fn colormap_endpoints() {
    assert_eq!(colormap_value(0.0), [0.0, 0.0, 1.0]);
    assert_eq!(colormap_value(1.0), [1.0, 0.0, 0.0]);
    let f = Field::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
    let rgb = colormap_rgb(&f).unwrap();
    assert_eq!(rgb.channels(), 3);
    assert!(rgb.values().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn sensor_readings() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let field = Field::new(45, 62, 1, (0..45 * 62).map(|_| rng.random_range(400.0..1420.0)).collect()).unwrap();
    let clean = SensorSet::spread(45, 62);
    let r = sample_sensors(&field, &clean, 1).unwrap();
    for (v, &(row, col)) in r.iter().zip(&clean.positions) {
        assert_eq!(*v, field.get(0, row, col));
    }
    assert!(sample_sensors(&Field::filled(45, 62, 900.0), &clean, 1).unwrap().iter().all(|&v| v == 900.0));

    let noisy = SensorSet {
        noise_std: 0.01,
        ..clean.clone()
    };
    let a = sample_sensors(&field, &noisy, 42).unwrap();
    let b = sample_sensors(&field, &noisy, 42).unwrap();
    let c = sample_sensors(&field, &noisy, 43).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_ne!(a, c);
    assert_ne!(a, r);
}

fn triangle_sensors() -> SensorSet {
    SensorSet {
        positions: vec![(5, 5), (5, 45), (35, 20)],
        half_width: 2,
        noise_std: 0.0,
    }
}

#[test]
fn observation_of_constant_is_constant() {
    let s = SensorSet::spread(45, 62);
    let obs = observation_field(&[910.0; 7], &s, 45, 62, (400.0, 1420.0)).unwrap();
    assert!(obs.values().iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn observation_reproduces_a_plane() {
    let s = triangle_sensors();
    let plane = |r: f64, c: f64| 600.0 + 7.0 * r - 3.0 * c;
    let readings: Vec<f64> = s.positions.iter().map(|&(r, c)| plane(r as f64, c as f64)).collect();
    let (lo, hi) = (400.0, 1420.0);
    let obs = observation_field(&readings, &s, 40, 50, (lo, hi)).unwrap();

    // plane through the three readings, solved directly
    let p: Vec<(f64, f64, f64)> = s.positions.iter().zip(&readings).map(|(&(r, c), &v)| (r as f64, c as f64, v)).collect();
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let a = [[1.0, p[0].0, p[0].1], [1.0, p[1].0, p[1].1], [1.0, p[2].0, p[2].1]];
    let rhs = [p[0].2, p[1].2, p[2].2];
    let solve = |col: usize| {
        let mut m = a;
        for i in 0..3 {
            m[i][col] = rhs[i];
        }
        det(m) / det(a)
    };
    let (c0, cr, cc) = (solve(0), solve(1), solve(2));

    let inside = [(10usize, 20usize), (15, 25), (25, 21), (8, 30)];
    for (r, c) in inside {
        let expect = (c0 + cr * r as f64 + cc * c as f64 - lo) / (hi - lo);
        assert!((obs.get(0, r, c) - expect).abs() < 1e-12, "({r},{c})");
    }
    // every cell of a zone carries exactly that sensor's reading
    for (i, &v) in readings.iter().enumerate() {
        let (zr, zc) = s.zone(i, 40, 50);
        for r in zr {
            for c in zc.clone() {
                assert_eq!(obs.get(0, r, c), (v - lo) / (hi - lo));
            }
        }
    }
    // outside the hull the nearest sensor wins
    assert_eq!(obs.get(0, 39, 0), (readings[2] - lo) / (hi - lo));
}

#[test]
fn observation_needs_three_sensors() {
    let s = SensorSet {
        positions: vec![(1, 1), (5, 5)],
        half_width: 1,
        noise_std: 0.0,
    };
    assert!(observation_field(&[500.0, 600.0], &s, 10, 10, (400.0, 1420.0)).is_err());
    let collinear = SensorSet {
        positions: vec![(1, 1), (3, 3), (5, 5)],
        ..s
    };
    assert!(observation_field(&[500.0; 3], &collinear, 10, 10, (400.0, 1420.0)).is_err());
}
