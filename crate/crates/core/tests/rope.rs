use longred::model::{apply_rope, apply_rope_scaled, DecoderModel, ModelConfig, PositionPlan};
use longred::rope::{extend_abf, extend_pi, partial_sum_magnitudes, rope_bound, BoundConfig};
use longred::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn row(rng: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![1, d], |_| rng.gen_range(-1.0..1.0))
}

fn at(p: usize) -> PositionPlan {
    PositionPlan::new(vec![p], p).unwrap()
}

fn rotated_dot(q: &Tensor<f64>, k: &Tensor<f64>, m: usize, n: usize, theta: f64) -> f64 {
    let (qm, _) = apply_rope(q, q, &at(m), theta).unwrap();
    let (_, kn) = apply_rope(k, k, &at(n), theta).unwrap();
    qm.data().iter().zip(kn.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn relative_shift_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let q = row(&mut rng, 16);
        let k = row(&mut rng, 16);
        let (m, n, c) = (rng.gen_range(0..512), rng.gen_range(0..512), rng.gen_range(0..512));
        let a = rotated_dot(&q, &k, m, n, 1e4);
        let b = rotated_dot(&q, &k, m + c, n + c, 1e4);
        assert!((a - b).abs() < 1e-10, "m={m} n={n} c={c}: {a} vs {b}");
    }
}

#[test]
fn pi_position_matches_original() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let q = Tensor::from_fn(vec![6, 8], |_| rng.gen_range(-1.0..1.0));
    for s in [2usize, 4] {
        let base: Vec<usize> = vec![0, 1, 3, 7, 20, 63];
        let scaled: Vec<usize> = base.iter().map(|p| p * s).collect();
        let (a, _) = apply_rope(&q, &q, &PositionPlan::new(base, 63).unwrap(), 1e4).unwrap();
        let (b, _) =
            apply_rope_scaled(&q, &q, &PositionPlan::new(scaled, 63 * s).unwrap(), 1e4, s as f64).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }
    // scale 4 at index 8 is rotary position 2
    let (a, _) = apply_rope(&q.slice_rows(0, 1), &q.slice_rows(0, 1), &at(2), 1e4).unwrap();
    let (b, _) = apply_rope_scaled(&q.slice_rows(0, 1), &q.slice_rows(0, 1), &at(8), 1e4, 4.0).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-15);
}

#[test]
fn pi_model_matches_original_at_scaled_positions() {
    let cfg = ModelConfig::new(2, 2, 8, 32, 16, 1e4, 2.0).unwrap();
    let m: DecoderModel<f64> = DecoderModel::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut pi = m.clone();
    pi.set_config(extend_pi(&cfg, 4.0, 64).unwrap()).unwrap();
    let tokens = [1, 5, 9, 2, 31, 0];
    let orig = m.logits(&tokens, &PositionPlan::contiguous(6)).unwrap();
    let plan = PositionPlan::new((0..6).map(|p| 4 * p).collect(), 63).unwrap();
    let scaled = pi.logits(&tokens, &plan).unwrap();
    assert!(orig.max_abs_diff(&scaled) < 1e-10);
}

#[test]
fn abf_round_trip_is_exact() {
    let cfg = ModelConfig::new(2, 2, 8, 32, 16, 1e4, 2.0).unwrap();
    let ext = extend_abf(&cfg, 5e5, 64).unwrap();
    let back = extend_abf(&ext, cfg.theta, 128).unwrap();
    assert_eq!(back.theta.to_bits(), cfg.theta.to_bits());
    assert_eq!(back.inv_freq(), cfg.inv_freq());

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let q = Tensor::from_fn(vec![16, 8], |_| rng.gen_range(-1.0..1.0));
    let plan = PositionPlan::contiguous(16);
    let (a, _) = apply_rope(&q, &q, &plan, cfg.theta).unwrap();
    let (b, _) = apply_rope(&q, &q, &plan, back.theta).unwrap();
    assert_eq!(a, b);

    let m: DecoderModel<f64> = DecoderModel::init(cfg, &mut rng).unwrap();
    let mut round = m.clone();
    round.set_config(ext).unwrap();
    round.set_config(back).unwrap();
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
    let p = PositionPlan::contiguous(8);
    assert_eq!(m.logits(&tokens, &p).unwrap(), round.logits(&tokens, &p).unwrap());
}

#[test]
fn paper_settings_are_accepted() {
    let cfg = ModelConfig::new(2, 2, 8, 32, 8192, 5e5, 2.0).unwrap();
    assert_eq!(extend_abf(&cfg, 2e7, 32768).unwrap().theta, 2e7);
    assert_eq!(extend_pi(&cfg, 4.0, 32768).unwrap().pi_scale, 4.0);
}

/// Direct evaluation of `|sum_k exp(i t theta_k)|` with real arithmetic.
fn oracle(base: f64, d: usize, t: f64) -> Vec<f64> {
    let (mut re, mut im) = (0.0f64, 0.0f64);
    (0..d / 2)
        .map(|k| {
            let th = 1.0 / base.powf(2.0 * k as f64 / d as f64);
            re += (t * th).cos();
            im += (t * th).sin();
            re.hypot(im)
        })
        .collect()
}

#[test]
fn partial_sums_match_oracle() {
    let cfg = BoundConfig::new(1e4, 8, 16).unwrap();
    let got = partial_sum_magnitudes(&cfg, 3).unwrap();
    for (g, w) in got.iter().zip(oracle(1e4, 8, 3.0)) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
    for (base, d) in [(1e4, 64), (5e5, 32), (1e8, 128)] {
        let cfg = BoundConfig::new(base, d, 600).unwrap();
        for t in [0, 1, 17, 255, 600] {
            let got = partial_sum_magnitudes(&cfg, t).unwrap();
            for (j, (g, w)) in got.iter().zip(oracle(base, d, t as f64)).enumerate() {
                assert!((g - w).abs() < 1e-10, "base {base} d {d} t {t} j {j}");
                assert!(*g <= (j + 1) as f64 + 1e-12);
            }
        }
    }
}

#[test]
fn bound_grows_with_base_and_length() {
    let bases = [1e4, 1e5, 1e6, 1e8];
    let values: Vec<f64> = bases
        .iter()
        .map(|&b| rope_bound(&BoundConfig::new(b, 64, 512).unwrap()).unwrap())
        .collect();
    for w in values.windows(2) {
        assert!(w[1] > w[0], "{values:?}");
    }
    let mut prev = 0.0;
    for t in [0, 1, 2, 16, 64, 200] {
        let b = rope_bound(&BoundConfig::new(1e4, 16, t).unwrap()).unwrap();
        assert!(b >= prev);
        prev = b;
    }
}
