use longred::positions::{
    cream_draw, sample_cream_alpha, sample_plan, skip_layout, uniform_draw, BoundaryPolicy, RangeSource,
    SamplerKind, SkipConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn cfg(sampler: SamplerKind) -> SkipConfig {
    SkipConfig::new(8, 16, BoundaryPolicy::Fixed(2), sampler).unwrap()
}

#[test]
fn lower_bound_layout() {
    let p = skip_layout(8, 16, 2, 6).unwrap();
    assert_eq!(p.indices(), [0, 1, 3, 4, 5, 6, 14, 15]);
    assert!(skip_layout(8, 16, 2, 5).is_err());
    assert!(skip_layout(8, 16, 2, 14).is_err());
}

#[test]
fn uniform_mid_end_is_uniform() {
    let c = cfg(SamplerKind::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut counts = [0usize; 8];
    for _ in 0..10_000 {
        let d = uniform_draw(&c, &mut rng).unwrap();
        assert_eq!(&d.plan.indices()[..2], &[0, 1]);
        assert_eq!(&d.plan.indices()[6..], &[14, 15]);
        counts[d.mid_end - 6] += 1;
    }
    assert!(counts.iter().all(|&n| n > 0));
    let expected = 10_000.0 / 8.0;
    let stat: f64 = counts.iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p {p}");
}

/// Probability of each rounded alpha under a Gaussian (mean `1 + k`) truncated
/// to `[1, k]`, by Simpson integration of the density.
fn alpha_oracle(k: f64, sigma: f64) -> Vec<f64> {
    let mu = 1.0 + k;
    let pdf = |x: f64| (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp();
    let integrate = |a: f64, b: f64| {
        let n = 2000;
        let h = (b - a) / n as f64;
        let mut s = pdf(a) + pdf(b);
        for i in 1..n {
            s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let top = k.floor() as usize;
    let masses: Vec<f64> = (1..=top)
        .map(|j| {
            let lo = (j as f64 - 0.5).max(1.0);
            let hi = if j == top { k } else { (j as f64 + 0.5).min(k) };
            integrate(lo, hi)
        })
        .collect();
    let total: f64 = masses.iter().sum();
    masses.iter().map(|m| m / total).collect()
}

#[test]
fn cream_alpha_matches_integration_oracle() {
    let c = SkipConfig::new(64, 256, BoundaryPolicy::Fixed(8), SamplerKind::Cream).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let n = 100_000;
    let mut hist = [0usize; 4];
    for _ in 0..n {
        hist[sample_cream_alpha(&c, &mut rng).unwrap() - 1] += 1;
    }
    let oracle = alpha_oracle(4.0, 3.0);
    let tv: f64 = hist
        .iter()
        .zip(&oracle)
        .map(|(&h, &o)| (h as f64 / n as f64 - o).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.02, "tv {tv}, hist {hist:?}, oracle {oracle:?}");
    // density rises towards the mean, so mass per unit of bin width increases with alpha
    let widths = [0.5, 1.0, 1.0, 0.5];
    for j in 1..4 {
        assert!(oracle[j] / widths[j] > oracle[j - 1] / widths[j - 1]);
    }
}

#[test]
fn cream_alpha_flattens_with_large_sigma() {
    let mut c = SkipConfig::new(64, 256, BoundaryPolicy::Fixed(8), SamplerKind::Cream).unwrap();
    c.sigma = 1e6;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let n = 40_000;
    let mut hist = [0usize; 4];
    for _ in 0..n {
        hist[sample_cream_alpha(&c, &mut rng).unwrap() - 1] += 1;
    }
    // a flat density over [1, 4]: the two end bins are half as wide
    for (h, want) in hist.iter().zip([1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]) {
        assert!((*h as f64 / n as f64 - want).abs() < 0.01, "{hist:?}");
    }
}

#[test]
fn cream_mid_end_dominates_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let n = 10_000;
    let mut cu = [0usize; 8];
    let mut cc = [0usize; 8];
    for _ in 0..n {
        cu[uniform_draw(&cfg(SamplerKind::Uniform), &mut rng).unwrap().mid_end - 6] += 1;
        let d = cream_draw(&cfg(SamplerKind::Cream), &mut rng).unwrap();
        assert_eq!(&d.plan.indices()[..2], &[0, 1]);
        assert_eq!(&d.plan.indices()[6..], &[14, 15]);
        cc[d.mid_end - 6] += 1;
    }
    let (mut fu, mut fc) = (0usize, 0usize);
    for i in 0..7 {
        fu += cu[i];
        fc += cc[i];
        assert!(fc <= fu, "cream cdf above uniform at {}", i + 6);
    }
    assert!(cc[..4].iter().sum::<usize>() < cu[..4].iter().sum::<usize>());
}

#[test]
fn cream_sources_at_desk_scale() {
    let c = SkipConfig::new(64, 256, BoundaryPolicy::CreamRandom, SamplerKind::Cream).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mut seen = Vec::new();
    for _ in 0..2000 {
        let d = cream_draw(&c, &mut rng).unwrap();
        assert_ne!(d.source, RangeSource::CreamPrinted);
        if !seen.contains(&d.source) {
            seen.push(d.source);
        }
    }
    assert!(seen.contains(&RangeSource::CreamRescaled));
}

fn check_plan(c: &SkipConfig, d: &longred::positions::SkipDraw) -> Result<(), TestCaseError> {
    let idx = d.plan.indices();
    let (t, t_l, b) = (c.input_len, c.target_len, d.boundary);
    prop_assert_eq!(idx.len(), t);
    prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
    prop_assert_eq!(idx[0], 0);
    prop_assert_eq!(idx[t - 1], t_l - 1);
    prop_assert!(idx[..b].iter().copied().eq(0..b));
    prop_assert!(idx[t - b..].iter().copied().eq(t_l - b..t_l));
    let mid = &idx[b..t - b];
    prop_assert!(mid.windows(2).all(|w| w[1] == w[0] + 1));
    prop_assert_eq!(*mid.last().unwrap(), d.mid_end);
    prop_assert!(t - b <= d.mid_end && d.mid_end <= t_l - b - 1);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_satisfy_invariants(
        t in 7usize..80,
        extra in 1usize..300,
        bfrac in 0.0f64..1.0,
        cream in any::<bool>(),
        random_boundary in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let t_l = t + extra;
        let sampler = if cream { SamplerKind::Cream } else { SamplerKind::Uniform };
        let fixed = 1 + ((t - 1) / 2 - 1).min((bfrac * t as f64 / 2.0) as usize);
        let policy = if random_boundary { BoundaryPolicy::CreamRandom } else { BoundaryPolicy::Fixed(fixed) };
        let Ok(c) = SkipConfig::new(t, t_l, policy, sampler) else {
            // only the randomized policy can be unrealizable for a short input
            prop_assert!(random_boundary);
            return Ok(());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut again = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let d = sample_plan(&c, &mut rng).unwrap();
            check_plan(&c, &d)?;
            prop_assert_eq!(d, sample_plan(&c, &mut again).unwrap());
        }
    }
}
