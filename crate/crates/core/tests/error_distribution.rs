use georewrite_core::corruptor::{ErrorType, ErrorTypeSampler, DEFAULT_ERROR_WEIGHTS};
use georewrite_core::rng::seeded;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn error_type_frequencies_match_the_published_shares() {
    const N: usize = 100_000;
    let sampler = ErrorTypeSampler::new(&DEFAULT_ERROR_WEIGHTS).unwrap();
    let mut counts = [0usize; 5];
    let mut rng = seeded(20_24);
    for _ in 0..N {
        counts[sampler.sample(&mut rng).index()] += 1;
    }
    let total: f64 = DEFAULT_ERROR_WEIGHTS.iter().sum();
    let stat: f64 = ErrorType::ALL
        .iter()
        .map(|t| {
            let expected = N as f64 * DEFAULT_ERROR_WEIGHTS[t.index()] / total;
            (counts[t.index()] as f64 - expected).powi(2) / expected
        })
        .sum();
    let critical = ChiSquared::new(4.0).unwrap().inverse_cdf(0.99);
    assert!(
        stat < critical,
        "chi-square {stat:.3} >= {critical:.3}, counts {counts:?}"
    );
}
