use podq::env::Action;
use podq::replay::{ReplayBuffer, Transition};
use podq::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn transition(episode: u64, step: u32) -> Transition {
    Transition {
        observation: Tensor::full(&[1, 2, 2], step as f32),
        action: Action::Forward,
        reward: 0.0,
        next_observation: Tensor::full(&[1, 2, 2], step as f32 + 1.0),
        done: false,
        episode,
        step,
    }
}

/// Upper 1% point of chi-square with `df` degrees of freedom (Wilson-Hilferty).
fn chi2_crit_01(df: f64) -> f64 {
    let z = 2.326_347_874;
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

fn chi2(counts: &[u64], draws: u64) -> f64 {
    let e = draws as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn stacked_sampling_is_uniform() {
    let mut b = ReplayBuffer::new(1000).unwrap();
    for i in 0..1000u32 {
        b.push(transition((i / 25) as u64, i % 25));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0u64; 1000];
    let draws = 100_000u64;
    for _ in 0..draws / 32 {
        for i in b.sample_stacked(32, 4, &mut rng).unwrap().indices {
            counts[i] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let stat = chi2(&counts, total);
    let crit = chi2_crit_01(999.0);
    assert!(stat < crit, "chi-square {stat:.1} >= {crit:.1}");
    let e = total as f64 / 1000.0;
    let sigma = (e * (1.0 - 1.0 / 1000.0)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - e).abs() < 4.0 * sigma, "index {i}: {c}");
    }
}

#[test]
fn sequence_starts_are_uniform() {
    let mut b = ReplayBuffer::new(1000).unwrap();
    let n = 200u32;
    for s in 0..n {
        b.push(transition(0, s));
    }
    let starts = b.valid_starts(4);
    assert_eq!(starts.len(), (n - 3) as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut counts = vec![0u64; starts.len()];
    let draws = 100_000u64;
    for _ in 0..draws / 8 {
        for w in b.sample_sequences(8, 4, &mut rng).unwrap() {
            counts[w.start] += 1;
        }
    }
    let stat = chi2(&counts, draws);
    let crit = chi2_crit_01((starts.len() - 1) as f64);
    assert!(stat < crit, "chi-square {stat:.1} >= {crit:.1}");
}
