use ndarray::Array2;
use seanet_core::encoders::oracle_visual_embed;
use seanet_core::signal::{synth_source, SourceKind, Waveform};

const FPS: f64 = 25.0;
const DIM: usize = 32;
const WIN: usize = 32;
const HOP: usize = 16;

fn frames(w: &Waveform) -> usize {
    (w.len() - WIN) / HOP + 1
}

fn embed(w: &Waveform) -> Array2<f64> {
    oracle_visual_embed(w, frames(w), DIM, FPS, HOP).data
}

/// Log RMS per audio frame.
fn envelope(w: &Waveform) -> Vec<f64> {
    (0..frames(w))
        .map(|f| {
            let seg = &w.samples()[f * HOP..f * HOP + WIN];
            (seg.iter().map(|x| x * x).sum::<f64>() / WIN as f64 + 1e-10).sqrt().ln()
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt().max(1e-300)
}

/// Per-dimension correlation with `env`, averaged over seeds.
fn seed_averaged(pairs: impl Iterator<Item = (Waveform, Waveform)>) -> Vec<f64> {
    let mut acc = vec![0.0; DIM];
    let mut count = 0.0;
    for (cue, env_src) in pairs {
        let e = embed(&cue);
        let env = envelope(&env_src);
        for (d, c) in e.columns().into_iter().enumerate() {
            acc[d] += pearson(&c.to_vec(), &env);
        }
        count += 1.0;
    }
    acc.iter().map(|a| a / count).collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn speech(seed: u64) -> Waveform {
    synth_source(SourceKind::Speechlike, 2.0, seed).unwrap()
}

/// Seed-averaged correlations measured over seeds 0..100: at most 0.059
/// against independent sources of every kind, 0.913 against the target.
const INDEPENDENT_MAX: f64 = 0.075;
const OWN_MIN: f64 = 0.85;

#[test]
fn oracle_tracks_target_and_ignores_independent_sources() {
    let own = seed_averaged((0..100).map(|seed| (speech(seed), speech(seed))));
    assert!(max_abs(&own) >= OWN_MIN, "{}", max_abs(&own));
    for (kind, offset) in [
        (SourceKind::Speechlike, 1000),
        (SourceKind::BroadbandNoise, 2000),
        (SourceKind::MusicLike, 3000),
        (SourceKind::Tonal, 4000),
    ] {
        let other = seed_averaged((0..100).map(|seed| (speech(seed), synth_source(kind, 2.0, seed + offset).unwrap())));
        assert!(max_abs(&other) <= INDEPENDENT_MAX, "{kind:?}: {}", max_abs(&other));
    }
}

#[test]
fn oracle_is_deterministic() {
    assert_eq!(embed(&speech(4)), embed(&speech(4)));
}

/// Lag in frames maximising the normalised cross-correlation of `b`
/// against `a`.
fn best_lag(a: &Array2<f64>, b: &Array2<f64>, max_lag: usize) -> usize {
    let l = a.nrows();
    (0..=max_lag)
        .max_by(|&x, &y| {
            let score = |lag: usize| {
                let n = l - lag;
                (0..n).map(|t| a.row(t).dot(&b.row(t + lag))).sum::<f64>() / n as f64
            };
            score(x).total_cmp(&score(y))
        })
        .unwrap()
}

#[test]
fn shifting_the_target_shifts_the_embedding() {
    let shift = 1600;
    let expected = shift / HOP;
    let video_frame = (16000.0 / FPS) as usize / HOP;
    for seed in 0..10 {
        let s = speech(seed);
        let mut shifted = vec![0.0; shift];
        shifted.extend_from_slice(&s.samples()[..s.len() - shift]);
        let shifted = Waveform::new(shifted, s.sample_rate()).unwrap();
        let lag = best_lag(&embed(&s), &embed(&shifted), 300);
        assert!(lag.abs_diff(expected) <= video_frame / 2, "seed {seed}: lag {lag}, expected {expected}");
    }
}
