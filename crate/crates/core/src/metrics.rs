//! Reference-based quality metrics and the incorrect-extraction counter.

use serde::{Deserialize, Serialize};

use crate::autograd::SiSdrParts;
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Stabiliser for log-ratio denominators and the projection coefficient.
pub const EPS: f64 = 1e-12;

fn check_pair(est: &Waveform, reference: &Waveform) -> Result<()> {
    est.check_compatible(reference, "metric inputs")?;
    if reference.energy() == 0.0 {
        return Err(Error::ZeroEnergy("reference"));
    }
    Ok(())
}

/// Scale-invariant SDR in dB.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(est, reference)?;
    Ok(SiSdrParts::new(est.samples(), reference.samples(), EPS).value())
}

/// Negative SI-SDR, the training criterion.
pub fn si_sdr_loss(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr(est, reference).map(|v| -v)
}

/// Energy-ratio SDR: `10·log10(‖r‖² / (‖e − r‖² + ε))`.
pub fn sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(est, reference)?;
    let err: f64 = est.samples().iter().zip(reference.samples()).map(|(e, r)| (e - r).powi(2)).sum();
    Ok(10.0 * (reference.energy() / (err + EPS)).log10())
}

pub type MetricFn = fn(&Waveform, &Waveform) -> Result<f64>;

/// `metric(est, ref) − metric(mixture, ref)`.
pub fn improvement(metric: MetricFn, est: &Waveform, mixture: &Waveform, reference: &Waveform) -> Result<f64> {
    Ok(metric(est, reference)? - metric(mixture, reference)?)
}

/// How a segment is judged to have captured the noise instead of the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncorrectRule {
    /// `si_sdr(ŝ, s) < si_sdr(ŝ, n) − μ`: the estimate is closer to the noise.
    #[default]
    Similarity,
    /// `l(ŝ, s) < l(ŝ, n) − μ` with `l = −si_sdr`, read literally.
    LiteralLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncorrectConfig {
    pub segment_s: f64,
    pub mu_db: f64,
    pub rule: IncorrectRule,
}

impl Default for IncorrectConfig {
    fn default() -> Self {
        Self { segment_s: 0.5, mu_db: 1.0, rule: IncorrectRule::Similarity }
    }
}

/// SI-SDR of a segment, `−∞` when the reference segment is silent.
fn segment_score(est: &[f64], reference: &[f64]) -> f64 {
    if reference.iter().all(|&r| r == 0.0) {
        f64::NEG_INFINITY
    } else {
        SiSdrParts::new(est, reference, EPS).value()
    }
}

/// Counts full segments of `cfg.segment_s` seconds that are judged incorrect.
/// A trailing partial segment is ignored.
pub fn count_incorrect_segments(est: &Waveform, target: &Waveform, noise: &Waveform, cfg: &IncorrectConfig) -> Result<usize> {
    est.check_compatible(target, "incorrect-extraction inputs")?;
    est.check_compatible(noise, "incorrect-extraction inputs")?;
    let seg = (cfg.segment_s * est.sample_rate() as f64).round() as usize;
    if !(cfg.segment_s > 0.0) || seg < 2 {
        return Err(Error::SegmentTooShort(seg));
    }
    let (e, s, n) = (est.samples(), target.samples(), noise.samples());
    let count = (0..e.len() / seg)
        .filter(|&i| {
            let r = i * seg..(i + 1) * seg;
            let to_target = segment_score(&e[r.clone()], &s[r.clone()]);
            let to_noise = segment_score(&e[r.clone()], &n[r]);
            match cfg.rule {
                IncorrectRule::Similarity => to_target < to_noise - cfg.mu_db,
                IncorrectRule::LiteralLoss => -to_target < -to_noise - cfg.mu_db,
            }
        })
        .count();
    Ok(count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub si_sdr: f64,
    pub sdr: f64,
    pub si_sdri: f64,
    pub sdri: f64,
    pub incorrect_segments: usize,
}

impl UtteranceMetrics {
    pub fn compute(
        id: impl Into<String>,
        est: &Waveform,
        mixture: &Waveform,
        target: &Waveform,
        noise: &Waveform,
        incorrect: &IncorrectConfig,
    ) -> Result<Self> {
        let si = si_sdr(est, target)?;
        let sd = sdr(est, target)?;
        Ok(Self {
            id: id.into(),
            si_sdr: si,
            sdr: sd,
            si_sdri: si - si_sdr(mixture, target)?,
            sdri: sd - sdr(mixture, target)?,
            incorrect_segments: count_incorrect_segments(est, target, noise, incorrect)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub id: String,
    pub error: String,
}

/// Per-utterance rows with their means.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub si_sdr: f64,
    pub sdr: f64,
    pub si_sdri: f64,
    pub sdri: f64,
    pub incorrect_segment_count: usize,
    pub rows: Vec<UtteranceMetrics>,
    #[serde(default)]
    pub failures: Vec<ItemFailure>,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<UtteranceMetrics>, failures: Vec<ItemFailure>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&UtteranceMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            si_sdr: mean(|r| r.si_sdr),
            sdr: mean(|r| r.sdr),
            si_sdri: mean(|r| r.si_sdri),
            sdri: mean(|r| r.sdri),
            incorrect_segment_count: rows.iter().map(|r| r.incorrect_segments).sum(),
            rows,
            failures,
        }
    }

    /// Fixed-width table, one row per utterance followed by the means.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "id", "si_sdr", "sdr", "si_sdri", "sdri", "incorrect"
        );
        for r in &self.rows {
            out += &format!(
                "{:<24} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9}\n",
                r.id, r.si_sdr, r.sdr, r.si_sdri, r.sdri, r.incorrect_segments
            );
        }
        out += &format!(
            "{:<24} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9}\n",
            "mean", self.si_sdr, self.sdr, self.si_sdri, self.sdri, self.incorrect_segment_count
        );
        for f in &self.failures {
            out += &format!("failed {}: {}\n", f.id, f.error);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000).unwrap()
    }

    #[test]
    fn perfect_reconstruction_is_capped_high() {
        let p = random(1000, 1);
        assert!(si_sdr(&p, &p).unwrap() >= 110.0);
        assert!(sdr(&p, &p).unwrap() >= 110.0);
        assert!(si_sdr_loss(&p, &p).unwrap() <= -110.0);
        assert!(si_sdr(&p.scaled(2.0), &p).unwrap() >= 110.0);
    }

    #[test]
    fn scale_invariance_away_from_the_floor() {
        let (e, r) = (random(800, 12), random(800, 13));
        let e = e.add(&r).unwrap();
        let base = si_sdr(&e, &r).unwrap();
        for c in [0.1, 2.0, 3.0, 100.0] {
            assert!((si_sdr(&e.scaled(c), &r).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_is_negated_metric() {
        let (a, b) = (random(500, 2), random(500, 3));
        assert_eq!(si_sdr_loss(&a, &b).unwrap().to_bits(), (-si_sdr(&a, &b).unwrap()).to_bits());
    }

    #[test]
    fn sdr_of_one_percent_distortion_is_twenty_db() {
        let p = Waveform::new(vec![1.0, 0.0, 0.0, 0.0], 16_000).unwrap();
        let d = Waveform::new(vec![1.0, 0.1, 0.0, 0.0], 16_000).unwrap();
        assert!((sdr(&d, &p).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn errors_and_floors() {
        let z = Waveform::zeros(10, 16_000).unwrap();
        let p = random(10, 4);
        assert!(matches!(si_sdr(&p, &z), Err(Error::ZeroEnergy(_))));
        assert!(matches!(sdr(&p, &z), Err(Error::ZeroEnergy(_))));
        assert!(si_sdr(&z, &p).unwrap().is_finite());
        assert!(si_sdr(&p, &random(11, 4)).is_err());
    }

    #[test]
    fn improvement_of_mixture_is_zero() {
        let (m, r) = (random(300, 7), random(300, 8));
        assert_eq!(improvement(si_sdr, &m, &m, &r).unwrap(), 0.0);
        assert_eq!(improvement(sdr, &m, &m, &r).unwrap(), 0.0);
        let e = random(300, 9);
        let manual = si_sdr(&e, &r).unwrap() - si_sdr(&m, &r).unwrap();
        assert_eq!(improvement(si_sdr, &e, &m, &r).unwrap(), manual);
    }

    #[test]
    fn incorrect_counts_on_constructed_estimates() {
        let (s, n) = (random(16_000, 10), random(16_000, 11));
        let cfg = IncorrectConfig { segment_s: 0.1, mu_db: 1.0, rule: IncorrectRule::Similarity };
        assert_eq!(count_incorrect_segments(&s, &s, &n, &cfg).unwrap(), 0);
        assert_eq!(count_incorrect_segments(&n, &s, &n, &cfg).unwrap(), 10);
        let literal = IncorrectConfig { rule: IncorrectRule::LiteralLoss, ..cfg };
        assert_eq!(count_incorrect_segments(&n, &s, &n, &literal).unwrap(), 0);
        assert_eq!(count_incorrect_segments(&s, &s, &n, &literal).unwrap(), 10);
        let tiny = IncorrectConfig { segment_s: 1e-5, ..cfg };
        assert!(matches!(count_incorrect_segments(&s, &s, &n, &tiny), Err(Error::SegmentTooShort(_))));
    }

    #[test]
    fn report_means() {
        let rows: Vec<_> = (0..3)
            .map(|i| UtteranceMetrics {
                id: i.to_string(),
                si_sdr: i as f64,
                sdr: 2.0 * i as f64,
                si_sdri: 1.0,
                sdri: -1.0,
                incorrect_segments: i,
            })
            .collect();
        let r = MetricsReport::from_rows(rows, vec![]);
        assert_eq!((r.si_sdr, r.sdr, r.si_sdri, r.sdri, r.incorrect_segment_count), (1.0, 2.0, 1.0, -1.0, 3));
        assert!(r.to_table().contains("mean"));
    }
}
