use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{synth_source_at, SourceKind};
use super::waveform::{VisualStream, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// SNR range for interfering speakers, dB.
pub const SPEECH_SNR_RANGE: (f64, f64) = (-10.0, 10.0);
/// SNR range for non-speech background, dB.
pub const BACKGROUND_SNR_RANGE: (f64, f64) = (-5.0, 5.0);
/// Sources quieter than this are redrawn.
pub const SILENCE_ENERGY: f64 = 1e-10;

/// Source layout of a mixture besides the target: `S` is one interfering
/// speaker, `N` non-speech background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "S")]
    S,
    #[serde(rename = "S_N")]
    SN,
    #[serde(rename = "S_S")]
    SS,
    #[serde(rename = "S_S_N")]
    SSN,
    /// Background only, no interfering speaker.
    #[serde(rename = "N")]
    N,
}

impl Scenario {
    /// The four speaker-interference grids.
    pub const GRID: [Scenario; 4] = [Scenario::S, Scenario::SN, Scenario::SS, Scenario::SSN];

    pub fn interferers(self) -> usize {
        match self {
            Scenario::N => 0,
            Scenario::S | Scenario::SN => 1,
            Scenario::SS | Scenario::SSN => 2,
        }
    }

    pub fn has_background(self) -> bool {
        matches!(self, Scenario::N | Scenario::SN | Scenario::SSN)
    }

    pub fn from_counts(interferers: usize, background: bool) -> Result<Self> {
        match (interferers, background) {
            (0, false) => Err(Error::NoNoiseSource),
            (0, true) => Ok(Scenario::N),
            (1, false) => Ok(Scenario::S),
            (1, true) => Ok(Scenario::SN),
            (2, false) => Ok(Scenario::SS),
            (2, true) => Ok(Scenario::SSN),
            (n, _) => Err(Error::Scenario(format!("{n} interfering speakers; at most 2 are supported"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::S => "S",
            Scenario::SN => "S_N",
            Scenario::SS => "S_S",
            Scenario::SSN => "S_S_N",
            Scenario::N => "N",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['+', '-', ' '], "_");
        [Scenario::S, Scenario::SN, Scenario::SS, Scenario::SSN, Scenario::N]
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Scenario(s.to_string()))
    }
}

/// Visual side information attached to a mixture.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum VisualCue {
    Stream(VisualStream),
    /// Derive the cue from the clean target at encode time.
    #[default]
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRole {
    Interferer,
    Background,
}

/// One scaled noise source of a mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseComponent {
    pub role: ComponentRole,
    pub waveform: Waveform,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub mixture: Waveform,
    pub target: Waveform,
    pub noise: Waveform,
    pub visual: VisualCue,
    pub scenario: Scenario,
    /// SNR of the first noise component against the target.
    pub snr_db: f64,
    pub components: Vec<NoiseComponent>,
    /// Factor every signal was divided by to keep the mixture within [-1, 1].
    pub peak_normalization: f64,
}

impl MixtureSample {
    /// Largest absolute deviation from `mixture = target + noise`.
    pub fn additivity_residual(&self) -> f64 {
        self.mixture
            .samples()
            .iter()
            .zip(self.target.samples())
            .zip(self.noise.samples())
            .fold(0.0, |m, ((x, s), n)| m.max((x - s - n).abs()))
    }
}

/// Gain `g` with `10·log10(‖s‖² / ‖g·o‖²) = snr_db`.
pub fn snr_gain(target: &Waveform, interference: &Waveform, snr_db: f64) -> Result<f64> {
    target.check_compatible(interference, "SNR scaling")?;
    let (es, eo) = (target.energy(), interference.energy());
    if es == 0.0 {
        return Err(Error::ZeroEnergy("target"));
    }
    if eo == 0.0 {
        return Err(Error::ZeroEnergy("interference"));
    }
    Ok((es / (eo * 10f64.powf(snr_db / 10.0))).sqrt())
}

pub fn scale_to_snr(target: &Waveform, interference: &Waveform, snr_db: f64) -> Result<Waveform> {
    Ok(interference.scaled(snr_gain(target, interference, snr_db)?))
}

/// Energy ratio of `target` over `component` in dB.
pub fn measure_snr(target: &Waveform, component: &Waveform) -> Result<f64> {
    target.check_compatible(component, "SNR measurement")?;
    let eo = component.energy();
    if eo == 0.0 {
        return Err(Error::ZeroEnergy("component"));
    }
    Ok(10.0 * (target.energy() / eo).log10())
}

/// Scales each noise source against the target at its own SNR and sums them.
/// `snrs_db` lists the interferers first, then the background.
pub fn make_mixture(
    target: &Waveform,
    interferers: &[Waveform],
    background: Option<&Waveform>,
    snrs_db: &[f64],
) -> Result<MixtureSample> {
    let scenario = Scenario::from_counts(interferers.len(), background.is_some())?;
    let expected = interferers.len() + background.is_some() as usize;
    if snrs_db.len() != expected {
        return Err(Error::SnrCount { expected, got: snrs_db.len() });
    }
    let sources = interferers
        .iter()
        .map(|w| (ComponentRole::Interferer, w))
        .chain(background.map(|w| (ComponentRole::Background, w)));
    let mut components = Vec::with_capacity(expected);
    for ((role, source), &snr_db) in sources.zip(snrs_db) {
        components.push(NoiseComponent {
            role,
            waveform: scale_to_snr(target, source, snr_db)?,
            snr_db,
        });
    }

    let mut noise = vec![0.0; target.len()];
    for c in &components {
        noise.iter_mut().zip(c.waveform.samples()).for_each(|(n, v)| *n += v);
    }
    let peak = target
        .samples()
        .iter()
        .zip(&noise)
        .fold(0.0f64, |m, (s, n)| m.max((s + n).abs()));
    let factor = if peak > 1.0 { peak } else { 1.0 };
    let rate = target.sample_rate();
    let target = target.scaled(1.0 / factor);
    let noise: Vec<f64> = noise.iter().map(|v| v / factor).collect();
    if factor != 1.0 {
        log::debug!("mixture peak {peak:.4} normalised by factor {factor:.4}");
        for c in &mut components {
            c.waveform = c.waveform.scaled(1.0 / factor);
        }
    }
    let mixture: Vec<f64> = target.samples().iter().zip(&noise).map(|(s, n)| s + n).collect();
    Ok(MixtureSample {
        mixture: Waveform::new(mixture, rate)?,
        target,
        noise: Waveform::new(noise, rate)?,
        visual: VisualCue::Oracle,
        scenario,
        snr_db: snrs_db[0],
        components,
        peak_normalization: factor,
    })
}

/// Renders a source, redrawing with a fresh seed while it is silent.
fn audible_source(kind: SourceKind, duration_s: f64, rng: &mut ChaCha8Rng, rate: u32) -> Result<Waveform> {
    for _ in 0..16 {
        let w = synth_source_at(kind, duration_s, rng.random(), rate)?;
        if w.energy() >= SILENCE_ENERGY {
            return Ok(w);
        }
    }
    Err(Error::ZeroEnergy("synthetic source after 16 draws"))
}

/// Draws a mixture of the given scenario from the synthetic source bank.
/// Interferers are speech-like with SNRs uniform in [-10, 10] dB; the
/// background is tonal, broadband or music-like with SNR uniform in [-5, 5] dB.
pub fn generate_scenario(kind: Scenario, duration_s: f64, seed: u64) -> Result<MixtureSample> {
    generate_scenario_at(kind, duration_s, seed, DEFAULT_SAMPLE_RATE)
}

pub fn generate_scenario_at(kind: Scenario, duration_s: f64, seed: u64, rate: u32) -> Result<MixtureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = audible_source(SourceKind::Speechlike, duration_s, &mut rng, rate)?;
    let mut interferers = Vec::new();
    let mut snrs = Vec::new();
    for _ in 0..kind.interferers() {
        interferers.push(audible_source(SourceKind::Speechlike, duration_s, &mut rng, rate)?);
        snrs.push(rng.random_range(SPEECH_SNR_RANGE.0..=SPEECH_SNR_RANGE.1));
    }
    let background = if kind.has_background() {
        let bg_kind = SourceKind::BACKGROUND[rng.random_range(0..SourceKind::BACKGROUND.len())];
        snrs.push(rng.random_range(BACKGROUND_SNR_RANGE.0..=BACKGROUND_SNR_RANGE.1));
        Some(audible_source(bg_kind, duration_s, &mut rng, rate)?)
    } else {
        None
    };
    make_mixture(&target, &interferers, background.as_ref(), &snrs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(v: &[f64]) -> Waveform {
        Waveform::new(v.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn zero_db_equal_energy_is_identity() {
        let s = wave(&[1.0, 0.0, -1.0, 0.0]);
        let o = wave(&[0.0, 1.0, 0.0, -1.0]);
        assert_eq!(scale_to_snr(&s, &o, 0.0).unwrap(), o);
    }

    #[test]
    fn twenty_db_on_unit_energy_gives_tenth() {
        let s = wave(&[1.0, 0.0]);
        let o = wave(&[0.0, 1.0]);
        let g = snr_gain(&s, &o, 20.0).unwrap();
        assert!((g - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_energy_is_an_error() {
        let s = wave(&[0.0, 0.0]);
        let o = wave(&[0.0, 1.0]);
        assert!(matches!(scale_to_snr(&s, &o, 0.0), Err(Error::ZeroEnergy(_))));
        assert!(matches!(scale_to_snr(&o, &s, 0.0), Err(Error::ZeroEnergy(_))));
    }

    #[test]
    fn scenario_inferred_from_counts() {
        let s = wave(&[0.1, 0.2, -0.1]);
        let a = wave(&[0.2, -0.1, 0.1]);
        let b = wave(&[-0.1, 0.1, 0.2]);
        let bg = wave(&[0.05, 0.05, -0.05]);
        assert_eq!(make_mixture(&s, &[a.clone()], None, &[0.0]).unwrap().scenario, Scenario::S);
        let m = make_mixture(&s, &[a.clone(), b.clone()], Some(&bg), &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(m.scenario, Scenario::SSN);
        assert_eq!(make_mixture(&s, &[], Some(&bg), &[3.0]).unwrap().scenario, Scenario::N);
        assert!(matches!(make_mixture(&s, &[], None, &[]), Err(Error::NoNoiseSource)));
        assert!(matches!(make_mixture(&s, &[a], None, &[0.0, 1.0]), Err(Error::SnrCount { .. })));
    }

    #[test]
    fn single_interferer_residual_is_scaled_source() {
        let s = wave(&[0.1, 0.2, -0.1]);
        let a = wave(&[0.2, -0.1, 0.1]);
        let m = make_mixture(&s, &[a.clone()], None, &[-3.0]).unwrap();
        let scaled = scale_to_snr(&s, &a, -3.0).unwrap();
        for ((x, t), o) in m.mixture.samples().iter().zip(m.target.samples()).zip(scaled.samples()) {
            assert!((x - t - o).abs() < 1e-12);
        }
    }

    #[test]
    fn loud_mixtures_are_normalised_without_breaking_snr() {
        let s = wave(&[0.9, -0.9, 0.5]);
        let a = wave(&[0.9, -0.9, 0.4]);
        let m = make_mixture(&s, &[a], None, &[-6.0]).unwrap();
        assert!(m.peak_normalization > 1.0);
        assert!(m.mixture.peak() <= 1.0 + 1e-12);
        let measured = measure_snr(&m.target, &m.components[0].waveform).unwrap();
        assert!((measured + 6.0).abs() < 1e-9);
        assert!(m.additivity_residual() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scenario(Scenario::S, 0.5, 7).unwrap();
        let b = generate_scenario(Scenario::S, 0.5, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scenario(Scenario::S, 0.5, 8).unwrap());
    }

    #[test]
    fn s_n_has_one_speaker_and_one_background() {
        let m = generate_scenario(Scenario::SN, 0.5, 11).unwrap();
        let roles: Vec<_> = m.components.iter().map(|c| c.role).collect();
        assert_eq!(roles, vec![ComponentRole::Interferer, ComponentRole::Background]);
        assert!((-10.0..=10.0).contains(&m.components[0].snr_db));
        assert!((-5.0..=5.0).contains(&m.components[1].snr_db));
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in [Scenario::S, Scenario::SN, Scenario::SS, Scenario::SSN, Scenario::N] {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert_eq!("s+s+n".parse::<Scenario>().unwrap(), Scenario::SSN);
        assert!("S_S_S".parse::<Scenario>().is_err());
    }
}
