//! Full-length evaluation of an extractor over a set of mixtures.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use seanet_core::metrics::{IncorrectConfig, ItemFailure, MetricsReport, UtteranceMetrics};
use seanet_core::signal::{read_manifest, write_wav, Waveform};
use seanet_core::{Network, NetworkConfig};
use serde::{Deserialize, Serialize};

use crate::data::Example;

/// Anything that maps an example's mixture to a target estimate.
pub trait Extractor {
    fn extract(&self, example: &Example) -> Result<Waveform>;
}

impl Extractor for Network {
    fn extract(&self, example: &Example) -> Result<Waveform> {
        Ok(Network::extract(self, &example.mixture, &example.visual_input())?)
    }
}

/// Returns the mixture unchanged.
pub struct PassThrough;

impl Extractor for PassThrough {
    fn extract(&self, example: &Example) -> Result<Waveform> {
        Ok(example.mixture.clone())
    }
}

/// Returns the clean target.
pub struct OracleTarget;

impl Extractor for OracleTarget {
    fn extract(&self, example: &Example) -> Result<Waveform> {
        Ok(example.target.clone())
    }
}

/// Written waveforms of one evaluated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemAudio {
    pub id: String,
    pub mixture: PathBuf,
    pub estimate: PathBuf,
    pub reference: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    #[serde(default)]
    pub audio: Vec<ItemAudio>,
}

impl EvalReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn evaluate_one(
    model: &dyn Extractor,
    ex: &Example,
    incorrect: &IncorrectConfig,
    audio_dir: Option<&Path>,
) -> Result<(UtteranceMetrics, Option<ItemAudio>)> {
    let est = model.extract(ex)?;
    let row = UtteranceMetrics::compute(&ex.id, &est, &ex.mixture, &ex.target, &ex.noise, incorrect)?;
    let audio = match audio_dir {
        Some(dir) => {
            let path = |kind: &str| dir.join(format!("{}_{kind}.wav", ex.id));
            let item = ItemAudio { id: ex.id.clone(), mixture: path("mixture"), estimate: path("estimate"), reference: path("target") };
            write_wav(&item.mixture, &ex.mixture)?;
            write_wav(&item.estimate, &est)?;
            write_wav(&item.reference, &ex.target)?;
            Some(item)
        }
        None => None,
    };
    Ok((row, audio))
}

/// Scores every example at full length. Per-item errors are recorded and the
/// run continues.
pub fn evaluate(model: &dyn Extractor, examples: &[Example], incorrect: &IncorrectConfig, audio_dir: Option<&Path>) -> EvalReport {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut audio = Vec::new();
    if let Some(dir) = audio_dir {
        if let Err(e) = std::fs::create_dir_all(dir) {
            log::warn!("cannot create {}: {e}", dir.display());
        }
    }
    for ex in examples {
        match evaluate_one(model, ex, incorrect, audio_dir) {
            Ok((row, a)) => {
                rows.push(row);
                audio.extend(a);
            }
            Err(e) => failures.push(ItemFailure { id: ex.id.clone(), error: format!("{e:#}") }),
        }
    }
    EvalReport { metrics: MetricsReport::from_rows(rows, failures), audio }
}

/// Evaluates every manifest entry; entries that fail to load are recorded as
/// failures alongside extraction errors.
pub fn evaluate_manifest(
    model: &dyn Extractor,
    manifest: &Path,
    net: &NetworkConfig,
    incorrect: &IncorrectConfig,
    audio_dir: Option<&Path>,
) -> Result<EvalReport> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut examples = Vec::new();
    let mut load_failures = Vec::new();
    for e in entries {
        match e.load(base, net.sample_rate).map_err(anyhow::Error::from).and_then(|s| Example::from_sample(e.id.clone(), s, net)) {
            Ok(ex) => examples.push(ex),
            Err(err) => load_failures.push(ItemFailure { id: e.id.clone(), error: format!("{err:#}") }),
        }
    }
    let mut report = evaluate(model, &examples, incorrect, audio_dir);
    load_failures.extend(report.metrics.failures.drain(..));
    report.metrics.failures = load_failures;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_examples;
    use seanet_core::metrics::{si_sdr, EPS};
    use seanet_core::signal::{write_manifest, ManifestEntry, Scenario};

    fn examples() -> Vec<Example> {
        synthetic_examples(&NetworkConfig::tiny(), &Scenario::GRID, 4, 1.0, 9, "eval").unwrap()
    }

    #[test]
    fn identity_has_zero_improvement() {
        let r = evaluate(&PassThrough, &examples(), &IncorrectConfig::default(), None).metrics;
        assert_eq!(r.rows.len(), 4);
        for row in &r.rows {
            assert_eq!((row.si_sdri, row.sdri), (0.0, 0.0));
        }
    }

    #[test]
    fn oracle_reaches_the_floored_maximum() {
        let ex = examples();
        let r = evaluate(&OracleTarget, &ex, &IncorrectConfig::default(), None).metrics;
        for (row, e) in r.rows.iter().zip(&ex) {
            let max = si_sdr(&e.target, &e.target).unwrap();
            assert!(max > 10.0 * (1.0 / EPS).log10());
            assert_eq!(row.si_sdri, max - si_sdr(&e.mixture, &e.target).unwrap());
            assert_eq!(row.incorrect_segments, 0);
        }
        let mean = r.rows.iter().map(|x| x.si_sdri).sum::<f64>() / r.rows.len() as f64;
        assert!((r.si_sdri - mean).abs() < 1e-12);
    }

    #[test]
    fn missing_files_are_recorded_and_the_run_continues() {
        let dir = tempfile::tempdir().unwrap();
        let ex = &examples()[0];
        for (name, w) in [("m.wav", &ex.mixture), ("t.wav", &ex.target), ("n.wav", &ex.noise)] {
            write_wav(&dir.path().join(name), w).unwrap();
        }
        let entry = |id: &str, mix: &str| ManifestEntry {
            id: id.into(),
            mixture_path: mix.into(),
            target_path: "t.wav".into(),
            noise_path: "n.wav".into(),
            visual_path: None,
            scenario: ex.scenario,
            snr_db: 0.0,
        };
        let manifest = dir.path().join("m.jsonl");
        write_manifest(&manifest, &[entry("good", "m.wav"), entry("bad", "missing.wav")]).unwrap();
        let audio = dir.path().join("audio");
        let r = evaluate_manifest(&PassThrough, &manifest, &NetworkConfig::tiny(), &IncorrectConfig::default(), Some(&audio)).unwrap();
        assert_eq!(r.metrics.rows.len(), 1);
        assert_eq!(r.metrics.failures.len(), 1);
        assert_eq!(r.metrics.failures[0].id, "bad");
        assert!(r.audio[0].estimate.exists());
        let path = dir.path().join("report.json");
        r.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), r);
    }
}
