//! Line-delimited JSON manifests describing stored mixtures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::mixing::{MixtureSample, Scenario, VisualCue};
use super::waveform::{VisualFrames, VisualStream};
use super::wav::load_wav;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture_path: PathBuf,
    pub target_path: PathBuf,
    pub noise_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_path: Option<PathBuf>,
    pub scenario: Scenario,
    pub snr_db: f64,
}

/// Precomputed visual features stored next to the audio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisualFeatureFile {
    pub frame_rate: f64,
    pub features: Vec<Vec<f64>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Parses a manifest; blank lines are skipped. Relative paths stay relative
/// to the manifest's directory and are resolved by [`ManifestEntry::load`].
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Manifest {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries always serialise");
        writeln!(file, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

impl ManifestEntry {
    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Loads the referenced audio (and visual features, if any). `base` is
    /// the manifest's directory.
    pub fn load(&self, base: &Path, sample_rate: u32) -> Result<MixtureSample> {
        let mixture = load_wav(Self::resolve(base, &self.mixture_path), Some(sample_rate))?;
        let target = load_wav(Self::resolve(base, &self.target_path), Some(sample_rate))?;
        let noise = load_wav(Self::resolve(base, &self.noise_path), Some(sample_rate))?;
        mixture.check_compatible(&target, "mixture vs target")?;
        mixture.check_compatible(&noise, "mixture vs noise")?;
        let visual = match &self.visual_path {
            Some(p) => {
                let stream = load_visual_features(Self::resolve(base, p))?;
                stream.check_duration(mixture.duration_s())?;
                VisualCue::Stream(stream)
            }
            None => VisualCue::Oracle,
        };
        Ok(MixtureSample {
            mixture,
            target,
            noise,
            visual,
            scenario: self.scenario,
            snr_db: self.snr_db,
            components: Vec::new(),
            peak_normalization: 1.0,
        })
    }
}

pub fn load_visual_features(path: impl AsRef<Path>) -> Result<VisualStream> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: VisualFeatureFile = serde_json::from_str(&text).map_err(|e| Error::Visual(format!("{}: {e}", path.display())))?;
    let rows = file.features.len();
    let dim = file.features.first().map_or(0, Vec::len);
    if file.features.iter().any(|r| r.len() != dim) {
        return Err(Error::Visual(format!("{}: ragged feature rows", path.display())));
    }
    let data = Array2::from_shape_vec((rows, dim), file.features.into_iter().flatten().collect())
        .map_err(|e| Error::Visual(e.to_string()))?;
    VisualStream::new(VisualFrames::Features(data), file.frame_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"a","mixture_path":"a_mix.wav","target_path":"a_s.wav","noise_path":"a_n.wav","scenario":"S_N","snr_db":-2.5}"#;

    #[test]
    fn three_lines_three_entries_in_order() {
        let text = [LINE, &LINE.replace("\"a\"", "\"b\""), &LINE.replace("\"a\"", "\"c\"")].join("\n");
        let entries = parse_manifest(&text, Path::new("m.jsonl")).unwrap();
        let ids: Vec<_> = entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(entries[0].scenario, Scenario::SN);
    }

    #[test]
    fn missing_target_names_the_field_and_line() {
        let bad = LINE.replace(r#""target_path":"a_s.wav","#, "");
        let text = format!("{LINE}\n{bad}\n");
        let err = parse_manifest(&text, Path::new("m.jsonl")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{msg}");
        assert!(msg.contains("target_path"), "{msg}");
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entries = parse_manifest(LINE, Path::new("x")).unwrap();
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }
}
