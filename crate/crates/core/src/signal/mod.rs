//! Waveforms, synthetic sources, mixture simulation and file I/O.

mod manifest;
mod mixing;
mod synth;
mod wav;
mod waveform;

pub use manifest::{load_visual_features, parse_manifest, read_manifest, write_manifest, ManifestEntry, VisualFeatureFile};
pub use mixing::{
    generate_scenario, generate_scenario_at, make_mixture, measure_snr, scale_to_snr, snr_gain, ComponentRole,
    MixtureSample, NoiseComponent, Scenario, VisualCue, BACKGROUND_SNR_RANGE, SILENCE_ENERGY, SPEECH_SNR_RANGE,
};
pub use synth::{spectral_flatness, synth_source, synth_source_at, SourceKind};
pub use wav::{load_wav, write_wav};
pub use waveform::{VisualFrames, VisualStream, Waveform, DEFAULT_FRAME_RATE, DEFAULT_SAMPLE_RATE};
