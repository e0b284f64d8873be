//! Mel spectrogram triptychs, metric bar charts and loss curves.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use plotters::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use seanet_core::metrics::MetricsReport;
use seanet_core::signal::{load_wav, Waveform};

use crate::evaluate::EvalReport;
use crate::train::LogRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// `None` means the Nyquist frequency.
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { n_fft: 512, hop: 128, n_mels: 64, f_min: 0.0, f_max: None }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Power mel spectrogram, `[n_mels, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub power: Array2<f64>,
    /// Centre frequency of each band in Hz.
    pub centers_hz: Vec<f64>,
}

/// Triangular filters with edges equally spaced on the mel scale,
/// `[n_mels, n_fft / 2 + 1]`, and the band centres.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> (Array2<f64>, Vec<f64>) {
    let bins = cfg.n_fft / 2 + 1;
    let f_max = cfg.f_max.unwrap_or(sample_rate as f64 / 2.0);
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Array2::zeros((cfg.n_mels, bins));
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f <= l || f >= r {
                0.0
            } else if f <= c {
                (f - l) / (c - l)
            } else {
                (r - f) / (r - c)
            };
            fb[[m, k]] = w;
        }
    }
    (fb, edges[1..=cfg.n_mels].to_vec())
}

/// Hann-windowed STFT magnitudes squared, projected onto the mel bands.
/// The signal is zero-padded to at least one frame.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> MelSpectrogram {
    let n = cfg.n_fft;
    let x = w.samples();
    let frames = if x.len() <= n { 1 } else { (x.len() - n).div_ceil(cfg.hop) + 1 };
    let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect();
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n);
    let (fb, centers_hz) = mel_filterbank(cfg, w.sample_rate());
    let bins = n / 2 + 1;
    let mut power = Array2::zeros((cfg.n_mels, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut spec = vec![0.0; bins];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x.get(start + i).copied().unwrap_or(0.0) * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, s) in spec.iter_mut().enumerate() {
            *s = buf[k].norm_sqr();
        }
        for m in 0..cfg.n_mels {
            power[[m, t]] = fb.row(m).iter().zip(&spec).map(|(a, b)| a * b).sum();
        }
    }
    MelSpectrogram { power, centers_hz }
}

/// Piecewise-linear approximation of a perceptual dark-to-bright colormap.
fn colormap(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] =
        [[0.0, 0.0, 4.0], [80.0, 18.0, 123.0], [182.0, 54.0, 121.0], [251.0, 136.0, 97.0], [252.0, 253.0, 191.0]];
    let v = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (v.floor() as usize).min(STOPS.len() - 2);
    let f = v - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Stacks the panels top to bottom in log power with a shared 80 dB range.
/// Low frequencies are at the bottom of each panel.
pub fn render_triptych(panels: &[&MelSpectrogram], path: &Path) -> Result<()> {
    const SCALE: u32 = 3;
    const GAP: u32 = 4;
    let mels = panels.iter().map(|p| p.power.nrows()).max().unwrap_or(0) as u32;
    let frames = panels.iter().map(|p| p.power.ncols()).max().unwrap_or(0) as u32;
    let db = |p: f64| 10.0 * (p + 1e-12).log10();
    let top = panels.iter().flat_map(|p| p.power.iter().map(|&x| db(x))).fold(f64::NEG_INFINITY, f64::max);
    let panel_h = mels * SCALE;
    let mut img = RgbImage::from_pixel(frames.max(1), (panel_h + GAP) * panels.len() as u32 - GAP.min(panel_h), Rgb([255, 255, 255]));
    for (i, p) in panels.iter().enumerate() {
        let y0 = i as u32 * (panel_h + GAP);
        for ((m, t), &x) in p.power.indexed_iter() {
            let c = colormap((db(x) - (top - 80.0)) / 80.0);
            for dy in 0..SCALE {
                img.put_pixel(t as u32, y0 + (mels - 1 - m as u32) * SCALE + dy, c);
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn bar_chart(path: &Path, title: &str, bars: &[(String, f64)]) -> Result<()> {
    let lo = bars.iter().map(|b| b.1).fold(0.0, f64::min);
    let hi = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let pad = 0.1 * (hi - lo).max(1.0);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d((0..bars.len()).into_segmented(), (lo - pad)..(hi + pad))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => bars.get(*i).map(|b| b.0.clone()).unwrap_or_default(),
            _ => String::new(),
        })
        .y_desc("dB")
        .draw()?;
    chart.draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
        let (a, b) = if *v >= 0.0 { (0.0, *v) } else { (*v, 0.0) };
        let mut r = Rectangle::new([(SegmentValue::Exact(i), a), (SegmentValue::Exact(i + 1), b)], BLUE.mix(0.6).filled());
        r.set_margin(0, 0, 8, 8);
        r
    }))?;
    root.present()?;
    Ok(())
}

/// Mean metrics of a report as a bar chart.
pub fn summary_chart(report: &MetricsReport, path: &Path) -> Result<()> {
    let bars = [("SI-SDR", report.si_sdr), ("SDR", report.sdr), ("SI-SDRi", report.si_sdri), ("SDRi", report.sdri)];
    let bars: Vec<_> = bars.iter().map(|(l, v)| (l.to_string(), *v)).collect();
    bar_chart(path, &format!("{} utterances, {} incorrect segments", report.rows.len(), report.incorrect_segment_count), &bars)
}

/// Train and validation loss per epoch.
pub fn loss_curve(log: &[LogRecord], path: &Path) -> Result<()> {
    let series = |split: &str| -> Vec<(f64, f64)> {
        log.iter().filter(|r| r.split == split).map(|r| (r.epoch as f64, r.loss)).collect()
    };
    let (train, val) = (series("train"), series("val"));
    let xs = train.iter().chain(&val).map(|p| p.0);
    let ys: Vec<f64> = train.iter().chain(&val).map(|p| p.1).collect();
    let x_max = xs.fold(1.0, f64::max);
    let (y_lo, y_hi) = (ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let pad = 0.05 * (y_hi - y_lo).max(1.0);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, (y_lo - pad)..(y_hi + pad))?;
    chart.configure_mesh().x_desc("epoch").y_desc("loss (dB)").draw()?;
    chart.draw_series(LineSeries::new(train, &BLUE))?.label("train").legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], BLUE));
    chart.draw_series(LineSeries::new(val, &RED))?.label("val").legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], RED));
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

/// Files written by [`emit_plots`] and any problems met on the way.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct PlotOutput {
    pub images: Vec<PathBuf>,
    pub tables: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl PlotOutput {
    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

fn triptych_for(item: &crate::evaluate::ItemAudio, cfg: &MelConfig, path: &Path) -> Result<()> {
    let spec = |p: &Path| -> Result<MelSpectrogram> { Ok(mel_spectrogram(&load_wav(p, None)?, cfg)) };
    let panels = [spec(&item.mixture)?, spec(&item.estimate)?, spec(&item.reference)?];
    render_triptych(&panels.iter().collect::<Vec<_>>(), path)
}

/// Writes one triptych per evaluated item with saved audio and one summary
/// chart. Nothing fails hard: problems become warnings and charts that
/// cannot be drawn fall back to the text table.
pub fn emit_plots(report: &EvalReport, out_dir: &Path) -> Result<PlotOutput> {
    let mut out = PlotOutput::default();
    if report.metrics.rows.is_empty() {
        out.warn("report has no evaluated utterances; no plots written".into());
        return Ok(out);
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let cfg = MelConfig::default();
    if report.audio.is_empty() {
        out.warn("report holds no audio paths; spectrograms skipped".into());
    }
    for item in &report.audio {
        let path = out_dir.join(format!("{}_mel.png", item.id));
        match triptych_for(item, &cfg, &path) {
            Ok(()) => out.images.push(path),
            Err(e) => out.warn(format!("{}: spectrogram skipped: {e:#}", item.id)),
        }
    }
    let table = out_dir.join("summary.txt");
    std::fs::write(&table, report.metrics.to_table())?;
    out.tables.push(table);
    let chart = out_dir.join("summary.svg");
    match summary_chart(&report.metrics, &chart) {
        Ok(()) => out.images.push(chart),
        Err(e) => out.warn(format!("summary chart unavailable, see summary.txt: {e:#}")),
    }
    Ok(out)
}

/// Loss curve of a `train.jsonl` log.
pub fn emit_log_plot(log_path: &Path, out_dir: &Path) -> Result<PlotOutput> {
    let text = std::fs::read_to_string(log_path).with_context(|| format!("reading {}", log_path.display()))?;
    let log = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<LogRecord>, _>>()
        .with_context(|| format!("parsing {}", log_path.display()))?;
    let mut out = PlotOutput::default();
    if log.is_empty() {
        out.warn("log is empty; no plots written".into());
        return Ok(out);
    }
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("loss.svg");
    match loss_curve(&log, &path) {
        Ok(()) => out.images.push(path),
        Err(e) => out.warn(format!("loss curve unavailable: {e:#}")),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{evaluate, PassThrough};
    use seanet_core::metrics::IncorrectConfig;
    use seanet_core::signal::Scenario;
    use seanet_core::NetworkConfig;

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    }

    #[test]
    fn tone_energy_sits_in_its_band() {
        let sr = 16_000;
        let tone: Vec<f64> = (0..sr).map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr as f64).sin()).collect();
        let spec = mel_spectrogram(&Waveform::new(tone, sr as u32).unwrap(), &MelConfig::default());
        let band = spec.centers_hz.iter().enumerate().min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs())).unwrap().0;
        let totals: Vec<f64> = spec.power.rows().into_iter().map(|r| r.sum()).collect();
        let all: f64 = totals.iter().sum();
        let near: f64 = totals[band - 1..=band + 1].iter().sum();
        assert_eq!(totals.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0, band);
        assert!(near / all > 0.99, "{}", near / all);
    }

    #[test]
    fn one_item_gives_one_triptych_and_one_chart() {
        let dir = tempfile::tempdir().unwrap();
        let ex = crate::data::synthetic_examples(&NetworkConfig::tiny(), &[Scenario::SN], 1, 0.5, 2, "plot").unwrap();
        let report = evaluate(&PassThrough, &ex, &IncorrectConfig::default(), Some(&dir.path().join("audio")));
        let out = emit_plots(&report, &dir.path().join("plots")).unwrap();
        assert_eq!(out.images.len(), 2, "{:?}", out.warnings);
        assert!(out.warnings.is_empty());
        let png = image::open(&out.images[0]).unwrap();
        assert_eq!(png.width() as usize, mel_spectrogram(&ex[0].mixture, &MelConfig::default()).power.ncols());
        let svg = std::fs::read_to_string(&out.images[1]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("SI-SDRi"));
    }

    #[test]
    fn empty_report_writes_nothing_and_warns() {
        let dir = tempfile::tempdir().unwrap();
        let out = emit_plots(&EvalReport::default(), &dir.path().join("plots")).unwrap();
        assert!(out.images.is_empty());
        assert_eq!(out.warnings.len(), 1);
        assert!(!dir.path().join("plots").exists());
    }

    #[test]
    fn loss_curve_from_log() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |epoch, split: &str, loss| LogRecord { epoch, split: split.into(), loss, si_sdri: None, lr: 1e-3, steps: 0 };
        let log = [rec(1, "train", 3.0), rec(2, "train", 1.0), rec(2, "val", 2.0)];
        let path = dir.path().join("train.jsonl");
        let text: Vec<String> = log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        std::fs::write(&path, text.join("\n")).unwrap();
        let out = emit_log_plot(&path, dir.path()).unwrap();
        assert_eq!(out.images, vec![dir.path().join("loss.svg")]);
    }
}
