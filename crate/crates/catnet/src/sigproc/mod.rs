//! Deterministic preprocessing of continuous multichannel recordings into
//! fixed-shape trial tensors.
//!
//! The stages, in pipeline order: integer-ratio downsampling behind an
//! anti-alias low-pass, zero-phase Butterworth band-pass, power-line notch,
//! common average referencing, an artifact-removal hook (identity by
//! default), epoch extraction with baseline correction, cropping to the
//! post-onset window, and first-order difference augmentation.

pub mod filter;

use crate::dataio::TrialTensor;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::par;
use filter::{butter_bandpass, butter_lowpass, filtfilt, iir_notch, Sos, NOTCH_Q};

/// Seconds trimmed from both ends of a recording when deciding which onsets
/// have enough clean margin; filter state transients live there.
pub const EDGE_TRIM_SECONDS: f64 = 0.5;

/// A continuous multichannel recording of one modality with stimulus
/// annotations.
#[derive(Clone, Debug)]
pub struct ContinuousRecording {
    /// `channels x time`.
    pub samples: Mat<f64>,
    pub rate_hz: f64,
    pub channel_names: Vec<String>,
    /// Sample indices of stimulus onsets, strictly increasing.
    pub stimulus_onsets: Vec<usize>,
    /// Tone label per onset, in `1..=4`.
    pub tone_labels: Vec<u8>,
    /// Subject id per onset, 1-based.
    pub subject_labels: Vec<u16>,
}

impl ContinuousRecording {
    pub fn validate(&self) -> Result<()> {
        if self.rate_hz <= 0.0 {
            return Err(Error::invalid(format!(
                "sample rate must be positive, got {}",
                self.rate_hz
            )));
        }
        if self.samples.rows != self.channel_names.len() {
            return Err(Error::invalid(format!(
                "{} channel names for {} sample rows",
                self.channel_names.len(),
                self.samples.rows
            )));
        }
        if !self.stimulus_onsets.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("stimulus onsets must be strictly increasing"));
        }
        if self.tone_labels.len() != self.stimulus_onsets.len()
            || self.subject_labels.len() != self.stimulus_onsets.len()
        {
            return Err(Error::invalid(format!(
                "label counts ({} tones, {} subjects) must match {} onsets",
                self.tone_labels.len(),
                self.subject_labels.len(),
                self.stimulus_onsets.len()
            )));
        }
        if let Some(&t) = self.tone_labels.iter().find(|&&t| !(1..=4).contains(&t)) {
            return Err(Error::invalid(format!("tone label {t} outside 1..=4")));
        }
        let margin = (2.0 * self.rate_hz) as usize;
        for &on in &self.stimulus_onsets {
            if on < margin || on + margin > self.samples.cols {
                return Err(Error::invalid(format!(
                    "onset {on} leaves less than 2 s of signal on one side"
                )));
            }
        }
        if !self.samples.is_finite() {
            return Err(Error::NonFinite {
                context: "recording samples".into(),
                detail: "NaN or infinity in the signal".into(),
            });
        }
        Ok(())
    }

    fn with_samples(&self, samples: Mat<f64>) -> ContinuousRecording {
        ContinuousRecording {
            samples,
            rate_hz: self.rate_hz,
            channel_names: self.channel_names.clone(),
            stimulus_onsets: self.stimulus_onsets.clone(),
            tone_labels: self.tone_labels.clone(),
            subject_labels: self.subject_labels.clone(),
        }
    }

    fn apply_per_channel(&self, f: impl Fn(&[f64]) -> Vec<f64> + Sync + Send) -> Mat<f64> {
        let rows: Vec<Vec<f64>> = par::map_collect(
            &(0..self.samples.rows).collect::<Vec<_>>(),
            |&r| f(self.samples.row(r)),
        );
        let cols = rows.first().map_or(0, |r| r.len());
        let mut out = Mat::zeros(self.samples.rows, cols);
        for (r, row) in rows.into_iter().enumerate() {
            out.row_mut(r).copy_from_slice(&row);
        }
        out
    }
}

/// Filter kinds supported by the preprocessing stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterKind {
    Bandpass { low_hz: f64, high_hz: f64 },
    Notch { center_hz: f64 },
}

/// A filter request: kind plus Butterworth prototype order (band-pass only;
/// the notch is a single biquad pair with its zeros on the unit circle).
#[derive(Clone, Copy, Debug)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub order: usize,
}

impl FilterSpec {
    pub fn bandpass(low_hz: f64, high_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Bandpass { low_hz, high_hz },
            order: 4,
        }
    }

    pub fn notch(center_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Notch { center_hz },
            order: 4,
        }
    }

    pub fn design(&self, rate_hz: f64) -> Result<Sos> {
        match self.kind {
            FilterKind::Bandpass { low_hz, high_hz } => {
                butter_bandpass(self.order, low_hz, high_hz, rate_hz)
            }
            FilterKind::Notch { center_hz } => iir_notch(center_hz, NOTCH_Q, rate_hz),
        }
    }
}

/// Integer-ratio decimation behind an 8th-order anti-alias low-pass at
/// `0.45 * target_hz`, applied zero-phase. Onsets are rescaled by the ratio.
pub fn downsample(rec: &ContinuousRecording, target_hz: f64) -> Result<ContinuousRecording> {
    rec.validate()?;
    if target_hz <= 0.0 {
        return Err(Error::invalid(format!(
            "target rate must be positive, got {target_hz}"
        )));
    }
    let ratio_f = rec.rate_hz / target_hz;
    let ratio = ratio_f.round() as usize;
    if ratio == 0 || (ratio_f - ratio as f64).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "target rate {target_hz} Hz must divide the recording rate {} Hz (ratio {ratio_f})",
            rec.rate_hz
        )));
    }
    if ratio == 1 {
        return Ok(rec.clone());
    }
    let sos = butter_lowpass(8, 0.45 * target_hz, rec.rate_hz)?;
    let samples = rec.apply_per_channel(|row| {
        let filtered = filtfilt(&sos, row);
        filtered.iter().step_by(ratio).copied().collect()
    });
    let mut out = rec.with_samples(samples);
    out.rate_hz = target_hz;
    out.stimulus_onsets = rec.stimulus_onsets.iter().map(|&o| o / ratio).collect();
    Ok(out)
}

/// Zero-phase (forward-backward) filtering so epochs are not time-shifted.
pub fn butterworth_filter(rec: &ContinuousRecording, spec: &FilterSpec) -> Result<ContinuousRecording> {
    rec.validate()?;
    let sos = spec.design(rec.rate_hz)?;
    Ok(rec.with_samples(rec.apply_per_channel(|row| filtfilt(&sos, row))))
}

/// Subtract the cross-channel mean at every time index.
pub fn common_average_reference(rec: &ContinuousRecording) -> Result<ContinuousRecording> {
    rec.validate()?;
    let (c, t) = rec.samples.shape();
    if c < 2 {
        return Err(Error::invalid(
            "common average referencing needs at least 2 channels",
        ));
    }
    let mut out = rec.samples.clone();
    let cn = c as f64;
    for j in 0..t {
        let mut mean = 0.0;
        for r in 0..c {
            mean += out.data[r * t + j];
        }
        mean /= cn;
        for r in 0..c {
            out.data[r * t + j] -= mean;
        }
    }
    Ok(rec.with_samples(out))
}

/// Hook point for artifact removal between referencing and epoching. The
/// default stage passes the signal through untouched.
pub trait ArtifactRemoval: Sync {
    fn apply(&self, rec: ContinuousRecording) -> Result<ContinuousRecording>;
}

/// Identity artifact stage.
pub struct PassthroughArtifactRemoval;

impl ArtifactRemoval for PassthroughArtifactRemoval {
    fn apply(&self, rec: ContinuousRecording) -> Result<ContinuousRecording> {
        Ok(rec)
    }
}

/// One extracted epoch, baseline-corrected, with its labels.
#[derive(Clone, Debug)]
pub struct Epoch {
    /// `channels x samples`, covering the epoch window around the onset.
    pub data: Mat<f64>,
    pub tone: u8,
    pub subject: u16,
    pub onset: usize,
}

/// A trial that had to be dropped, with the reason.
#[derive(Clone, Debug)]
pub struct SkippedTrial {
    pub onset: usize,
    pub reason: String,
}

/// Extract `window` (seconds around each onset) and subtract the per-channel
/// mean of the `baseline` interval. Onsets too close to the trimmed
/// recording edges are skipped and reported.
pub fn epoch_and_baseline(
    rec: &ContinuousRecording,
    window: (f64, f64),
    baseline: (f64, f64),
) -> Result<(Vec<Epoch>, Vec<SkippedTrial>)> {
    rec.validate()?;
    if window.0 >= window.1 {
        return Err(Error::invalid(format!(
            "epoch window ({}, {}) must be increasing",
            window.0, window.1
        )));
    }
    if baseline.0 < window.0 || baseline.1 > window.1 {
        return Err(Error::invalid(
            "baseline interval must lie inside the epoch window",
        ));
    }
    let rate = rec.rate_hz;
    let trim = (EDGE_TRIM_SECONDS * rate).round() as i64;
    let w0 = (window.0 * rate).round() as i64;
    let w1 = (window.1 * rate).round() as i64;
    let b0 = (baseline.0 * rate).round() as i64;
    let b1 = (baseline.1 * rate).round() as i64;
    let total = rec.samples.cols as i64;
    let (c, t) = rec.samples.shape();
    let mut epochs = Vec::new();
    let mut skipped = Vec::new();
    for (i, &onset) in rec.stimulus_onsets.iter().enumerate() {
        let on = onset as i64;
        let (start, end) = (on + w0, on + w1);
        if start < trim || end > total - trim {
            skipped.push(SkippedTrial {
                onset,
                reason: format!(
                    "epoch [{start}, {end}) leaves less than {EDGE_TRIM_SECONDS} s of margin"
                ),
            });
            continue;
        }
        let len = (end - start) as usize;
        let mut data = Mat::zeros(c, len);
        let bs = (on + b0 - start) as usize;
        let be = (on + b1 - start) as usize;
        for r in 0..c {
            let src = &rec.samples.data[r * t + start as usize..r * t + end as usize];
            let row = data.row_mut(r);
            row.copy_from_slice(src);
            let mean: f64 = row[bs..be].iter().sum::<f64>() / (be - bs) as f64;
            for v in row.iter_mut() {
                *v -= mean;
            }
        }
        epochs.push(Epoch {
            data,
            tone: rec.tone_labels[i],
            subject: rec.subject_labels[i],
            onset,
        });
    }
    Ok((epochs, skipped))
}

/// Slice the `crop` window (seconds relative to the onset) out of an epoch
/// that spans `epoch_window`. The default crop `(0, 1)` at 500 Hz yields
/// exactly 500 samples per channel.
pub fn crop_to_t(
    epoch: &Mat<f64>,
    rate_hz: f64,
    epoch_window: (f64, f64),
    crop: (f64, f64),
) -> Result<Mat<f64>> {
    if crop.0 >= crop.1 {
        return Err(Error::invalid(format!(
            "crop window ({}, {}) must be increasing",
            crop.0, crop.1
        )));
    }
    let start = ((crop.0 - epoch_window.0) * rate_hz).round() as i64;
    let len = ((crop.1 - crop.0) * rate_hz).round() as usize;
    if start < 0 || start as usize + len > epoch.cols {
        return Err(Error::invalid(format!(
            "crop [{start}, {}) outside epoch of {} samples",
            start + len as i64,
            epoch.cols
        )));
    }
    let start = start as usize;
    let mut out = Mat::zeros(epoch.rows, len);
    for r in 0..epoch.rows {
        out.row_mut(r)
            .copy_from_slice(&epoch.row(r)[start..start + len]);
    }
    Ok(out)
}

/// Append first-order temporal differences: rows `0..C` hold `x_t` for
/// `t = 2..T`, rows `C..2C` hold `x_t - x_{t-1}`; both have length `T - 1`.
pub fn difference_augment(block: &Mat<f64>) -> Result<Mat<f64>> {
    let (c, t) = block.shape();
    if t < 2 {
        return Err(Error::invalid(format!(
            "difference augmentation needs T >= 2, got {t}"
        )));
    }
    let tp = t - 1;
    let mut out = Mat::zeros(2 * c, tp);
    for r in 0..c {
        let src = block.row(r);
        for j in 0..tp {
            out.data[r * tp + j] = src[j + 1];
            out.data[(c + r) * tp + j] = src[j + 1] - src[j];
        }
    }
    Ok(out)
}

/// Snap every value to the nearest 32-bit float. The dataset container
/// stores trials as `f32`; quantizing before the difference step keeps the
/// raw rows and the cumulative sum of the diff rows exactly consistent.
pub fn quantize_f32(block: &Mat<f64>) -> Mat<f64> {
    Mat {
        rows: block.rows,
        cols: block.cols,
        data: block.data.iter().map(|&v| v as f32 as f64).collect(),
    }
}

/// EEG and EMG recordings of the same session, sharing onsets and labels.
#[derive(Clone, Debug)]
pub struct PairedRecording {
    pub eeg: ContinuousRecording,
    pub emg: ContinuousRecording,
}

impl PairedRecording {
    pub fn validate(&self) -> Result<()> {
        self.eeg.validate()?;
        self.emg.validate()?;
        if self.eeg.rate_hz != self.emg.rate_hz {
            return Err(Error::invalid(format!(
                "EEG rate {} Hz and EMG rate {} Hz differ",
                self.eeg.rate_hz, self.emg.rate_hz
            )));
        }
        if self.eeg.stimulus_onsets != self.emg.stimulus_onsets
            || self.eeg.tone_labels != self.emg.tone_labels
            || self.eeg.subject_labels != self.emg.subject_labels
        {
            return Err(Error::invalid(
                "EEG and EMG annotations must be identical within a session",
            ));
        }
        Ok(())
    }
}

/// Preprocessing parameters. Defaults follow the standard recipe: 500 Hz,
/// 1-100 Hz band, 50 Hz notch, (-2 s, 2 s) epochs with a (-2 s, 0) baseline,
/// and a [0, 1 s) post-onset crop.
#[derive(Clone, Copy, Debug)]
pub struct PipelineConfig {
    pub target_rate_hz: f64,
    pub band: (f64, f64),
    pub notch_hz: f64,
    pub epoch_window: (f64, f64),
    pub baseline: (f64, f64),
    pub crop: (f64, f64),
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_rate_hz: 500.0,
            band: (1.0, 100.0),
            notch_hz: 50.0,
            epoch_window: (-2.0, 2.0),
            baseline: (-2.0, 0.0),
            crop: (0.0, 1.0),
        }
    }
}

/// What the pipeline kept and dropped.
#[derive(Clone, Debug, Default)]
pub struct PipelineReport {
    pub kept: usize,
    pub skipped: Vec<SkippedTrial>,
}

fn preprocess_modality(
    rec: &ContinuousRecording,
    cfg: &PipelineConfig,
    artifact: &dyn ArtifactRemoval,
) -> Result<(Vec<Epoch>, Vec<SkippedTrial>)> {
    let rec = if rec.rate_hz == cfg.target_rate_hz {
        rec.clone()
    } else {
        downsample(rec, cfg.target_rate_hz)?
    };
    let rec = butterworth_filter(&rec, &FilterSpec::bandpass(cfg.band.0, cfg.band.1))?;
    let rec = butterworth_filter(&rec, &FilterSpec::notch(cfg.notch_hz))?;
    let rec = common_average_reference(&rec)?;
    let rec = artifact.apply(rec)?;
    epoch_and_baseline(&rec, cfg.epoch_window, cfg.baseline)
}

/// Run the full preprocessing chain on a paired session and assemble trial
/// tensors. CAR is applied separately per modality.
pub fn preprocess(
    paired: &PairedRecording,
    cfg: &PipelineConfig,
    artifact: &dyn ArtifactRemoval,
) -> Result<(Vec<TrialTensor>, PipelineReport)> {
    paired.validate()?;
    let (eeg_epochs, eeg_skipped) = preprocess_modality(&paired.eeg, cfg, artifact)?;
    let (emg_epochs, emg_skipped) = preprocess_modality(&paired.emg, cfg, artifact)?;
    if eeg_epochs.len() != emg_epochs.len() {
        return Err(Error::invalid(format!(
            "modalities kept different trial counts ({} EEG vs {} EMG)",
            eeg_epochs.len(),
            emg_epochs.len()
        )));
    }
    let mut trials = Vec::with_capacity(eeg_epochs.len());
    for (e, m) in eeg_epochs.iter().zip(emg_epochs.iter()) {
        debug_assert_eq!(e.onset, m.onset);
        // Quantize before differencing: the diff rows then are exact
        // differences of the stored raw values.
        let eeg = difference_augment(&quantize_f32(&crop_to_t(
            &e.data,
            cfg.target_rate_hz,
            cfg.epoch_window,
            cfg.crop,
        )?))?
        .convert::<f32>();
        let emg = difference_augment(&quantize_f32(&crop_to_t(
            &m.data,
            cfg.target_rate_hz,
            cfg.epoch_window,
            cfg.crop,
        )?))?
        .convert::<f32>();
        trials.push(TrialTensor {
            eeg,
            emg,
            tone: e.tone,
            subject: e.subject,
        });
    }
    Ok((
        trials,
        PipelineReport {
            kept: eeg_epochs.len(),
            skipped: eeg_skipped.into_iter().chain(emg_skipped).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Magnitude of a signal at one frequency via direct correlation.
    /// Independent of the filter design path; used as the response oracle.
    fn dft_mag(x: &[f64], freq_hz: f64, rate_hz: f64) -> f64 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (n, &v) in x.iter().enumerate() {
            let w = 2.0 * std::f64::consts::PI * freq_hz * n as f64 / rate_hz;
            re += v * w.cos();
            im -= v * w.sin();
        }
        (re * re + im * im).sqrt()
    }

    fn sine_recording(freq: f64, rate: f64, secs: f64, channels: usize) -> ContinuousRecording {
        let n = (rate * secs) as usize;
        ContinuousRecording {
            samples: Mat::from_fn(channels, n, |_, j| {
                (2.0 * std::f64::consts::PI * freq * j as f64 / rate).sin()
            }),
            rate_hz: rate,
            channel_names: (0..channels).map(|i| format!("C{i}")).collect(),
            stimulus_onsets: vec![(n / 2).max((2.0 * rate) as usize)],
            tone_labels: vec![1],
            subject_labels: vec![1],
        }
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn downsample_halves_length_and_scales_onsets() {
        let rec = sine_recording(10.0, 1000.0, 10.0, 2);
        let out = downsample(&rec, 500.0).unwrap();
        assert_eq!(out.samples.cols, rec.samples.cols / 2);
        assert_eq!(out.rate_hz, 500.0);
        assert_eq!(out.stimulus_onsets[0], rec.stimulus_onsets[0] / 2);
    }

    #[test]
    fn downsample_rejects_non_integer_ratio() {
        let rec = sine_recording(10.0, 1000.0, 10.0, 1);
        let err = downsample(&rec, 300.0).unwrap_err().to_string();
        assert!(err.contains("divide"), "{err}");
    }

    #[test]
    fn downsample_preserves_passband_sine() {
        // 10 Hz sine at 1000 Hz -> 10 Hz sine at 500 Hz, amplitude within 1%
        let rec = sine_recording(10.0, 1000.0, 12.0, 1);
        let out = downsample(&rec, 500.0).unwrap();
        let n = out.samples.cols;
        for j in n / 4..3 * n / 4 {
            let expect = (2.0 * std::f64::consts::PI * 10.0 * j as f64 / 500.0).sin();
            let got = out.samples.get(0, j);
            assert!((got - expect).abs() < 0.01, "sample {j}: {got} vs {expect}");
        }
    }

    #[test]
    fn downsample_kills_aliasing_band() {
        // 400 Hz sine at 1000 Hz is above the new Nyquist region; the
        // anti-alias response at 400 Hz (measured on the realized filter's
        // impulse response) bounds the surviving RMS.
        let rec = sine_recording(400.0, 1000.0, 12.0, 1);
        let out = downsample(&rec, 500.0).unwrap();
        let n = out.samples.cols;
        let mid = &out.samples.row(0)[n / 4..3 * n / 4];
        let in_rms = rms(&rec.samples.row(0)[rec.samples.cols / 4..3 * rec.samples.cols / 4]);
        assert!(rms(mid) < 0.05 * in_rms, "rms ratio {}", rms(mid) / in_rms);

        // oracle: impulse response of the realized anti-alias chain
        let mut impulse = vec![0.0; 16384];
        impulse[8192] = 1.0;
        let sos = filter::butter_lowpass(8, 0.45 * 500.0, 1000.0).unwrap();
        let h = filter::filtfilt(&sos, &impulse);
        let gain_400 = dft_mag(&h, 400.0, 1000.0);
        assert!(gain_400 < 1e-3, "anti-alias gain at 400 Hz: {gain_400}");
        assert!(rms(mid) / in_rms <= gain_400 * 10.0 + 1e-6);
    }

    #[test]
    fn bandpass_blocks_dc() {
        let rate = 500.0;
        let n = (rate * 10.0) as usize;
        let rec = ContinuousRecording {
            samples: Mat::from_fn(1, n, |_, _| 1.0),
            rate_hz: rate,
            channel_names: vec!["C0".into()],
            stimulus_onsets: vec![n / 2],
            tone_labels: vec![1],
            subject_labels: vec![1],
        };
        let out = butterworth_filter(&rec, &FilterSpec::bandpass(1.0, 100.0)).unwrap();
        let mid = &out.samples.row(0)[2 * n / 5..3 * n / 5];
        assert!(mid.iter().all(|v| v.abs() < 1e-3), "max {}", mid.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }

    #[test]
    fn bandpass_rejects_edges_beyond_nyquist() {
        let rec = sine_recording(10.0, 500.0, 10.0, 1);
        assert!(butterworth_filter(&rec, &FilterSpec::bandpass(1.0, 250.0)).is_err());
        assert!(butterworth_filter(&rec, &FilterSpec::bandpass(1.0, 300.0)).is_err());
    }

    #[test]
    fn notch_attenuates_50hz_by_30db() {
        let rec = sine_recording(50.0, 500.0, 12.0, 1);
        let out = butterworth_filter(&rec, &FilterSpec::notch(50.0)).unwrap();
        let n = out.samples.cols;
        let in_mid = &rec.samples.row(0)[n / 4..3 * n / 4];
        let out_mid = &out.samples.row(0)[n / 4..3 * n / 4];
        let db = 20.0 * (rms(out_mid) / rms(in_mid)).log10();
        assert!(db <= -30.0, "notch attenuation {db} dB");
    }

    #[test]
    fn notch_impulse_response_meets_spec_via_dft_oracle() {
        // realized filter: impulse through the public op
        let rate = 500.0;
        let n = 16384;
        let mut samples = Mat::zeros(1, n);
        samples.set(0, n / 2, 1.0);
        let rec = ContinuousRecording {
            samples,
            rate_hz: rate,
            channel_names: vec!["C0".into()],
            stimulus_onsets: vec![n / 2],
            tone_labels: vec![1],
            subject_labels: vec![1],
        };
        let out = butterworth_filter(&rec, &FilterSpec::notch(50.0)).unwrap();
        let h = out.samples.row(0);
        let g50 = 20.0 * dft_mag(h, 50.0, rate).log10();
        let g10 = 20.0 * dft_mag(h, 10.0, rate).log10();
        let g90 = 20.0 * dft_mag(h, 90.0, rate).log10();
        assert!(g50 <= -30.0, "|H(50)| = {g50} dB");
        assert!(g10 >= -1.0, "|H(10)| = {g10} dB");
        assert!(g90 >= -1.0, "|H(90)| = {g90} dB");
    }

    #[test]
    fn bandpass_passes_20hz_within_5_percent() {
        let rec = sine_recording(20.0, 500.0, 12.0, 1);
        let out = butterworth_filter(&rec, &FilterSpec::bandpass(1.0, 100.0)).unwrap();
        let n = out.samples.cols;
        let ratio = rms(&out.samples.row(0)[n / 4..3 * n / 4])
            / rms(&rec.samples.row(0)[n / 4..3 * n / 4]);
        assert!((ratio - 1.0).abs() < 0.05, "20 Hz gain {ratio}");
    }

    #[test]
    fn zero_phase_filtering_keeps_symmetric_pulse_symmetric() {
        let rate = 500.0;
        let n = 5001; // odd so the pulse sits exactly at the center
        let center = n / 2;
        let mut samples = Mat::zeros(1, n);
        for j in 0..n {
            let d = (j as f64 - center as f64) / 10.0;
            samples.set(0, j, (-0.5 * d * d).exp());
        }
        let rec = ContinuousRecording {
            samples,
            rate_hz: rate,
            channel_names: vec!["C0".into()],
            stimulus_onsets: vec![center],
            tone_labels: vec![1],
            subject_labels: vec![1],
        };
        let out = butterworth_filter(&rec, &FilterSpec::bandpass(1.0, 100.0)).unwrap();
        let y = out.samples.row(0);
        let peak = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let asym = (0..n / 2)
            .map(|i| (y[i] - y[n - 1 - i]).abs())
            .fold(0.0f64, f64::max);
        assert!(asym < 1e-6 * peak, "asymmetry {asym} vs peak {peak}");
    }

    #[test]
    fn car_examples() {
        let rec = ContinuousRecording {
            samples: Mat::from_vec(2, 1, vec![1.0, 2.0]).unwrap(),
            rate_hz: 1.0,
            channel_names: vec!["A".into(), "B".into()],
            stimulus_onsets: vec![],
            tone_labels: vec![],
            subject_labels: vec![],
        };
        // margin validation needs no onsets here
        let out = common_average_reference(&rec).unwrap();
        assert_eq!(out.samples.data, vec![-0.5, 0.5]);

        // identical channels -> all zero
        let rec2 = ContinuousRecording {
            samples: Mat::from_fn(3, 5, |_, j| j as f64),
            rate_hz: 1.0,
            channel_names: vec!["A".into(), "B".into(), "C".into()],
            stimulus_onsets: vec![],
            tone_labels: vec![],
            subject_labels: vec![],
        };
        let out2 = common_average_reference(&rec2).unwrap();
        assert!(out2.samples.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn car_rejects_single_channel() {
        let rec = ContinuousRecording {
            samples: Mat::zeros(1, 10),
            rate_hz: 1.0,
            channel_names: vec!["A".into()],
            stimulus_onsets: vec![],
            tone_labels: vec![],
            subject_labels: vec![],
        };
        assert!(common_average_reference(&rec).is_err());
    }

    #[test]
    fn car_columns_sum_to_zero_on_random_input() {
        let rec = ContinuousRecording {
            samples: Mat::from_fn(5, 100, |r, j| ((r * 100 + j) as f64 * 0.61).sin() * 3.0),
            rate_hz: 1.0,
            channel_names: (0..5).map(|i| format!("C{i}")).collect(),
            stimulus_onsets: vec![],
            tone_labels: vec![],
            subject_labels: vec![],
        };
        let out = common_average_reference(&rec).unwrap();
        for j in 0..100 {
            let mean: f64 = (0..5).map(|r| out.samples.get(r, j)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-9, "column {j} mean {mean}");
        }
    }

    #[test]
    fn epoch_examples() {
        let rate = 500.0;
        let n = 4000;
        // constant channel -> identically zero after baseline correction
        let rec = ContinuousRecording {
            samples: Mat::from_fn(2, n, |r, _| r as f64 + 3.0),
            rate_hz: rate,
            channel_names: vec!["A".into(), "B".into()],
            stimulus_onsets: vec![1500, 2500],
            tone_labels: vec![1, 2],
            subject_labels: vec![1, 1],
        };
        let (epochs, skipped) = epoch_and_baseline(&rec, (-2.0, 2.0), (-2.0, 0.0)).unwrap();
        assert_eq!(epochs.len(), 2);
        assert!(skipped.is_empty());
        assert_eq!(epochs[0].data.shape(), (2, 2000));
        assert!(epochs[0].data.data.iter().all(|&v| v == 0.0));

        // onset at 1000 with rate 500 covers samples [0, 2000) -- but the
        // 0.5 s trim margin rejects it
        let rec2 = ContinuousRecording {
            samples: Mat::zeros(2, n),
            rate_hz: rate,
            channel_names: vec!["A".into(), "B".into()],
            stimulus_onsets: vec![1000, 2000],
            tone_labels: vec![1, 2],
            subject_labels: vec![1, 1],
        };
        let (epochs2, skipped2) = epoch_and_baseline(&rec2, (-2.0, 2.0), (-2.0, 0.0)).unwrap();
        assert_eq!(epochs2.len(), 1);
        assert_eq!(skipped2.len(), 1);
        assert_eq!(skipped2[0].onset, 1000);
    }

    #[test]
    fn epoch_baseline_mean_is_zero_on_random_input() {
        let rate = 500.0;
        let n = 4000;
        let rec = ContinuousRecording {
            samples: Mat::from_fn(3, n, |r, j| ((r * n + j) as f64 * 0.37).sin() * 2.0),
            rate_hz: rate,
            channel_names: (0..3).map(|i| format!("C{i}")).collect(),
            stimulus_onsets: vec![2000],
            tone_labels: vec![3],
            subject_labels: vec![2],
        };
        let (epochs, _) = epoch_and_baseline(&rec, (-2.0, 2.0), (-2.0, 0.0)).unwrap();
        let e = &epochs[0];
        for r in 0..3 {
            let base = &e.data.row(r)[..1000];
            let mean: f64 = base.iter().sum::<f64>() / base.len() as f64;
            assert!(mean.abs() < 1e-9, "channel {r} baseline mean {mean}");
        }
    }

    #[test]
    fn crop_examples() {
        // 2000-sample epoch spanning (-2, 2) at 500 Hz: crop (0, 1) takes
        // samples [1000, 1500)
        let epoch = Mat::from_fn(1, 2000, |_, j| j as f64);
        let out = crop_to_t(&epoch, 500.0, (-2.0, 2.0), (0.0, 1.0)).unwrap();
        assert_eq!(out.shape(), (1, 500));
        assert_eq!(out.get(0, 0), 1000.0);

        let constant = Mat::from_fn(3, 2000, |_, _| 2.5);
        let out2 = crop_to_t(&constant, 500.0, (-2.0, 2.0), (0.0, 1.0)).unwrap();
        assert!(out2.data.iter().all(|&v| v == 2.5));

        // too-short epoch rejected
        let short = Mat::zeros(1, 900);
        assert!(crop_to_t(&short, 500.0, (-2.0, 0.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn difference_augment_examples() {
        let block = Mat::from_vec(1, 3, vec![1.0, 3.0, 6.0]).unwrap();
        let out = difference_augment(&block).unwrap();
        assert_eq!(out.shape(), (2, 2));
        assert_eq!(out.row(0), &[3.0, 6.0]);
        assert_eq!(out.row(1), &[2.0, 3.0]);

        let constant = Mat::from_fn(2, 10, |_, _| 4.0);
        let out2 = difference_augment(&constant).unwrap();
        assert!(out2.row(2).iter().all(|&v| v == 0.0));
        assert!(out2.row(3).iter().all(|&v| v == 0.0));

        let shaped = Mat::zeros(20, 500);
        assert_eq!(difference_augment(&shaped).unwrap().shape(), (40, 499));

        assert!(difference_augment(&Mat::zeros(2, 1)).is_err());
    }

    #[test]
    fn difference_augment_reconstructs_exactly_from_f32_grid() {
        // pipeline-realistic inputs: values on the f32 grid (the container
        // precision), arbitrary signal shape
        let block = quantize_f32(&Mat::from_fn(4, 200, |r, j| {
            ((r * 200 + j) as f64 * 0.193).sin() * 1.7 + 0.3 * ((j as f64) * 0.71).cos()
        }));
        let out = difference_augment(&block).unwrap();
        let c = 4;
        let tp = out.cols;
        for r in 0..c {
            let raw = out.row(r);
            let diff = out.row(c + r);
            let mut recon = raw[0];
            for j in 1..tp {
                recon += diff[j];
                assert!(
                    recon.to_bits() == raw[j].to_bits(),
                    "channel {r} sample {j}: {recon} vs {}",
                    raw[j]
                );
            }
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let rate = 500.0;
        let n = 6000;
        let mk = |c: usize| ContinuousRecording {
            samples: Mat::from_fn(c, n, |r, j| {
                ((r * n + j) as f64 * 0.11).sin() + ((j as f64) * 0.029).cos()
            }),
            rate_hz: rate,
            channel_names: (0..c).map(|i| format!("C{i}")).collect(),
            stimulus_onsets: vec![1500, 3000, 4500],
            tone_labels: vec![1, 2, 3],
            subject_labels: vec![1, 1, 1],
        };
        let paired = PairedRecording {
            eeg: mk(4),
            emg: mk(2),
        };
        let cfg = PipelineConfig::default();
        let (a, _) = preprocess(&paired, &cfg, &PassthroughArtifactRemoval).unwrap();
        let (b, _) = preprocess(&paired, &cfg, &PassthroughArtifactRemoval).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
        // shape chain: 500-sample crop -> 499 after augmentation
        assert_eq!(a[0].eeg.shape(), (8, 499));
        assert_eq!(a[0].emg.shape(), (4, 499));
    }
}
