//! Bit-exact dataset container, synthetic multi-subject generator, and
//! channel-subset selection.
//!
//! A dataset directory holds `manifest.json` (UTF-8) plus `trials.bin`:
//! an 8-byte magic, then per trial the EEG block followed by the EMG block,
//! little-endian `f32`, row-major (trial, then channel, then sample).
//! Continuous recordings use the same scheme with `signal.bin`.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::sigproc::{difference_augment, quantize_f32, ContinuousRecording, PairedRecording};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const TRIALS_MAGIC: &[u8; 8] = b"CATTRL\x01\x00";
const SIGNAL_MAGIC: &[u8; 8] = b"CATSIG\x01\x00";
pub const CONTAINER_VERSION: u32 = 1;

/// One preprocessed trial: raw-plus-difference blocks for both modalities.
/// Values live on the 32-bit float grid, which is what the container
/// stores, so save/load round-trips are bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialTensor {
    /// `[2*C_e x T']`; rows `0..C_e` are the raw streams, rows `C_e..2*C_e`
    /// their first-order differences.
    pub eeg: Mat<f32>,
    /// `[2*C_m x T']`, same layout.
    pub emg: Mat<f32>,
    /// Tone label in `1..=4`.
    pub tone: u8,
    /// 1-based subject id.
    pub subject: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Audible,
    Silent,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    /// Absolute byte offset of the trial payload inside `trials.bin`.
    pub offset: u64,
    pub tone: u8,
    pub subject: u16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub kind: String,
    pub condition: Condition,
    pub rate_hz: f64,
    pub t_prime: usize,
    pub eeg_channel_names: Vec<String>,
    pub emg_channel_names: Vec<String>,
    pub subjects: Vec<u16>,
    pub endianness: String,
    pub trials: Vec<TrialMeta>,
}

/// In-memory dataset: manifest plus trial tensors.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trials: Vec<TrialTensor>,
}

impl Dataset {
    pub fn c_e(&self) -> usize {
        self.manifest.eeg_channel_names.len()
    }

    pub fn c_m(&self) -> usize {
        self.manifest.emg_channel_names.len()
    }

    pub fn t_prime(&self) -> usize {
        self.manifest.t_prime
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.trials.len() != self.trials.len() {
            return Err(Error::format(format!(
                "manifest lists {} trials but {} are present",
                m.trials.len(),
                self.trials.len()
            )));
        }
        for (i, t) in self.trials.iter().enumerate() {
            if t.eeg.shape() != (2 * self.c_e(), m.t_prime) {
                return Err(Error::format(format!(
                    "trial {i}: EEG block is {:?}, manifest implies {:?}",
                    t.eeg.shape(),
                    (2 * self.c_e(), m.t_prime)
                )));
            }
            if t.emg.shape() != (2 * self.c_m(), m.t_prime) {
                return Err(Error::format(format!(
                    "trial {i}: EMG block is {:?}, manifest implies {:?}",
                    t.emg.shape(),
                    (2 * self.c_m(), m.t_prime)
                )));
            }
            if !(1..=4).contains(&t.tone) {
                return Err(Error::format(format!(
                    "trial {i}: tone {} outside 1..=4",
                    t.tone
                )));
            }
            if !m.subjects.contains(&t.subject) {
                return Err(Error::format(format!(
                    "trial {i}: subject {} not in manifest",
                    t.subject
                )));
            }
        }
        Ok(())
    }

    pub fn subject_ids(&self) -> Vec<u16> {
        self.manifest.subjects.clone()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(bytes)
}

fn push_f32_le(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn parse_f32_le(bytes: &[u8], offset: usize, count: usize, what: &str) -> Result<Vec<f32>> {
    let end = offset + 4 * count;
    if end > bytes.len() {
        return Err(Error::format(format!(
            "{what}: need bytes [{offset}, {end}) but file has {}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let p = offset + 4 * i;
        let v = f32::from_le_bytes([bytes[p], bytes[p + 1], bytes[p + 2], bytes[p + 3]]);
        if !v.is_finite() {
            return Err(Error::format(format!(
                "{what}: non-finite value at byte offset {p}"
            )));
        }
        out.push(v);
    }
    Ok(out)
}

/// Write `manifest.json` + `trials.bin`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut bin = Vec::with_capacity(
        8 + ds
            .trials
            .iter()
            .map(|t| 4 * (t.eeg.data.len() + t.emg.data.len()))
            .sum::<usize>(),
    );
    bin.extend_from_slice(TRIALS_MAGIC);
    let mut manifest = ds.manifest.clone();
    for (meta, trial) in manifest.trials.iter_mut().zip(ds.trials.iter()) {
        meta.offset = bin.len() as u64;
        push_f32_le(&mut bin, &trial.eeg.data);
        push_f32_le(&mut bin, &trial.emg.data);
    }
    write_file(&dir.join("trials.bin"), &bin)?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_file(&dir.join("manifest.json"), &json)?;
    Ok(())
}

/// Read a dataset directory back. Rejects magic/version mismatches,
/// truncated payloads (reporting the byte position), and NaN payloads.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
    if manifest.kind != "trials" {
        return Err(Error::format(format!(
            "expected a trials container, found kind `{}`",
            manifest.kind
        )));
    }
    if manifest.version != CONTAINER_VERSION {
        return Err(Error::format(format!(
            "container version {} unsupported (expected {CONTAINER_VERSION})",
            manifest.version
        )));
    }
    if manifest.endianness != "little" {
        return Err(Error::format(format!(
            "unsupported endianness tag `{}`",
            manifest.endianness
        )));
    }
    let bin = read_file(&dir.join("trials.bin"))?;
    if bin.len() < 8 || &bin[..8] != TRIALS_MAGIC {
        return Err(Error::format("trials.bin magic mismatch"));
    }
    let ce2 = 2 * manifest.eeg_channel_names.len();
    let cm2 = 2 * manifest.emg_channel_names.len();
    let tp = manifest.t_prime;
    let trial_bytes = 4 * (ce2 + cm2) * tp;
    let expect_len = 8 + trial_bytes * manifest.trials.len();
    if bin.len() != expect_len {
        return Err(Error::format(format!(
            "trials.bin is {} bytes, expected {expect_len} (diverges at byte {})",
            bin.len(),
            bin.len().min(expect_len)
        )));
    }
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for (i, meta) in manifest.trials.iter().enumerate() {
        let off = meta.offset as usize;
        if off != 8 + i * trial_bytes {
            return Err(Error::format(format!(
                "trial {i}: offset {off} does not match layout ({})",
                8 + i * trial_bytes
            )));
        }
        let eeg = parse_f32_le(&bin, off, ce2 * tp, &format!("trial {i} EEG"))?;
        let emg = parse_f32_le(&bin, off + 4 * ce2 * tp, cm2 * tp, &format!("trial {i} EMG"))?;
        trials.push(TrialTensor {
            eeg: Mat::from_vec(ce2, tp, eeg)?,
            emg: Mat::from_vec(cm2, tp, emg)?,
            tone: meta.tone,
            subject: meta.subject,
        });
    }
    let ds = Dataset { manifest, trials };
    ds.validate()?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RecordingManifest {
    version: u32,
    kind: String,
    rate_hz: f64,
    n_samples: usize,
    eeg_channel_names: Vec<String>,
    emg_channel_names: Vec<String>,
    stimulus_onsets: Vec<usize>,
    tone_labels: Vec<u8>,
    subject_labels: Vec<u16>,
    endianness: String,
}

/// Write a continuous paired recording as `manifest.json` + `signal.bin`.
pub fn save_recording(rec: &PairedRecording, dir: &Path) -> Result<()> {
    rec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = RecordingManifest {
        version: CONTAINER_VERSION,
        kind: "recording".into(),
        rate_hz: rec.eeg.rate_hz,
        n_samples: rec.eeg.samples.cols,
        eeg_channel_names: rec.eeg.channel_names.clone(),
        emg_channel_names: rec.emg.channel_names.clone(),
        stimulus_onsets: rec.eeg.stimulus_onsets.clone(),
        tone_labels: rec.eeg.tone_labels.clone(),
        subject_labels: rec.eeg.subject_labels.clone(),
        endianness: "little".into(),
    };
    let mut bin = Vec::new();
    bin.extend_from_slice(SIGNAL_MAGIC);
    for m in [&rec.eeg.samples, &rec.emg.samples] {
        for &v in &m.data {
            bin.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(&dir.join("signal.bin"), &bin)?;
    write_file(
        &dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Read a continuous paired recording.
pub fn load_recording(dir: &Path) -> Result<PairedRecording> {
    let manifest: RecordingManifest =
        serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
    if manifest.kind != "recording" {
        return Err(Error::format(format!(
            "expected a recording container, found kind `{}`",
            manifest.kind
        )));
    }
    if manifest.version != CONTAINER_VERSION {
        return Err(Error::format(format!(
            "container version {} unsupported (expected {CONTAINER_VERSION})",
            manifest.version
        )));
    }
    let bin = read_file(&dir.join("signal.bin"))?;
    if bin.len() < 8 || &bin[..8] != SIGNAL_MAGIC {
        return Err(Error::format("signal.bin magic mismatch"));
    }
    let n = manifest.n_samples;
    let ce = manifest.eeg_channel_names.len();
    let cm = manifest.emg_channel_names.len();
    if bin.len() != 8 + 4 * (ce + cm) * n {
        return Err(Error::format(format!(
            "signal.bin is {} bytes, expected {}",
            bin.len(),
            8 + 4 * (ce + cm) * n
        )));
    }
    let eeg = parse_f32_le(&bin, 8, ce * n, "EEG signal")?;
    let emg = parse_f32_le(&bin, 8 + 4 * ce * n, cm * n, "EMG signal")?;
    let make = |names: Vec<String>, data: Vec<f32>, rows: usize| -> Result<ContinuousRecording> {
        Ok(ContinuousRecording {
            samples: Mat::from_vec(rows, n, data.into_iter().map(f64::from).collect())?,
            rate_hz: manifest.rate_hz,
            channel_names: names,
            stimulus_onsets: manifest.stimulus_onsets.clone(),
            tone_labels: manifest.tone_labels.clone(),
            subject_labels: manifest.subject_labels.clone(),
        })
    };
    let rec = PairedRecording {
        eeg: make(manifest.eeg_channel_names.clone(), eeg, ce)?,
        emg: make(manifest.emg_channel_names.clone(), emg, cm)?,
    };
    rec.validate()?;
    Ok(rec)
}

/// Synthetic generator parameters. The defaults mirror the real experiment
/// shape: 10 subjects, 480 trials each, 20 EEG + 5 EMG channels at 500 Hz.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub c_e: usize,
    pub c_m: usize,
    /// Samples per trial before difference augmentation (`T' = t_samples - 1`).
    pub t_samples: usize,
    /// Template RMS over noise RMS in the informative channels.
    pub snr: f64,
    /// Scale of the per-subject gain/offset shift; 0 removes subject
    /// identity entirely.
    pub subject_shift_scale: f64,
    /// EEG channels carrying the tone contour.
    pub informative_eeg: Vec<usize>,
    /// EMG channels carrying the tone contour.
    pub informative_emg: Vec<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 10,
            trials_per_subject: 480,
            c_e: 20,
            c_m: 5,
            t_samples: 500,
            snr: 2.0,
            subject_shift_scale: 0.3,
            informative_eeg: vec![2, 5, 9, 13, 17],
            informative_emg: vec![0, 2, 4],
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.trials_per_subject == 0 {
            return Err(Error::invalid("subject and trial counts must be positive"));
        }
        if self.c_e == 0 || self.c_m == 0 || self.t_samples < 2 {
            return Err(Error::invalid("channel counts must be positive and T >= 2"));
        }
        if !(self.snr > 0.0) {
            return Err(Error::invalid(format!(
                "snr must be positive, got {}",
                self.snr
            )));
        }
        if self.informative_eeg.iter().any(|&c| c >= self.c_e) {
            return Err(Error::invalid("informative EEG channel index out of range"));
        }
        if self.informative_emg.iter().any(|&c| c >= self.c_m) {
            return Err(Error::invalid("informative EMG channel index out of range"));
        }
        Ok(())
    }
}

/// Latent pitch-contour envelope for each tone over `u` in `[0, 1]`:
/// level, rising, dipping, falling.
pub fn tone_contour(tone: u8, u: f64) -> f64 {
    match tone {
        1 => 1.0,
        2 => 0.2 + 1.6 * u,
        3 => 1.5 - 1.3 * (std::f64::consts::PI * u).sin(),
        4 => 1.8 - 1.6 * u,
        _ => 0.0,
    }
}

/// Generate a synthetic multi-subject dataset: tone-specific contours
/// injected into the informative channels of both modalities, per-subject
/// gain/offset shifts on every channel, and white noise at the configured
/// SNR. Deterministic in the seed.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let t = cfg.t_samples;
    let tp = t - 1;
    let noise_sigma = 1.0 / cfg.snr;

    let mut trials = Vec::with_capacity(cfg.n_subjects * cfg.trials_per_subject);
    let mut metas = Vec::with_capacity(cfg.n_subjects * cfg.trials_per_subject);
    for subject in 1..=cfg.n_subjects as u16 {
        // subject fingerprint: gain and offset per channel, both modalities
        let shift = cfg.subject_shift_scale;
        let eeg_gain: Vec<f64> = (0..cfg.c_e)
            .map(|_| (1.0 + shift * normal.sample(&mut rng)).max(0.2))
            .collect();
        let eeg_off: Vec<f64> = (0..cfg.c_e)
            .map(|_| shift * normal.sample(&mut rng))
            .collect();
        let emg_gain: Vec<f64> = (0..cfg.c_m)
            .map(|_| (1.0 + shift * normal.sample(&mut rng)).max(0.2))
            .collect();
        let emg_off: Vec<f64> = (0..cfg.c_m)
            .map(|_| shift * normal.sample(&mut rng))
            .collect();

        // balanced tone labels, shuffled
        let mut tones: Vec<u8> = (0..cfg.trials_per_subject)
            .map(|i| (i % 4 + 1) as u8)
            .collect();
        tones.shuffle(&mut rng);

        for &tone in &tones {
            let amp = (1.0 + 0.1 * normal.sample(&mut rng)).clamp(0.5, 1.5);
            let mut gen_block = |c: usize, informative: &[usize], gain: &[f64], off: &[f64]| {
                let mut raw = Mat::zeros(c, t);
                for ch in 0..c {
                    let informative_ch = informative.contains(&ch);
                    for j in 0..t {
                        let u = j as f64 / (t - 1) as f64;
                        let sig = if informative_ch {
                            amp * tone_contour(tone, u)
                        } else {
                            0.0
                        };
                        let v = gain[ch] * (sig + noise_sigma * normal.sample(&mut rng)) + off[ch];
                        raw.set(ch, j, v);
                    }
                }
                raw
            };
            let eeg_raw = gen_block(cfg.c_e, &cfg.informative_eeg, &eeg_gain, &eeg_off);
            let emg_raw = gen_block(cfg.c_m, &cfg.informative_emg, &emg_gain, &emg_off);
            let eeg = difference_augment(&quantize_f32(&eeg_raw))?.convert::<f32>();
            let emg = difference_augment(&quantize_f32(&emg_raw))?.convert::<f32>();
            trials.push(TrialTensor {
                eeg,
                emg,
                tone,
                subject,
            });
            metas.push(TrialMeta {
                offset: 0,
                tone,
                subject,
            });
        }
    }

    let manifest = DatasetManifest {
        version: CONTAINER_VERSION,
        kind: "trials".into(),
        condition: Condition::Synthetic,
        rate_hz: 500.0,
        t_prime: tp,
        eeg_channel_names: (0..cfg.c_e).map(|i| format!("E{:02}", i + 1)).collect(),
        emg_channel_names: (0..cfg.c_m).map(|i| format!("M{:02}", i + 1)).collect(),
        subjects: (1..=cfg.n_subjects as u16).collect(),
        endianness: "little".into(),
        trials: metas,
    };
    let ds = Dataset { manifest, trials };
    ds.validate()?;
    Ok(ds)
}

/// Restrict the EEG block to the named channels, in the given order. The
/// raw and difference halves are sliced consistently and the manifest is
/// updated.
pub fn select_channels(ds: &Dataset, keep: &[String]) -> Result<Dataset> {
    let mut indices = Vec::with_capacity(keep.len());
    for name in keep {
        match ds.manifest.eeg_channel_names.iter().position(|n| n == name) {
            Some(i) => indices.push(i),
            None => return Err(Error::invalid(format!("unknown EEG channel `{name}`"))),
        }
    }
    let ce = ds.c_e();
    let tp = ds.t_prime();
    let trials: Vec<TrialTensor> = ds
        .trials
        .iter()
        .map(|t| {
            let mut eeg = Mat::zeros(2 * indices.len(), tp);
            for (new_r, &old) in indices.iter().enumerate() {
                eeg.row_mut(new_r).copy_from_slice(t.eeg.row(old));
                eeg.row_mut(indices.len() + new_r)
                    .copy_from_slice(t.eeg.row(ce + old));
            }
            TrialTensor {
                eeg,
                emg: t.emg.clone(),
                tone: t.tone,
                subject: t.subject,
            }
        })
        .collect();
    let mut manifest = ds.manifest.clone();
    manifest.eeg_channel_names = keep.to_vec();
    let out = Dataset { manifest, trials };
    out.validate()?;
    Ok(out)
}
