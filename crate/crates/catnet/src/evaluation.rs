//! Split construction (stratified k-fold, leave-one-subject-out), metric
//! computation, channel ranking, and report rendering.

use crate::dataio::{Dataset, TrialTensor};
use crate::error::{Error, Result};
use crate::mat::{matmul_acc, Scalar};
use crate::model::{self, ModelConfig, ModelParams};
use crate::training::{fit, gather, FitResult, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const N_TONES: usize = 4;

/// Tone confusion counts; rows are the true tone, columns the prediction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_TONES]; N_TONES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(truth: &[u8], predicted: &[u8]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid("label lists must have equal length"));
        }
        let mut cm = ConfusionMatrix::new();
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: u8, predicted: u8) -> Result<()> {
        if !(1..=N_TONES as u8).contains(&truth) || !(1..=N_TONES as u8).contains(&predicted) {
            return Err(Error::invalid(format!(
                "tone labels must lie in 1..=4, got ({truth}, {predicted})"
            )));
        }
        self.counts[(truth - 1) as usize][(predicted - 1) as usize] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, r: usize) -> u64 {
        self.counts[r].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

/// Per-class precision/recall/F1.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metrics plus split provenance.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub per_class: [ClassMetrics; N_TONES],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub kappa: f64,
    pub confusion: ConfusionMatrix,
    pub split: String,
    pub seed: u64,
}

/// Derive the report from a confusion matrix. Precision of a class that
/// was never predicted is defined as 0; an all-chance matrix has kappa 0.
pub fn metrics(cm: &ConfusionMatrix, split: impl Into<String>, seed: u64) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    let n = total as f64;
    let mut per_class = [ClassMetrics::default(); N_TONES];
    for c in 0..N_TONES {
        let tp = cm.counts[c][c] as f64;
        let col = cm.col_sum(c) as f64;
        let row = cm.row_sum(c) as f64;
        let precision = if col > 0.0 { tp / col } else { 0.0 };
        let recall = if row > 0.0 { tp / row } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class[c] = ClassMetrics {
            precision,
            recall,
            f1,
        };
    }
    let trace: u64 = (0..N_TONES).map(|c| cm.counts[c][c]).sum();
    let p_o = trace as f64 / n;
    let p_e: f64 = (0..N_TONES)
        .map(|c| cm.row_sum(c) as f64 * cm.col_sum(c) as f64)
        .sum::<f64>()
        / (n * n);
    let kappa = if (1.0 - p_e).abs() < 1e-12 {
        0.0
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(EvalReport {
        per_class,
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / N_TONES as f64,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / N_TONES as f64,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / N_TONES as f64,
        accuracy: p_o,
        kappa,
        confusion: cm.clone(),
        split: split.into(),
        seed,
    })
}

/// Stratified k-fold indices: within each tone, trials are grouped by
/// subject, shuffled, and dealt round-robin, so per-fold tone counts stay
/// within one trial of the ideal and every fold draws from every subject.
pub fn kfold_split(
    tones: &[u8],
    subjects: &[u16],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if tones.len() != subjects.len() {
        return Err(Error::invalid("tone and subject lists must have equal length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (ti, tone) in (1..=N_TONES as u8).enumerate() {
        // indices of this tone, grouped by subject in ascending order
        let mut subject_ids: Vec<u16> = subjects
            .iter()
            .zip(tones)
            .filter(|(_, &t)| t == tone)
            .map(|(&s, _)| s)
            .collect();
        subject_ids.sort_unstable();
        subject_ids.dedup();
        let mut dealt: Vec<usize> = Vec::new();
        for sid in subject_ids {
            let mut group: Vec<usize> = (0..tones.len())
                .filter(|&i| tones[i] == tone && subjects[i] == sid)
                .collect();
            group.shuffle(&mut rng);
            dealt.extend(group);
        }
        if dealt.len() < k {
            return Err(Error::invalid(format!(
                "tone {tone} has only {} trials for {k} folds",
                dealt.len()
            )));
        }
        // rotate the starting fold per tone so remainders spread out
        for (j, idx) in dealt.into_iter().enumerate() {
            folds[(j + ti) % k].push(idx);
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

/// One split per subject: test on that subject, train on the others.
pub fn loso_split(subjects: &[u16]) -> Result<Vec<(u16, Vec<usize>, Vec<usize>)>> {
    let mut ids: Vec<u16> = subjects.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::invalid(
            "leave-one-subject-out needs at least 2 subjects",
        ));
    }
    Ok(ids
        .into_iter()
        .map(|held| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, &s) in subjects.iter().enumerate() {
                if s == held {
                    test.push(i);
                } else {
                    train.push(i);
                }
            }
            (held, train, test)
        })
        .collect())
}

/// Attribute the mean channel-attention gates back to named input
/// channels through the absolute conv-stack weights, normalize to mean 1,
/// and sort descending (stable, so equal weights keep input order).
pub fn rank_channels<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trials: &[&TrialTensor],
    names: &[String],
) -> Result<Vec<(String, f64)>> {
    let (eeg_gates, _) = model::mean_gates(params, cfg, trials)?;
    let c2 = 2 * cfg.dims.c_e;
    if names.len() != cfg.dims.c_e {
        return Err(Error::invalid(format!(
            "{} channel names for {} EEG channels",
            names.len(),
            cfg.dims.c_e
        )));
    }
    // |W_conv1 * W_conv2| maps input rows to feature columns
    let w1: Vec<f64> = params.eeg_enc.conv1_w.data.iter().map(|v| v.to_f64_lossy()).collect();
    let w2: Vec<f64> = params.eeg_enc.conv2_w.data.iter().map(|v| v.to_f64_lossy()).collect();
    let conv1 = params.eeg_enc.conv1_w.cols;
    let feat = params.eeg_enc.conv2_w.cols;
    let mut prod = vec![0.0f64; c2 * feat];
    matmul_acc(&w1, &w2, &mut prod, c2, conv1, feat);
    let mut row_weight = vec![0.0f64; c2];
    for r in 0..c2 {
        for f in 0..feat {
            row_weight[r] += prod[r * feat + f].abs() * eeg_gates[f];
        }
    }
    // raw and difference rows of one electrode contribute together
    let mut weights: Vec<f64> = (0..cfg.dims.c_e)
        .map(|c| row_weight[c] + row_weight[cfg.dims.c_e + c])
        .collect();
    let mean: f64 = weights.iter().sum::<f64>() / weights.len() as f64;
    if mean > 0.0 {
        weights.iter_mut().for_each(|w| *w /= mean);
    }
    let pairs: Vec<(String, f64)> = names.iter().cloned().zip(weights).collect();
    Ok(sort_by_weight(pairs))
}

/// Stable descending sort by weight.
pub fn sort_by_weight(mut pairs: Vec<(String, f64)>) -> Vec<(String, f64)> {
    pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    pairs
}

/// The top-k channel names of a ranking.
pub fn top_k(ranked: &[(String, f64)], k: usize) -> Result<Vec<String>> {
    if k > ranked.len() {
        return Err(Error::invalid(format!(
            "requested top {k} of {} channels",
            ranked.len()
        )));
    }
    Ok(ranked[..k].iter().map(|(n, _)| n.clone()).collect())
}

/// `tone,precision,recall,f1` rows for one report.
pub fn tone_metrics_csv(r: &EvalReport) -> String {
    let mut s = String::from("tone,precision,recall,f1\n");
    for (i, m) in r.per_class.iter().enumerate() {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            i + 1,
            m.precision,
            m.recall,
            m.f1
        ));
    }
    s
}

pub fn parse_tone_metrics_csv(s: &str) -> Result<Vec<(u8, f64, f64, f64)>> {
    let mut lines = s.lines();
    match lines.next() {
        Some("tone,precision,recall,f1") => {}
        other => {
            return Err(Error::format(format!(
                "unexpected tone metrics header {other:?}"
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::format(format!("bad tone metrics row `{l}`")));
            }
            Ok((
                parts[0].parse().map_err(|_| Error::format("bad tone"))?,
                parts[1].parse().map_err(|_| Error::format("bad precision"))?,
                parts[2].parse().map_err(|_| Error::format("bad recall"))?,
                parts[3].parse().map_err(|_| Error::format("bad f1"))?,
            ))
        })
        .collect()
}

/// `subject,accuracy` rows.
pub fn loso_csv(rows: &[(u16, f64)]) -> String {
    let mut s = String::from("subject,accuracy\n");
    for (subject, acc) in rows {
        s.push_str(&format!("{subject},{acc:.6}\n"));
    }
    s
}

pub fn parse_loso_csv(s: &str) -> Result<Vec<(u16, f64)>> {
    let mut lines = s.lines();
    match lines.next() {
        Some("subject,accuracy") => {}
        other => {
            return Err(Error::format(format!(
                "unexpected subject accuracy header {other:?}"
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::format(format!("bad subject row `{l}`")))?;
            Ok((
                a.parse().map_err(|_| Error::format("bad subject id"))?,
                b.parse().map_err(|_| Error::format("bad accuracy"))?,
            ))
        })
        .collect()
}

/// Aligned per-tone F1/recall table over several labeled reports.
pub fn render_tone_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<24}", "run"));
    for t in 1..=N_TONES {
        out.push_str(&format!("  Tone{t:<2} F      R  "));
    }
    out.push_str("  Macro  F      R  \n");
    for (label, r) in rows {
        out.push_str(&format!("{label:<24}"));
        for m in &r.per_class {
            out.push_str(&format!("  {:>10.2} {:>6.2}", 100.0 * m.f1, 100.0 * m.recall));
        }
        out.push_str(&format!(
            "  {:>10.2} {:>6.2}\n",
            100.0 * r.macro_f1,
            100.0 * r.macro_recall
        ));
    }
    out
}

/// Aligned per-tone table from parsed `tone,precision,recall,f1` rows,
/// one labeled run per line, with macro means appended.
pub fn render_tone_rows(rows: &[(String, Vec<(u8, f64, f64, f64)>)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<24}", "run"));
    for t in 1..=N_TONES {
        out.push_str(&format!("  Tone{t} P      R      F1 "));
    }
    out.push_str("  Macro P      R      F1 \n");
    for (label, tones) in rows {
        out.push_str(&format!("{label:<24}"));
        let mut mp = 0.0;
        let mut mr = 0.0;
        let mut mf = 0.0;
        for &(_, p, r, f1) in tones {
            out.push_str(&format!("  {:>7.2} {:>6.2} {:>6.2}", 100.0 * p, 100.0 * r, 100.0 * f1));
            mp += p;
            mr += r;
            mf += f1;
        }
        let k = tones.len().max(1) as f64;
        out.push_str(&format!(
            "  {:>7.2} {:>6.2} {:>6.2}\n",
            100.0 * mp / k,
            100.0 * mr / k,
            100.0 * mf / k
        ));
    }
    out
}

/// Aligned per-subject accuracy table with an Avg column.
pub fn render_loso_table(rows: &[(String, Vec<(u16, f64)>)]) -> String {
    let mut out = String::new();
    if rows.is_empty() {
        return out;
    }
    out.push_str(&format!("{:<24}", "run"));
    for (s, _) in &rows[0].1 {
        out.push_str(&format!(" {:>7}", format!("S{s}")));
    }
    out.push_str(&format!(" {:>7}\n", "Avg"));
    for (label, accs) in rows {
        out.push_str(&format!("{label:<24}"));
        for (_, a) in accs {
            out.push_str(&format!(" {:>7.2}", 100.0 * a));
        }
        let avg = accs.iter().map(|(_, a)| a).sum::<f64>() / accs.len().max(1) as f64;
        out.push_str(&format!(" {:>7.2}\n", 100.0 * avg));
    }
    out
}

/// Outcome of one cross-validation fold.
pub struct FoldOutcome<F> {
    pub fold: usize,
    pub report: EvalReport,
    pub fit: FitResult<F>,
}

/// Train and evaluate every fold: the held-out fold serves as both the
/// early-stopping monitor and the evaluation set.
pub fn run_kfold<F: Scalar>(
    ds: &Dataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<Vec<FoldOutcome<F>>> {
    let tones: Vec<u8> = ds.trials.iter().map(|t| t.tone).collect();
    let subjects: Vec<u16> = ds.trials.iter().map(|t| t.subject).collect();
    let folds = kfold_split(&tones, &subjects, tcfg.folds, tcfg.seed)?;
    let all: Vec<usize> = (0..ds.trials.len()).collect();
    let mut outcomes = Vec::with_capacity(folds.len());
    for (fi, fold) in folds.iter().enumerate() {
        let test_set: std::collections::HashSet<usize> = fold.iter().copied().collect();
        let train_idx: Vec<usize> = all.iter().copied().filter(|i| !test_set.contains(i)).collect();
        let train = gather(ds, &train_idx);
        let test = gather(ds, fold);
        let fit_res: FitResult<F> = fit(&train, &test, mcfg, tcfg)?;
        let preds = model::predict_batch(&fit_res.params, mcfg, &test)?;
        let truth: Vec<u8> = test.iter().map(|t| t.tone).collect();
        let cm = ConfusionMatrix::from_pairs(&truth, &preds)?;
        let report = metrics(&cm, format!("fold {fi} of {}", folds.len()), tcfg.seed)?;
        outcomes.push(FoldOutcome {
            fold: fi,
            report,
            fit: fit_res,
        });
    }
    Ok(outcomes)
}

/// Outcome of one leave-one-subject-out split.
pub struct LosoOutcome<F> {
    pub subject: u16,
    pub report: EvalReport,
    pub fit: FitResult<F>,
}

/// Leave-one-subject-out: hold each subject out as the test set, carve a
/// stratified validation slice from the remaining subjects for early
/// stopping, and evaluate on the held-out subject.
pub fn run_loso<F: Scalar>(
    ds: &Dataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    val_fraction: f64,
) -> Result<Vec<LosoOutcome<F>>> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(Error::invalid("validation fraction must lie in (0, 1)"));
    }
    let subjects: Vec<u16> = ds.trials.iter().map(|t| t.subject).collect();
    let splits = loso_split(&subjects)?;
    let mut outcomes = Vec::with_capacity(splits.len());
    for (held, train_idx, test_idx) in splits {
        // stratified validation slice: shuffle within each tone
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ (held as u64) << 17);
        let mut val_idx = Vec::new();
        let mut fit_idx = Vec::new();
        for tone in 1..=N_TONES as u8 {
            let mut group: Vec<usize> = train_idx
                .iter()
                .copied()
                .filter(|&i| ds.trials[i].tone == tone)
                .collect();
            group.shuffle(&mut rng);
            let n_val = ((group.len() as f64) * val_fraction).ceil() as usize;
            let n_val = n_val.clamp(1, group.len().saturating_sub(1).max(1));
            val_idx.extend(group.drain(..n_val));
            fit_idx.extend(group);
        }
        let train = gather(ds, &fit_idx);
        let val = gather(ds, &val_idx);
        let test = gather(ds, &test_idx);
        let fit_res: FitResult<F> = fit(&train, &val, mcfg, tcfg)?;
        let preds = model::predict_batch(&fit_res.params, mcfg, &test)?;
        let truth: Vec<u8> = test.iter().map(|t| t.tone).collect();
        let cm = ConfusionMatrix::from_pairs(&truth, &preds)?;
        let report = metrics(&cm, format!("loso subject {held}"), tcfg.seed)?;
        outcomes.push(LosoOutcome {
            subject: held,
            report,
            fit: fit_res,
        });
    }
    Ok(outcomes)
}
