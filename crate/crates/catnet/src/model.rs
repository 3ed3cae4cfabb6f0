//! Full network assembly: dimensions, ablation flags, parameter container,
//! per-trial graph construction, persistence, and the gradient
//! verification suite.

use crate::autodiff::gradcheck::grad_check;
use crate::autodiff::{Activation, Graph, PoolKind, ValueId};
use crate::dataio::TrialTensor;
use crate::encoder::{self, BiLstmIds, EncoderIds, EncoderParams, LstmIds};
use crate::error::{Error, Result};
use crate::fusion::{self, CrossAttnIds, CrossAttnParams, FusionIds, FusionParams};
use crate::heads::{self, HeadIds, HeadParams, LossConfig, LossIds};
use crate::mat::{Mat, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

/// Layer widths. Defaults are the production configuration; tests shrink
/// everything for speed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub c_e: usize,
    pub c_m: usize,
    pub t_prime: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub attn_bottleneck: usize,
    /// Per-direction recurrent width; the concatenated output is twice this.
    pub lstm_hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub fuse_out: usize,
    pub dom_hidden: usize,
    pub n_subjects: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            c_e: 20,
            c_m: 5,
            t_prime: 499,
            conv1: 64,
            conv2: 128,
            attn_bottleneck: 16,
            lstm_hidden: 64,
            heads: 4,
            head_dim: 32,
            fuse_out: 128,
            dom_hidden: 64,
            n_subjects: 10,
        }
    }
}

impl ModelDims {
    /// Width of the encoded sequence features (concatenated directions).
    pub fn model_width(&self) -> usize {
        2 * self.lstm_hidden
    }

    /// Micro configuration used by the verification suite.
    pub fn micro() -> Self {
        ModelDims {
            c_e: 2,
            c_m: 1,
            t_prime: 8,
            conv1: 4,
            conv2: 8,
            attn_bottleneck: 2,
            lstm_hidden: 4,
            heads: 2,
            head_dim: 4,
            fuse_out: 8,
            dom_hidden: 4,
            n_subjects: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_e", self.c_e),
            ("c_m", self.c_m),
            ("t_prime", self.t_prime),
            ("conv1", self.conv1),
            ("conv2", self.conv2),
            ("attn_bottleneck", self.attn_bottleneck),
            ("lstm_hidden", self.lstm_hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("fuse_out", self.fuse_out),
            ("dom_hidden", self.dom_hidden),
            ("n_subjects", self.n_subjects),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("dimension {name} must be positive")));
            }
        }
        if self.t_prime < 2 {
            return Err(Error::invalid("t_prime must be at least 2"));
        }
        let mw = self.model_width();
        if self.conv2 != mw {
            return Err(Error::invalid(format!(
                "conv2 ({}) must equal the encoded width 2*lstm_hidden ({mw})",
                self.conv2
            )));
        }
        if self.heads * self.head_dim != mw {
            return Err(Error::invalid(format!(
                "heads*head_dim ({}) must equal the encoded width ({mw})",
                self.heads * self.head_dim
            )));
        }
        Ok(())
    }
}

/// Which components to remove. All false is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_cross_attention: bool,
    pub no_bilstm: bool,
    pub no_fusion_eeg: bool,
    pub no_fusion_emg: bool,
    pub no_domain_discriminator: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.no_fusion_eeg && self.no_fusion_emg {
            return Err(Error::invalid(
                "no_fusion_eeg and no_fusion_emg together leave nothing to fuse",
            ));
        }
        Ok(())
    }
}

/// Architecture plus loss hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dims: ModelDims,
    #[serde(default)]
    pub ablation: AblationFlags,
    pub dropout: f64,
    pub loss: LossConfig,
    /// EMA rate for the per-class centers.
    pub center_ema: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: ModelDims::default(),
            ablation: AblationFlags::default(),
            dropout: 0.4,
            loss: LossConfig::default(),
            center_ema: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn micro() -> Self {
        ModelConfig {
            dims: ModelDims::micro(),
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.ablation.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout rate {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.loss.lambda_dom < 0.0 {
            return Err(Error::invalid("lambda_dom must be nonnegative"));
        }
        if self.loss.alpha.iter().any(|&a| a <= 0.0) {
            return Err(Error::invalid("focal alpha entries must be positive"));
        }
        if !(0.0..=1.0).contains(&self.center_ema) {
            return Err(Error::invalid("center EMA rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Every learnable tensor of the network, plus the (non-learnable,
/// EMA-updated) per-class centers.
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    pub eeg_enc: EncoderParams<F>,
    pub emg_enc: EncoderParams<F>,
    pub fusion: FusionParams<F>,
    pub heads: HeadParams<F>,
    pub centers: Mat<F>,
}

fn visit_encoder<'a, F: Scalar>(
    prefix: &str,
    e: &'a EncoderParams<F>,
    f: &mut impl FnMut(String, &'a Mat<F>),
) {
    f(format!("{prefix}.conv1.w"), &e.conv1_w);
    f(format!("{prefix}.conv1.b"), &e.conv1_b);
    f(format!("{prefix}.conv2.w"), &e.conv2_w);
    f(format!("{prefix}.conv2.b"), &e.conv2_b);
    f(format!("{prefix}.attn.w1"), &e.attn_w1);
    f(format!("{prefix}.attn.w2"), &e.attn_w2);
    if let Some(l) = &e.lstm {
        for (d, p) in [("fwd", &l.fwd), ("bwd", &l.bwd)] {
            f(format!("{prefix}.lstm_{d}.w_ih"), &p.w_ih);
            f(format!("{prefix}.lstm_{d}.w_hh"), &p.w_hh);
            f(format!("{prefix}.lstm_{d}.b"), &p.b);
        }
    }
}

fn visit_encoder_mut<F: Scalar>(
    prefix: &str,
    e: &mut EncoderParams<F>,
    f: &mut impl FnMut(String, &mut Mat<F>),
) {
    f(format!("{prefix}.conv1.w"), &mut e.conv1_w);
    f(format!("{prefix}.conv1.b"), &mut e.conv1_b);
    f(format!("{prefix}.conv2.w"), &mut e.conv2_w);
    f(format!("{prefix}.conv2.b"), &mut e.conv2_b);
    f(format!("{prefix}.attn.w1"), &mut e.attn_w1);
    f(format!("{prefix}.attn.w2"), &mut e.attn_w2);
    if let Some(l) = &mut e.lstm {
        for (d, p) in [("fwd", &mut l.fwd), ("bwd", &mut l.bwd)] {
            f(format!("{prefix}.lstm_{d}.w_ih"), &mut p.w_ih);
            f(format!("{prefix}.lstm_{d}.w_hh"), &mut p.w_hh);
            f(format!("{prefix}.lstm_{d}.b"), &mut p.b);
        }
    }
}

fn visit_attn<'a, F: Scalar>(
    prefix: &str,
    a: &'a CrossAttnParams<F>,
    f: &mut impl FnMut(String, &'a Mat<F>),
) {
    f(format!("{prefix}.w_q"), &a.w_q);
    f(format!("{prefix}.w_k"), &a.w_k);
    f(format!("{prefix}.w_v"), &a.w_v);
    f(format!("{prefix}.w_o"), &a.w_o);
    f(format!("{prefix}.ln_gain"), &a.ln_gain);
    f(format!("{prefix}.ln_bias"), &a.ln_bias);
}

fn visit_attn_mut<F: Scalar>(
    prefix: &str,
    a: &mut CrossAttnParams<F>,
    f: &mut impl FnMut(String, &mut Mat<F>),
) {
    f(format!("{prefix}.w_q"), &mut a.w_q);
    f(format!("{prefix}.w_k"), &mut a.w_k);
    f(format!("{prefix}.w_v"), &mut a.w_v);
    f(format!("{prefix}.w_o"), &mut a.w_o);
    f(format!("{prefix}.ln_gain"), &mut a.ln_gain);
    f(format!("{prefix}.ln_bias"), &mut a.ln_bias);
}

impl<F: Scalar> ModelParams<F> {
    /// Deterministic initialization from a seed. The centers start at zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = &cfg.dims;
        let use_bilstm = !cfg.ablation.no_bilstm;
        let mw = d.model_width();
        let eeg_enc = EncoderParams::init(
            2 * d.c_e,
            d.conv1,
            d.conv2,
            d.attn_bottleneck,
            d.lstm_hidden,
            use_bilstm,
            &mut rng,
        );
        let emg_enc = EncoderParams::init(
            2 * d.c_m,
            d.conv1,
            d.conv2,
            d.attn_bottleneck,
            d.lstm_hidden,
            use_bilstm,
            &mut rng,
        );
        let mk_attn = |on: bool, rng: &mut ChaCha8Rng| on.then(|| CrossAttnParams::init(mw, rng));
        let fusion = FusionParams {
            eeg_attn: mk_attn(
                !cfg.ablation.no_cross_attention && !cfg.ablation.no_fusion_eeg,
                &mut rng,
            ),
            emg_attn: mk_attn(
                !cfg.ablation.no_cross_attention && !cfg.ablation.no_fusion_emg,
                &mut rng,
            ),
            fuse_w: crate::mat::xavier(2 * mw, d.fuse_out, &mut rng),
            fuse_b: Mat::zeros(1, d.fuse_out),
        };
        let heads = HeadParams::init(
            d.fuse_out,
            d.dom_hidden,
            d.n_subjects,
            !cfg.ablation.no_domain_discriminator,
            &mut rng,
        );
        Ok(ModelParams {
            eeg_enc,
            emg_enc,
            fusion,
            heads,
            centers: Mat::zeros(heads::N_TONES, d.fuse_out),
        })
    }

    /// Visit every learnable tensor in a fixed canonical order. The order
    /// defines the optimizer state layout and the gradient vector layout.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(String, &'a Mat<F>)) {
        visit_encoder("eeg_encoder", &self.eeg_enc, &mut f);
        visit_encoder("emg_encoder", &self.emg_enc, &mut f);
        if let Some(a) = &self.fusion.eeg_attn {
            visit_attn("fusion.eeg_attn", a, &mut f);
        }
        if let Some(a) = &self.fusion.emg_attn {
            visit_attn("fusion.emg_attn", a, &mut f);
        }
        f("fusion.fuse.w".into(), &self.fusion.fuse_w);
        f("fusion.fuse.b".into(), &self.fusion.fuse_b);
        f("heads.tone.w".into(), &self.heads.tone_w);
        f("heads.tone.b".into(), &self.heads.tone_b);
        if let Some(d) = &self.heads.domain {
            f("heads.domain.w1".into(), &d.w1);
            f("heads.domain.b1".into(), &d.b1);
            f("heads.domain.w2".into(), &d.w2);
            f("heads.domain.b2".into(), &d.b2);
        }
    }

    /// Mutable visitation in the same canonical order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(String, &mut Mat<F>)) {
        visit_encoder_mut("eeg_encoder", &mut self.eeg_enc, &mut f);
        visit_encoder_mut("emg_encoder", &mut self.emg_enc, &mut f);
        if let Some(a) = &mut self.fusion.eeg_attn {
            visit_attn_mut("fusion.eeg_attn", a, &mut f);
        }
        if let Some(a) = &mut self.fusion.emg_attn {
            visit_attn_mut("fusion.emg_attn", a, &mut f);
        }
        f("fusion.fuse.w".into(), &mut self.fusion.fuse_w);
        f("fusion.fuse.b".into(), &mut self.fusion.fuse_b);
        f("heads.tone.w".into(), &mut self.heads.tone_w);
        f("heads.tone.b".into(), &mut self.heads.tone_b);
        if let Some(d) = &mut self.heads.domain {
            f("heads.domain.w1".into(), &mut d.w1);
            f("heads.domain.b1".into(), &mut d.b1);
            f("heads.domain.w2".into(), &mut d.w2);
            f("heads.domain.b2".into(), &mut d.b2);
        }
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, _| n += 1);
        n
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, m| n += m.data.len());
        n
    }

    pub fn convert<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            eeg_enc: convert_encoder(&self.eeg_enc),
            emg_enc: convert_encoder(&self.emg_enc),
            fusion: FusionParams {
                eeg_attn: self.fusion.eeg_attn.as_ref().map(convert_attn),
                emg_attn: self.fusion.emg_attn.as_ref().map(convert_attn),
                fuse_w: self.fusion.fuse_w.convert(),
                fuse_b: self.fusion.fuse_b.convert(),
            },
            heads: HeadParams {
                tone_w: self.heads.tone_w.convert(),
                tone_b: self.heads.tone_b.convert(),
                domain: self.heads.domain.as_ref().map(|d| heads::DomainHead {
                    w1: d.w1.convert(),
                    b1: d.b1.convert(),
                    w2: d.w2.convert(),
                    b2: d.b2.convert(),
                }),
            },
            centers: self.centers.convert(),
        }
    }
}

fn convert_encoder<F: Scalar, G: Scalar>(e: &EncoderParams<F>) -> EncoderParams<G> {
    EncoderParams {
        conv1_w: e.conv1_w.convert(),
        conv1_b: e.conv1_b.convert(),
        conv2_w: e.conv2_w.convert(),
        conv2_b: e.conv2_b.convert(),
        attn_w1: e.attn_w1.convert(),
        attn_w2: e.attn_w2.convert(),
        lstm: e.lstm.as_ref().map(|l| encoder::BiLstmParams {
            fwd: encoder::LstmParams {
                w_ih: l.fwd.w_ih.convert(),
                w_hh: l.fwd.w_hh.convert(),
                b: l.fwd.b.convert(),
            },
            bwd: encoder::LstmParams {
                w_ih: l.bwd.w_ih.convert(),
                w_hh: l.bwd.w_hh.convert(),
                b: l.bwd.b.convert(),
            },
        }),
    }
}

fn convert_attn<F: Scalar, G: Scalar>(a: &CrossAttnParams<F>) -> CrossAttnParams<G> {
    CrossAttnParams {
        w_q: a.w_q.convert(),
        w_k: a.w_k.convert(),
        w_v: a.w_v.convert(),
        w_o: a.w_o.convert(),
        ln_gain: a.ln_gain.convert(),
        ln_bias: a.ln_bias.convert(),
    }
}

/// Graph handles for one forward pass, plus the flat leaf list in
/// canonical tensor order (for gradient extraction).
pub struct ModelIds {
    pub flat: Vec<ValueId>,
    pub eeg: EncoderIds,
    pub emg: EncoderIds,
    pub fusion: FusionIds,
    pub heads: HeadIds,
}

/// Push every learnable tensor as a trainable leaf and assemble the
/// structured handles.
pub fn leaf_model<F: Scalar>(g: &mut Graph<F>, p: &ModelParams<F>) -> ModelIds {
    let mut flat = Vec::new();
    let mut by_path: HashMap<String, ValueId> = HashMap::new();
    p.for_each_tensor(|path, m| {
        let id = g.leaf(m, true);
        flat.push(id);
        by_path.insert(path, id);
    });
    let get = |path: &str| -> ValueId {
        *by_path
            .get(path)
            .unwrap_or_else(|| panic!("missing tensor path {path}"))
    };
    let enc = |prefix: &str, has_lstm: bool| EncoderIds {
        conv1_w: get(&format!("{prefix}.conv1.w")),
        conv1_b: get(&format!("{prefix}.conv1.b")),
        conv2_w: get(&format!("{prefix}.conv2.w")),
        conv2_b: get(&format!("{prefix}.conv2.b")),
        attn_w1: get(&format!("{prefix}.attn.w1")),
        attn_w2: get(&format!("{prefix}.attn.w2")),
        lstm: has_lstm.then(|| BiLstmIds {
            fwd: LstmIds {
                w_ih: get(&format!("{prefix}.lstm_fwd.w_ih")),
                w_hh: get(&format!("{prefix}.lstm_fwd.w_hh")),
                b: get(&format!("{prefix}.lstm_fwd.b")),
            },
            bwd: LstmIds {
                w_ih: get(&format!("{prefix}.lstm_bwd.w_ih")),
                w_hh: get(&format!("{prefix}.lstm_bwd.w_hh")),
                b: get(&format!("{prefix}.lstm_bwd.b")),
            },
        }),
    };
    let attn = |prefix: &str| CrossAttnIds {
        w_q: get(&format!("{prefix}.w_q")),
        w_k: get(&format!("{prefix}.w_k")),
        w_v: get(&format!("{prefix}.w_v")),
        w_o: get(&format!("{prefix}.w_o")),
        ln_gain: get(&format!("{prefix}.ln_gain")),
        ln_bias: get(&format!("{prefix}.ln_bias")),
    };
    let eeg = enc("eeg_encoder", p.eeg_enc.lstm.is_some());
    let emg = enc("emg_encoder", p.emg_enc.lstm.is_some());
    let fusion = FusionIds {
        eeg_attn: p.fusion.eeg_attn.as_ref().map(|_| attn("fusion.eeg_attn")),
        emg_attn: p.fusion.emg_attn.as_ref().map(|_| attn("fusion.emg_attn")),
        fuse_w: get("fusion.fuse.w"),
        fuse_b: get("fusion.fuse.b"),
    };
    let heads = HeadIds {
        tone_w: get("heads.tone.w"),
        tone_b: get("heads.tone.b"),
        domain: p.heads.domain.as_ref().map(|_| heads::DomainIds {
            w1: get("heads.domain.w1"),
            b1: get("heads.domain.b1"),
            w2: get("heads.domain.w2"),
            b2: get("heads.domain.b2"),
        }),
    };
    ModelIds {
        flat,
        eeg,
        emg,
        fusion,
        heads,
    }
}

/// Leaf a trial's blocks as `[T' x 2C]` inputs (channels last).
pub fn trial_input<F: Scalar>(g: &mut Graph<F>, trial: &TrialTensor) -> (ValueId, ValueId) {
    let to_input = |m: &Mat<f32>| {
        let (c2, tp) = m.shape();
        let mut data = vec![F::zero(); tp * c2];
        for r in 0..c2 {
            for j in 0..tp {
                data[j * c2 + r] = F::c(m.data[r * tp + j] as f64);
            }
        }
        Mat {
            rows: tp,
            cols: c2,
            data,
        }
    };
    let eeg = to_input(&trial.eeg);
    let emg = to_input(&trial.emg);
    (g.leaf(&eeg, false), g.leaf(&emg, false))
}

/// Output handles of one forward pass.
pub struct ForwardOut {
    pub tone_logits: ValueId,
    pub domain_logits: Option<ValueId>,
    pub fused: ValueId,
    pub eeg_gates: ValueId,
    pub emg_gates: ValueId,
}

fn dropout_mask<F: Scalar>(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<F> {
    let keep = 1.0 / (1.0 - rate);
    (0..rows * cols)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                F::zero()
            } else {
                F::c(keep)
            }
        })
        .collect()
}

/// Assemble the network for one trial. `dropout_rng` enables train-mode
/// dropout on the conv-stack outputs; eval passes `None`.
pub fn forward<F: Scalar>(
    g: &mut Graph<F>,
    ids: &ModelIds,
    cfg: &ModelConfig,
    eeg: ValueId,
    emg: ValueId,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOut> {
    let d = &cfg.dims;
    let mask_for = |g: &Graph<F>, x: ValueId, rng: &mut Option<&mut ChaCha8Rng>| {
        rng.as_mut().map(|r| {
            let (t, _) = g.shape(x);
            let pooled = (t - 2) / 2 + 1;
            dropout_mask::<F>(pooled, d.conv2, cfg.dropout, r)
        })
    };
    let eeg_mask = mask_for(g, eeg, &mut dropout_rng);
    let (z_e, eeg_gates) = encoder::encode(g, &ids.eeg, eeg, eeg_mask)?;
    let emg_mask = mask_for(g, emg, &mut dropout_rng);
    let (z_m, emg_gates) = encoder::encode(g, &ids.emg, emg, emg_mask)?;

    let c_e = if cfg.ablation.no_fusion_eeg {
        None
    } else if cfg.ablation.no_cross_attention {
        Some(z_e)
    } else {
        let a = ids
            .fusion
            .eeg_attn
            .as_ref()
            .ok_or_else(|| Error::invalid("missing EEG attention parameters"))?;
        Some(fusion::cross_attention(g, a, z_e, z_m, d.heads, d.head_dim)?)
    };
    let c_m = if cfg.ablation.no_fusion_emg {
        None
    } else if cfg.ablation.no_cross_attention {
        Some(z_m)
    } else {
        let a = ids
            .fusion
            .emg_attn
            .as_ref()
            .ok_or_else(|| Error::invalid("missing EMG attention parameters"))?;
        Some(fusion::cross_attention(g, a, z_m, z_e, d.heads, d.head_dim)?)
    };

    let fused = fusion::fuse(g, &ids.fusion, c_e, c_m)?;
    let tone_logits = heads::tone_logits(g, &ids.heads, fused)?;
    let domain_logits = match &ids.heads.domain {
        Some(dh) => Some(heads::domain_logits(g, dh, fused)?),
        None => None,
    };
    Ok(ForwardOut {
        tone_logits,
        domain_logits,
        fused,
        eeg_gates,
        emg_gates,
    })
}

/// Forward plus loss assembly for one labeled trial.
pub fn trial_loss<F: Scalar>(
    g: &mut Graph<F>,
    ids: &ModelIds,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trial: &TrialTensor,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(ForwardOut, LossIds)> {
    let (eeg, emg) = trial_input(g, trial);
    let out = forward(g, ids, cfg, eeg, emg, dropout_rng)?;
    let losses = heads::total_loss(
        g,
        out.tone_logits,
        out.domain_logits,
        out.fused,
        &[trial.tone],
        &[trial.subject],
        cfg.dims.n_subjects,
        &params.centers,
        &cfg.loss,
    )?;
    Ok((out, losses))
}

/// Predicted tone (argmax of the logits) for every trial, eval mode.
/// Batch items are independent, so the work is chunk-parallel.
pub fn predict_batch<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trials: &[&TrialTensor],
) -> Result<Vec<u8>> {
    let chunks = crate::par::chunk_map_reduce(
        trials,
        crate::par::CHUNK,
        |chunk| -> Result<Vec<u8>> {
            let mut preds = Vec::with_capacity(chunk.len());
            for trial in chunk {
                let mut g = Graph::<F>::new();
                let ids = leaf_model(&mut g, params);
                let (eeg, emg) = trial_input(&mut g, trial);
                let out = forward(&mut g, &ids, cfg, eeg, emg, None)?;
                let logits = g.data(out.tone_logits);
                let mut best = 0usize;
                for j in 1..logits.len() {
                    if logits[j] > logits[best] {
                        best = j;
                    }
                }
                preds.push(best as u8 + 1);
            }
            Ok(preds)
        },
        |a, b| {
            let mut a = a?;
            a.extend(b?);
            Ok(a)
        },
    );
    chunks.unwrap_or_else(|| Ok(Vec::new()))
}

/// Mean total loss and accuracy over a set of trials, eval mode.
pub fn eval_loss_and_accuracy<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trials: &[&TrialTensor],
) -> Result<(f64, f64)> {
    if trials.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty trial set"));
    }
    let merged = crate::par::chunk_map_reduce(
        trials,
        crate::par::CHUNK,
        |chunk| -> Result<(f64, usize)> {
            let mut loss = 0.0;
            let mut correct = 0usize;
            for trial in chunk {
                let mut g = Graph::<F>::new();
                let ids = leaf_model(&mut g, params);
                let (out, losses) = trial_loss(&mut g, &ids, params, cfg, trial, None)?;
                loss += g.scalar(losses.total).to_f64_lossy();
                let logits = g.data(out.tone_logits);
                let mut best = 0usize;
                for j in 1..logits.len() {
                    if logits[j] > logits[best] {
                        best = j;
                    }
                }
                if best as u8 + 1 == trial.tone {
                    correct += 1;
                }
            }
            Ok((loss, correct))
        },
        |a, b| {
            let (la, ca) = a?;
            let (lb, cb) = b?;
            Ok((la + lb, ca + cb))
        },
    )
    .expect("non-empty");
    let (loss, correct) = merged?;
    Ok((loss / trials.len() as f64, correct as f64 / trials.len() as f64))
}

/// Collect the fused feature vector (eval mode) for every trial, e.g. for
/// probing subject information.
pub fn fused_features<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trials: &[&TrialTensor],
) -> Result<Vec<Vec<f64>>> {
    let merged = crate::par::chunk_map_reduce(
        trials,
        crate::par::CHUNK,
        |chunk| -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::with_capacity(chunk.len());
            for trial in chunk {
                let mut g = Graph::<F>::new();
                let ids = leaf_model(&mut g, params);
                let (eeg, emg) = trial_input(&mut g, trial);
                let fwd = forward(&mut g, &ids, cfg, eeg, emg, None)?;
                out.push(g.data(fwd.fused).iter().map(|v| v.to_f64_lossy()).collect());
            }
            Ok(out)
        },
        |a, b| {
            let mut a = a?;
            a.extend(b?);
            Ok(a)
        },
    );
    merged.unwrap_or_else(|| Ok(Vec::new()))
}

/// Mean channel-attention gate vectors over a set of trials (EEG, EMG).
pub fn mean_gates<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trials: &[&TrialTensor],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if trials.is_empty() {
        return Err(Error::invalid("cannot aggregate gates over an empty set"));
    }
    let width = cfg.dims.conv2;
    let merged = crate::par::chunk_map_reduce(
        trials,
        crate::par::CHUNK,
        |chunk| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut eeg_sum = vec![0.0f64; width];
            let mut emg_sum = vec![0.0f64; width];
            for trial in chunk {
                let mut g = Graph::<F>::new();
                let ids = leaf_model(&mut g, params);
                let (eeg, emg) = trial_input(&mut g, trial);
                let fwd = forward(&mut g, &ids, cfg, eeg, emg, None)?;
                for (s, &v) in eeg_sum.iter_mut().zip(g.data(fwd.eeg_gates)) {
                    *s += v.to_f64_lossy();
                }
                for (s, &v) in emg_sum.iter_mut().zip(g.data(fwd.emg_gates)) {
                    *s += v.to_f64_lossy();
                }
            }
            Ok((eeg_sum, emg_sum))
        },
        |a, b| {
            let (mut ea, mut ma) = a?;
            let (eb, mb) = b?;
            for (x, y) in ea.iter_mut().zip(eb) {
                *x += y;
            }
            for (x, y) in ma.iter_mut().zip(mb) {
                *x += y;
            }
            Ok((ea, ma))
        },
    )
    .expect("non-empty");
    let (mut eeg_sum, mut emg_sum) = merged?;
    let n = trials.len() as f64;
    eeg_sum.iter_mut().for_each(|v| *v /= n);
    emg_sum.iter_mut().for_each(|v| *v /= n);
    Ok((eeg_sum, emg_sum))
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    path: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

const PARAMS_MAGIC: &[u8; 8] = b"CATPRM\x01\x00";

/// Persist parameters (including the centers) and the configuration to a
/// directory: `model.json` + `params.bin` (little-endian `f64`).
pub fn save_model<F: Scalar>(p: &ModelParams<F>, cfg: &ModelConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries: Vec<(String, &Mat<F>)> = Vec::new();
    p.for_each_tensor(|path, m| entries.push((path, m)));
    entries.push(("centers".into(), &p.centers));
    let mut bin = Vec::new();
    bin.extend_from_slice(PARAMS_MAGIC);
    let mut metas = Vec::with_capacity(entries.len());
    for (path, m) in entries {
        metas.push(TensorMeta {
            path,
            rows: m.rows,
            cols: m.cols,
            offset: bin.len() as u64,
        });
        for &v in &m.data {
            bin.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    let file = ModelFile {
        version: 1,
        config: *cfg,
        tensors: metas,
    };
    fs::write(dir.join("params.bin"), &bin).map_err(|e| Error::io(dir.display().to_string(), e))?;
    fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&file)?)
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(())
}

/// Load a model directory saved by [`save_model`].
pub fn load_model<F: Scalar>(dir: &Path) -> Result<(ModelParams<F>, ModelConfig)> {
    let file: ModelFile = serde_json::from_slice(
        &fs::read(dir.join("model.json")).map_err(|e| Error::io(dir.display().to_string(), e))?,
    )?;
    if file.version != 1 {
        return Err(Error::format(format!(
            "model file version {} unsupported",
            file.version
        )));
    }
    let bin =
        fs::read(dir.join("params.bin")).map_err(|e| Error::io(dir.display().to_string(), e))?;
    if bin.len() < 8 || &bin[..8] != PARAMS_MAGIC {
        return Err(Error::format("params.bin magic mismatch"));
    }
    let mut by_path: HashMap<String, Mat<F>> = HashMap::new();
    for meta in &file.tensors {
        let count = meta.rows * meta.cols;
        let start = meta.offset as usize;
        let end = start + 8 * count;
        if end > bin.len() {
            return Err(Error::format(format!(
                "tensor {} extends past the end of params.bin",
                meta.path
            )));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let p = start + 8 * i;
            let mut b = [0u8; 8];
            b.copy_from_slice(&bin[p..p + 8]);
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::format(format!(
                    "tensor {}: non-finite value at byte {p}",
                    meta.path
                )));
            }
            data.push(F::c(v));
        }
        by_path.insert(meta.path.clone(), Mat::from_vec(meta.rows, meta.cols, data)?);
    }
    // materialize a skeleton with the right structure, then fill it
    let mut params: ModelParams<F> = ModelParams::init(&file.config, 0)?;
    let mut missing = Vec::new();
    params.for_each_tensor_mut(|path, m| match by_path.remove(&path) {
        Some(t) if t.shape() == m.shape() => *m = t,
        Some(t) => missing.push(format!("{path}: shape {:?} vs {:?}", t.shape(), m.shape())),
        None => missing.push(format!("{path}: absent")),
    });
    match by_path.remove("centers") {
        Some(c) if c.shape() == params.centers.shape() => params.centers = c,
        _ => missing.push("centers: absent or misshapen".into()),
    }
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "model file does not match its configuration: {}",
            missing.join("; ")
        )));
    }
    Ok((params, file.config))
}

/// One entry of the verification suite.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn fd_err_entry(
    name: &'static str,
    tolerance: f64,
    tensors: &[Mat<f64>],
    build: impl Fn(&mut Graph<f64>, &[ValueId]) -> Result<ValueId>,
) -> Result<CheckResult> {
    let max_rel_err = grad_check(build, tensors, 1e-5, 50, 0xC0FFEE)?;
    Ok(CheckResult {
        name,
        max_rel_err,
        tolerance,
    })
}

fn smooth_mat(rows: usize, cols: usize, phase: f64) -> Mat<f64> {
    Mat::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * phase).sin())
}

/// Analytic gradient of the full micro model (gradient reversal included)
/// against finite differences with sign bookkeeping: the classification
/// part is differenced directly, the domain part is differenced without
/// reversal and entered with the reversed sign for trunk parameters.
fn micro_model_composite_check() -> Result<CheckResult> {
    let cfg = ModelConfig::micro();
    let params: ModelParams<f64> = ModelParams::init(&cfg, 99)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let trial = TrialTensor {
        eeg: Mat::from_fn(2 * cfg.dims.c_e, cfg.dims.t_prime, |_, _| {
            rng.gen_range(-1.0f32..1.0)
        }),
        emg: Mat::from_fn(2 * cfg.dims.c_m, cfg.dims.t_prime, |_, _| {
            rng.gen_range(-1.0f32..1.0)
        }),
        tone: 2,
        subject: 1,
    };
    // give the centers some structure so the center loss has a gradient
    let mut params = params;
    params.centers = Mat::from_fn(4, cfg.dims.fuse_out, |r, c| ((r * 7 + c) as f64 * 0.19).sin());

    // analytic pass with the reversal in place
    let mut g = Graph::<f64>::new();
    let ids = leaf_model(&mut g, &params);
    let (_, losses) = trial_loss(&mut g, &ids, &params, &cfg, &trial, None)?;
    g.backward(losses.total)?;
    let analytic: Vec<Vec<f64>> = ids.flat.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
    drop(g);

    // objective values under perturbation, split into the classification
    // part (focal + center) and the domain part (cross-entropy, no GRL)
    let eval_parts = |p: &ModelParams<f64>| -> Result<(f64, f64)> {
        let mut g = Graph::<f64>::new();
        let ids = leaf_model(&mut g, p);
        let (out, _) = trial_loss(&mut g, &ids, p, &cfg, &trial, None)?;
        let tone_idx = [(trial.tone - 1) as usize];
        let alpha: Vec<f64> = cfg.loss.alpha.to_vec();
        let focal = g.focal_loss(out.tone_logits, &tone_idx, cfg.loss.gamma, &alpha)?;
        let cent = g.center_loss(out.fused, &tone_idx, &p.centers, &cfg.loss.center_weights)?;
        let main = g.add(focal, cent)?;
        let dom = g.cross_entropy_loss(out.domain_logits.unwrap(), &[(trial.subject - 1) as usize])?;
        Ok((g.scalar(main), g.scalar(dom)))
    };

    let mut paths = Vec::new();
    params.for_each_tensor(|p, _| paths.push(p));
    let eps = 1e-5;
    let lambda = cfg.loss.lambda_dom;
    let mut coord_rng = ChaCha8Rng::seed_from_u64(0xFD);
    let mut max_err = 0.0f64;
    let mut work = params.clone();
    for (ti, path) in paths.iter().enumerate() {
        let len = analytic[ti].len();
        let coords: Vec<usize> = if len <= 12 {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut coord_rng, len, 12).into_vec()
        };
        let domain_param = path.starts_with("heads.domain");
        let sign = if domain_param { 1.0 } else { -1.0 };
        for ci in coords {
            let tweak = |delta: f64, w: &mut ModelParams<f64>| {
                let mut k = 0;
                w.for_each_tensor_mut(|_, m| {
                    if k == ti {
                        m.data[ci] += delta;
                    }
                    k += 1;
                });
            };
            tweak(eps, &mut work);
            let (main_p, dom_p) = eval_parts(&work)?;
            tweak(-2.0 * eps, &mut work);
            let (main_m, dom_m) = eval_parts(&work)?;
            tweak(eps, &mut work);
            let fd_main = (main_p - main_m) / (2.0 * eps);
            let fd_dom = (dom_p - dom_m) / (2.0 * eps);
            let expect = fd_main + lambda * sign * fd_dom;
            let err = (analytic[ti][ci] - expect).abs() / expect.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(CheckResult {
        name: "micro_model_end_to_end",
        max_rel_err: max_err,
        tolerance: 1e-3,
    })
}

/// Gradient-reversal composite: the analytic trunk gradient must equal
/// `-lambda` times the finite-difference gradient of the same branch built
/// without reversal.
fn grl_composite_check() -> Result<CheckResult> {
    let f = smooth_mat(1, 6, 0.71);
    let w1 = smooth_mat(6, 4, 0.37);
    let w2 = smooth_mat(4, 3, 0.53);
    let lambda = 0.8;

    let mut g = Graph::<f64>::new();
    let fid = g.leaf(&f, true);
    let w1id = g.leaf(&w1, false);
    let w2id = g.leaf(&w2, false);
    let r = g.grad_reverse(fid, lambda);
    let h = g.linear(r, w1id, None)?;
    let h = g.tanh(h);
    let o = g.linear(h, w2id, None)?;
    let loss = g.cross_entropy_loss(o, &[1])?;
    g.backward(loss)?;
    let analytic = g.grad(fid).unwrap().to_vec();
    drop(g);

    let eval = |fm: &Mat<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let fid = g.leaf(fm, true);
        let w1id = g.leaf(&w1, false);
        let w2id = g.leaf(&w2, false);
        let h = g.linear(fid, w1id, None)?;
        let h = g.tanh(h);
        let o = g.linear(h, w2id, None)?;
        let loss = g.cross_entropy_loss(o, &[1])?;
        Ok(g.scalar(loss))
    };
    let eps = 1e-5;
    let mut work = f.clone();
    let mut max_err = 0.0f64;
    for i in 0..work.data.len() {
        let orig = work.data[i];
        work.data[i] = orig + eps;
        let fp = eval(&work)?;
        work.data[i] = orig - eps;
        let fm = eval(&work)?;
        work.data[i] = orig;
        let numeric = -lambda * (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(CheckResult {
        name: "grl_composite",
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

/// Finite-difference verification of every layer kind plus the full micro
/// model. Inputs avoid activation kinks so the central differences are
/// clean.
pub fn gradcheck_suite() -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let tol = 1e-4;

    results.push(fd_err_entry("linear", tol, &{
        vec![smooth_mat(3, 4, 0.31), smooth_mat(4, 2, 0.19), smooth_mat(1, 2, 0.7)]
    }, |g, ids| {
        let y = g.linear(ids[0], ids[1], Some(ids[2]))?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })?);

    // relu probes sit away from zero
    let relu_in = Mat::from_fn(3, 5, |r, c| {
        let v = ((r * 5 + c) as f64 * 0.7).sin();
        if v >= 0.0 {
            v + 0.2
        } else {
            v - 0.2
        }
    });
    results.push(fd_err_entry("activation_relu", tol, &[relu_in], |g, ids| {
        let y = g.relu(ids[0]);
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })?);
    for (name, kind) in [
        ("activation_sigmoid", Activation::Sigmoid),
        ("activation_tanh", Activation::Tanh),
    ] {
        results.push(fd_err_entry(name, tol, &[smooth_mat(3, 5, 0.41)], move |g, ids| {
            let y = g.activation(ids[0], kind);
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })?);
    }

    let sm_w = smooth_mat(2, 6, 0.23);
    results.push(fd_err_entry("softmax", tol, &[smooth_mat(2, 6, 0.37)], move |g, ids| {
        let p = g.softmax(ids[0]);
        let w = g.leaf(&sm_w, false);
        let m = g.mul(p, w)?;
        Ok(g.sum(m))
    })?);

    results.push(fd_err_entry("layer_norm", tol, &{
        let mut gain = Mat::zeros(1, 6);
        gain.data.iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + 0.1 * i as f64);
        vec![smooth_mat(3, 6, 0.29), gain, smooth_mat(1, 6, 0.11)]
    }, |g, ids| {
        let y = g.layer_norm(ids[0], ids[1], ids[2])?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })?);

    // max-pool margins: strictly increasing data keeps argmax stable
    let pool_in = Mat::from_fn(8, 3, |r, c| r as f64 * 0.5 + c as f64 * 0.13);
    results.push(fd_err_entry("pool_max", tol, &[pool_in], |g, ids| {
        let y = g.pool_rows(ids[0], PoolKind::Max, 2, 2)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })?);
    results.push(fd_err_entry("pool_avg", tol, &[smooth_mat(8, 3, 0.61)], |g, ids| {
        let y = g.pool_rows(ids[0], PoolKind::Avg, 2, 2)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })?);

    results.push(fd_err_entry("channel_attention", tol, &{
        vec![smooth_mat(6, 8, 0.37), smooth_mat(8, 2, 0.43) , smooth_mat(2, 8, 0.57)]
    }, |g, ids| {
        let (gated, _) = encoder::channel_attention(g, ids[1], ids[2], ids[0])?;
        let sq = g.mul(gated, gated)?;
        Ok(g.sum(sq))
    })?);

    results.push(fd_err_entry("lstm_cell", 1e-3, &{
        vec![
            smooth_mat(6, 4, 0.43),
            smooth_mat(4, 12, 0.19),
            smooth_mat(3, 12, 0.23),
            smooth_mat(1, 12, 0.31),
        ]
    }, |g, ids| {
        let y = g.lstm(ids[0], ids[1], ids[2], ids[3], false)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })?);

    results.push(fd_err_entry("cross_attention", tol, &{
        vec![
            smooth_mat(5, 8, 0.47),
            smooth_mat(5, 8, 0.59),
            smooth_mat(8, 8, 0.21),
            smooth_mat(8, 8, 0.27),
            smooth_mat(8, 8, 0.33),
            smooth_mat(8, 8, 0.39),
            Mat::from_fn(1, 8, |_, c| 1.0 + 0.05 * c as f64),
            smooth_mat(1, 8, 0.13),
        ]
    }, |g, ids| {
        let a = CrossAttnIds {
            w_q: ids[2],
            w_k: ids[3],
            w_v: ids[4],
            w_o: ids[5],
            ln_gain: ids[6],
            ln_bias: ids[7],
        };
        let out = fusion::cross_attention(g, &a, ids[0], ids[1], 2, 4)?;
        let sq = g.mul(out, out)?;
        Ok(g.sum(sq))
    })?);

    results.push(grl_composite_check()?);

    results.push(fd_err_entry("focal_loss", tol, &[smooth_mat(5, 4, 0.47)], |g, ids| {
        g.focal_loss(ids[0], &[0, 1, 2, 3, 1], 2.0, &[0.2, 0.3, 0.2, 0.3])
    })?);
    results.push(fd_err_entry("domain_cross_entropy", tol, &[smooth_mat(4, 6, 0.59)], |g, ids| {
        g.cross_entropy_loss(ids[0], &[0, 2, 4, 5])
    })?);
    let centers = smooth_mat(4, 5, 0.4);
    results.push(fd_err_entry("center_loss", tol, &[smooth_mat(3, 5, 0.6)], move |g, ids| {
        g.center_loss(ids[0], &[1, 0, 3], &centers, &[0.2, 0.3, 0.2, 0.3])
    })?);

    results.push(micro_model_composite_check()?);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims_validate_and_yield_the_published_shape_chain() {
        let d = ModelDims::default();
        d.validate().unwrap();
        assert_eq!(d.model_width(), 128);
        assert_eq!((d.t_prime - 2) / 2 + 1, 249);
    }

    #[test]
    fn contradictory_ablation_flags_are_rejected() {
        let mut cfg = ModelConfig::micro();
        cfg.ablation.no_fusion_eeg = true;
        cfg.ablation.no_fusion_emg = true;
        assert!(cfg.validate().is_err());
    }

    fn micro_trial(cfg: &ModelConfig, seed: u64) -> TrialTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrialTensor {
            eeg: Mat::from_fn(2 * cfg.dims.c_e, cfg.dims.t_prime, |_, _| {
                rng.gen_range(-1.0f32..1.0)
            }),
            emg: Mat::from_fn(2 * cfg.dims.c_m, cfg.dims.t_prime, |_, _| {
                rng.gen_range(-1.0f32..1.0)
            }),
            tone: 3,
            subject: 2,
        }
    }

    #[test]
    fn forward_shapes_follow_the_dimension_chain() {
        let cfg = ModelConfig::micro();
        let params: ModelParams<f64> = ModelParams::init(&cfg, 7).unwrap();
        let mut g = Graph::new();
        let ids = leaf_model(&mut g, &params);
        let trial = micro_trial(&cfg, 1);
        let (eeg, emg) = trial_input(&mut g, &trial);
        assert_eq!(g.shape(eeg), (cfg.dims.t_prime, 2 * cfg.dims.c_e));
        let out = forward(&mut g, &ids, &cfg, eeg, emg, None).unwrap();
        assert_eq!(g.shape(out.tone_logits), (1, 4));
        assert_eq!(g.shape(out.fused), (1, cfg.dims.fuse_out));
        assert_eq!(
            g.shape(out.domain_logits.unwrap()),
            (1, cfg.dims.n_subjects)
        );
        assert_eq!(g.shape(out.eeg_gates), (1, cfg.dims.conv2));
    }

    #[test]
    fn ablations_strictly_reduce_parameter_counts() {
        let full_cfg = ModelConfig::micro();
        let full: ModelParams<f64> = ModelParams::init(&full_cfg, 3).unwrap();
        for flags in [
            AblationFlags {
                no_cross_attention: true,
                ..Default::default()
            },
            AblationFlags {
                no_bilstm: true,
                ..Default::default()
            },
            AblationFlags {
                no_fusion_eeg: true,
                ..Default::default()
            },
            AblationFlags {
                no_domain_discriminator: true,
                ..Default::default()
            },
        ] {
            let cfg = ModelConfig {
                ablation: flags,
                ..full_cfg
            };
            let ablated: ModelParams<f64> = ModelParams::init(&cfg, 3).unwrap();
            assert!(
                ablated.param_count() < full.param_count(),
                "{flags:?} did not shrink the model"
            );
        }
    }

    #[test]
    fn ablated_forward_paths_run() {
        for flags in [
            AblationFlags {
                no_cross_attention: true,
                ..Default::default()
            },
            AblationFlags {
                no_bilstm: true,
                ..Default::default()
            },
            AblationFlags {
                no_fusion_eeg: true,
                ..Default::default()
            },
            AblationFlags {
                no_fusion_emg: true,
                ..Default::default()
            },
            AblationFlags {
                no_domain_discriminator: true,
                ..Default::default()
            },
        ] {
            let cfg = ModelConfig {
                ablation: flags,
                ..ModelConfig::micro()
            };
            let params: ModelParams<f64> = ModelParams::init(&cfg, 5).unwrap();
            let trial = micro_trial(&cfg, 2);
            let mut g = Graph::new();
            let ids = leaf_model(&mut g, &params);
            let (out, losses) = trial_loss(&mut g, &ids, &params, &cfg, &trial, None).unwrap();
            assert_eq!(g.shape(out.tone_logits), (1, 4));
            assert_eq!(
                out.domain_logits.is_none(),
                flags.no_domain_discriminator
            );
            g.backward(losses.total).unwrap();
        }
    }

    #[test]
    fn model_persistence_roundtrips() {
        let cfg = ModelConfig::micro();
        let mut params: ModelParams<f64> = ModelParams::init(&cfg, 11).unwrap();
        params.centers = Mat::from_fn(4, cfg.dims.fuse_out, |r, c| (r * 10 + c) as f64 * 0.01);
        let dir = tempfile::tempdir().unwrap();
        save_model(&params, &cfg, dir.path()).unwrap();
        let (back, cfg2): (ModelParams<f64>, _) = load_model(dir.path()).unwrap();
        assert_eq!(cfg2.dims, cfg.dims);
        let mut a = Vec::new();
        params.for_each_tensor(|_, m| a.push(m.clone()));
        let mut b = Vec::new();
        back.for_each_tensor(|_, m| b.push(m.clone()));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(x.data.iter().zip(y.data.iter()).all(|(u, v)| u == v));
        }
        assert_eq!(params.centers.data, back.centers.data);
    }

    #[test]
    fn flat_ids_align_with_canonical_order() {
        let cfg = ModelConfig::micro();
        let params: ModelParams<f64> = ModelParams::init(&cfg, 13).unwrap();
        let mut g = Graph::new();
        let ids = leaf_model(&mut g, &params);
        assert_eq!(ids.flat.len(), params.tensor_count());
        let mut k = 0;
        params.for_each_tensor(|_, m| {
            assert_eq!(g.shape(ids.flat[k]), m.shape());
            assert_eq!(g.data(ids.flat[k]), m.data.as_slice());
            k += 1;
        });
    }

    #[test]
    fn verification_suite_passes() {
        for r in gradcheck_suite().unwrap() {
            assert!(
                r.passed(),
                "{} failed: {} >= {}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
    }
}
