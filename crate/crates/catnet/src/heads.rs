//! Tone classifier, gradient-reversal domain discriminator, and the loss
//! composition.
//!
//! The total objective is `L_focal + lambda_dom * L_dom + L_cent` with the
//! per-class weights already inside the center term. The gradient-reversal
//! multiplier is fixed at 1 so the domain weight is applied exactly once,
//! as the loss coefficient.

use crate::autodiff::{Graph, ValueId};
use crate::error::{Error, Result};
use crate::mat::{xavier, Mat, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const N_TONES: usize = 4;

/// Domain discriminator weights: one hidden layer keeps the head weaker
/// than the trunk.
#[derive(Clone, Debug)]
pub struct DomainHead<F> {
    pub w1: Mat<F>,
    pub b1: Mat<F>,
    pub w2: Mat<F>,
    pub b2: Mat<F>,
}

/// Classifier and discriminator weights.
#[derive(Clone, Debug)]
pub struct HeadParams<F> {
    pub tone_w: Mat<F>,
    pub tone_b: Mat<F>,
    /// Absent when the domain discriminator is ablated.
    pub domain: Option<DomainHead<F>>,
}

impl<F: Scalar> HeadParams<F> {
    pub fn init(
        fuse_dim: usize,
        dom_hidden: usize,
        n_subjects: usize,
        use_domain: bool,
        rng: &mut impl Rng,
    ) -> Self {
        HeadParams {
            tone_w: xavier(fuse_dim, N_TONES, rng),
            tone_b: Mat::zeros(1, N_TONES),
            domain: use_domain.then(|| DomainHead {
                w1: xavier(fuse_dim, dom_hidden, rng),
                b1: Mat::zeros(1, dom_hidden),
                w2: xavier(dom_hidden, n_subjects, rng),
                b2: Mat::zeros(1, n_subjects),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DomainIds {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub tone_w: ValueId,
    pub tone_b: ValueId,
    pub domain: Option<DomainIds>,
}

pub fn leaf_heads<F: Scalar>(g: &mut Graph<F>, p: &HeadParams<F>) -> HeadIds {
    HeadIds {
        tone_w: g.leaf(&p.tone_w, true),
        tone_b: g.leaf(&p.tone_b, true),
        domain: p.domain.as_ref().map(|d| DomainIds {
            w1: g.leaf(&d.w1, true),
            b1: g.leaf(&d.b1, true),
            w2: g.leaf(&d.w2, true),
            b2: g.leaf(&d.b2, true),
        }),
    }
}

/// Affine map from the fused feature to the four tone logits.
pub fn tone_logits<F: Scalar>(g: &mut Graph<F>, ids: &HeadIds, f: ValueId) -> Result<ValueId> {
    g.linear(f, ids.tone_w, Some(ids.tone_b))
}

/// Domain branch: gradient reversal (multiplier 1), one hidden ReLU layer,
/// subject logits.
pub fn domain_logits<F: Scalar>(
    g: &mut Graph<F>,
    ids: &DomainIds,
    f: ValueId,
) -> Result<ValueId> {
    let reversed = g.grad_reverse(f, F::one());
    let h = g.linear(reversed, ids.w1, Some(ids.b1))?;
    let h = g.relu(h);
    g.linear(h, ids.w2, Some(ids.b2))
}

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: [f64; 4],
    pub lambda_dom: f64,
    pub center_weights: [f64; 4],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            alpha: [0.2, 0.3, 0.2, 0.3],
            lambda_dom: 0.05,
            center_weights: [0.2, 0.3, 0.2, 0.3],
        }
    }
}

/// Scalar ids of the assembled loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossIds {
    pub total: ValueId,
    pub focal: ValueId,
    /// Absent without a domain branch.
    pub domain: Option<ValueId>,
    /// Absent when every center weight is zero.
    pub center: Option<ValueId>,
}

/// Build `L = L_focal + lambda_dom * L_dom + L_cent` for a batch of fused
/// features. Tones are 1-based labels, subjects 1-based ids; both are
/// validated. Centers enter as constants (no gradient).
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    tone_logit_id: ValueId,
    domain_logit_id: Option<ValueId>,
    fused: ValueId,
    tones: &[u8],
    subjects: &[u16],
    n_subjects: usize,
    centers: &Mat<F>,
    cfg: &LossConfig,
) -> Result<LossIds> {
    let tone_idx: Vec<usize> = tones
        .iter()
        .map(|&t| {
            if (1..=N_TONES as u8).contains(&t) {
                Ok((t - 1) as usize)
            } else {
                Err(Error::invalid(format!("tone label {t} outside 1..=4")))
            }
        })
        .collect::<Result<_>>()?;
    let alpha: Vec<F> = cfg.alpha.iter().map(|&a| F::c(a)).collect();
    let focal = g.focal_loss(tone_logit_id, &tone_idx, F::c(cfg.gamma), &alpha)?;

    let domain = match domain_logit_id {
        Some(dl) => {
            let subj_idx: Vec<usize> = subjects
                .iter()
                .map(|&s| {
                    if (1..=n_subjects as u16).contains(&s) {
                        Ok((s - 1) as usize)
                    } else {
                        Err(Error::invalid(format!(
                            "subject id {s} outside 1..={n_subjects}"
                        )))
                    }
                })
                .collect::<Result<_>>()?;
            Some(g.cross_entropy_loss(dl, &subj_idx)?)
        }
        None => None,
    };

    let center = if cfg.center_weights.iter().any(|&w| w != 0.0) {
        let weights: Vec<F> = cfg.center_weights.iter().map(|&w| F::c(w)).collect();
        Some(g.center_loss(fused, &tone_idx, centers, &weights)?)
    } else {
        None
    };

    let mut total = focal;
    if let Some(d) = domain {
        let weighted = g.scale(d, F::c(cfg.lambda_dom));
        total = g.add(total, weighted)?;
    }
    if let Some(c) = center {
        total = g.add(total, c)?;
    }
    Ok(LossIds {
        total,
        focal,
        domain,
        center,
    })
}
