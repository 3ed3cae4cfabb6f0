//! Modality-specific spatial-temporal encoder: pointwise convolution
//! stack, temporal max pooling, channel attention, and a bidirectional
//! recurrent layer. EEG and EMG each get an independent instance with the
//! same architecture.

use crate::autodiff::{Graph, PoolKind, ValueId};
use crate::error::Result;
use crate::mat::{xavier, Mat, Scalar};
use rand::Rng;

/// Weights of one recurrent direction.
#[derive(Clone, Debug)]
pub struct LstmParams<F> {
    pub w_ih: Mat<F>,
    pub w_hh: Mat<F>,
    pub b: Mat<F>,
}

impl<F: Scalar> LstmParams<F> {
    fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        LstmParams {
            w_ih: xavier(input, 4 * hidden, rng),
            w_hh: xavier(hidden, 4 * hidden, rng),
            b: Mat::zeros(1, 4 * hidden),
        }
    }
}

/// Forward and backward recurrent cells.
#[derive(Clone, Debug)]
pub struct BiLstmParams<F> {
    pub fwd: LstmParams<F>,
    pub bwd: LstmParams<F>,
}

/// All weights of one encoder instance.
#[derive(Clone, Debug)]
pub struct EncoderParams<F> {
    pub conv1_w: Mat<F>,
    pub conv1_b: Mat<F>,
    pub conv2_w: Mat<F>,
    pub conv2_b: Mat<F>,
    /// Shared channel-attention bottleneck, applied to both pooled
    /// statistics.
    pub attn_w1: Mat<F>,
    pub attn_w2: Mat<F>,
    /// Absent when the recurrent layer is ablated.
    pub lstm: Option<BiLstmParams<F>>,
}

impl<F: Scalar> EncoderParams<F> {
    pub fn init(
        channels_in: usize,
        conv1: usize,
        conv2: usize,
        bottleneck: usize,
        lstm_hidden: usize,
        use_bilstm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        EncoderParams {
            conv1_w: xavier(channels_in, conv1, rng),
            conv1_b: Mat::zeros(1, conv1),
            conv2_w: xavier(conv1, conv2, rng),
            conv2_b: Mat::zeros(1, conv2),
            attn_w1: xavier(conv2, bottleneck, rng),
            attn_w2: xavier(bottleneck, conv2, rng),
            lstm: use_bilstm.then(|| BiLstmParams {
                fwd: LstmParams::init(conv2, lstm_hidden, rng),
                bwd: LstmParams::init(conv2, lstm_hidden, rng),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub w_ih: ValueId,
    pub w_hh: ValueId,
    pub b: ValueId,
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmIds {
    pub fwd: LstmIds,
    pub bwd: LstmIds,
}

/// Graph handles to one encoder's weights.
#[derive(Clone, Copy, Debug)]
pub struct EncoderIds {
    pub conv1_w: ValueId,
    pub conv1_b: ValueId,
    pub conv2_w: ValueId,
    pub conv2_b: ValueId,
    pub attn_w1: ValueId,
    pub attn_w2: ValueId,
    pub lstm: Option<BiLstmIds>,
}

/// Push every encoder tensor into the graph as a trainable leaf.
pub fn leaf_encoder<F: Scalar>(g: &mut Graph<F>, p: &EncoderParams<F>) -> EncoderIds {
    EncoderIds {
        conv1_w: g.leaf(&p.conv1_w, true),
        conv1_b: g.leaf(&p.conv1_b, true),
        conv2_w: g.leaf(&p.conv2_w, true),
        conv2_b: g.leaf(&p.conv2_b, true),
        attn_w1: g.leaf(&p.attn_w1, true),
        attn_w2: g.leaf(&p.attn_w2, true),
        lstm: p.lstm.as_ref().map(|l| BiLstmIds {
            fwd: LstmIds {
                w_ih: g.leaf(&l.fwd.w_ih, true),
                w_hh: g.leaf(&l.fwd.w_hh, true),
                b: g.leaf(&l.fwd.b, true),
            },
            bwd: LstmIds {
                w_ih: g.leaf(&l.bwd.w_ih, true),
                w_hh: g.leaf(&l.bwd.w_hh, true),
                b: g.leaf(&l.bwd.b, true),
            },
        }),
    }
}

/// Two pointwise (1x1) convolution layers applied per timestep, each
/// followed by ReLU, then temporal max pooling with `k = 2`, `stride = 2`
/// (499 rows pool to 249). Dropout, when a mask is given, acts on the
/// pooled output.
pub fn pointwise_conv_stack<F: Scalar>(
    g: &mut Graph<F>,
    ids: &EncoderIds,
    x: ValueId,
    dropout_mask: Option<Vec<F>>,
) -> Result<ValueId> {
    let h1 = g.linear(x, ids.conv1_w, Some(ids.conv1_b))?;
    let h1 = g.relu(h1);
    let h2 = g.linear(h1, ids.conv2_w, Some(ids.conv2_b))?;
    let h2 = g.relu(h2);
    let pooled = g.pool_rows(h2, PoolKind::Max, 2, 2)?;
    match dropout_mask {
        Some(mask) => g.dropout(pooled, mask),
        None => Ok(pooled),
    }
}

/// Channel attention: global average and max statistics over time, a
/// shared bottleneck MLP with sigmoid outputs, summed gates broadcast back
/// over the time axis. Returns the gated features and the gate vector.
pub fn channel_attention<F: Scalar>(
    g: &mut Graph<F>,
    w1: ValueId,
    w2: ValueId,
    h: ValueId,
) -> Result<(ValueId, ValueId)> {
    let mut gates = Vec::with_capacity(2);
    for kind in [PoolKind::Avg, PoolKind::Max] {
        let s = g.global_pool(h, kind)?;
        let t = g.linear(s, w1, None)?;
        let t = g.relu(t);
        let t = g.linear(t, w2, None)?;
        gates.push(g.sigmoid(t));
    }
    let s_prime = g.add(gates[0], gates[1])?;
    let gated = g.mul_row_broadcast(h, s_prime)?;
    Ok((gated, s_prime))
}

/// Forward and backward recurrent passes, concatenated per timestep.
pub fn bilstm<F: Scalar>(g: &mut Graph<F>, ids: &BiLstmIds, x: ValueId) -> Result<ValueId> {
    let f = g.lstm(x, ids.fwd.w_ih, ids.fwd.w_hh, ids.fwd.b, false)?;
    let b = g.lstm(x, ids.bwd.w_ih, ids.bwd.w_hh, ids.bwd.b, true)?;
    g.concat_cols(f, b)
}

/// Full encoder: conv stack, channel attention, recurrent layer (when
/// present). Returns the encoded sequence and the channel gate vector.
pub fn encode<F: Scalar>(
    g: &mut Graph<F>,
    ids: &EncoderIds,
    x: ValueId,
    dropout_mask: Option<Vec<F>>,
) -> Result<(ValueId, ValueId)> {
    let pooled = pointwise_conv_stack(g, ids, x, dropout_mask)?;
    let (gated, gates) = channel_attention(g, ids.attn_w1, ids.attn_w2, pooled)?;
    let z = match &ids.lstm {
        Some(l) => bilstm(g, l, gated)?,
        None => gated,
    };
    Ok((z, gates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_params(channels_in: usize) -> EncoderParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        EncoderParams::init(channels_in, 4, 8, 2, 4, true, &mut rng)
    }

    #[test]
    fn conv_stack_passes_first_channels_with_identity_like_weights() {
        // W1 = [I; 0] padding, W2 = [I; 0], nonnegative input
        let mut p = test_params(3);
        p.conv1_w = Mat::from_fn(3, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        p.conv2_w = Mat::from_fn(4, 8, |r, c| if r == c { 1.0 } else { 0.0 });
        let mut g = Graph::<f64>::new();
        let ids = leaf_encoder(&mut g, &p);
        let x = g.leaf(&Mat::from_fn(6, 3, |r, c| (r * 3 + c) as f64 * 0.1), false);
        let out = pointwise_conv_stack(&mut g, &ids, x, None).unwrap();
        assert_eq!(g.shape(out), (3, 8)); // 6 rows pool to 3
        // first 3 columns reproduce the max-pooled input channels
        for o in 0..3 {
            for c in 0..3 {
                let expect = (2 * o * 3 + c).max((2 * o + 1) * 3 + c) as f64 * 0.1;
                assert!((g.data(out)[o * 8 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_stack_pools_499_to_249() {
        let p = test_params(4);
        let mut g = Graph::<f64>::new();
        let ids = leaf_encoder(&mut g, &p);
        let x = g.leaf(&Mat::zeros(499, 4), false);
        let out = pointwise_conv_stack(&mut g, &ids, x, None).unwrap();
        assert_eq!(g.shape(out).0, 249);
    }

    #[test]
    fn conv_stack_rejects_channel_mismatch() {
        let p = test_params(4);
        let mut g = Graph::<f64>::new();
        let ids = leaf_encoder(&mut g, &p);
        let x = g.leaf(&Mat::zeros(10, 5), false);
        assert!(pointwise_conv_stack(&mut g, &ids, x, None).is_err());
    }

    #[test]
    fn zero_attention_mlp_gives_unit_gates() {
        let mut p = test_params(3);
        p.attn_w1 = Mat::zeros(8, 2);
        p.attn_w2 = Mat::zeros(2, 8);
        let mut g = Graph::<f64>::new();
        let w1 = g.leaf(&p.attn_w1, false);
        let w2 = g.leaf(&p.attn_w2, false);
        let h = g.leaf(&Mat::from_fn(5, 8, |r, c| ((r * 8 + c) as f64 * 0.3).sin()), false);
        let (gated, gates) = channel_attention(&mut g, w1, w2, h).unwrap();
        assert!(g.data(gates).iter().all(|&v| v == 1.0));
        assert!(g
            .data(gated)
            .iter()
            .zip(g.data(h).iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gates_lie_in_open_interval_zero_two() {
        let p = test_params(3);
        let mut g = Graph::<f64>::new();
        let w1 = g.leaf(&p.attn_w1, false);
        let w2 = g.leaf(&p.attn_w2, false);
        let h = g.leaf(&Mat::from_fn(7, 8, |r, c| ((r * 8 + c) as f64 * 1.3).sin() * 4.0), false);
        let (_, gates) = channel_attention(&mut g, w1, w2, h).unwrap();
        assert!(g.data(gates).iter().all(|&v| v > 0.0 && v < 2.0));
    }

    #[test]
    fn zeroed_bottleneck_row_makes_gates_ignore_that_column() {
        // with W1 rows zeroed except row 0, the gates depend only on the
        // statistics of feature column 0
        let mut p = test_params(3);
        for r in 1..8 {
            for c in 0..2 {
                p.attn_w1.set(r, c, 0.0);
            }
        }
        let base = Mat::from_fn(5, 8, |r, c| ((r * 8 + c) as f64 * 0.41).sin() + 2.0);
        let mut scaled = base.clone();
        for r in 0..5 {
            scaled.set(r, 3, scaled.get(r, 3) * 100.0); // scale column 3
        }
        let gates_of = |h: &Mat<f64>| {
            let mut g = Graph::<f64>::new();
            let w1 = g.leaf(&p.attn_w1, false);
            let w2 = g.leaf(&p.attn_w2, false);
            let hid = g.leaf(h, false);
            let (_, gates) = channel_attention(&mut g, w1, w2, hid).unwrap();
            g.data(gates).to_vec()
        };
        assert_eq!(gates_of(&base), gates_of(&scaled));

        // scaling column 0 does change the gates
        let mut scaled0 = base.clone();
        for r in 0..5 {
            scaled0.set(r, 0, scaled0.get(r, 0) * 100.0);
        }
        assert_ne!(gates_of(&base), gates_of(&scaled0));
    }

    #[test]
    fn channel_attention_grads_match_finite_differences() {
        let p = test_params(3);
        let h = Mat::from_fn(6, 8, |r, c| ((r * 8 + c) as f64 * 0.37).sin());
        let err = grad_check(
            |g, ids| {
                let (gated, _) = channel_attention(g, ids[1], ids[2], ids[0])?;
                let sq = g.mul(gated, gated)?;
                Ok(g.sum(sq))
            },
            &[h, p.attn_w1.clone(), p.attn_w2.clone()],
            1e-5,
            50,
            41,
        )
        .unwrap();
        assert!(err < 1e-4, "channel attention grad error {err}");
    }

    #[test]
    fn bilstm_zero_weights_give_zero_output() {
        let mut p = test_params(3);
        if let Some(l) = p.lstm.as_mut() {
            for m in [
                &mut l.fwd.w_ih,
                &mut l.fwd.w_hh,
                &mut l.fwd.b,
                &mut l.bwd.w_ih,
                &mut l.bwd.w_hh,
                &mut l.bwd.b,
            ] {
                m.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::<f64>::new();
        let ids = leaf_encoder(&mut g, &p);
        let x = g.leaf(&Mat::from_fn(5, 8, |r, c| (r + c) as f64), false);
        let z = bilstm(&mut g, &ids.lstm.unwrap(), x).unwrap();
        assert!(g.data(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_output_shape_is_channel_count_independent() {
        for channels in [40, 10] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let p = EncoderParams::<f64>::init(channels, 64, 128, 16, 64, true, &mut rng);
            let mut g = Graph::<f64>::new();
            let ids = leaf_encoder(&mut g, &p);
            let x = g.leaf(&Mat::zeros(499, channels), false);
            let (z, gates) = encode(&mut g, &ids, x, None).unwrap();
            assert_eq!(g.shape(z), (249, 128), "channels={channels}");
            assert_eq!(g.shape(gates), (1, 128));
        }
    }

    #[test]
    fn encode_with_zero_recurrent_weights_is_all_zero() {
        let mut p = test_params(3);
        if let Some(l) = p.lstm.as_mut() {
            for m in [
                &mut l.fwd.w_ih,
                &mut l.fwd.w_hh,
                &mut l.bwd.w_ih,
                &mut l.bwd.w_hh,
            ] {
                m.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::<f64>::new();
        let ids = leaf_encoder(&mut g, &p);
        let x = g.leaf(&Mat::from_fn(8, 3, |r, c| ((r + c) as f64).sin()), false);
        let (z, _) = encode(&mut g, &ids, x, None).unwrap();
        assert!(g.data(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_without_dropout() {
        let p = test_params(3);
        let x = Mat::from_fn(9, 3, |r, c| ((r * 3 + c) as f64 * 0.7).cos());
        let run = || {
            let mut g = Graph::<f64>::new();
            let ids = leaf_encoder(&mut g, &p);
            let xi = g.leaf(&x, false);
            let (z, _) = encode(&mut g, &ids, xi, None).unwrap();
            g.data(z).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn encode_grads_match_finite_differences_at_micro_scale() {
        let p = test_params(2);
        let x = Mat::from_fn(8, 2, |r, c| ((r * 2 + c) as f64 * 0.53).sin());
        let l = p.lstm.as_ref().unwrap();
        let tensors = vec![
            x,
            p.conv1_w.clone(),
            p.conv1_b.clone(),
            p.conv2_w.clone(),
            p.conv2_b.clone(),
            p.attn_w1.clone(),
            p.attn_w2.clone(),
            l.fwd.w_ih.clone(),
            l.fwd.w_hh.clone(),
            l.fwd.b.clone(),
            l.bwd.w_ih.clone(),
            l.bwd.w_hh.clone(),
            l.bwd.b.clone(),
        ];
        let err = grad_check(
            |g, ids| {
                let e = EncoderIds {
                    conv1_w: ids[1],
                    conv1_b: ids[2],
                    conv2_w: ids[3],
                    conv2_b: ids[4],
                    attn_w1: ids[5],
                    attn_w2: ids[6],
                    lstm: Some(BiLstmIds {
                        fwd: LstmIds {
                            w_ih: ids[7],
                            w_hh: ids[8],
                            b: ids[9],
                        },
                        bwd: LstmIds {
                            w_ih: ids[10],
                            w_hh: ids[11],
                            b: ids[12],
                        },
                    }),
                };
                let (z, _) = encode(g, &e, ids[0], None)?;
                let sq = g.mul(z, z)?;
                Ok(g.sum(sq))
            },
            &tensors,
            1e-5,
            50,
            43,
        )
        .unwrap();
        assert!(err < 1e-3, "encoder grad error {err}");
    }
}
