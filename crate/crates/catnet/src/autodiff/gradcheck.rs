//! Central finite-difference verification of analytic gradients.

use super::{Graph, ValueId};
use crate::error::{Error, Result};
use crate::mat::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Maximum relative error between analytic gradients and central finite
/// differences for a scalar-valued graph builder.
///
/// `build` must be a pure function of the leaf tensors: it is re-run twice
/// per checked coordinate with one entry perturbed by `+/-eps`. Tensors with
/// more than `max_coords` entries are subsampled (at least 50 coordinates
/// each) with a seeded RNG. The error metric per coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check(
    build: impl Fn(&mut Graph<f64>, &[ValueId]) -> Result<ValueId>,
    tensors: &[Mat<f64>],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!(
            "grad_check eps must be in (0, 1e-3], got {eps}"
        )));
    }
    let max_coords = max_coords.max(50);

    let eval = |ts: &[Mat<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<ValueId> = ts.iter().map(|t| g.leaf(t, true)).collect();
        let loss = build(&mut g, &ids)?;
        if g.shape(loss) != (1, 1) {
            return Err(Error::invalid(format!(
                "grad_check builder must return a scalar, got {:?}",
                g.shape(loss)
            )));
        }
        let f = g.scalar(loss);
        if !f.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check".into(),
                detail: format!("objective evaluated to {f}"),
            });
        }
        Ok(f)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<ValueId> = tensors.iter().map(|t| g.leaf(t, true)).collect();
    let loss = build(&mut g, &ids)?;
    let f0 = g.scalar(loss);
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check".into(),
            detail: format!("objective evaluated to {f0}"),
        });
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Mat<f64>> = tensors.to_vec();
    let mut max_err = 0.0f64;
    for (ti, t) in tensors.iter().enumerate() {
        let len = t.data.len();
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, max_coords).into_vec()
        };
        for ci in coords {
            let orig = work[ti].data[ci];
            work[ti].data[ci] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data[ci] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic[ti][ci] - numeric).abs() / numeric.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_is_exact_to_fd() {
        let x = Mat::from_fn(3, 4, |r, c| ((r * 7 + c) as f64 * 0.31).sin());
        let w = Mat::from_fn(4, 2, |r, c| ((r * 3 + c) as f64 * 0.19).cos());
        let b = Mat::from_fn(1, 2, |_, c| 0.1 * (c as f64 + 1.0));
        let err = grad_check(
            |g, ids| {
                let y = g.linear(ids[0], ids[1], Some(ids[2]))?;
                Ok(g.sum(y))
            },
            &[x, w, b],
            1e-5,
            50,
            7,
        )
        .unwrap();
        assert!(err < 1e-6, "linear grad error {err}");
    }

    #[test]
    fn relu_away_from_kink_is_exact() {
        // all |x| > 0.1 so the +/-eps probes never cross zero
        let x = Mat::from_fn(4, 5, |r, c| {
            let v = ((r * 5 + c) as f64 * 0.7).sin();
            if v >= 0.0 {
                v + 0.15
            } else {
                v - 0.15
            }
        });
        let err = grad_check(
            |g, ids| {
                let y = g.relu(ids[0]);
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            },
            &[x],
            1e-5,
            50,
            3,
        )
        .unwrap();
        assert!(err < 1e-6, "relu grad error {err}");
    }

    #[test]
    fn zero_function_has_error_exactly_zero() {
        let x = Mat::from_fn(2, 3, |r, c| (r + c) as f64);
        let err = grad_check(
            |g, ids| {
                let z = g.scale(ids[0], 0.0);
                Ok(g.sum(z))
            },
            &[x],
            1e-5,
            50,
            1,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Mat::<f64>::zeros(1, 1);
        assert!(grad_check(|g, ids| Ok(g.sum(ids[0])), &[x], 0.0, 50, 1).is_err());
    }
}
