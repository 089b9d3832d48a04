use super::{Graph, Var};
use crate::error::{Error, Result};

/// Projection matrices of one attention block. All are d×d and bias-free.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Output of [`multi_head_attention`] together with the per-head attention
/// probabilities (each a×b, rows summing to 1).
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` column slices of width d/heads,
/// concatenated and passed through the output projection.
///
/// Queries come from `q_in` (a×d); keys and values from `k_in` and `v_in`
/// (b×d). With `causal`, query row `i` only sees key rows `0..=i`, which
/// requires a == b.
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &AttentionWeights,
    heads: usize,
    causal: bool,
) -> Result<Attention> {
    let d = g.shape(w.wq)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} attention heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = g.matmul(q_in, w.wq)?;
    let k = g.matmul(k_in, w.wk)?;
    let v = g.matmul(v_in, w.wv)?;

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let p = if causal {
            g.softmax_rows_causal(scores)?
        } else {
            g.softmax_rows(scores)?
        };
        outs.push(g.matmul(p, vh)?);
        weights.push(p);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    let output = g.matmul(merged, w.wo)?;
    Ok(Attention { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn weights(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize) -> AttentionWeights {
        AttentionWeights {
            wq: g.param(&random(rng, d, d)),
            wk: g.param(&random(rng, d, d)),
            wv: g.param(&random(rng, d, d)),
            wo: g.param(&random(rng, d, d)),
        }
    }

    #[test]
    fn single_key_gets_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let w = weights(&mut g, &mut rng, 4);
        let q = g.constant(&random(&mut rng, 3, 4));
        let kv_t = random(&mut rng, 1, 4);
        let kv = g.constant(&kv_t);
        let att = multi_head_attention(&mut g, q, kv, kv, &w, 2, false).unwrap();
        for &p in &att.weights {
            assert!(g.value(p).iter().all(|&x| x == 1.0));
        }
        let vw = g.matmul(kv, w.wv).unwrap();
        let expected = g.matmul(vw, w.wo).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_abs_diff_eq!(
                    g.value(att.output)[r * 4 + c],
                    g.value(expected)[c],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn zero_queries_and_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let w = weights(&mut g, &mut rng, 4);
        let q = g.constant(&Tensor::zeros(vec![2, 4]));
        let k = g.constant(&Tensor::zeros(vec![5, 4]));
        let v = g.constant(&random(&mut rng, 5, 4));
        let att = multi_head_attention(&mut g, q, k, v, &w, 4, false).unwrap();
        for &p in &att.weights {
            assert!(g.value(p).iter().all(|&x| (x - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn hand_computed_single_head() {
        // d = 2, identity projections; queries [[1,0],[0,1]], keys/values [[1,0],[0,2]].
        let mut g = Graph::new();
        let id = Tensor::identity(2);
        let w = AttentionWeights {
            wq: g.constant(&id),
            wk: g.constant(&id),
            wv: g.constant(&id),
            wo: g.constant(&id),
        };
        let q = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let kv = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let att = multi_head_attention(&mut g, q, kv, kv, &w, 1, false).unwrap();
        let s = 1.0 / 2f64.sqrt();
        // row 0 scores: [1, 0]·s ; row 1 scores: [0, 2]·s
        let p0 = [s.exp() / (s.exp() + 1.0), 1.0 / (s.exp() + 1.0)];
        let e = (2.0 * s).exp();
        let p1 = [1.0 / (1.0 + e), e / (1.0 + e)];
        let expected = [p0[0], 2.0 * p0[1], p1[0], 2.0 * p1[1]];
        for (a, b) in g.value(att.output).iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let w = weights(&mut g, &mut rng, 6);
        let x = g.constant(&random(&mut rng, 2, 6));
        assert!(matches!(
            multi_head_attention(&mut g, x, x, x, &w, 4, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn one_head_matches_direct_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let (qt, kt, vt) = (random(&mut rng, 3, d), random(&mut rng, 5, d), random(&mut rng, 5, d));
        let ws: Vec<Tensor> = (0..4).map(|_| random(&mut rng, d, d)).collect();
        let mut g = Graph::new();
        let w = AttentionWeights {
            wq: g.constant(&ws[0]),
            wk: g.constant(&ws[1]),
            wv: g.constant(&ws[2]),
            wo: g.constant(&ws[3]),
        };
        let (q, k, v) = (g.constant(&qt), g.constant(&kt), g.constant(&vt));
        let att = multi_head_attention(&mut g, q, k, v, &w, 1, false).unwrap();

        let proj = |x: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
            (0..x.rows())
                .map(|i| {
                    (0..d)
                        .map(|j| (0..d).map(|p| x.at(i, p) * w.at(p, j)).sum())
                        .collect()
                })
                .collect()
        };
        let (qp, kp, vp) = (proj(&qt, &ws[0]), proj(&kt, &ws[1]), proj(&vt, &ws[2]));
        for i in 0..3 {
            let scores: Vec<f64> = (0..5)
                .map(|j| (0..d).map(|c| qp[i][c] * kp[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let ctx: Vec<f64> = (0..d)
                .map(|c| (0..5).map(|j| exps[j] / z * vp[j][c]).sum())
                .collect();
            for j in 0..d {
                let o: f64 = (0..d).map(|p| ctx[p] * ws[3].at(p, j)).sum();
                assert_abs_diff_eq!(g.value(att.output)[i * d + j], o, epsilon = 1e-10);
            }
        }
    }
}
