//! Temporal attention over the chunk's LSTM trajectory and the output head.
//!
//! Hidden states for the whole chunk are stacked as rows of `H` ([T, hidden],
//! one row per timestep) and cell states as rows of `C`. Each timestep gets a
//! summary d_t = W_dh h_t + W_dc tanh(c_t) + b_dhc; relevance scores are the
//! inner products d_t . h_k, row-softmaxed into the mixing matrix beta, and
//! the mixed states H' = beta H feed the prediction head.

use rand_chacha::ChaCha8Rng;

use crate::nn::{scaled_uniform_init, LINEAR_GAIN};
use crate::tensor::{Element, Graph, Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct TemporalAttnParams<E: Element> {
    pub w_d_h: Tensor<E>,
    pub w_d_c: Tensor<E>,
    pub b_d_hc: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct OutputHeadParams<E: Element> {
    pub w_p_h: Tensor<E>,
    pub w_p_c: Tensor<E>,
    pub b_p_hc: Tensor<E>,
    pub w_p: Tensor<E>,
    pub b_p: Tensor<E>,
}

pub fn init_temporal<E: Element>(hidden: usize, rng: &mut ChaCha8Rng) -> TemporalAttnParams<E> {
    TemporalAttnParams {
        w_d_h: scaled_uniform_init(&[hidden, hidden], hidden, LINEAR_GAIN, rng),
        w_d_c: scaled_uniform_init(&[hidden, hidden], hidden, LINEAR_GAIN, rng),
        b_d_hc: Tensor::zeros(&[hidden]),
    }
}

pub fn init_head<E: Element>(
    hidden: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> OutputHeadParams<E> {
    OutputHeadParams {
        w_p_h: scaled_uniform_init(&[hidden, hidden], hidden, LINEAR_GAIN, rng),
        w_p_c: scaled_uniform_init(&[hidden, hidden], hidden, LINEAR_GAIN, rng),
        b_p_hc: Tensor::zeros(&[hidden]),
        w_p: scaled_uniform_init(&[classes, hidden], hidden, LINEAR_GAIN, rng),
        b_p: Tensor::zeros(&[classes]),
    }
}

fn check_square_state<E: Element>(
    op: &'static str,
    h: &Tensor<E>,
    c: &Tensor<E>,
) -> Result<()> {
    if h.shape().len() != 2 || h.shape() != c.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: h.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    Ok(())
}

/// Summaries for all timesteps at once: D = H W_dh^T + tanh(C) W_dc^T + b.
pub fn state_summaries<E: Element>(
    g: &mut Graph<E>,
    h_mat: &Tensor<E>,
    c_mat: &Tensor<E>,
    p: &TemporalAttnParams<E>,
) -> Result<Tensor<E>> {
    check_square_state("state_summaries", h_mat, c_mat)?;
    let wh = g.transpose(&p.w_d_h)?;
    let wc = g.transpose(&p.w_d_c)?;
    let hterm = g.matmul(h_mat, &wh)?;
    let ct = g.tanh(c_mat)?;
    let cterm = g.matmul(&ct, &wc)?;
    let s = g.add(&hterm, &cterm)?;
    g.add(&s, &p.b_d_hc)
}

/// Summary of a single timestep, shape `[hidden]`.
pub fn state_summary<E: Element>(
    g: &mut Graph<E>,
    h: &Tensor<E>,
    c: &Tensor<E>,
    p: &TemporalAttnParams<E>,
) -> Result<Tensor<E>> {
    let hterm = g.matmul(&p.w_d_h, h)?;
    let ct = g.tanh(c)?;
    let cterm = g.matmul(&p.w_d_c, &ct)?;
    let s = g.add(&hterm, &cterm)?;
    g.add(&s, &p.b_d_hc)
}

/// Row-stochastic mixing matrix: beta = softmax rows of D H^T.
pub fn temporal_weights<E: Element>(
    g: &mut Graph<E>,
    d_mat: &Tensor<E>,
    h_mat: &Tensor<E>,
) -> Result<Tensor<E>> {
    let ht = g.transpose(h_mat)?;
    let scores = g.matmul(d_mat, &ht)?;
    g.softmax(&scores, 1)
}

/// Convex mixture of hidden states: H' = beta H.
pub fn mix_hidden<E: Element>(
    g: &mut Graph<E>,
    beta: &Tensor<E>,
    h_mat: &Tensor<E>,
) -> Result<Tensor<E>> {
    g.matmul(beta, h_mat)
}

/// Class logits for every timestep: P = tanh(H' W_ph^T + C W_pc^T + b) W_p^T + b_p,
/// shape `[T, classes]`.
pub fn predict_all<E: Element>(
    g: &mut Graph<E>,
    h_mixed: &Tensor<E>,
    c_mat: &Tensor<E>,
    p: &OutputHeadParams<E>,
) -> Result<Tensor<E>> {
    check_square_state("predict_all", h_mixed, c_mat)?;
    let wh = g.transpose(&p.w_p_h)?;
    let wc = g.transpose(&p.w_p_c)?;
    let hterm = g.matmul(h_mixed, &wh)?;
    let cterm = g.matmul(c_mat, &wc)?;
    let s = g.add(&hterm, &cterm)?;
    let s = g.add(&s, &p.b_p_hc)?;
    let t = g.tanh(&s)?;
    let wp = g.transpose(&p.w_p)?;
    let logits = g.matmul(&t, &wp)?;
    g.add(&logits, &p.b_p)
}

/// Logits for a single timestep, shape `[classes]`.
pub fn predict<E: Element>(
    g: &mut Graph<E>,
    h_mixed: &Tensor<E>,
    c: &Tensor<E>,
    p: &OutputHeadParams<E>,
) -> Result<Tensor<E>> {
    let hterm = g.matmul(&p.w_p_h, h_mixed)?;
    let cterm = g.matmul(&p.w_p_c, c)?;
    let s = g.add(&hterm, &cterm)?;
    let s = g.add(&s, &p.b_p_hc)?;
    let t = g.tanh(&s)?;
    let logits = g.matmul(&p.w_p, &t)?;
    g.add(&logits, &p.b_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_init;
    use rand::SeedableRng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        uniform_init(&[rows, cols], 1, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identity_wdh_zero_wdc_returns_hidden_state() {
        let hidden = 4;
        let p = TemporalAttnParams::<f64> {
            w_d_h: Tensor::eye(hidden),
            w_d_c: Tensor::zeros(&[hidden, hidden]),
            b_d_hc: Tensor::zeros(&[hidden]),
        };
        let h = rand_mat(3, hidden, 1);
        let c = rand_mat(3, hidden, 2);
        let mut g = Graph::new();
        let d = state_summaries(&mut g, &h, &c, &p).unwrap();
        for (a, b) in d.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn summary_matrix_row_matches_single_step() {
        let hidden = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_temporal::<f64>(hidden, &mut rng);
        let h = rand_mat(4, hidden, 4);
        let c = rand_mat(4, hidden, 5);
        let mut g = Graph::new();
        let d_all = state_summaries(&mut g, &h, &c, &p).unwrap();
        for t in 0..4 {
            let ht =
                Tensor::from_vec(&[hidden], h.data()[t * hidden..(t + 1) * hidden].to_vec())
                    .unwrap();
            let ct =
                Tensor::from_vec(&[hidden], c.data()[t * hidden..(t + 1) * hidden].to_vec())
                    .unwrap();
            let d_one = state_summary(&mut g, &ht, &ct, &p).unwrap();
            for i in 0..hidden {
                let a = d_all.data()[t * hidden + i];
                let b = d_one.data()[i];
                assert!((a - b).abs() < 1e-12, "row {t} col {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn two_step_scores_zero_and_ln3_give_quarter_three_quarters() {
        // Row scores (0, ln 3) must softmax to (0.25, 0.75).
        let d = Tensor::from_vec(&[2, 2], vec![0.0, 3.0f64.ln(), 0.0, 3.0f64.ln()]).unwrap();
        let h = Tensor::eye(2);
        let mut g = Graph::new();
        let beta = temporal_weights(&mut g, &d, &h).unwrap();
        // D H^T with H = I reproduces D as the score matrix.
        assert!((beta.data()[0] - 0.25).abs() < 1e-12);
        assert!((beta.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn beta_rows_are_stochastic_for_random_inputs() {
        for seed in 0..100 {
            let d = rand_mat(6, 3, 200 + seed);
            let h = rand_mat(6, 3, 300 + seed);
            let mut g = Graph::new();
            let beta = temporal_weights(&mut g, &d, &h).unwrap();
            for row in 0..6 {
                let r = &beta.data()[row * 6..(row + 1) * 6];
                let sum: f64 = r.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(r.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn one_hot_rows_select_single_states() {
        let h = rand_mat(3, 4, 400);
        let beta = Tensor::from_vec(
            &[3, 3],
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let mut g = Graph::new();
        let mixed = mix_hidden(&mut g, &beta, &h).unwrap();
        let pick = [1usize, 2, 0];
        for (row, &src) in pick.iter().enumerate() {
            for i in 0..4 {
                assert_eq!(mixed.data()[row * 4 + i], h.data()[src * 4 + i]);
            }
        }
    }

    #[test]
    fn uniform_rows_average_states() {
        let h = rand_mat(4, 3, 500);
        let beta = Tensor::full(&[4, 4], 0.25);
        let mut g = Graph::new();
        let mixed = mix_hidden(&mut g, &beta, &h).unwrap();
        for i in 0..3 {
            let mean: f64 = (0..4).map(|t| h.data()[t * 3 + i]).sum::<f64>() / 4.0;
            for row in 0..4 {
                assert!((mixed.data()[row * 3 + i] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixing_is_permutation_equivariant() {
        // Permuting timesteps of D and H permutes beta rows/cols and the
        // mixed rows consistently.
        let t = 5;
        let hd = 3;
        let d = rand_mat(t, hd, 600);
        let h = rand_mat(t, hd, 601);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |m: &Tensor<f64>| {
            let mut out = vec![0.0; t * hd];
            for (dst, &src) in perm.iter().enumerate() {
                out[dst * hd..(dst + 1) * hd].copy_from_slice(&m.data()[src * hd..(src + 1) * hd]);
            }
            Tensor::from_vec(&[t, hd], out).unwrap()
        };
        let mut g = Graph::new();
        let beta = temporal_weights(&mut g, &d, &h).unwrap();
        let mixed = mix_hidden(&mut g, &beta, &h).unwrap();
        let beta_p = temporal_weights(&mut g, &permute(&d), &permute(&h)).unwrap();
        let mixed_p = mix_hidden(&mut g, &beta_p, &permute(&h)).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for i in 0..hd {
                let a = mixed_p.data()[dst * hd + i];
                let b = mixed.data()[src * hd + i];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_matrix_row_matches_single_step() {
        let hidden = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = init_head::<f64>(hidden, 8, &mut rng);
        let hp = rand_mat(3, hidden, 700);
        let c = rand_mat(3, hidden, 701);
        let mut g = Graph::new();
        let all = predict_all(&mut g, &hp, &c, &p).unwrap();
        assert_eq!(all.shape(), &[3, 8]);
        for t in 0..3 {
            let ht =
                Tensor::from_vec(&[hidden], hp.data()[t * hidden..(t + 1) * hidden].to_vec())
                    .unwrap();
            let ct =
                Tensor::from_vec(&[hidden], c.data()[t * hidden..(t + 1) * hidden].to_vec())
                    .unwrap();
            let one = predict(&mut g, &ht, &ct, &p).unwrap();
            for k in 0..8 {
                let a = all.data()[t * 8 + k];
                let b = one.data()[k];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn state_shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let p = init_temporal::<f64>(3, &mut ChaCha8Rng::seed_from_u64(8));
        let h = rand_mat(4, 3, 800);
        let c = rand_mat(5, 3, 801);
        assert!(state_summaries(&mut g, &h, &c, &p).is_err());
    }
}
