//! Independent checks: a label oracle for synthetic sequences, scalar
//! reference implementations of the attention arithmetic, and a
//! finite-difference probe of every differentiable layer.
//!
//! Everything here is deliberately written with plain loops over slices,
//! not through the graph ops it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::nn::LstmParams;
use crate::state::TaillightState;
use crate::synth::{stable_region, SceneParams};
use crate::temporal::{OutputHeadParams, TemporalAttnParams};
use crate::tensor::{Graph, Result, Tensor};

/// Lag of the highest positive autocorrelation peak, over lags 1..=n/2.
/// Ties resolve to the smallest lag. None when no positive peak exists
/// (constant or aperiodic series).
pub fn dominant_period(series: &[f64]) -> Option<usize> {
    let n = series.len();
    if n < 4 {
        return None;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let mut best: Option<(usize, f64)> = None;
    for lag in 1..=n / 2 {
        let c: f64 = (0..n - lag).map(|t| centered[t] * centered[t + lag]).sum();
        if best.map_or(true, |(_, bc)| c > bc) {
            best = Some((lag, c));
        }
    }
    match best {
        Some((lag, c)) if c > 1e-12 => Some(lag),
        _ => None,
    }
}

/// Recovers the taillight state of a rendered sequence from region
/// statistics alone: brake from the center bar staying bright in every
/// frame, turn signals from the red-channel range of each lamp, read in
/// regions that jitter cannot move off the shapes.
pub fn recover_label(frames: &[Image], scene: &SceneParams) -> Option<TaillightState> {
    if frames.len() < scene.blink_period {
        return None;
    }
    let series = |rect| -> Option<Vec<f64>> {
        let (x0, y0, x1, y1) = stable_region(rect, scene)?;
        frames.iter().map(|f| f.region_mean(0, x0, y0, x1, y1)).collect()
    };
    let bar = series(scene.center_bar)?;
    let brake_thresh = (scene.body_color[0] as f64 + scene.brake_color[0] as f64) / 2.0;
    let brake = bar.iter().all(|&v| v > brake_thresh);

    let blink_thresh = (scene.lamp_on[0] as f64 - scene.brake_color[0] as f64) / 2.0;
    let blinking = |s: &[f64]| {
        let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo > blink_thresh
    };
    let left = blinking(&series(scene.lamp_left)?);
    let right = blinking(&series(scene.lamp_right)?);
    Some(TaillightState::from_bits(brake, left, right))
}

// ---------------------------------------------------------------------------
// Scalar reference implementations.

/// d = W_dh h + W_dc tanh(c) + b, one timestep.
pub fn oracle_state_summary(h: &[f64], c: &[f64], p: &TemporalAttnParams<f64>) -> Vec<f64> {
    let n = h.len();
    let wh = p.w_d_h.data();
    let wc = p.w_d_c.data();
    let b = p.b_d_hc.data();
    (0..n)
        .map(|i| {
            let mut v = b[i];
            for j in 0..n {
                v += wh[i * n + j] * h[j] + wc[i * n + j] * c[j].tanh();
            }
            v
        })
        .collect()
}

/// H' = beta H for row-major beta [t, t] and H [t, hidden].
pub fn oracle_mix_hidden(beta: &[f64], h: &[f64], t: usize, hidden: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * hidden];
    for r in 0..t {
        for k in 0..t {
            let w = beta[r * t + k];
            for i in 0..hidden {
                out[r * hidden + i] += w * h[k * hidden + i];
            }
        }
    }
    out
}

/// p = W_p tanh(W_ph h' + W_pc c + b_phc) + b_p, one timestep.
pub fn oracle_predict(hp: &[f64], c: &[f64], p: &OutputHeadParams<f64>) -> Vec<f64> {
    let n = hp.len();
    let classes = p.b_p.numel();
    let mut inner = vec![0.0; n];
    for i in 0..n {
        let mut v = p.b_p_hc.data()[i];
        for j in 0..n {
            v += p.w_p_h.data()[i * n + j] * hp[j] + p.w_p_c.data()[i * n + j] * c[j];
        }
        inner[i] = v.tanh();
    }
    (0..classes)
        .map(|k| {
            let mut v = p.b_p.data()[k];
            for j in 0..n {
                v += p.w_p.data()[k * n + j] * inner[j];
            }
            v
        })
        .collect()
}

/// One LSTM step from the gate equations.
pub fn oracle_lstm_step(
    z: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmParams<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let hidden = p.hidden_size();
    let x: Vec<f64> = z.iter().chain(h_prev).copied().collect();
    let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
    let gate = |w: &Tensor<f64>, b: &Tensor<f64>, i: usize| {
        let cols = x.len();
        let mut v = b.data()[i];
        for j in 0..cols {
            v += w.data()[i * cols + j] * x[j];
        }
        v
    };
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    for i in 0..hidden {
        let ig = sigma(gate(&p.w_i, &p.b_i, i));
        let fg = sigma(gate(&p.w_f, &p.b_f, i));
        let gg = gate(&p.w_g, &p.b_g, i).tanh();
        let og = sigma(gate(&p.w_o, &p.b_o, i));
        c[i] = fg * c_prev[i] + ig * gg;
        h[i] = og * c[i].tanh();
    }
    (h, c)
}

/// Mean of the ceil(ratio * B) largest losses; ties broken by index so the
/// selection is deterministic.
pub fn oracle_bootstrap(losses: &[f64], ratio: f64) -> f64 {
    let k = ((ratio * losses.len() as f64).ceil() as usize).clamp(1, losses.len());
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| {
        losses[b]
            .partial_cmp(&losses[a])
            .expect("losses are finite")
            .then(a.cmp(&b))
    });
    idx[..k].iter().map(|&i| losses[i]).sum::<f64>() / k as f64
}

// ---------------------------------------------------------------------------
// Finite-difference gradient suite.

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const PROBES: usize = 24;

fn rand_leaf(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-0.9..0.9)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>> + 'a;

/// Checks analytic gradients of `build`'s scalar output against central
/// differences at `probes` random coordinates of the watched leaves.
fn check_case(
    name: &str,
    leaves: &[Tensor<f64>],
    probes: usize,
    rng: &mut ChaCha8Rng,
    build: &Builder,
) -> ProbeReport {
    let mut g = Graph::new();
    let watched: Vec<Tensor<f64>> = leaves.iter().map(|t| g.watch(t)).collect();
    let loss = build(&mut g, &watched).expect("forward pass");
    let grads = g.backward(&loss).expect("backward pass");
    let analytic: Vec<Vec<f64>> = watched
        .iter()
        .map(|t| {
            grads
                .get(t)
                .expect("watched leaf has a gradient")
                .data()
                .to_vec()
        })
        .collect();

    let eval = |li: usize, ci: usize, delta: f64| -> f64 {
        let mut modified: Vec<Tensor<f64>> = leaves.to_vec();
        let mut data = modified[li].data().to_vec();
        data[ci] += delta;
        modified[li] = Tensor::from_vec(modified[li].shape(), data).expect("same shape");
        let mut g = Graph::new();
        build(&mut g, &modified).expect("forward pass").item()
    };

    let mut max_rel = 0.0f64;
    for _ in 0..probes {
        let li = rng.random_range(0..leaves.len());
        let ci = rng.random_range(0..leaves[li].numel());
        let numeric = (eval(li, ci, FD_STEP) - eval(li, ci, -FD_STEP)) / (2.0 * FD_STEP);
        let ana = analytic[li][ci];
        let rel = (ana - numeric).abs() / (ana.abs() + numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    ProbeReport {
        name: name.to_string(),
        probes,
        max_rel_err: max_rel,
        tolerance: FD_TOL,
    }
}

/// Scalarize against a fixed weight tensor so every output element enters
/// the loss with a distinct coefficient.
fn dot_loss(g: &mut Graph<f64>, y: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    let prod = g.mul(y, w)?;
    g.sum_all(&prod)
}

/// Runs finite-difference checks over every layer type. Deterministic in
/// `seed`.
pub fn fd_gradient_suite(seed: u64) -> Vec<ProbeReport> {
    use crate::model::{forward_chunk, ModelConfig, ModelParams, StageMode};
    use crate::nn::{self, LstmState};
    use crate::spatial::{self, SpatialAttnParams};
    use crate::temporal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // Batched strided padded convolution.
    {
        let leaves = [
            rand_leaf(&[2, 3, 7, 7], &mut rng),
            rand_leaf(&[4, 3, 3, 3], &mut rng),
        ];
        let w = rand_leaf(&[2, 4, 4, 4], &mut rng);
        reports.push(check_case("conv2d", &leaves, PROBES, &mut rng, &|g, l| {
            let y = g.conv2d(&l[0], &l[1], 2, 1)?;
            dot_loss(g, &y, &w)
        }));
    }

    // Fully connected layer with tanh.
    {
        let leaves = [
            rand_leaf(&[5, 7], &mut rng),
            rand_leaf(&[7], &mut rng),
            rand_leaf(&[5], &mut rng),
        ];
        let w = rand_leaf(&[5], &mut rng);
        reports.push(check_case("matmul_fc", &leaves, PROBES, &mut rng, &|g, l| {
            let y = g.matmul(&l[0], &l[1])?;
            let y = g.add(&y, &l[2])?;
            let y = g.tanh(&y)?;
            dot_loss(g, &y, &w)
        }));
    }

    // Residual stage: two 3x3 convs, projection skip, relu.
    {
        let leaves = [
            rand_leaf(&[3, 8, 8], &mut rng),
            rand_leaf(&[5, 3, 3, 3], &mut rng),
            rand_leaf(&[5], &mut rng),
            rand_leaf(&[5, 5, 3, 3], &mut rng),
            rand_leaf(&[5], &mut rng),
            rand_leaf(&[5, 3, 1, 1], &mut rng),
            rand_leaf(&[5], &mut rng),
        ];
        let w = rand_leaf(&[5, 4, 4], &mut rng);
        reports.push(check_case(
            "residual_stage",
            &leaves,
            PROBES,
            &mut rng,
            &|g, l| {
                let bias = |g: &mut Graph<f64>, y: &Tensor<f64>, b: &Tensor<f64>| {
                    let b3 = g.reshape(b, &[b.numel(), 1, 1])?;
                    g.add(y, &b3)
                };
                let y = g.conv2d(&l[0], &l[1], 2, 1)?;
                let y = bias(g, &y, &l[2])?;
                let y = g.relu(&y)?;
                let y = g.conv2d(&y, &l[3], 1, 1)?;
                let y = bias(g, &y, &l[4])?;
                let skip = g.conv2d(&l[0], &l[5], 2, 0)?;
                let skip = bias(g, &skip, &l[6])?;
                let sum = g.add(&y, &skip)?;
                let out = g.relu(&sum)?;
                dot_loss(g, &out, &w)
            },
        ));
    }

    // LSTM cell: all parameters plus input and both states.
    {
        let hidden = 4;
        let feat = 3;
        let cols = feat + hidden;
        let leaves = [
            rand_leaf(&[feat], &mut rng),
            rand_leaf(&[hidden], &mut rng),
            rand_leaf(&[hidden], &mut rng),
            rand_leaf(&[hidden, cols], &mut rng),
            rand_leaf(&[hidden], &mut rng),
            rand_leaf(&[hidden, cols], &mut rng),
            rand_leaf(&[hidden], &mut rng),
            rand_leaf(&[hidden, cols], &mut rng),
            rand_leaf(&[hidden], &mut rng),
            rand_leaf(&[hidden, cols], &mut rng),
            rand_leaf(&[hidden], &mut rng),
        ];
        let wh = rand_leaf(&[hidden], &mut rng);
        let wc = rand_leaf(&[hidden], &mut rng);
        reports.push(check_case("lstm_step", &leaves, PROBES, &mut rng, &|g, l| {
            let p = LstmParams {
                w_i: l[3].clone(),
                b_i: l[4].clone(),
                w_f: l[5].clone(),
                b_f: l[6].clone(),
                w_g: l[7].clone(),
                b_g: l[8].clone(),
                w_o: l[9].clone(),
                b_o: l[10].clone(),
            };
            let prev = LstmState {
                h: l[1].clone(),
                c: l[2].clone(),
            };
            let next = nn::lstm_step(g, &l[0], &prev, &p)?;
            let a = dot_loss(g, &next.h, &wh)?;
            let b = dot_loss(g, &next.c, &wc)?;
            g.add(&a, &b)
        }));
    }

    // Spatial attention: scores, softmax over the grid, reweighting.
    {
        let d = 3;
        let grid = 3;
        let hidden = 4;
        let k = 5;
        let leaves = [
            rand_leaf(&[d, grid, grid], &mut rng),
            rand_leaf(&[hidden], &mut rng),
            rand_leaf(&[d, d, 1, 1], &mut rng),
            rand_leaf(&[1, d, 1, 1], &mut rng),
            rand_leaf(&[k, 1], &mut rng),
            rand_leaf(&[k, hidden], &mut rng),
            rand_leaf(&[k], &mut rng),
            rand_leaf(&[1, k], &mut rng),
            rand_leaf(&[1], &mut rng),
        ];
        let w = rand_leaf(&[d, grid, grid], &mut rng);
        reports.push(check_case(
            "spatial_attention",
            &leaves,
            PROBES,
            &mut rng,
            &|g, l| {
                let p = SpatialAttnParams {
                    phi1: l[2].clone(),
                    phi2: l[3].clone(),
                    w_a_z: l[4].clone(),
                    w_a_h: l[5].clone(),
                    b_a_zh: l[6].clone(),
                    w_a: l[7].clone(),
                    b_a: l[8].clone(),
                };
                let scores = spatial::spatial_scores(g, &l[0], &l[1], &p)?;
                let alpha = spatial::spatial_weights(g, &scores)?;
                let out = spatial::apply_spatial(g, &l[0], &alpha)?;
                dot_loss(g, &out, &w)
            },
        ));
    }

    // Temporal attention: summaries, row softmax, mixing.
    {
        let t = 4;
        let hidden = 5;
        let leaves = [
            rand_leaf(&[t, hidden], &mut rng),
            rand_leaf(&[t, hidden], &mut rng),
            rand_leaf(&[hidden, hidden], &mut rng),
            rand_leaf(&[hidden, hidden], &mut rng),
            rand_leaf(&[hidden], &mut rng),
        ];
        let w = rand_leaf(&[t, hidden], &mut rng);
        reports.push(check_case(
            "temporal_attention",
            &leaves,
            PROBES,
            &mut rng,
            &|g, l| {
                let p = TemporalAttnParams {
                    w_d_h: l[2].clone(),
                    w_d_c: l[3].clone(),
                    b_d_hc: l[4].clone(),
                };
                let d = temporal::state_summaries(g, &l[0], &l[1], &p)?;
                let beta = temporal::temporal_weights(g, &d, &l[0])?;
                let mixed = temporal::mix_hidden(g, &beta, &l[0])?;
                dot_loss(g, &mixed, &w)
            },
        ));
    }

    // Output head into cross-entropy at the last timestep.
    {
        let t = 3;
        let hidden = 4;
        let classes = 8;
        let leaves = [
            rand_leaf(&[t, hidden], &mut rng),
            rand_leaf(&[t, hidden], &mut rng),
            rand_leaf(&[hidden, hidden], &mut rng),
            rand_leaf(&[hidden, hidden], &mut rng),
            rand_leaf(&[hidden], &mut rng),
            rand_leaf(&[classes, hidden], &mut rng),
            rand_leaf(&[classes], &mut rng),
        ];
        reports.push(check_case(
            "output_head",
            &leaves,
            PROBES,
            &mut rng,
            &|g, l| {
                let p = OutputHeadParams {
                    w_p_h: l[2].clone(),
                    w_p_c: l[3].clone(),
                    b_p_hc: l[4].clone(),
                    w_p: l[5].clone(),
                    b_p: l[6].clone(),
                };
                let logits = temporal::predict_all(g, &l[0], &l[1], &p)?;
                let last = g.row(&logits, t - 1)?;
                g.cross_entropy_logits(&last, 3)
            },
        ));
    }

    // Softmax cross-entropy on raw logits.
    {
        let leaves = [rand_leaf(&[8], &mut rng)];
        reports.push(check_case(
            "cross_entropy",
            &leaves,
            PROBES,
            &mut rng,
            &|g, l| g.cross_entropy_logits(&l[0], 2),
        ));
    }

    // Soft bootstrapped loss on raw logits.
    {
        let leaves = [rand_leaf(&[8], &mut rng)];
        reports.push(check_case(
            "soft_bootstrap",
            &leaves,
            PROBES,
            &mut rng,
            &|g, l| g.soft_bootstrap_loss(&l[0], 5, 0.8),
        ));
    }

    // Hard bootstrapped selection: mean of the k hardest chunk losses.
    {
        let chunks = 6;
        let leaves: Vec<Tensor<f64>> =
            (0..chunks).map(|_| rand_leaf(&[8], &mut rng)).collect();
        reports.push(check_case(
            "hard_bootstrap",
            &leaves,
            PROBES,
            &mut rng,
            &|g, l| {
                let losses: Vec<Tensor<f64>> = l
                    .iter()
                    .enumerate()
                    .map(|(i, t)| g.cross_entropy_logits(t, i % 8))
                    .collect::<Result<_>>()?;
                let values: Vec<f64> = losses.iter().map(Tensor::item).collect();
                let k = (0.3f64 * chunks as f64).ceil() as usize;
                let mut idx: Vec<usize> = (0..chunks).collect();
                idx.sort_by(|&a, &b| {
                    values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b))
                });
                let mut total = losses[idx[0]].clone();
                for &i in &idx[1..k] {
                    total = g.add(&total, &losses[i])?;
                }
                g.scale(&total, 1.0 / k as f64)
            },
        ));
    }

    // The assembled model: every parameter group through a chunk loss.
    {
        let cfg = ModelConfig::tiny();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let params: ModelParams<f64> = ModelParams::init(&cfg, &mut prng);
        let side = cfg.backbone.input_side;
        let frames: Vec<Tensor<f64>> = (0..cfg.window)
            .map(|_| {
                let data: Vec<f64> = (0..3 * side * side)
                    .map(|_| prng.random_range(0.0..1.0))
                    .collect();
                Tensor::from_vec(&[3, side, side], data).expect("frame shape")
            })
            .collect();
        let mut leaves = Vec::new();
        params.visit(&mut |_, t| leaves.push(t.clone()));
        let build = move |g: &mut Graph<f64>, l: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let mut iter = l.iter().cloned();
            let rebuilt = params.map(&mut |_, _| iter.next().expect("one leaf per tensor"));
            let out = forward_chunk(g, &cfg, &rebuilt, &frames, StageMode::Full, false)?;
            g.cross_entropy_logits(&out.logits_last, 6)
        };
        reports.push(check_case("full_model", &leaves, 20, &mut rng, &build));
    }

    reports
}
