//! The full classifier: backbone head -> spatial attention -> backbone tail
//! -> LSTM across the window -> temporal attention -> class logits.
//!
//! Training is progressive. Stage 1 bypasses both attentions (uniform
//! spatial map, identity temporal mixing), stage 2 enables temporal
//! attention, stage 3 enables spatial attention as well. Parameter groups
//! that a stage leaves disabled keep their values and receive no gradient.

use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::nn::{
    self, BackboneConfig, BackboneParams, ConvParams, FcParams, LstmParams, LstmState,
    StageParams,
};
use crate::spatial::{self, SpatialAttnParams};
use crate::temporal::{self, OutputHeadParams, TemporalAttnParams};
use crate::tensor::{Element, Graph, Result, Tensor};

pub const NUM_CLASSES: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub hidden: usize,
    pub attn_hidden: usize,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            hidden: 256,
            attn_hidden: 64,
            window: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), DataError> {
        self.backbone.validate()?;
        if self.hidden == 0 || self.attn_hidden == 0 {
            return Err(DataError::invalid("hidden sizes must be positive"));
        }
        if self.window < 2 {
            return Err(DataError::invalid("window must cover at least two frames"));
        }
        Ok(())
    }

    /// A deliberately small model for unit tests.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_side: 16,
                stage_channels: vec![4, 6],
                split_l: 1,
                feature_dim: 10,
                },
            hidden: 12,
            attn_hidden: 5,
            window: 4,
        }
    }
}

/// Which attention mechanisms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageMode {
    /// CNN-LSTM only.
    Baseline,
    /// Temporal attention enabled.
    Temporal,
    /// Temporal and spatial attention enabled.
    Full,
}

impl StageMode {
    pub fn from_stage(stage: usize) -> Option<StageMode> {
        match stage {
            1 => Some(StageMode::Baseline),
            2 => Some(StageMode::Temporal),
            3 => Some(StageMode::Full),
            _ => None,
        }
    }

    pub fn stage(self) -> usize {
        match self {
            StageMode::Baseline => 1,
            StageMode::Temporal => 2,
            StageMode::Full => 3,
        }
    }

    pub fn enabled(self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone | ParamGroup::Lstm | ParamGroup::Head => true,
            ParamGroup::Temporal => self != StageMode::Baseline,
            ParamGroup::Spatial => self == StageMode::Full,
        }
    }

    /// Groups that this stage trains but the previous one did not.
    pub fn newly_enabled(self) -> &'static [ParamGroup] {
        match self {
            StageMode::Baseline => &[],
            StageMode::Temporal => &[ParamGroup::Temporal],
            StageMode::Full => &[ParamGroup::Spatial],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    Lstm,
    Spatial,
    Temporal,
    Head,
}

pub fn group_of(name: &str) -> ParamGroup {
    match name.split('.').next().expect("name is non-empty") {
        "backbone" => ParamGroup::Backbone,
        "lstm" => ParamGroup::Lstm,
        "spatial" => ParamGroup::Spatial,
        "temporal" => ParamGroup::Temporal,
        "head" => ParamGroup::Head,
        other => panic!("unknown parameter prefix {other}"),
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams<E: Element> {
    pub backbone: BackboneParams<E>,
    pub lstm: LstmParams<E>,
    pub spatial: SpatialAttnParams<E>,
    pub temporal: TemporalAttnParams<E>,
    pub head: OutputHeadParams<E>,
}

impl<E: Element> ModelParams<E> {
    /// Fresh parameters; the draw order is fixed so a seed pins every value.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams<E> {
        let backbone = nn::init_backbone(&cfg.backbone, rng);
        let lstm = nn::init_lstm(cfg.backbone.feature_dim, cfg.hidden, rng);
        let spatial = spatial::init_spatial(
            cfg.backbone.split_channels(),
            cfg.hidden,
            cfg.attn_hidden,
            rng,
        );
        let temporal = temporal::init_temporal(cfg.hidden, rng);
        let head = temporal::init_head(cfg.hidden, NUM_CLASSES, rng);
        ModelParams {
            backbone,
            lstm,
            spatial,
            temporal,
            head,
        }
    }

    /// Re-draws one group in place, consuming the same RNG stream a fresh
    /// init of that group would.
    pub fn reinit_group(&mut self, cfg: &ModelConfig, group: ParamGroup, rng: &mut ChaCha8Rng) {
        match group {
            ParamGroup::Backbone => self.backbone = nn::init_backbone(&cfg.backbone, rng),
            ParamGroup::Lstm => {
                self.lstm = nn::init_lstm(cfg.backbone.feature_dim, cfg.hidden, rng)
            }
            ParamGroup::Spatial => {
                self.spatial = spatial::init_spatial(
                    cfg.backbone.split_channels(),
                    cfg.hidden,
                    cfg.attn_hidden,
                    rng,
                )
            }
            ParamGroup::Temporal => self.temporal = temporal::init_temporal(cfg.hidden, rng),
            ParamGroup::Head => self.head = temporal::init_head(cfg.hidden, NUM_CLASSES, rng),
        }
    }

    /// Visits every tensor with its canonical name, in a fixed order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<E>)) {
        let conv = |f: &mut dyn FnMut(&str, &Tensor<E>), name: &str, p: &ConvParams<E>| {
            f(&format!("{name}.w"), &p.w);
            f(&format!("{name}.b"), &p.b);
        };
        conv(f, "backbone.stem", &self.backbone.stem);
        for (i, s) in self.backbone.stages.iter().enumerate() {
            conv(f, &format!("backbone.stage{i}.conv1"), &s.conv1);
            conv(f, &format!("backbone.stage{i}.conv2"), &s.conv2);
            conv(f, &format!("backbone.stage{i}.proj"), &s.proj);
        }
        f("backbone.fc.w", &self.backbone.fc.w);
        f("backbone.fc.b", &self.backbone.fc.b);
        f("lstm.w_i", &self.lstm.w_i);
        f("lstm.b_i", &self.lstm.b_i);
        f("lstm.w_f", &self.lstm.w_f);
        f("lstm.b_f", &self.lstm.b_f);
        f("lstm.w_g", &self.lstm.w_g);
        f("lstm.b_g", &self.lstm.b_g);
        f("lstm.w_o", &self.lstm.w_o);
        f("lstm.b_o", &self.lstm.b_o);
        f("spatial.phi1", &self.spatial.phi1);
        f("spatial.phi2", &self.spatial.phi2);
        f("spatial.w_a_z", &self.spatial.w_a_z);
        f("spatial.w_a_h", &self.spatial.w_a_h);
        f("spatial.b_a_zh", &self.spatial.b_a_zh);
        f("spatial.w_a", &self.spatial.w_a);
        f("spatial.b_a", &self.spatial.b_a);
        f("temporal.w_d_h", &self.temporal.w_d_h);
        f("temporal.w_d_c", &self.temporal.w_d_c);
        f("temporal.b_d_hc", &self.temporal.b_d_hc);
        f("head.w_p_h", &self.head.w_p_h);
        f("head.w_p_c", &self.head.w_p_c);
        f("head.b_p_hc", &self.head.b_p_hc);
        f("head.w_p", &self.head.w_p);
        f("head.b_p", &self.head.b_p);
    }

    /// Rebuilds the structure with each tensor replaced by `f(name, t)`.
    pub fn map(&self, f: &mut impl FnMut(&str, &Tensor<E>) -> Tensor<E>) -> ModelParams<E> {
        self.map_to(f)
    }

    /// Like [`map`](Self::map) but the replacement may change precision.
    pub fn map_to<F: Element>(
        &self,
        f: &mut impl FnMut(&str, &Tensor<E>) -> Tensor<F>,
    ) -> ModelParams<F> {
        let conv = |f: &mut dyn FnMut(&str, &Tensor<E>) -> Tensor<F>,
                    name: &str,
                    p: &ConvParams<E>| ConvParams {
            w: f(&format!("{name}.w"), &p.w),
            b: f(&format!("{name}.b"), &p.b),
        };
        let backbone = BackboneParams {
            stem: conv(f, "backbone.stem", &self.backbone.stem),
            stages: self
                .backbone
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| StageParams {
                    conv1: conv(f, &format!("backbone.stage{i}.conv1"), &s.conv1),
                    conv2: conv(f, &format!("backbone.stage{i}.conv2"), &s.conv2),
                    proj: conv(f, &format!("backbone.stage{i}.proj"), &s.proj),
                })
                .collect(),
            fc: FcParams {
                w: f("backbone.fc.w", &self.backbone.fc.w),
                b: f("backbone.fc.b", &self.backbone.fc.b),
            },
        };
        let lstm = LstmParams {
            w_i: f("lstm.w_i", &self.lstm.w_i),
            b_i: f("lstm.b_i", &self.lstm.b_i),
            w_f: f("lstm.w_f", &self.lstm.w_f),
            b_f: f("lstm.b_f", &self.lstm.b_f),
            w_g: f("lstm.w_g", &self.lstm.w_g),
            b_g: f("lstm.b_g", &self.lstm.b_g),
            w_o: f("lstm.w_o", &self.lstm.w_o),
            b_o: f("lstm.b_o", &self.lstm.b_o),
        };
        let spatial = SpatialAttnParams {
            phi1: f("spatial.phi1", &self.spatial.phi1),
            phi2: f("spatial.phi2", &self.spatial.phi2),
            w_a_z: f("spatial.w_a_z", &self.spatial.w_a_z),
            w_a_h: f("spatial.w_a_h", &self.spatial.w_a_h),
            b_a_zh: f("spatial.b_a_zh", &self.spatial.b_a_zh),
            w_a: f("spatial.w_a", &self.spatial.w_a),
            b_a: f("spatial.b_a", &self.spatial.b_a),
        };
        let temporal = TemporalAttnParams {
            w_d_h: f("temporal.w_d_h", &self.temporal.w_d_h),
            w_d_c: f("temporal.w_d_c", &self.temporal.w_d_c),
            b_d_hc: f("temporal.b_d_hc", &self.temporal.b_d_hc),
        };
        let head = OutputHeadParams {
            w_p_h: f("head.w_p_h", &self.head.w_p_h),
            w_p_c: f("head.w_p_c", &self.head.w_p_c),
            b_p_hc: f("head.b_p_hc", &self.head.b_p_hc),
            w_p: f("head.w_p", &self.head.w_p),
            b_p: f("head.b_p", &self.head.b_p),
        };
        ModelParams {
            backbone,
            lstm,
            spatial,
            temporal,
            head,
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name.to_string()));
        out
    }

    pub fn get(&self, name: &str) -> Option<Tensor<E>> {
        let mut found = None;
        self.visit(&mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Tensors watched on `g` for the groups a stage trains; everything
    /// else is left detached.
    pub fn watched(&self, g: &mut Graph<E>, mode: StageMode) -> ModelParams<E> {
        self.map(&mut |name, t| {
            if mode.enabled(group_of(name)) {
                g.watch(t)
            } else {
                t.clone()
            }
        })
    }

    pub fn cast<F: Element>(&self) -> ModelParams<F> {
        self.map_to(&mut |_, t| t.cast::<F>())
    }
}

/// Per-chunk forward outputs. Logits for every timestep are kept so the
/// trace and diagnostics can see them; the chunk prediction reads the last
/// row.
pub struct ChunkOutput<E: Element> {
    /// `[window, NUM_CLASSES]`.
    pub logits_all: Tensor<E>,
    /// `[NUM_CLASSES]`, the final timestep.
    pub logits_last: Tensor<E>,
    pub trace: Option<AttentionTrace>,
}

/// Detached attention record for export and diagnostics.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub grid: usize,
    /// One map per timestep, each `grid * grid`, rows-major.
    pub alphas: Vec<Vec<f64>>,
    pub window: usize,
    /// `window * window`, row t holding the mixing weights for step t.
    pub beta: Vec<f64>,
    /// `window * NUM_CLASSES`.
    pub logits: Vec<f64>,
    pub predicted: usize,
}

/// Runs one chunk through the network. `frames` must hold `window` tensors
/// of shape `[3, side, side]`.
pub fn forward_chunk<E: Element>(
    g: &mut Graph<E>,
    cfg: &ModelConfig,
    params: &ModelParams<E>,
    frames: &[Tensor<E>],
    mode: StageMode,
    want_trace: bool,
) -> Result<ChunkOutput<E>> {
    assert_eq!(frames.len(), cfg.window, "chunk length != window");
    let grid = cfg.backbone.grid_at(cfg.backbone.split_l);
    let uniform = spatial::uniform_alpha::<E>(grid);

    let mut state = LstmState::zeros(cfg.hidden);
    let mut h_rows: Vec<Tensor<E>> = Vec::with_capacity(cfg.window);
    let mut c_rows: Vec<Tensor<E>> = Vec::with_capacity(cfg.window);
    let mut alphas: Vec<Vec<f64>> = Vec::new();

    for x in frames {
        let z_l = nn::backbone_head(g, x, &params.backbone, &cfg.backbone)?;
        let alpha = if mode == StageMode::Full {
            let scores = spatial::spatial_scores(g, &z_l, &state.h, &params.spatial)?;
            spatial::spatial_weights(g, &scores)?
        } else {
            uniform.clone()
        };
        if want_trace {
            alphas.push(alpha.data().iter().map(|v| v.as_f64()).collect());
        }
        let weighted = spatial::apply_spatial(g, &z_l, &alpha)?;
        let z_f = nn::backbone_tail(g, &weighted, &params.backbone, &cfg.backbone)?;
        state = nn::lstm_step(g, &z_f, &state, &params.lstm)?;
        h_rows.push(g.reshape(&state.h, &[1, cfg.hidden])?);
        c_rows.push(g.reshape(&state.c, &[1, cfg.hidden])?);
    }

    let row_refs: Vec<&Tensor<E>> = h_rows.iter().collect();
    let h_mat = g.concat(&row_refs, 0)?;
    let row_refs: Vec<&Tensor<E>> = c_rows.iter().collect();
    let c_mat = g.concat(&row_refs, 0)?;

    let (h_mixed, beta_trace) = if mode == StageMode::Baseline {
        let beta = if want_trace {
            Tensor::<E>::eye(cfg.window).data().iter().map(|v| v.as_f64()).collect()
        } else {
            Vec::new()
        };
        (h_mat.clone(), beta)
    } else {
        let d_mat = temporal::state_summaries(g, &h_mat, &c_mat, &params.temporal)?;
        let beta = temporal::temporal_weights(g, &d_mat, &h_mat)?;
        let mixed = temporal::mix_hidden(g, &beta, &h_mat)?;
        let trace = if want_trace {
            beta.data().iter().map(|v| v.as_f64()).collect()
        } else {
            Vec::new()
        };
        (mixed, trace)
    };

    let logits_all = temporal::predict_all(g, &h_mixed, &c_mat, &params.head)?;
    let logits_last = g.row(&logits_all, cfg.window - 1)?;

    let trace = want_trace.then(|| AttentionTrace {
        grid,
        alphas: if alphas.is_empty() {
            vec![uniform.data().iter().map(|v| v.as_f64()).collect(); cfg.window]
        } else {
            alphas
        },
        window: cfg.window,
        beta: beta_trace,
        logits: logits_all.data().iter().map(|v| v.as_f64()).collect(),
        predicted: logits_last.argmax(),
    });

    Ok(ChunkOutput {
        logits_all,
        logits_last,
        trace,
    })
}

/// Frames of one preprocessed chunk as graph inputs.
pub fn frames_to_tensors<E: Element>(frames: &[Vec<f32>], side: usize) -> Vec<Tensor<E>> {
    frames
        .iter()
        .map(|f| {
            Tensor::from_vec(&[3, side, side], f.iter().map(|&v| E::from_f64(v as f64)).collect())
                .expect("frame length matches shape")
        })
        .collect()
}
