//! Flat `key = value` run configuration, and the key-value echo stored in
//! checkpoints.
//!
//! Config files use full-line `#` comments and dotted keys (model.*,
//! train.*, gen.*, scene.*). Every key is optional and falls back to the
//! struct default; an unrecognized or duplicated key is an error naming
//! the key and line, so a typo cannot silently train the wrong model.

use std::path::Path;
use std::str::FromStr;

use crate::error::DataError;
use crate::model::ModelConfig;
use crate::preprocess::AlignMode;
use crate::synth::{imbalanced_train_counts, GenConfig};
use crate::train::{LossKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
}

struct Row {
    line: usize,
    key: String,
    value: String,
    used: bool,
}

struct Kv {
    rows: Vec<Row>,
}

impl Kv {
    fn parse(text: &str) -> Result<Kv, DataError> {
        let mut rows: Vec<Row> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (k, v) = trimmed.split_once('=').ok_or(DataError::Config {
                line,
                detail: "expected `key = value`".into(),
            })?;
            let key = k.trim().to_string();
            let value = v.trim().to_string();
            if key.is_empty() {
                return Err(DataError::Config {
                    line,
                    detail: "empty key".into(),
                });
            }
            if let Some(prev) = rows.iter().find(|r| r.key == key) {
                return Err(DataError::Config {
                    line,
                    detail: format!("duplicate key `{key}`, first set on line {}", prev.line),
                });
            }
            rows.push(Row {
                line,
                key,
                value,
                used: false,
            });
        }
        Ok(Kv { rows })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        let row = self.rows.iter_mut().find(|r| r.key == key)?;
        row.used = true;
        Some((row.line, row.value.clone()))
    }

    fn parse_with<T>(
        &mut self,
        key: &str,
        default: T,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, DataError> {
        match self.take(key) {
            None => Ok(default),
            Some((line, value)) => parse(&value).map_err(|detail| DataError::Config {
                line,
                detail: format!("{key}: {detail}"),
            }),
        }
    }

    fn scalar<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, DataError> {
        self.parse_with(key, default, parse_scalar::<T>)
    }

    fn finish(self) -> Result<(), DataError> {
        match self.rows.iter().find(|r| !r.used) {
            Some(r) => Err(DataError::Config {
                line: r.line,
                detail: format!("unknown key `{}`", r.key),
            }),
            None => Ok(()),
        }
    }
}

fn parse_scalar<T: FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad value `{s}`"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{s}`")),
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| parse_scalar::<usize>(p.trim()))
        .collect()
}

fn parse_epochs(s: &str) -> Result<[usize; 3], String> {
    let v = parse_usize_list(s)?;
    v.try_into()
        .map_err(|_| "expected three comma-separated epoch counts".to_string())
}

fn parse_align(s: &str) -> Result<AlignMode, String> {
    match s {
        "identity" => Ok(AlignMode::Identity),
        "global_shift" => Ok(AlignMode::GlobalShift),
        _ => Err(format!("expected identity or global_shift, got `{s}`")),
    }
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "hard" => Ok(LossKind::Hard),
        "soft" => Ok(LossKind::Soft),
        _ => Err(format!("expected hard or soft, got `{s}`")),
    }
}

fn align_str(a: AlignMode) -> &'static str {
    match a {
        AlignMode::Identity => "identity",
        AlignMode::GlobalShift => "global_shift",
    }
}

fn loss_str(l: LossKind) -> &'static str {
    match l {
        LossKind::Hard => "hard",
        LossKind::Soft => "soft",
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn read_model(kv: &mut Kv, base: ModelConfig) -> Result<ModelConfig, DataError> {
    let mut m = base;
    m.backbone.input_side = kv.scalar("model.input_side", m.backbone.input_side)?;
    m.backbone.stage_channels = kv.parse_with(
        "model.stage_channels",
        m.backbone.stage_channels,
        parse_usize_list,
    )?;
    m.backbone.split_l = kv.scalar("model.split_l", m.backbone.split_l)?;
    m.backbone.feature_dim = kv.scalar("model.feature_dim", m.backbone.feature_dim)?;
    m.hidden = kv.scalar("model.hidden", m.hidden)?;
    m.attn_hidden = kv.scalar("model.attn_hidden", m.attn_hidden)?;
    m.window = kv.scalar("model.window", m.window)?;
    Ok(m)
}

fn read_train(kv: &mut Kv, base: TrainConfig) -> Result<TrainConfig, DataError> {
    let mut t = base;
    t.batch_size = kv.scalar("train.batch_size", t.batch_size)?;
    t.lr = kv.scalar("train.lr", t.lr)?;
    t.momentum = kv.scalar("train.momentum", t.momentum)?;
    t.epochs = kv.parse_with("train.epochs", t.epochs, parse_epochs)?;
    t.loss = kv.parse_with("train.loss", t.loss, parse_loss)?;
    t.bootstrap_ratio = kv.scalar("train.bootstrap_ratio", t.bootstrap_ratio)?;
    t.soft_beta = kv.scalar("train.soft_beta", t.soft_beta)?;
    t.clip_norm = kv.scalar("train.clip_norm", t.clip_norm)?;
    t.stride = kv.scalar("train.stride", t.stride)?;
    t.augment = kv.parse_with("train.augment", t.augment, parse_bool)?;
    t.align = kv.parse_with("train.align", t.align, parse_align)?;
    t.max_shift = kv.scalar("train.max_shift", t.max_shift)?;
    t.seed = kv.scalar("train.seed", t.seed)?;
    Ok(t)
}

pub fn parse_run_config(text: &str) -> Result<RunConfig, DataError> {
    let mut kv = Kv::parse(text)?;
    let mut cfg = RunConfig::default();
    cfg.model = read_model(&mut kv, cfg.model)?;
    cfg.train = read_train(&mut kv, cfg.train)?;

    let per_class = kv.scalar("gen.train_per_class", 0usize)?;
    if per_class > 0 {
        cfg.gen.train_per_class = [per_class; 8];
    }
    if kv.parse_with("gen.imbalanced", false, parse_bool)? {
        cfg.gen.train_per_class = imbalanced_train_counts();
    }
    let test_per_class = kv.scalar("gen.test_per_class", 0usize)?;
    if test_per_class > 0 {
        cfg.gen.test_per_class = [test_per_class; 8];
    }
    cfg.gen.frames_per_sequence =
        kv.scalar("gen.frames_per_sequence", cfg.gen.frames_per_sequence)?;

    let s = &mut cfg.gen.scene;
    s.side = kv.scalar("scene.side", s.side)?;
    s.blink_period = kv.scalar("scene.blink_period", s.blink_period)?;
    s.duty = kv.scalar("scene.duty", s.duty)?;
    s.noise_sigma = kv.scalar("scene.noise_sigma", s.noise_sigma)?;
    s.jitter_px = kv.scalar("scene.jitter_px", s.jitter_px)?;
    s.distractor_prob = kv.scalar("scene.distractor_prob", s.distractor_prob)?;
    s.distractor_size = kv.scalar("scene.distractor_size", s.distractor_size)?;

    kv.finish()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_run_config(&text)
}

pub fn model_kv(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("model.input_side".into(), cfg.backbone.input_side.to_string()),
        (
            "model.stage_channels".into(),
            join_usize(&cfg.backbone.stage_channels),
        ),
        ("model.split_l".into(), cfg.backbone.split_l.to_string()),
        (
            "model.feature_dim".into(),
            cfg.backbone.feature_dim.to_string(),
        ),
        ("model.hidden".into(), cfg.hidden.to_string()),
        ("model.attn_hidden".into(), cfg.attn_hidden.to_string()),
        ("model.window".into(), cfg.window.to_string()),
    ]
}

pub fn train_kv(cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("train.batch_size".into(), cfg.batch_size.to_string()),
        ("train.lr".into(), cfg.lr.to_string()),
        ("train.momentum".into(), cfg.momentum.to_string()),
        ("train.epochs".into(), join_usize(&cfg.epochs)),
        ("train.loss".into(), loss_str(cfg.loss).into()),
        (
            "train.bootstrap_ratio".into(),
            cfg.bootstrap_ratio.to_string(),
        ),
        ("train.soft_beta".into(), cfg.soft_beta.to_string()),
        ("train.clip_norm".into(), cfg.clip_norm.to_string()),
        ("train.stride".into(), cfg.stride.to_string()),
        ("train.augment".into(), cfg.augment.to_string()),
        ("train.align".into(), align_str(cfg.align).into()),
        ("train.max_shift".into(), cfg.max_shift.to_string()),
        ("train.seed".into(), cfg.seed.to_string()),
    ]
}

/// The config echo written into a stage checkpoint.
pub fn checkpoint_kv(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    stage: usize,
) -> Vec<(String, String)> {
    let mut kv = model_kv(mcfg);
    kv.extend(train_kv(tcfg));
    kv.push(("stage".into(), stage.to_string()));
    kv
}

fn echo_lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str, DataError> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| DataError::Checkpoint {
            detail: format!("config echo missing key {key}"),
        })
}

fn echo_parse<T>(
    pairs: &[(String, String)],
    key: &str,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, DataError> {
    let raw = echo_lookup(pairs, key)?;
    parse(raw).map_err(|detail| DataError::Checkpoint {
        detail: format!("config echo key {key}: {detail}"),
    })
}

/// Strict readers for the checkpoint echo: every key must be present.
pub fn model_from_kv(pairs: &[(String, String)]) -> Result<ModelConfig, DataError> {
    let mut m = ModelConfig::default();
    m.backbone.input_side = echo_parse(pairs, "model.input_side", parse_scalar)?;
    m.backbone.stage_channels = echo_parse(pairs, "model.stage_channels", parse_usize_list)?;
    m.backbone.split_l = echo_parse(pairs, "model.split_l", parse_scalar)?;
    m.backbone.feature_dim = echo_parse(pairs, "model.feature_dim", parse_scalar)?;
    m.hidden = echo_parse(pairs, "model.hidden", parse_scalar)?;
    m.attn_hidden = echo_parse(pairs, "model.attn_hidden", parse_scalar)?;
    m.window = echo_parse(pairs, "model.window", parse_scalar)?;
    Ok(m)
}

pub fn train_from_kv(pairs: &[(String, String)]) -> Result<TrainConfig, DataError> {
    Ok(TrainConfig {
        batch_size: echo_parse(pairs, "train.batch_size", parse_scalar)?,
        lr: echo_parse(pairs, "train.lr", parse_scalar)?,
        momentum: echo_parse(pairs, "train.momentum", parse_scalar)?,
        epochs: echo_parse(pairs, "train.epochs", parse_epochs)?,
        loss: echo_parse(pairs, "train.loss", parse_loss)?,
        bootstrap_ratio: echo_parse(pairs, "train.bootstrap_ratio", parse_scalar)?,
        soft_beta: echo_parse(pairs, "train.soft_beta", parse_scalar)?,
        clip_norm: echo_parse(pairs, "train.clip_norm", parse_scalar)?,
        stride: echo_parse(pairs, "train.stride", parse_scalar)?,
        augment: echo_parse(pairs, "train.augment", parse_bool)?,
        align: echo_parse(pairs, "train.align", parse_align)?,
        max_shift: echo_parse(pairs, "train.max_shift", parse_scalar)?,
        seed: echo_parse(pairs, "train.seed", parse_scalar)?,
    })
}

pub fn stage_from_kv(pairs: &[(String, String)]) -> Result<usize, DataError> {
    echo_parse(pairs, "stage", parse_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = parse_run_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let text = "\n# a comment\n  model.hidden   =  32 \n\n   # another\ntrain.lr=0.5\n";
        let cfg = parse_run_config(text).unwrap();
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.train.lr, 0.5);
    }

    #[test]
    fn unknown_key_reports_key_and_line() {
        let err = parse_run_config("model.hidden = 4\nmodel.hiden = 4\n").unwrap_err();
        match err {
            DataError::Config { line, detail } => {
                assert_eq!(line, 2);
                assert!(detail.contains("model.hiden"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_report_key_and_line() {
        let err = parse_run_config("\ntrain.lr = fast\n").unwrap_err();
        match err {
            DataError::Config { line, detail } => {
                assert_eq!(line, 2);
                assert!(detail.contains("train.lr"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_run_config("train.epochs = 1,2\n").is_err());
        assert!(parse_run_config("train.align = shifty\n").is_err());
        assert!(parse_run_config("train.augment = yes\n").is_err());
        assert!(parse_run_config("model.hidden\n").is_err());
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = parse_run_config("model.hidden = 4\nmodel.hidden = 8\n").unwrap_err();
        match err {
            DataError::Config { line, detail } => {
                assert_eq!(line, 2);
                assert!(detail.contains("line 1"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lists_and_enums_parse() {
        let text = "model.stage_channels = 8, 16\ntrain.epochs = 1,2,3\n\
                    train.loss = soft\ntrain.align = identity\ngen.imbalanced = true\n";
        let cfg = parse_run_config(text).unwrap();
        assert_eq!(cfg.model.backbone.stage_channels, vec![8, 16]);
        assert_eq!(cfg.train.epochs, [1, 2, 3]);
        assert_eq!(cfg.train.loss, LossKind::Soft);
        assert_eq!(cfg.train.align, AlignMode::Identity);
        assert_eq!(cfg.gen.train_per_class, imbalanced_train_counts());
    }

    #[test]
    fn per_class_counts_expand() {
        let cfg = parse_run_config("gen.train_per_class = 6\ngen.test_per_class = 2\n").unwrap();
        assert_eq!(cfg.gen.train_per_class, [6; 8]);
        assert_eq!(cfg.gen.test_per_class, [2; 8]);
    }

    #[test]
    fn checkpoint_echo_round_trips() {
        let mut m = ModelConfig::tiny();
        m.hidden = 17;
        let t = TrainConfig {
            lr: 0.035,
            epochs: [2, 1, 1],
            loss: LossKind::Soft,
            align: AlignMode::Identity,
            seed: 99,
            ..TrainConfig::default()
        };
        let kv = checkpoint_kv(&m, &t, 2);
        assert_eq!(model_from_kv(&kv).unwrap(), m);
        assert_eq!(train_from_kv(&kv).unwrap(), t);
        assert_eq!(stage_from_kv(&kv).unwrap(), 2);
    }

    #[test]
    fn echo_missing_key_is_a_checkpoint_error() {
        let kv = vec![("model.hidden".to_string(), "4".to_string())];
        assert!(matches!(
            model_from_kv(&kv),
            Err(DataError::Checkpoint { .. })
        ));
    }
}
