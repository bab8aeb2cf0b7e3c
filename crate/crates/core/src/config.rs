//! Training configuration as `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so
//! an empty file is a valid configuration. [`TrainConfig::to_text`] writes
//! every key and parses back to an equal value.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::baselines::CompressionMethod;
use crate::data::TokenMode;
use crate::dkp::DkpMode;
use crate::kron::FactorShapes;

/// Training recipes for doped layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Plain doping, no mitigation.
    One,
    /// β-scaled overlay with `λ_β|β|`.
    TwoA,
    /// α- and β-scaled with `λ_β|β| + λ_α|1/α|`.
    TwoB,
    TwoABcd,
    TwoBBcd,
    /// Plain doping with co-matrix row dropout.
    Cmr,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::One,
        Preset::TwoA,
        Preset::TwoB,
        Preset::TwoABcd,
        Preset::TwoBBcd,
        Preset::Cmr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::One => "1",
            Preset::TwoA => "2a",
            Preset::TwoB => "2b",
            Preset::TwoABcd => "2a+BCD",
            Preset::TwoBBcd => "2b+BCD",
            Preset::Cmr => "CMR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        Preset::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(s))
    }

    pub fn mode(self) -> DkpMode {
        match self {
            Preset::One | Preset::Cmr => DkpMode::Plain,
            Preset::TwoA | Preset::TwoABcd => DkpMode::BetaScaled,
            Preset::TwoB | Preset::TwoBBcd => DkpMode::AlphaBetaScaled,
        }
    }

    pub fn bcd(self) -> bool {
        matches!(self, Preset::TwoABcd | Preset::TwoBBcd)
    }

    pub fn cmr(self) -> bool {
        self == Preset::Cmr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OverlayInit {
    Zero,
    /// Same distribution as the dense weights.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub train_path: String,
    pub valid_path: String,
    pub test_path: String,
    pub vocab_mode: TokenMode,
    pub min_count: usize,

    pub hidden: usize,
    pub layers: usize,
    pub tie_weights: bool,

    pub method: CompressionMethod,
    pub factor: f64,
    /// Kronecker factor shapes; `None` picks the smallest factorization.
    pub kp_shapes: Option<FactorShapes>,
    /// Terminal sparsity; `None` derives it from `factor`.
    pub target_sparsity: Option<f64>,
    pub preset: Preset,

    /// Pruning ramp; `None` means 10% and 60% of the planned steps.
    pub prune_start: Option<u64>,
    pub prune_end: Option<u64>,
    pub prune_exponent: f64,
    pub base_keep_prob: f64,
    /// `None` means one epoch.
    pub bcd_period: Option<u64>,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,

    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub momentum: f64,
    /// 0 disables clipping.
    pub clip: f64,
    pub epochs: u32,
    pub batch: usize,
    pub bptt: usize,
    /// 0 means no cap beyond `epochs`.
    pub max_steps: u64,
    /// Steps between curve points.
    pub log_every: u64,
    /// Steps between validation passes; 0 means once per epoch.
    pub eval_every: u64,
    pub eval_batch: usize,
    /// Validation tokens used per pass; 0 means all.
    pub eval_tokens: usize,

    pub seed: u64,
    pub init_scale: f64,
    pub overlay_init: OverlayInit,

    pub sweep_factors: Vec<f64>,
    pub sweep_methods: Vec<CompressionMethod>,
    pub sweep_presets: Vec<Preset>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_path: String::new(),
            valid_path: String::new(),
            test_path: String::new(),
            vocab_mode: TokenMode::Char,
            min_count: 1,
            hidden: 128,
            layers: 1,
            tie_weights: false,
            method: CompressionMethod::Dkp,
            factor: 10.0,
            kp_shapes: None,
            target_sparsity: None,
            preset: Preset::One,
            prune_start: None,
            prune_end: None,
            prune_exponent: 3.0,
            base_keep_prob: 0.5,
            bcd_period: None,
            lambda_alpha: 1e-3,
            lambda_beta: 1e-3,
            optimizer: OptimizerChoice::Adam,
            lr: 2e-3,
            momentum: 0.9,
            clip: 5.0,
            epochs: 1,
            batch: 20,
            bptt: 35,
            max_steps: 0,
            log_every: 50,
            eval_every: 0,
            eval_batch: 10,
            eval_tokens: 0,
            seed: 1,
            init_scale: 0.05,
            overlay_init: OverlayInit::Zero,
            sweep_factors: vec![5.0, 10.0, 25.0],
            sweep_methods: vec![
                CompressionMethod::Dkp,
                CompressionMethod::Prune,
                CompressionMethod::Lmf,
                CompressionMethod::SmallBaseline,
            ],
            sweep_presets: vec![Preset::Cmr],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConfigError {
    /// Line without `=`, or an empty key.
    Syntax { line: usize, text: String },
    UnknownKey { line: usize, key: String },
    BadValue { line: usize, key: String, value: String, reason: String },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, text } => write!(f, "line {line}: expected `key = value`, got `{text}`"),
            ConfigError::UnknownKey { line, key } => write!(f, "line {line}: unknown key `{key}`"),
            ConfigError::BadValue { line, key, value, reason } => {
                write!(f, "line {line}: bad value `{value}` for `{key}`: {reason}")
            }
            ConfigError::Invalid(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ConfigError {}

/// Every recognized key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "train", "valid", "test", "vocab_mode", "min_count", "hidden", "layers", "tie_weights", "method",
    "factor", "kp_shapes", "target_sparsity", "preset", "prune_start", "prune_end", "prune_exponent",
    "base_keep_prob", "bcd_period", "lambda_alpha", "lambda_beta", "optimizer", "lr", "momentum", "clip",
    "epochs", "batch", "bptt", "max_steps", "log_every", "eval_every", "eval_batch", "eval_tokens", "seed",
    "init_scale", "overlay_init", "sweep_factors", "sweep_methods", "sweep_presets",
];

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn auto<T: FromStr>(v: &str) -> Result<Option<T>, String>
where
    T::Err: fmt::Display,
{
    if v == "auto" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn dims(v: &str) -> Option<(usize, usize)> {
    let (a, b) = v.split_once('x')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn fmt_opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), ToString::to_string)
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Parses configuration text over the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = match content.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => (k.trim(), v.trim()),
                _ => {
                    return Err(ConfigError::Syntax {
                        line,
                        text: content.to_string(),
                    })
                }
            };
            cfg.set(key, value).map_err(|e| match e {
                SetError::Unknown => ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                },
                SetError::Bad(reason) => ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    reason,
                },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one key from its text value; used for files and overrides.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set(key, value).map_err(|e| match e {
            SetError::Unknown => ConfigError::UnknownKey {
                line: 0,
                key: key.to_string(),
            },
            SetError::Bad(reason) => ConfigError::BadValue {
                line: 0,
                key: key.to_string(),
                value: value.to_string(),
                reason,
            },
        })
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), SetError> {
        match key {
            "train" => self.train_path = v.to_string(),
            "valid" => self.valid_path = v.to_string(),
            "test" => self.test_path = v.to_string(),
            "vocab_mode" => self.vocab_mode = TokenMode::parse(v).ok_or_else(|| bad("expected char or word"))?,
            "min_count" => self.min_count = num(v)?,
            "hidden" => self.hidden = num(v)?,
            "layers" => self.layers = num(v)?,
            "tie_weights" => self.tie_weights = boolean(v)?,
            "method" => {
                self.method = CompressionMethod::parse(v).ok_or_else(|| bad("expected dense, dkp, prune, lmf or small"))?
            }
            "factor" => self.factor = num(v)?,
            "kp_shapes" => {
                self.kp_shapes = if v == "auto" {
                    None
                } else {
                    let (b, c) = v.split_once(',').ok_or_else(|| bad("expected `auto` or `m1xn1,m2xn2`"))?;
                    Some(FactorShapes {
                        b: dims(b).ok_or_else(|| bad("expected `m1xn1,m2xn2`"))?,
                        c: dims(c).ok_or_else(|| bad("expected `m1xn1,m2xn2`"))?,
                    })
                }
            }
            "target_sparsity" => self.target_sparsity = auto(v)?,
            "preset" => self.preset = Preset::parse(v).ok_or_else(|| bad("expected 1, 2a, 2b, 2a+BCD, 2b+BCD or CMR"))?,
            "prune_start" => self.prune_start = auto(v)?,
            "prune_end" => self.prune_end = auto(v)?,
            "prune_exponent" => self.prune_exponent = num(v)?,
            "base_keep_prob" => self.base_keep_prob = num(v)?,
            "bcd_period" => self.bcd_period = auto(v)?,
            "lambda_alpha" => self.lambda_alpha = num(v)?,
            "lambda_beta" => self.lambda_beta = num(v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerChoice::Sgd,
                    "adam" => OptimizerChoice::Adam,
                    _ => return Err(bad("expected sgd or adam")),
                }
            }
            "lr" => self.lr = num(v)?,
            "momentum" => self.momentum = num(v)?,
            "clip" => self.clip = num(v)?,
            "epochs" => self.epochs = num(v)?,
            "batch" => self.batch = num(v)?,
            "bptt" => self.bptt = num(v)?,
            "max_steps" => self.max_steps = num(v)?,
            "log_every" => self.log_every = num(v)?,
            "eval_every" => self.eval_every = num(v)?,
            "eval_batch" => self.eval_batch = num(v)?,
            "eval_tokens" => self.eval_tokens = num(v)?,
            "seed" => self.seed = num(v)?,
            "init_scale" => self.init_scale = num(v)?,
            "overlay_init" => {
                self.overlay_init = match v {
                    "zero" => OverlayInit::Zero,
                    "uniform" => OverlayInit::Uniform,
                    _ => return Err(bad("expected zero or uniform")),
                }
            }
            "sweep_factors" => self.sweep_factors = list(v, num)?,
            "sweep_methods" => {
                self.sweep_methods = list(v, |s| CompressionMethod::parse(s).ok_or_else(|| format!("unknown method `{s}`")))?
            }
            "sweep_presets" => {
                self.sweep_presets = list(v, |s| Preset::parse(s).ok_or_else(|| format!("unknown preset `{s}`")))?
            }
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.factor >= 1.0 && self.factor.is_finite()) {
            return fail(format!("factor must be >= 1, got {}", self.factor));
        }
        if self.hidden == 0 || self.layers == 0 {
            return fail("hidden and layers must be positive".into());
        }
        if self.batch == 0 || self.bptt == 0 || self.eval_batch == 0 {
            return fail("batch, bptt and eval_batch must be positive".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        if let Some(s) = self.target_sparsity {
            if !unit(s) || s.is_nan() {
                return fail(format!("target_sparsity must be in [0, 1], got {s}"));
            }
        }
        if let (Some(a), Some(b)) = (self.prune_start, self.prune_end) {
            if b <= a {
                return fail(format!("prune_end ({b}) must exceed prune_start ({a})"));
            }
        }
        if !(self.prune_exponent > 0.0 && self.prune_exponent.is_finite()) {
            return fail("prune_exponent must be positive".into());
        }
        if !(self.base_keep_prob > 0.0 && self.base_keep_prob <= 1.0) {
            return fail(format!("base_keep_prob must be in (0, 1], got {}", self.base_keep_prob));
        }
        if self.bcd_period == Some(0) {
            return fail("bcd_period must be positive".into());
        }
        if !(self.lambda_alpha >= 0.0 && self.lambda_beta >= 0.0) {
            return fail("regularization weights must be non-negative".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.clip >= 0.0) {
            return fail("clip must be non-negative".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return fail("init_scale must be non-negative".into());
        }
        if let Some(f) = self.sweep_factors.iter().find(|f| !(**f >= 1.0 && f.is_finite())) {
            return fail(format!("sweep factor {f} is below 1"));
        }
        Ok(())
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("train", self.train_path.clone());
        put("valid", self.valid_path.clone());
        put("test", self.test_path.clone());
        put("vocab_mode", self.vocab_mode.name().into());
        put("min_count", self.min_count.to_string());
        put("hidden", self.hidden.to_string());
        put("layers", self.layers.to_string());
        put("tie_weights", self.tie_weights.to_string());
        put("method", self.method.name().into());
        put("factor", self.factor.to_string());
        put(
            "kp_shapes",
            self.kp_shapes
                .map_or_else(|| "auto".into(), |s| format!("{}x{},{}x{}", s.b.0, s.b.1, s.c.0, s.c.1)),
        );
        put("target_sparsity", fmt_opt(&self.target_sparsity));
        put("preset", self.preset.name().into());
        put("prune_start", fmt_opt(&self.prune_start));
        put("prune_end", fmt_opt(&self.prune_end));
        put("prune_exponent", self.prune_exponent.to_string());
        put("base_keep_prob", self.base_keep_prob.to_string());
        put("bcd_period", fmt_opt(&self.bcd_period));
        put("lambda_alpha", self.lambda_alpha.to_string());
        put("lambda_beta", self.lambda_beta.to_string());
        put(
            "optimizer",
            match self.optimizer {
                OptimizerChoice::Sgd => "sgd",
                OptimizerChoice::Adam => "adam",
            }
            .into(),
        );
        put("lr", self.lr.to_string());
        put("momentum", self.momentum.to_string());
        put("clip", self.clip.to_string());
        put("epochs", self.epochs.to_string());
        put("batch", self.batch.to_string());
        put("bptt", self.bptt.to_string());
        put("max_steps", self.max_steps.to_string());
        put("log_every", self.log_every.to_string());
        put("eval_every", self.eval_every.to_string());
        put("eval_batch", self.eval_batch.to_string());
        put("eval_tokens", self.eval_tokens.to_string());
        put("seed", self.seed.to_string());
        put("init_scale", self.init_scale.to_string());
        put(
            "overlay_init",
            match self.overlay_init {
                OverlayInit::Zero => "zero",
                OverlayInit::Uniform => "uniform",
            }
            .into(),
        );
        put("sweep_factors", join(&self.sweep_factors, ToString::to_string));
        put("sweep_methods", join(&self.sweep_methods, |m| m.name().into()));
        put("sweep_presets", join(&self.sweep_presets, |p| p.name().into()));
        out
    }
}

enum SetError {
    Unknown,
    Bad(String),
}

impl From<String> for SetError {
    fn from(s: String) -> Self {
        SetError::Bad(s)
    }
}

fn bad(msg: &str) -> SetError {
    SetError::Bad(msg.to_string())
}
