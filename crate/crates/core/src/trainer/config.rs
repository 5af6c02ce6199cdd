use crate::config::{parse_bool, parse_floats, parse_value, render_floats, KeyValue};
use crate::error::{Result, StsError};
use crate::features::NormKind;
use crate::model::{Ablation, MaskMode, ModelConfig};
use crate::multitask::LossConfig;
use crate::stc::{Components, DsaActivation, StcConfig};

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub t_window: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub lr0: f64,
    pub decay: f64,
    pub epochs: usize,
    /// Windows per optimizer step; `None` uses the whole training split.
    /// Sparse data benefits from large batches.
    pub batch_size: Option<usize>,
    /// Train : test proportions.
    pub split_ratio: (u32, u32),
    pub val_slots: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub norm_kind: NormKind,
    pub dsa_self_loop: bool,
    pub dsa_activation: DsaActivation,
    pub mask_mode: MaskMode,
    pub ablation: Ablation,
    /// Max global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Windows recorded on one tape; bounds memory, not results.
    pub windows_per_pass: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_window: 30,
            d: 16,
            layers: 3,
            heads: 8,
            lr0: 0.001,
            decay: 0.96,
            epochs: 100,
            batch_size: None,
            split_ratio: (7, 1),
            val_slots: 30,
            seed: 0,
            loss: LossConfig::default(),
            norm_kind: NormKind::ZScore,
            dsa_self_loop: true,
            dsa_activation: DsaActivation::Sigmoid,
            mask_mode: MaskMode::Predicted,
            ablation: Ablation::None,
            grad_clip: None,
            windows_per_pass: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_window == 0 {
            return Err(StsError::Config("t_window must be ≥ 1".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(StsError::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(StsError::Config(format!("lr must be positive, got {}", self.lr0)));
        }
        if self.batch_size == Some(0) {
            return Err(StsError::Config("batch_size must be ≥ 1".into()));
        }
        if self.split_ratio.0 == 0 {
            return Err(StsError::Config("split_ratio train part must be ≥ 1".into()));
        }
        if self.windows_per_pass == 0 {
            return Err(StsError::Config("windows_per_pass must be ≥ 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(StsError::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.stc().validate()?;
        self.loss.validate()
    }

    pub fn stc(&self) -> StcConfig {
        StcConfig {
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            dsa_self_loop: self.dsa_self_loop,
            dsa_activation: self.dsa_activation,
            components: Components::default(),
        }
    }

    pub fn model_config(&self, n_regions: usize, n_categories: usize) -> ModelConfig {
        ModelConfig {
            n_regions,
            n_categories,
            t_window: self.t_window,
            stc: self.stc(),
            ablation: self.ablation,
            loss: self.loss.clone(),
        }
    }
}

fn opt_to_string<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "t_window" => self.t_window = parse_value(key, value)?,
            "d" => self.d = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "lr" => self.lr0 = parse_value(key, value)?,
            "decay" => self.decay = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => {
                self.batch_size = match value {
                    "full" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "split_ratio" => {
                let (a, b) = value
                    .split_once(':')
                    .ok_or_else(|| StsError::Config(format!("split_ratio '{value}' is not 'a:b'")))?;
                self.split_ratio = (parse_value(key, a.trim())?, parse_value(key, b.trim())?);
            }
            "val_slots" => self.val_slots = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "eta" => {
                let v = parse_floats(key, value)?;
                self.loss.eta = v.try_into().map_err(|v: Vec<f64>| {
                    StsError::Config(format!("eta needs 4 weights, got {}", v.len()))
                })?;
            }
            "lambda_c" => self.loss.lambda_c = parse_value(key, value)?,
            "lambda_reg" => self.loss.lambda_reg = parse_value(key, value)?,
            "tau" => self.loss.tau = parse_value(key, value)?,
            "norm" => self.norm_kind = value.parse().map_err(|e| StsError::Config(format!("{e}")))?,
            "dsa_self_loop" => self.dsa_self_loop = parse_bool(key, value)?,
            "dsa_activation" => self.dsa_activation = value.parse()?,
            "mask_mode" => self.mask_mode = value.parse()?,
            "ablation" => self.ablation = value.parse()?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "off" | "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "windows_per_pass" => self.windows_per_pass = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("t_window", self.t_window.to_string()),
            ("d", self.d.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("lr", format!("{:?}", self.lr0)),
            ("decay", format!("{:?}", self.decay)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", opt_to_string(&self.batch_size, "full")),
            ("split_ratio", format!("{}:{}", self.split_ratio.0, self.split_ratio.1)),
            ("val_slots", self.val_slots.to_string()),
            ("seed", self.seed.to_string()),
            ("eta", render_floats(&self.loss.eta)),
            ("lambda_c", format!("{:?}", self.loss.lambda_c)),
            ("lambda_reg", format!("{:?}", self.loss.lambda_reg)),
            ("tau", format!("{:?}", self.loss.tau)),
            ("norm", self.norm_kind.to_string()),
            ("dsa_self_loop", self.dsa_self_loop.to_string()),
            ("dsa_activation", self.dsa_activation.to_string()),
            ("mask_mode", self.mask_mode.to_string()),
            ("ablation", self.ablation.to_string()),
            ("grad_clip", self.grad_clip.map_or_else(|| "off".into(), |c| format!("{c:?}"))),
            ("windows_per_pass", self.windows_per_pass.to_string()),
        ]
    }
}
