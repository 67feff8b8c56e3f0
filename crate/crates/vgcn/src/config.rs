//! Model, filter, and training configuration.
//!
//! Architectures are described by a JSON config file (layer list, widths,
//! activation placements) so hyperparameter sweeps are diffable artifacts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gcn,
    Gat,
    Vgcn,
    Vgat,
    Stgcn,
    Agcn,
    Vstgcn,
    Vagcn,
    UaEa,
    UaFmci,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Gat => "gat",
            ModelKind::Vgcn => "vgcn",
            ModelKind::Vgat => "vgat",
            ModelKind::Stgcn => "stgcn",
            ModelKind::Agcn => "agcn",
            ModelKind::Vstgcn => "vstgcn",
            ModelKind::Vagcn => "vagcn",
            ModelKind::UaEa => "ua-ea",
            ModelKind::UaFmci => "ua-fmci",
        }
    }

    /// Layers draw their outputs from parametrized Gaussians.
    pub fn is_variational(&self) -> bool {
        matches!(
            self,
            ModelKind::Vgcn
                | ModelKind::Vgat
                | ModelKind::Vstgcn
                | ModelKind::Vagcn
                | ModelKind::UaEa
                | ModelKind::UaFmci
        )
    }

    /// Consumes `[C, T, N]` sequences rather than `[N, C]` node features.
    pub fn is_spatiotemporal(&self) -> bool {
        matches!(
            self,
            ModelKind::Stgcn | ModelKind::Agcn | ModelKind::Vstgcn | ModelKind::Vagcn
        )
    }

    /// Exposes per-layer attention matrices for inspection and Monte Carlo
    /// integration.
    pub fn has_attention(&self) -> bool {
        !matches!(self, ModelKind::Gcn | ModelKind::Vgcn)
    }

    /// The deterministic architecture whose parameters form the μ-branch of
    /// this variational kind.
    pub fn deterministic_twin(&self) -> Option<ModelKind> {
        match self {
            ModelKind::Vgcn => Some(ModelKind::Gcn),
            ModelKind::Vgat | ModelKind::UaEa | ModelKind::UaFmci => Some(ModelKind::Gat),
            ModelKind::Vstgcn => Some(ModelKind::Stgcn),
            ModelKind::Vagcn => Some(ModelKind::Agcn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
    Softplus,
    /// Softmax over the last axis (per-row when applied to matrices).
    RowSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// `Λ ⊙ (1 − A)`: attention kept on non-edges, verbatim formulation.
    #[default]
    Complement,
    /// `Λ ⊙ A`: attention kept on edges.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// σ sub-layer mirrors the μ sub-layer elementwise.
    #[default]
    PerElement,
    /// One learnable scalar per sampling site, broadcast to the output.
    GlobalScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterRule {
    /// Verbatim two-branch form: the mean test keys on `variance ≤ l·mean`,
    /// the variance test on `mean ≤ l·variance`.
    #[default]
    AsWritten,
    /// Both outputs keyed on `variance ≤ l·mean`.
    Consistent,
}

/// Attention-filter settings: entries whose variance exceeds `limit` times
/// the scale of the mean are replaced by `replacement`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(with = "limit_serde")]
    pub limit: f64,
    pub replacement: f64,
    #[serde(default)]
    pub rule: FilterRule,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            limit: 1.0,
            replacement: 0.01,
            rule: FilterRule::AsWritten,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.limit.is_nan() || self.limit < 0.0 {
            return Err(Error::config(format!(
                "filter limit must be >= 0, got {}",
                self.limit
            )));
        }
        if !self.replacement.is_finite() || self.replacement < 0.0 {
            return Err(Error::config(format!(
                "filter replacement must be a finite value >= 0, got {}",
                self.replacement
            )));
        }
        Ok(())
    }
}

/// Parse a filter limit from a CLI string; `inf` selects no filtering.
pub fn parse_limit(s: &str) -> Result<f64> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" => Ok(f64::INFINITY),
        other => other
            .parse::<f64>()
            .map_err(|_| Error::config(format!("invalid filter limit: {s}"))),
    }
}

/// JSON has no literal for infinity, so the limit round-trips through the
/// string "inf" when infinite.
mod limit_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    struct LimitVisitor;

    impl Visitor<'_> for LimitVisitor {
        type Value = f64;
        fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.write_str("a number or the string \"inf\"")
        }
        fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
            Ok(v)
        }
        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }
        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }
        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
            match v.to_ascii_lowercase().as_str() {
                "inf" | "infinity" => Ok(f64::INFINITY),
                _ => v.parse().map_err(|_| E::custom("invalid limit string")),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        d.deserialize_any(LimitVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    /// Re-estimate uncertain attentions for every evaluated input (needed
    /// when attentions depend on the input).
    #[default]
    PerInput,
    /// Use the attentions stored at conversion time.
    Stored,
}

/// How uncertainty-aware models obtain their filtered attentions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default)]
    pub mode: CalibrationMode,
    /// Monte Carlo draws used to estimate Λ̃^μ, Λ̃^σ.
    pub samples: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            mode: CalibrationMode::PerInput,
            samples: 256,
        }
    }
}

fn default_attention_activation() -> Activation {
    Activation::RowSoftmax
}
fn default_temporal_kernel() -> usize {
    9
}
fn default_true() -> bool {
    true
}
fn default_calibration() -> CalibrationConfig {
    CalibrationConfig::default()
}

/// Architecture description. Loaded from JSON; unknown fields rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelKind,
    /// Feature channels of the input (columns of spatial features, leading
    /// axis of spatiotemporal tensors).
    pub in_channels: usize,
    /// Output width of each graph layer / block, in order.
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    /// Post-fusion activation ρ. Defaults to identity for spatial layers
    /// and relu for spatiotemporal blocks.
    #[serde(default)]
    pub activation: Option<Activation>,
    /// ρ_Λ applied to raw attention scores.
    #[serde(default = "default_attention_activation")]
    pub attention_activation: Activation,
    /// ρ^μ on the mean branch of variational layers.
    #[serde(default)]
    pub mu_activation: Activation,
    /// ρ^σ applied before the variance head.
    #[serde(default)]
    pub sigma_activation: Activation,
    /// ρ^N applied to the drawn sample.
    #[serde(default)]
    pub noise_activation: Activation,
    #[serde(default)]
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub variance_mode: VarianceMode,
    /// Temporal kernel width K_t (odd).
    #[serde(default = "default_temporal_kernel")]
    pub temporal_kernel: usize,
    /// Per-block temporal strides; empty means all 1.
    #[serde(default)]
    pub strides: Vec<usize>,
    /// Replace batch normalization with identity when false (desk tests).
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    /// Debug flag: substitute the mean for every sample.
    #[serde(default)]
    pub deterministic_eval: bool,
    /// Attention filter for uncertainty-aware models.
    #[serde(default)]
    pub filter: Option<FilterConfig>,
    #[serde(default = "default_calibration")]
    pub calibration: CalibrationConfig,
}

impl ModelConfig {
    /// Minimal constructor; remaining fields take their defaults.
    pub fn new(model: ModelKind, in_channels: usize, hidden: Vec<usize>, n_classes: usize) -> Self {
        ModelConfig {
            model,
            in_channels,
            hidden,
            n_classes,
            activation: None,
            attention_activation: default_attention_activation(),
            mu_activation: Activation::Identity,
            sigma_activation: Activation::Identity,
            noise_activation: Activation::Identity,
            mask_mode: MaskMode::default(),
            variance_mode: VarianceMode::default(),
            temporal_kernel: default_temporal_kernel(),
            strides: Vec::new(),
            batch_norm: true,
            deterministic_eval: false,
            filter: None,
            calibration: CalibrationConfig::default(),
        }
    }

    /// Effective post-fusion activation.
    pub fn rho(&self) -> Activation {
        self.activation.unwrap_or(if self.model.is_spatiotemporal() {
            Activation::Relu
        } else {
            Activation::Identity
        })
    }

    /// Stride of block `i`.
    pub fn stride(&self, i: usize) -> usize {
        self.strides.get(i).copied().unwrap_or(1)
    }

    /// Filter settings, defaulted for uncertainty-aware models.
    pub fn filter_config(&self) -> FilterConfig {
        self.filter.clone().unwrap_or_default()
    }

    /// Layer widths as (in, out) pairs.
    pub fn layer_widths(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len());
        let mut prev = self.in_channels;
        for &h in &self.hidden {
            widths.push((prev, h));
            prev = h;
        }
        widths
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be >= 1"));
        }
        if self.hidden.is_empty() {
            return Err(Error::config("hidden must list at least one layer width"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("layer widths must be >= 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be >= 2"));
        }
        if self.temporal_kernel == 0 || self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "temporal_kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if !self.strides.is_empty() && self.strides.len() != self.hidden.len() {
            return Err(Error::config(format!(
                "strides lists {} entries for {} blocks",
                self.strides.len(),
                self.hidden.len()
            )));
        }
        if self.strides.contains(&0) {
            return Err(Error::config("strides must be >= 1"));
        }
        if self.calibration.samples == 0 {
            return Err(Error::config("calibration samples must be >= 1"));
        }
        if let Some(f) = &self.filter {
            f.validate()?;
        }
        Ok(())
    }

    /// Parse and validate a JSON architecture description.
    pub fn from_json(text: &str) -> Result<ModelConfig> {
        let cfg: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::Malformed(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }
}

/// Load a model config from disk.
pub fn load_model_config(path: &std::path::Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)?;
    ModelConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_round_trips() {
        let cfg = ModelConfig::new(ModelKind::Gcn, 3, vec![8, 4], 2);
        let json = cfg.to_json();
        let back = ModelConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn kind_strings_are_kebab_case() {
        let json = serde_json::to_string(&ModelKind::UaFmci).unwrap();
        assert_eq!(json, "\"ua-fmci\"");
        let k: ModelKind = serde_json::from_str("\"vstgcn\"").unwrap();
        assert_eq!(k, ModelKind::Vstgcn);
    }

    #[test]
    fn defaults_match_documented_values() {
        let cfg = ModelConfig::from_json(
            r#"{"model":"gat","in_channels":2,"hidden":[4],"n_classes":2}"#,
        )
        .unwrap();
        assert_eq!(cfg.attention_activation, Activation::RowSoftmax);
        assert_eq!(cfg.rho(), Activation::Identity);
        assert_eq!(cfg.mask_mode, MaskMode::Complement);
        assert_eq!(cfg.temporal_kernel, 9);
        assert!(cfg.batch_norm);
        let f = FilterConfig::default();
        assert_eq!(f.limit, 1.0);
        assert_eq!(f.replacement, 0.01);
        assert_eq!(f.rule, FilterRule::AsWritten);
        let c = CalibrationConfig::default();
        assert_eq!(c.mode, CalibrationMode::PerInput);
        assert_eq!(c.samples, 256);
    }

    #[test]
    fn st_models_default_to_relu() {
        let cfg = ModelConfig::new(ModelKind::Stgcn, 2, vec![4], 2);
        assert_eq!(cfg.rho(), Activation::Relu);
        let cfg = ModelConfig::new(ModelKind::Vagcn, 2, vec![4], 2);
        assert_eq!(cfg.rho(), Activation::Relu);
    }

    #[test]
    fn unknown_field_rejected() {
        let err = ModelConfig::from_json(
            r#"{"model":"gcn","in_channels":2,"hidden":[4],"n_classes":2,"bogus":1}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Malformed(_)));
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut cfg = ModelConfig::new(ModelKind::Gcn, 2, vec![], 2);
        assert!(cfg.validate().is_err());
        cfg.hidden = vec![4];
        cfg.n_classes = 1;
        assert!(cfg.validate().is_err());
        cfg.n_classes = 2;
        cfg.temporal_kernel = 4;
        assert!(cfg.validate().is_err());
        cfg.temporal_kernel = 9;
        cfg.strides = vec![1, 2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn infinite_limit_survives_json() {
        let f = FilterConfig {
            limit: f64::INFINITY,
            replacement: 0.0,
            rule: FilterRule::Consistent,
        };
        let json = serde_json::to_string(&f).unwrap();
        let back: FilterConfig = serde_json::from_str(&json).unwrap();
        assert!(back.limit.is_infinite());
        assert_eq!(back.rule, FilterRule::Consistent);
    }

    #[test]
    fn parse_limit_accepts_inf_and_numbers() {
        assert!(parse_limit("inf").unwrap().is_infinite());
        assert!(parse_limit("Infinity").unwrap().is_infinite());
        assert_eq!(parse_limit("0.4").unwrap(), 0.4);
        assert!(parse_limit("nope").is_err());
    }

    #[test]
    fn filter_validation_bounds() {
        let mut f = FilterConfig {
            limit: -1.0,
            ..FilterConfig::default()
        };
        assert!(f.validate().is_err());
        f.limit = 0.0;
        f.replacement = -0.5;
        assert!(f.validate().is_err());
        f.replacement = 0.0;
        assert!(f.validate().is_ok());
    }

    #[test]
    fn twin_mapping() {
        assert_eq!(ModelKind::Vgat.deterministic_twin(), Some(ModelKind::Gat));
        assert_eq!(ModelKind::Vstgcn.deterministic_twin(), Some(ModelKind::Stgcn));
        assert_eq!(ModelKind::Gcn.deterministic_twin(), None);
        assert_eq!(ModelKind::UaFmci.deterministic_twin(), Some(ModelKind::Gat));
    }
}
