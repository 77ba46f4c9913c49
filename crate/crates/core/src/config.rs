//! Transfer configuration: every scalar knob of the sampling loop.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Scalar settings of a material transfer run.
///
/// Defaults: CFG scale 7.5, guidance for the first 30 of 50 steps,
/// background blending for the first 40, guider scales 700000 (self
/// attention) and 1500 (features), rescaling bounds `[0.33, 3]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Classifier-free guidance scale.
    pub w: f64,
    /// Material transfer force, the weight of the image-attention term.
    pub lam: f64,
    pub v_self: f64,
    pub v_feat: f64,
    /// Guidance gradients are added while `T - t < tau_g`.
    pub tau_g: usize,
    /// Background blending runs while `T - t < tau_m`.
    pub tau_m: usize,
    pub r_lower: f64,
    pub r_upper: f64,
    /// Number of DDIM steps.
    #[serde(rename = "T")]
    pub steps: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            w: 7.5,
            lam: 0.8,
            v_self: 700_000.0,
            v_feat: 1_500.0,
            tau_g: 30,
            tau_m: 40,
            r_lower: 0.33,
            r_upper: 3.0,
            steps: 50,
            seed: 0,
        }
    }
}

/// Field names accepted in config documents and override sets.
pub const CONFIG_KEYS: [&str; 10] = [
    "w", "lam", "v_self", "v_feat", "tau_g", "tau_m", "r_lower", "r_upper", "T", "seed",
];

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(name, "must be finite"))
            }
        };
        finite("w", self.w)?;
        for (name, v) in [("lam", self.lam), ("v_self", self.v_self), ("v_feat", self.v_feat)] {
            finite(name, v)?;
            if v < 0.0 {
                return Err(Error::config(name, format!("must be >= 0, got {v}")));
            }
        }
        finite("r_lower", self.r_lower)?;
        finite("r_upper", self.r_upper)?;
        if self.r_lower <= 0.0 {
            return Err(Error::config("r_lower", format!("must be > 0, got {}", self.r_lower)));
        }
        if self.r_lower > self.r_upper {
            return Err(Error::config(
                "r_lower",
                format!("must not exceed r_upper ({} > {})", self.r_lower, self.r_upper),
            ));
        }
        if self.steps == 0 {
            return Err(Error::config("T", "must be at least 1"));
        }
        if self.tau_g > self.steps {
            return Err(Error::config("tau_g", format!("must lie in [0, T={}], got {}", self.steps, self.tau_g)));
        }
        if self.tau_m > self.steps {
            return Err(Error::config("tau_m", format!("must lie in [0, T={}], got {}", self.steps, self.tau_m)));
        }
        Ok(())
    }

    /// Applies `overrides` on top of `self` and validates the result.
    pub fn with_overrides(&self, overrides: &Map<String, Value>) -> Result<Self> {
        let mut doc = match serde_json::to_value(self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (key, value) in overrides {
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Error::UnknownConfigKey(key.clone()));
            }
            doc.insert(key.clone(), value.clone());
        }
        let cfg: TransferConfig = serde_json::from_value(Value::Object(doc)).map_err(|e| {
            Error::Config {
                field: overrides.keys().cloned().collect::<Vec<_>>().join(","),
                reason: e.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        match value {
            Value::Object(map) => make_config(&map),
            _ => Err(Error::Invalid("config document must be a JSON object".into())),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    /// Number of the current step counted from the start of sampling, `T - t`.
    pub fn steps_elapsed(&self, t: usize) -> usize {
        self.steps - t
    }

    pub fn guidance_active(&self, t: usize) -> bool {
        self.steps_elapsed(t) < self.tau_g
    }

    pub fn blending_active(&self, t: usize) -> bool {
        self.steps_elapsed(t) < self.tau_m
    }
}

/// Defaults with `overrides` applied; unknown keys and bound violations are
/// rejected with the offending field named.
pub fn make_config(overrides: &Map<String, Value>) -> Result<TransferConfig> {
    TransferConfig::default().with_overrides(overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn empty_overrides_give_defaults() {
        let cfg = make_config(&Map::new()).unwrap();
        assert_eq!(cfg.w, 7.5);
        assert_eq!(cfg.v_self, 700000.0);
        assert_eq!(cfg.v_feat, 1500.0);
        assert_eq!(cfg.r_lower, 0.33);
        assert_eq!(cfg.r_upper, 3.0);
        assert_eq!(cfg.tau_g, 30);
        assert_eq!(cfg.tau_m, 40);
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.lam, 0.8);
    }

    #[test]
    fn zero_force_is_valid() {
        let cfg = make_config(&obj(json!({"lam": 0}))).unwrap();
        assert_eq!(cfg.lam, 0.0);
    }

    #[test]
    fn inverted_bounds_name_the_field() {
        let err = make_config(&obj(json!({"r_lower": 5, "r_upper": 3}))).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "r_lower"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let err = make_config(&obj(json!({"guidance": 3}))).unwrap_err();
        assert!(matches!(err, Error::UnknownConfigKey(k) if k == "guidance"));
    }

    #[test]
    fn thresholds_bounded_by_steps() {
        assert!(make_config(&obj(json!({"T": 10}))).is_err());
        assert!(make_config(&obj(json!({"T": 10, "tau_g": 5, "tau_m": 10}))).is_ok());
        assert!(make_config(&obj(json!({"lam": -0.1}))).is_err());
        assert!(make_config(&obj(json!({"T": 0, "tau_g": 0, "tau_m": 0}))).is_err());
    }

    #[test]
    fn wrong_type_is_a_config_error() {
        assert!(matches!(
            make_config(&obj(json!({"tau_g": "thirty"}))),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn windows_follow_step_counts() {
        let cfg = TransferConfig::default();
        assert!(cfg.guidance_active(50));
        assert!(cfg.guidance_active(21));
        assert!(!cfg.guidance_active(20));
        assert!(cfg.blending_active(11));
        assert!(!cfg.blending_active(10));
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(
            w in -20.0f64..20.0,
            lam in 0.0f64..3.0,
            v_self in 0.0f64..1e7,
            v_feat in 0.0f64..1e5,
            steps in 1usize..200,
            tg in 0.0f64..=1.0,
            tm in 0.0f64..=1.0,
            lo in 0.01f64..5.0,
            span in 0.0f64..5.0,
            seed in any::<u64>(),
        ) {
            let cfg = TransferConfig {
                w, lam, v_self, v_feat,
                tau_g: (tg * steps as f64) as usize,
                tau_m: (tm * steps as f64) as usize,
                r_lower: lo,
                r_upper: lo + span,
                steps,
                seed,
            };
            cfg.validate().unwrap();
            let back = TransferConfig::from_json_str(&cfg.to_json_string()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
