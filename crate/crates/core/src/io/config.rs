//! TOML run configuration. Unknown keys are rejected, missing keys take
//! their defaults, and every error names the offending key path.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optimizer::RunConfig;

/// Parses and validates a config document.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let msg = e.into_inner().message().trim().to_string();
        Error::config(if key == "." { String::from("<root>") } else { key }, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Renders a config back to TOML; parsing the result gives the same config.
pub fn render_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::config("<root>", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PlacementMode;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config_str("").unwrap();
        let h = c.hyperparameters;
        assert_eq!((h.alpha, h.beta, h.iou_threshold, h.conf_threshold), (2.5, 0.01, 0.45, 0.4));
        assert_eq!(h.epochs, 600);
        assert_eq!(c.patch_resolution, 50);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn negative_alpha_is_a_range_error() {
        let err = parse_config_str("[hyperparameters]\nalpha = -1.0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "hyperparameters.alpha"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str("[placement]\nmode = \"on_target\"\nbogus = 1\n").unwrap_err();
        let Error::Config { key, message } = &err else { panic!("{err}") };
        assert!(key.starts_with("placement"), "{key}");
        assert!(message.contains("bogus"), "{message}");
    }

    #[test]
    fn type_mismatch_names_key() {
        let err = parse_config_str("seed = \"x\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "seed"), "{err}");
    }

    #[test]
    fn reordered_keys_hash_equal() {
        let a = parse_config_str("seed = 3\nbatch_size = 4\n[placement]\nmode = \"outside_target\"\nr_s = 0.3\n").unwrap();
        let b = parse_config_str("batch_size = 4\nseed = 3\n[placement]\nr_s = 0.3\nmode = \"outside_target\"\n").unwrap();
        assert_eq!(a.placement.mode, PlacementMode::OutsideTarget);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn any_single_change_moves_the_hash() {
        let base = RunConfig::default();
        let mut variants = Vec::new();
        let mut c = base.clone();
        c.seed = 1;
        variants.push(c);
        let mut c = base.clone();
        c.hyperparameters.alpha = 2.4;
        variants.push(c);
        let mut c = base.clone();
        c.transforms.rotation_max_deg = 10.0;
        variants.push(c);
        let mut c = base.clone();
        c.placement.r_d = 2.0;
        variants.push(c);
        let mut c = base.clone();
        c.dataset.n_test = 7;
        variants.push(c);
        for v in variants {
            assert_ne!(v.hash(), base.hash());
        }
        let mut c = base.clone();
        c.output_dir = "elsewhere".into();
        assert_eq!(c.hash(), base.hash());
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 42;
        c.placement.mode = PlacementMode::OutsideTarget;
        let back = parse_config_str(&render_config(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
