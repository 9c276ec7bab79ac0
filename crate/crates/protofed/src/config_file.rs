//! Flat key-value experiment configuration: one `key = value` per line,
//! dotted section prefixes (`attack.kind`), `#` comments. Command-line
//! overrides reuse the same key space.

use std::path::PathBuf;

use protofed_core::data::BlobSpec;
use protofed_core::fed::{AggMode, DatasetSpec, ExperimentConfig, HeBackend};
use protofed_core::threat::AttackKind;

/// Paths of an IDX-format dataset, used when `dataset.kind = idx`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdxPaths {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub max_n: usize,
}

/// The harness-level configuration: the core experiment config plus the
/// file-based dataset source the core cannot load itself.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub core: ExperimentConfig,
    pub idx: Option<IdxPaths>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            core: ExperimentConfig::default(),
            idx: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value '{value}' for key '{key}'"))
}

/// Apply one `key = value` override.
pub fn apply_override(cfg: &mut HarnessConfig, key: &str, value: &str) -> Result<(), String> {
    let c = &mut cfg.core;
    match key {
        "n_clients" => c.n_clients = parse(key, value)?,
        "rounds" => c.rounds = parse(key, value)?,
        "local_iters" => c.local_iters = parse(key, value)?,
        "batch_size" => c.batch_size = parse(key, value)?,
        "eta" => c.eta = parse(key, value)?,
        "lambda" => c.lambda = parse(key, value)?,
        "chi" => c.chi = parse(key, value)?,
        "cipher_max_iters" => c.cipher_max_iters = parse(key, value)?,
        "avg" => c.avg_classes = parse(key, value)?,
        "std" => c.std_classes = parse(key, value)?,
        "n_classes" => c.n_classes = parse(key, value)?,
        "proto_dim" => c.proto_dim = parse(key, value)?,
        "hidden_dim" => c.hidden_dim = parse(key, value)?,
        "seed" => c.seed = parse(key, value)?,
        "he_seed" => c.he_seed = parse(key, value)?,
        "mask_salt" => c.mask_salt = parse(key, value)?,
        "norm_tolerance" => c.norm_tolerance = parse(key, value)?,
        "test_fraction" => c.test_fraction = parse(key, value)?,
        "zero_min_policy" => {
            c.zero_min_policy = match value {
                "literal" => protofed_core::agg::ZeroMinPolicy::Literal,
                "only_if_below_threshold" => {
                    protofed_core::agg::ZeroMinPolicy::OnlyIfBelowThreshold
                }
                other => return Err(format!("unknown zero_min_policy '{other}'")),
            }
        }
        "he_backend" => {
            c.he_backend = match value {
                "simulated" => HeBackend::Simulated,
                other => return Err(format!("unsupported he_backend '{other}'")),
            }
        }
        "agg_mode" => {
            c.agg_mode = match value {
                "ppfpl" => AggMode::Ppfpl,
                "mean_no_filter" => AggMode::MeanNoFilter,
                "plaintext_reference" => AggMode::PlaintextReference,
                other => return Err(format!("unknown agg_mode '{other}'")),
            }
        }
        "attack.kind" => {
            c.attack.kind = match value {
                "none" => AttackKind::None,
                "feature" => AttackKind::Feature,
                "label" => AttackKind::Label,
                "dynamic" => AttackKind::Dynamic,
                "amplify" => AttackKind::Amplify,
                other => return Err(format!("unknown attack.kind '{other}'")),
            }
        }
        "attack.fraction" => c.attack.fraction = parse(key, value)?,
        "attack.amplify_factor" => c.attack.amplify_factor = parse(key, value)?,
        "attack.seed" => c.attack.seed = parse(key, value)?,
        "dataset.kind" => match value {
            "blobs" => {
                if !matches!(c.dataset, DatasetSpec::Blobs(_)) {
                    c.dataset = DatasetSpec::Blobs(BlobSpec::default());
                }
                cfg.idx = None;
            }
            "idx" => {
                c.dataset = DatasetSpec::External;
                cfg.idx.get_or_insert_with(IdxPaths::default);
            }
            other => return Err(format!("unknown dataset.kind '{other}'")),
        },
        "dataset.dim" | "dataset.samples_per_class" | "dataset.radius" | "dataset.sigma"
        | "dataset.seed" => {
            let DatasetSpec::Blobs(spec) = &mut c.dataset else {
                return Err(format!("'{key}' applies only to dataset.kind = blobs"));
            };
            match key {
                "dataset.dim" => spec.dim = parse(key, value)?,
                "dataset.samples_per_class" => spec.samples_per_class = parse(key, value)?,
                "dataset.radius" => spec.radius = parse(key, value)?,
                "dataset.sigma" => spec.sigma = parse(key, value)?,
                "dataset.seed" => spec.seed = parse(key, value)?,
                _ => unreachable!(),
            }
        }
        "dataset.images" | "dataset.labels" | "dataset.max_n" => {
            let idx = cfg
                .idx
                .as_mut()
                .ok_or_else(|| format!("'{key}' requires dataset.kind = idx first"))?;
            match key {
                "dataset.images" => idx.images = PathBuf::from(value),
                "dataset.labels" => idx.labels = PathBuf::from(value),
                "dataset.max_n" => idx.max_n = parse(key, value)?,
                _ => unreachable!(),
            }
        }
        other => return Err(format!("unknown config key '{other}'")),
    }
    Ok(())
}

/// Keep dependent fields consistent after all overrides are in.
pub fn finalize(cfg: &mut HarnessConfig) {
    if let DatasetSpec::Blobs(spec) = &mut cfg.core.dataset {
        spec.n_classes = cfg.core.n_classes;
    }
}

/// Parse a whole config file body over the defaults.
pub fn parse_config_text(text: &str) -> Result<HarnessConfig, String> {
    let mut cfg = HarnessConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected 'key = value'", lineno + 1));
        };
        apply_override(&mut cfg, key.trim(), value.trim())
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
    }
    finalize(&mut cfg);
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_keys_and_sections() {
        let text = "\
# experiment
n_clients = 12
rounds = 7
lambda = 0.5
attack.kind = label   # section key
attack.fraction = 0.3
";
        let cfg = parse_config_text(text).unwrap();
        assert_eq!(cfg.core.n_clients, 12);
        assert_eq!(cfg.core.rounds, 7);
        assert_eq!(cfg.core.lambda, 0.5);
        assert_eq!(cfg.core.attack.kind, AttackKind::Label);
        assert_eq!(cfg.core.attack.fraction, 0.3);
    }

    #[test]
    fn n_classes_propagates_into_blob_spec() {
        let cfg = parse_config_text("n_classes = 4\n").unwrap();
        let DatasetSpec::Blobs(spec) = &cfg.core.dataset else {
            panic!("expected blobs");
        };
        assert_eq!(spec.n_classes, 4);
    }

    #[test]
    fn unknown_key_is_reported_with_line() {
        let err = parse_config_text("bogus = 1\n").unwrap_err();
        assert!(err.contains("line 1") && err.contains("bogus"));
    }

    #[test]
    fn idx_dataset_requires_kind_first() {
        let mut cfg = HarnessConfig::default();
        assert!(apply_override(&mut cfg, "dataset.images", "x").is_err());
        apply_override(&mut cfg, "dataset.kind", "idx").unwrap();
        apply_override(&mut cfg, "dataset.images", "imgs.idx").unwrap();
        apply_override(&mut cfg, "dataset.max_n", "100").unwrap();
        assert_eq!(cfg.idx.as_ref().unwrap().max_n, 100);
    }
}
