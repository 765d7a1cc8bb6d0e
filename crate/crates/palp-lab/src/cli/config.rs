//! Flat key/value config files and the flag > file > default resolution
//! rules.
//!
//! Format, in full: one `key = value` pair per line; blank lines and lines
//! whose first non-space character is `#` are skipped. Keys are lowercase
//! `snake_case` identifiers. Values run from the first non-space character
//! after `=` to the end of the line, so prompts with spaces need no quoting.
//! Inline comments are not supported (a `#` inside a value is part of the
//! value). Duplicate keys are rejected rather than silently last-one-wins.
//!
//! Every key is optional; a missing key falls back to the built-in default
//! unless the matching CLI flag overrides it first. See `lab.conf.example`
//! at the repository root for the full annotated key list.

use std::collections::BTreeSet;

use crate::guidance::GuidanceMode;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    MissingEquals { line: usize, text: String },
    #[error("line {line}: empty key")]
    EmptyKey { line: usize },
    #[error("line {line}: key `{key}` is not a lowercase snake_case identifier")]
    BadKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {wanted}")]
    BadValue { key: String, value: String, wanted: &'static str },
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        && !key.starts_with(|c: char| c.is_ascii_digit())
}

/// Split config text into ordered `(key, value)` pairs, enforcing only the
/// line syntax (key typing happens in [`FileConfig::from_pairs`]).
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::MissingEquals { line, text: trimmed.to_owned() });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::EmptyKey { line });
        }
        if !valid_key(key) {
            return Err(ConfigError::BadKey { line, key: key.to_owned() });
        }
        if !seen.insert(key.to_owned()) {
            return Err(ConfigError::DuplicateKey { line, key: key.to_owned() });
        }
        pairs.push((key.to_owned(), value.trim().to_owned()));
    }
    Ok(pairs)
}

/// Parse a guidance-mode name as the CLI spells it.
pub fn parse_mode(text: &str) -> Option<GuidanceMode> {
    match text {
        "baseline" => Some(GuidanceMode::None),
        "sds" => Some(GuidanceMode::Sds),
        "palp" => Some(GuidanceMode::Palp),
        _ => None,
    }
}

/// The spelled-out CLI name for a guidance mode.
pub fn mode_name(mode: GuidanceMode) -> &'static str {
    match mode {
        GuidanceMode::None => "baseline",
        GuidanceMode::Sds => "sds",
        GuidanceMode::Palp => "palp",
        GuidanceMode::Nfsd => "nfsd",
    }
}

/// Everything a config file may set. Fields mirror the CLI flags of the
/// same name; all optional so resolution can tell "absent" from "set".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileConfig {
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub mode: Option<GuidanceMode>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub share_noise: Option<bool>,
    pub rescale: Option<bool>,
    pub subject: Option<String>,
    pub n_refs: Option<usize>,
    pub subject_seed: Option<u64>,
    pub placeholder: Option<String>,
    pub target_prompt: Option<String>,
    pub base: Option<String>,
    pub out: Option<String>,
    pub eval_samples: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub data_per_cell: Option<usize>,
    pub data_seed: Option<u64>,
}

impl FileConfig {
    /// Type and admit the raw pairs from [`parse_pairs`].
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<FileConfig, ConfigError> {
        fn num<T: std::str::FromStr>(
            key: &str,
            value: &str,
            wanted: &'static str,
        ) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_owned(),
                value: value.to_owned(),
                wanted,
            })
        }
        let mut cfg = FileConfig::default();
        for (key, value) in pairs {
            match key.as_str() {
                "lr" => cfg.lr = Some(num(key, value, "a float")?),
                "steps" => cfg.steps = Some(num(key, value, "a count")?),
                "batch" => cfg.batch = Some(num(key, value, "a count")?),
                "seed" => cfg.seed = Some(num(key, value, "an integer")?),
                "lambda" => cfg.lambda = Some(num(key, value, "a float")?),
                "mode" => {
                    cfg.mode = Some(parse_mode(value).ok_or_else(|| ConfigError::BadValue {
                        key: key.clone(),
                        value: value.clone(),
                        wanted: "one of baseline|sds|palp",
                    })?)
                }
                "alpha" => cfg.alpha = Some(num(key, value, "a float")?),
                "beta" => cfg.beta = Some(num(key, value, "a float")?),
                "share_noise" => cfg.share_noise = Some(num(key, value, "true or false")?),
                "rescale" => cfg.rescale = Some(num(key, value, "true or false")?),
                "subject" => cfg.subject = Some(value.clone()),
                "n_refs" => cfg.n_refs = Some(num(key, value, "a count")?),
                "subject_seed" => cfg.subject_seed = Some(num(key, value, "an integer")?),
                "placeholder" => cfg.placeholder = Some(value.clone()),
                "target_prompt" => cfg.target_prompt = Some(value.clone()),
                "base" => cfg.base = Some(value.clone()),
                "out" => cfg.out = Some(value.clone()),
                "eval_samples" => cfg.eval_samples = Some(num(key, value, "a count")?),
                "cfg_scale" => cfg.cfg_scale = Some(num(key, value, "a float")?),
                "data_per_cell" => cfg.data_per_cell = Some(num(key, value, "a count")?),
                "data_seed" => cfg.data_seed = Some(num(key, value, "an integer")?),
                other => return Err(ConfigError::UnknownKey(other.to_owned())),
            }
        }
        Ok(cfg)
    }

    /// Parse a whole config file.
    pub fn parse(text: &str) -> Result<FileConfig, ConfigError> {
        FileConfig::from_pairs(&parse_pairs(text)?)
    }
}

/// `flag.or(file).unwrap_or(default)` — the one precedence rule, named so
/// call sites read as what they are.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Like [`pick`] without a built-in default (required settings).
pub fn pick_required<T: Clone>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_full_key_set() {
        let text = "\
# training
lr = 1e-3
steps = 250
batch = 4
seed = 9
lambda = 0.5
mode = sds
alpha = 12
beta = 6
share_noise = false
rescale = true

# subject and prompts
subject = striped_ellipse
n_refs = 2
subject_seed = 77
placeholder = [V1]
target_prompt = sketch [V1] plain
base = runs/pre/checkpoint.bin
out = /tmp/lab-out
eval_samples = 8
cfg_scale = 2.5
data_per_cell = 10
data_seed = 3
";
        let cfg = FileConfig::parse(text).unwrap();
        assert_eq!(cfg.lr, Some(1e-3));
        assert_eq!(cfg.steps, Some(250));
        assert_eq!(cfg.batch, Some(4));
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.lambda, Some(0.5));
        assert_eq!(cfg.mode, Some(GuidanceMode::Sds));
        assert_eq!(cfg.alpha, Some(12.0));
        assert_eq!(cfg.beta, Some(6.0));
        assert_eq!(cfg.share_noise, Some(false));
        assert_eq!(cfg.rescale, Some(true));
        assert_eq!(cfg.subject.as_deref(), Some("striped_ellipse"));
        assert_eq!(cfg.n_refs, Some(2));
        assert_eq!(cfg.subject_seed, Some(77));
        assert_eq!(cfg.placeholder.as_deref(), Some("[V1]"));
        assert_eq!(cfg.target_prompt.as_deref(), Some("sketch [V1] plain"));
        assert_eq!(cfg.base.as_deref(), Some("runs/pre/checkpoint.bin"));
        assert_eq!(cfg.out.as_deref(), Some("/tmp/lab-out"));
        assert_eq!(cfg.eval_samples, Some(8));
        assert_eq!(cfg.cfg_scale, Some(2.5));
        assert_eq!(cfg.data_per_cell, Some(10));
        assert_eq!(cfg.data_seed, Some(3));
    }

    #[test]
    fn value_keeps_spaces_and_hash() {
        let cfg = FileConfig::parse("target_prompt = sketch [V] plain # not a comment").unwrap();
        assert_eq!(cfg.target_prompt.as_deref(), Some("sketch [V] plain # not a comment"));
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            FileConfig::parse("steps: 12"),
            Err(ConfigError::MissingEquals { line: 1, .. })
        ));
        assert!(matches!(FileConfig::parse(" = 3"), Err(ConfigError::EmptyKey { line: 1 })));
        assert!(matches!(
            FileConfig::parse("Steps = 3"),
            Err(ConfigError::BadKey { line: 1, .. })
        ));
        assert!(matches!(
            FileConfig::parse("lr = 1\nlr = 2"),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
        assert!(matches!(FileConfig::parse("vibe = high"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(
            FileConfig::parse("steps = soon"),
            Err(ConfigError::BadValue { wanted: "a count", .. })
        ));
        assert!(matches!(
            FileConfig::parse("mode = vanilla"),
            Err(ConfigError::BadValue { wanted: "one of baseline|sds|palp", .. })
        ));
    }

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick::<u32>(None, None, 3), 3);
        assert_eq!(pick_required(None, Some("f")), Some("f"));
        assert_eq!(pick_required(Some("a"), Some("f")), Some("a"));
        assert_eq!(pick_required::<&str>(None, None), None);
    }
}
