//! Plain-text `key = value` configuration files.
//!
//! Every field of [`OdometryConfig`] has a flat key. Blank lines and `#`
//! comments are ignored. Optional values accept `none`. The text written by
//! [`to_text`] parses back to the identical configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::odometry::OdometryConfig;
use crate::{Error, Result};

/// Every accepted key, in the order [`to_text`] writes them.
pub const KEYS: &[&str] = &[
    "model",
    "segments",
    "max_outer",
    "max_inner",
    "eps_outer",
    "eps_inner",
    "adaptive_noise",
    "q_scale",
    "alpha_gain",
    "gamma_offset",
    "omega_alpha_gain",
    "omega_gamma_offset",
    "k",
    "plane_tol",
    "match_dist_max",
    "range_sigma",
    "min_matches",
    "max_residual",
    "deskew_bucket",
    "scan_leaf",
    "map_leaf",
    "range_min",
    "range_max",
    "bootstrap_frames",
];

fn canonical(key: &str) -> &str {
    match key {
        "outer_iter" => "max_outer",
        "inner_iter" => "max_inner",
        "segments_per_scan" => "segments",
        other => other,
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value '{value}' for '{key}'"))
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>, String> {
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid value '{value}' for '{key}', expected true or false")),
    }
}

/// Sets one field. Aliases `outer_iter`, `inner_iter` and
/// `segments_per_scan` are accepted.
pub fn set_key(config: &mut OdometryConfig, key: &str, value: &str) -> Result<(), String> {
    let f = &mut config.filter;
    let obs = &mut f.observation;
    match canonical(key) {
        "model" => f.model = value.parse().map_err(|e: Error| e.to_string())?,
        "segments" => config.segments = parse_value(key, value)?,
        "max_outer" => f.max_outer = parse_value(key, value)?,
        "max_inner" => f.max_inner = parse_value(key, value)?,
        "eps_outer" => f.eps_outer = parse_value(key, value)?,
        "eps_inner" => f.eps_inner = parse_value(key, value)?,
        "adaptive_noise" => f.adaptive_noise = parse_bool(key, value)?,
        "q_scale" => f.q_scale = parse_value(key, value)?,
        "alpha_gain" => f.alpha_gain = parse_value(key, value)?,
        "gamma_offset" => f.gamma_offset = parse_value(key, value)?,
        "omega_alpha_gain" => f.omega_alpha_gain = parse_optional(key, value)?,
        "omega_gamma_offset" => f.omega_gamma_offset = parse_optional(key, value)?,
        "k" => obs.k = parse_value(key, value)?,
        "plane_tol" => obs.plane.plane_tol = parse_value(key, value)?,
        "match_dist_max" => obs.plane.match_dist_max = parse_value(key, value)?,
        "range_sigma" => obs.range_sigma = parse_value(key, value)?,
        "min_matches" => obs.min_matches = parse_value(key, value)?,
        "max_residual" => obs.max_residual = parse_value(key, value)?,
        "deskew_bucket" => f.deskew_bucket = parse_optional(key, value)?,
        "scan_leaf" => config.scan_leaf = parse_value(key, value)?,
        "map_leaf" => config.map_leaf = parse_value(key, value)?,
        "range_min" => config.range_gate.min = parse_value(key, value)?,
        "range_max" => config.range_gate.max = parse_value(key, value)?,
        "bootstrap_frames" => config.bootstrap_frames = parse_value(key, value)?,
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x:?}"))
}

/// Value of `key` as [`to_text`] would write it.
pub fn get_key(config: &OdometryConfig, key: &str) -> Option<String> {
    let f = &config.filter;
    let obs = &f.observation;
    Some(match canonical(key) {
        "model" => f.model.to_string(),
        "segments" => config.segments.to_string(),
        "max_outer" => f.max_outer.to_string(),
        "max_inner" => f.max_inner.to_string(),
        "eps_outer" => format!("{:?}", f.eps_outer),
        "eps_inner" => format!("{:?}", f.eps_inner),
        "adaptive_noise" => f.adaptive_noise.to_string(),
        "q_scale" => format!("{:?}", f.q_scale),
        "alpha_gain" => format!("{:?}", f.alpha_gain),
        "gamma_offset" => format!("{:?}", f.gamma_offset),
        "omega_alpha_gain" => opt(f.omega_alpha_gain),
        "omega_gamma_offset" => opt(f.omega_gamma_offset),
        "k" => obs.k.to_string(),
        "plane_tol" => format!("{:?}", obs.plane.plane_tol),
        "match_dist_max" => format!("{:?}", obs.plane.match_dist_max),
        "range_sigma" => format!("{:?}", obs.range_sigma),
        "min_matches" => obs.min_matches.to_string(),
        "max_residual" => format!("{:?}", obs.max_residual),
        "deskew_bucket" => opt(f.deskew_bucket),
        "scan_leaf" => format!("{:?}", config.scan_leaf),
        "map_leaf" => format!("{:?}", config.map_leaf),
        "range_min" => format!("{:?}", config.range_gate.min),
        "range_max" => format!("{:?}", config.range_gate.max),
        "bootstrap_frames" => config.bootstrap_frames.to_string(),
        _ => return None,
    })
}

/// One `key = value` line per field.
pub fn to_text(config: &OdometryConfig) -> String {
    let mut out = String::new();
    for key in KEYS {
        let value = get_key(config, key).expect("listed key");
        let _ = writeln!(out, "{key} = {value}");
    }
    out
}

/// Result of parsing a config file: the merged configuration and the keys
/// the file set explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedConfig {
    pub config: OdometryConfig,
    pub keys: BTreeSet<String>,
}

/// Applies the lines of `text` on top of `base`. `source` only labels errors.
/// The merged configuration is not validated, so command-line overrides can
/// still be applied.
pub fn parse(text: &str, base: OdometryConfig, source: &Path) -> Result<ParsedConfig> {
    let mut config = base;
    let mut keys = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: PathBuf::from(source),
            line: i + 1,
            message,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        set_key(&mut config, key, value).map_err(err)?;
        keys.insert(canonical(key).to_string());
    }
    Ok(ParsedConfig { config, keys })
}

pub fn load(path: &Path, base: OdometryConfig) -> Result<ParsedConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, base, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::MotionModel;
    use proptest::prelude::*;

    fn src() -> &'static Path {
        Path::new("test.cfg")
    }

    #[test]
    fn default_round_trip() {
        let cfg = OdometryConfig::default();
        let text = to_text(&cfg);
        assert_eq!(text.lines().count(), KEYS.len());
        let parsed = parse(&text, OdometryConfig::default(), src()).unwrap();
        assert_eq!(parsed.config, cfg);
        assert_eq!(parsed.keys.len(), KEYS.len());
    }

    #[test]
    fn comments_blank_lines_and_aliases() {
        let text = "# header\n\n  model = 2   # ground robot\nouter_iter = 1\nsegments_per_scan=3\ndeskew_bucket = none\nomega_alpha_gain = 20\n";
        let parsed = parse(text, OdometryConfig::default(), src()).unwrap();
        assert_eq!(parsed.config.filter.model, MotionModel::Model2);
        assert_eq!(parsed.config.filter.max_outer, 1);
        assert_eq!(parsed.config.segments, 3);
        assert_eq!(parsed.config.filter.omega_alpha_gain, Some(20.0));
        assert!(parsed.keys.contains("max_outer"));
        assert!(parsed.keys.contains("segments"));
        assert!(!parsed.keys.contains("q_scale"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [("model = 1\nbogus = 3\n", 2), ("q_scale 3\n", 1), ("\n\nmax_inner = -1\n", 3), ("adaptive_noise = maybe", 1)] {
            match parse(text, OdometryConfig::default(), src()) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn every_key_is_gettable() {
        let cfg = OdometryConfig::default();
        for key in KEYS {
            let mut copy = cfg;
            set_key(&mut copy, key, &get_key(&cfg, key).unwrap()).unwrap();
            assert_eq!(copy, cfg, "{key}");
        }
        assert!(get_key(&cfg, "nope").is_none());
    }

    proptest! {
        #[test]
        fn random_configs_round_trip(
            q in 1e-6f64..1e3,
            alpha in 0.0f64..200.0,
            eps in 1e-12f64..1.0,
            outer in 1usize..20,
            seg in 1usize..8,
            bucket in proptest::option::of(1e-5f64..1e-2),
            adaptive: bool,
            model2: bool,
        ) {
            let mut cfg = OdometryConfig::default();
            cfg.filter.q_scale = q;
            cfg.filter.alpha_gain = alpha;
            cfg.filter.eps_outer = eps;
            cfg.filter.max_outer = outer;
            cfg.filter.deskew_bucket = bucket;
            cfg.filter.adaptive_noise = adaptive;
            cfg.filter.model = if model2 { MotionModel::Model2 } else { MotionModel::Model1 };
            cfg.segments = seg;
            let parsed = parse(&to_text(&cfg), OdometryConfig::default(), src()).unwrap();
            prop_assert_eq!(parsed.config, cfg);
        }
    }
}
