//! Flat `key=value` config files. Keys use the long flag names; values on
//! the command line override values from the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::CliError;

pub type ConfigMap = BTreeMap<String, String>;

/// Parses a config file: one `key=value` per line, `#` comments, blank lines
/// ignored.
pub fn parse_config_file(path: &Path) -> Result<ConfigMap, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut map = ConfigMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{}:{}: expected key=value, got {raw:?}",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Flag value if present, else config value, else default.
pub fn resolve<T>(
    flag: Option<T>,
    config: &ConfigMap,
    key: &str,
    default: T,
) -> Result<T, CliError>
where
    T: FromStr,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match config.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|_| CliError::Config(format!("bad value for {key}: {raw:?}"))),
        None => Ok(default),
    }
}

/// Like [`resolve`] but without a default.
pub fn resolve_opt<T>(
    flag: Option<T>,
    config: &ConfigMap,
    key: &str,
) -> Result<Option<T>, CliError>
where
    T: FromStr,
{
    if flag.is_some() {
        return Ok(flag);
    }
    match config.get(key) {
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("bad value for {key}: {raw:?}"))),
        None => Ok(None),
    }
}

/// Comma-separated threshold list; `inf` spells the no-rejection sentinel.
pub fn parse_threshold_list(raw: &str) -> Result<Vec<f64>, CliError> {
    raw.split(',')
        .map(|s| {
            crate::threshold::parse_threshold(s)
                .ok_or_else(|| CliError::Config(format!("bad threshold {s:?}")))
        })
        .collect()
}
