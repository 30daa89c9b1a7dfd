//! Layered configuration: flags over a `--config` JSON file over defaults.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{usage, CliError, Result};

pub const SEED_ENV: &str = "ENTROPY_SEED";

/// Global seed default from the environment, or 0.
pub fn env_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(0),
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// Overlays `top` onto `base`, recursing into objects. Keys absent from
/// `base` are rejected so typos do not pass silently.
pub fn overlay(base: &mut Value, top: &Value, at: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(t)) = (&mut *base, top) else {
        return usage(format!("config {at} must be a JSON object"));
    };
    for (k, v) in t {
        let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match b.get_mut(k) {
            None => return usage(format!("unknown config key {path}")),
            Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v, &path)?,
            Some(slot) => *slot = v.clone(),
        }
    }
    Ok(())
}

/// Resolves a config: built-in defaults, then the seed from the environment,
/// then the `--config` file, then flag values (`(dotted key, value)` pairs).
pub fn resolve<T: serde::Serialize + serde::de::DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    flags: &[(&str, Value)],
) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if v.get("seed").is_some() {
        v["seed"] = Value::from(env_seed()?);
    }
    if let Some(p) = file {
        overlay(&mut v, &read_json(p)?, "")?;
    }
    for (key, val) in flags {
        let mut top = val.clone();
        for part in key.rsplit('.') {
            let mut m = Map::new();
            m.insert(part.to_string(), top);
            top = Value::Object(m);
        }
        overlay(&mut v, &top, "")?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Invalid(format!("config: {e}")))
}

/// Parses `a,b,c` or an inclusive range `a..b` of `points` evenly spaced values.
pub fn parse_list(flag: &str, s: &str, points: usize) -> Result<Vec<f64>> {
    let num = |t: &str| -> Result<f64> {
        let x: f64 = t
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("--{flag}: {t:?} is not a number")))?;
        if x.is_finite() {
            Ok(x)
        } else {
            usage(format!("--{flag}: values must be finite"))
        }
    };
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if b < a {
            return usage(format!("--{flag}: range end is below its start"));
        }
        if points < 2 || a == b {
            return Ok(vec![a]);
        }
        let step = (b - a) / (points - 1) as f64;
        // Round to 1e-9 so ranges print as the values a reader expects.
        return Ok((0..points)
            .map(|i| ((a + step * i as f64) * 1e9).round() / 1e9)
            .collect());
    }
    let v: Vec<f64> = s.split(',').map(num).collect::<Result<_>>()?;
    if v.is_empty() {
        return usage(format!("--{flag} needs at least one value"));
    }
    Ok(v)
}

/// Parses an outer code given as `n,k`.
pub fn parse_outer(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Usage(format!("--outer expects n,k (chunks, needed), got {s:?}"));
    let (n, k) = s.split_once(',').ok_or_else(bad)?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    let k: usize = k.trim().parse().map_err(|_| bad())?;
    if k == 0 || k > n {
        return Err(bad());
    }
    Ok((n, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse_list("x", "20,40,60", 10).unwrap(), vec![20.0, 40.0, 60.0]);
        assert_eq!(parse_list("x", "0..1", 5).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_list("x", "0.02..0.25", 2).unwrap(), vec![0.02, 0.25]);
        assert!(parse_list("x", "1,a", 3).is_err());
        assert!(parse_list("x", "3..1", 3).is_err());
    }

    #[test]
    fn overlay_rejects_unknown_keys() {
        let mut base = serde_json::json!({"a": 1, "b": {"c": 2, "d": 3}});
        overlay(&mut base, &serde_json::json!({"b": {"c": 5}}), "").unwrap();
        assert_eq!(base, serde_json::json!({"a": 1, "b": {"c": 5, "d": 3}}));
        assert!(overlay(&mut base, &serde_json::json!({"z": 1}), "").is_err());
    }

    #[test]
    fn outer_parses() {
        assert_eq!(parse_outer("14,8").unwrap(), (14, 8));
        assert!(parse_outer("8,14").is_err());
        assert!(parse_outer("8").is_err());
    }
}
