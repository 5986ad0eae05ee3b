//! Flat key=value run configuration.
//!
//! Every command resolves its parameters into a RunConfig and writes the
//! resolved copy next to its outputs, so any run is reproducible from the
//! sidecar plus its seed. Files may carry '#' comments; unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::path::Path;

use voxdiff::error::{Error, Result};

pub struct RunConfig {
    order: Vec<String>,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(defaults: &[(&str, String)]) -> RunConfig {
        let mut order = Vec::new();
        let mut values = BTreeMap::new();
        for (k, v) in defaults {
            order.push(k.to_string());
            values.insert(k.to_string(), v.clone());
        }
        RunConfig { order, values }
    }

    /// Merge a config file over the defaults. Unknown keys are rejected.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!(
                    "config line {} is not key = value: {raw:?}",
                    lineno + 1
                ))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::invalid(format!(
                "unknown config key {key:?}; known keys: {}",
                self.order.join(", ")
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key:?} missing"))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::invalid(format!("config {key} = {:?} is not an integer", self.get(key))))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::invalid(format!("config {key} = {:?} is not an integer", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::invalid(format!("config {key} = {:?} is not a number", self.get(key))))
    }

    /// Serialize in definition order with all defaults materialized.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in &self.order {
            out.push_str(&format!("{k} = {}\n", self.values[k]));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_merge_and_render() {
        let mut cfg = RunConfig::new(&[("steps", "100".into()), ("seed", "0".into())]);
        cfg.set("steps", "250").unwrap();
        assert_eq!(cfg.get_usize("steps").unwrap(), 250);
        assert_eq!(cfg.render(), "steps = 250\nseed = 0\n");
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::new(&[("steps", "100".into())]);
        assert!(cfg.set("stepz", "1").is_err());
    }
}
