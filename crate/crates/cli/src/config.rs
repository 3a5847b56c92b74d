//! Flat `key = value` configuration with dotted namespaces.
//!
//! Resolution order, later wins: built-in defaults, the config file,
//! `HOIF_SEED`, `--seed`, `--set` pairs, then the dedicated path flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::Failure;

/// Every recognised key with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("input", ""),
    ("output.dir", "hoif-out"),
    ("functional", "auto"),
    ("data.dim", "auto"),
    ("basis.family", "haar"),
    ("basis.degree", "2"),
    ("basis.k", "default"),
    ("estimator.variant", "emp"),
    ("estimator.m", "default"),
    ("estimator.m_max", "4"),
    ("estimator.split_fraction", "0.5"),
    ("estimator.eigen_floor", "1e-8"),
    ("estimator.cross_fit", "false"),
    ("estimator.level", "0.95"),
    ("estimator.hypothesis_b", "1"),
    ("nuisance.method", "series"),
    ("nuisance.k_grid", "1,4,16,64"),
    ("nuisance.folds", "5"),
    ("nuisance.sigma_floor", "0.05"),
    ("nuisance.degree", "2"),
    ("nuisance.b_column", "auto"),
    ("nuisance.p_column", "auto"),
    ("quadrature.rule", "midpoint"),
    ("quadrature.panels", "auto"),
    ("quadrature.points", "4"),
    ("gram.save", "false"),
    ("gram.load", ""),
    ("sim.scenario", "S1"),
    ("sim.n", "2000"),
    ("sim.reps", "100"),
    ("sim.design", "resample"),
    ("sim.n_train", "2000"),
    ("sim.nuisance", "config"),
    ("sim.budget_minutes", "30"),
];

/// Keys left out of the configuration hash: where results go does not
/// change what they are.
const UNHASHED: &[&str] = &["output.dir"];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str, origin: &str) -> Result<Vec<(String, String)>, Failure> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Failure::validation(format!("{origin}:{}: expected key = value", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !known(k) {
            return Err(Failure::validation(format!("{origin}:{}: unknown config key '{k}'", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Failure::validation(format!("{origin}:{}: key '{k}' set twice", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        if !known(key) {
            return Err(Failure::validation(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::validation(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in parse_text(&text, &path.display().to_string())? {
            self.values.insert(k, v);
        }
        Ok(())
    }

    /// `key=value` from the command line.
    pub fn apply_pair(&mut self, pair: &str) -> Result<(), Failure> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Failure::validation(format!("--set expects key=value, got '{pair}'")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key registered in KEYS")
    }

    pub fn is_auto(&self, key: &str) -> bool {
        matches!(self.get(key), "auto" | "default" | "")
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, Failure>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse::<T>()
            .map_err(|e| Failure::validation(format!("config key {key} = '{raw}': {e}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, Failure> {
        match self.get(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(Failure::validation(format!("config key {key} = '{other}': expected true or false"))),
        }
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>, Failure> {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Failure::validation(format!("config key {key}: '{s}': {e}")))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.parse("seed")
    }

    /// Canonical `key = value` lines, sorted by key.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if UNHASHED.contains(&k.as_str()) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Comment header carried by every text artifact.
    pub fn header(&self) -> Result<String, Failure> {
        Ok(format!(
            "# hoif {}\n# config_sha256 {}\n# seed {}\n",
            env!("CARGO_PKG_VERSION"),
            self.hash(),
            self.seed()?
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_lines_and_comments() {
        let parsed = parse_text("# c\nseed = 4\n\nbasis.k = 16 # trailing\n", "t").unwrap();
        assert_eq!(parsed, vec![("seed".into(), "4".into()), ("basis.k".into(), "16".into())]);
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        let e = parse_text("seeed = 1\n", "f.cfg").unwrap_err();
        assert!(e.message.contains("unknown config key 'seeed'"));
        assert!(e.message.starts_with("f.cfg:1"));
        assert!(parse_text("seed = 1\nseed = 2\n", "t").is_err());
        assert!(parse_text("seed 1\n", "t").is_err());
        assert!(RunConfig::defaults().apply_pair("nope=1").is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::defaults();
        let mut b = a.clone();
        b.set("output.dir", "elsewhere").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "9").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn typed_access() {
        let mut c = RunConfig::defaults();
        assert!(!c.flag("estimator.cross_fit").unwrap());
        assert_eq!(c.list("nuisance.k_grid").unwrap(), vec![1, 4, 16, 64]);
        assert!(c.is_auto("basis.k"));
        c.set("estimator.m_max", "x").unwrap();
        assert!(c.parse::<usize>("estimator.m_max").is_err());
    }
}
