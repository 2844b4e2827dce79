//! Line-oriented run configuration.
//!
//! A run is described by a plain text file of `section.key = value` lines.
//! `#` starts a comment, blank lines are skipped, values are free-form
//! strings interpreted by typed getters, and lists are comma-separated.
//! Three rules keep runs reproducible and typo-proof:
//!
//! - every key a command reads is marked consumed, and [`RunConfig::finish`]
//!   rejects configs containing keys nobody read, so a misspelled setting
//!   fails loudly instead of silently falling back to its default;
//! - relative paths are resolved against the directory of the config file,
//!   so a run directory can be moved wholesale;
//! - the config hash is the SHA-256 digest of the canonical serialization
//!   (keys sorted, exactly one `key = value` per line), which is what run
//!   ids and result records key on. Parsing the canonical form again is a
//!   fixed point.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Seed list used when the config does not set `run.seeds`.
pub const DEFAULT_SEEDS: [u64; 3] = [42, 7, 77];

#[derive(Debug)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
    consumed: RefCell<BTreeSet<String>>,
    base: PathBuf,
    hash: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(gsgw::GsgwError::from)?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        RunConfig::parse(&text, base)
    }

    /// Parse config text; `base` is the directory relative paths resolve
    /// against.
    pub fn parse(text: &str, base: PathBuf) -> Result<RunConfig> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, value) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!(
                    "line {}: expected `section.key = value`, got {raw:?}",
                    idx + 1
                ))
            })?;
            let name = name.trim();
            let value = value.trim();
            if !valid_key(name) {
                return Err(CliError::config(format!(
                    "line {}: key {name:?} must look like `section.key` \
                     (lowercase, digits, underscores)",
                    idx + 1
                )));
            }
            if entries.insert(name.to_string(), value.to_string()).is_some() {
                return Err(CliError::config(format!(
                    "line {}: duplicate key {name}",
                    idx + 1
                )));
            }
        }
        let mut canonical = String::new();
        for (k, v) in &entries {
            canonical.push_str(k);
            canonical.push_str(" = ");
            canonical.push_str(v);
            canonical.push('\n');
        }
        let hash = hex(&Sha256::digest(canonical.as_bytes()));
        Ok(RunConfig {
            entries,
            consumed: RefCell::new(BTreeSet::new()),
            base,
            hash,
        })
    }

    /// Sorted `key = value` lines; hashing input and itself a parseable
    /// config.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let hit = self.entries.get(key).map(String::as_str);
        if hit.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        hit
    }

    pub fn str(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    pub fn opt_str(&self, key: &str) -> Option<String> {
        self.raw(key).map(str::to_string)
    }

    pub fn require(&self, key: &str) -> Result<String> {
        self.raw(key)
            .map(str::to_string)
            .ok_or_else(|| CliError::config(format!("missing required key {key}")))
    }

    /// Parse the value under `key`, or return `default` when absent.
    pub fn parsed<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| {
                CliError::config(format!("key {key}: cannot parse {v:?}: {e}"))
            }),
        }
    }

    pub fn opt_parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::config(format!("key {key}: cannot parse {v:?}: {e}"))),
        }
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(CliError::config(format!(
                "key {key}: expected true or false, got {v:?}"
            ))),
        }
    }

    /// Comma-separated list of parseable values; `default` when absent.
    pub fn list<T>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: FromStr + Clone,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|e| {
                        CliError::config(format!("key {key}: cannot parse item {s:?}: {e}"))
                    })
                })
                .collect(),
        }
    }

    pub fn str_list(&self, key: &str, default: &[&str]) -> Vec<String> {
        match self.raw(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
        }
    }

    /// A path value resolved against the config file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|v| self.resolve(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| CliError::config(format!("missing required key {key}")))
    }

    pub fn resolve(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Seed list: a `--seed` override wins, otherwise `run.seeds`, otherwise
    /// the default three.
    pub fn seeds(&self, cli_seed: Option<u64>) -> Result<Vec<u64>> {
        let configured = self.list("run.seeds", &DEFAULT_SEEDS)?;
        if configured.is_empty() {
            return Err(CliError::config("run.seeds must not be empty"));
        }
        Ok(match cli_seed {
            Some(s) => vec![s],
            None => configured,
        })
    }

    /// Reject keys nobody read. Call after a command has pulled everything
    /// it understands.
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let list = unknown
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ");
            Err(CliError::config(format!(
                "unknown keys: {list} (nothing reads them; check for typos)"
            )))
        }
    }
}

fn valid_key(name: &str) -> bool {
    let mut dot = false;
    for (i, c) in name.char_indices() {
        match c {
            'a'..='z' | '0'..='9' | '_' => {}
            '.' if i > 0 && i + 1 < name.len() => dot = true,
            _ => return false,
        }
    }
    dot && !name.contains("..")
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::parse(text, PathBuf::from("/tmp/base")).unwrap()
    }

    #[test]
    fn parses_comments_blanks_and_values() {
        let c = cfg("# a comment\n\nsolve.n = 64\nsolve.lr = 5e-3\n");
        assert_eq!(c.parsed("solve.n", 0usize).unwrap(), 64);
        assert_eq!(c.parsed("solve.lr", 0.0f64).unwrap(), 5e-3);
        assert!(c.finish().is_ok());
    }

    #[test]
    fn canonical_form_is_a_fixed_point() {
        let c = cfg("b.z = 3\na.y = 2\na.x =   1\n# noise\n");
        let canon = c.canonical();
        let again = RunConfig::parse(&canon, PathBuf::from("/tmp/base")).unwrap();
        assert_eq!(again.canonical(), canon);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = cfg("a.x=1\nb.y = 2");
        let b = cfg("# hi\nb.y   =2\na.x = 1\n");
        assert_eq!(a.hash(), b.hash());
        let c = cfg("a.x = 1\nb.y = 3\n");
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unread_keys_are_rejected() {
        let c = cfg("solve.n = 4\nsolve.typo = 9\n");
        let _ = c.parsed("solve.n", 0usize).unwrap();
        let err = c.finish().unwrap_err();
        assert!(err.to_string().contains("solve.typo"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn duplicate_and_malformed_keys_fail() {
        assert!(RunConfig::parse("a.x = 1\na.x = 2\n", PathBuf::new()).is_err());
        assert!(RunConfig::parse("justkey = 1\n", PathBuf::new()).is_err());
        assert!(RunConfig::parse("a.x 1\n", PathBuf::new()).is_err());
        assert!(RunConfig::parse("A.x = 1\n", PathBuf::new()).is_err());
    }

    #[test]
    fn paths_resolve_against_the_config_directory() {
        let c = cfg("m.src = meshes/a.off\nm.abs = /data/b.off\n");
        assert_eq!(c.path("m.src").unwrap(), PathBuf::from("/tmp/base/meshes/a.off"));
        assert_eq!(c.path("m.abs").unwrap(), PathBuf::from("/data/b.off"));
    }

    #[test]
    fn seed_override_wins() {
        let c = cfg("run.seeds = 1, 2, 3\n");
        assert_eq!(c.seeds(None).unwrap(), vec![1, 2, 3]);
        assert_eq!(c.seeds(Some(9)).unwrap(), vec![9]);
        let d = cfg("a.b = 1\n");
        assert_eq!(d.seeds(None).unwrap(), DEFAULT_SEEDS.to_vec());
    }

    #[test]
    fn lists_parse_with_padding() {
        let c = cfg("x.t = 0.33, 0.67,1.0\n");
        assert_eq!(c.list("x.t", &[] as &[f64]).unwrap(), vec![0.33, 0.67, 1.0]);
    }
}
