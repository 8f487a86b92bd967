//! Comment-header provenance shared by all output files.
//!
//! Every file the tool writes starts with `# key = value` lines recording at
//! least the tool version, the configuration checksum, and the seed, so a
//! result can always be traced back to the run that produced it.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::Error;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    entries: Vec<(String, String)>,
}

impl Provenance {
    pub fn new(version: &str, config_sha256: &str, seed: u64) -> Self {
        let mut p = Provenance::default();
        p.push("tool", format!("backflash {version}"));
        p.push("config_sha256", config_sha256);
        p.push("seed", seed.to_string());
        p
    }

    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str, path: &str) -> Result<f64, Error> {
        self.get(key)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| {
                Error::Config(format!("{path}: missing or invalid '{key}' in file header"))
            })
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (k, v) in &self.entries {
            writeln!(w, "# {k} = {v}")?;
        }
        Ok(())
    }

    /// Collects `# key = value` lines; comment lines without an `=` are
    /// ignored so plain remarks can coexist with provenance.
    pub fn parse_comment(&mut self, line: &str) {
        let body = line.trim_start_matches('#').trim();
        if let Some((k, v)) = body.split_once('=') {
            self.push(k.trim(), v.trim().to_string());
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries.iter().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut p = Provenance::new("0.1.0", "abcd", 42);
        p.push("duration_s", "180");
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut q = Provenance::default();
        for line in text.lines() {
            q.parse_comment(line);
        }
        assert_eq!(p, q);
        assert_eq!(q.get("seed"), Some("42"));
        assert_eq!(q.get_f64("duration_s", "mem").unwrap(), 180.0);
        assert!(q.get_f64("missing", "mem").is_err());
    }

    #[test]
    fn plain_comments_are_ignored() {
        let mut p = Provenance::default();
        p.parse_comment("# just a remark");
        assert!(p.to_map().is_empty());
    }
}
