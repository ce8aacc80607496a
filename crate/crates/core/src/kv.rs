//! Sectioned `key = value` text format used for run configs and for the
//! network-spec echo stored in checkpoints.
//!
//! ```text
//! # comment
//! [network]
//! latent_dim = 64
//! skips = 2, 4
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvSection {
    pub name: String,
    pub line: usize,
    pub entries: Vec<KvEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    pub sections: Vec<KvSection>,
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::default();
        let mut seen_sections = HashSet::new();
        let mut seen_keys: HashSet<String> = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, "unterminated section header"))?
                    .trim();
                if !valid_ident(name) {
                    return Err(err(line, format!("invalid section name `{name}`")));
                }
                if !seen_sections.insert(name.to_string()) {
                    return Err(err(line, format!("duplicate section [{name}]")));
                }
                seen_keys.clear();
                doc.sections.push(KvSection {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !valid_ident(key) {
                return Err(err(line, format!("invalid key `{key}`")));
            }
            if !seen_keys.insert(key.to_string()) {
                return Err(err(line, format!("duplicate key `{key}`")));
            }
            if doc.sections.is_empty() {
                seen_sections.insert(String::new());
                doc.sections.push(KvSection {
                    name: String::new(),
                    line,
                    entries: Vec::new(),
                });
            }
            doc.sections.last_mut().expect("section exists").entries.push(KvEntry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(doc)
    }

    pub fn section(&self, name: &str) -> Option<&KvSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Reader over one section that tracks which keys were consumed.
    pub fn reader(&self, name: &str) -> SectionReader<'_> {
        SectionReader {
            section: self.section(name),
            used: HashSet::new(),
        }
    }

    /// Rejects any section not in `known`, reporting its header line.
    pub fn check_sections(&self, known: &[&str]) -> Result<()> {
        for s in &self.sections {
            if !known.contains(&s.name.as_str()) {
                return Err(err(s.line, format!("unknown section [{}]", s.name)));
            }
        }
        Ok(())
    }
}

pub struct SectionReader<'a> {
    section: Option<&'a KvSection>,
    used: HashSet<&'a str>,
}

impl<'a> SectionReader<'a> {
    fn entry(&mut self, key: &str) -> Option<&'a KvEntry> {
        let e = self.section?.entries.iter().find(|e| e.key == key)?;
        self.used.insert(e.key.as_str());
        Some(e)
    }

    /// Parses `key` if present, otherwise returns `default`.
    pub fn get<V: FromStr>(&mut self, key: &str, default: V) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        match self.entry(key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|x| err(e.line, format!("bad value for `{key}`: {x}"))),
        }
    }

    pub fn get_list<V: FromStr>(&mut self, key: &str, default: Vec<V>) -> Result<Vec<V>>
    where
        V::Err: std::fmt::Display,
    {
        match self.entry(key) {
            None => Ok(default),
            Some(e) => e
                .value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|x| err(e.line, format!("bad list item for `{key}`: {x}"))))
                .collect(),
        }
    }

    /// Line of `key` in the source, when present.
    pub fn line_of(&self, key: &str) -> Option<usize> {
        self.section?.entries.iter().find(|e| e.key == key).map(|e| e.line)
    }

    /// Errors on the first key that was never read.
    pub fn finish(self) -> Result<()> {
        if let Some(s) = self.section {
            if let Some(e) = s.entries.iter().find(|e| !self.used.contains(e.key.as_str())) {
                return Err(err(e.line, format!("unknown key `{}` in [{}]", e.key, s.name)));
            }
        }
        Ok(())
    }
}

/// Builder for emitting the same format.
#[derive(Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        let _ = writeln!(self.out, "[{name}]");
        self
    }

    pub fn kv(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {value}");
        self
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let doc = KvDoc::parse("# top\n[a]\nx = 1 # trailing\ny=2, 3\n\n[b]\nz = hello\n").unwrap();
        let mut a = doc.reader("a");
        assert_eq!(a.get("x", 0u32).unwrap(), 1);
        assert_eq!(a.get_list("y", vec![0u32]).unwrap(), vec![2, 3]);
        assert_eq!(a.get("missing", 7u32).unwrap(), 7);
        a.finish().unwrap();
        let mut b = doc.reader("b");
        assert_eq!(b.get("z", String::new()).unwrap(), "hello");
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let doc = KvDoc::parse("[a]\nx = 1\n\nbogus = 3\n").unwrap();
        let mut r = doc.reader("a");
        r.get("x", 0u32).unwrap();
        match r.finish() {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_lines_rejected() {
        for (text, line) in [
            ("[a\n", 1),
            ("[a]\nnovalue\n", 2),
            ("[a]\nx = 1\nx = 2\n", 3),
            ("[a]\n[a]\n", 2),
            ("[a]\nbad key = 1\n", 2),
        ] {
            match KvDoc::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_value_reports_line() {
        let doc = KvDoc::parse("[a]\n\nx = nope\n").unwrap();
        match doc.reader("a").get("x", 0u32) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn writer_output_parses_back() {
        let text = KvWriter::default().section("s").kv("a", 1.5).kv("b", "x").finish();
        let doc = KvDoc::parse(&text).unwrap();
        let mut r = doc.reader("s");
        assert_eq!(r.get("a", 0.0f64).unwrap(), 1.5);
        assert_eq!(r.get("b", String::new()).unwrap(), "x");
    }
}
