//! `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys keep their
//! insertion order so formatted output is stable.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Kv {
    entries: Vec<(String, String)>,
    used: RefCell<BTreeSet<String>>,
}

impl PartialEq for Kv {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Kv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kv = Kv::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: ln + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: ln + 1,
                    msg: "empty key".into(),
                });
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Kv::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Inserts or replaces a key, keeping its original position.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Whether `key` is present, without marking it read.
    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }

    /// Marks every key starting with `prefix` as read.
    pub fn ignore_prefix(&self, prefix: &str) {
        let mut used = self.used.borrow_mut();
        for (k, _) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            used.insert(k.clone());
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Parses `key` if present.
    pub fn parse_opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(format!("{key} = {v}: {e}"))),
        }
    }

    /// Comma-separated list, with `none` or an empty value for no items.
    pub fn parse_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => parse_list(v)
                .map(Some)
                .map_err(|e| Error::config(format!("{key} = {v}: {e}"))),
        }
    }

    /// Keys never read through [`Kv::get`].
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries
            .iter()
            .map(|(k, _)| k)
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect()
    }

    pub fn reject_unused(&self, origin: &str) -> Result<()> {
        match self.unused().as_slice() {
            [] => Ok(()),
            keys => Err(Error::config(format!(
                "{origin}: unknown keys {}",
                keys.join(", ")
            ))),
        }
    }

    pub fn merge(&mut self, other: &Kv) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn parse_list<T>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T: FromStr,
    T::Err: Display,
{
    let v = v.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

pub fn format_list<T: Display>(items: &[T]) -> String {
    if items.is_empty() {
        return "none".into();
    }
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_format() {
        let kv = Kv::parse("# c\na = 1\n\nb=x, y\n", Path::new("t.cfg")).unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("x, y"));
        assert_eq!(kv.to_text(), "a = 1\nb = x, y\n");
        assert_eq!(
            Kv::parse(&kv.to_text(), Path::new("t")).unwrap().entries(),
            kv.entries()
        );
    }

    #[test]
    fn bad_line_reports_position() {
        match Kv::parse("a = 1\noops\n", Path::new("t.cfg")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn typed_access_and_unused_keys() {
        let mut kv = Kv::new();
        kv.set("n", 3);
        kv.set("list", "1,2,3");
        kv.set("extra", "z");
        assert_eq!(kv.parse_opt::<usize>("n").unwrap(), Some(3));
        assert_eq!(kv.parse_list::<usize>("list").unwrap(), Some(vec![1, 2, 3]));
        assert!(kv.parse_opt::<usize>("extra").is_err());
        let fresh = Kv::parse(&kv.to_text(), Path::new("t")).unwrap();
        fresh.get("n");
        assert_eq!(
            fresh.unused(),
            vec!["list".to_string(), "extra".to_string()]
        );
        assert!(fresh.reject_unused("t").is_err());
        assert!(fresh.contains("extra"));
        fresh.ignore_prefix("l");
        fresh.ignore_prefix("ex");
        assert!(fresh.reject_unused("t").is_ok());
        assert_eq!(parse_list::<usize>("none").unwrap(), Vec::<usize>::new());
        assert_eq!(format_list::<usize>(&[]), "none");
    }
}
