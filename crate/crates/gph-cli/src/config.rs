//! TOML configuration access with line-anchored diagnostics.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

#[derive(Debug)]
pub struct ConfigError {
    pub file: PathBuf,
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.file.display(), l, self.msg),
            None => write!(f, "{}: {}", self.file.display(), self.msg),
        }
    }
}

pub struct Doc {
    pub path: PathBuf,
    pub text: String,
    table: Table,
    used: RefCell<BTreeSet<(String, String)>>,
}

type CResult<T> = std::result::Result<T, ConfigError>;

impl Doc {
    pub fn load(path: &Path) -> CResult<Doc> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            file: path.to_path_buf(),
            line: None,
            msg: format!("cannot read: {e}"),
        })?;
        Doc::parse(path, text)
    }

    pub fn parse(path: &Path, text: String) -> CResult<Doc> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError {
            file: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1),
            msg: e.message().to_string(),
        })?;
        Ok(Doc {
            path: path.to_path_buf(),
            text,
            table,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    /// 1-based line of `key` inside `[section]` ("" for the top level), or of the header.
    pub fn line_of(&self, section: &str, key: Option<&str>) -> Option<usize> {
        let mut current = String::new();
        for (i, raw) in self.text.lines().enumerate() {
            let line = raw.trim();
            if line.starts_with('[') {
                current = line
                    .trim_matches(|c| c == '[' || c == ']')
                    .trim()
                    .to_string();
                if key.is_none() && current == section {
                    return Some(i + 1);
                }
                continue;
            }
            if let Some(k) = key {
                if current == section {
                    if let Some(rest) = line.strip_prefix(k) {
                        if rest.trim_start().starts_with('=') {
                            return Some(i + 1);
                        }
                    }
                }
            }
        }
        None
    }

    pub fn error(&self, section: &str, key: Option<&str>, msg: impl Into<String>) -> ConfigError {
        let name = match (section, key) {
            ("", Some(k)) => k.to_string(),
            (s, Some(k)) => format!("{s}.{k}"),
            (s, None) => format!("[{s}]"),
        };
        ConfigError {
            file: self.path.clone(),
            line: self
                .line_of(section, key)
                .or_else(|| self.line_of(section, None)),
            msg: format!("{name}: {}", msg.into()),
        }
    }

    fn raw(&self, section: &str, key: &str) -> CResult<Option<&Value>> {
        self.used
            .borrow_mut()
            .insert((section.to_string(), key.to_string()));
        if section.is_empty() {
            return Ok(self.table.get(key));
        }
        match self.table.get(section) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(t.get(key)),
            Some(_) => Err(self.error(section, None, "expected a table")),
        }
    }

    pub fn f64(&self, section: &str, key: &str, default: Option<f64>) -> CResult<f64> {
        match self.raw(section, key)? {
            Some(Value::Float(v)) => Ok(*v),
            Some(Value::Integer(v)) => Ok(*v as f64),
            Some(_) => Err(self.error(section, Some(key), "expected a number")),
            None => default.ok_or_else(|| self.error(section, Some(key), "missing required key")),
        }
    }

    pub fn usize(&self, section: &str, key: &str, default: Option<usize>) -> CResult<usize> {
        match self.raw(section, key)? {
            Some(Value::Integer(v)) if *v >= 0 => Ok(*v as usize),
            Some(_) => Err(self.error(section, Some(key), "expected a non-negative integer")),
            None => default.ok_or_else(|| self.error(section, Some(key), "missing required key")),
        }
    }

    pub fn opt_usize(&self, section: &str, key: &str) -> CResult<Option<usize>> {
        match self.raw(section, key)? {
            None => Ok(None),
            Some(_) => self.usize(section, key, None).map(Some),
        }
    }

    pub fn opt_f64(&self, section: &str, key: &str) -> CResult<Option<f64>> {
        match self.raw(section, key)? {
            None => Ok(None),
            Some(_) => self.f64(section, key, None).map(Some),
        }
    }

    pub fn bool(&self, section: &str, key: &str, default: bool) -> CResult<bool> {
        match self.raw(section, key)? {
            Some(Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(self.error(section, Some(key), "expected true or false")),
            None => Ok(default),
        }
    }

    pub fn string(&self, section: &str, key: &str, default: Option<&str>) -> CResult<String> {
        match self.raw(section, key)? {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(self.error(section, Some(key), "expected a string")),
            None => default
                .map(String::from)
                .ok_or_else(|| self.error(section, Some(key), "missing required key")),
        }
    }

    pub fn choice(
        &self,
        section: &str,
        key: &str,
        default: Option<&str>,
        allowed: &[&str],
    ) -> CResult<String> {
        let s = self.string(section, key, default)?;
        if !allowed.contains(&s.as_str()) {
            return Err(self.error(
                section,
                Some(key),
                format!("\"{s}\" is not one of {}", allowed.join(", ")),
            ));
        }
        Ok(s)
    }

    pub fn f64_list(&self, section: &str, key: &str) -> CResult<Vec<f64>> {
        match self.raw(section, key)? {
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Float(x) => Ok(*x),
                    Value::Integer(x) => Ok(*x as f64),
                    _ => Err(self.error(section, Some(key), "expected an array of numbers")),
                })
                .collect(),
            Some(_) => Err(self.error(section, Some(key), "expected an array of numbers")),
            None => Err(self.error(section, Some(key), "missing required key")),
        }
    }

    pub fn usize_list(&self, section: &str, key: &str) -> CResult<Vec<usize>> {
        match self.raw(section, key)? {
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Integer(x) if *x >= 0 => Ok(*x as usize),
                    _ => Err(self.error(
                        section,
                        Some(key),
                        "expected an array of non-negative integers",
                    )),
                })
                .collect(),
            Some(_) => Err(self.error(
                section,
                Some(key),
                "expected an array of non-negative integers",
            )),
            None => Err(self.error(section, Some(key), "missing required key")),
        }
    }

    /// Rejects keys that were never read.
    pub fn finish(&self) -> CResult<()> {
        let used = self.used.borrow();
        for (name, v) in &self.table {
            match v {
                Value::Table(t) => {
                    for key in t.keys() {
                        if !used.contains(&(name.clone(), key.clone())) {
                            return Err(self.error(name, Some(key), "unknown key"));
                        }
                    }
                }
                _ => {
                    if !used.contains(&(String::new(), name.clone())) {
                        return Err(self.error("", Some(name), "unknown key"));
                    }
                }
            }
        }
        Ok(())
    }
}
