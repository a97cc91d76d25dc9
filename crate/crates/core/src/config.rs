//! Flat `key = value` config files with optional `[section]` headers.
//!
//! Used by both hardware profiles and scenario files. Comments start with `#`
//! and run to the end of the line. Every parsed entry remembers its line
//! number so validation errors can point at the offending line.

use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: invalid value for `{key}`: {msg}")]
    Value {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub section: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse::<T>().map_err(|e| ConfigError::Value {
            line: self.line,
            key: self.key.clone(),
            msg: e.to_string(),
        })
    }

    pub fn parse_bool(&self) -> Result<bool, ConfigError> {
        match self.value.as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(ConfigError::Value {
                line: self.line,
                key: self.key.clone(),
                msg: format!("expected boolean, got `{}`", self.value),
            }),
        }
    }

    pub fn value_error(&self, msg: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            line: self.line,
            key: self.key.clone(),
            msg: msg.into(),
        }
    }
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut section = None;
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: "unterminated section header".into(),
            })?;
            let name = name.trim();
            if name.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "empty section name".into(),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                msg: "empty key".into(),
            });
        }
        entries.push(Entry {
            section: section.clone(),
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let text = "# header\na = 1\n[hw]\nb= two # trailing\n\n";
        let e = parse_entries(text).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].section, None);
        assert_eq!(e[1].section.as_deref(), Some("hw"));
        assert_eq!(e[1].value, "two");
        assert_eq!(e[1].line, 4);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            parse_entries("a = 1\nnot a pair\n"),
            Err(ConfigError::Syntax {
                line: 2,
                msg: "expected `key = value`, got `not a pair`".into()
            })
        );
        let e = &parse_entries("x = abc").unwrap()[0];
        let err = e.parse::<u64>().unwrap_err();
        assert!(err.to_string().starts_with("line 1: invalid value for `x`"));
    }
}
