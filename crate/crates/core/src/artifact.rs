//! Shared `# key=value` metadata headers of the CSV artifacts.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct MetaBlock {
    pub tag: Option<String>,
    pub entries: Vec<(String, String)>,
}

/// Header lines plus the first non-comment line and its 1-based line number.
pub struct Header<R> {
    pub meta: MetaBlock,
    pub first_line: String,
    pub first_line_no: usize,
    pub rest: BufReader<R>,
}

pub fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl MetaBlock {
    pub fn new(tag: &str) -> Self {
        MetaBlock {
            tag: Some(tag.to_string()),
            entries: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(t) = &self.tag {
            let _ = writeln!(out, "# {t}");
        }
        for (k, v) in &self.entries {
            let _ = writeln!(out, "# {k}={v}");
        }
        out
    }

    fn push(&mut self, line: &str, line_no: usize) -> std::result::Result<(), String> {
        match line.split_once('=') {
            Some((k, v)) => {
                self.entries.push((k.trim().to_string(), v.trim().to_string()));
                Ok(())
            }
            None if line_no == 1 => {
                self.tag = Some(line.to_string());
                Ok(())
            }
            None => Err(format!("metadata line '{line}' is not key=value")),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn expect_tag(&self, tag: &str, path: &Path) -> Result<()> {
        if self.tag.as_deref() == Some(tag) {
            Ok(())
        } else {
            Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!("expected '# {tag}' as first line"),
            })
        }
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            message: format!("missing metadata '{key}'"),
        })
    }

    fn bad(&self, key: &str, path: &Path) -> Error {
        Error::Schema {
            path: path.to_path_buf(),
            message: format!("malformed metadata '{key}'"),
        }
    }

    pub fn require_u64(&self, key: &str, path: &Path) -> Result<u64> {
        self.require(key, path)?.parse().map_err(|_| self.bad(key, path))
    }

    pub fn require_f64(&self, key: &str, path: &Path) -> Result<f64> {
        self.require(key, path)?.parse().map_err(|_| self.bad(key, path))
    }

    pub fn require_vec(&self, key: &str, len: Option<usize>, path: &Path) -> Result<Vec<f64>> {
        let v: Vec<f64> = self
            .require(key, path)?
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.bad(key, path))?;
        if len.is_some_and(|l| l != v.len()) {
            return Err(self.bad(key, path));
        }
        Ok(v)
    }
}

pub fn read_header<R: Read>(path: &Path, reader: R) -> Result<Header<R>> {
    let mut reader = BufReader::new(reader);
    let mut meta = MetaBlock::default();
    let mut line_no = 0;
    loop {
        let mut line = String::new();
        let read = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if read == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "missing column header".into(),
            });
        }
        line_no += 1;
        match line.trim_end().strip_prefix('#') {
            Some(m) => meta.push(m.trim(), line_no).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            })?,
            None => {
                return Ok(Header {
                    meta,
                    first_line: line.trim_end().to_string(),
                    first_line_no: line_no,
                    rest: reader,
                })
            }
        }
    }
}

pub fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Checks a header row against the expected names, naming the first missing field.
pub fn check_columns(path: &Path, header: &str, expected: &[&str]) -> Result<()> {
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    for (c, want) in expected.iter().enumerate() {
        if names.get(c) != Some(want) {
            let message = if names.contains(want) {
                format!("column '{want}' is out of order (expected position {c})")
            } else {
                format!("missing field '{want}'")
            };
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message,
            });
        }
    }
    if names.len() != expected.len() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("expected {} columns, found {}", expected.len(), names.len()),
        });
    }
    Ok(())
}
