//! Tensor archive: a UTF-8 manifest followed by a flat little-endian `f32`
//! payload.
//!
//! ```text
//! semsplat-archive 1
//! kind <kind>
//! meta <key> <value>
//! tensor <name> <d0>x<d1>x... <byte offset> <element count>
//! end
//! <payload>
//! ```
//!
//! Byte offsets are relative to the first payload byte. A scalar tensor has
//! the shape `-`.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "semsplat-archive 1";

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        Archive {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f32>) {
        let data: Vec<f32> = data.into_iter().collect();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "archive entry {name}");
        self.entries.push(ArchiveEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let mut header = format!("{MAGIC}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for e in &self.entries {
            let shape = if e.shape.is_empty() {
                "-".to_string()
            } else {
                e.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            header.push_str(&format!("tensor {} {} {} {}\n", e.name, shape, offset, e.data.len()));
            offset += 4 * e.data.len();
        }
        header.push_str("end\n");
        out.write_all(header.as_bytes())?;
        let mut payload = Vec::with_capacity(offset);
        for e in &self.entries {
            for v in &e.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&payload)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f)).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn read_from(mut input: impl BufRead) -> Result<Archive> {
        let bad = |reason: &str| Error::Format {
            path: Default::default(),
            reason: reason.to_string(),
        };
        let mut line = String::new();
        input.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad("missing archive header"));
        }
        let mut archive = Archive::default();
        let mut specs = Vec::new();
        loop {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(bad("manifest not terminated by 'end'"));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let mut parts = l.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("kind"), Some(k)) => archive.kind = k.to_string(),
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    archive.meta.push((k.to_string(), v.to_string()));
                }
                (Some("tensor"), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(bad("tensor line needs name, shape, offset, count"));
                    }
                    let shape: Vec<usize> = if f[1] == "-" {
                        Vec::new()
                    } else {
                        f[1].split('x')
                            .map(|d| d.parse().map_err(|_| bad("bad tensor shape")))
                            .collect::<Result<_>>()?
                    };
                    let offset: usize = f[2].parse().map_err(|_| bad("bad offset"))?;
                    let count: usize = f[3].parse().map_err(|_| bad("bad count"))?;
                    if shape.iter().product::<usize>() != count {
                        return Err(bad("shape and count disagree"));
                    }
                    specs.push((f[0].to_string(), shape, offset, count));
                }
                _ => return Err(bad("unrecognized manifest line")),
            }
        }
        let mut payload = Vec::new();
        input.read_to_end(&mut payload)?;
        for (name, shape, offset, count) in specs {
            let end = offset + 4 * count;
            if end > payload.len() {
                return Err(bad("payload shorter than manifest"));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            archive.entries.push(ArchiveEntry { name, shape, data });
        }
        Ok(archive)
    }
}
