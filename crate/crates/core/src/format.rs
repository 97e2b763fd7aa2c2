//! Shared on-disk container: a UTF-8 `key=value` header terminated by a
//! blank line, followed by a raw little-endian payload.
//!
//! | magic     | payload                                   |
//! |-----------|-------------------------------------------|
//! | `CS2VOL1` | `i16` HU voxels, slice-major then row-major |
//! | `CS2MSK1` | `u8` labels, same layout                   |
//! | `CS2GDF1` | `f64` guidance values, same layout         |
//! | `CS2FEA1` | `f64` decoder features, `[F, H, W]`        |
//! | `CS2CKP1` | `f64` GAN parameters in checkpoint order    |
//! | `CS2ENS1` | `f64` ensemble parameters in checkpoint order |

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new(magic: &str) -> Self {
        Self {
            entries: vec![("magic".into(), magic.into())],
        }
    }

    pub fn magic(&self) -> &str {
        self.get("magic").unwrap_or("")
    }

    /// Sets `key`, replacing an existing value in place.
    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        debug_assert!(!key.contains('=') && !key.contains('\n') && !value.contains('\n'));
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.into(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::MalformedHeader(format!("missing key '{key}'")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| {
            Error::MalformedHeader(format!("cannot parse value '{raw}' of key '{key}'"))
        })
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    Error::MalformedHeader(format!("cannot parse list item '{s}' of key '{key}'"))
                })
            })
            .collect()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Serializes header, blank line and payload.
    pub fn encode(&self, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(payload.len() + 256);
        for (k, v) in &self.entries {
            out.extend_from_slice(k.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        out.extend_from_slice(payload);
        out
    }

    /// Splits `bytes` into a header (whose magic must equal `magic`) and payload.
    pub fn decode<'a>(bytes: &'a [u8], magic: &str) -> Result<(Header, &'a [u8])> {
        let end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::MalformedHeader("no blank line terminating header".into()))?;
        let text = std::str::from_utf8(&bytes[..end])
            .map_err(|_| Error::MalformedHeader("header is not valid UTF-8".into()))?;
        let mut entries = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::MalformedHeader(format!("line '{line}' is not key=value")))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let header = Header { entries };
        if header.entries.first().map(|(k, _)| k.as_str()) != Some("magic") {
            return Err(Error::MalformedHeader("first line must be magic=...".into()));
        }
        if header.magic() != magic {
            return Err(Error::MalformedHeader(format!(
                "expected magic {magic}, found {}",
                header.magic()
            )));
        }
        Ok((header, &bytes[end + 2..]))
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn f64_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_from_le(bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    check_len(bytes.len(), expected * 8)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn check_len(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::SizeMismatch { expected, found });
    }
    Ok(())
}

pub fn join_list<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let mut h = Header::new("CS2TEST");
        h.set("a", 3).set("b", -1.5).set("list", join_list(&[1, 2, 3]));
        let bytes = h.encode(&[1, 2, 3]);
        let (back, payload) = Header::decode(&bytes, "CS2TEST").unwrap();
        assert_eq!(back, h);
        assert_eq!(payload, &[1, 2, 3]);
        assert_eq!(back.parse::<i32>("a").unwrap(), 3);
        assert_eq!(back.parse_list::<usize>("list").unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn payload_may_contain_blank_lines() {
        let h = Header::new("X");
        let bytes = h.encode(b"\n\n\n");
        let (_, payload) = Header::decode(&bytes, "X").unwrap();
        assert_eq!(payload, b"\n\n\n");
    }

    #[test]
    fn wrong_magic_and_garbage() {
        let bytes = Header::new("A").encode(&[]);
        assert!(Header::decode(&bytes, "B").is_err());
        assert!(Header::decode(b"no header here", "A").is_err());
        assert!(Header::decode(b"magic=A\nbroken\n\n", "A").is_err());
    }
}
