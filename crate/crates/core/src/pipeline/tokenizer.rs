use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Byte-level tokenizer, optionally extended with merged tokens.
///
/// Ids 0-255 are raw bytes. A merges file adds one token per line, formed by
/// concatenating two existing tokens; encoding then takes the longest known
/// token at each position.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, u32>,
    max_token_len: usize,
    source: Option<PathBuf>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::byte_level()
    }
}

fn unescape(token: &str, path: &Path, line: usize) -> Result<Vec<u8>> {
    let err = |message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut bytes = token.bytes();
    while let Some(b) = bytes.next() {
        if b != b'\\' {
            out.push(b);
            continue;
        }
        match bytes.next() {
            Some(b's') => out.push(b' '),
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'\\') => out.push(b'\\'),
            Some(b'x') => {
                let hex: Vec<u8> = bytes.by_ref().take(2).collect();
                let s = std::str::from_utf8(&hex).unwrap_or("");
                let v = u8::from_str_radix(s, 16)
                    .ok()
                    .filter(|_| hex.len() == 2)
                    .ok_or_else(|| err(format!("bad \\x escape in {token:?}")))?;
                out.push(v);
            }
            other => {
                return Err(err(format!(
                    "unknown escape \\{} in {token:?}",
                    other.map(|c| c as char).unwrap_or(' ')
                )))
            }
        }
    }
    Ok(out)
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        let vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let lookup = vocab
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i as u32))
            .collect();
        Self {
            vocab,
            lookup,
            max_token_len: 1,
            source: None,
        }
    }

    /// Parses a merges list: one `left right` pair per line, where both
    /// sides are existing tokens. `#` starts a comment line. Escapes: `\s`
    /// (space), `\n`, `\t`, `\\`, `\xHH`.
    pub fn from_merges(text: &str, path: &Path) -> Result<Self> {
        let mut tok = Self::byte_level();
        tok.source = Some(path.to_path_buf());
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = trimmed.split_whitespace().collect();
            let err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            };
            if parts.len() != 2 {
                return Err(err(format!("expected `left right`, got {trimmed:?}")));
            }
            let left = unescape(parts[0], path, line)?;
            let right = unescape(parts[1], path, line)?;
            for side in [&left, &right] {
                if !tok.lookup.contains_key(side) {
                    return Err(err(format!(
                        "{:?} is not a known token",
                        String::from_utf8_lossy(side)
                    )));
                }
            }
            let merged = [left, right].concat();
            if tok.lookup.contains_key(&merged) {
                return Err(err(format!(
                    "duplicate token {:?}",
                    String::from_utf8_lossy(&merged)
                )));
            }
            tok.max_token_len = tok.max_token_len.max(merged.len());
            tok.lookup.insert(merged.clone(), tok.vocab.len() as u32);
            tok.vocab.push(merged);
        }
        Ok(tok)
    }

    pub fn from_merges_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_merges(&text, path)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Merges file this tokenizer was read from, if any.
    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let longest = self.max_token_len.min(bytes.len() - i);
            let (len, id) = (1..=longest)
                .rev()
                .find_map(|n| self.lookup.get(&bytes[i..i + n]).map(|&id| (n, id)))
                .expect("every byte is a token");
            out.push(id);
            i += len;
        }
        out
    }

    pub fn encode_str(&self, text: &str) -> Vec<u32> {
        self.encode(text.as_bytes())
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.vocab.get(id as usize).ok_or(Error::Index {
                what: "token id",
                index: id as usize,
                bound: self.vocab.len(),
            })?;
            out.extend_from_slice(tok);
        }
        Ok(out)
    }

    /// Tokens placed between concatenated documents: one empty line.
    pub fn separator(&self) -> Vec<u32> {
        self.encode(b"\n\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_level_identity() {
        let t = Tokenizer::byte_level();
        assert_eq!(t.encode_str("ab"), vec![97, 98]);
        assert_eq!(t.vocab_size(), 256);
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(t.decode(&t.encode(&all)).unwrap(), all);
    }

    #[test]
    fn merges_hand_trace() {
        let text = "# toy merges\na a\naa a\na b\n";
        let t = Tokenizer::from_merges(text, Path::new("m.txt")).unwrap();
        assert_eq!(t.vocab_size(), 259);
        // Longest match at 0 is "aaa" (257), then "b".
        assert_eq!(t.encode_str("aaab"), vec![257, 98]);
        assert_eq!(t.encode_str("aab"), vec![256, 98]);
        assert_eq!(t.encode_str("ab"), vec![258]);
        assert_eq!(t.decode(&[257, 98]).unwrap(), b"aaab");
    }

    #[test]
    fn escapes_and_errors() {
        let t = Tokenizer::from_merges("\\s \\x41\n\\n \\n\n", Path::new("m")).unwrap();
        assert_eq!(t.encode_str(" A\n\n"), vec![256, 257]);
        match Tokenizer::from_merges("a b\n\nab zz\n", Path::new("m")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Tokenizer::from_merges("a\n", Path::new("m")),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(Tokenizer::from_merges("\\q a\n", Path::new("m")).is_err());
    }
}
