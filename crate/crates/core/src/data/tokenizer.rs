//! Byte-level tokenizer: ids 0–255 are raw bytes, followed by three specials.

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn is_special(id: u32) -> bool {
    id >= BOS
}

/// UTF-8 bytes of `text`. Framing tokens are added at collation.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`tokenize`]; special tokens are dropped. Byte sequences
/// that are not valid UTF-8 are replaced lossily.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            BOS | EOS | PAD => {}
            _ => {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: VOCAB_SIZE,
                })
            }
        }
    }
    Ok(String::from_utf8(bytes).unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_empty_and_multibyte() {
        assert_eq!(tokenize("abc"), vec![97, 98, 99]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("é"), vec![195, 169]);
        assert_eq!(tokenize("é"), "é".as_bytes().iter().map(|&b| b as u32).collect::<Vec<_>>());
    }

    #[test]
    fn specials_are_stripped() {
        assert_eq!(detokenize(&[BOS, 104, 105, EOS, PAD]).unwrap(), "hi");
        assert!(matches!(detokenize(&[259]), Err(Error::TokenOutOfRange { id: 259, .. })));
    }
}
