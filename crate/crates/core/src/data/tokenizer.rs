//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by four specials.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const SEP: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

/// `[BOS, bytes..., EOS]`.
pub fn tokenize(text: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.bytes().map(u32::from));
    ids.push(EOS);
    ids
}

/// Raw byte ids without specials.
pub fn encode_bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Byte content of `ids`; special tokens are dropped.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&i| i < 256)
        .map(|&i| i as u8)
        .collect()
}

pub fn is_special(id: u32) -> bool {
    (PAD..=SEP).contains(&id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_cases() {
        assert_eq!(tokenize(""), vec![BOS, EOS]);
        assert_eq!(tokenize("ab"), vec![BOS, 97, 98, EOS]);
        assert!(is_special(SEP) && !is_special(255));
    }

    proptest! {
        #[test]
        fn lossless_and_injective(a in ".*", b in ".*") {
            prop_assert_eq!(detokenize(&tokenize(&a)), a.as_bytes().to_vec());
            if a != b {
                prop_assert_ne!(tokenize(&a), tokenize(&b));
            }
        }
    }
}
