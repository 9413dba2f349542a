/// Token id type shared by the tokenizer, datasets, and model.
pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const VOCAB_SIZE: usize = 259;

/// Byte-level tokenizer: one token per byte plus three specials.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        text.iter().map(|&b| b as TokenId).collect()
    }

    pub fn encode_str(&self, text: &str) -> Vec<TokenId> {
        self.encode(text.as_bytes())
    }

    /// Drops special tokens; returns the raw bytes.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect()
    }

    pub fn decode_lossy(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode(ids)).into_owned()
    }

    pub fn is_special(id: TokenId) -> bool {
        (BOS..=PAD).contains(&id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_identity(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let tok = ByteTokenizer;
            let ids = tok.encode(&bytes);
            prop_assert!(ids.iter().all(|&id| !ByteTokenizer::is_special(id)));
            prop_assert_eq!(tok.decode(&ids), bytes);
        }
    }

    #[test]
    fn specials_are_dropped_on_decode() {
        let tok = ByteTokenizer;
        assert_eq!(tok.decode(&[BOS, 104, 105, EOS, PAD]), b"hi");
        assert_eq!(tok.vocab_size(), 259);
    }
}
