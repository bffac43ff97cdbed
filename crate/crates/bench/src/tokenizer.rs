//! Byte-level tokenizer: one token per UTF-8 byte plus two specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

/// `BOS` followed by the bytes of `text`.
pub fn encode(text: &str) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(text.bytes().map(u32::from))
        .collect()
}

/// Bytes back to text; specials are dropped and invalid UTF-8 is replaced.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let t = encode("héllo");
        assert_eq!(t[0], BOS);
        assert_eq!(t.len(), 1 + "héllo".len());
        assert_eq!(decode(&t), "héllo");
        assert_eq!(decode(&[104, EOS, 105]), "hi");
    }
}
