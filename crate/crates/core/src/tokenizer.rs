//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by
//! begin-of-sequence and end-of-sequence specials. No external vocabulary.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;

/// Total id count (256 bytes + BOS + EOS).
pub const VOCAB_SIZE: usize = 258;

/// BOS followed by the text's bytes. Used for prompts.
pub fn encode(text: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(text.bytes().map(u32::from));
    ids
}

/// BOS + bytes + EOS. Used for training and perplexity sequences.
pub fn encode_with_eos(text: &str) -> Vec<u32> {
    let mut ids = encode(text);
    ids.push(EOS);
    ids
}

/// Bytes back to text, skipping specials; invalid UTF-8 is replaced.
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_covers_bytes_plus_specials() {
        assert_eq!(VOCAB_SIZE, 258);
        assert_eq!(BOS, 256);
        assert_eq!(EOS, 257);
    }

    #[test]
    fn encode_decode_round_trip() {
        let text = "the owl lives in the barn? 42!";
        let ids = encode_with_eos(text);
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(ids.len(), text.len() + 2);
        assert_eq!(decode(&ids), text);
    }

    #[test]
    fn decode_skips_specials() {
        assert_eq!(decode(&[BOS, b'h' as u32, b'i' as u32, EOS]), "hi");
    }

    #[test]
    fn every_byte_id_below_specials() {
        let ids = encode("\u{00}\u{7f}");
        assert!(ids[1..].iter().all(|&id| id < 256));
    }
}
