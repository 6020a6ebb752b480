//! Byte-level tokenizer: one token per UTF-8 byte.

/// Reserved as both padding and stop marker.
pub const STOP_TOKEN: u8 = 0x00;

pub fn encode(text: &str) -> Vec<u8> {
    text.as_bytes().to_vec()
}

/// Lossy for token streams that are not valid UTF-8 (e.g. a generation cut
/// mid-character); exact for anything produced by [`encode`].
pub fn decode(tokens: &[u8]) -> String {
    String::from_utf8_lossy(tokens).into_owned()
}
