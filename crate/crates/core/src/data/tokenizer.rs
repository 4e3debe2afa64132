//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by PAD, BOS, EOS.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const VOCAB_SIZE: usize = 259;
pub const DEFAULT_CONTEXT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    pub context_length: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            context_length: DEFAULT_CONTEXT,
        }
    }
}

impl Tokenizer {
    /// Panics if `context_length < 2`.
    pub fn new(context_length: usize) -> Self {
        assert!(context_length >= 2, "context must hold BOS and EOS");
        Tokenizer { context_length }
    }

    /// `[BOS, bytes.., EOS, PAD..]`, truncating the bytes so EOS always fits.
    pub fn encode(&self, caption: &[u8]) -> Vec<u32> {
        let keep = caption.len().min(self.context_length - 2);
        let mut ids = Vec::with_capacity(self.context_length);
        ids.push(BOS);
        ids.extend(caption[..keep].iter().map(|&b| u32::from(b)));
        ids.push(EOS);
        ids.resize(self.context_length, PAD);
        ids
    }

    pub fn encode_batch<S: AsRef<[u8]>>(&self, captions: &[S]) -> Vec<u32> {
        captions.iter().flat_map(|c| self.encode(c.as_ref())).collect()
    }

    /// Bytes up to the first EOS; special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_caption() {
        let ids = Tokenizer::default().encode(b"");
        assert_eq!(&ids[..3], &[BOS, EOS, PAD]);
        assert_eq!(ids.len(), 32);
    }

    #[test]
    fn truncation() {
        let ids = Tokenizer::default().encode(&[b'x'; 100]);
        assert_eq!(ids.len(), 32);
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[31], EOS);
        assert_eq!(ids[1..31].iter().filter(|&&t| t == u32::from(b'x')).count(), 30);
    }

    proptest! {
        #[test]
        fn round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..30)) {
            let tok = Tokenizer::default();
            let ids = tok.encode(&bytes);
            prop_assert_eq!(ids.len(), 32);
            prop_assert_eq!(tok.decode(&ids), bytes);
        }

        #[test]
        fn exactly_one_eos(bytes in proptest::collection::vec(any::<u8>(), 0..200), ctx in 2usize..64) {
            let ids = Tokenizer::new(ctx).encode(&bytes);
            prop_assert_eq!(ids.iter().filter(|&&t| t == EOS).count(), 1);
            prop_assert!(ids.iter().all(|&t| (t as usize) < VOCAB_SIZE));
        }
    }
}
