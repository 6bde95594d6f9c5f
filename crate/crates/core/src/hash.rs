//! Content hashes chained across pipeline artifacts.

use sha2::{Digest, Sha256};

#[derive(Default)]
pub struct ContentHasher(Sha256);

impl ContentHasher {
    pub fn new(kind: &str) -> Self {
        let mut h = ContentHasher(Sha256::new());
        h.str(kind);
        h
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.update(v.to_bits().to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        for v in vs {
            self.f64(*v);
        }
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}
