//! Hashed bag-of-tokens features.
//!
//! Texts are lowercased, split on non-alphanumeric characters, and each token
//! is hashed into a fixed 2^15 feature space. Counts are scaled by
//! 1/sqrt(total tokens), so token order never matters and repeated tokens
//! accumulate.

/// Size of the hashed feature space.
pub const NUM_FEATURES: usize = 1 << 15;

/// Sparse hashed feature vector with a cached L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    entries: Vec<(u32, f64)>,
    norm: f64,
}

impl FeatureVector {
    /// Entries sorted by feature index, duplicates merged.
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }
}

/// FNV-1a 64-bit. Stable across platforms and releases, unlike the std hasher.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hash_token(token: &str) -> u32 {
    (fnv1a(token.as_bytes()) % NUM_FEATURES as u64) as u32
}

pub(crate) fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Hashes a text into the feature space. Empty text yields the zero vector.
pub fn featurize(text: &str) -> FeatureVector {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return FeatureVector {
            entries: Vec::new(),
            norm: 0.0,
        };
    }
    let scale = 1.0 / (tokens.len() as f64).sqrt();
    let mut counts: Vec<(u32, f64)> = Vec::with_capacity(tokens.len());
    for token in &tokens {
        counts.push((hash_token(token), 1.0));
    }
    counts.sort_by_key(|&(idx, _)| idx);
    let mut entries: Vec<(u32, f64)> = Vec::with_capacity(counts.len());
    for (idx, c) in counts {
        match entries.last_mut() {
            Some((last_idx, v)) if *last_idx == idx => *v += c,
            _ => entries.push((idx, c)),
        }
    }
    for (_, v) in entries.iter_mut() {
        *v *= scale;
    }
    let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    FeatureVector { entries, norm }
}
