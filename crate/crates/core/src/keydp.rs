//! Private keys, their cosine-distance sensitivity and Laplace noise for
//! the key view fed to the signature network during training.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KEY_BITS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyError {
    #[error("key for {0:?} is all zeros")]
    ZeroKey(String),
    #[error("need at least {need} keys, got {got}")]
    TooFewKeys { need: usize, got: usize },
    #[error("cannot draw {0} distinct nonzero 32-bit keys")]
    TooManyKeys(u64),
    #[error("duplicate user id {0:?}")]
    DuplicateUser(String),
    #[error("unknown user id {0:?}")]
    UnknownUser(String),
    #[error("invalid DP config: {0}")]
    BadConfig(String),
    #[error("key file: {0}")]
    Format(String),
}

/// A user's 32-bit private key. Bit 0 is the most significant bit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PrivateKey {
    user_id: String,
    bits: u32,
}

impl PrivateKey {
    pub fn new(user_id: impl Into<String>, bits: u32) -> Result<Self, KeyError> {
        let user_id = user_id.into();
        if bits == 0 {
            return Err(KeyError::ZeroKey(user_id));
        }
        Ok(PrivateKey { user_id, bits })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn packed(&self) -> u32 {
        self.bits
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.bits >> (KEY_BITS - 1 - i)) & 1 == 1
    }

    pub fn bits(&self) -> [u8; KEY_BITS] {
        std::array::from_fn(|i| self.bit(i) as u8)
    }

    /// Same user, bit `i` flipped (an adjacent key).
    pub fn with_bit_flipped(&self, i: usize) -> Result<Self, KeyError> {
        PrivateKey::new(self.user_id.clone(), self.bits ^ (1 << (KEY_BITS - 1 - i)))
    }

    /// Noise-free real view used at inference.
    pub fn clean_view(&self) -> KeyView {
        KeyView {
            reals: self.bits().map(|b| b as f32),
        }
    }

    pub fn to_hex(&self) -> String {
        format!("{:08x}", self.bits)
    }
}

/// Real-valued key as fed to the network: bits, optionally plus noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyView {
    pub reals: [f32; KEY_BITS],
}

/// Training-time view `bits + η`.
pub type NoisedKey = KeyView;

#[derive(Debug, Clone, PartialEq)]
pub struct KeySet {
    keys: Vec<PrivateKey>,
}

impl KeySet {
    pub fn new(keys: Vec<PrivateKey>) -> Result<Self, KeyError> {
        let mut seen = HashSet::new();
        for k in &keys {
            if !seen.insert(k.user_id.as_str()) {
                return Err(KeyError::DuplicateUser(k.user_id.clone()));
            }
        }
        Ok(KeySet { keys })
    }

    pub fn keys(&self) -> &[PrivateKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, user_id: &str) -> Result<&PrivateKey, KeyError> {
        self.keys
            .iter()
            .find(|k| k.user_id == user_id)
            .ok_or_else(|| KeyError::UnknownUser(user_id.to_string()))
    }

    pub fn index_of(&self, user_id: &str) -> Result<usize, KeyError> {
        self.keys
            .iter()
            .position(|k| k.user_id == user_id)
            .ok_or_else(|| KeyError::UnknownUser(user_id.to_string()))
    }

    pub fn to_json(&self) -> String {
        let file = KeyFile {
            version: 1,
            keys: self
                .keys
                .iter()
                .map(|k| KeyEntry {
                    user_id: k.user_id.clone(),
                    bits_hex: k.to_hex(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("key file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, KeyError> {
        let file: KeyFile = serde_json::from_str(text).map_err(|e| KeyError::Format(e.to_string()))?;
        if file.version != 1 {
            return Err(KeyError::Format(format!("unsupported version {}", file.version)));
        }
        let keys = file
            .keys
            .into_iter()
            .map(|e| {
                if e.bits_hex.len() != 8 || !e.bits_hex.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(KeyError::Format(format!(
                        "bits_hex for {:?} must be 8 hex digits",
                        e.user_id
                    )));
                }
                let bits = u32::from_str_radix(&e.bits_hex, 16).map_err(|err| KeyError::Format(err.to_string()))?;
                PrivateKey::new(e.user_id, bits)
            })
            .collect::<Result<Vec<_>, _>>()?;
        KeySet::new(keys)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyFile {
    version: u32,
    keys: Vec<KeyEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyEntry {
    user_id: String,
    bits_hex: String,
}

pub fn default_user_id(i: usize) -> String {
    format!("user_{i:03}")
}

/// `n` distinct nonzero keys for `user_000..`, drawn uniformly with rejection.
pub fn generate_keys<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<KeySet, KeyError> {
    generate_keys_for((0..n).map(default_user_id).collect(), rng)
}

pub fn generate_keys_for<R: Rng + ?Sized>(user_ids: Vec<String>, rng: &mut R) -> Result<KeySet, KeyError> {
    let n = user_ids.len();
    if n == 0 {
        return Err(KeyError::TooFewKeys { need: 1, got: 0 });
    }
    if n as u64 > u32::MAX as u64 {
        return Err(KeyError::TooManyKeys(n as u64));
    }
    let mut used = HashSet::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    for id in user_ids {
        let bits = loop {
            let candidate: u32 = rng.random();
            if candidate != 0 && used.insert(candidate) {
                break candidate;
            }
        };
        keys.push(PrivateKey::new(id, bits)?);
    }
    KeySet::new(keys)
}

/// `1 − cos∠(a, b)` over the bit vectors; in `[0, 1]` for binary keys.
pub fn cosine_distance(a: &PrivateKey, b: &PrivateKey) -> Result<f64, KeyError> {
    for k in [a, b] {
        if k.bits == 0 {
            return Err(KeyError::ZeroKey(k.user_id.clone()));
        }
    }
    let dot = (a.bits & b.bits).count_ones() as f64;
    let na = (a.bits.count_ones() as f64).sqrt();
    let nb = (b.bits.count_ones() as f64).sqrt();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 1.0))
}

/// Largest pairwise cosine distance in the set.
pub fn global_sensitivity(keys: &KeySet) -> Result<f64, KeyError> {
    if keys.len() < 2 {
        return Err(KeyError::TooFewKeys {
            need: 2,
            got: keys.len(),
        });
    }
    let mut best = 0.0f64;
    for (i, a) in keys.keys.iter().enumerate() {
        for b in &keys.keys[i + 1..] {
            best = best.max(cosine_distance(a, b)?);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta_k: f64,
    /// Laplace scale `delta_k / epsilon`.
    pub b: f64,
}

impl DpConfig {
    pub fn new(epsilon: f64, delta_k: f64) -> Result<Self, KeyError> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(KeyError::BadConfig(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(0.0..=1.0).contains(&delta_k) {
            return Err(KeyError::BadConfig(format!("delta_k must lie in [0, 1], got {delta_k}")));
        }
        Ok(DpConfig {
            epsilon,
            delta_k,
            b: delta_k / epsilon,
        })
    }

    /// Sensitivity measured over `keys`, frozen at this point.
    pub fn for_keys(epsilon: f64, keys: &KeySet) -> Result<Self, KeyError> {
        DpConfig::new(epsilon, global_sensitivity(keys)?)
    }
}

/// i.i.d. Laplace(0, b) draws by inverse CDF.
pub fn sample_laplace<R: Rng + ?Sized>(b: f64, count: usize, rng: &mut R) -> Vec<f64> {
    if b <= 0.0 {
        return vec![0.0; count];
    }
    (0..count)
        .map(|_| {
            let u = loop {
                let u = rng.random::<f64>() - 0.5;
                if u > -0.5 {
                    break u;
                }
            };
            -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect()
}

/// `bits + η` with fresh noise on every call.
pub fn noised_key<R: Rng + ?Sized>(key: &PrivateKey, cfg: &DpConfig, rng: &mut R) -> NoisedKey {
    let noise = sample_laplace(cfg.b, KEY_BITS, rng);
    let bits = key.bits();
    KeyView {
        reals: std::array::from_fn(|i| (bits[i] as f64 + noise[i]) as f32),
    }
}
