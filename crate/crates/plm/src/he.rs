//! Packed homomorphic encryption for the private prediction protocol.
//!
//! P1 (the client) holds the secret key and encrypts one-hot slot vectors;
//! P0 (the server) holds only the public parameters and evaluates
//! ciphertext-plaintext multiplications plus ciphertext additions, which is
//! all the retrieval needs (no relinearization or rotation keys).
//!
//! Two backends sit behind the same surface:
//! - `Bfv`: BFV with SIMD batching via the `fhe` crate. Parameters are
//!   rebuilt deterministically on both sides from the serialized
//!   [`HeConfig`], so the handshake carries the config block only.
//! - `ClearStub`: a cleartext stand-in with the same wire shape, for fast
//!   tests and CI. It provides NO confidentiality and is rejected unless
//!   explicitly requested.

use fhe::bfv::{BfvParameters, BfvParametersBuilder, Ciphertext, Encoding, Plaintext, SecretKey};
use fhe_traits::{
    DeserializeParametrized, FheDecoder, FheDecrypter, FheEncoder, FheEncrypter, Serialize,
};
use rand::{CryptoRng, RngCore};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Default packing width: slots consumed per ciphertext.
pub const DEFAULT_SLOTS: usize = 2048;

/// Ring degree and total ciphertext modulus bits giving 128-bit security
/// (ternary secret, per the homomorphic encryption standard's tables).
const SECURITY_128: &[(usize, usize)] = &[(2048, 54), (4096, 109), (8192, 218), (16384, 438)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HeBackend {
    Bfv,
    /// Cleartext pass-through; insecure by construction, test use only.
    ClearStub,
}

/// Scheme parameters, serialized into the session handshake so both sides
/// instantiate identical parameter objects.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HeConfig {
    pub backend: HeBackend,
    pub degree: usize,
    pub plaintext_modulus: u64,
    pub moduli_bits: Vec<usize>,
    /// Slots used per ciphertext; at most `degree` for BFV.
    pub slots: usize,
}

impl HeConfig {
    /// Production BFV parameters: degree 4096, coefficient modulus of
    /// 109 bits (128-bit secure), batching-friendly plaintext modulus
    /// 1073153 (smallest prime above 2^20 congruent to 1 mod 8192), 2048
    /// slots consumed per ciphertext.
    pub fn bfv_default() -> Self {
        HeConfig {
            backend: HeBackend::Bfv,
            degree: 4096,
            plaintext_modulus: 1_073_153,
            moduli_bits: vec![54, 55],
            slots: DEFAULT_SLOTS,
        }
    }

    /// Cleartext stub with the default packing width.
    pub fn stub() -> Self {
        HeConfig {
            backend: HeBackend::ClearStub,
            degree: 0,
            plaintext_modulus: 1_073_153,
            moduli_bits: vec![],
            slots: DEFAULT_SLOTS,
        }
    }

    /// Reject parameter sets below 128-bit security (or malformed ones).
    /// The stub never passes; callers must opt into it explicitly via
    /// `allow_insecure`.
    pub fn validate(&self, allow_insecure: bool) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::validation("slot count must be positive"));
        }
        if self.plaintext_modulus < 2 {
            return Err(Error::validation("plaintext modulus too small"));
        }
        match self.backend {
            HeBackend::ClearStub => {
                if allow_insecure {
                    Ok(())
                } else {
                    Err(Error::InsecureParams(
                        "cleartext stub backend provides no confidentiality".into(),
                    ))
                }
            }
            HeBackend::Bfv => {
                if self.slots > self.degree {
                    return Err(Error::validation("more slots than ring degree"));
                }
                let total: usize = self.moduli_bits.iter().sum();
                let cap = SECURITY_128
                    .iter()
                    .find(|(d, _)| *d == self.degree)
                    .map(|(_, bits)| *bits)
                    .ok_or_else(|| {
                        Error::InsecureParams(format!("unsupported ring degree {}", self.degree))
                    })?;
                if total > cap {
                    return Err(Error::InsecureParams(format!(
                        "{} modulus bits exceed the 128-bit bound of {} at degree {}",
                        total, cap, self.degree
                    )));
                }
                Ok(())
            }
        }
    }

    /// Handshake wire form.
    pub fn to_wire(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }

    pub fn from_wire(bytes: &[u8]) -> Result<HeConfig> {
        serde_json::from_slice(bytes).map_err(|e| Error::Decode(format!("he config: {e}")))
    }

    fn bfv_params(&self) -> Result<Arc<BfvParameters>> {
        BfvParametersBuilder::new()
            .set_degree(self.degree)
            .set_plaintext_modulus(self.plaintext_modulus)
            .set_moduli_sizes(&self.moduli_bits)
            .build_arc()
            .map_err(|e| Error::He(format!("parameter build: {e}")))
    }
}

const STUB_MAGIC: &[u8; 4] = b"STUB";

/// P1's side: key generation, encryption, decryption.
pub enum HeClient {
    Bfv {
        cfg: HeConfig,
        params: Arc<BfvParameters>,
        sk: SecretKey,
    },
    Stub {
        cfg: HeConfig,
    },
}

impl HeClient {
    pub fn new<R: RngCore + CryptoRng>(
        cfg: HeConfig,
        allow_insecure: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(allow_insecure)?;
        match cfg.backend {
            HeBackend::Bfv => {
                let params = cfg.bfv_params()?;
                let sk = SecretKey::random(&params, rng);
                Ok(HeClient::Bfv { cfg, params, sk })
            }
            HeBackend::ClearStub => Ok(HeClient::Stub { cfg }),
        }
    }

    pub fn config(&self) -> &HeConfig {
        match self {
            HeClient::Bfv { cfg, .. } => cfg,
            HeClient::Stub { cfg } => cfg,
        }
    }

    /// Encrypt up to `slots` values into one ciphertext.
    pub fn encrypt<R: RngCore + CryptoRng>(
        &self,
        slots: &[u64],
        rng: &mut R,
    ) -> Result<Vec<u8>> {
        let cfg = self.config();
        if slots.len() > cfg.slots {
            return Err(Error::validation("more values than slots"));
        }
        match self {
            HeClient::Bfv { params, sk, .. } => {
                let pt = Plaintext::try_encode(slots, Encoding::simd(), params)
                    .map_err(|e| Error::He(format!("encode: {e}")))?;
                let ct: Ciphertext = sk
                    .try_encrypt(&pt, rng)
                    .map_err(|e| Error::He(format!("encrypt: {e}")))?;
                Ok(ct.to_bytes())
            }
            HeClient::Stub { cfg } => {
                let mut out = Vec::with_capacity(4 + cfg.slots * 8);
                out.extend_from_slice(STUB_MAGIC);
                for i in 0..cfg.slots {
                    out.extend_from_slice(
                        &slots.get(i).copied().unwrap_or(0).to_le_bytes(),
                    );
                }
                Ok(out)
            }
        }
    }

    /// Decrypt one ciphertext into `slots` values.
    pub fn decrypt(&self, ct_bytes: &[u8]) -> Result<Vec<u64>> {
        match self {
            HeClient::Bfv { cfg, params, sk } => {
                let ct = Ciphertext::from_bytes(ct_bytes, params)
                    .map_err(|e| Error::He(format!("ciphertext decode: {e}")))?;
                let pt = sk
                    .try_decrypt(&ct)
                    .map_err(|e| Error::He(format!("decrypt: {e}")))?;
                let vals = Vec::<u64>::try_decode(&pt, Encoding::simd())
                    .map_err(|e| Error::He(format!("decode: {e}")))?;
                Ok(vals[..cfg.slots].to_vec())
            }
            HeClient::Stub { cfg } => stub_slots(ct_bytes, cfg.slots),
        }
    }
}

/// P0's side: parameters only, evaluates `sum_j ct_j * table_j`.
pub enum HeServer {
    Bfv {
        cfg: HeConfig,
        params: Arc<BfvParameters>,
    },
    Stub {
        cfg: HeConfig,
    },
}

impl HeServer {
    pub fn new(cfg: HeConfig, allow_insecure: bool) -> Result<Self> {
        cfg.validate(allow_insecure)?;
        match cfg.backend {
            HeBackend::Bfv => {
                let params = cfg.bfv_params()?;
                Ok(HeServer::Bfv { cfg, params })
            }
            HeBackend::ClearStub => Ok(HeServer::Stub { cfg }),
        }
    }

    pub fn config(&self) -> &HeConfig {
        match self {
            HeServer::Bfv { cfg, .. } => cfg,
            HeServer::Stub { cfg } => cfg,
        }
    }

    /// Homomorphic dot product of the ciphertext vector against plaintext
    /// slot tables: returns one ciphertext of `sum_j ct_j * table_j`, using
    /// only ciphertext-plaintext products and ciphertext sums.
    pub fn dot_accumulate(&self, cts: &[Vec<u8>], tables: &[Vec<u64>]) -> Result<Vec<u8>> {
        if cts.len() != tables.len() || cts.is_empty() {
            return Err(Error::validation("ciphertext/table count mismatch"));
        }
        match self {
            HeServer::Bfv { cfg, params } => {
                let mut acc: Option<Ciphertext> = None;
                for (ct_bytes, table) in cts.iter().zip(tables) {
                    if table.len() > cfg.slots {
                        return Err(Error::validation("table wider than slot count"));
                    }
                    let ct = Ciphertext::from_bytes(ct_bytes, params)
                        .map_err(|e| Error::He(format!("ciphertext decode: {e}")))?;
                    let pt = Plaintext::try_encode(table, Encoding::simd(), params)
                        .map_err(|e| Error::He(format!("table encode: {e}")))?;
                    let prod: Ciphertext = &ct * &pt;
                    acc = Some(match acc {
                        None => prod,
                        Some(a) => &a + &prod,
                    });
                }
                Ok(acc.unwrap().to_bytes())
            }
            HeServer::Stub { cfg } => {
                let t = cfg.plaintext_modulus;
                let mut acc = vec![0u64; cfg.slots];
                for (ct_bytes, table) in cts.iter().zip(tables) {
                    let slots = stub_slots(ct_bytes, cfg.slots)?;
                    for (i, s) in slots.iter().enumerate() {
                        let q = table.get(i).copied().unwrap_or(0) % t;
                        acc[i] = (acc[i] + (s % t) * q) % t;
                    }
                }
                let mut out = Vec::with_capacity(4 + cfg.slots * 8);
                out.extend_from_slice(STUB_MAGIC);
                for v in acc {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Ok(out)
            }
        }
    }
}

fn stub_slots(bytes: &[u8], slots: usize) -> Result<Vec<u64>> {
    if bytes.len() != 4 + slots * 8 || &bytes[..4] != STUB_MAGIC {
        return Err(Error::Decode("malformed stub ciphertext".into()));
    }
    Ok(bytes[4..]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn default_params_validate_as_secure() {
        HeConfig::bfv_default().validate(false).unwrap();
    }

    #[test]
    fn oversized_moduli_rejected() {
        let mut cfg = HeConfig::bfv_default();
        cfg.moduli_bits = vec![60, 60];
        assert!(matches!(
            cfg.validate(false),
            Err(Error::InsecureParams(_))
        ));
        cfg.moduli_bits = vec![54];
        cfg.degree = 1024;
        assert!(cfg.validate(false).is_err());
    }

    #[test]
    fn stub_requires_explicit_opt_in() {
        let cfg = HeConfig::stub();
        assert!(matches!(
            cfg.validate(false),
            Err(Error::InsecureParams(_))
        ));
        cfg.validate(true).unwrap();
    }

    #[test]
    fn config_wire_roundtrip() {
        for cfg in [HeConfig::bfv_default(), HeConfig::stub()] {
            let back = HeConfig::from_wire(&cfg.to_wire()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn stub_dot_selects_table_entry() {
        let cfg = HeConfig::stub();
        let client = HeClient::new(cfg.clone(), true, &mut rng()).unwrap();
        let server = HeServer::new(cfg.clone(), true).unwrap();
        let mut onehot = vec![0u64; cfg.slots];
        onehot[123] = 1;
        let ct = client.encrypt(&onehot, &mut rng()).unwrap();
        let table: Vec<u64> = (0..cfg.slots as u64).map(|i| i * 3 + 1).collect();
        let res = server.dot_accumulate(&[ct], &[table]).unwrap();
        let vals = client.decrypt(&res).unwrap();
        assert_eq!(vals[123], 123 * 3 + 1);
        assert_eq!(vals.iter().sum::<u64>(), 123 * 3 + 1);
    }

    #[test]
    fn bfv_dot_selects_table_entry_across_chunks() {
        let cfg = HeConfig::bfv_default();
        let client = HeClient::new(cfg.clone(), false, &mut rng()).unwrap();
        let server = HeServer::new(cfg.clone(), false).unwrap();
        // two chunks; the one-hot lives in the second chunk
        let zeros = vec![0u64; cfg.slots];
        let mut onehot = vec![0u64; cfg.slots];
        onehot[1500] = 1;
        let ct0 = client.encrypt(&zeros, &mut rng()).unwrap();
        let ct1 = client.encrypt(&onehot, &mut rng()).unwrap();
        let t0: Vec<u64> = (0..cfg.slots as u64).collect();
        let t1: Vec<u64> = (cfg.slots as u64..2 * cfg.slots as u64).collect();
        let res = server.dot_accumulate(&[ct0, ct1], &[t0, t1]).unwrap();
        let vals = client.decrypt(&res).unwrap();
        let expected = cfg.slots as u64 + 1500;
        assert_eq!(vals[1500], expected);
        assert_eq!(vals.iter().sum::<u64>() % cfg.plaintext_modulus, expected);
    }

    #[test]
    fn bfv_params_identical_across_instances() {
        let cfg = HeConfig::bfv_default();
        let a = cfg.bfv_params().unwrap();
        let b = cfg.bfv_params().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn server_without_secret_key_cannot_decrypt_shape() {
        // The server type has no decrypt surface at all; this asserts the
        // ciphertext is not trivially the plaintext for the BFV backend.
        let cfg = HeConfig::bfv_default();
        let client = HeClient::new(cfg.clone(), false, &mut rng()).unwrap();
        let mut onehot = vec![0u64; cfg.slots];
        onehot[9] = 1;
        let ct = client.encrypt(&onehot, &mut rng()).unwrap();
        assert!(ct.len() > 8 * cfg.slots);
        let as_u64: Vec<u64> = ct[..8 * 16]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_ne!(&as_u64[..cfg.slots.min(16)], &onehot[..16]);
    }
}
