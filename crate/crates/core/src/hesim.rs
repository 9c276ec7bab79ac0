//! Simulated CKKS-style homomorphic vector arithmetic.
//!
//! Ciphertexts carry their payload privately inside this module together with
//! an explicit approximation-noise model. Encryption injects a clamped
//! Gaussian perturbation (`sigma` = 1e-8, clamped to the configured
//! magnitude, default 1e-7) — the decryption error an approximate-HE backend
//! exhibits. Every multiplicative operation injects a much smaller fresh
//! perturbation at 1e-4 of that scale, matching the relative precision of
//! 40-bit-scale ciphertext arithmetic; anything larger makes the iterative
//! comparison of [`HeSim::cipher_max`] unstable on near-tie inputs. Additions
//! only propagate operand noise. `noise_bound` is a sound overestimate of
//! |decrypted - exact|, monotonically non-decreasing under every operation.
//!
//! Payloads are readable only through `decrypt*` with the matching secret
//! key; nothing else on the public surface (including `Debug`) exposes them.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::fmath;
use crate::rng::{stream, Domain};
use crate::{Error, Result};

/// Default per-coordinate magnitude of the simulated decryption error.
pub const DEFAULT_NOISE_MAGNITUDE: f64 = 1e-7;
/// Standard deviation of the encryption perturbation.
pub const DEFAULT_NOISE_SIGMA: f64 = 1e-8;
/// Ratio of per-operation arithmetic noise to encryption noise.
const OP_NOISE_RATIO: f64 = 1e-4;

/// Who a key belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum KeyRole {
    /// Shared by every client (`Pkx`/`Skx`).
    ClientsShared,
    /// Held by the verifier server (`Pkv`/`Skv`).
    Verifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct KeyId(u64);

/// A keypair; possession of this value stands in for holding the secret key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    id: KeyId,
    role: KeyRole,
}

/// The shareable public half of a [`KeyPair`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    id: KeyId,
    role: KeyRole,
}

impl KeyPair {
    pub fn public(&self) -> PublicKey {
        PublicKey {
            id: self.id,
            role: self.role,
        }
    }

    pub fn key_id(&self) -> KeyId {
        self.id
    }

    pub fn role(&self) -> KeyRole {
        self.role
    }
}

impl PublicKey {
    pub fn key_id(&self) -> KeyId {
        self.id
    }

    pub fn role(&self) -> KeyRole {
        self.role
    }
}

/// Encrypted vector bound to a key id.
#[derive(Clone)]
pub struct CipherVector {
    key: KeyId,
    payload: Vec<f64>,
    op_depth: u32,
    noise_bound: f64,
}

/// Encrypted scalar bound to a key id.
#[derive(Clone)]
pub struct CipherScalar {
    key: KeyId,
    payload: f64,
    op_depth: u32,
    noise_bound: f64,
}

impl CipherVector {
    pub fn key_id(&self) -> KeyId {
        self.key
    }

    pub fn dim(&self) -> usize {
        self.payload.len()
    }

    pub fn op_depth(&self) -> u32 {
        self.op_depth
    }

    pub fn noise_bound(&self) -> f64 {
        self.noise_bound
    }
}

impl CipherScalar {
    pub fn key_id(&self) -> KeyId {
        self.key
    }

    pub fn op_depth(&self) -> u32 {
        self.op_depth
    }

    pub fn noise_bound(&self) -> f64 {
        self.noise_bound
    }
}

impl fmt::Debug for CipherVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CipherVector")
            .field("key", &self.key)
            .field("dim", &self.payload.len())
            .field("op_depth", &self.op_depth)
            .field("noise_bound", &self.noise_bound)
            .finish_non_exhaustive()
    }
}

impl fmt::Debug for CipherScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CipherScalar")
            .field("key", &self.key)
            .field("op_depth", &self.op_depth)
            .field("noise_bound", &self.noise_bound)
            .finish_non_exhaustive()
    }
}

fn maxabs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, &x| m.max(fmath::abs(x)))
}

/// The simulated backend: key registry and noise source.
pub struct HeSim {
    rng: ChaCha12Rng,
    key_rng: ChaCha12Rng,
    sigma: f64,
    clamp: f64,
}

impl HeSim {
    /// Backend with the default noise calibration (round-trip error within
    /// 1e-7 per coordinate).
    pub fn new(seed: u64) -> Self {
        Self::with_noise(seed, DEFAULT_NOISE_SIGMA, DEFAULT_NOISE_MAGNITUDE)
    }

    pub fn with_noise(seed: u64, sigma: f64, clamp: f64) -> Self {
        HeSim {
            rng: stream(seed, Domain::HeBackend, 0, 0),
            key_rng: stream(seed, Domain::KeyGen, 0, 0),
            sigma,
            clamp,
        }
    }

    /// Configured per-coordinate round-trip error magnitude.
    pub fn noise_magnitude(&self) -> f64 {
        self.clamp
    }

    /// Encryption perturbation, clamped so a round trip never exceeds the
    /// configured magnitude.
    fn perturb_enc(&mut self) -> f64 {
        let z: f64 = self.rng.sample(rand_distr::StandardNormal);
        (self.sigma * z).clamp(-self.clamp, self.clamp)
    }

    /// Arithmetic perturbation of one multiplicative operation.
    fn perturb_op(&mut self) -> f64 {
        let z: f64 = self.rng.sample(rand_distr::StandardNormal);
        (self.sigma * OP_NOISE_RATIO * z).clamp(-self.op_clamp(), self.op_clamp())
    }

    fn op_clamp(&self) -> f64 {
        self.clamp * OP_NOISE_RATIO
    }

    pub fn keygen(&mut self, role: KeyRole) -> KeyPair {
        KeyPair {
            id: KeyId(self.key_rng.gen()),
            role,
        }
    }

    pub fn encrypt(&mut self, pk: &PublicKey, v: &[f64]) -> Result<CipherVector> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Range("cannot encrypt non-finite values".into()));
        }
        let payload = v.iter().map(|&x| x + self.perturb_enc()).collect();
        Ok(CipherVector {
            key: pk.id,
            payload,
            op_depth: 0,
            noise_bound: self.clamp,
        })
    }

    pub fn encrypt_scalar(&mut self, pk: &PublicKey, x: f64) -> Result<CipherScalar> {
        if !x.is_finite() {
            return Err(Error::Range("cannot encrypt non-finite values".into()));
        }
        Ok(CipherScalar {
            key: pk.id,
            payload: x + self.perturb_enc(),
            op_depth: 0,
            noise_bound: self.clamp,
        })
    }

    pub fn decrypt(&self, sk: &KeyPair, c: &CipherVector) -> Result<Vec<f64>> {
        if sk.id != c.key {
            return Err(Error::KeyMismatch(
                "ciphertext was not encrypted under this keypair".into(),
            ));
        }
        Ok(c.payload.clone())
    }

    pub fn decrypt_scalar(&self, sk: &KeyPair, c: &CipherScalar) -> Result<f64> {
        if sk.id != c.key {
            return Err(Error::KeyMismatch(
                "ciphertext was not encrypted under this keypair".into(),
            ));
        }
        Ok(c.payload)
    }

    fn check_pair(&self, a: KeyId, b: KeyId, da: usize, db: usize) -> Result<()> {
        if a != b {
            return Err(Error::KeyMismatch("operands under different keys".into()));
        }
        if da != db {
            return Err(Error::ShapeMismatch(format!("cipher dims {da} != {db}")));
        }
        Ok(())
    }

    /// Ciphertext addition. Noise bounds add; no fresh perturbation.
    pub fn add(&self, a: &CipherVector, b: &CipherVector) -> Result<CipherVector> {
        self.check_pair(a.key, b.key, a.dim(), b.dim())?;
        Ok(CipherVector {
            key: a.key,
            payload: a.payload.iter().zip(&b.payload).map(|(x, y)| x + y).collect(),
            op_depth: a.op_depth.max(b.op_depth),
            noise_bound: a.noise_bound + b.noise_bound,
        })
    }

    /// Plaintext-scalar multiplication; multiplicative, injects fresh noise.
    pub fn scale(&mut self, a: &CipherVector, s: f64) -> CipherVector {
        let payload = a.payload.iter().map(|&x| x * s + self.perturb_op()).collect();
        CipherVector {
            key: a.key,
            payload,
            op_depth: a.op_depth + 1,
            noise_bound: fmath::abs(s) * a.noise_bound + self.op_clamp(),
        }
    }

    /// Coordinate-wise ciphertext product.
    pub fn hadamard(&mut self, a: &CipherVector, b: &CipherVector) -> Result<CipherVector> {
        self.check_pair(a.key, b.key, a.dim(), b.dim())?;
        let payload = a
            .payload
            .iter()
            .zip(&b.payload)
            .map(|(x, y)| x * y + self.perturb_op())
            .collect();
        let bound = maxabs(&a.payload) * b.noise_bound
            + maxabs(&b.payload) * a.noise_bound
            + a.noise_bound * b.noise_bound
            + self.op_clamp();
        Ok(CipherVector {
            key: a.key,
            payload,
            op_depth: a.op_depth.max(b.op_depth) + 1,
            noise_bound: bound,
        })
    }

    /// Coordinate-wise product with a plaintext mask vector.
    pub fn hadamard_plain(&mut self, a: &CipherVector, v: &[f64]) -> Result<CipherVector> {
        if v.len() != a.dim() {
            return Err(Error::ShapeMismatch(format!(
                "mask dim {} != cipher dim {}",
                v.len(),
                a.dim()
            )));
        }
        let payload = a
            .payload
            .iter()
            .zip(v)
            .map(|(x, m)| x * m + self.perturb_op())
            .collect();
        Ok(CipherVector {
            key: a.key,
            payload,
            op_depth: a.op_depth + 1,
            noise_bound: maxabs(v) * a.noise_bound + self.op_clamp(),
        })
    }

    /// Inner product of two ciphertext vectors.
    pub fn inner(&mut self, a: &CipherVector, b: &CipherVector) -> Result<CipherScalar> {
        self.check_pair(a.key, b.key, a.dim(), b.dim())?;
        let v = fmath::dot(&a.payload, &b.payload) + self.perturb_op();
        let bound = a
            .payload
            .iter()
            .zip(&b.payload)
            .map(|(x, y)| {
                fmath::abs(*x) * b.noise_bound
                    + fmath::abs(*y) * a.noise_bound
                    + a.noise_bound * b.noise_bound
            })
            .sum::<f64>()
            + self.op_clamp();
        Ok(CipherScalar {
            key: a.key,
            payload: v,
            op_depth: a.op_depth.max(b.op_depth) + 1,
            noise_bound: bound,
        })
    }

    /// Broadcast product of a ciphertext vector by a ciphertext scalar.
    pub fn scale_by(&mut self, a: &CipherVector, s: &CipherScalar) -> Result<CipherVector> {
        if a.key != s.key {
            return Err(Error::KeyMismatch("operands under different keys".into()));
        }
        let payload = a.payload.iter().map(|&x| x * s.payload + self.perturb_op()).collect();
        let bound = maxabs(&a.payload) * s.noise_bound
            + fmath::abs(s.payload) * a.noise_bound
            + a.noise_bound * s.noise_bound
            + self.op_clamp();
        Ok(CipherVector {
            key: a.key,
            payload,
            op_depth: a.op_depth.max(s.op_depth) + 1,
            noise_bound: bound,
        })
    }

    pub fn s_add(&self, a: &CipherScalar, b: &CipherScalar) -> Result<CipherScalar> {
        if a.key != b.key {
            return Err(Error::KeyMismatch("operands under different keys".into()));
        }
        Ok(CipherScalar {
            key: a.key,
            payload: a.payload + b.payload,
            op_depth: a.op_depth.max(b.op_depth),
            noise_bound: a.noise_bound + b.noise_bound,
        })
    }

    pub fn s_sub(&self, a: &CipherScalar, b: &CipherScalar) -> Result<CipherScalar> {
        if a.key != b.key {
            return Err(Error::KeyMismatch("operands under different keys".into()));
        }
        Ok(CipherScalar {
            key: a.key,
            payload: a.payload - b.payload,
            op_depth: a.op_depth.max(b.op_depth),
            noise_bound: a.noise_bound + b.noise_bound,
        })
    }

    /// Plaintext affine map `mul * a + add`; multiplicative.
    pub fn s_affine(&mut self, a: &CipherScalar, mul: f64, add: f64) -> CipherScalar {
        CipherScalar {
            key: a.key,
            payload: mul * a.payload + add + self.perturb_op(),
            op_depth: a.op_depth + 1,
            noise_bound: fmath::abs(mul) * a.noise_bound + self.op_clamp(),
        }
    }

    pub fn s_mul(&mut self, a: &CipherScalar, b: &CipherScalar) -> Result<CipherScalar> {
        if a.key != b.key {
            return Err(Error::KeyMismatch("operands under different keys".into()));
        }
        let bound = fmath::abs(a.payload) * b.noise_bound
            + fmath::abs(b.payload) * a.noise_bound
            + a.noise_bound * b.noise_bound
            + self.op_clamp();
        Ok(CipherScalar {
            key: a.key,
            payload: a.payload * b.payload + self.perturb_op(),
            op_depth: a.op_depth.max(b.op_depth) + 1,
            noise_bound: bound,
        })
    }

    /// Shift a value from [-1, 1] into [0, 1]: `(s + 1) / 2`. Order-preserving,
    /// so comparisons against a shifted threshold are unchanged.
    pub fn shift_to_unit(&mut self, s: &CipherScalar) -> CipherScalar {
        self.s_affine(s, 0.5, 0.5)
    }

    /// Iterative ciphertext maximum of two encrypted values in (0, 1).
    ///
    /// Computes `(a+b)/2 + sqrt(((a-b)/2)^2)` where the square root is
    /// approximated by `d` rounds of the quadratic iteration
    /// `a_{n+1} = a_n (1 - b_n/2)`, `b_{n+1} = b_n^2 (b_n - 3)/4`.
    /// With `d = 29` the result matches the true maximum to better than
    /// 2^-16. The ciphertext op cannot inspect its inputs; range validation
    /// belongs to the decryption side.
    pub fn cipher_max(
        &mut self,
        a: &CipherScalar,
        b: &CipherScalar,
        d: u32,
    ) -> Result<CipherScalar> {
        if d == 0 {
            return Err(Error::Range("iteration count d must be >= 1".into()));
        }
        let sum = self.s_add(a, b)?;
        let q1 = self.s_affine(&sum, 0.5, 0.0);
        let diff = self.s_sub(a, b)?;
        let q2 = self.s_affine(&diff, 0.5, 0.0);
        let q2sq = self.s_mul(&q2, &q2)?;
        let mut an = q2sq.clone();
        let mut bn = self.s_affine(&q2sq, 1.0, -1.0);
        for _ in 0..d {
            let half = self.s_affine(&bn, -0.5, 1.0);
            let a_next = self.s_mul(&an, &half)?;
            let bsq = self.s_mul(&bn, &bn)?;
            let cubic = self.s_affine(&bn, 0.25, -0.75);
            let b_next = self.s_mul(&bsq, &cubic)?;
            an = a_next;
            bn = b_next;
        }
        self.s_add(&q1, &an)
    }
}

/// The bare comparison iteration on plaintext floats, exactly as the
/// ciphertext op computes it (minus noise). The plaintext reference pipeline
/// uses this to stay step-for-step identical with the encrypted path.
pub fn max_iteration_raw(a: f64, b: f64, d: u32) -> f64 {
    let q1 = (a + b) / 2.0;
    let q2 = (a - b) / 2.0;
    let mut an = q2 * q2;
    let mut bn = q2 * q2 - 1.0;
    for _ in 0..d {
        let a_next = an * (1.0 - bn / 2.0);
        let b_next = bn * bn * ((bn - 3.0) / 4.0);
        an = a_next;
        bn = b_next;
    }
    q1 + an
}

/// Plaintext mirror of [`HeSim::cipher_max`], with the domain check the
/// ciphertext op cannot perform. Used for decryption-side range validation.
pub fn plain_max_iteration(a: f64, b: f64, d: u32) -> Result<f64> {
    if !(0.0 < a && a < 1.0 && 0.0 < b && b < 1.0) {
        return Err(Error::Range(format!("inputs ({a}, {b}) outside (0, 1)")));
    }
    if d == 0 {
        return Err(Error::Range("iteration count d must be >= 1".into()));
    }
    Ok(max_iteration_raw(a, b, d))
}
