//! Paillier additively homomorphic encryption with `g = n + 1`.

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PaillierError {
    #[error("message is not below the modulus")]
    MessageOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub n: BigUint,
    pub n2: BigUint,
    pub g: BigUint,
}

/// `λ = lcm(p-1, q-1)` and `μ = λ^-1 mod n`, plus the CRT constants used
/// for decryption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrivateKey {
    pub lambda: BigUint,
    pub mu: BigUint,
    p: BigUint,
    q: BigUint,
    p2: BigUint,
    q2: BigUint,
    hp: BigUint,
    hq: BigUint,
    p_inv_q: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext(pub BigUint);

const SMALL_PRIMES: [u32; 54] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107,
    109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229,
    233, 239, 241, 251, 257,
];

const MILLER_RABIN_ROUNDS: usize = 32;

fn is_probable_prime<R: RngCore>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return *n == two;
    }
    let n1 = n - 1u32;
    let s = n1.trailing_zeros().expect("n > 1");
    let d = &n1 >> s;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = rng.gen_biguint_range(&two, &n1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n1 {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn random_prime<R: RngCore>(bits: u64, rng: &mut R) -> BigUint {
    loop {
        let mut c = rng.gen_biguint(bits);
        c.set_bit(bits - 1, true);
        c.set_bit(bits - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, rng) {
            return c;
        }
    }
}

/// `L_x(u) = (u - 1) / x`
fn l(u: &BigUint, x: &BigUint) -> BigUint {
    (u - 1u32) / x
}

/// Key pair with an `bits`-bit modulus, deterministic in `seed`.
pub fn keygen(bits: u64, seed: u64) -> (PublicKey, PrivateKey) {
    assert!(bits >= 16, "modulus too small");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (p, q) = loop {
        let p = random_prime(bits / 2, &mut rng);
        let q = random_prime(bits - bits / 2, &mut rng);
        if p != q && (&p * &q).gcd(&((&p - 1u32) * (&q - 1u32))).is_one() {
            break (p, q);
        }
    };
    let n = &p * &q;
    let n2 = &n * &n;
    let g = &n + 1u32;
    let lambda = (&p - 1u32).lcm(&(&q - 1u32));
    let mu = l(&g.modpow(&lambda, &n2), &n).modinv(&n).expect("g = n + 1 gives an invertible L");
    let p2 = &p * &p;
    let q2 = &q * &q;
    let hp = l(&g.modpow(&(&p - 1u32), &p2), &p).modinv(&p).expect("invertible mod p");
    let hq = l(&g.modpow(&(&q - 1u32), &q2), &q).modinv(&q).expect("invertible mod q");
    let p_inv_q = p.modinv(&q).expect("distinct primes");
    (
        PublicKey { n, n2, g },
        PrivateKey {
            lambda,
            mu,
            p,
            q,
            p2,
            q2,
            hp,
            hq,
            p_inv_q,
        },
    )
}

impl PublicKey {
    /// `g^m · r^n mod n²` with `g^m = 1 + m·n`.
    pub fn encrypt<R: RngCore>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, PaillierError> {
        if *m >= self.n {
            return Err(PaillierError::MessageOutOfRange);
        }
        let r = loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                break r;
            }
        };
        let gm = (m * &self.n + 1u32) % &self.n2;
        Ok(Ciphertext(gm * r.modpow(&self.n, &self.n2) % &self.n2))
    }

    /// Ciphertext of `m1 + m2 mod n`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Ciphertext {
        Ciphertext(&a.0 * &b.0 % &self.n2)
    }

    /// Ciphertext of `k · m mod n`. Negative `k` goes through the inverse
    /// ciphertext so the exponent stays small.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigInt) -> Ciphertext {
        let (sign, mag) = k.clone().into_parts();
        match sign {
            Sign::NoSign => Ciphertext(BigUint::one()),
            Sign::Plus => Ciphertext(c.0.modpow(&mag, &self.n2)),
            Sign::Minus => {
                let inv = c.0.modinv(&self.n2).expect("ciphertexts are units mod n²");
                Ciphertext(inv.modpow(&mag, &self.n2))
            }
        }
    }

    /// Maps a signed integer into `[0, n)`.
    pub fn encode_signed(&self, v: &BigInt) -> Result<BigUint, PaillierError> {
        let n = BigInt::from(self.n.clone());
        if v.magnitude() * 2u32 >= self.n {
            return Err(PaillierError::MessageOutOfRange);
        }
        Ok(v.mod_floor(&n).to_biguint().expect("non-negative after mod_floor"))
    }

    /// Inverse of [`PublicKey::encode_signed`]: values above `n/2` are negative.
    pub fn decode_signed(&self, m: &BigUint) -> BigInt {
        if m * 2u32 > self.n {
            BigInt::from(m.clone()) - BigInt::from(self.n.clone())
        } else {
            BigInt::from(m.clone())
        }
    }
}

impl PrivateKey {
    pub fn decrypt(&self, c: &Ciphertext) -> BigUint {
        let mp = l(&(&c.0 % &self.p2).modpow(&(&self.p - 1u32), &self.p2), &self.p) * &self.hp % &self.p;
        let mq = l(&(&c.0 % &self.q2).modpow(&(&self.q - 1u32), &self.q2), &self.q) * &self.hq % &self.q;
        // m = mp + p·((mq - mp)·p⁻¹ mod q)
        let diff = (&mq + &self.q - (&mp % &self.q)) % &self.q;
        mp + &self.p * (diff * &self.p_inv_q % &self.q)
    }

    /// Textbook `L(c^λ mod n²)·μ mod n`, kept as a cross-check of the CRT path.
    pub fn decrypt_textbook(&self, pk: &PublicKey, c: &Ciphertext) -> BigUint {
        l(&c.0.modpow(&self.lambda, &pk.n2), &pk.n) * &self.mu % &pk.n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn keys() -> &'static (PublicKey, PrivateKey) {
        static K: OnceLock<(PublicKey, PrivateKey)> = OnceLock::new();
        K.get_or_init(|| keygen(512, 1))
    }

    #[test]
    fn primality() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let primes = [2u64, 3, 257, 65_537, 2_147_483_647, 18_446_744_073_709_551_557];
        for p in primes {
            assert!(is_probable_prime(&BigUint::from(p), &mut rng), "{p}");
        }
        let composites = [1u64, 4, 561, 65_535, 3_215_031_751, 18_446_744_073_709_551_555];
        for c in composites {
            assert!(!is_probable_prime(&BigUint::from(c), &mut rng), "{c}");
        }
    }

    #[test]
    fn keygen_shape() {
        let (pk, sk) = keys();
        assert_eq!(pk.n.bits(), 512);
        assert_eq!(pk.g, &pk.n + 1u32);
        assert_eq!(&sk.p * &sk.q, pk.n);
        assert_eq!(keygen(128, 5), keygen(128, 5));
    }

    #[test]
    fn zero_and_small_sums() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let zero = pk.encrypt(&BigUint::zero(), &mut rng).unwrap();
        assert!(sk.decrypt(&zero).is_zero());
        let three = pk.encrypt(&BigUint::from(3u32), &mut rng).unwrap();
        let four = pk.encrypt(&BigUint::from(4u32), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&pk.add(&three, &four)), BigUint::from(7u32));
        assert_eq!(sk.decrypt_textbook(pk, &pk.add(&three, &four)), BigUint::from(7u32));
    }

    #[test]
    fn out_of_range_message() {
        let (pk, _) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert_eq!(pk.encrypt(&pk.n, &mut rng), Err(PaillierError::MessageOutOfRange));
        assert!(pk.encode_signed(&BigInt::from(pk.n.clone())).is_err());
    }

    #[test]
    fn negative_scalars_and_signed_codec() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let c = pk.encrypt(&pk.encode_signed(&BigInt::from(-12)).unwrap(), &mut rng).unwrap();
        let out = pk.scalar_mul(&c, &BigInt::from(-5));
        assert_eq!(pk.decode_signed(&sk.decrypt(&out)), BigInt::from(60));
        assert!(sk.decrypt(&pk.scalar_mul(&c, &BigInt::zero())).is_zero());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn homomorphism_matches_bigint_oracle(m1 in any::<u32>(), m2 in any::<u32>(), k in any::<u32>(), seed in any::<u64>()) {
            let (pk, sk) = keys();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let c1 = pk.encrypt(&BigUint::from(m1), &mut rng).unwrap();
            let c2 = pk.encrypt(&BigUint::from(m2), &mut rng).unwrap();
            let out = pk.scalar_mul(&pk.add(&c1, &c2), &BigInt::from(k));
            let expected = BigUint::from(k) * (BigUint::from(m1) + BigUint::from(m2)) % &pk.n;
            prop_assert_eq!(sk.decrypt(&out), expected);
        }

        #[test]
        fn round_trip_below_n(seed in any::<u64>()) {
            let (pk, sk) = keys();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let m = rng.gen_biguint_below(&pk.n);
            let c = pk.encrypt(&m, &mut rng).unwrap();
            prop_assert_eq!(sk.decrypt(&c), m);
        }
    }
}
