//! Dot product `[B × 8] · [8 × 8]` computed privately two ways: pairwise
//! masking between two feature holders, and Paillier encryption of the
//! inputs followed by homomorphic weighting.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use super::paillier::{keygen, Ciphertext, PaillierError, PrivateKey, PublicKey};
use super::Stat;
use crate::masking::{compute_mask, mask_values, sum_masked, Direction, FixedPointCodec, MaskStream};

pub const FEATURES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationConfig {
    pub batch_sizes: Vec<usize>,
    pub repetitions: usize,
    pub key_bits: u64,
    pub scale_bits: u32,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            batch_sizes: vec![16, 64, 256],
            repetitions: 10,
            key_bits: 1024,
            scale_bits: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub batch: usize,
    pub sa_ms: Stat,
    pub he_ms: Stat,
    /// `he_ms.mean / sa_ms.mean`
    pub speedup: f64,
    /// Max-abs deviation from the plain matmul in the validation run.
    pub sa_max_err: f64,
    pub he_max_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub tolerance: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn min_speedup(&self) -> f64 {
        self.rows.iter().map(|r| r.speedup).fold(f64::INFINITY, f64::min)
    }

    pub fn validated(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.sa_max_err <= self.tolerance && r.he_max_err <= self.tolerance)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "batch,repetitions,sa_ms_mean,sa_ms_std,he_ms_mean,he_ms_std,speedup,sa_max_err,he_max_err\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.3},{:.3},{:.1},{:e},{:e}\n",
                r.batch,
                self.config.repetitions,
                r.sa_ms.mean,
                r.sa_ms.std,
                r.he_ms.mean,
                r.he_ms.std,
                r.speedup,
                r.sa_max_err,
                r.he_max_err
            ));
        }
        out
    }

    /// Whitespace-separated columns for a log-scale gnuplot chart.
    pub fn to_gnuplot(&self) -> String {
        let mut out = String::from("# batch sa_ms_mean sa_ms_std he_ms_mean he_ms_std\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{} {:.6} {:.6} {:.3} {:.3}\n",
                r.batch, r.sa_ms.mean, r.sa_ms.std, r.he_ms.mean, r.he_ms.std
            ));
        }
        out
    }
}

/// Allowed deviation from the plain matmul: one fixed-point step per summand.
pub fn tolerance(scale_bits: u32) -> f64 {
    FEATURES as f64 * 2f64.powi(-(scale_bits as i32))
}

/// Two parties hold columns `0..4` and `4..8` and pre-agreed seeds.
pub struct SaParties {
    seeds: [BTreeMap<u16, [u8; 32]>; 2],
    codec: FixedPointCodec,
}

impl SaParties {
    pub fn new(seed: [u8; 32], scale_bits: u32) -> Self {
        SaParties {
            seeds: [BTreeMap::from([(1, seed)]), BTreeMap::from([(0, seed)])],
            codec: FixedPointCodec::new(scale_bits, 2),
        }
    }
}

/// Each party multiplies its half of the columns by its half of the
/// weights and masks the result; the aggregator sums and decodes.
pub fn sa_dot_product(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    parties: &SaParties,
    round: u32,
) -> Result<Array2<f64>, crate::masking::MaskingError> {
    let half = FEATURES / 2;
    let (b, out) = (x.nrows(), w.ncols());
    let stream = MaskStream::new(0, round, Direction::Forward, 0);
    let mut contributions = Vec::with_capacity(2);
    for (p, cols) in [(0u16, 0..half), (1u16, half..FEATURES)] {
        let local = x.slice(s![.., cols.clone()]).dot(&w.slice(s![cols, ..]));
        let plain: Vec<f64> = local.iter().copied().collect();
        let mask = compute_mask(p, &[0, 1], &parties.seeds[p as usize], plain.len(), stream)?;
        contributions.push(mask_values(&plain, &parties.codec, &mask)?);
    }
    let sum = sum_masked(&contributions)?;
    Ok(Array2::from_shape_vec((b, out), parties.codec.decode_all(&sum)).expect("B × out elements"))
}

fn fixed(v: f64, scale_bits: u32) -> BigInt {
    BigInt::from((v * 2f64.powi(scale_bits as i32)).round() as i64)
}

fn unfixed(v: &BigInt, scale_bits: u32) -> f64 {
    let (sign, mag) = v.to_u64_digits();
    let m = mag.iter().rev().fold(0f64, |acc, &d| acc * 2f64.powi(64) + d as f64);
    let m = if sign == num_bigint::Sign::Minus { -m } else { m };
    m * 2f64.powi(-2 * scale_bits as i32)
}

/// Encrypts every input, raises each ciphertext to the fixed-point weight,
/// multiplies along the contraction axis and decrypts each output cell.
pub fn he_dot_product<R: Rng>(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    pk: &PublicKey,
    sk: &PrivateKey,
    scale_bits: u32,
    rng: &mut R,
) -> Result<Array2<f64>, PaillierError> {
    let (b, d) = x.dim();
    let out = w.ncols();
    let enc: Vec<Ciphertext> = x
        .iter()
        .map(|&v| pk.encrypt(&pk.encode_signed(&fixed(v, scale_bits))?, rng))
        .collect::<Result<_, _>>()?;
    let wq: Vec<BigInt> = w.iter().map(|&v| fixed(v, scale_bits)).collect();
    let mut result = Array2::zeros((b, out));
    for i in 0..b {
        for k in 0..out {
            let mut acc = pk.scalar_mul(&enc[i * d], &wq[k]);
            for j in 1..d {
                acc = pk.add(&acc, &pk.scalar_mul(&enc[i * d + j], &wq[j * out + k]));
            }
            result[[i, k]] = unfixed(&pk.decode_signed(&sk.decrypt(&acc)), scale_bits);
        }
    }
    Ok(result)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

/// Validates both paths against the plain matmul (this run doubles as the
/// warm-up), then times `repetitions` runs of each per batch size.
pub fn run_ablation(config: &AblationConfig) -> Result<AblationReport, PaillierError> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let (pk, sk) = keygen(config.key_bits, config.seed);
    let parties = SaParties::new(rng.gen(), config.scale_bits);
    let tol = tolerance(config.scale_bits);
    let mut rows = Vec::new();
    let mut round = 0u32;
    for &b in &config.batch_sizes {
        let x = uniform(&mut rng, b, FEATURES);
        let w = uniform(&mut rng, FEATURES, FEATURES);
        let oracle = x.dot(&w);

        let sa = sa_dot_product(x.view(), w.view(), &parties, round).expect("inputs are in codec range");
        round += 1;
        let he = he_dot_product(x.view(), w.view(), &pk, &sk, config.scale_bits, &mut rng)?;
        let (sa_max_err, he_max_err) = (max_abs_diff(&sa, &oracle), max_abs_diff(&he, &oracle));

        let mut sa_times = Vec::with_capacity(config.repetitions);
        let mut he_times = Vec::with_capacity(config.repetitions);
        for _ in 0..config.repetitions {
            let t = Instant::now();
            let r = sa_dot_product(x.view(), w.view(), &parties, round).expect("inputs are in codec range");
            sa_times.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(r);
            round += 1;

            let t = Instant::now();
            let r = he_dot_product(x.view(), w.view(), &pk, &sk, config.scale_bits, &mut rng)?;
            he_times.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(r);
        }
        let (sa_ms, he_ms) = (Stat::of(&sa_times), Stat::of(&he_times));
        rows.push(AblationRow {
            batch: b,
            speedup: he_ms.mean / sa_ms.mean,
            sa_ms,
            he_ms,
            sa_max_err,
            he_max_err,
        });
    }
    Ok(AblationReport {
        config: config.clone(),
        tolerance: tol,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn keys() -> &'static (PublicKey, PrivateKey) {
        static K: OnceLock<(PublicKey, PrivateKey)> = OnceLock::new();
        K.get_or_init(|| keygen(512, 7))
    }

    #[test]
    fn identity_weights_return_the_input_row() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = uniform(&mut rng, 1, FEATURES);
        let eye = Array2::eye(FEATURES);
        let (pk, sk) = keys();
        let he = he_dot_product(x.view(), eye.view(), pk, sk, 24, &mut rng).unwrap();
        let sa = sa_dot_product(x.view(), eye.view(), &SaParties::new([3; 32], 24), 0).unwrap();
        assert!(max_abs_diff(&he, &x) <= 2f64.powi(-24));
        assert!(max_abs_diff(&sa, &x) <= 2f64.powi(-24));
    }

    #[test]
    fn random_batch_matches_plain_matmul() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = uniform(&mut rng, 4, FEATURES);
        let w = uniform(&mut rng, FEATURES, FEATURES);
        let oracle = x.dot(&w);
        let (pk, sk) = keys();
        let he = he_dot_product(x.view(), w.view(), pk, sk, 24, &mut rng).unwrap();
        let sa = sa_dot_product(x.view(), w.view(), &SaParties::new([9; 32], 24), 5).unwrap();
        assert!(max_abs_diff(&he, &oracle) <= tolerance(24));
        assert!(max_abs_diff(&sa, &oracle) <= tolerance(24));
    }

    #[test]
    fn unfixed_handles_large_and_negative_values() {
        let v = BigInt::from(-3i64) << 48;
        assert_eq!(unfixed(&v, 24), -3.0);
        assert_eq!(unfixed(&(BigInt::from(5u64) << 100), 24), 5.0 * 2f64.powi(52));
    }

    #[test]
    fn small_sweep_report() {
        let cfg = AblationConfig {
            batch_sizes: vec![2, 4],
            repetitions: 3,
            key_bits: 256,
            ..Default::default()
        };
        let rep = run_ablation(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.validated());
        assert!(rep.rows.iter().all(|r| r.he_ms.mean > 0.0 && r.sa_ms.mean > 0.0));
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("batch,repetitions,"));
        assert_eq!(rep.to_gnuplot().lines().count(), 3);
    }
}
