//! Measurement harnesses: secured-vs-plain overhead tables and the
//! masking-vs-Paillier dot-product ablation.

pub mod ablation;
pub mod paillier;

use serde::Serialize;
use thiserror::Error;

use crate::protocol::{Mode, ProtocolError, Session, SessionConfig, SessionData};
use crate::transport::{MetricsSnapshot, OverheadRow, PartyKind, TransportError, OVERHEAD_CSV_HEADER};

pub use ablation::{run_ablation, AblationConfig, AblationReport};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error(transparent)]
    Transport(#[from] TransportError),

    #[error(transparent)]
    Paillier(#[from] paillier::PaillierError),
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }

    fn cell(&self, decimals: usize) -> String {
        format!("{:.*}±{:.*}", decimals, self.mean, decimals, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadSuiteConfig {
    pub session: SessionConfig,
    pub rounds: usize,
    pub test_batches: usize,
    pub repetitions: usize,
}

impl Default for OverheadSuiteConfig {
    fn default() -> Self {
        OverheadSuiteConfig {
            session: SessionConfig::default(),
            rounds: 5,
            test_batches: 5,
            repetitions: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Metric {
    CpuMs,
    Bytes,
}

/// `[train total, train overhead, test total, test overhead]` for one party kind.
pub type KindCells = [Stat; 4];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub dataset: String,
    pub config: OverheadSuiteConfig,
    /// Per repetition: secured run against the plain baseline.
    pub secured: Vec<Vec<OverheadRow>>,
    /// Per repetition: plain run against itself.
    pub plain: Vec<Vec<OverheadRow>>,
}

fn cells_of(r: &OverheadRow, metric: Metric) -> [f64; 4] {
    match metric {
        Metric::CpuMs => [
            r.train_cpu_ms_total,
            r.train_cpu_ms_overhead,
            r.test_cpu_ms_total,
            r.test_cpu_ms_overhead,
        ],
        Metric::Bytes => [
            r.train_bytes_total as f64,
            r.train_bytes_overhead as f64,
            r.test_bytes_total as f64,
            r.test_bytes_overhead as f64,
        ],
    }
}

/// One repetition's values for a party kind; passive parties are averaged.
fn kind_values(rows: &[OverheadRow], kind: PartyKind, metric: Metric) -> [f64; 4] {
    let sel: Vec<[f64; 4]> = rows.iter().filter(|r| r.kind == kind).map(|r| cells_of(r, metric)).collect();
    let n = sel.len().max(1) as f64;
    let mut out = [0.0; 4];
    for v in &sel {
        for k in 0..4 {
            out[k] += v[k] / n;
        }
    }
    out
}

impl OverheadReport {
    fn runs(&self, mode: Mode) -> &[Vec<OverheadRow>] {
        match mode {
            Mode::Secured => &self.secured,
            Mode::Plain => &self.plain,
        }
    }

    pub fn cells(&self, mode: Mode, kind: PartyKind, metric: Metric) -> KindCells {
        let per_rep: Vec<[f64; 4]> = self.runs(mode).iter().map(|rows| kind_values(rows, kind, metric)).collect();
        std::array::from_fn(|k| Stat::of(&per_rep.iter().map(|v| v[k]).collect::<Vec<_>>()))
    }

    /// CPU (`CpuMs`) or traffic (`Bytes`) table: one row per mode,
    /// four `mean±std` cells per party kind.
    pub fn table_csv(&self, metric: Metric) -> String {
        let mut out = String::from("dataset,mode");
        for kind in ["active", "passive"] {
            for col in ["train_total", "train_overhead", "test_total", "test_overhead"] {
                out.push_str(&format!(",{kind}_{col}"));
            }
        }
        out.push('\n');
        let decimals = if metric == Metric::CpuMs { 2 } else { 0 };
        for (mode, name) in [(Mode::Secured, "secured"), (Mode::Plain, "plain")] {
            out.push_str(&format!("{},{name}", self.dataset));
            for kind in [PartyKind::Active, PartyKind::Passive] {
                for c in self.cells(mode, kind, metric) {
                    out.push(',');
                    out.push_str(&c.cell(decimals));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Every party's row for every repetition and mode.
    pub fn raw_csv(&self) -> String {
        let mut out = format!("mode,repetition,{OVERHEAD_CSV_HEADER}\n");
        for (mode, runs) in [("secured", &self.secured), ("plain", &self.plain)] {
            for (rep, rows) in runs.iter().enumerate() {
                let body = crate::transport::overhead_csv(rows);
                for line in body.lines().skip(1) {
                    out.push_str(&format!("{mode},{rep},{line}\n"));
                }
            }
        }
        out
    }

    pub fn plain_overhead_is_zero(&self) -> bool {
        self.plain.iter().flatten().all(|r| {
            r.train_bytes_overhead == 0
                && r.test_bytes_overhead == 0
                && r.train_cpu_ms_overhead == 0.0
                && r.test_cpu_ms_overhead == 0.0
        })
    }

    pub fn byte_overhead_is_deterministic(&self) -> bool {
        let key = |rows: &Vec<OverheadRow>| -> Vec<(u16, i64, i64)> {
            rows.iter()
                .map(|r| (r.party, r.train_bytes_overhead, r.test_bytes_overhead))
                .collect()
        };
        self.secured.windows(2).all(|w| key(&w[0]) == key(&w[1]))
    }
}

fn measure(config: SessionConfig, data: &SessionData, suite: &OverheadSuiteConfig) -> Result<MetricsSnapshot, BenchError> {
    let b = config.batch_size;
    let mut session = Session::new(config, data.clone())?;
    session.train(suite.rounds)?;
    let test = &data.test_ids[..data.test_ids.len().min(suite.test_batches * b)];
    session.run_testing_phase(test)?;
    Ok(session.network().snapshot_metrics())
}

/// Runs secured and plain sessions with identical seeds `repetitions`
/// times. Each run trains for `rounds` rounds then tests `test_batches`
/// batches; with the default rotation period each phase starts with one
/// key-agreement phase.
pub fn run_overhead_suite(
    dataset: &str,
    data: &SessionData,
    suite: &OverheadSuiteConfig,
) -> Result<OverheadReport, BenchError> {
    let mut secured = Vec::with_capacity(suite.repetitions);
    let mut plain = Vec::with_capacity(suite.repetitions);
    for rep in 0..suite.repetitions {
        let base = SessionConfig {
            seed: suite.session.seed.wrapping_add(rep as u64),
            ..suite.session.clone()
        };
        let sec = measure(SessionConfig { mode: Mode::Secured, ..base.clone() }, data, suite)?;
        let pl = measure(SessionConfig { mode: Mode::Plain, ..base }, data, suite)?;
        secured.push(sec.overhead(Some(&pl))?);
        plain.push(pl.overhead(Some(&pl))?);
    }
    Ok(OverheadReport {
        dataset: dataset.to_string(),
        config: suite.clone(),
        secured,
        plain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{prepare, ExperimentConfig};

    #[test]
    fn stat_of_samples() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.2909944487358056).abs() < 1e-12);
        assert_eq!(Stat::of(&[7.0]).std, 0.0);
        assert_eq!(Stat { mean: 1.234, std: 0.5 }.cell(1), "1.2±0.5");
    }

    #[test]
    fn small_suite_has_table_shape() {
        let prepared = prepare(&ExperimentConfig {
            synthetic_rows: Some(600),
            ..Default::default()
        })
        .unwrap();
        let suite = OverheadSuiteConfig {
            session: SessionConfig {
                batch_size: 32,
                hidden: 8,
                ..Default::default()
            },
            rounds: 5,
            test_batches: 2,
            repetitions: 3,
        };
        let rep = run_overhead_suite("banking", &prepared.data, &suite).unwrap();
        assert!(rep.plain_overhead_is_zero());
        assert!(rep.byte_overhead_is_deterministic());
        let t1 = rep.table_csv(Metric::CpuMs);
        let header: Vec<&str> = t1.lines().next().unwrap().split(',').collect();
        assert_eq!(header.len(), 2 + 8);
        assert_eq!(t1.lines().count(), 3);
        let bytes = rep.cells(Mode::Secured, PartyKind::Active, Metric::Bytes);
        assert!(bytes[1].mean > 0.0 && bytes[1].std == 0.0);
        assert!(bytes[0].mean > bytes[1].mean);
        assert_eq!(rep.raw_csv().lines().count(), 1 + 2 * 3 * 6);
    }
}
