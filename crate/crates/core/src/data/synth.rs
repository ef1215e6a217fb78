use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{ColumnKind, RawColumn, RawDataset, RawValues, Schema};

/// Standard deviation of the planted logit.
const SIGNAL: f64 = 2.5;

/// Levels used for categorical columns that declare none.
const FALLBACK_LEVELS: [&str; 4] = ["l0", "l1", "l2", "l3"];

/// Deterministic rows over `schema` with labels drawn from a planted
/// logistic model, so that learning progress is measurable.
///
/// Categorical values are uniform over the declared levels and numeric
/// values are `N(mean, std)`. Every categorical level and every
/// standardised numeric column gets a Gaussian effect on the logit.
pub fn synth_generate(n: usize, schema: &Schema, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let effect_scale = SIGNAL / (schema.columns.len().max(1) as f64).sqrt();
    let mut logits = vec![-0.3; n];
    let mut columns = Vec::with_capacity(schema.columns.len());

    for spec in &schema.columns {
        let values = match &spec.kind {
            ColumnKind::Categorical { categories } => {
                let levels: Vec<String> = match categories {
                    Some(cs) if !cs.is_empty() => cs.clone(),
                    _ => FALLBACK_LEVELS.iter().map(|s| s.to_string()).collect(),
                };
                let effects: Vec<f64> = (0..levels.len())
                    .map(|_| effect_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..levels.len())).collect();
                for (l, &k) in logits.iter_mut().zip(&picks) {
                    *l += effects[k];
                }
                RawValues::Categorical(picks.iter().map(|&k| levels[k].clone()).collect())
            }
            ColumnKind::Numeric { mean, std } => {
                let std = if *std > 0.0 { *std } else { 1.0 };
                let dist = Normal::new(*mean, std).expect("finite std");
                let coef = effect_scale * rng.sample::<f64, _>(StandardNormal);
                let xs: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
                for (l, x) in logits.iter_mut().zip(&xs) {
                    *l += coef * (x - mean) / std;
                }
                RawValues::Numeric(xs)
            }
        };
        columns.push(RawColumn {
            name: spec.name.clone(),
            values,
        });
    }

    let labels = logits
        .iter()
        .map(|&l| {
            let p = 1.0 / (1.0 + (-l).exp());
            (rng.gen::<f64>() < p) as u8 as f64
        })
        .collect();
    RawDataset { columns, labels }
}

#[cfg(test)]
mod tests {
    use super::super::presets;
    use super::*;

    #[test]
    fn seeded_and_sized() {
        let schema = presets::taobao().schema;
        let a = synth_generate(100, &schema, 7);
        assert_eq!(a, synth_generate(100, &schema, 7));
        assert_ne!(a, synth_generate(100, &schema, 8));
        assert_eq!(a.n_rows(), 100);
        assert_eq!(a.columns.len(), schema.columns.len());
        assert_eq!(synth_generate(1, &schema, 7).n_rows(), 1);
    }

    #[test]
    fn labels_are_not_degenerate() {
        let raw = synth_generate(5000, &presets::banking().schema, 1);
        let pos = raw.labels.iter().sum::<f64>() / 5000.0;
        assert!((0.15..0.85).contains(&pos), "positive rate {pos}");
    }
}
