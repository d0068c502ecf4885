//! Self-contained numerical property suite: Matrix-Tree marginals against
//! exhaustive enumeration, normalization and shift identities, decoder
//! optimality, and end-to-end gradient checks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::grad_check;
use crate::config::Config;
use crate::data::{Instance, Polarity};
use crate::error::Result;
use crate::inducer::{marginals_variant, MttVariant, ScoreSet};
use crate::model::{forward_pass, training_table, Mode, Model};
use crate::tensor::Tensor;
use crate::trees::{brute_force_max, cle_extract, max_spanning_arborescence, oracle_marginals, tree_score, Arborescence};
use crate::inducer::TreeMarginals;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed deviation.
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
    /// Where the worst deviation occurred, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<24} worst {:.3e} (tol {:.0e}, {} cases)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.cases
        )?;
        match &self.note {
            Some(note) => write!(f, " at {note}"),
            None => Ok(()),
        }
    }
}

impl Check {
    fn new(name: &str, worst: f64, tolerance: f64, cases: usize) -> Self {
        Check {
            name: name.to_string(),
            passed: worst <= tolerance,
            worst,
            tolerance,
            cases,
            note: None,
        }
    }
}

/// Scores uniform in `[-3, 3]`.
pub fn random_scores(m: usize, rng: &mut impl Rng) -> ScoreSet {
    let edges = Tensor::from_fn(m, m, |_, _| rng.gen_range(-3.0..3.0));
    let roots = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
    ScoreSet::new(edges, roots).expect("square scores")
}

/// Matrix-Tree marginals against enumeration, `count` score sets per size.
pub fn oracle_equivalence(sizes: &[usize], count: usize, seed: u64, variant: MttVariant) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for &m in sizes {
        for _ in 0..count {
            let s = random_scores(m, &mut rng);
            let fast = marginals_variant(&s, variant)?;
            let slow = oracle_marginals(&s)?;
            worst = worst.max(fast.max_abs_diff(&slow));
        }
    }
    Ok(Check::new("oracle_equivalence", worst, 1e-8, sizes.len() * count))
}

/// `Σ Pr = 1` and every column of `P` plus its root entry sums to one.
pub fn normalization(count: usize, max_m: usize, seed: u64, variant: MttVariant) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let m = rng.gen_range(1..=max_m);
        let s = random_scores(m, &mut rng);
        worst = worst.max(marginals_variant(&s, variant)?.normalization_error());
    }
    Ok(Check::new("normalization", worst, 1e-8, count))
}

/// Adding one constant in `[-50, 50]` to every score changes nothing.
pub fn shift_invariance(count: usize, max_m: usize, seed: u64, variant: MttVariant) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let m = rng.gen_range(1..=max_m);
        let s = random_scores(m, &mut rng);
        let c = rng.gen_range(-50.0..=50.0);
        let a = marginals_variant(&s, variant)?;
        let b = marginals_variant(&s.shifted(c), variant)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(Check::new("shift_invariance", worst, 1e-10, count))
}

/// Decoded score against the exhaustive maximum over all arborescences.
pub fn cle_optimality(sizes: &[usize], count: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for &m in sizes {
        for _ in 0..count {
            let w = Tensor::from_fn(m, m, |_, _| rng.gen_range(-5.0..5.0));
            let (_, best) = brute_force_max(&w, None)?;
            let decoded = (0..m)
                .map(|root| max_spanning_arborescence(&w, root).map(|h| tree_score(&w, &h)))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max((decoded - best).abs());
            // The marginal decoder with a fixed root must match the rooted optimum too.
            let root = rng.gen_range(0..m);
            let heads = max_spanning_arborescence(&w, root)?;
            let (_, rooted) = brute_force_max(&w, Some(root))?;
            worst = worst.max((tree_score(&w, &heads) - rooted).abs());
            if !Arborescence::from_heads(heads, 0.0).is_ok_and(|t| t.root == root) {
                worst = f64::INFINITY;
            }
        }
    }
    Ok(Check::new("cle_optimality", worst, 1e-9, sizes.len() * count))
}

/// Decoded structures from random marginals are valid arborescences; the
/// reported value is the number of invalid outputs.
pub fn cle_fuzz(count: usize, max_m: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut invalid = 0usize;
    for case in 0..count {
        let m = rng.gen_range(1..=max_m);
        // Every fifth case is degenerate (all-zero edges).
        let edges = if case % 5 == 4 {
            Tensor::zeros(m, m)
        } else {
            Tensor::from_fn(m, m, |i, j| if i == j { 0.0 } else { rng.gen_range(0.0..1.0) })
        };
        let roots = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let tree = cle_extract(&TreeMarginals { edges, roots, log_z: 0.0 })?;
        if !tree.is_valid() || tree.len() != m {
            invalid += 1;
        }
    }
    Ok(Check::new("cle_fuzz", invalid as f64, 0.0, count))
}

/// Fixed 4–6 token sentences for gradient checking.
pub fn fixture_instances() -> Vec<Instance> {
    let rows: [(&[&str], (usize, usize), Polarity); 5] = [
        (&["the", "pasta", "was", "great"], (1, 2), Polarity::Positive),
        (&["rude", "staff", "but", "nice", "view"], (1, 2), Polarity::Negative),
        (&["the", "menu", "looks", "fairly", "standard"], (1, 2), Polarity::Neutral),
        (&["loving", "the", "harry", "potter", "movie", "marathon"], (2, 4), Polarity::Positive),
        (&["slow", "kitchen", "and", "cold", "soup"], (4, 5), Polarity::Negative),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, (t, span, p))| {
            Instance::new(format!("fixture-{i}"), t.iter().map(|w| w.to_string()).collect(), *span, *p)
                .expect("fixtures are valid")
        })
        .collect()
}

/// Small-model configuration used for gradient checks.
pub fn gradient_config() -> Config {
    let mut config = Config::default();
    config.encoder.dim = 6;
    config.encoder.embed_dim = 5;
    config.train.seed = 7;
    config
}

/// Central-difference check of the combined loss over every parameter.
pub fn combined_loss_gradients(instances: &[Instance], config: &Config, step: f64) -> Result<Check> {
    let table = training_table(instances, config);
    let model = Model::new(config.clone(), &table)?;
    let mut worst: f64 = 0.0;
    let mut note = None;
    for inst in instances {
        let report = grad_check(
            |tape, store| {
                Ok(forward_pass(tape, store, &model.config, &model.vocab, inst, Mode::Eval, MttVariant::Standard)?.loss)
            },
            &model.params,
            step,
        )?;
        if report.max_relative_error > worst {
            worst = report.max_relative_error;
            if let (Some((name, k)), Some((a, n))) = (report.worst, report.worst_values) {
                note = Some(format!("{} {name}[{k}] analytic {a:.6e} numeric {n:.6e}", inst.id));
            }
        }
    }
    Ok(Check {
        note,
        ..Check::new("gradient_check", worst, 1e-4, instances.len())
    })
}

/// The whole suite. `max_n` bounds the exhaustive sizes (at most 5 for the
/// marginal oracle, 6 for decoding).
pub fn run_suite(max_n: usize, variant: MttVariant) -> Result<Vec<Check>> {
    let max_n = max_n.max(2);
    let oracle_sizes: Vec<usize> = (2..=max_n.min(5)).collect();
    let cle_sizes: Vec<usize> = (2..=(max_n + 1).min(6)).collect();
    let wide = (max_n + 3).min(8);
    let fixtures = fixture_instances();
    let grad_fixtures = if max_n < 5 { &fixtures[..1] } else { &fixtures[..2] };
    Ok(vec![
        oracle_equivalence(&oracle_sizes, 50, 11, variant)?,
        normalization(200, wide, 12, variant)?,
        shift_invariance(100, wide, 13, variant)?,
        cle_optimality(&cle_sizes, 20, 14)?,
        cle_fuzz(200, 10, 15)?,
        combined_loss_gradients(grad_fixtures, &gradient_config(), 1e-5)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let checks = run_suite(4, MttVariant::Standard).unwrap();
        for c in &checks {
            assert!(c.passed, "{c}");
        }
        assert_eq!(checks.len(), 6);
    }

    #[test]
    fn flipped_sign_is_caught() {
        let c = oracle_equivalence(&[3], 5, 1, MttVariant::FlippedSecondTerm).unwrap();
        assert!(!c.passed);
        let c = normalization(20, 5, 1, MttVariant::FlippedSecondTerm).unwrap();
        assert!(!c.passed);
        assert!(c.to_string().starts_with("FAIL"));
    }
}
