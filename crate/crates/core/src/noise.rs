//! Synthetic label corruption.
//!
//! Two families are supported:
//!
//! * **symmetric**: a label flips with probability `ratio` to a uniformly
//!   chosen class. With `include_self` the uniform draw covers all `c`
//!   classes (so the true class can be redrawn); without it, only the
//!   `c - 1` other classes, and `ratio` equals the expected corruption rate.
//! * **asymmetric**: class `i` flips to `pair_map[i]` with probability
//!   `ratio`; classes mapped to themselves never flip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    None,
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default)]
    pub ratio: f64,
    #[serde(default)]
    pub include_self: bool,
    /// Explicit class map for asymmetric noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_map: Option<Vec<usize>>,
    /// Named map: `"next"` (i -> i+1 mod c) or `"cifar10"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            ratio: 0.4,
            include_self: false,
            pair_map: None,
            preset: None,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn symmetric(ratio: f64, include_self: bool, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            ratio,
            include_self,
            pair_map: None,
            preset: None,
            seed,
        }
    }

    pub fn asymmetric(ratio: f64, pair_map: Vec<usize>, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Asymmetric,
            ratio,
            include_self: false,
            pair_map: Some(pair_map),
            preset: None,
            seed,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if classes < 2 {
            return Err(Error::Config(format!("noise needs at least 2 classes, got {classes}")));
        }
        if !(0.0..=1.0).contains(&self.ratio) || self.ratio.is_nan() {
            return Err(Error::Config(format!("noise ratio {} outside [0, 1]", self.ratio)));
        }
        if self.kind == NoiseKind::Asymmetric {
            self.resolved_pair_map(classes)?;
        }
        Ok(())
    }

    /// The asymmetric class map, from `pair_map`, `preset`, or the `next`
    /// default.
    pub fn resolved_pair_map(&self, classes: usize) -> Result<Vec<usize>> {
        let map = match (&self.pair_map, self.preset.as_deref()) {
            (Some(m), _) => m.clone(),
            (None, Some("cifar10")) => {
                if classes != 10 {
                    return Err(Error::Config("cifar10 preset needs 10 classes".into()));
                }
                cifar10_pair_map()
            }
            (None, Some("next") | None) => (0..classes).map(|i| (i + 1) % classes).collect(),
            (None, Some(other)) => return Err(Error::Config(format!("unknown pair-map preset {other:?}"))),
        };
        if map.len() != classes {
            return Err(Error::Config(format!("pair map has {} entries for {classes} classes", map.len())));
        }
        if let Some(&bad) = map.iter().find(|&&t| t >= classes) {
            return Err(Error::Config(format!("pair map target {bad} out of range")));
        }
        Ok(map)
    }
}

/// CIFAR-10 confusions: truck -> automobile, bird -> airplane,
/// deer -> horse, cat -> dog; all other classes fixed.
pub fn cifar10_pair_map() -> Vec<usize> {
    // airplane, automobile, bird, cat, deer, dog, frog, horse, ship, truck
    let mut m: Vec<usize> = (0..10).collect();
    m[9] = 1;
    m[2] = 0;
    m[4] = 7;
    m[3] = 5;
    m
}

/// Within-superclass flips: each class maps to the next class of its own
/// superclass (cyclically). Singleton superclasses stay fixed.
pub fn superclass_pair_map(superclass_of: &[usize]) -> Vec<usize> {
    let mut map: Vec<usize> = (0..superclass_of.len()).collect();
    let n_super = superclass_of.iter().copied().max().map_or(0, |m| m + 1);
    for s in 0..n_super {
        let members: Vec<usize> = (0..superclass_of.len()).filter(|&i| superclass_of[i] == s).collect();
        for (k, &i) in members.iter().enumerate() {
            map[i] = members[(k + 1) % members.len()];
        }
    }
    map
}

/// Row-stochastic `c x c` matrix, entry `[i, j] = P(observed = j | true = i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    classes: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(classes: usize) -> Self {
        let mut data = vec![0.0; classes * classes];
        for i in 0..classes {
            data[i * classes + i] = 1.0;
        }
        Self { classes, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::dim("transition rows", classes, "ragged"));
        }
        Ok(Self {
            classes,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.classes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.classes).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.classes).map(|i| self.get(i, i)).collect()
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        (0..self.classes).all(|i| {
            let r = self.row(i);
            r.iter().all(|&v| (0.0..=1.0).contains(&v)) && (r.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    pub fn max_abs_diff(&self, other: &TransitionMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn build_transition(spec: &NoiseSpec, classes: usize) -> Result<TransitionMatrix> {
    spec.validate(classes)?;
    let c = classes;
    let r = spec.ratio;
    let mut t = TransitionMatrix::identity(c);
    match spec.kind {
        NoiseKind::None => {}
        NoiseKind::Symmetric => {
            let (diag, off) = if spec.include_self {
                (1.0 - r + r / c as f64, r / c as f64)
            } else {
                (1.0 - r, r / (c - 1) as f64)
            };
            for i in 0..c {
                for j in 0..c {
                    t.data[i * c + j] = if i == j { diag } else { off };
                }
            }
        }
        NoiseKind::Asymmetric => {
            let map = spec.resolved_pair_map(c)?;
            for (i, &target) in map.iter().enumerate() {
                if target != i {
                    t.data[i * c + i] = 1.0 - r;
                    t.data[i * c + target] = r;
                }
            }
        }
    }
    Ok(t)
}

/// Corrupted labels and the mask `noisy[i] != labels[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub noisy: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Injection {
    pub fn corrupted_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Resamples every label independently from its transition row.
pub fn inject(labels: &[usize], spec: &NoiseSpec, classes: usize) -> Result<Injection> {
    let t = build_transition(spec, classes)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Schema(format!("label {bad} outside [0, {classes})")));
    }
    let mut rng = rng::rng_for(spec.seed, rng::stream::NOISE);
    let mut noisy = Vec::with_capacity(labels.len());
    for &l in labels {
        let u: f64 = rng.random();
        let row = t.row(l);
        let mut acc = 0.0;
        let mut pick = l;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        noisy.push(pick);
    }
    let mask = labels.iter().zip(&noisy).map(|(a, b)| a != b).collect();
    Ok(Injection { noisy, mask })
}

/// Row-normalized count matrix of `(truth, observed)` pairs. Rows with no
/// support are set uniform and flagged in the returned vector.
pub fn empirical_transition(truth: &[usize], observed: &[usize], classes: usize) -> Result<(TransitionMatrix, Vec<bool>)> {
    if truth.len() != observed.len() {
        return Err(Error::dim("observed labels", truth.len(), observed.len()));
    }
    let c = classes;
    let mut counts = vec![0u64; c * c];
    for (&a, &b) in truth.iter().zip(observed) {
        if a >= c || b >= c {
            return Err(Error::Schema(format!("label pair ({a}, {b}) outside [0, {c})")));
        }
        counts[a * c + b] += 1;
    }
    let mut data = vec![0.0; c * c];
    let mut flagged = vec![false; c];
    for i in 0..c {
        let total: u64 = counts[i * c..(i + 1) * c].iter().sum();
        if total == 0 {
            flagged[i] = true;
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 1.0 / c as f64);
        } else {
            for j in 0..c {
                data[i * c + j] = counts[i * c + j] as f64 / total as f64;
            }
        }
    }
    Ok((TransitionMatrix { classes: c, data }, flagged))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_ratio_is_identity() {
        for include_self in [false, true] {
            let t = build_transition(&NoiseSpec::symmetric(0.0, include_self, 1), 5).unwrap();
            assert_eq!(t, TransitionMatrix::identity(5));
        }
    }

    #[test]
    fn symmetric_exclude_self_closed_form() {
        let t = build_transition(&NoiseSpec::symmetric(0.4, false, 1), 10).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let expected = if i == j { 0.6 } else { 0.4 / 9.0 };
                assert!((t.get(i, j) - expected).abs() < 1e-15);
            }
        }
        assert!(t.is_row_stochastic(1e-12));
    }

    #[test]
    fn symmetric_include_self_closed_form() {
        let t = build_transition(&NoiseSpec::symmetric(0.5, true, 1), 4).unwrap();
        assert!((t.get(0, 0) - (0.5 + 0.125)).abs() < 1e-15);
        assert!((t.get(0, 3) - 0.125).abs() < 1e-15);
        assert!(t.is_row_stochastic(1e-12));
    }

    #[test]
    fn cifar10_truck_row() {
        let spec = NoiseSpec {
            kind: NoiseKind::Asymmetric,
            ratio: 0.4,
            preset: Some("cifar10".into()),
            ..NoiseSpec::default()
        };
        let t = build_transition(&spec, 10).unwrap();
        assert!((t.get(9, 9) - 0.6).abs() < 1e-15);
        assert!((t.get(9, 1) - 0.4).abs() < 1e-15);
        // fixed point: frog
        assert_eq!(t.get(6, 6), 1.0);
        assert!(t.is_row_stochastic(1e-12));
    }

    #[test]
    fn ratio_out_of_range_rejected() {
        for r in [-0.1, 1.1, f64::NAN] {
            let err = build_transition(&NoiseSpec::symmetric(r, false, 0), 3).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn bad_pair_map_rejected() {
        assert!(build_transition(&NoiseSpec::asymmetric(0.3, vec![1, 5], 0), 2).is_err());
        assert!(build_transition(&NoiseSpec::asymmetric(0.3, vec![1], 0), 2).is_err());
    }

    #[test]
    fn superclass_map_stays_in_block() {
        let sup = [0, 0, 0, 1, 1, 2];
        let m = superclass_pair_map(&sup);
        assert_eq!(m, vec![1, 2, 0, 4, 3, 5]);
    }

    #[test]
    fn inject_zero_ratio_unchanged() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let inj = inject(&labels, &NoiseSpec::symmetric(0.0, false, 3), 4).unwrap();
        assert_eq!(inj.noisy, labels);
        assert!(inj.mask.iter().all(|&m| !m));
    }

    #[test]
    fn inject_mask_consistent_and_deterministic() {
        let labels: Vec<usize> = (0..500).map(|i| i % 5).collect();
        let spec = NoiseSpec::symmetric(0.6, true, 11);
        let a = inject(&labels, &spec, 5).unwrap();
        let b = inject(&labels, &spec, 5).unwrap();
        assert_eq!(a, b);
        for i in 0..labels.len() {
            assert_eq!(a.mask[i], a.noisy[i] != labels[i]);
        }
        assert_eq!(a.noisy.len(), labels.len());
    }

    #[test]
    fn empirical_identity_and_degenerate_support() {
        let truth = vec![0, 1, 2, 1];
        let (t, flagged) = empirical_transition(&truth, &truth, 3).unwrap();
        assert_eq!(t, TransitionMatrix::identity(3));
        assert!(flagged.iter().all(|f| !f));

        let single = vec![2; 10];
        let (t, flagged) = empirical_transition(&single, &single, 3).unwrap();
        assert_eq!(flagged, vec![true, true, false]);
        assert_eq!(t.row(2), &[0.0, 0.0, 1.0]);
        assert!(t.is_row_stochastic(1e-12));
    }

    #[test]
    fn asymmetric_flips_follow_pair_map() {
        let labels: Vec<usize> = (0..4000).map(|i| i % 4).collect();
        let map = vec![1, 2, 0, 3];
        let inj = inject(&labels, &NoiseSpec::asymmetric(0.5, map.clone(), 5), 4).unwrap();
        for (&t, &o) in labels.iter().zip(&inj.noisy) {
            assert!(o == t || o == map[t]);
        }
        assert!(labels.iter().zip(&inj.noisy).all(|(&t, &o)| t != 3 || o == 3));
    }

    proptest::proptest! {
        #[test]
        fn transitions_are_row_stochastic(ratio in 0.0f64..=1.0, c in 2usize..8, include_self: bool) {
            let t = build_transition(&NoiseSpec::symmetric(ratio, include_self, 0), c).unwrap();
            proptest::prop_assert!(t.is_row_stochastic(1e-12));
            let map: Vec<usize> = (0..c).map(|i| (i + 1) % c).collect();
            let t = build_transition(&NoiseSpec::asymmetric(ratio, map, 0), c).unwrap();
            proptest::prop_assert!(t.is_row_stochastic(1e-12));
        }

        #[test]
        fn injection_keeps_labels_in_range(ratio in 0.0f64..=1.0, seed: u64, n in 0usize..200) {
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let inj = inject(&labels, &NoiseSpec::symmetric(ratio, false, seed), 3).unwrap();
            proptest::prop_assert_eq!(inj.noisy.len(), n);
            proptest::prop_assert!(inj.noisy.iter().all(|&l| l < 3));
            for i in 0..n {
                proptest::prop_assert_eq!(inj.mask[i], inj.noisy[i] != labels[i]);
            }
        }
    }
}
