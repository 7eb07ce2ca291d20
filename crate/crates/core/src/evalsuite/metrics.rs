//! Sample-set metrics built on the oracle classifiers and handcrafted
//! features.

use super::features::{motion_features, FeatureVector};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::toymotion::{concept_classifier, ConceptDescription, MotionSequence};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A sample hits when every token of its description scores at least 1/2
/// under the oracle classifier; empty descriptions hit vacuously.
pub const HIT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyRate {
    pub family: String,
    pub rate: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecallReport {
    pub hits: usize,
    pub total: usize,
    pub recall: f64,
    pub per_family: Vec<FamilyRate>,
}

pub fn concept_recall(samples: &[(MotionSequence, ConceptDescription)]) -> Result<RecallReport> {
    if samples.is_empty() {
        return Err(Error::invalid("recall needs at least one sample"));
    }
    let mut hits = 0;
    let mut family_hits: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
    for (motion, desc) in samples {
        let mut all = true;
        for token in desc.tokens() {
            let score = concept_classifier(motion, token);
            let hit = score >= HIT_THRESHOLD;
            all &= hit;
            let entry = family_hits.entry(token.kind.family().name()).or_insert((0, 0));
            entry.1 += 1;
            if hit {
                entry.0 += 1;
            }
        }
        if all {
            hits += 1;
        }
    }
    let per_family = family_hits
        .into_iter()
        .map(|(family, (h, n))| FamilyRate {
            family: family.to_string(),
            rate: h as f64 / n as f64,
            tokens: n,
        })
        .collect();
    Ok(RecallReport { hits, total: samples.len(), recall: hits as f64 / samples.len() as f64, per_family })
}

/// Per-sample hit indicators (1.0 when every token of the description scores
/// at or above the threshold). The mean of this list is the recall.
pub fn per_sample_hits(samples: &[(MotionSequence, ConceptDescription)]) -> Vec<f64> {
    samples
        .iter()
        .map(|(motion, desc)| {
            let all = desc
                .tokens()
                .iter()
                .all(|token| concept_classifier(motion, token) >= HIT_THRESHOLD);
            if all {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Percentile bootstrap interval for the mean: resample with replacement,
/// sort the resample means, read both tails.
pub fn bootstrap_mean_ci(
    values: &[f64],
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one value"));
    }
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence {confidence} outside (0, 1)")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("bootstrap values must be finite"));
    }
    let mut rng = SeedStream::new(seed).derive("bootstrap");
    let n = values.len();
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += values[rng.below(n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let tail = (1.0 - confidence) / 2.0;
    let pick = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok((pick(tail), pick(1.0 - tail)))
}

/// Canonical sample order: lexicographic over feature values. Metrics pair
/// over this order, so they are functions of the sample multiset.
fn canonical_order(feats: &[FeatureVector]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..feats.len()).collect();
    idx.sort_by(|&a, &b| {
        feats[a]
            .values
            .iter()
            .zip(&feats[b].values)
            .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Mean feature distance over `pairs` distinct random pairs.
pub fn diversity(samples: &[MotionSequence], pairs: usize, seed: u64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("diversity needs at least two samples"));
    }
    let available = n * (n - 1) / 2;
    if pairs == 0 || pairs > available {
        return Err(Error::invalid(format!(
            "requested {pairs} pairs from {available} available"
        )));
    }
    let feats: Vec<FeatureVector> = samples.iter().map(motion_features).collect();
    let order = canonical_order(&feats);
    let mut rng = SeedStream::new(seed).derive("diversity-pairs");
    let mut seen = std::collections::HashSet::new();
    let mut total = 0.0;
    while seen.len() < pairs {
        let i = rng.below(n);
        let j = rng.below(n - 1);
        let j = if j >= i { j + 1 } else { j };
        let key = (i.min(j), i.max(j));
        if seen.insert(key) {
            total += feats[order[key.0]].distance(&feats[order[key.1]]);
        }
    }
    Ok(total / pairs as f64)
}

/// Mean within-group feature distance between two disjoint random subsets
/// paired element-wise; averaged over all pairs of all groups.
pub fn multimodality(
    groups: &[Vec<MotionSequence>],
    subset_size: usize,
    seed: u64,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::invalid("multimodality needs at least one group"));
    }
    if subset_size == 0 {
        return Err(Error::invalid("subset size must be positive"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (g, group) in groups.iter().enumerate() {
        if group.len() < 2 {
            return Err(Error::invalid(format!("group {g} has fewer than two samples")));
        }
        let feats: Vec<FeatureVector> = group.iter().map(motion_features).collect();
        let order = canonical_order(&feats);
        let s = subset_size.min(group.len() / 2);
        let mut rng = SeedStream::new(seed).derive("multimodality").derive_idx(g as u64);
        let mut shuffled = order;
        rng.shuffle(&mut shuffled);
        for k in 0..s {
            total += feats[shuffled[k]].distance(&feats[shuffled[s + k]]);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean Euclidean distance between consecutive frames.
pub fn transition_distance(m: &MotionSequence) -> Result<f64> {
    let f = m.frames();
    let l = f.rows();
    if l < 2 {
        return Err(Error::invalid("transition distance needs at least two frames"));
    }
    let mut total = 0.0;
    for i in 0..l - 1 {
        let mut s = 0.0;
        for j in 0..f.cols() {
            let d = f.get(i + 1, j) - f.get(i, j);
            s += d * d;
        }
        total += s.sqrt();
    }
    Ok(total / (l - 1) as f64)
}

/// Mean norm of the second difference of frames; lower is smoother.
pub fn jerk_metric(m: &MotionSequence) -> Result<f64> {
    let f = m.frames();
    let l = f.rows();
    if l < 3 {
        return Err(Error::invalid("jerk needs at least three frames"));
    }
    let mut total = 0.0;
    for i in 0..l - 2 {
        let mut s = 0.0;
        for j in 0..f.cols() {
            let d = f.get(i + 2, j) - 2.0 * f.get(i + 1, j) + f.get(i, j);
            s += d * d;
        }
        total += s.sqrt();
    }
    Ok(total / (l - 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2;
    use crate::toymotion::{synthesize_motion, D_M, FRAME_RATE};

    fn motion(desc: &str, seed: u64) -> MotionSequence {
        let d = ConceptDescription::parse(desc).unwrap();
        synthesize_motion(&d, 80, 0.05, seed).unwrap()
    }

    #[test]
    fn noise_free_generator_samples_all_hit() {
        let mut samples = Vec::new();
        for (i, text) in
            ["direction:+x", "direction:circle,left-limb:wave", "bounce:hop,right-limb:raise"]
                .iter()
                .enumerate()
        {
            let d = ConceptDescription::parse(text).unwrap();
            let m = synthesize_motion(&d, 90, 0.0, i as u64).unwrap();
            samples.push((m, d));
        }
        let report = concept_recall(&samples).unwrap();
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.hits, 3);
        for fam in &report.per_family {
            assert_eq!(fam.rate, 1.0, "family {}", fam.family);
        }
    }

    #[test]
    fn mismatched_descriptions_rarely_hit() {
        let mut samples = Vec::new();
        for i in 0..20 {
            let m = motion("direction:+x", i);
            let wrong = ConceptDescription::parse("direction:-x").unwrap();
            samples.push((m, wrong));
        }
        let report = concept_recall(&samples).unwrap();
        assert!(report.recall <= 0.1, "recall {}", report.recall);
    }

    #[test]
    fn empty_description_hits_vacuously() {
        let m = motion("direction:+y", 1);
        let report = concept_recall(&[(m, ConceptDescription::empty())]).unwrap();
        assert_eq!(report.recall, 1.0);
        assert!(report.per_family.is_empty());
    }

    #[test]
    fn noisy_generator_ground_truth_stays_above_95_percent() {
        let cfg = crate::toymotion::GeneratorConfig {
            count: 400,
            noise_level: 0.1,
            seed: 77,
            ..Default::default()
        };
        let ds = crate::toymotion::generate_dataset(&cfg).unwrap();
        let samples: Vec<(MotionSequence, ConceptDescription)> =
            ds.records.into_iter().map(|r| (r.motion, r.desc)).collect();
        let report = concept_recall(&samples).unwrap();
        assert!(report.recall >= 0.95, "recall {}", report.recall);
    }

    #[test]
    fn diversity_matches_a_replayed_pairing() {
        let samples: Vec<MotionSequence> = (0..12)
            .map(|i| motion(if i % 2 == 0 { "direction:+x" } else { "bounce:hop" }, i))
            .collect();
        let got = diversity(&samples, 20, 9).unwrap();

        let feats: Vec<FeatureVector> = samples.iter().map(motion_features).collect();
        let order = canonical_order(&feats);
        let mut rng = SeedStream::new(9).derive("diversity-pairs");
        let mut seen = std::collections::HashSet::new();
        let mut total = 0.0;
        while seen.len() < 20 {
            let i = rng.below(12);
            let j = rng.below(11);
            let j = if j >= i { j + 1 } else { j };
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                total += feats[order[key.0]].distance(&feats[order[key.1]]);
            }
        }
        assert!((got - total / 20.0).abs() <= 1e-12);
    }

    #[test]
    fn diversity_ignores_sample_order() {
        let mut samples: Vec<MotionSequence> = (0..10)
            .map(|i| motion(if i % 3 == 0 { "direction:circle" } else { "left-limb:wave" }, i))
            .collect();
        let before = diversity(&samples, 15, 4).unwrap();
        samples.reverse();
        samples.swap(0, 5);
        let after = diversity(&samples, 15, 4).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn diversity_validates_pair_budget() {
        let samples: Vec<MotionSequence> = (0..3).map(|i| motion("direction:+x", i)).collect();
        assert!(diversity(&samples, 4, 0).is_err());
        assert!(diversity(&samples, 0, 0).is_err());
        assert!(diversity(&samples[..1], 1, 0).is_err());
        assert!(diversity(&samples, 3, 0).is_ok());
    }

    #[test]
    fn multimodality_is_zero_for_identical_draws() {
        let m = motion("direction:+y", 3);
        let group: Vec<MotionSequence> = (0..6).map(|_| m.clone()).collect();
        let v = multimodality(&[group], 3, 1).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn multimodality_matches_a_replayed_pairing() {
        let groups: Vec<Vec<MotionSequence>> = (0..2)
            .map(|g| (0..8).map(|i| motion("direction:circle", g * 100 + i)).collect())
            .collect();
        let got = multimodality(&groups, 4, 7).unwrap();

        let mut total = 0.0;
        let mut count = 0;
        for (g, group) in groups.iter().enumerate() {
            let feats: Vec<FeatureVector> = group.iter().map(motion_features).collect();
            let order = canonical_order(&feats);
            let mut rng = SeedStream::new(7).derive("multimodality").derive_idx(g as u64);
            let mut shuffled = order;
            rng.shuffle(&mut shuffled);
            for k in 0..4 {
                total += feats[shuffled[k]].distance(&feats[shuffled[4 + k]]);
                count += 1;
            }
        }
        assert!((got - total / count as f64).abs() <= 1e-12);
    }

    #[test]
    fn transition_distance_closed_forms() {
        let constant = MotionSequence::new(Tensor2::filled(50, D_M, 0.25), FRAME_RATE).unwrap();
        assert_eq!(transition_distance(&constant).unwrap(), 0.0);
        assert_eq!(jerk_metric(&constant).unwrap(), 0.0);

        // Uniform step of 0.03 in x and 0.04 in y per frame: step norm 0.05.
        let linear = MotionSequence::new(
            Tensor2::from_fn(60, D_M, |i, j| match j {
                0 => 0.03 * i as f64,
                1 => 0.04 * i as f64,
                _ => 0.0,
            }),
            FRAME_RATE,
        )
        .unwrap();
        let td = transition_distance(&linear).unwrap();
        assert!((td - 0.05).abs() <= 1e-12, "got {td}");
        assert!(jerk_metric(&linear).unwrap() <= 1e-12);
    }

    #[test]
    fn transition_distance_matches_naive_loop_and_ignores_offsets() {
        let m = motion("direction:circle,bounce:hop", 11);
        let got = transition_distance(&m).unwrap();
        let f = m.frames();
        let mut total = 0.0;
        for i in 0..f.rows() - 1 {
            let mut s = 0.0;
            for j in 0..f.cols() {
                s += (f.get(i + 1, j) - f.get(i, j)).powi(2);
            }
            total += s.sqrt();
        }
        let naive = total / (f.rows() - 1) as f64;
        assert!((got - naive).abs() <= 1e-12);

        // Offset every channel except heading, whose wrap would change deltas.
        let shifted = MotionSequence::new(
            Tensor2::from_fn(f.rows(), f.cols(), |i, j| {
                f.get(i, j) + if j == 2 { 0.0 } else { 3.0 }
            }),
            FRAME_RATE,
        )
        .unwrap();
        let after = transition_distance(&shifted).unwrap();
        assert!((got - after).abs() <= 1e-12);
    }

    #[test]
    fn jerk_matches_naive_loop() {
        let m = motion("left-limb:wave,right-limb:down", 13);
        let got = jerk_metric(&m).unwrap();
        let f = m.frames();
        let mut total = 0.0;
        for i in 0..f.rows() - 2 {
            let mut s = 0.0;
            for j in 0..f.cols() {
                s += (f.get(i + 2, j) - 2.0 * f.get(i + 1, j) + f.get(i, j)).powi(2);
            }
            total += s.sqrt();
        }
        assert!((got - total / (f.rows() - 2) as f64).abs() <= 1e-12);
    }

    #[test]
    fn per_sample_hits_mean_is_the_recall() {
        let d = ConceptDescription::parse("direction:+x,bounce:hop").unwrap();
        let samples: Vec<(MotionSequence, ConceptDescription)> = (0..30)
            .map(|i| (synthesize_motion(&d, 80, 0.2, i).unwrap(), d.clone()))
            .collect();
        let hits = per_sample_hits(&samples);
        assert_eq!(hits.len(), 30);
        let report = concept_recall(&samples).unwrap();
        let mean = hits.iter().sum::<f64>() / hits.len() as f64;
        assert!((mean - report.recall).abs() <= 1e-15);
    }

    #[test]
    fn bootstrap_interval_is_deterministic_and_brackets_the_mean() {
        let values: Vec<f64> = (0..200).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 }).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let (lo, hi) = bootstrap_mean_ci(&values, 2000, 0.95, 9).unwrap();
        let again = bootstrap_mean_ci(&values, 2000, 0.95, 9).unwrap();
        assert_eq!((lo, hi), again);
        assert!(lo <= mean && mean <= hi);
        assert!(lo > 0.5 && hi < 1.0);
    }

    #[test]
    fn bootstrap_of_a_constant_collapses_to_it() {
        let values = vec![0.25; 50];
        let (lo, hi) = bootstrap_mean_ci(&values, 200, 0.9, 1).unwrap();
        assert_eq!((lo, hi), (0.25, 0.25));
    }

    #[test]
    fn bootstrap_rejects_bad_arguments() {
        assert!(bootstrap_mean_ci(&[], 10, 0.95, 0).is_err());
        assert!(bootstrap_mean_ci(&[1.0], 0, 0.95, 0).is_err());
        assert!(bootstrap_mean_ci(&[1.0], 10, 1.0, 0).is_err());
        assert!(bootstrap_mean_ci(&[f64::NAN], 10, 0.95, 0).is_err());
    }
}
