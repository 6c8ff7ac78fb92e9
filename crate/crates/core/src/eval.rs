//! Scoring: presence detection, landmark extraction, localization error,
//! identification rate, and per-region report aggregation.

use thiserror::Error;

use crate::heatmap::HeatmapStack;
use crate::labels::Region;
use crate::landmarks::{Landmark, LandmarkSet};
use crate::par;

/// Identification radius: a prediction further than this from its own
/// ground-truth centroid is never identified.
pub const DEFAULT_ID_RADIUS_MM: f64 = 20.0;

/// Report rows, fixed order. Sacral and non-canonical labels count toward
/// `All` only.
pub const REGION_ROWS: [&str; 4] = ["All", "Cervical", "Thoracic", "Lumbar"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and ground truth carry different label chains")]
    LabelMismatch,
    #[error("case {index}: {source}")]
    Case {
        index: usize,
        #[source]
        source: Box<EvalError>,
    },
}

/// Labels whose channel maximum exceeds `threshold`.
pub fn detect_presence(stack: &HeatmapStack, threshold: f64) -> Vec<String> {
    assert!(threshold > 0.0, "presence threshold must be positive");
    (0..stack.len())
        .filter(|&c| stack.channel(c).argmax().1 > threshold)
        .map(|c| stack.labels()[c].clone())
        .collect()
}

/// Argmax-per-channel landmark decoding: the predicted centroid is the world
/// position of the channel's maximum voxel; channels at or below `threshold`
/// decode as absent.
pub fn extract_landmarks(stack: &HeatmapStack, threshold: f64) -> LandmarkSet {
    assert!(threshold > 0.0, "presence threshold must be positive");
    let marks = (0..stack.len())
        .map(|c| {
            let label = &stack.labels()[c];
            let (voxel, value) = stack.channel(c).argmax();
            if value > threshold {
                Landmark::present(label, stack.geometry().voxel_to_world(voxel))
            } else {
                Landmark::absent(label)
            }
        })
        .collect();
    LandmarkSet::new(marks).expect("stack labels are unique")
}

fn distance_mm(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn check_alignment(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<(), EvalError> {
    if pred.labels() != gt.labels() {
        return Err(EvalError::LabelMismatch);
    }
    Ok(())
}

/// Euclidean distance per mutually-present label, chain order.
pub fn localization_errors(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
) -> Result<Vec<(String, f64)>, EvalError> {
    check_alignment(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt.iter())
        .filter(|(p, g)| p.present && g.present)
        .map(|(p, g)| (p.label.clone(), distance_mm(p.position_mm, g.position_mm)))
        .collect())
}

/// Per-label outcome of scoring one case.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelScore {
    pub label: String,
    /// Euclidean error; `None` unless the label is present in both sets.
    pub error_mm: Option<f64>,
    /// This label is an identification target (present in ground truth).
    pub gt_present: bool,
    /// Within the radius of its own ground truth, which is also the nearest
    /// present ground-truth centroid.
    pub identified: bool,
}

/// Scores every label of one case against the identification rule.
pub fn score_case(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    radius_mm: f64,
) -> Result<Vec<LabelScore>, EvalError> {
    check_alignment(pred, gt)?;
    let gt_present: Vec<&Landmark> = gt.iter().filter(|g| g.present).collect();
    let scores = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| {
            let error_mm = (p.present && g.present)
                .then(|| distance_mm(p.position_mm, g.position_mm));
            let identified = match error_mm {
                Some(own) => {
                    own < radius_mm
                        && gt_present.iter().all(|other| {
                            other.label == g.label
                                || distance_mm(p.position_mm, other.position_mm) >= own
                        })
                }
                None => false,
            };
            LabelScore {
                label: p.label.clone(),
                error_mm,
                gt_present: g.present,
                identified,
            }
        })
        .collect();
    Ok(scores)
}

/// Identified fraction of ground-truth-present landmarks; 1.0 when the
/// ground truth has no present landmarks.
pub fn identification_rate(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    radius_mm: f64,
) -> Result<f64, EvalError> {
    let scores = score_case(pred, gt, radius_mm)?;
    let targets = scores.iter().filter(|s| s.gt_present).count();
    if targets == 0 {
        return Ok(1.0);
    }
    Ok(scores.iter().filter(|s| s.identified).count() as f64 / targets as f64)
}

/// Scores many cases, parallel over cases, output in case order.
pub fn score_cases(
    pred: &[LandmarkSet],
    gt: &[LandmarkSet],
    radius_mm: f64,
) -> Result<Vec<Vec<LabelScore>>, EvalError> {
    assert_eq!(pred.len(), gt.len(), "one prediction per ground truth");
    par::map_indexed(pred.len(), |i| {
        score_case(&pred[i], &gt[i], radius_mm).map_err(|e| EvalError::Case {
            index: i,
            source: Box::new(e),
        })
    })
    .into_iter()
    .collect()
}

/// Aggregate statistics of one report region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    /// Mutually-present labels contributing errors.
    pub error_count: usize,
    /// Ground-truth-present labels (identification targets).
    pub target_count: usize,
    /// Mean error; `None` when no label was present in both sets.
    pub mean_mm: Option<f64>,
    /// Population standard deviation (divide by n).
    pub std_mm: Option<f64>,
    /// Identified / targets; `None` when the region has no targets.
    pub id_rate: Option<f64>,
}

/// Per-region evaluation report over a batch of scored cases.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// One entry per [`REGION_ROWS`] row; `None` when the region never
    /// occurs (no errors and no targets).
    pub regions: Vec<(String, Option<RegionStats>)>,
    /// Per-case per-label scores, case order preserved.
    pub cases: Vec<Vec<LabelScore>>,
}

impl EvalReport {
    /// Stats of a named region row, if the region occurred.
    pub fn region(&self, name: &str) -> Option<&RegionStats> {
        self.regions
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, s)| s.as_ref())
    }
}

fn in_region(label: &str, row: &str) -> bool {
    match row {
        "All" => true,
        "Cervical" => Region::of(label) == Some(Region::Cervical),
        "Thoracic" => Region::of(label) == Some(Region::Thoracic),
        "Lumbar" => Region::of(label) == Some(Region::Lumbar),
        _ => false,
    }
}

/// Pools scored cases into the fixed region rows.
pub fn region_report(cases: Vec<Vec<LabelScore>>) -> EvalReport {
    let regions = REGION_ROWS
        .iter()
        .map(|row| {
            let scores = cases
                .iter()
                .flatten()
                .filter(|s| in_region(&s.label, row));
            let mut errors = Vec::new();
            let mut targets = 0usize;
            let mut identified = 0usize;
            for s in scores {
                if let Some(e) = s.error_mm {
                    errors.push(e);
                }
                if s.gt_present {
                    targets += 1;
                }
                if s.identified {
                    identified += 1;
                }
            }
            if errors.is_empty() && targets == 0 {
                return (row.to_string(), None);
            }
            let (mean, std) = if errors.is_empty() {
                (None, None)
            } else {
                let n = errors.len() as f64;
                let mean = errors.iter().sum::<f64>() / n;
                let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
                (Some(mean), Some(var.sqrt()))
            };
            let stats = RegionStats {
                error_count: errors.len(),
                target_count: targets,
                mean_mm: mean,
                std_mm: std,
                id_rate: (targets > 0).then(|| identified as f64 / targets as f64),
            };
            (row.to_string(), Some(stats))
        })
        .collect();
    EvalReport { regions, cases }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn geometry() -> Geometry {
        Geometry::isotropic([16, 16, 48], 4.0).unwrap()
    }

    fn voxel_centered_set() -> LandmarkSet {
        LandmarkSet::new(vec![
            Landmark::present("T1", [32.0, 32.0, 160.0]),
            Landmark::present("T2", [32.0, 32.0, 140.0]),
            Landmark::present("T3", [32.0, 32.0, 120.0]),
        ])
        .unwrap()
    }

    #[test]
    fn presence_follows_channel_maximum() {
        let stack = HeatmapStack::gaussian_targets(&geometry(), &voxel_centered_set(), 6.0)
            .unwrap();
        let peak = stack.channel(0).argmax().1;
        assert_eq!(
            detect_presence(&stack, 0.4 * peak),
            vec!["T1", "T2", "T3"]
        );
        assert!(detect_presence(&stack, 2.0 * peak).is_empty());
    }

    #[test]
    fn all_zero_channel_is_absent_for_any_positive_threshold() {
        let set = LandmarkSet::new(vec![
            Landmark::present("T1", [32.0, 32.0, 160.0]),
            Landmark::absent("T2"),
        ])
        .unwrap();
        let stack = HeatmapStack::gaussian_targets(&geometry(), &set, 6.0).unwrap();
        for threshold in [1e-12, 1e-3, 0.5] {
            assert!(!detect_presence(&stack, threshold).contains(&"T2".to_string()));
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_labels() {
        let stack = HeatmapStack::gaussian_targets(&geometry(), &voxel_centered_set(), 6.0)
            .unwrap();
        let peak = stack.channel(0).argmax().1;
        let mut previous: Option<Vec<String>> = None;
        for step in 1..=10 {
            let now = detect_presence(&stack, 0.2 * step as f64 * peak);
            if let Some(prev) = &previous {
                assert!(now.iter().all(|l| prev.contains(l)), "threshold sweep added {now:?}");
            }
            previous = Some(now);
        }
    }

    #[test]
    fn dropped_channels_are_never_detected() {
        let stack = HeatmapStack::gaussian_targets(&geometry(), &voxel_centered_set(), 6.0)
            .unwrap();
        let out = crate::synth::corrupt_stack(&stack, &["T2".to_string()], &[], 6.0);
        for threshold in [1e-9, 1e-3, 0.1] {
            assert!(!detect_presence(&out, threshold).contains(&"T2".to_string()));
        }
    }

    #[test]
    fn extraction_recovers_voxel_centred_landmarks() {
        let truth = voxel_centered_set();
        let stack = HeatmapStack::gaussian_targets(&geometry(), &truth, 6.0).unwrap();
        let peak = stack.channel(0).argmax().1;
        let got = extract_landmarks(&stack, 0.5 * peak);
        assert_eq!(got, truth);
    }

    #[test]
    fn extraction_marks_quiet_channels_absent() {
        let set = LandmarkSet::new(vec![
            Landmark::present("T1", [32.0, 32.0, 160.0]),
            Landmark::absent("T2"),
        ])
        .unwrap();
        let stack = HeatmapStack::gaussian_targets(&geometry(), &set, 6.0).unwrap();
        let got = extract_landmarks(&stack, 1e-6);
        assert!(got.get("T1").unwrap().present);
        assert!(!got.get("T2").unwrap().present);
    }

    #[test]
    fn identical_sets_score_perfectly() {
        let set = voxel_centered_set();
        let errors = localization_errors(&set, &set).unwrap();
        assert_eq!(errors.len(), 3);
        assert!(errors.iter().all(|(_, e)| *e == 0.0));
        assert_eq!(identification_rate(&set, &set, 20.0).unwrap(), 1.0);
    }

    #[test]
    fn offset_3_4_0_measures_5mm() {
        let gt = LandmarkSet::new(vec![Landmark::present("T1", [10.0, 10.0, 10.0])]).unwrap();
        let pred = LandmarkSet::new(vec![Landmark::present("T1", [13.0, 14.0, 10.0])]).unwrap();
        let errors = localization_errors(&pred, &gt).unwrap();
        assert_eq!(errors, vec![("T1".to_string(), 5.0)]);
    }

    #[test]
    fn errors_match_scalar_recomputation() {
        let mut rng = crate::rng::stream(17, 90, 0);
        let labels = ["C2", "T4", "L1", "S1"];
        let random_set = |rng: &mut rand_chacha::ChaCha8Rng| {
            LandmarkSet::new(
                labels
                    .iter()
                    .map(|l| {
                        Landmark::present(
                            l,
                            [
                                rng.random_range(-50.0..50.0),
                                rng.random_range(-50.0..50.0),
                                rng.random_range(-50.0..50.0),
                            ],
                        )
                    })
                    .collect(),
            )
            .unwrap()
        };
        for _ in 0..20 {
            let pred = random_set(&mut rng);
            let gt = random_set(&mut rng);
            let got = localization_errors(&pred, &gt).unwrap();
            for (i, (label, e)) in got.iter().enumerate() {
                let p = pred.get(label).unwrap().position_mm;
                let g = gt.get(label).unwrap().position_mm;
                let expect = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)
                    + (p[2] - g[2]).powi(2))
                .sqrt();
                assert_relative_eq!(*e, expect, epsilon = 1e-12);
                assert_eq!(*label, labels[i]);
            }
        }
    }

    #[test]
    fn beyond_radius_is_not_identified() {
        let gt = LandmarkSet::new(vec![Landmark::present("T1", [0.0, 0.0, 0.0])]).unwrap();
        let pred = LandmarkSet::new(vec![Landmark::present("T1", [25.0, 0.0, 0.0])]).unwrap();
        assert_eq!(identification_rate(&pred, &gt, 20.0).unwrap(), 0.0);
        let pred = LandmarkSet::new(vec![Landmark::present("T1", [19.0, 0.0, 0.0])]).unwrap();
        assert_eq!(identification_rate(&pred, &gt, 20.0).unwrap(), 1.0);
    }

    #[test]
    fn closer_neighbour_centroid_blocks_identification() {
        // Prediction for T1 sits 8 mm from its own truth but only 4 mm from
        // T2's truth, so the nearest-centroid clause rejects it.
        let gt = LandmarkSet::new(vec![
            Landmark::present("T1", [0.0, 0.0, 0.0]),
            Landmark::present("T2", [0.0, 0.0, 12.0]),
        ])
        .unwrap();
        let pred = LandmarkSet::new(vec![
            Landmark::present("T1", [0.0, 0.0, 8.0]),
            Landmark::present("T2", [0.0, 0.0, 12.0]),
        ])
        .unwrap();
        let scores = score_case(&pred, &gt, 20.0).unwrap();
        assert!(!scores[0].identified);
        assert!(scores[1].identified);
        assert_eq!(identification_rate(&pred, &gt, 20.0).unwrap(), 0.5);
    }

    #[test]
    fn identification_rate_is_translation_invariant() {
        let gt = voxel_centered_set();
        let pred = LandmarkSet::new(vec![
            Landmark::present("T1", [33.0, 32.0, 161.0]),
            Landmark::present("T2", [32.0, 30.0, 141.0]),
            Landmark::present("T3", [32.0, 32.0, 80.0]),
        ])
        .unwrap();
        let shift = [10.0, -5.0, 7.0];
        let translate = |set: &LandmarkSet| {
            LandmarkSet::new(
                set.iter()
                    .map(|m| {
                        let mut p = m.position_mm;
                        for (axis, s) in shift.iter().enumerate() {
                            p[axis] += s;
                        }
                        Landmark::present(&m.label, p)
                    })
                    .collect(),
            )
            .unwrap()
        };
        let base = identification_rate(&pred, &gt, 20.0).unwrap();
        let moved = identification_rate(&translate(&pred), &translate(&gt), 20.0).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn absent_labels_do_not_score() {
        let gt = LandmarkSet::new(vec![
            Landmark::present("T1", [0.0, 0.0, 0.0]),
            Landmark::absent("T2"),
        ])
        .unwrap();
        let pred = LandmarkSet::new(vec![
            Landmark::absent("T1"),
            Landmark::present("T2", [0.0, 0.0, 12.0]),
        ])
        .unwrap();
        assert!(localization_errors(&pred, &gt).unwrap().is_empty());
        // T1 is a target the prediction missed; T2 is not a target at all.
        assert_eq!(identification_rate(&pred, &gt, 20.0).unwrap(), 0.0);
        let scores = score_case(&pred, &gt, 20.0).unwrap();
        assert!(scores.iter().all(|s| s.error_mm.is_none()));
        assert!(scores.iter().all(|s| !s.identified));
    }

    #[test]
    fn mismatched_chains_are_an_error() {
        let a = LandmarkSet::new(vec![Landmark::present("T1", [0.0; 3])]).unwrap();
        let b = LandmarkSet::new(vec![Landmark::present("T2", [0.0; 3])]).unwrap();
        assert!(matches!(
            localization_errors(&a, &b),
            Err(EvalError::LabelMismatch)
        ));
        assert!(matches!(
            score_case(&a, &b, 20.0),
            Err(EvalError::LabelMismatch)
        ));
    }

    fn score(label: &str, error: f64, identified: bool) -> LabelScore {
        LabelScore {
            label: label.to_string(),
            error_mm: Some(error),
            gt_present: true,
            identified,
        }
    }

    #[test]
    fn frozen_mean_and_population_std() {
        // Errors {1,2,3,4}: mean 2.5, population std sqrt(1.25) = 1.118.
        let cases = vec![vec![
            score("T1", 1.0, true),
            score("T2", 2.0, true),
            score("T3", 3.0, true),
            score("T4", 4.0, false),
        ]];
        let report = region_report(cases);
        let all = report.region("All").unwrap();
        assert_relative_eq!(all.mean_mm.unwrap(), 2.5, epsilon = 1e-12);
        assert_relative_eq!(all.std_mm.unwrap(), 1.118, epsilon = 1e-3);
        assert_relative_eq!(all.id_rate.unwrap(), 0.75, epsilon = 1e-12);
        assert_eq!(report.region("Thoracic").unwrap(), all);
    }

    #[test]
    fn single_region_data_makes_all_equal_that_region() {
        let cases = vec![vec![score("L1", 2.0, true), score("L2", 6.0, true)]];
        let report = region_report(cases);
        assert_eq!(report.region("All"), report.region("Lumbar"));
        assert_eq!(report.region("Cervical"), None);
        assert_eq!(report.region("Thoracic"), None);
    }

    #[test]
    fn all_mean_is_the_count_weighted_region_combination() {
        let cases = vec![
            vec![score("C1", 1.0, true), score("T1", 4.0, true)],
            vec![score("T2", 2.0, false), score("L5", 9.0, true)],
        ];
        let report = region_report(cases);
        let mut weighted = 0.0;
        let mut count = 0usize;
        for row in ["Cervical", "Thoracic", "Lumbar"] {
            let stats = report.region(row).unwrap();
            weighted += stats.mean_mm.unwrap() * stats.error_count as f64;
            count += stats.error_count;
        }
        let all = report.region("All").unwrap();
        assert_eq!(count, all.error_count);
        assert_relative_eq!(
            all.mean_mm.unwrap(),
            weighted / count as f64,
            epsilon = 1e-12
        );
    }

    #[test]
    fn targets_without_errors_report_absent_stats_not_zero() {
        // Every prediction missed: stats absent, rate zero, row still there.
        let cases = vec![vec![LabelScore {
            label: "T1".to_string(),
            error_mm: None,
            gt_present: true,
            identified: false,
        }]];
        let report = region_report(cases);
        let all = report.region("All").unwrap();
        assert_eq!(all.mean_mm, None);
        assert_eq!(all.std_mm, None);
        assert_eq!(all.id_rate, Some(0.0));
        assert_eq!(all.target_count, 1);
    }

    #[test]
    fn sacral_labels_count_in_all_only() {
        let cases = vec![vec![score("S1", 3.0, true), score("T1", 1.0, true)]];
        let report = region_report(cases);
        assert_eq!(report.region("All").unwrap().error_count, 2);
        assert_eq!(report.region("Thoracic").unwrap().error_count, 1);
        assert_eq!(report.region("Lumbar"), None);
        assert_relative_eq!(
            report.region("All").unwrap().mean_mm.unwrap(),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn batch_scoring_matches_single_case_scoring() {
        let gt = vec![voxel_centered_set(), voxel_centered_set()];
        let pred = vec![voxel_centered_set(), voxel_centered_set()];
        let batch = score_cases(&pred, &gt, 20.0).unwrap();
        for (i, case) in batch.iter().enumerate() {
            assert_eq!(*case, score_case(&pred[i], &gt[i], 20.0).unwrap());
        }
    }
}
