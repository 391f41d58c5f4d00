//! Pixel-pooled confusion counts and the building / damage / overall F1 scores.
//!
//! * building F1: classes 1–4 collapsed to "building" against background,
//!   `2TP / (2TP + FP + FN)`;
//! * per-class damage F1: one-vs-rest counts for classes 1–4 from the 5×5 matrix;
//! * damage F1: harmonic mean of the per-class values;
//! * overall: `0.3 · building + 0.7 · damage`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{DamageMask, DataError, NUM_CLASSES};
use crate::par;
use crate::tensor::IGNORE_INDEX;

pub const BUILDING_WEIGHT: f64 = 0.3;
pub const DAMAGE_WEIGHT: f64 = 0.7;

pub const DAMAGE_COLUMNS: [&str; 4] = ["No damage", "Minor", "Major", "Destroyed"];

/// `counts[i][j]`: pixels of true class `i` predicted as class `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one tile. Truth pixels equal to the ignore index are skipped.
    pub fn accumulate(&mut self, truth: &DamageMask, pred: &DamageMask) -> Result<(), DataError> {
        if truth.dims() != pred.dims() {
            return Err(DataError::DimensionMismatch {
                what: "accumulate",
                lhs: truth.dims(),
                rhs: pred.dims(),
            });
        }
        for (pixel, (&t, &p)) in truth.data().iter().zip(pred.data()).enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if p as usize >= NUM_CLASSES {
                return Err(DataError::InvalidClass { value: p, pixel });
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// Accumulates many tiles (in parallel when enabled) and merges in order.
    pub fn from_tiles<'a>(tiles: &[(&'a DamageMask, &'a DamageMask)]) -> Result<Self, DataError> {
        let parts = par::try_map_indexed(tiles.len(), |i| {
            let mut cm = Self::new();
            cm.accumulate(tiles[i].0, tiles[i].1)?;
            Ok::<_, DataError>(cm)
        })?;
        Ok(parts.iter().fold(Self::new(), |mut acc, cm| {
            acc.merge(cm);
            acc
        }))
    }

    pub fn merge(&mut self, other: &Self) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_total(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// One-vs-rest `(tp, fp, fn)` for `class`.
    pub fn class_counts(&self, class: usize) -> (u64, u64, u64) {
        let tp = self.counts[class][class];
        (tp, self.col_total(class) - tp, self.row_total(class) - tp)
    }

    /// `(tp, fp, fn)` for building (classes 1–4) against background.
    pub fn building_counts(&self) -> (u64, u64, u64) {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                match (t > 0, p > 0) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fn_ += n,
                    (false, false) => {}
                }
            }
        }
        (tp, fp, fn_)
    }

    /// Whether `class` occurs in the truth or in the prediction.
    pub fn class_present(&self, class: usize) -> bool {
        self.row_total(class) > 0 || self.col_total(class) > 0
    }
}

/// `2TP / (2TP + FP + FN)`, or 1 when all three counts are zero.
pub fn f1_binary(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Harmonic mean; 0 if any value is 0, 1 for an empty slice.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    if values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// `0.3 · f1_b + 0.7 · f1_d`.
pub fn overall_score(f1_b: f64, f1_d: f64) -> f64 {
    BUILDING_WEIGHT * f1_b + DAMAGE_WEIGHT * f1_d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DamageScores {
    /// F1 of classes 1–4.
    pub per_class: [f64; 4],
    /// Classes that occur in truth or prediction; absent ones are left out of
    /// the harmonic mean.
    pub present: [bool; 4],
    pub f1_damage: f64,
}

pub fn damage_scores(cm: &ConfusionMatrix) -> DamageScores {
    let mut per_class = [0.0; 4];
    let mut present = [false; 4];
    for k in 1..NUM_CLASSES {
        let (tp, fp, fn_) = cm.class_counts(k);
        per_class[k - 1] = f1_binary(tp, fp, fn_);
        present[k - 1] = cm.class_present(k);
    }
    let used: Vec<f64> = per_class
        .iter()
        .zip(&present)
        .filter(|(_, &p)| p)
        .map(|(&f, _)| f)
        .collect();
    DamageScores {
        per_class,
        present,
        f1_damage: harmonic_mean(&used),
    }
}

/// Row-normalized percentages; rows without any pixel are `None`.
pub fn confusion_percentages(cm: &ConfusionMatrix) -> [[Option<f64>; NUM_CLASSES]; NUM_CLASSES] {
    let mut out = [[None; NUM_CLASSES]; NUM_CLASSES];
    for (i, row) in cm.counts.iter().enumerate() {
        let total = cm.row_total(i);
        if total == 0 {
            continue;
        }
        for (j, &n) in row.iter().enumerate() {
            out[i][j] = Some(100.0 * n as f64 / total as f64);
        }
    }
    out
}

/// Percent table with one decimal; rows without pixels print a dash.
pub fn format_confusion_table(cm: &ConfusionMatrix) -> String {
    let pct = confusion_percentages(cm);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20}{:>7}{:>7}{:>7}{:>7}{:>7}",
        "Damage level", "C0", "C1", "C2", "C3", "C4"
    );
    let labels = [
        "Background (C0)",
        "No damage (C1)",
        "Minor (C2)",
        "Major (C3)",
        "Destroyed (C4)",
    ];
    for (label, row) in labels.iter().zip(pct) {
        let _ = write!(s, "{label:<20}");
        for cell in row {
            match cell {
                Some(v) => {
                    let _ = write!(s, "{v:>7.1}");
                }
                None => {
                    let _ = write!(s, "{:>7}", "—");
                }
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1_building: f64,
    pub f1_per_class: [f64; 4],
    pub f1_damage: f64,
    pub f1_overall: f64,
    pub confusion: ConfusionMatrix,
}

/// How scores are aggregated over a set of tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// One confusion matrix over all pixels of the split.
    #[default]
    Pooled,
    /// Scores per tile, then averaged.
    PerImage,
}

impl MetricsReport {
    /// Building F1 from the collapsed matrix, damage F1 from its damage classes.
    pub fn from_confusion(cm: ConfusionMatrix) -> Self {
        let (tp, fp, fn_) = cm.building_counts();
        Self::with_building(cm, f1_binary(tp, fp, fn_))
    }

    /// Uses an externally computed building F1 (e.g. from a separate
    /// segmentation model) with the damage scores of `cm`.
    pub fn with_building(cm: ConfusionMatrix, f1_building: f64) -> Self {
        let d = damage_scores(&cm);
        Self {
            f1_building,
            f1_per_class: d.per_class,
            f1_damage: d.f1_damage,
            f1_overall: overall_score(f1_building, d.f1_damage),
            confusion: cm,
        }
    }

    /// Score arithmetic only: damage F1 is the harmonic mean of `per_class`.
    pub fn from_per_class(f1_building: f64, per_class: [f64; 4]) -> Self {
        let f1_damage = harmonic_mean(&per_class);
        Self {
            f1_building,
            f1_per_class: per_class,
            f1_damage,
            f1_overall: overall_score(f1_building, f1_damage),
            confusion: ConfusionMatrix::new(),
        }
    }

    pub fn from_tiles(
        tiles: &[(&DamageMask, &DamageMask)],
        aggregation: Aggregation,
    ) -> Result<Self, DataError> {
        match aggregation {
            Aggregation::Pooled => Ok(Self::from_confusion(ConfusionMatrix::from_tiles(tiles)?)),
            Aggregation::PerImage => {
                let reports = par::try_map_indexed(tiles.len(), |i| {
                    let mut cm = ConfusionMatrix::new();
                    cm.accumulate(tiles[i].0, tiles[i].1)?;
                    Ok::<_, DataError>(Self::from_confusion(cm))
                })?;
                Ok(Self::mean_of(&reports))
            }
        }
    }

    /// Score-wise mean with the pooled confusion matrix.
    pub fn mean_of(reports: &[Self]) -> Self {
        let n = reports.len().max(1) as f64;
        let mut cm = ConfusionMatrix::new();
        let mut per_class = [0.0; 4];
        let (mut b, mut d) = (0.0, 0.0);
        for r in reports {
            cm.merge(&r.confusion);
            b += r.f1_building;
            d += r.f1_damage;
            for (acc, v) in per_class.iter_mut().zip(r.f1_per_class) {
                *acc += v;
            }
        }
        let (b, d) = (b / n, d / n);
        Self {
            f1_building: b,
            f1_per_class: per_class.map(|v| v / n),
            f1_damage: d,
            f1_overall: overall_score(b, d),
            confusion: cm,
        }
    }

    /// Aligned table: F1_s, F1_b, F1_d, then the four damage classes.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>10} {:>8} {:>8} {:>10}",
            "F1_s",
            "F1_b",
            "F1_d",
            DAMAGE_COLUMNS[0],
            DAMAGE_COLUMNS[1],
            DAMAGE_COLUMNS[2],
            DAMAGE_COLUMNS[3]
        );
        let p = self.f1_per_class;
        let _ = writeln!(
            s,
            "{:>8.3} {:>8.3} {:>8.3} {:>10.3} {:>8.3} {:>8.3} {:>10.3}",
            self.f1_overall, self.f1_building, self.f1_damage, p[0], p[1], p[2], p[3]
        );
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        let pct = confusion_percentages(&self.confusion);
        json!({
            "f1_building": self.f1_building,
            "f1_per_class": self.f1_per_class,
            "f1_damage": self.f1_damage,
            "f1_overall": self.f1_overall,
            "confusion_counts": self.confusion.counts,
            "confusion_percent": pct,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, v: &[u8]) -> DamageMask {
        DamageMask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_single_class_tile() {
        let t = DamageMask::filled(4, 3, 2);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&t, &t).unwrap();
        assert_eq!(cm.counts[2][2], 12);
        assert_eq!(cm.total(), 12);
    }

    #[test]
    fn two_by_two_hand_count() {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&mask(2, 2, &[1, 1, 2, 2]), &mask(2, 2, &[1, 2, 2, 2]))
            .unwrap();
        assert_eq!(cm.counts[1][1], 1);
        assert_eq!(cm.counts[1][2], 1);
        assert_eq!(cm.counts[2][2], 2);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn ignore_pixels_are_skipped_and_dims_checked() {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&mask(1, 2, &[255, 1]), &mask(1, 2, &[3, 1]))
            .unwrap();
        assert_eq!(cm.total(), 1);
        assert!(cm
            .accumulate(&mask(1, 2, &[0, 0]), &mask(2, 1, &[0, 0]))
            .is_err());
    }

    #[test]
    fn tile_accumulation_equals_concatenation() {
        let (a, pa) = (mask(1, 3, &[0, 1, 2]), mask(1, 3, &[0, 2, 2]));
        let (b, pb) = (mask(1, 3, &[3, 4, 4]), mask(1, 3, &[3, 4, 0]));
        let mut split = ConfusionMatrix::new();
        split.accumulate(&a, &pa).unwrap();
        split.accumulate(&b, &pb).unwrap();
        let mut joined = ConfusionMatrix::new();
        joined
            .accumulate(
                &mask(2, 3, &[0, 1, 2, 3, 4, 4]),
                &mask(2, 3, &[0, 2, 2, 3, 4, 0]),
            )
            .unwrap();
        assert_eq!(split, joined);
    }

    #[test]
    fn f1_binary_cases() {
        assert_eq!(f1_binary(10, 0, 0), 1.0);
        assert_eq!(f1_binary(0, 5, 5), 0.0);
        assert_eq!(f1_binary(3, 1, 2), 6.0 / 9.0);
        assert_eq!(f1_binary(0, 0, 0), 1.0);
    }

    #[test]
    fn harmonic_mean_of_equal_values() {
        assert!((harmonic_mean(&[0.42; 4]) - 0.42).abs() < 1e-15);
        assert_eq!(harmonic_mean(&[0.9, 0.0, 0.5]), 0.0);
    }

    #[test]
    fn published_row_arithmetic() {
        let ours = MetricsReport::from_per_class(0.864, [0.927, 0.610, 0.781, 0.873]);
        assert!((ours.f1_damage - 0.778).abs() <= 1e-3);
        assert!((overall_score(0.864, 0.778) - 0.804).abs() <= 5e-4);
        let base = MetricsReport::from_per_class(0.864, [0.923, 0.578, 0.760, 0.869]);
        assert!((base.f1_damage - 0.757).abs() <= 1e-3);
        assert!((overall_score(0.864, 0.757) - 0.789).abs() <= 5e-4);
        assert_eq!(overall_score(1.0, 1.0), 1.0);
    }

    #[test]
    fn absent_damage_class_is_dropped_from_mean() {
        // Classes 3 and 4 never occur; 1 and 2 are perfect.
        let t = mask(1, 3, &[0, 1, 2]);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&t, &t).unwrap();
        let d = damage_scores(&cm);
        assert_eq!(d.present, [true, true, false, false]);
        assert_eq!(d.f1_damage, 1.0);

        // Class 2 predicted but never true: present with F1 = 0.
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&mask(1, 2, &[1, 1]), &mask(1, 2, &[1, 2]))
            .unwrap();
        assert_eq!(damage_scores(&cm).f1_damage, 0.0);
    }

    #[test]
    fn percentages_of_scaled_table_row() {
        let mut cm = ConfusionMatrix::new();
        cm.counts[2] = [63, 242, 600, 92, 4];
        cm.counts[0][0] = 5;
        let pct = confusion_percentages(&cm);
        let rounded: Vec<String> = pct[2]
            .iter()
            .map(|v| format!("{:.1}", v.unwrap()))
            .collect();
        assert_eq!(rounded, ["6.3", "24.2", "59.9", "9.2", "0.4"]);
        assert_eq!(pct[0][0], Some(100.0));
        assert!(pct[1].iter().all(Option::is_none));
        let table = format_confusion_table(&cm);
        assert!(table.contains("—"));
        assert!(table.contains("24.2"));
    }

    #[test]
    fn report_invariants_and_json_fields() {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(
            &mask(2, 3, &[0, 1, 2, 3, 4, 1]),
            &mask(2, 3, &[0, 1, 3, 3, 4, 2]),
        )
        .unwrap();
        let r = MetricsReport::from_confusion(cm);
        assert_eq!(r.f1_overall, 0.3 * r.f1_building + 0.7 * r.f1_damage);
        let j = r.to_json();
        for key in [
            "f1_building",
            "f1_per_class",
            "f1_damage",
            "f1_overall",
            "confusion_counts",
            "confusion_percent",
        ] {
            assert!(j.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn percentages_are_scale_invariant(row in prop::collection::vec(0u64..1000, 5), k in 1u64..50) {
            let mut a = ConfusionMatrix::new();
            a.counts[1].copy_from_slice(&row);
            let mut b = ConfusionMatrix::new();
            b.counts[1] = a.counts[1].map(|v| v * k);
            let (pa, pb) = (confusion_percentages(&a), confusion_percentages(&b));
            for j in 0..5 {
                match (pa[1][j], pb[1][j]) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
        }

        #[test]
        fn overall_is_bounded_and_monotone(b in 0.0f64..=1.0, d in 0.0f64..=1.0, db in 0.0f64..0.5) {
            let s = overall_score(b, d);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!(overall_score((b + db).min(1.0), d) >= s);
            prop_assert!(overall_score(b, (d + db).min(1.0)) >= s);
        }

        #[test]
        fn tile_order_does_not_change_scores(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tiles: Vec<(DamageMask, DamageMask)> = (0..6)
                .map(|_| {
                    let t = (0..16).map(|_| rng.gen_range(0..5u8)).collect::<Vec<u8>>();
                    let p = (0..16).map(|_| rng.gen_range(0..5u8)).collect::<Vec<u8>>();
                    (mask(4, 4, &t), mask(4, 4, &p))
                })
                .collect();
            let mut refs: Vec<_> = tiles.iter().map(|(a, b)| (a, b)).collect();
            let first = MetricsReport::from_tiles(&refs, Aggregation::Pooled).unwrap();
            refs.shuffle(&mut rng);
            let second = MetricsReport::from_tiles(&refs, Aggregation::Pooled).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
