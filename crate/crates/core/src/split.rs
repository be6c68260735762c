//! Leakage-safe stratified splitting.
//!
//! Splitting happens on distinct lesions: every image of a lesion lands in
//! the same subset. Per class, the sorted lesion ids are shuffled with a
//! seeded generator and prefix slices are taken; slice sizes come from a
//! largest-remainder apportionment of `round(fraction * lesions)` across
//! classes, so each class is within one lesion of its exact quota.
//!
//! Evaluation subsets use one canonical image per lesion (the smallest image
//! id, see [`canonical_images`]); training uses every image of its lesions.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::catalog::{group_lesions, LesionRecord};
use crate::error::{Error, Result};
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::seed;

const STREAM_TEST: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_FOLD: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub test_fraction: f64,
    pub val_fraction: f64,
}

/// Assignment of every catalog image to test, validation or training, plus
/// an optional k-fold assignment over the train+val pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    /// Number of folds; 0 when no fold assignment was made.
    pub k: usize,
    pub test: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub train: BTreeSet<String>,
    /// image id → fold index, defined on train ∪ val.
    pub folds: BTreeMap<String, usize>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl SplitManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Image ids of the train+val pool.
    pub fn pool(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(self.val.iter())
    }

    /// Assigns folds over the train+val pool using the manifest's seed.
    pub fn assign_folds(&mut self, records: &[LesionRecord], k: usize) -> Result<()> {
        let pool: Vec<LesionRecord> = records
            .iter()
            .filter(|r| self.train.contains(&r.image_id) || self.val.contains(&r.image_id))
            .cloned()
            .collect();
        self.folds = make_kfold(&pool, k, self.seed)?;
        self.k = k;
        Ok(())
    }

    /// Image ids of the pool whose fold is (or is not) `fold`.
    pub fn fold_members(&self, fold: usize, inside: bool) -> BTreeSet<String> {
        self.folds
            .iter()
            .filter(|(_, &f)| (f == fold) == inside)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Per-class slice sizes for `fraction` of `counts`, summing to
/// `round(fraction * total)` over eligible classes. Classes with a single
/// lesion never receive a lesion.
pub fn apportion(counts: &[usize; NUM_CLASSES], fraction: f64) -> [usize; NUM_CLASSES] {
    let total: usize = counts.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let mut take = [0usize; NUM_CLASSES];
    let mut remainders = Vec::new();
    for c in 0..NUM_CLASSES {
        if counts[c] < 2 {
            continue;
        }
        let exact = fraction * counts[c] as f64;
        take[c] = exact.floor() as usize;
        let rem = exact - exact.floor();
        if rem > 0.0 {
            remainders.push((rem, c));
        }
    }
    let assigned: usize = take.iter().sum();
    let extra = target.saturating_sub(assigned);
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in remainders.iter().take(extra) {
        take[c] += 1;
    }
    take
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")))
    }
}

/// Lesion-grouped stratified split. `val_fraction` applies to the lesions
/// left after the test slice is removed.
pub fn make_split(records: &[LesionRecord], seed: u64, test_fraction: f64, val_fraction: f64) -> Result<SplitManifest> {
    check_fraction("test_fraction", test_fraction)?;
    check_fraction("val_fraction", val_fraction)?;
    let groups = group_lesions(records)?;

    let mut by_class: [Vec<&str>; NUM_CLASSES] = Default::default();
    for (lesion, (label, _)) in &groups {
        by_class[label.index()].push(lesion);
    }

    let mut warnings = Vec::new();
    let min_needed = (1.0 / test_fraction.min(val_fraction)).ceil() as usize;
    for c in ClassLabel::ALL {
        let n = by_class[c.index()].len();
        if n == 1 {
            warnings.push(format!(
                "class {c} has a single lesion; it is kept in the training subset"
            ));
        } else if n > 0 && n < min_needed {
            warnings.push(format!(
                "class {c} has {n} lesions, fewer than the {min_needed} needed to populate every subset"
            ));
        }
    }

    for (class, lesions) in by_class.iter_mut().enumerate() {
        // BTreeMap iteration already sorts; shuffle per class
        lesions.shuffle(&mut seed::rng_for(seed, &[STREAM_TEST, class as u64]));
    }
    let counts: [usize; NUM_CLASSES] = std::array::from_fn(|c| by_class[c].len());
    let test_take = apportion(&counts, test_fraction);

    let mut test_lesions = Vec::new();
    let mut rest: [Vec<&str>; NUM_CLASSES] = Default::default();
    for c in 0..NUM_CLASSES {
        let (t, r) = by_class[c].split_at(test_take[c]);
        test_lesions.extend_from_slice(t);
        rest[c] = r.to_vec();
        rest[c].sort_unstable();
        rest[c].shuffle(&mut seed::rng_for(seed, &[STREAM_VAL, c as u64]));
    }
    let rest_counts: [usize; NUM_CLASSES] = std::array::from_fn(|c| rest[c].len());
    let val_take = apportion(&rest_counts, val_fraction);
    for c in ClassLabel::ALL {
        if counts[c.index()] > 1 && rest_counts[c.index()] == 1 {
            warnings.push(format!(
                "class {c} has one lesion left after the test slice; it is kept in training"
            ));
        }
    }

    let mut manifest = SplitManifest {
        seed,
        ratios: SplitRatios {
            test_fraction,
            val_fraction,
        },
        k: 0,
        test: BTreeSet::new(),
        val: BTreeSet::new(),
        train: BTreeSet::new(),
        folds: BTreeMap::new(),
        warnings,
    };
    let images = |lesion: &str| groups[lesion].1.iter().map(|r| r.image_id.clone());
    for lesion in test_lesions {
        manifest.test.extend(images(lesion));
    }
    for c in 0..NUM_CLASSES {
        let (v, t) = rest[c].split_at(val_take[c]);
        for lesion in v {
            manifest.val.extend(images(lesion));
        }
        for lesion in t {
            manifest.train.extend(images(lesion));
        }
    }
    for w in &manifest.warnings {
        warn!("{w}");
    }
    Ok(manifest)
}

/// Lesion-grouped stratified k-fold assignment over `pool`.
///
/// Within each class, fold sizes differ by at most one lesion. The starting
/// fold rotates with the number of lesions already placed, so folds stay
/// balanced overall as well.
pub fn make_kfold(pool: &[LesionRecord], k: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let groups = group_lesions(pool)?;
    let mut by_class: [Vec<&str>; NUM_CLASSES] = Default::default();
    for (lesion, (label, _)) in &groups {
        by_class[label.index()].push(lesion);
    }
    for c in ClassLabel::ALL {
        let n = by_class[c.index()].len();
        if n > 0 && n < k {
            return Err(Error::Split(format!(
                "class {c} has {n} lesions in the pool, fewer than k = {k}"
            )));
        }
    }
    let mut folds = BTreeMap::new();
    let mut placed = 0usize;
    for (c, lesions) in by_class.iter_mut().enumerate() {
        lesions.shuffle(&mut seed::rng_for(seed, &[STREAM_FOLD, c as u64]));
        for (i, lesion) in lesions.iter().enumerate() {
            let fold = (placed + i) % k;
            for r in &groups[lesion].1 {
                folds.insert(r.image_id.clone(), fold);
            }
        }
        placed += lesions.len();
    }
    Ok(folds)
}

/// One record per lesion among `ids`: the one with the smallest image id.
/// Returned in image-id order.
pub fn canonical_images<'a>(records: &'a [LesionRecord], ids: &BTreeSet<String>) -> Vec<&'a LesionRecord> {
    let mut best: BTreeMap<&str, &LesionRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| ids.contains(&r.image_id)) {
        best.entry(r.lesion_id.as_str())
            .and_modify(|cur| {
                if r.image_id < cur.image_id {
                    *cur = r;
                }
            })
            .or_insert(r);
    }
    let mut out: Vec<_> = best.into_values().collect();
    out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    out
}

/// Every record among `ids`, in image-id order.
pub fn all_images<'a>(records: &'a [LesionRecord], ids: &BTreeSet<String>) -> Vec<&'a LesionRecord> {
    let mut out: Vec<_> = records.iter().filter(|r| ids.contains(&r.image_id)).collect();
    out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    out
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use super::*;

    fn rec(image: &str, lesion: &str, label: ClassLabel) -> LesionRecord {
        LesionRecord {
            image_id: image.into(),
            lesion_id: lesion.into(),
            label,
            image_path: PathBuf::from(format!("{image}.jpg")),
            width: None,
            height: None,
        }
    }

    fn fixture(per_class: usize, dup_every: usize) -> Vec<LesionRecord> {
        let mut out = Vec::new();
        for c in ClassLabel::ALL {
            for i in 0..per_class {
                let lesion = format!("L_{c}_{i:03}");
                out.push(rec(&format!("I_{c}_{i:03}_a"), &lesion, c));
                if dup_every > 0 && i % dup_every == 0 {
                    out.push(rec(&format!("I_{c}_{i:03}_b"), &lesion, c));
                }
            }
        }
        out
    }

    #[test]
    fn ten_lesions_exact_division() {
        let recs: Vec<_> = (0..10)
            .map(|i| rec(&format!("I{i}"), &format!("L{i}"), ClassLabel::Mel))
            .collect();
        let m = make_split(&recs, 3, 0.2, 0.2).unwrap();
        assert_eq!((m.test.len(), m.val.len(), m.train.len()), (2, 2, 6));
    }

    #[test]
    fn duplicates_follow_their_lesion() {
        let recs = fixture(10, 2);
        let m = make_split(&recs, 42, 0.2, 0.2).unwrap();
        for c in ClassLabel::ALL {
            for i in (0..10).step_by(2) {
                let a = format!("I_{c}_{i:03}_a");
                let b = format!("I_{c}_{i:03}_b");
                let side = |id: &String| (m.test.contains(id), m.val.contains(id), m.train.contains(id));
                assert_eq!(side(&a), side(&b));
            }
        }
        assert_eq!(m.test.len() + m.val.len() + m.train.len(), recs.len());
    }

    #[test]
    fn seventy_lesions_run_twice_identical() {
        let recs = fixture(10, 0);
        let a = make_split(&recs, 42, 0.2, 0.2).unwrap().to_json();
        let b = make_split(&recs, 42, 0.2, 0.2).unwrap().to_json();
        assert_eq!(a, b);
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(make_split(&rev, 42, 0.2, 0.2).unwrap().to_json(), a);
        assert_ne!(make_split(&recs, 43, 0.2, 0.2).unwrap().to_json(), a);
    }

    #[test]
    fn single_lesion_class_goes_to_train_with_warning() {
        let mut recs = fixture(10, 0);
        recs.retain(|r| r.label != ClassLabel::Df);
        recs.push(rec("DF_ONLY", "L_DF", ClassLabel::Df));
        let m = make_split(&recs, 1, 0.2, 0.2).unwrap();
        assert!(m.train.contains("DF_ONLY"));
        assert!(m.warnings.iter().any(|w| w.contains("df")));
    }

    #[test]
    fn bad_fractions_are_config_errors() {
        let recs = fixture(3, 0);
        assert!(matches!(make_split(&recs, 0, 0.0, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_split(&recs, 0, 0.2, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn apportion_matches_lesion_level_counts() {
        // lesions per class: akiec, bcc, bkl, df, mel, nv, vasc (7,470 total)
        let counts = [228, 327, 727, 73, 614, 5403, 98];
        let take = apportion(&counts, 0.2);
        assert_eq!(take.iter().sum::<usize>(), 1494);
        for c in 0..NUM_CLASSES {
            assert!((take[c] as f64 - 0.2 * counts[c] as f64).abs() < 1.0);
        }
    }

    #[test]
    fn kfold_two_on_four() {
        let recs: Vec<_> = (0..4)
            .map(|i| rec(&format!("I{i}"), &format!("L{i}"), ClassLabel::Nv))
            .collect();
        let f = make_kfold(&recs, 2, 9).unwrap();
        let zeros = f.values().filter(|&&x| x == 0).count();
        assert_eq!(zeros, 2);
        assert_eq!(f.len(), 4);
    }

    #[test]
    fn kfold_thirty_five_one_per_class_per_fold() {
        let recs = fixture(5, 0);
        let f = make_kfold(&recs, 5, 11).unwrap();
        for fold in 0..5 {
            for c in ClassLabel::ALL {
                let n = recs.iter().filter(|r| r.label == c && f[&r.image_id] == fold).count();
                assert_eq!(n, 1, "fold {fold} class {c}");
            }
        }
    }

    #[test]
    fn kfold_too_large_names_class() {
        let mut recs = fixture(5, 0);
        recs.retain(|r| !(r.label == ClassLabel::Vasc && r.image_id.as_str() > "I_vasc_002"));
        let err = make_kfold(&recs, 5, 0).unwrap_err();
        assert!(err.to_string().contains("vasc"), "{err}");
        assert!(make_kfold(&recs, 1, 0).is_err());
    }

    #[test]
    fn canonical_is_smallest_image_id() {
        let recs = fixture(4, 1);
        let ids: BTreeSet<String> = recs.iter().map(|r| r.image_id.clone()).collect();
        let canon = canonical_images(&recs, &ids);
        assert_eq!(canon.len(), 28);
        assert!(canon.iter().all(|r| r.image_id.ends_with("_a")));
    }

    #[test]
    fn manifest_json_round_trip_and_key_order() {
        let recs = fixture(10, 3);
        let mut m = make_split(&recs, 5, 0.2, 0.25).unwrap();
        m.assign_folds(&recs, 3).unwrap();
        let text = m.to_json();
        let keys: Vec<_> = [
            "\"seed\"",
            "\"ratios\"",
            "\"k\"",
            "\"test\"",
            "\"val\"",
            "\"train\"",
            "\"folds\"",
        ]
        .iter()
        .map(|k| text.find(k).unwrap())
        .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let back = SplitManifest::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        assert_eq!(m.folds.len(), m.train.len() + m.val.len());
    }
}
