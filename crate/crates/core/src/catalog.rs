//! Metadata catalog ingestion, class statistics and class weights.
//!
//! The catalog is a CSV file with at least the columns `lesion_id`,
//! `image_id` and `dx`. Several images may share a `lesion_id`: they are
//! photographs of the same physical lesion and must never be split across
//! subsets.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ClassLabel, NUM_CLASSES};

/// One image row of the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub image_id: String,
    pub lesion_id: String,
    pub label: ClassLabel,
    pub image_path: PathBuf,
    /// Pixel dimensions, when known. Images are only opened at read time.
    pub width: Option<u32>,
    pub height: Option<u32>,
}

/// Reads the metadata CSV. Image paths resolve to `<images_root>/<image_id>.jpg`;
/// their existence is not checked here.
pub fn load_catalog(metadata_path: &Path, images_root: &Path) -> Result<Vec<LesionRecord>> {
    let file = std::fs::File::open(metadata_path).map_err(|e| Error::io(metadata_path, e))?;
    read_catalog(file, images_root)
}

/// Same as [`load_catalog`] over any reader.
pub fn read_catalog(reader: impl std::io::Read, images_root: &Path) -> Result<Vec<LesionRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Catalog {
            row: 1,
            message: format!("unreadable header: {e}"),
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| Error::Catalog {
                row: 1,
                message: format!("missing required column '{name}'"),
            })
    };
    let (lesion_col, image_col, dx_col) = (column("lesion_id")?, column("image_id")?, column("dx")?);

    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        // line 1 is the header
        let line = i + 2;
        let row = row.map_err(|e| Error::Catalog {
            row: line,
            message: e.to_string(),
        })?;
        let field = |col: usize| row.get(col).unwrap_or("").to_string();
        let image_id = field(image_col);
        if image_id.is_empty() {
            return Err(Error::Catalog {
                row: line,
                message: "missing image_id".into(),
            });
        }
        if let Some(first) = seen.insert(image_id.clone(), line) {
            return Err(Error::Catalog {
                row: line,
                message: format!("duplicated image_id '{image_id}' (first seen at row {first})"),
            });
        }
        let lesion_id = field(lesion_col);
        if lesion_id.is_empty() {
            return Err(Error::Catalog {
                row: line,
                message: format!("missing lesion_id for image '{image_id}'"),
            });
        }
        let dx = field(dx_col);
        let label = dx.parse::<ClassLabel>().map_err(|_| Error::Catalog {
            row: line,
            message: format!("unknown dx code '{dx}'"),
        })?;
        records.push(LesionRecord {
            image_path: images_root.join(format!("{image_id}.jpg")),
            image_id,
            lesion_id,
            label,
            width: None,
            height: None,
        });
    }
    Ok(records)
}

pub fn distinct_lesions(records: &[LesionRecord]) -> usize {
    records
        .iter()
        .map(|r| r.lesion_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len()
}

/// Groups records by lesion, checking that each lesion carries one label.
/// Images inside a group are sorted by image id.
pub fn group_lesions(records: &[LesionRecord]) -> Result<BTreeMap<&str, (ClassLabel, Vec<&LesionRecord>)>> {
    let mut groups: BTreeMap<&str, (ClassLabel, Vec<&LesionRecord>)> = BTreeMap::new();
    for r in records {
        let entry = groups
            .entry(r.lesion_id.as_str())
            .or_insert_with(|| (r.label, Vec::new()));
        if entry.0 != r.label {
            return Err(Error::Integrity(format!(
                "lesion '{}' has conflicting labels {} and {}",
                r.lesion_id, entry.0, r.label
            )));
        }
        entry.1.push(r);
    }
    for (_, images) in groups.values_mut() {
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Image,
    Lesion,
}

/// Per-class counts at image or lesion granularity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    #[serde(with = "per_class")]
    pub counts: [u64; NUM_CLASSES],
    pub total: u64,
}

impl ClassDistribution {
    pub fn from_counts(counts: [u64; NUM_CLASSES]) -> Self {
        ClassDistribution {
            counts,
            total: counts.iter().sum(),
        }
    }

    pub fn count(&self, class: ClassLabel) -> u64 {
        self.counts[class.index()]
    }
}

pub fn class_distribution(records: &[LesionRecord], granularity: Granularity) -> Result<ClassDistribution> {
    let mut counts = [0u64; NUM_CLASSES];
    match granularity {
        Granularity::Image => {
            for r in records {
                counts[r.label.index()] += 1;
            }
        }
        Granularity::Lesion => {
            for (label, _) in group_lesions(records)?.values() {
                counts[label.index()] += 1;
            }
        }
    }
    Ok(ClassDistribution::from_counts(counts))
}

/// Per-class loss weights, all strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    #[serde(with = "per_class")]
    pub weights: [f64; NUM_CLASSES],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights {
            weights: [1.0; NUM_CLASSES],
        }
    }

    pub fn new(weights: [f64; NUM_CLASSES]) -> Result<Self> {
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Config(format!(
                "class weight for {} must be positive and finite, got {w}",
                ClassLabel::ALL[i]
            )));
        }
        Ok(ClassWeights { weights })
    }

    pub fn get(&self, class: ClassLabel) -> f64 {
        self.weights[class.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Balanced,
    Manual,
}

/// `w_c = total / (K * count_c)` over an arbitrary number of classes `K`.
pub fn balanced_weights(counts: &[u64]) -> Result<Vec<f64>> {
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!(
            "class {i} has zero samples; the balanced scheme is undefined, use the manual scheme"
        )));
    }
    let total: u64 = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|&c| total as f64 / (k * c as f64)).collect())
}

pub fn compute_class_weights(
    dist: &ClassDistribution,
    scheme: WeightScheme,
    manual: Option<&BTreeMap<ClassLabel, f64>>,
) -> Result<ClassWeights> {
    match scheme {
        WeightScheme::Balanced => {
            let w = balanced_weights(&dist.counts).map_err(|_| {
                let empty: Vec<_> = ClassLabel::ALL
                    .iter()
                    .filter(|c| dist.count(**c) == 0)
                    .map(|c| c.code())
                    .collect();
                Error::Config(format!(
                    "classes [{}] have zero samples; the balanced scheme is undefined, use the manual scheme",
                    empty.join(", ")
                ))
            })?;
            ClassWeights::new(w.try_into().expect("seven classes"))
        }
        WeightScheme::Manual => {
            let map = manual.ok_or_else(|| Error::Config("manual weight scheme needs a weight map".into()))?;
            let mut weights = [0.0; NUM_CLASSES];
            for c in ClassLabel::ALL {
                weights[c.index()] = *map
                    .get(&c)
                    .ok_or_else(|| Error::Config(format!("manual weights lack class {c}")))?;
            }
            ClassWeights::new(weights)
        }
    }
}

/// Serializes a `[T; 7]` as an object keyed by class code.
pub(crate) mod per_class {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::label::{ClassLabel, NUM_CLASSES};

    pub fn serialize<S, T>(values: &[T; NUM_CLASSES], s: S) -> Result<S::Ok, S::Error>
    where
        S: Serializer,
        T: Serialize,
    {
        let map: BTreeMap<usize, (&str, &T)> = ClassLabel::ALL
            .iter()
            .map(|c| (c.index(), (c.code(), &values[c.index()])))
            .collect();
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(NUM_CLASSES))?;
        for (code, v) in map.values() {
            m.serialize_entry(code, v)?;
        }
        m.end()
    }

    pub fn deserialize<'de, D, T>(d: D) -> Result<[T; NUM_CLASSES], D::Error>
    where
        D: Deserializer<'de>,
        T: Deserialize<'de> + Copy + Default,
    {
        let map = BTreeMap::<ClassLabel, T>::deserialize(d)?;
        let mut out = [T::default(); NUM_CLASSES];
        for c in ClassLabel::ALL {
            out[c.index()] = *map
                .get(&c)
                .ok_or_else(|| D::Error::custom(format!("missing class {c}")))?;
        }
        Ok(out)
    }
}
