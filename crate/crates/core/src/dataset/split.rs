//! Sparse-annotation protocols.
//!
//! All randomness comes from a ChaCha8 stream seeded with `SplitSpec::seed`,
//! consumed in a fixed order (categories and images by ascending id,
//! annotations in file order), so a given `(Dataset, SplitSpec)` pair always
//! yields the same output.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotationId, CategoryId, Dataset, DatasetError, ImageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Delete `p%` of each category's annotations.
    PerClass,
    /// For each (image, category) pair, drop all of that category's boxes in
    /// the image with probability `p%`; every image keeps at least one box.
    PerImageClass,
    /// Delete `p%` of all annotations regardless of category.
    ClassAgnostic,
    /// Delete one box from every image that has two or more.
    Easy,
    /// Delete half (rounded down) of the boxes of every image.
    Hard,
    /// Keep exactly one box per image.
    Extreme,
}

impl SplitMode {
    pub const ALL: [SplitMode; 6] = [
        SplitMode::PerClass,
        SplitMode::PerImageClass,
        SplitMode::ClassAgnostic,
        SplitMode::Easy,
        SplitMode::Hard,
        SplitMode::Extreme,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitMode::PerClass => "per-class",
            SplitMode::PerImageClass => "per-image-class",
            SplitMode::ClassAgnostic => "class-agnostic",
            SplitMode::Easy => "easy",
            SplitMode::Hard => "hard",
            SplitMode::Extreme => "extreme",
        }
    }

    pub fn uses_percent(&self) -> bool {
        matches!(self, SplitMode::PerClass | SplitMode::PerImageClass | SplitMode::ClassAgnostic)
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitMode {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "per-class" | "split-1" => Ok(SplitMode::PerClass),
            "per-image-class" | "split-2" => Ok(SplitMode::PerImageClass),
            "class-agnostic" | "split-3" => Ok(SplitMode::ClassAgnostic),
            "easy" => Ok(SplitMode::Easy),
            "hard" => Ok(SplitMode::Hard),
            "extreme" => Ok(SplitMode::Extreme),
            _ => Err(DatasetError::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Ignored by `easy`, `hard` and `extreme`.
    #[serde(default)]
    pub percent: u32,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, percent: u32, seed: u64) -> Result<Self, DatasetError> {
        let spec = Self { mode, percent, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.percent > 100 {
            return Err(DatasetError::InvalidPercent(self.percent));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupCount {
    pub total: usize,
    pub kept: usize,
    pub deleted: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeletionReport {
    pub per_category: BTreeMap<CategoryId, GroupCount>,
    pub per_image: BTreeMap<ImageId, GroupCount>,
    /// Ids of removed annotations, in file order.
    pub deleted: Vec<AnnotationId>,
}

impl DeletionReport {
    fn tally(d: &Dataset, keep: &[bool]) -> Self {
        let mut report = DeletionReport {
            per_category: d.categories().iter().map(|c| (c.id, GroupCount::default())).collect(),
            per_image: d.images().iter().map(|i| (i.id, GroupCount::default())).collect(),
            deleted: Vec::new(),
        };
        for (a, &k) in d.annotations().iter().zip(keep) {
            for g in [
                report.per_category.get_mut(&a.category).expect("validated category"),
                report.per_image.get_mut(&a.image_id).expect("validated image"),
            ] {
                g.total += 1;
                if k {
                    g.kept += 1;
                } else {
                    g.deleted += 1;
                }
            }
            if !k {
                report.deleted.push(a.id);
            }
        }
        report
    }

    /// `category_id,total,kept,deleted`, one row per category.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "category_id,total,kept,deleted")?;
        for (id, g) in &self.per_category {
            writeln!(w, "{},{},{},{}", id, g.total, g.kept, g.deleted)?;
        }
        Ok(())
    }
}

/// Number of deletions for `n` items at `percent`%, rounded half up.
pub fn deletion_count(n: usize, percent: u32) -> usize {
    (n * percent as usize + 50) / 100
}

/// Removes annotations from `d` according to `spec`.
pub fn sparsify(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, DeletionReport), DatasetError> {
    spec.validate()?;
    if d.annotations().is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut keep = vec![true; d.annotations().len()];
    let p = spec.percent;

    match spec.mode {
        SplitMode::PerClass => {
            let mut by_cat: BTreeMap<CategoryId, Vec<usize>> = BTreeMap::new();
            for (i, a) in d.annotations().iter().enumerate() {
                by_cat.entry(a.category).or_default().push(i);
            }
            for idx in by_cat.values_mut() {
                let k = deletion_count(idx.len(), p);
                delete_shuffled(idx, k, &mut keep, &mut rng);
            }
        }
        SplitMode::ClassAgnostic => {
            let mut idx: Vec<usize> = (0..keep.len()).collect();
            let k = deletion_count(idx.len(), p);
            delete_shuffled(&mut idx, k, &mut keep, &mut rng);
        }
        SplitMode::PerImageClass => {
            let prob = f64::from(p) / 100.0;
            for idx in indices_by_image(d).values() {
                let mut by_cat: BTreeMap<CategoryId, Vec<usize>> = BTreeMap::new();
                for &i in idx {
                    by_cat.entry(d.annotations()[i].category).or_default().push(i);
                }
                for group in by_cat.values() {
                    if rng.random_bool(prob) {
                        for &i in group {
                            keep[i] = false;
                        }
                    }
                }
                // revert: an image never loses all of its boxes
                if !idx.is_empty() && idx.iter().all(|&i| !keep[i]) {
                    keep[idx[rng.random_range(0..idx.len())]] = true;
                }
            }
        }
        SplitMode::Easy => {
            for idx in indices_by_image(d).values().filter(|v| v.len() >= 2) {
                keep[idx[rng.random_range(0..idx.len())]] = false;
            }
        }
        SplitMode::Hard => {
            for idx in indices_by_image(d).values_mut() {
                let k = idx.len() / 2;
                delete_shuffled(idx, k, &mut keep, &mut rng);
            }
        }
        SplitMode::Extreme => {
            for idx in indices_by_image(d).values().filter(|v| !v.is_empty()) {
                let survivor = idx[rng.random_range(0..idx.len())];
                for &i in idx {
                    keep[i] = i == survivor;
                }
            }
        }
    }

    let report = DeletionReport::tally(d, &keep);
    Ok((d.retain_annotations(&keep), report))
}

fn indices_by_image(d: &Dataset) -> BTreeMap<ImageId, Vec<usize>> {
    let mut out: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
    for (i, a) in d.annotations().iter().enumerate() {
        out.entry(a.image_id).or_default().push(i);
    }
    out
}

fn delete_shuffled(idx: &mut [usize], k: usize, keep: &mut [bool], rng: &mut ChaCha8Rng) {
    idx.shuffle(rng);
    for &i in &idx[..k] {
        keep[i] = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, Category, ImageInfo};
    use crate::geometry::BBox;

    /// `layout[i]` lists the categories of the boxes in image `i`.
    fn build(layout: &[&[u64]]) -> Dataset {
        let n_cat = layout.iter().flat_map(|v| v.iter()).copied().max().unwrap_or(0);
        let images = (0..layout.len())
            .map(|i| ImageInfo { id: ImageId(i as u64), width: 100.0, height: 100.0 })
            .collect();
        let categories = (1..=n_cat).map(|c| Category { id: CategoryId(c), name: format!("c{c}") }).collect();
        let mut anns = Vec::new();
        for (i, cats) in layout.iter().enumerate() {
            for (j, &c) in cats.iter().enumerate() {
                anns.push(Annotation {
                    id: AnnotationId(anns.len() as u64 + 1),
                    image_id: ImageId(i as u64),
                    category: CategoryId(c),
                    bbox: BBox::new(j as f64, 0.0, j as f64 + 1.0, 1.0).unwrap(),
                });
            }
        }
        Dataset::new(images, categories, anns).unwrap()
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(deletion_count(10, 30), 3);
        assert_eq!(deletion_count(7, 50), 4);
        assert_eq!(deletion_count(3, 50), 2);
        assert_eq!(deletion_count(0, 70), 0);
        assert_eq!(deletion_count(5, 100), 5);
    }

    #[test]
    fn per_class_exact_counts() {
        // ten boxes of category 1 spread over five images, plus category 2
        let d = build(&[&[1, 1, 2], &[1, 1], &[1, 1, 2, 2], &[1, 1], &[1, 1, 2]]);
        let (out, report) = sparsify(&d, &SplitSpec::new(SplitMode::PerClass, 30, 5).unwrap()).unwrap();
        let c1 = out.annotations().iter().filter(|a| a.category == CategoryId(1)).count();
        assert_eq!(c1, 7);
        assert_eq!(report.per_category[&CategoryId(1)], GroupCount { total: 10, kept: 7, deleted: 3 });
        // 4 boxes at 30% -> round(1.2) = 1
        assert_eq!(report.per_category[&CategoryId(2)].deleted, 1);
        assert_eq!(report.deleted.len(), 4);
    }

    #[test]
    fn zero_percent_is_identity() {
        let d = build(&[&[1, 2, 3], &[2], &[3, 3]]);
        for mode in [SplitMode::PerClass, SplitMode::PerImageClass, SplitMode::ClassAgnostic] {
            let (out, report) = sparsify(&d, &SplitSpec::new(mode, 0, 99).unwrap()).unwrap();
            assert_eq!(out, d, "{mode}");
            assert!(report.deleted.is_empty());
        }
    }

    #[test]
    fn extreme_keeps_single_box() {
        let d = build(&[&[1], &[1, 2, 2, 1], &[]]);
        let (out, report) = sparsify(&d, &SplitSpec::new(SplitMode::Extreme, 0, 3).unwrap()).unwrap();
        assert_eq!(report.per_image[&ImageId(0)].kept, 1);
        assert_eq!(report.per_image[&ImageId(1)].kept, 1);
        assert_eq!(report.per_image[&ImageId(2)].total, 0);
        assert_eq!(out.annotations().len(), 2);
        assert_eq!(out.annotations()[0].id, AnnotationId(1));
    }

    #[test]
    fn easy_and_hard() {
        let d = build(&[&[1], &[1, 2], &[1, 2, 3], &[1, 1, 1, 1, 1]]);
        let (_, easy) = sparsify(&d, &SplitSpec::new(SplitMode::Easy, 0, 1).unwrap()).unwrap();
        let kept: Vec<_> = easy.per_image.values().map(|g| g.kept).collect();
        assert_eq!(kept, vec![1, 1, 2, 4]);
        let (_, hard) = sparsify(&d, &SplitSpec::new(SplitMode::Hard, 0, 1).unwrap()).unwrap();
        let kept: Vec<_> = hard.per_image.values().map(|g| g.kept).collect();
        assert_eq!(kept, vec![1, 1, 2, 3]);
    }

    #[test]
    fn per_image_class_never_empties_an_image() {
        let d = build(&[&[1], &[1, 2], &[3, 3, 3], &[1, 2, 3], &[2, 2]]);
        for seed in 0..50 {
            let (_, report) = sparsify(&d, &SplitSpec::new(SplitMode::PerImageClass, 100, seed).unwrap()).unwrap();
            assert!(report.per_image.values().all(|g| g.kept == 1), "seed {seed}");
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let d = build(&[&[1, 2, 3, 1, 2], &[1, 1, 3], &[2, 3, 3, 1]]);
        let spec = SplitSpec::new(SplitMode::ClassAgnostic, 50, 11).unwrap();
        let a = sparsify(&d, &spec).unwrap();
        let b = sparsify(&d, &spec).unwrap();
        assert_eq!(a, b);
        let differ = (0..20u64).any(|s| {
            sparsify(&d, &SplitSpec { seed: s, ..spec }).unwrap().1.deleted != a.1.deleted
        });
        assert!(differ);
    }

    #[test]
    fn validation_errors() {
        let d = build(&[&[1]]);
        assert!(matches!(SplitSpec::new(SplitMode::PerClass, 101, 0), Err(DatasetError::InvalidPercent(101))));
        let bad = SplitSpec { mode: SplitMode::PerClass, percent: 150, seed: 0 };
        assert!(sparsify(&d, &bad).is_err());
        let empty = build(&[&[]]);
        assert!(matches!(sparsify(&empty, &SplitSpec::new(SplitMode::Easy, 0, 0).unwrap()), Err(DatasetError::Empty)));
        assert!(matches!("bogus".parse::<SplitMode>(), Err(DatasetError::UnknownMode(_))));
        assert_eq!("Split-2".parse::<SplitMode>().unwrap(), SplitMode::PerImageClass);
    }

    #[test]
    fn report_csv() {
        let d = build(&[&[1, 1], &[2]]);
        let (_, report) = sparsify(&d, &SplitSpec::new(SplitMode::PerClass, 50, 0).unwrap()).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "category_id,total,kept,deleted\n1,2,1,1\n2,1,0,1\n");
    }
}
