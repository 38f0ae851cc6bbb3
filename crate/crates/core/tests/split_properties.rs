use std::collections::BTreeMap;

use proptest::prelude::*;
use pseudocal::dataset::{
    deletion_count, sparsify, Annotation, AnnotationId, Category, CategoryId, Dataset, ImageId, ImageInfo, SplitMode,
    SplitSpec,
};
use pseudocal::BBox;

/// `layout[i]` lists the category of each box in image `i + 1`.
fn dataset(layout: &[Vec<u64>], n_classes: u64) -> Dataset {
    let images = (1..=layout.len() as u64).map(|id| ImageInfo { id: ImageId(id), width: 100.0, height: 100.0 }).collect();
    let categories = (1..=n_classes).map(|c| Category { id: CategoryId(c), name: format!("c{c}") }).collect();
    let mut annotations = Vec::new();
    for (i, cats) in layout.iter().enumerate() {
        for (j, &c) in cats.iter().enumerate() {
            let x = j as f64;
            annotations.push(Annotation {
                id: AnnotationId(annotations.len() as u64 + 1),
                image_id: ImageId(i as u64 + 1),
                category: CategoryId(c),
                bbox: BBox::new(x, x, x + 10.0, x + 10.0).unwrap(),
            });
        }
    }
    Dataset::new(images, categories, annotations).unwrap()
}

fn layouts() -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(1u64..=4, 1..8), 1..30)
}

fn per_image(d: &Dataset) -> BTreeMap<ImageId, usize> {
    d.annotations_by_image().into_iter().map(|(k, v)| (k, v.len())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn percent_modes_delete_exact_counts(layout in layouts(), p in 0u32..=100, seed: u64) {
        let d = dataset(&layout, 4);
        let (_, per_class) = sparsify(&d, &SplitSpec::new(SplitMode::PerClass, p, seed).unwrap()).unwrap();
        for g in per_class.per_category.values() {
            prop_assert_eq!(g.deleted, deletion_count(g.total, p));
        }
        let (_, agnostic) = sparsify(&d, &SplitSpec::new(SplitMode::ClassAgnostic, p, seed).unwrap()).unwrap();
        prop_assert_eq!(agnostic.deleted.len(), deletion_count(d.annotations().len(), p));
    }

    #[test]
    fn image_level_modes_keep_every_image(layout in layouts(), p in 0u32..=100, seed: u64) {
        let d = dataset(&layout, 4);
        let before = per_image(&d);
        for mode in [SplitMode::PerImageClass, SplitMode::Easy, SplitMode::Hard, SplitMode::Extreme] {
            let (sparse, _) = sparsify(&d, &SplitSpec::new(mode, p, seed).unwrap()).unwrap();
            let after = per_image(&sparse);
            for (id, &n) in &before {
                let kept = after[id];
                prop_assert!(kept >= 1);
                match mode {
                    SplitMode::Easy => prop_assert_eq!(kept, if n >= 2 { n - 1 } else { n }),
                    SplitMode::Hard => prop_assert_eq!(kept, n - n / 2),
                    SplitMode::Extreme => prop_assert_eq!(kept, 1),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn kept_annotations_are_unchanged_subset(layout in layouts(), seed: u64) {
        let d = dataset(&layout, 4);
        let (sparse, report) = sparsify(&d, &SplitSpec::new(SplitMode::PerImageClass, 50, seed).unwrap()).unwrap();
        prop_assert_eq!(sparse.annotations().len() + report.deleted.len(), d.annotations().len());
        for a in sparse.annotations() {
            prop_assert!(d.annotations().contains(a));
            prop_assert!(!report.deleted.contains(&a.id));
        }
        prop_assert_eq!(sparse.images(), d.images());
    }
}
