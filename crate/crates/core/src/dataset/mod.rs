//! Annotation data model, COCO-style I/O and sparse-split generation.

mod coco;
mod split;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError};
use crate::scalar::Scalar;

pub use coco::{load_dataset, read_document, save_dataset, write_document, AnnotationRecord, CategoryRecord, CocoDocument, ImageRecord};
pub use split::{deletion_count, sparsify, DeletionReport, GroupCount, SplitMode, SplitSpec};

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_newtype!(ImageId);
id_newtype!(CategoryId);
id_newtype!(AnnotationId);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read or write {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate image id {0}")]
    DuplicateImage(ImageId),
    #[error("duplicate category id {0}")]
    DuplicateCategory(CategoryId),
    #[error("duplicate annotation id {0}")]
    DuplicateAnnotation(AnnotationId),
    #[error("image {0} has invalid size (width and height must be finite and positive)")]
    InvalidImageSize(ImageId),
    #[error("annotation {annotation} references missing image_id {image}")]
    MissingImage { annotation: AnnotationId, image: ImageId },
    #[error("annotation {annotation} references missing category_id {category}")]
    MissingCategory { annotation: AnnotationId, category: CategoryId },
    #[error("annotation {annotation} has an invalid bbox: {source}")]
    InvalidBox {
        annotation: AnnotationId,
        #[source]
        source: GeometryError,
    },
    #[error("dataset has no annotations")]
    Empty,
    #[error("split percent must be in [0, 100], got {0}")]
    InvalidPercent(u32),
    #[error("unknown split mode `{0}` (expected per-class, per-image-class, class-agnostic, easy, hard or extreme)")]
    UnknownMode(String),
}

/// One ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation<T: Scalar = f64> {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub category: CategoryId,
    pub bbox: BBox<T>,
}

impl<T: Scalar> Annotation<T> {
    pub fn cast<U: Scalar>(&self) -> Annotation<U> {
        Annotation { id: self.id, image_id: self.image_id, category: self.category, bbox: self.bbox.cast() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageInfo {
    pub id: ImageId,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

/// A validated annotation set.
///
/// Every annotation refers to an existing image and category, ids are unique
/// per kind, and boxes are clipped to their image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<ImageInfo>,
    categories: Vec<Category>,
    annotations: Vec<Annotation>,
}

impl Dataset {
    pub fn new(
        images: Vec<ImageInfo>,
        categories: Vec<Category>,
        mut annotations: Vec<Annotation>,
    ) -> Result<Self, DatasetError> {
        let mut sizes = HashMap::with_capacity(images.len());
        for img in &images {
            let ok = |v: f64| v.is_finite() && v > 0.0;
            if !ok(img.width) || !ok(img.height) {
                return Err(DatasetError::InvalidImageSize(img.id));
            }
            if sizes.insert(img.id, (img.width, img.height)).is_some() {
                return Err(DatasetError::DuplicateImage(img.id));
            }
        }
        let mut cats = HashSet::with_capacity(categories.len());
        for c in &categories {
            if !cats.insert(c.id) {
                return Err(DatasetError::DuplicateCategory(c.id));
            }
        }
        let mut ann_ids = HashSet::with_capacity(annotations.len());
        for a in &mut annotations {
            if !ann_ids.insert(a.id) {
                return Err(DatasetError::DuplicateAnnotation(a.id));
            }
            let &(w, h) = sizes
                .get(&a.image_id)
                .ok_or(DatasetError::MissingImage { annotation: a.id, image: a.image_id })?;
            if !cats.contains(&a.category) {
                return Err(DatasetError::MissingCategory { annotation: a.id, category: a.category });
            }
            a.bbox = a.bbox.clamp_to(w, h);
        }
        Ok(Self { images, categories, annotations })
    }

    /// Keeps the subset of annotations selected by `keep`; images and
    /// categories are untouched.
    pub(crate) fn retain_annotations(&self, keep: &[bool]) -> Self {
        debug_assert_eq!(keep.len(), self.annotations.len());
        let annotations = self
            .annotations
            .iter()
            .zip(keep)
            .filter_map(|(a, &k)| k.then_some(*a))
            .collect();
        Self { images: self.images.clone(), categories: self.categories.clone(), annotations }
    }

    pub fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    /// `(images, categories, annotations)`
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.images.len(), self.categories.len(), self.annotations.len())
    }

    /// Annotations grouped per image, in ascending image-id order. Images
    /// without annotations map to an empty list.
    pub fn annotations_by_image(&self) -> BTreeMap<ImageId, Vec<Annotation>> {
        let mut out: BTreeMap<ImageId, Vec<Annotation>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push(*a);
        }
        out
    }
}
