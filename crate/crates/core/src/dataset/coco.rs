//! COCO-style JSON annotation files.
//!
//! Only the subset needed here is modelled: `images`, `categories` and
//! `annotations` with `bbox` in `[x, y, width, height]` form. Unknown keys are
//! ignored on read. Pseudo labels reuse the annotation record with the extra
//! `pseudo` and `score` fields.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, AnnotationId, Category, CategoryId, Dataset, DatasetError, ImageId, ImageInfo};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: CategoryId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl AnnotationRecord {
    pub fn is_pseudo(&self) -> bool {
        self.pseudo.unwrap_or(false)
    }
}

impl From<&Annotation> for AnnotationRecord {
    fn from(a: &Annotation) -> Self {
        Self {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category,
            bbox: a.bbox.to_xywh(),
            pseudo: None,
            score: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<CategoryRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

impl CocoDocument {
    /// Validates the document into a [`Dataset`]. Pseudo-label records are
    /// treated like any other annotation.
    pub fn into_dataset(self) -> Result<Dataset, DatasetError> {
        let images = self
            .images
            .into_iter()
            .map(|i| ImageInfo { id: i.id, width: i.width, height: i.height })
            .collect();
        let categories = self
            .categories
            .into_iter()
            .map(|c| Category { id: c.id, name: c.name })
            .collect();
        let annotations = self
            .annotations
            .into_iter()
            .map(|r| {
                let [x, y, w, h] = r.bbox;
                let bbox = BBox::from_xywh(x, y, w, h)
                    .map_err(|source| DatasetError::InvalidBox { annotation: r.id, source })?;
                Ok(Annotation { id: r.id, image_id: r.image_id, category: r.category_id, bbox })
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        Dataset::new(images, categories, annotations)
    }
}

impl From<&Dataset> for CocoDocument {
    fn from(d: &Dataset) -> Self {
        Self {
            images: d
                .images()
                .iter()
                .map(|i| ImageRecord { id: i.id, width: i.width, height: i.height })
                .collect(),
            categories: d
                .categories()
                .iter()
                .map(|c| CategoryRecord { id: c.id, name: c.name.clone() })
                .collect(),
            annotations: d.annotations().iter().map(AnnotationRecord::from).collect(),
        }
    }
}

pub fn read_document(path: impl AsRef<Path>) -> Result<CocoDocument, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Parse { path: path.into(), source })
}

/// Writes pretty-printed JSON with a trailing newline. Output is a pure
/// function of the document, so identical documents give identical bytes.
pub fn write_document(doc: &CocoDocument, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(doc).expect("document serialization is infallible");
    text.push('\n');
    fs::write(path, text).map_err(|source| DatasetError::Io { path: path.into(), source })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    read_document(path)?.into_dataset()
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_document(&CocoDocument::from(d), path)
}
