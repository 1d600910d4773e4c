//! Dataset manifests for batch runs.
//!
//! A manifest is a JSON file listing images and texts, optionally with
//! categories and an explicit pair list. Image paths resolve relative to
//! the manifest's directory, so a dataset moves as one folder.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse manifest {path}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest lists no {what}")]
    Empty { what: &'static str },
    #[error("duplicate {what} id '{id}'")]
    DuplicateId { what: &'static str, id: String },
    #[error("image '{id}' points at a missing file: {path}")]
    MissingFile { id: String, path: String },
    #[error("pair references unknown {what} id '{id}'")]
    UnknownReference { what: &'static str, id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEntry {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub category: Option<String>,
}

/// One requested image-text combination, by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRef {
    pub image: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ImageEntry>,
    pub texts: Vec<TextEntry>,
    /// Explicit combinations; empty means every image with every text.
    #[serde(default)]
    pub pairs: Vec<PairRef>,
}

impl DatasetManifest {
    /// The image-text combinations this manifest asks for: the explicit
    /// pair list when present, the full cross product otherwise.
    pub fn pairings(&self) -> Vec<(&ImageEntry, &TextEntry)> {
        if self.pairs.is_empty() {
            self.images
                .iter()
                .flat_map(|img| self.texts.iter().map(move |txt| (img, txt)))
                .collect()
        } else {
            self.pairs
                .iter()
                .map(|p| {
                    let img = self
                        .images
                        .iter()
                        .find(|i| i.id == p.image)
                        .expect("validated on load");
                    let txt = self
                        .texts
                        .iter()
                        .find(|t| t.id == p.text)
                        .expect("validated on load");
                    (img, txt)
                })
                .collect()
        }
    }

    fn validate(&self) -> Result<(), ManifestError> {
        if self.images.is_empty() {
            return Err(ManifestError::Empty { what: "images" });
        }
        if self.texts.is_empty() {
            return Err(ManifestError::Empty { what: "texts" });
        }
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(img.id.as_str()) {
                return Err(ManifestError::DuplicateId {
                    what: "image",
                    id: img.id.clone(),
                });
            }
        }
        let mut seen = HashSet::new();
        for txt in &self.texts {
            if !seen.insert(txt.id.as_str()) {
                return Err(ManifestError::DuplicateId {
                    what: "text",
                    id: txt.id.clone(),
                });
            }
        }
        for img in &self.images {
            if !img.path.is_file() {
                return Err(ManifestError::MissingFile {
                    id: img.id.clone(),
                    path: img.path.display().to_string(),
                });
            }
        }
        let image_ids: HashSet<&str> = self.images.iter().map(|i| i.id.as_str()).collect();
        let text_ids: HashSet<&str> = self.texts.iter().map(|t| t.id.as_str()).collect();
        for pair in &self.pairs {
            if !image_ids.contains(pair.image.as_str()) {
                return Err(ManifestError::UnknownReference {
                    what: "image",
                    id: pair.image.clone(),
                });
            }
            if !text_ids.contains(pair.text.as_str()) {
                return Err(ManifestError::UnknownReference {
                    what: "text",
                    id: pair.text.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Reads, resolves, and validates a manifest. Relative image paths are
/// anchored at the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let raw = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&raw).map_err(|source| ManifestError::Parse {
            path: path.display().to_string(),
            source,
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for img in &mut manifest.images {
        if img.path.is_relative() {
            img.path = base.join(&img.path);
        }
    }
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::save_image;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn place_image(dir: &Path, name: &str) {
        let target = dir.join(name);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent).unwrap();
        }
        let img = Array3::from_elem([1, 8, 8], 0.5_f64);
        save_image(&target, &img).unwrap();
    }

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("manifest.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    const TWO_BY_TWO: &str = r#"{
        "images": [
            {"id": "cat", "path": "cat.png", "category": "animal"},
            {"id": "cup", "path": "cup.png"}
        ],
        "texts": [
            {"id": "fox", "text": "a fox", "category": "animal"},
            {"id": "vase", "text": "a vase"}
        ]
    }"#;

    #[test]
    fn a_pairless_manifest_yields_the_cross_product() {
        let dir = tempdir().unwrap();
        place_image(dir.path(), "cat.png");
        place_image(dir.path(), "cup.png");
        let path = write_manifest(dir.path(), TWO_BY_TWO);
        let manifest = load_manifest(&path).unwrap();
        let pairs = manifest.pairings();
        assert_eq!(pairs.len(), 4);
        assert!(manifest.images[0].path.is_absolute() || manifest.images[0].path.starts_with(dir.path()));
        assert_eq!(manifest.images[0].category.as_deref(), Some("animal"));
        assert_eq!(manifest.texts[1].category, None);
    }

    #[test]
    fn explicit_pairs_override_the_cross_product() {
        let dir = tempdir().unwrap();
        place_image(dir.path(), "cat.png");
        place_image(dir.path(), "cup.png");
        let body = TWO_BY_TWO.replace(
            "]\n    }",
            r#"],
        "pairs": [{"image": "cat", "text": "vase"}]
    }"#,
        );
        let path = write_manifest(dir.path(), &body);
        let manifest = load_manifest(&path).unwrap();
        let pairs = manifest.pairings();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0.id, "cat");
        assert_eq!(pairs[0].1.id, "vase");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempdir().unwrap();
        place_image(dir.path(), "cat.png");
        let body = r#"{
            "images": [
                {"id": "cat", "path": "cat.png"},
                {"id": "cat", "path": "cat.png"}
            ],
            "texts": [{"id": "fox", "text": "a fox"}]
        }"#;
        let path = write_manifest(dir.path(), body);
        assert!(matches!(
            load_manifest(&path),
            Err(ManifestError::DuplicateId { what: "image", .. })
        ));
    }

    #[test]
    fn missing_image_files_are_named() {
        let dir = tempdir().unwrap();
        place_image(dir.path(), "cat.png");
        let path = write_manifest(dir.path(), TWO_BY_TWO);
        match load_manifest(&path) {
            Err(ManifestError::MissingFile { id, .. }) => assert_eq!(id, "cup"),
            other => panic!("expected a missing-file error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_pair_references_are_rejected() {
        let dir = tempdir().unwrap();
        place_image(dir.path(), "cat.png");
        place_image(dir.path(), "cup.png");
        let body = TWO_BY_TWO.replace(
            "]\n    }",
            r#"],
        "pairs": [{"image": "dog", "text": "fox"}]
    }"#,
        );
        let path = write_manifest(dir.path(), &body);
        assert!(matches!(
            load_manifest(&path),
            Err(ManifestError::UnknownReference { what: "image", .. })
        ));
    }

    #[test]
    fn empty_sections_are_rejected() {
        let dir = tempdir().unwrap();
        let body = r#"{"images": [], "texts": [{"id": "t", "text": "x"}]}"#;
        let path = write_manifest(dir.path(), body);
        assert!(matches!(
            load_manifest(&path),
            Err(ManifestError::Empty { what: "images" })
        ));
    }

    #[test]
    fn the_shipped_reference_manifest_defines_the_full_benchmark() {
        let source = concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/tif_manifest.json"
        );
        let raw = std::fs::read_to_string(source).unwrap();
        let parsed: DatasetManifest = serde_json::from_str(&raw).unwrap();
        let dir = tempdir().unwrap();
        for img in &parsed.images {
            place_image(dir.path(), img.path.to_str().unwrap());
        }
        let path = write_manifest(dir.path(), &raw);
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.images.len(), 30);
        assert_eq!(manifest.texts.len(), 60);
        assert_eq!(manifest.pairings().len(), 1800);
        assert!(manifest.images.iter().all(|i| i.category.is_some()));
        assert!(manifest.texts.iter().all(|t| t.category.is_some()));
    }
}
