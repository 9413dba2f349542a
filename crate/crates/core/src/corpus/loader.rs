use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, LearningStage, SourceDocument};

/// Value side of the corpus manifest (`filename -> entry`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub title: String,
    pub learning_stage: LearningStage,
}

/// Loads every document listed in the manifest, sorted by filename.
///
/// `.md` files present in `dir` but absent from the manifest are ignored
/// with a warning.
pub fn load_corpus(dir: &Path, manifest_path: &Path) -> Result<Vec<SourceDocument>, CorpusError> {
    let manifest_display = manifest_path.display().to_string();
    let raw = fs::read(manifest_path).map_err(|source| CorpusError::Io {
        path: manifest_display.clone(),
        source,
    })?;
    let manifest: BTreeMap<String, ManifestEntry> =
        serde_json::from_slice(&raw).map_err(|e| CorpusError::Manifest {
            path: manifest_display.clone(),
            message: e.to_string(),
        })?;

    let mut seen = HashSet::new();
    for entry in manifest.values() {
        if !seen.insert(entry.doc_id.as_str()) {
            return Err(CorpusError::DuplicateDocId(entry.doc_id.clone()));
        }
    }

    if let Ok(listing) = fs::read_dir(dir) {
        for item in listing.flatten() {
            let name = item.file_name().to_string_lossy().to_string();
            if name.ends_with(".md") && !manifest.contains_key(&name) {
                log::warn!("{name} is not listed in {manifest_display}; skipping");
            }
        }
    }

    let mut docs = Vec::with_capacity(manifest.len());
    for (file, entry) in manifest {
        let path = dir.join(&file);
        if !path.is_file() {
            return Err(CorpusError::MissingFile(file));
        }
        let bytes = fs::read(&path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        docs.push(SourceDocument::from_bytes(
            entry.doc_id,
            entry.title,
            entry.learning_stage,
            &bytes,
            path.display().to_string(),
        )?);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_in_filename_order_and_checks_ids() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.md"), "# B\nx\n").unwrap();
        fs::write(dir.path().join("a.md"), "# A\ny\n").unwrap();
        let manifest = dir.path().join("manifest.json");
        fs::write(
            &manifest,
            r#"{"b.md":{"doc_id":"db","title":"B","learning_stage":"analog_ic"},
                "a.md":{"doc_id":"da","title":"A","learning_stage":"circuit_theory"}}"#,
        )
        .unwrap();
        let docs = load_corpus(dir.path(), &manifest).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].doc_id, "da");
        assert_eq!(docs[1].learning_stage, LearningStage::AnalogIc);

        fs::write(
            &manifest,
            r#"{"b.md":{"doc_id":"same","title":"B","learning_stage":"analog_ic"},
                "a.md":{"doc_id":"same","title":"A","learning_stage":"advanced"}}"#,
        )
        .unwrap();
        assert!(matches!(
            load_corpus(dir.path(), &manifest),
            Err(CorpusError::DuplicateDocId(_))
        ));

        fs::write(
            &manifest,
            r#"{"zz.md":{"doc_id":"z","title":"Z","learning_stage":"advanced"}}"#,
        )
        .unwrap();
        assert!(matches!(
            load_corpus(dir.path(), &manifest),
            Err(CorpusError::MissingFile(_))
        ));

        fs::write(
            &manifest,
            r#"{"a.md":{"doc_id":"a","title":"A","learning_stage":"graduate"}}"#,
        )
        .unwrap();
        assert!(matches!(
            load_corpus(dir.path(), &manifest),
            Err(CorpusError::Manifest { .. })
        ));
    }
}
