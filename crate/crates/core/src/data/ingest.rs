//! Directory layouts understood by [`ingest`].
//!
//! BreakHis images are recognised by file name anywhere under the root:
//! `SOB_<B|M>_<subclass>-<year>-<slide>-<magnification>-<seq>.<ext>`, for
//! example `SOB_B_TA-14-3411F-100-001.png`. The patient id is `<year>-<slide>`.
//!
//! The challenge dataset keeps one directory per class directly under the root
//! (`Normal`, `Benign`, `InSitu` or `In Situ`, `Invasive`); it has no patient ids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::manifest::{ClassLabel, DatasetId, Magnification, Manifest, SampleRecord, Split, Subclass};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    /// Files that looked like images but could not be labelled, and empty classes.
    pub warnings: Vec<String>,
    /// Record count per `class` or `class@magnification`.
    pub counts: BTreeMap<String, usize>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Files under `root`, in a platform-independent order.
fn image_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into_io_error().unwrap_or_else(|| std::io::Error::other("directory loop")))
        })?;
        if entry.file_type().is_file() && is_image(entry.path()) {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// Labels carried by a BreakHis file name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BreakhisName {
    pub subclass: Subclass,
    pub patient_id: String,
    pub magnification: Magnification,
}

pub fn parse_breakhis_name(file_name: &str) -> Result<BreakhisName> {
    let bad = |why: &str| Error::Data(format!("{file_name}: {why}"));
    let stem = file_name.rsplit_once('.').map_or(file_name, |(s, _)| s);
    let parts: Vec<&str> = stem.split('-').collect();
    let [head, year, slide, mag, seq] = parts[..] else {
        return Err(bad("expected SOB_<B|M>_<subclass>-<year>-<slide>-<magnification>-<seq>"));
    };
    let head: Vec<&str> = head.split('_').collect();
    let ["SOB", tumour, sub] = head[..] else {
        return Err(bad("name must start with SOB_<B|M>_<subclass>"));
    };
    let subclass: Subclass = sub.parse().map_err(|_| bad("unknown subclass"))?;
    let class = match tumour {
        "B" => ClassLabel::Benign,
        "M" => ClassLabel::Malignant,
        _ => return Err(bad("tumour type must be B or M")),
    };
    if subclass.class() != class {
        return Err(bad("subclass contradicts tumour type"));
    }
    if year.is_empty() || slide.is_empty() || seq.is_empty() {
        return Err(bad("empty name component"));
    }
    Ok(BreakhisName {
        subclass,
        patient_id: format!("{year}-{slide}"),
        magnification: mag.parse().map_err(|_| bad("unknown magnification"))?,
    })
}

/// Scans `root` and builds a manifest with every record unassigned.
///
/// Images are not decoded here. With a magnification filter, BreakHis images at
/// other magnifications are skipped silently.
pub fn ingest(root: &Path, dataset: DatasetId, magnification: Option<Magnification>) -> Result<(Manifest, IngestReport)> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    if magnification.is_some() && dataset != DatasetId::Breakhis {
        return Err(Error::Config("a magnification filter applies only to BreakHis".into()));
    }
    let files = image_files(root)?;
    if files.is_empty() {
        return Err(Error::Data(format!("{} contains no images", root.display())));
    }

    let mut report = IngestReport::default();
    let mut records = Vec::new();
    for path in files {
        let parsed = match dataset {
            DatasetId::Breakhis => breakhis_record(&path, magnification),
            DatasetId::Challenge2015 => challenge_record(root, &path).map(Some),
        };
        match parsed {
            Ok(Some(r)) => records.push(r),
            Ok(None) => {}
            Err(e) => report.warnings.push(e.to_string()),
        }
    }

    for r in &records {
        *report.counts.entry(r.class.to_string()).or_default() += 1;
        if let Some(m) = r.magnification {
            *report.counts.entry(format!("{}@{m}", r.class)).or_default() += 1;
        }
    }
    for class in dataset.classes() {
        if !report.counts.contains_key(class.as_str()) {
            report.warnings.push(format!("no images found for class {class}"));
        }
    }
    if dataset == DatasetId::Challenge2015 {
        for class in dataset.classes() {
            if class_dir(root, *class).is_none() {
                report.warnings.push(format!("no directory for class {class}"));
            }
        }
    }

    let manifest = Manifest::new(dataset, records);
    manifest.validate()?;
    Ok((manifest, report))
}

fn breakhis_record(path: &Path, filter: Option<Magnification>) -> Result<Option<SampleRecord>> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let parsed = parse_breakhis_name(name).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if filter.is_some_and(|m| m != parsed.magnification) {
        return Ok(None);
    }
    Ok(Some(SampleRecord {
        path: path.to_path_buf(),
        patient_id: parsed.patient_id,
        magnification: Some(parsed.magnification),
        class: parsed.subclass.class(),
        subclass: Some(parsed.subclass),
        split: Split::Unassigned,
    }))
}

fn challenge_record(root: &Path, path: &Path) -> Result<SampleRecord> {
    let unlabelled = || Error::Data(format!("{}: not inside a class directory", path.display()));
    let rel = path.strip_prefix(root).map_err(|_| unlabelled())?;
    let top = rel.components().next().ok_or_else(unlabelled)?;
    if rel.components().count() < 2 {
        return Err(unlabelled());
    }
    let class: ClassLabel = top.as_os_str().to_string_lossy().parse().map_err(|_| unlabelled())?;
    if !DatasetId::Challenge2015.classes().contains(&class) {
        return Err(unlabelled());
    }
    Ok(SampleRecord {
        path: path.to_path_buf(),
        patient_id: String::new(),
        magnification: None,
        class,
        subclass: None,
        split: Split::Unassigned,
    })
}

fn class_dir(root: &Path, class: ClassLabel) -> Option<PathBuf> {
    std::fs::read_dir(root).ok()?.flatten().find_map(|e| {
        let is_dir = e.file_type().ok()?.is_dir();
        let label: ClassLabel = e.file_name().to_string_lossy().parse().ok()?;
        (is_dir && label == class).then(|| e.path())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, b"").unwrap();
    }

    #[test]
    fn parses_breakhis_names() {
        let n = parse_breakhis_name("SOB_B_TA-14-3411F-100-001.png").unwrap();
        assert_eq!(n.subclass, Subclass::TA);
        assert_eq!(n.patient_id, "14-3411F");
        assert_eq!(n.magnification, Magnification::X100);
        assert!(parse_breakhis_name("SOB_B_DC-14-3411F-100-001.png").is_err());
        assert!(parse_breakhis_name("SOB_M_DC-14-3411F-50-001.png").is_err());
        assert!(parse_breakhis_name("notes.png").is_err());
    }

    #[test]
    fn synthetic_breakhis_tree() {
        let dir = tempfile::tempdir().unwrap();
        let patients = [("B", "A", "14-1"), ("B", "F", "14-2"), ("M", "DC", "14-3")];
        for (t, s, p) in patients {
            for (i, mag) in ["40", "100", "200", "400"].iter().enumerate() {
                let (year, slide) = p.split_once('-').unwrap();
                touch(&dir.path().join(format!("{t}/{s}/SOB_{t}_{s}-{year}-{slide}-{mag}-{i:03}.png")));
            }
        }
        touch(&dir.path().join("README.txt"));
        touch(&dir.path().join("stray.png"));
        let (m, report) = ingest(dir.path(), DatasetId::Breakhis, None).unwrap();
        assert_eq!(m.records.len(), 12);
        let ids: std::collections::BTreeSet<_> = m.records.iter().map(|r| r.patient_id.clone()).collect();
        assert_eq!(ids.len(), 3);
        assert_eq!(report.warnings.len(), 1, "{:?}", report.warnings);
        assert_eq!(report.counts["malignant@40"], 1);

        let (m40, _) = ingest(dir.path(), DatasetId::Breakhis, Some(Magnification::X40)).unwrap();
        assert_eq!(m40.records.len(), 3);
        assert!(m40.records.iter().all(|r| r.magnification == Some(Magnification::X40)));
    }

    #[test]
    fn challenge_tree_with_empty_class() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("Normal/n1.tif"));
        touch(&dir.path().join("Benign/b1.tif"));
        touch(&dir.path().join("In Situ/is1.tif"));
        std::fs::create_dir_all(dir.path().join("Invasive")).unwrap();
        let (m, report) = ingest(dir.path(), DatasetId::Challenge2015, None).unwrap();
        assert_eq!(m.records.len(), 3);
        assert!(m.records.iter().all(|r| r.patient_id.is_empty()));
        assert_eq!(report.warnings, vec!["no images found for class invasive".to_string()]);
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("Normal")).unwrap();
        assert!(ingest(dir.path(), DatasetId::Challenge2015, None).is_err());
        assert!(ingest(&dir.path().join("missing"), DatasetId::Breakhis, None).is_err());
    }
}
