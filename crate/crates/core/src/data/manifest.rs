use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    /// BreakHis: benign/malignant with eight subclasses at four magnifications.
    Breakhis,
    /// 2015 breast cancer classification challenge: four classes, no patient ids.
    Challenge2015,
}

impl DatasetId {
    pub fn classes(self) -> &'static [ClassLabel] {
        match self {
            DatasetId::Breakhis => &[ClassLabel::Benign, ClassLabel::Malignant],
            DatasetId::Challenge2015 => &[
                ClassLabel::Normal,
                ClassLabel::Benign,
                ClassLabel::InSitu,
                ClassLabel::Invasive,
            ],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Breakhis => "breakhis",
            DatasetId::Challenge2015 => "challenge2015",
        }
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "breakhis" => Ok(DatasetId::Breakhis),
            "challenge2015" | "challenge" => Ok(DatasetId::Challenge2015),
            other => Err(Error::Config(format!(
                "unknown dataset id {other:?} (expected breakhis or challenge2015)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "40")]
    X40,
    #[serde(rename = "100")]
    X100,
    #[serde(rename = "200")]
    X200,
    #[serde(rename = "400")]
    X400,
}

impl Magnification {
    pub const ALL: [Magnification; 4] = [
        Magnification::X40,
        Magnification::X100,
        Magnification::X200,
        Magnification::X400,
    ];

    pub fn factor(self) -> u32 {
        match self {
            Magnification::X40 => 40,
            Magnification::X100 => 100,
            Magnification::X200 => 200,
            Magnification::X400 => 400,
        }
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.factor())
    }
}

impl FromStr for Magnification {
    type Err = Error;

    /// Accepts `40`, `40x` and `40X`.
    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim_end_matches(['x', 'X']);
        Magnification::ALL
            .into_iter()
            .find(|m| digits == m.factor().to_string())
            .ok_or_else(|| Error::Data(format!("unknown magnification {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Benign,
    Malignant,
    Normal,
    InSitu,
    Invasive,
}

impl ClassLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Benign => "benign",
            ClassLabel::Malignant => "malignant",
            ClassLabel::Normal => "normal",
            ClassLabel::InSitu => "insitu",
            ClassLabel::Invasive => "invasive",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(char::is_ascii_alphanumeric)
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "benign" => Ok(ClassLabel::Benign),
            "malignant" => Ok(ClassLabel::Malignant),
            "normal" => Ok(ClassLabel::Normal),
            "insitu" => Ok(ClassLabel::InSitu),
            "invasive" => Ok(ClassLabel::Invasive),
            _ => Err(Error::Data(format!("unknown class label {s:?}"))),
        }
    }
}

/// BreakHis tumour subtypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subclass {
    /// Adenosis.
    A,
    /// Fibroadenoma.
    F,
    /// Tubular adenoma.
    TA,
    /// Phyllodes tumour.
    PT,
    /// Ductal carcinoma.
    DC,
    /// Lobular carcinoma.
    LC,
    /// Mucinous carcinoma.
    MC,
    /// Papillary carcinoma.
    PC,
}

impl Subclass {
    pub const ALL: [Subclass; 8] = [
        Subclass::A,
        Subclass::F,
        Subclass::TA,
        Subclass::PT,
        Subclass::DC,
        Subclass::LC,
        Subclass::MC,
        Subclass::PC,
    ];

    pub fn class(self) -> ClassLabel {
        match self {
            Subclass::A | Subclass::F | Subclass::TA | Subclass::PT => ClassLabel::Benign,
            _ => ClassLabel::Malignant,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subclass::A => "A",
            Subclass::F => "F",
            Subclass::TA => "TA",
            Subclass::PT => "PT",
            Subclass::DC => "DC",
            Subclass::LC => "LC",
            Subclass::MC => "MC",
            Subclass::PC => "PC",
        }
    }
}

impl FromStr for Subclass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subclass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Data(format!("unknown subclass {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// Which label a model is trained to predict.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelTask {
    /// Top-level class: benign/malignant, or the four challenge classes.
    #[default]
    Class,
    /// The eight BreakHis subclasses.
    Subclass,
}

impl LabelTask {
    pub fn vocabulary(self, dataset: DatasetId) -> Result<Vec<String>> {
        match self {
            LabelTask::Class => Ok(dataset.classes().iter().map(|c| c.to_string()).collect()),
            LabelTask::Subclass if dataset == DatasetId::Breakhis => {
                Ok(Subclass::ALL.iter().map(|c| c.as_str().to_string()).collect())
            }
            LabelTask::Subclass => Err(Error::Config(format!(
                "dataset {} has no subclass labels",
                dataset.as_str()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: PathBuf,
    /// Empty for datasets without patient identifiers.
    pub patient_id: String,
    pub magnification: Option<Magnification>,
    pub class: ClassLabel,
    pub subclass: Option<Subclass>,
    pub split: Split,
}

impl SampleRecord {
    pub fn label_index(&self, task: LabelTask, dataset: DatasetId) -> Result<usize> {
        match task {
            LabelTask::Class => dataset
                .classes()
                .iter()
                .position(|&c| c == self.class)
                .ok_or_else(|| Error::Data(format!("{}: class {} not in vocabulary", self.path.display(), self.class))),
            LabelTask::Subclass => {
                let sub = self
                    .subclass
                    .ok_or_else(|| Error::Data(format!("{}: record has no subclass", self.path.display())))?;
                Ok(Subclass::ALL.iter().position(|&c| c == sub).expect("subclass table is complete"))
            }
        }
    }
}

/// How a record's parent image is recovered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Each record is its own parent.
    #[default]
    Source,
    /// Records live at `<out>/images/<parent_key>/<tag>.png`; the parent key is
    /// the name of the containing directory.
    Derived,
}

/// Sidecar metadata stored next to the manifest CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMeta {
    pub dataset: DatasetId,
    pub vocabulary: Vec<ClassLabel>,
    pub seed: Option<u64>,
    pub tool_version: String,
    #[serde(default)]
    pub layout: Layout,
    /// Free-form description of the stage that produced the manifest.
    #[serde(default)]
    pub stage: String,
    /// The resolved run configuration of the producing command, echoed verbatim.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub records: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    path: String,
    patient_id: String,
    magnification: String,
    class: String,
    subclass: String,
    split: String,
}

impl Manifest {
    pub fn new(dataset: DatasetId, records: Vec<SampleRecord>) -> Self {
        Self {
            meta: ManifestMeta {
                dataset,
                vocabulary: dataset.classes().to_vec(),
                seed: None,
                tool_version: crate::TOOL_VERSION.to_string(),
                layout: Layout::Source,
                stage: "ingest".into(),
                config: serde_json::Value::Null,
            },
            records,
        }
    }

    /// A manifest of the same dataset and vocabulary holding `records`.
    pub fn derive(&self, records: Vec<SampleRecord>, stage: &str, seed: Option<u64>, layout: Layout) -> Self {
        Self {
            meta: ManifestMeta {
                seed,
                tool_version: crate::TOOL_VERSION.to_string(),
                layout,
                stage: stage.into(),
                ..self.meta.clone()
            },
            records,
        }
    }

    pub fn dataset(&self) -> DatasetId {
        self.meta.dataset
    }

    /// Identifier of the image a record was derived from (itself for source records).
    pub fn parent_of(&self, record: &SampleRecord) -> String {
        match self.meta.layout {
            Layout::Source => record.path.to_string_lossy().into_owned(),
            Layout::Derived => record
                .path
                .parent()
                .and_then(Path::file_name)
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| record.path.to_string_lossy().into_owned()),
        }
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            let where_ = r.path.display();
            if !seen.insert(&r.path) {
                return Err(Error::Data(format!("duplicate image path {where_}")));
            }
            if !self.meta.vocabulary.contains(&r.class) {
                return Err(Error::Data(format!("{where_}: class {} outside the vocabulary", r.class)));
            }
            if let Some(sub) = r.subclass {
                if sub.class() != r.class {
                    return Err(Error::Data(format!(
                        "{where_}: subclass {} contradicts class {}",
                        sub.as_str(),
                        r.class
                    )));
                }
            }
            let breakhis = self.meta.dataset == DatasetId::Breakhis;
            if r.magnification.is_some() != breakhis {
                return Err(Error::Data(format!(
                    "{where_}: magnification must be present exactly for BreakHis records"
                )));
            }
        }
        Ok(())
    }

    /// Path of the metadata sidecar for a manifest at `csv_path`.
    pub fn meta_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("meta.json")
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for r in &self.records {
            w.serialize(Row {
                path: r.path.to_string_lossy().into_owned(),
                patient_id: r.patient_id.clone(),
                magnification: r.magnification.map_or_else(|| "none".into(), |m| m.to_string()),
                class: r.class.to_string(),
                subclass: r.subclass.map_or("", Subclass::as_str).to_string(),
                split: r.split.as_str().to_string(),
            })?;
        }
        w.into_inner().map_err(|e| Error::Data(format!("manifest buffer: {e}")))
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        self.validate()?;
        fsutil::write_atomic(csv_path, &self.to_csv()?)?;
        let mut meta = serde_json::to_vec_pretty(&self.meta)?;
        meta.push(b'\n');
        fsutil::write_atomic(&Self::meta_path(csv_path), &meta)
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let meta_path = Self::meta_path(csv_path);
        let meta_bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ManifestMeta = serde_json::from_slice(&meta_bytes)?;
        let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let header = reader.headers()?.clone();
        let expected = ["path", "patient_id", "magnification", "class", "subclass", "split"];
        if header.iter().ne(expected) {
            return Err(Error::Data(format!(
                "{}: header must be {}",
                csv_path.display(),
                expected.join(",")
            )));
        }
        let mut records = Vec::new();
        for row in reader.deserialize::<Row>() {
            let row = row?;
            records.push(SampleRecord {
                path: PathBuf::from(row.path),
                patient_id: row.patient_id,
                magnification: match row.magnification.as_str() {
                    "none" | "" => None,
                    m => Some(m.parse()?),
                },
                class: row.class.parse()?,
                subclass: match row.subclass.as_str() {
                    "" => None,
                    s => Some(s.parse()?),
                },
                split: row.split.parse()?,
            });
        }
        let manifest = Manifest { meta, records };
        manifest.validate()?;
        Ok(manifest)
    }
}
