//! Samples, datasets, manifest ingestion and validation.
//!
//! A manifest is a UTF-8 file with one JSON object per line:
//!
//! ```text
//! {"image_ref": "imgs/0001.png", "caption": "a man in a red shirt", "attributes": [0, 3], "person_id": 7, "camera_id": 1}
//! ```
//!
//! `image_ref` may also be an inline pixel tensor
//! `{"height": H, "width": W, "pixels": [...]}` (HWC, values in `[0, 1]`).
//! `attributes` lists vocabulary indices and is expanded to a multi-hot
//! vector against the vocabulary supplied at load time.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::imaging::{Image, ImageLoader};
use crate::mining::AttributeVocabulary;

#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    /// Path as written in the manifest; relative paths resolve against the
    /// dataset root.
    Path(String),
    Pixels(Image),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedSample {
    pub image_ref: ImageRef,
    /// `None` flags the sample as caption-less (SSL only).
    pub caption: Option<String>,
    /// Multi-hot attribute vector of length M.
    pub attributes: Option<Vec<u8>>,
    pub person_id: Option<i64>,
    pub camera_id: Option<i64>,
}

impl CaptionedSample {
    pub fn from_pixels(image: Image) -> Self {
        Self {
            image_ref: ImageRef::Pixels(image),
            caption: None,
            attributes: None,
            person_id: None,
            camera_id: None,
        }
    }

    pub fn with_caption(mut self, caption: impl Into<String>) -> Self {
        self.caption = Some(caption.into());
        self
    }

    /// Caption present and non-blank.
    pub fn has_caption(&self) -> bool {
        self.caption.as_deref().is_some_and(|c| !c.trim().is_empty())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<CaptionedSample>,
    pub vocabulary: Option<AttributeVocabulary>,
    /// Directory that relative image paths resolve against.
    pub root: PathBuf,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples && self.vocabulary == other.vocabulary
    }
}

impl Dataset {
    pub fn new(samples: Vec<CaptionedSample>, vocabulary: Option<AttributeVocabulary>) -> Self {
        Self {
            samples,
            vocabulary,
            root: PathBuf::from("."),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Decodes sample `i` and resamples it to `height x width`.
    pub fn image(&self, i: usize, loader: &dyn ImageLoader, height: usize, width: usize) -> Result<Image> {
        let img = match &self.samples[i].image_ref {
            ImageRef::Pixels(img) => img.clone(),
            ImageRef::Path(p) => {
                let path = Path::new(p);
                let full = if path.is_absolute() {
                    path.to_path_buf()
                } else {
                    self.root.join(path)
                };
                loader.load(&full)?
            }
        };
        Ok(img.resize(height, width))
    }
}

const KNOWN_KEYS: [&str; 5] = ["image_ref", "caption", "attributes", "person_id", "camera_id"];

fn parse_image_ref(v: &Value, line: usize) -> Result<ImageRef> {
    match v {
        Value::String(s) => Ok(ImageRef::Path(s.clone())),
        Value::Object(o) => {
            let dim = |k: &str| {
                o.get(k)
                    .and_then(Value::as_u64)
                    .ok_or_else(|| Error::Parse(format!("inline image missing {k} at line {line}")))
            };
            let (h, w) = (dim("height")? as usize, dim("width")? as usize);
            let pixels = o
                .get("pixels")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Parse(format!("inline image missing pixels at line {line}")))?
                .iter()
                .map(|p| {
                    p.as_f64()
                        .ok_or_else(|| Error::Parse(format!("non-numeric pixel at line {line}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let img = Image::new(h, w, pixels)
                .map_err(|e| Error::Parse(format!("{e} at line {line}")))?;
            Ok(ImageRef::Pixels(img))
        }
        _ => Err(Error::Parse(format!("image_ref must be a string or object at line {line}"))),
    }
}

fn parse_optional_int(o: &Map<String, Value>, key: &str, line: usize) -> Result<Option<i64>> {
    match o.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_i64()
            .map(Some)
            .ok_or_else(|| Error::Parse(format!("{key} must be an integer at line {line}"))),
    }
}

/// Parses a single manifest record; `line` is 1-based and used in errors.
pub fn parse_manifest_line(
    text: &str,
    line: usize,
    vocabulary: Option<&AttributeVocabulary>,
) -> Result<CaptionedSample> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| Error::Parse(format!("malformed record at line {line}: {e}")))?;
    let Value::Object(o) = value else {
        return Err(Error::Parse(format!("record at line {line} is not an object")));
    };
    for key in o.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            log::warn!("ignoring unknown key {key:?} at line {line}");
        }
    }
    let image_ref = o
        .get("image_ref")
        .ok_or_else(|| Error::Parse(format!("missing image_ref at line {line}")))
        .and_then(|v| parse_image_ref(v, line))?;
    let caption = match o.get("caption") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(Error::Parse(format!("caption must be a string at line {line}"))),
    };
    let attributes = match o.get("attributes") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => {
            let vocab = vocabulary.ok_or_else(|| {
                Error::Parse(format!(
                    "attributes at line {line} require an attribute vocabulary"
                ))
            })?;
            let m = vocab.len();
            let mut bits = vec![0u8; m];
            for item in items {
                let idx = item
                    .as_u64()
                    .ok_or_else(|| Error::Parse(format!("attribute index must be a non-negative integer at line {line}")))?;
                if idx as usize >= m {
                    return Err(Error::Parse(format!(
                        "attribute index {idx} out of range for M={m} at line {line}"
                    )));
                }
                bits[idx as usize] = 1;
            }
            Some(bits)
        }
        Some(_) => return Err(Error::Parse(format!("attributes must be a list at line {line}"))),
    };
    Ok(CaptionedSample {
        image_ref,
        caption,
        attributes,
        person_id: parse_optional_int(&o, "person_id", line)?,
        camera_id: parse_optional_int(&o, "camera_id", line)?,
    })
}

pub fn parse_manifest(text: &str, vocabulary: Option<&AttributeVocabulary>) -> Result<Vec<CaptionedSample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_manifest_line(l, i + 1, vocabulary))
        .collect()
}

/// Reads a manifest; samples keep file order.
pub fn load_manifest(path: &Path, vocabulary: Option<AttributeVocabulary>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let samples = parse_manifest(&text, vocabulary.as_ref())?;
    Ok(Dataset {
        samples,
        vocabulary,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn manifest_record(sample: &CaptionedSample) -> String {
    let mut o = Map::new();
    let image = match &sample.image_ref {
        ImageRef::Path(p) => Value::String(p.clone()),
        ImageRef::Pixels(img) => json!({
            "height": img.height,
            "width": img.width,
            "pixels": img.pixels,
        }),
    };
    o.insert("image_ref".into(), image);
    if let Some(c) = &sample.caption {
        o.insert("caption".into(), Value::String(c.clone()));
    }
    if let Some(bits) = &sample.attributes {
        let idx: Vec<usize> = bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0)
            .map(|(i, _)| i)
            .collect();
        o.insert("attributes".into(), json!(idx));
    }
    if let Some(p) = sample.person_id {
        o.insert("person_id".into(), json!(p));
    }
    if let Some(c) = sample.camera_id {
        o.insert("camera_id".into(), json!(c));
    }
    Value::Object(o).to_string()
}

pub fn save_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in &ds.samples {
        out.push_str(&manifest_record(s));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub sample: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sample {}: {}", self.sample, self.message)
    }
}

/// One diagnostic per invariant violation; empty when the dataset is valid.
pub fn validate_dataset(ds: &Dataset) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let expected_m = ds.vocabulary.as_ref().map(AttributeVocabulary::len).or_else(|| {
        ds.samples
            .iter()
            .find_map(|s| s.attributes.as_ref().map(Vec::len))
    });
    for (i, s) in ds.samples.iter().enumerate() {
        if let Some(c) = &s.caption {
            if c.trim().is_empty() {
                out.push(Diagnostic {
                    sample: i,
                    message: "empty caption on a sample not flagged caption-less".into(),
                });
            }
        }
        if let Some(bits) = &s.attributes {
            if let Some(m) = expected_m {
                if bits.len() != m {
                    out.push(Diagnostic {
                        sample: i,
                        message: format!("attribute vector has {} entries, expected M={m}", bits.len()),
                    });
                }
            }
            if bits.iter().any(|b| *b > 1) {
                out.push(Diagnostic {
                    sample: i,
                    message: "attribute vector entries must be 0 or 1".into(),
                });
            }
        }
        if let ImageRef::Pixels(img) = &s.image_ref {
            if !img.in_unit_range() {
                out.push(Diagnostic {
                    sample: i,
                    message: "pixel values outside [0, 1]".into(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricTask {
    Reid,
    Attributes,
    TextSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: MetricTask,
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(task: MetricTask, values: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((k, v)) = values.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("metric {k}={v} outside [0, 1]")));
        }
        Ok(Self { task, values })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    /// Single-line JSON record.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("metric report serialises")
    }

    pub fn to_table(&self) -> String {
        let width = self.values.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  value\n", "metric");
        for (k, v) in &self.values {
            out.push_str(&format!("{k:<width$}  {v:.4}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::{AttributeVocabulary, PosClass, VocabEntry};

    fn vocab(m: usize) -> AttributeVocabulary {
        let entries = (0..m)
            .map(|i| VocabEntry {
                token: format!("t{i}"),
                pos: PosClass::Noun,
                frequency: (m - i) as u64,
            })
            .collect();
        AttributeVocabulary::new(entries, vec![1.0; m]).unwrap()
    }

    #[test]
    fn three_lines_in_order() {
        let text = "{\"image_ref\":\"a.png\"}\n{\"image_ref\":\"b.png\",\"caption\":\"x\"}\n{\"image_ref\":\"c.png\"}\n";
        let s = parse_manifest(text, None).unwrap();
        let refs: Vec<_> = s
            .iter()
            .map(|s| match &s.image_ref {
                ImageRef::Path(p) => p.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(refs, ["a.png", "b.png", "c.png"]);
    }

    #[test]
    fn expands_attribute_indices() {
        let v = vocab(4);
        let s = parse_manifest_line(r#"{"image_ref":"a","attributes":[0,2]}"#, 1, Some(&v)).unwrap();
        assert_eq!(s.attributes, Some(vec![1, 0, 1, 0]));
    }

    #[test]
    fn missing_image_ref_names_line() {
        let err = parse_manifest("{\"image_ref\":\"a\"}\n{\"caption\":\"x\"}\n", None).unwrap_err();
        assert!(err.to_string().contains("missing image_ref at line 2"), "{err}");
    }

    #[test]
    fn out_of_range_attribute_names_index() {
        let v = vocab(4);
        let err = parse_manifest_line(r#"{"image_ref":"a","attributes":[1,9]}"#, 3, Some(&v)).unwrap_err();
        assert!(err.to_string().contains("attribute index 9"), "{err}");
    }

    #[test]
    fn malformed_line_names_line() {
        let err = parse_manifest("{\"image_ref\":\"a\"}\n{oops\n", None).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_keys_are_ignored() {
        let s = parse_manifest_line(r#"{"image_ref":"a","extra":1}"#, 1, None).unwrap();
        assert_eq!(s.image_ref, ImageRef::Path("a".into()));
    }

    #[test]
    fn validation_diagnostics() {
        let v = vocab(4);
        let mut samples: Vec<_> = (0..10)
            .map(|i| CaptionedSample {
                image_ref: ImageRef::Path(format!("{i}.png")),
                caption: Some("a red shirt".into()),
                attributes: Some(vec![0, 1, 0, 0]),
                person_id: None,
                camera_id: None,
            })
            .collect();
        let ds = Dataset::new(samples.clone(), Some(v.clone()));
        assert!(validate_dataset(&ds).is_empty());

        samples[3].attributes = Some(vec![0, 1, 0, 0, 1]);
        let ds = Dataset::new(samples.clone(), Some(v.clone()));
        let d = validate_dataset(&ds);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].sample, 3);

        samples[3].attributes = Some(vec![0, 1, 0, 0]);
        samples[5].caption = Some("   ".into());
        let d = validate_dataset(&Dataset::new(samples, Some(v)));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].sample, 5);
    }

    #[test]
    fn metric_report_rejects_out_of_range() {
        let mut v = BTreeMap::new();
        v.insert("map".to_string(), 1.5);
        assert!(MetricReport::new(MetricTask::Reid, v).is_err());
    }
}
