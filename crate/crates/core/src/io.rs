//! File formats: NDJSON sample files, the catalog JSON, the `ULT1` pixel
//! tensor format, JSON artifacts, the training-log CSV and `.dat` tables.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cbm::{CbmModel, EpochRecord, ObjectiveTerms, TrainConfig, TrainingLog};
use crate::dataset::{ConceptLabeledSample, ConceptVocabulary, Provenance};
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::types::{
    validate_dataset, AnnotatedSample, BoundingBox, ClassLabel, Concept, ConceptCatalog, ConceptId,
    Detection, Embedding, ImageTensor,
};

pub const TENSOR_MAGIC: &[u8; 4] = b"ULT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectionRecord {
    concept_id: ConceptId,
    confidence: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    label: ClassLabel,
    embedding: Embedding,
    #[serde(default)]
    detections: Vec<DetectionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels_path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabeledRecord {
    #[serde(flatten)]
    sample: SampleRecord,
    concept_vector: Vec<u8>,
    provenance: Provenance,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            concept_id: d.concept,
            confidence: d.confidence,
            bbox: d.bbox.to_array(),
        }
    }
}

impl From<DetectionRecord> for Detection {
    fn from(r: DetectionRecord) -> Self {
        Self {
            bbox: BoundingBox::from(r.bbox),
            confidence: r.confidence,
            concept: r.concept_id,
        }
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    create_parent(path)?;
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Parses one JSON value per nonblank line.
fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = open(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Pixel tensors

pub fn write_tensor(path: &Path, tensor: &ImageTensor) -> Result<()> {
    let mut w = create(path)?;
    let mut buf = Vec::with_capacity(16 + 4 * tensor.data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    for dim in [tensor.height, tensor.width, tensor.channels] {
        let dim = u32::try_from(dim).map_err(|_| Error::ShapeMismatch(format!("dimension {dim} too large")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for v in &tensor.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<ImageTensor> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    if bytes.len() < 16 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("missing ULT1 header".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != 4 * h * w * c {
        return Err(bad(format!(
            "payload of {} bytes does not match {h}x{w}x{c}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageTensor::new(h, w, c, data)
}

// ---------------------------------------------------------------------------
// Annotated samples

fn sample_from_record(r: SampleRecord, dir: &Path) -> Result<AnnotatedSample> {
    let pixels = match &r.pixels_path {
        Some(p) => Some(Arc::new(read_tensor(&dir.join(p))?)),
        None => None,
    };
    Ok(AnnotatedSample {
        sample_id: r.id,
        label: r.label,
        image_embedding: r.embedding,
        detections: r.detections.into_iter().map(Detection::from).collect(),
        pixels,
    })
}

/// Parses an NDJSON sample file without validating it against a catalog.
/// Pixel paths are resolved relative to the file's directory.
pub fn read_samples(path: &Path) -> Result<Vec<AnnotatedSample>> {
    let dir = base_dir(path);
    read_ndjson::<SampleRecord>(path)?
        .into_iter()
        .map(|r| sample_from_record(r, &dir))
        .collect()
}

/// Parses and validates a sample file.
pub fn load_dataset(path: &Path, catalog: &ConceptCatalog) -> Result<Vec<AnnotatedSample>> {
    let samples = read_samples(path)?;
    let violations = validate_dataset(&samples, catalog);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(samples)
}

fn pixel_dir_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("samples");
    format!("{stem}_pixels")
}

/// Writes pixels (if any) to `<stem>_pixels/<index>.ult` next to `path`.
fn stash_pixels(path: &Path, index: usize, pixels: &Option<Arc<ImageTensor>>) -> Result<Option<String>> {
    let Some(px) = pixels else { return Ok(None) };
    let rel = format!("{}/{index:06}.ult", pixel_dir_name(path));
    write_tensor(&base_dir(path).join(&rel), px)?;
    Ok(Some(rel))
}

fn record_of(path: &Path, index: usize, s: &AnnotatedSample) -> Result<SampleRecord> {
    Ok(SampleRecord {
        id: s.sample_id.clone(),
        label: s.label,
        embedding: s.image_embedding.clone(),
        detections: s.detections.iter().map(DetectionRecord::from).collect(),
        pixels_path: stash_pixels(path, index, &s.pixels)?,
    })
}

pub fn save_samples(path: &Path, samples: &[AnnotatedSample]) -> Result<()> {
    let records = samples
        .iter()
        .enumerate()
        .map(|(i, s)| record_of(path, i, s))
        .collect::<Result<Vec<_>>>()?;
    write_ndjson(path, &records)
}

// ---------------------------------------------------------------------------
// Concept-labeled samples

pub fn save_labeled(path: &Path, samples: &[ConceptLabeledSample]) -> Result<()> {
    let records = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(LabeledRecord {
                sample: record_of(path, i, &s.to_annotated())?,
                concept_vector: s.concept_vector.clone(),
                provenance: s.provenance.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_ndjson(path, &records)
}

pub fn load_labeled(path: &Path) -> Result<Vec<ConceptLabeledSample>> {
    let dir = base_dir(path);
    read_ndjson::<LabeledRecord>(path)?
        .into_iter()
        .map(|r| {
            let s = sample_from_record(r.sample, &dir)?;
            Ok(ConceptLabeledSample {
                sample_id: s.sample_id,
                label: s.label,
                concept_vector: r.concept_vector,
                image_embedding: s.image_embedding,
                pixels: s.pixels,
                detections: s.detections,
                provenance: r.provenance,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Catalog

#[derive(Debug, Serialize, Deserialize)]
struct CatalogConcept {
    id: ConceptId,
    text: String,
    embedding: Embedding,
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogClass {
    label: ClassLabel,
    concepts: Vec<CatalogConcept>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogFile {
    classes: Vec<CatalogClass>,
}

pub fn catalog_to_json(catalog: &ConceptCatalog) -> Result<String> {
    let classes = (0..catalog.num_classes())
        .map(|l| {
            let label = ClassLabel(l);
            let concepts = catalog
                .class_concepts(label)?
                .iter()
                .map(|&id| {
                    let c = catalog.concept(id)?;
                    Ok(CatalogConcept {
                        id,
                        text: c.text.clone(),
                        embedding: c.embedding.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CatalogClass { label, concepts })
        })
        .collect::<Result<Vec<_>>>()?;
    serde_json::to_string_pretty(&CatalogFile { classes }).map_err(|e| Error::json("<catalog>", e))
}

pub fn catalog_from_json(text: &str, path: &Path) -> Result<ConceptCatalog> {
    let file: CatalogFile = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
    let n = file.classes.len();
    let mut seen = vec![false; n];
    let mut concepts = Vec::new();
    for class in file.classes {
        let l = class.label.0;
        if l >= n || seen[l] {
            return Err(Error::InvalidCatalog(format!(
                "class labels must be 0..{n} each listed once; got {l}"
            )));
        }
        seen[l] = true;
        concepts.extend(class.concepts.into_iter().map(|c| Concept {
            id: c.id,
            text: c.text,
            class_of_origin: class.label,
            embedding: c.embedding,
        }));
    }
    ConceptCatalog::new(n, concepts)
}

pub fn load_catalog(path: &Path) -> Result<ConceptCatalog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    catalog_from_json(&text, path)
}

pub fn save_catalog(path: &Path, catalog: &ConceptCatalog) -> Result<()> {
    let text = catalog_to_json(catalog)?;
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// JSON artifacts

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::json(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = open(path)?;
    serde_json::from_reader(r).map_err(|e| Error::json(path, e))
}

/// A trained model with the vocabulary that names its bottleneck units and
/// the configuration it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: CbmModel,
    pub vocabulary: ConceptVocabulary,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.vocabulary.len() != self.model.k {
            return Err(Error::DimensionMismatch {
                expected: self.model.k,
                found: self.vocabulary.len(),
            });
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_json(path, ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = read_json(path)?;
    ckpt.validate()?;
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Tables

#[derive(Debug, Serialize, Deserialize)]
struct LogRow {
    epoch: usize,
    #[serde(rename = "L_C")]
    concept: f64,
    #[serde(rename = "L_Y")]
    task: f64,
    #[serde(rename = "R_beta")]
    regularizer: f64,
    total: f64,
}

pub fn write_training_log(path: &Path, log: &TrainingLog) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in &log.epochs {
        w.serialize(LogRow {
            epoch: r.epoch,
            concept: r.terms.concept,
            task: r.terms.task,
            regularizer: r.terms.regularizer,
            total: r.terms.total,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_training_log(path: &Path) -> Result<TrainingLog> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let epochs = r
        .deserialize::<LogRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                source: e,
            })?;
            Ok(EpochRecord {
                epoch: row.epoch,
                terms: ObjectiveTerms {
                    concept: row.concept,
                    task: row.task,
                    regularizer: row.regularizer,
                    total: row.total,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingLog { epochs })
}

/// Whitespace-separated table with a `#` header line, readable by gnuplot.
pub fn write_dat(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "# {}", columns.join(" ")).map_err(io)?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" ")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Per-sample indicator table of an evaluation.
pub fn write_indicators_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "sample_id", "label", "predicted", "correct", "dis_ok", "cov_ok", "div_ok", "loss_dis",
        "loss_cov", "loss_div",
    ])
    .map_err(csv_err)?;
    let b = |v: bool| if v { "1" } else { "0" }.to_string();
    for s in &report.per_sample_deltas {
        w.write_record([
            s.sample_id.clone(),
            s.label.0.to_string(),
            s.predicted.0.to_string(),
            b(s.correct),
            b(s.dis_ok),
            b(s.cov_ok),
            b(s.div_ok),
            s.losses[0].to_string(),
            s.losses[1].to_string(),
            s.losses[2].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::fixtures::*;

    fn with_pixels(mut s: AnnotatedSample, seed: f32) -> AnnotatedSample {
        let mut px = ImageTensor::filled(8, 8, 3, 0.0);
        for (i, v) in px.data.iter_mut().enumerate() {
            *v = ((i as f32 * 0.37 + seed).sin() * 0.5 + 0.5).clamp(0.0, 1.0);
        }
        s.pixels = Some(Arc::new(px));
        s
    }

    #[test]
    fn three_line_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ndjson");
        fs::write(
            &path,
            concat!(
                r#"{"id":"a","label":0,"embedding":[1,0,0],"detections":[{"concept_id":0,"confidence":0.9,"box":[1,1,4,4]}]}"#,
                "\n",
                r#"{"id":"b","label":1,"embedding":[0,0,1],"detections":[]}"#,
                "\n\n",
                r#"{"id":"c","label":0,"embedding":[0.5,0.5,0]}"#,
                "\n"
            ),
        )
        .unwrap();
        let s = load_dataset(&path, &small_catalog()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].detections[0].bbox, BoundingBox::new(1.0, 1.0, 4.0, 4.0));
        assert!(s[2].detections.is_empty());
    }

    #[test]
    fn truncated_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ndjson");
        fs::write(
            &path,
            "{\"id\":\"a\",\"label\":0,\"embedding\":[1,0,0]}\n{\"id\":\"b\",\"label\":0,\"embe\n",
        )
        .unwrap();
        let err = read_samples(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn unknown_concept_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ndjson");
        fs::write(
            &path,
            r#"{"id":"a","label":0,"embedding":[1,0,0],"detections":[{"concept_id":99,"confidence":0.9,"box":[1,1,4,4]}]}"#,
        )
        .unwrap();
        let err = load_dataset(&path, &small_catalog()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref v) if v.len() == 1));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn zero_embedding_is_rejected_at_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ndjson");
        fs::write(&path, r#"{"id":"a","label":0,"embedding":[0,0,0]}"#).unwrap();
        assert!(matches!(read_samples(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn samples_round_trip_with_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out/train.ndjson");
        let samples = vec![
            with_pixels(sample("a", 0, &[0.1, 0.7, 1.0 / 3.0], vec![det(0, 0.123456789), det(1, 1.0)]), 0.0),
            sample("b", 1, &[f64::MIN_POSITIVE, 1.0, -2.5e-300], vec![]),
        ];
        save_samples(&path, &samples).unwrap();
        assert_eq!(read_samples(&path).unwrap(), samples);
    }

    #[test]
    fn tensor_round_trip_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ult");
        let t = ImageTensor::new(2, 3, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"ULT1");
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(read_tensor(&path).unwrap(), t);
        fs::write(&path, b"NOPE").unwrap();
        assert!(read_tensor(&path).is_err());
    }

    #[test]
    fn catalog_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.json");
        let cat = small_catalog();
        save_catalog(&path, &cat).unwrap();
        assert_eq!(load_catalog(&path).unwrap(), cat);
    }

    #[test]
    fn catalog_rejects_repeated_label() {
        let text = r#"{"classes":[{"label":0,"concepts":[{"id":0,"text":"a","embedding":[1]}]},
                                 {"label":0,"concepts":[{"id":1,"text":"b","embedding":[1]}]}]}"#;
        assert!(matches!(
            catalog_from_json(text, Path::new("c.json")),
            Err(Error::InvalidCatalog(_))
        ));
    }

    #[test]
    fn labeled_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.ndjson");
        let base = with_pixels(sample("t", 0, &[1.0, 0.2, 0.0], vec![det(1, 0.8)]), 1.0);
        let records = vec![
            ConceptLabeledSample {
                sample_id: "t".into(),
                label: ClassLabel(0),
                concept_vector: vec![0, 1],
                image_embedding: base.image_embedding.clone(),
                pixels: base.pixels.clone(),
                detections: base.detections.clone(),
                provenance: Provenance::Original,
            },
            ConceptLabeledSample {
                sample_id: "t~aug-#0-1".into(),
                label: ClassLabel(0),
                concept_vector: vec![1, 1],
                image_embedding: base.image_embedding.clone(),
                pixels: base.pixels.clone(),
                detections: base.detections.clone(),
                provenance: Provenance::Augmented {
                    source_id: "s".into(),
                    target_id: "t".into(),
                    inserted_concept: ConceptId(0),
                    placement: BoundingBox::new(0.0, 0.0, 3.0, 2.0),
                },
            },
        ];
        save_labeled(&path, &records).unwrap();
        assert_eq!(load_labeled(&path).unwrap(), records);
    }

    #[test]
    fn checkpoint_and_log_round_trip() {
        use rand::SeedableRng;
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ckpt = Checkpoint {
            model: CbmModel::init(3, 2, 2, &mut rng),
            vocabulary: ConceptVocabulary::new([ConceptId(0), ConceptId(2)]).unwrap(),
            config: TrainConfig::default(),
        };
        let p = dir.path().join("model.json");
        save_checkpoint(&p, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ckpt);

        let log = TrainingLog {
            epochs: (0..3)
                .map(|e| EpochRecord {
                    epoch: e,
                    terms: ObjectiveTerms {
                        concept: 0.1 / (e as f64 + 3.0),
                        task: std::f64::consts::PI,
                        regularizer: 1e-17,
                        total: 2.0 / 7.0,
                    },
                })
                .collect(),
        };
        let p = dir.path().join("log.csv");
        write_training_log(&p, &log).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("epoch,L_C,L_Y,R_beta,total"));
        assert_eq!(read_training_log(&p).unwrap(), log);
    }

    #[test]
    fn dat_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.dat");
        write_dat(&p, &["nec", "cca"], &[vec![1.0, 0.25], vec![2.0, 0.5]]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "# nec cca\n1 0.25\n2 0.5\n");
    }
}
