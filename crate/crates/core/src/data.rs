//! Samples, the planted synthetic dataset, and the on-disk feature format.
//!
//! A dataset directory holds four files:
//!
//! * `manifest.jsonl`: a header line followed by one JSON record per sample
//!   (tokens, feature shapes, answers, blob offset, value count, CRC32);
//! * `features.bin`: every sample's image values then detection values as
//!   little-endian `f64`, back to back in record order;
//! * `answers.txt`: the answer vocabulary, one answer per line;
//! * `vocab.txt`: the token vocabulary, one token per line, `<pad>` first.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{DetectionFeature, ImageFeature};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::AnswerVocabulary;
use crate::question::{TokenSequence, Vocabulary, PAD_TOKEN};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BLOB_FILE: &str = "features.bin";
pub const ANSWERS_FILE: &str = "answers.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
const FORMAT_NAME: &str = "dual-mfa-features";
const FORMAT_VERSION: u32 = 1;

/// Which modality carries the answer of a planted question.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Region,
    Detection,
}

impl QuestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Region => "region",
            QuestionKind::Detection => "detection",
        }
    }
}

/// Where the answer signal of a generated sample was planted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub kind: QuestionKind,
    /// Query channel named by the question.
    pub channel: usize,
    /// Box index, or the top-left cell (row-major) of the grid patch.
    pub location: usize,
    /// Answer bucket.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaInstance {
    pub question: TokenSequence,
    pub image: ImageFeature,
    pub detections: DetectionFeature,
    pub answers: Vec<String>,
    pub choices: Option<Vec<String>>,
    pub planted: Option<PlantedSpec>,
}

impl VqaInstance {
    /// Group name used for per-type accuracy.
    pub fn question_type(&self) -> &'static str {
        self.planted.map_or("all", |p| p.kind.as_str())
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let image = [cfg.image_channels, cfg.grid_h, cfg.grid_w];
        if self.image.values.shape() != image {
            return Err(Error::shape(
                "image feature",
                self.image.values.shape(),
                &image,
            ));
        }
        let det = [cfg.det_channels, cfg.num_boxes];
        if self.detections.values.shape() != det {
            return Err(Error::shape(
                "detection feature",
                self.detections.values.shape(),
                &det,
            ));
        }
        if self.question.len() != cfg.question_len {
            return Err(Error::Config(format!(
                "question length {} differs from configured {}",
                self.question.len(),
                cfg.question_len
            )));
        }
        if let Some(&id) = self.question.ids().iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                size: cfg.vocab_size,
            });
        }
        if self.answers.is_empty() {
            return Err(Error::Config("sample has no answers".into()));
        }
        Ok(())
    }
}

/// Samples plus the vocabularies needed to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<VqaInstance>,
    pub answers: AnswerVocabulary,
    pub vocabulary: Vocabulary,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Class id of each sample's most frequent answer.
    pub fn targets(&self) -> Result<Vec<usize>> {
        self.instances
            .iter()
            .map(|inst| self.answers.target(&inst.answers))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            answers: self.answers.clone(),
            vocabulary: self.vocabulary.clone(),
        }
    }
}

/// Knobs of the planted generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedOptions {
    pub spike: f64,
    pub noise: f64,
    pub buckets: usize,
    /// Side of the square grid patch for region questions.
    pub patch: usize,
    /// Plant a second spike on a different channel in each modality.
    pub distractors: bool,
    /// Fraction of detection-type questions.
    pub detection_fraction: f64,
}

impl Default for PlantedOptions {
    fn default() -> Self {
        PlantedOptions {
            spike: 3.0,
            noise: 0.1,
            buckets: 4,
            patch: 2,
            distractors: true,
            detection_fraction: 0.5,
        }
    }
}

impl PlantedOptions {
    /// Centre value of bucket `b`; neighbouring centres are 1 apart.
    pub fn level(&self, bucket: usize) -> f64 {
        bucket as f64 - (self.buckets as f64 - 1.0) / 2.0
    }

    /// Bucket of a secondary-channel value, thresholds halfway between levels.
    pub fn bucket(&self, value: f64) -> usize {
        let b = (value + self.buckets as f64 / 2.0).floor();
        b.clamp(0.0, self.buckets as f64 - 1.0) as usize
    }
}

/// Token layout of planted questions.
pub const REGION_TOKEN: usize = 1;
pub const DETECTION_TOKEN: usize = 2;
pub const FIRST_CHANNEL_TOKEN: usize = 3;

/// Number of query channels the planted layout uses for `cfg`: the first
/// half of the feature channels are query channels, the second half carry
/// the matching answer values.
pub fn planted_query_channels(cfg: &ModelConfig) -> usize {
    cfg.image_channels / 2
}

pub fn planted_vocabulary(cfg: &ModelConfig) -> Vocabulary {
    let mut tokens = vec![PAD_TOKEN.to_owned(), "region".into(), "detection".into()];
    tokens.extend((0..planted_query_channels(cfg)).map(|c| format!("channel{c}")));
    Vocabulary::new(tokens).expect("starts with the pad token")
}

pub fn planted_answers(buckets: usize) -> AnswerVocabulary {
    AnswerVocabulary::new((0..buckets).map(|b| format!("bucket{b}")).collect())
        .expect("distinct bucket names")
}

fn check_planted_config(cfg: &ModelConfig, opts: &PlantedOptions) -> Result<()> {
    let q = planted_query_channels(cfg);
    let problems = [
        (
            cfg.image_channels != cfg.det_channels,
            "image_channels must equal det_channels",
        ),
        (
            !cfg.image_channels.is_multiple_of(2) || q < 2,
            "feature channels must be even and at least 4",
        ),
        (
            cfg.vocab_size != FIRST_CHANNEL_TOKEN + q,
            "vocab_size must be 3 + channels/2",
        ),
        (cfg.question_len < 2, "question_len must be at least 2"),
        (
            cfg.n_answers != opts.buckets,
            "n_answers must equal the bucket count",
        ),
        (opts.buckets < 2, "need at least two buckets"),
        (
            opts.patch == 0 || opts.patch > cfg.grid_h.min(cfg.grid_w),
            "patch must fit the grid",
        ),
        (cfg.num_boxes < 2, "need at least two boxes"),
    ];
    match problems.iter().find(|(bad, _)| *bad) {
        Some((_, msg)) => Err(Error::Config(format!("planted dataset: {msg}"))),
        None => Ok(()),
    }
}

/// Generates `n` planted samples.
///
/// Every location of both modalities gets Gaussian noise on all channels and
/// a random bucket level on every answer channel. A detection question on
/// channel `c` spikes channel `c` of one box and sets that box's answer
/// channel to the label's level; a region question does the same for every
/// cell of a square grid patch. The stored label is recomputed from the final
/// feature values, so it always follows the closed-form rule.
pub fn generate_planted(
    n: usize,
    cfg: &ModelConfig,
    seed: u64,
    opts: &PlantedOptions,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    check_planted_config(cfg, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..n)
        .map(|_| planted_instance(cfg, opts, &mut rng))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        instances,
        answers: planted_answers(opts.buckets),
        vocabulary: planted_vocabulary(cfg),
    })
}

fn planted_instance(
    cfg: &ModelConfig,
    opts: &PlantedOptions,
    rng: &mut ChaCha8Rng,
) -> Result<VqaInstance> {
    let q = planted_query_channels(cfg);
    let (h, w, boxes) = (cfg.grid_h, cfg.grid_w, cfg.num_boxes);
    let cells = h * w;
    let noise = Normal::new(0.0, opts.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;

    let kind = if rng.random_bool(opts.detection_fraction) {
        QuestionKind::Detection
    } else {
        QuestionKind::Region
    };
    let channel = rng.random_range(0..q);
    let bucket = rng.random_range(0..opts.buckets);

    // [C, cells] and [C, boxes], channel-major.
    let mut image = vec![0.0; 2 * q * cells];
    let mut det = vec![0.0; 2 * q * boxes];
    for (values, locations) in [(&mut image, cells), (&mut det, boxes)] {
        for c in 0..2 * q {
            for l in 0..locations {
                let base = if c >= q {
                    opts.level(rng.random_range(0..opts.buckets))
                } else {
                    0.0
                };
                values[c * locations + l] = base + noise.sample(rng);
            }
        }
    }

    let random_patch = |rng: &mut ChaCha8Rng| -> (usize, Vec<usize>) {
        let top = rng.random_range(0..=h - opts.patch);
        let left = rng.random_range(0..=w - opts.patch);
        let cells = (0..opts.patch)
            .flat_map(|dy| (0..opts.patch).map(move |dx| (top + dy) * w + left + dx))
            .collect();
        (top * w + left, cells)
    };
    let other_channel = |rng: &mut ChaCha8Rng| (channel + rng.random_range(1..q)) % q;

    let (location, label) = match kind {
        QuestionKind::Region => {
            let (origin, patch) = random_patch(rng);
            for &cell in &patch {
                image[channel * cells + cell] += opts.spike;
                image[(channel + q) * cells + cell] = opts.level(bucket) + noise.sample(rng);
            }
            if opts.distractors {
                let c = other_channel(rng);
                let (_, decoy) = random_patch(rng);
                for cell in decoy {
                    image[c * cells + cell] += opts.spike;
                }
                let (c, b) = (rng.random_range(0..q), rng.random_range(0..boxes));
                det[c * boxes + b] += opts.spike;
            }
            let mean = patch
                .iter()
                .map(|&cell| image[(channel + q) * cells + cell])
                .sum::<f64>()
                / patch.len() as f64;
            (origin, opts.bucket(mean))
        }
        QuestionKind::Detection => {
            let target = rng.random_range(0..boxes);
            det[channel * boxes + target] += opts.spike;
            det[(channel + q) * boxes + target] = opts.level(bucket) + noise.sample(rng);
            if opts.distractors {
                let c = other_channel(rng);
                let b = (target + rng.random_range(1..boxes)) % boxes;
                det[c * boxes + b] += opts.spike;
                let c = rng.random_range(0..q);
                let (_, decoy) = random_patch(rng);
                for cell in decoy {
                    image[c * cells + cell] += opts.spike;
                }
            }
            (target, opts.bucket(det[(channel + q) * boxes + target]))
        }
    };

    let kind_token = match kind {
        QuestionKind::Region => REGION_TOKEN,
        QuestionKind::Detection => DETECTION_TOKEN,
    };
    let question = TokenSequence::new(
        &[kind_token, FIRST_CHANNEL_TOKEN + channel],
        cfg.question_len,
        cfg.vocab_size,
    )?;
    let answer = format!("bucket{label}");

    let mut choices = vec![answer.clone()];
    while choices.len() < opts.buckets.min(3) {
        let c = format!("bucket{}", rng.random_range(0..opts.buckets));
        if !choices.contains(&c) {
            choices.push(c);
        }
    }
    let shift = rng.random_range(0..choices.len());
    choices.rotate_left(shift);

    Ok(VqaInstance {
        question,
        image: ImageFeature::new(Tensor::new(&[2 * q, h, w], image)?)?,
        detections: DetectionFeature::new(Tensor::new(&[2 * q, boxes], det)?)?,
        answers: vec![answer],
        choices: Some(choices),
        planted: Some(PlantedSpec {
            kind,
            channel,
            location,
            label,
        }),
    })
}

/// Unstructured samples with standard-normal features, random questions and
/// random single answers `answer{i}`. Used for gradient checks and oracles.
pub fn random_dataset(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut instances = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(1..=cfg.question_len);
        let tokens: Vec<usize> = (0..len)
            .map(|_| rng.random_range(1..cfg.vocab_size.max(2)))
            .collect();
        let image_shape = [cfg.image_channels, cfg.grid_h, cfg.grid_w];
        let det_shape = [cfg.det_channels, cfg.num_boxes];
        let image: Vec<f64> = (0..image_shape.iter().product::<usize>())
            .map(|_| normal.sample(&mut rng))
            .collect();
        let det: Vec<f64> = (0..det_shape.iter().product::<usize>())
            .map(|_| normal.sample(&mut rng))
            .collect();
        instances.push(VqaInstance {
            question: TokenSequence::new(&tokens, cfg.question_len, cfg.vocab_size)?,
            image: ImageFeature::new(Tensor::new(&image_shape, image)?)?,
            detections: DetectionFeature::new(Tensor::new(&det_shape, det)?)?,
            answers: vec![format!("answer{}", rng.random_range(0..cfg.n_answers))],
            choices: None,
            planted: None,
        });
    }
    let mut tokens = vec![PAD_TOKEN.to_owned()];
    tokens.extend((1..cfg.vocab_size).map(|i| format!("token{i}")));
    Ok(Dataset {
        instances,
        answers: AnswerVocabulary::new((0..cfg.n_answers).map(|i| format!("answer{i}")).collect())?,
        vocabulary: Vocabulary::new(tokens)?,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    records: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: usize,
    tokens: Vec<usize>,
    pad_len: usize,
    image_shape: Vec<usize>,
    det_shape: Vec<usize>,
    answers: Vec<String>,
    #[serde(default)]
    choices: Option<Vec<String>>,
    #[serde(default)]
    planted: Option<PlantedSpec>,
    offset: u64,
    values: u64,
    crc32: u32,
}

/// Writes `dataset` into `dir` (created if needed).
pub fn write_features(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut manifest = Vec::new();
    let header = ManifestHeader {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        records: dataset.len(),
    };
    writeln!(
        manifest,
        "{}",
        serde_json::to_string(&header).expect("serializable")
    )?;

    for (id, inst) in dataset.instances.iter().enumerate() {
        let offset = blob.len() as u64;
        let start = blob.len();
        for v in inst
            .image
            .values
            .data()
            .iter()
            .chain(inst.detections.values.data())
        {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let record = ManifestRecord {
            id,
            tokens: inst.question.ids()[..inst.question.len() - inst.question.pad_len()].to_vec(),
            pad_len: inst.question.pad_len(),
            image_shape: inst.image.values.shape().to_vec(),
            det_shape: inst.detections.values.shape().to_vec(),
            answers: inst.answers.clone(),
            choices: inst.choices.clone(),
            planted: inst.planted,
            offset,
            values: ((blob.len() - start) / 8) as u64,
            crc32: crc32fast::hash(&blob[start..]),
        };
        writeln!(
            manifest,
            "{}",
            serde_json::to_string(&record).expect("serializable")
        )?;
    }

    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(ANSWERS_FILE), dataset.answers.to_text())?;
    fs::write(dir.join(VOCAB_FILE), dataset.vocabulary.to_text())?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

/// Loads a dataset directory written by [`write_features`]. When `cfg` is
/// given every sample is checked against it. Any bad record fails the whole
/// load.
pub fn read_features(dir: &Path, cfg: Option<&ModelConfig>) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob_path = dir.join(BLOB_FILE);
    for p in [&manifest_path, &blob_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let answers = AnswerVocabulary::parse(&read_text(&dir.join(ANSWERS_FILE))?)?;
    let vocabulary = Vocabulary::parse(&read_text(&dir.join(VOCAB_FILE))?)?;
    let blob = fs::read(&blob_path)?;

    let mut lines = BufReader::new(fs::File::open(&manifest_path)?).lines();
    let header_line = lines.next().transpose()?.ok_or_else(|| Error::Format {
        record: 0,
        message: "manifest is empty".into(),
    })?;
    let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| Error::Format {
        record: 0,
        message: format!("bad manifest header: {e}"),
    })?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::Format {
            record: 0,
            message: format!("unsupported format {} v{}", header.format, header.version),
        });
    }

    let mut instances = Vec::with_capacity(header.records);
    for (index, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Format {
            record: index,
            message,
        };
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| fail(format!("bad record: {e}")))?;

        let image_len: usize = rec.image_shape.iter().product();
        let det_len: usize = rec.det_shape.iter().product();
        if (image_len + det_len) as u64 != rec.values {
            return Err(fail(format!(
                "shapes {:?} and {:?} need {} values, record says {}",
                rec.image_shape,
                rec.det_shape,
                image_len + det_len,
                rec.values
            )));
        }
        let needed = rec.values * 8;
        let end = rec
            .offset
            .checked_add(needed)
            .filter(|&e| e <= blob.len() as u64);
        let Some(end) = end else {
            return Err(Error::Truncated {
                record: index,
                offset: rec.offset,
                needed,
                available: blob.len() as u64,
            });
        };
        let bytes = &blob[rec.offset as usize..end as usize];
        let found = crc32fast::hash(bytes);
        if found != rec.crc32 {
            return Err(Error::Checksum {
                record: index,
                expected: rec.crc32,
                found,
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let (image_values, det_values) = values.split_at(image_len);

        let question_len = rec.tokens.len() + rec.pad_len;
        let question = TokenSequence::new(&rec.tokens, question_len, vocabulary.len())
            .map_err(|e| fail(e.to_string()))?;
        let image = Tensor::new(&rec.image_shape, image_values.to_vec())
            .and_then(ImageFeature::new)
            .map_err(|e| fail(e.to_string()))?;
        let detections = Tensor::new(&rec.det_shape, det_values.to_vec())
            .and_then(DetectionFeature::new)
            .map_err(|e| fail(e.to_string()))?;
        let inst = VqaInstance {
            question,
            image,
            detections,
            answers: rec.answers,
            choices: rec.choices,
            planted: rec.planted,
        };
        if let Some(cfg) = cfg {
            inst.check_shapes(cfg).map_err(|e| fail(e.to_string()))?;
        }
        if inst.answers.is_empty() {
            return Err(fail("no answers".into()));
        }
        instances.push(inst);
    }
    if instances.len() != header.records {
        return Err(Error::Format {
            record: instances.len(),
            message: format!(
                "header announces {} records, manifest has {}",
                header.records,
                instances.len()
            ),
        });
    }
    Ok(Dataset {
        instances,
        answers,
        vocabulary,
    })
}
