//! Sequence annotations on disk and the seeded samplers that build SFT and RL
//! training records from them.
//!
//! Each sequence lives in its own directory, named by its id:
//!
//! | file              | content                                                    |
//! |-------------------|------------------------------------------------------------|
//! | `groundtruth.txt` | one `x,y,w,h` line per frame                               |
//! | `absent.txt`      | one `0` or `1` per frame                                   |
//! | `language.txt`    | a single UTF-8 sentence on one line                        |
//! | `attributes.txt`  | one line of 15 comma-separated `0`/`1` flags (see [`Attribute`]) |
//!
//! Every line ends in `\n`. Numbers are written in shortest round-trip form, so
//! `save_sequence(load_sequence(dir))` reproduces canonical files byte for byte.
//! Other files in the directory (audio, images) are ignored.

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::geometry::BoundingBox;
use crate::response_format::{parse, FormatLevel};

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
pub const ABSENT_FILE: &str = "absent.txt";
pub const LANGUAGE_FILE: &str = "language.txt";
pub const ATTRIBUTES_FILE: &str = "attributes.txt";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: expected {expected} entries, found {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{0}: sequence has no frames")]
    Empty(PathBuf),
    #[error("requested {requested} pairs but only {available} eligible pairs exist (short by {})", requested - available)]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-sequence challenge attributes, in file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    /// Camera motion
    CM,
    /// Rotation of target
    ROT,
    /// Deformation
    DEF,
    /// Fully occluded
    FOC,
    /// Illumination variation
    IV,
    /// Out of view
    OV,
    /// Partially occluded
    POC,
    /// Viewpoint change
    VC,
    /// Scale variation
    SV,
    /// Background clutter
    BC,
    /// Motion blur
    MB,
    /// Aspect ratio change
    ARC,
    /// Low resolution
    LR,
    /// Fast motion
    FM,
    /// Adversarial sample
    AS,
}

impl Attribute {
    pub const COUNT: usize = 15;
    pub const ALL: [Attribute; Self::COUNT] = [
        Attribute::CM,
        Attribute::ROT,
        Attribute::DEF,
        Attribute::FOC,
        Attribute::IV,
        Attribute::OV,
        Attribute::POC,
        Attribute::VC,
        Attribute::SV,
        Attribute::BC,
        Attribute::MB,
        Attribute::ARC,
        Attribute::LR,
        Attribute::FM,
        Attribute::AS,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Attribute::CM => "CM",
            Attribute::ROT => "ROT",
            Attribute::DEF => "DEF",
            Attribute::FOC => "FOC",
            Attribute::IV => "IV",
            Attribute::OV => "OV",
            Attribute::POC => "POC",
            Attribute::VC => "VC",
            Attribute::SV => "SV",
            Attribute::BC => "BC",
            Attribute::MB => "MB",
            Attribute::ARC => "ARC",
            Attribute::LR => "LR",
            Attribute::FM => "FM",
            Attribute::AS => "AS",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttributeFlags(pub [bool; Attribute::COUNT]);

impl AttributeFlags {
    pub fn has(&self, a: Attribute) -> bool {
        self.0[a.index()]
    }

    pub fn set(&mut self, a: Attribute, on: bool) {
        self.0[a.index()] = on;
    }

    pub fn with(mut self, a: Attribute) -> Self {
        self.set(a, true);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceAnnotation {
    pub sequence_id: String,
    pub gt_boxes: Vec<BoundingBox>,
    pub absent: Vec<bool>,
    pub language: String,
    pub attributes: AttributeFlags,
}

impl SequenceAnnotation {
    pub fn frame_count(&self) -> usize {
        self.gt_boxes.len()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let path = PathBuf::from(&self.sequence_id);
        if self.gt_boxes.is_empty() {
            return Err(DatasetError::Empty(path));
        }
        if self.absent.len() != self.gt_boxes.len() {
            return Err(DatasetError::LengthMismatch {
                path: path.join(ABSENT_FILE),
                expected: self.gt_boxes.len(),
                found: self.absent.len(),
            });
        }
        for (i, b) in self.gt_boxes.iter().enumerate() {
            b.validate().map_err(|e| DatasetError::Malformed {
                path: path.join(GROUNDTRUTH_FILE),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        if self.language.trim().is_empty() {
            return Err(DatasetError::Malformed {
                path: path.join(LANGUAGE_FILE),
                line: 1,
                message: "empty language".into(),
            });
        }
        if self.language.contains('\n') {
            return Err(DatasetError::Malformed {
                path: path.join(LANGUAGE_FILE),
                line: 1,
                message: "language spans several lines".into(),
            });
        }
        Ok(())
    }

    /// True when frame `index` (0-based) shows the target.
    pub fn is_visible(&self, index: usize) -> bool {
        !self.absent[index]
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        lines.push(line.strip_suffix('\r').map(str::to_owned).unwrap_or(line));
    }
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

/// Parses one `x,y,w,h` line without validating the box.
pub fn parse_box_line(line: &str) -> Result<BoundingBox, String> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!(
            "expected 4 comma-separated values, found {}",
            parts.len()
        ));
    }
    let mut v = [0.0; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .parse::<f64>()
            .map_err(|e| format!("bad number {p:?}: {e}"))?;
    }
    Ok(BoundingBox::from(v))
}

/// Reads a box-per-line file. With `validate`, every box must satisfy the
/// geometry invariants; tracker outputs are read unvalidated.
pub fn read_box_file(path: &Path, validate: bool) -> Result<Vec<BoundingBox>, DatasetError> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let b = parse_box_line(line).map_err(|message| DatasetError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            })?;
            if validate {
                b.validate().map_err(|e| DatasetError::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            }
            Ok(b)
        })
        .collect()
}

pub fn write_box_file(path: &Path, boxes: &[BoundingBox]) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for b in boxes {
        writeln!(w, "{b}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn parse_flag(path: &Path, line: usize, s: &str) -> Result<bool, DatasetError> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(DatasetError::Malformed {
            path: path.to_path_buf(),
            line,
            message: format!("expected 0 or 1, found {other:?}"),
        }),
    }
}

pub fn load_sequence(dir: &Path) -> Result<SequenceAnnotation, DatasetError> {
    let sequence_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());

    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let gt_boxes = read_box_file(&gt_path, true)?;
    if gt_boxes.is_empty() {
        return Err(DatasetError::Empty(gt_path));
    }

    let absent_path = dir.join(ABSENT_FILE);
    let absent = read_lines(&absent_path)?
        .iter()
        .enumerate()
        .map(|(i, l)| parse_flag(&absent_path, i + 1, l))
        .collect::<Result<Vec<_>, _>>()?;
    if absent.len() != gt_boxes.len() {
        return Err(DatasetError::LengthMismatch {
            path: absent_path,
            expected: gt_boxes.len(),
            found: absent.len(),
        });
    }

    let lang_path = dir.join(LANGUAGE_FILE);
    let lang_lines = read_lines(&lang_path)?;
    if lang_lines.len() != 1 {
        return Err(DatasetError::LengthMismatch {
            path: lang_path,
            expected: 1,
            found: lang_lines.len(),
        });
    }
    let language = lang_lines.into_iter().next().unwrap_or_default();

    let attr_path = dir.join(ATTRIBUTES_FILE);
    let attr_lines = read_lines(&attr_path)?;
    if attr_lines.len() != 1 {
        return Err(DatasetError::LengthMismatch {
            path: attr_path,
            expected: 1,
            found: attr_lines.len(),
        });
    }
    let flags: Vec<&str> = attr_lines[0].split(',').collect();
    if flags.len() != Attribute::COUNT {
        return Err(DatasetError::LengthMismatch {
            path: attr_path,
            expected: Attribute::COUNT,
            found: flags.len(),
        });
    }
    let mut attributes = AttributeFlags::default();
    for (slot, f) in attributes.0.iter_mut().zip(&flags) {
        *slot = parse_flag(&attr_path, 1, f)?;
    }

    Ok(SequenceAnnotation {
        sequence_id,
        gt_boxes,
        absent,
        language,
        attributes,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Writes the four annotation files into `dir`, creating it if needed.
pub fn save_sequence(ann: &SequenceAnnotation, dir: &Path) -> Result<(), DatasetError> {
    ann.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_box_file(&dir.join(GROUNDTRUTH_FILE), &ann.gt_boxes)?;
    let absent: String = ann
        .absent
        .iter()
        .map(|a| if *a { "1\n" } else { "0\n" })
        .collect();
    write_text(&dir.join(ABSENT_FILE), &absent)?;
    write_text(&dir.join(LANGUAGE_FILE), &format!("{}\n", ann.language))?;
    let flags: Vec<&str> = ann
        .attributes
        .0
        .iter()
        .map(|f| if *f { "1" } else { "0" })
        .collect();
    write_text(
        &dir.join(ATTRIBUTES_FILE),
        &format!("{}\n", flags.join(",")),
    )
}

/// True when `dir` holds a sequence rather than a corpus of sequences.
pub fn is_sequence_dir(dir: &Path) -> bool {
    dir.join(GROUNDTRUTH_FILE).is_file()
}

/// Loads every sequence directory under `root`, sorted by id.
pub fn load_corpus(
    root: &Path,
    execution: Execution,
) -> Result<Vec<SequenceAnnotation>, DatasetError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.is_dir() && is_sequence_dir(&path) {
            dirs.push(path);
        }
    }
    dirs.sort();
    exec::map(&dirs, execution, |d| load_sequence(d))
        .into_iter()
        .collect()
}

pub fn save_corpus(root: &Path, sequences: &[SequenceAnnotation]) -> Result<(), DatasetError> {
    for s in sequences {
        save_sequence(s, &root.join(&s.sequence_id))?;
    }
    Ok(())
}

/// Image path for a 0-based frame index: `<root>/<sequence_id>/img/<index+1:08>.jpg`.
pub fn frame_image_path(root: &Path, sequence_id: &str, index: usize) -> String {
    root.join(sequence_id)
        .join("img")
        .join(format!("{:08}.jpg", index + 1))
        .display()
        .to_string()
}

/// A sampled (template, search) pair; frame indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePair {
    pub sequence: usize,
    pub template: usize,
    pub search: usize,
}

fn triangular(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Maps `p` in `0..triangular(k)` to `(i, j)` with `i <= j < k`.
fn decode_pair(p: usize) -> (usize, usize) {
    let mut j = (((8.0 * p as f64 + 1.0).sqrt() - 1.0) / 2.0) as usize;
    while triangular(j) > p {
        j -= 1;
    }
    while triangular(j + 1) <= p {
        j += 1;
    }
    (p - triangular(j), j)
}

/// Draws `count` distinct ordered pairs (template index <= search index)
/// uniformly over every eligible pair in the corpus.
pub fn sample_pairs<F>(
    sequences: &[SequenceAnnotation],
    count: usize,
    seed: u64,
    eligible: F,
) -> Result<Vec<FramePair>, DatasetError>
where
    F: Fn(&SequenceAnnotation, usize) -> bool,
{
    let frames: Vec<Vec<usize>> = sequences
        .iter()
        .map(|s| (0..s.frame_count()).filter(|&i| eligible(s, i)).collect())
        .collect();
    let mut offsets = Vec::with_capacity(frames.len() + 1);
    let mut total = 0usize;
    offsets.push(0);
    for f in &frames {
        total += triangular(f.len());
        offsets.push(total);
    }
    if count > total {
        return Err(DatasetError::NotEnoughSamples {
            requested: count,
            available: total,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, count);
    Ok(picks
        .into_iter()
        .map(|flat| {
            let sequence = offsets.partition_point(|&o| o <= flat) - 1;
            let (i, j) = decode_pair(flat - offsets[sequence]);
            FramePair {
                sequence,
                template: frames[sequence][i],
                search: frames[sequence][j],
            }
        })
        .collect())
}

/// Template/search pair awaiting reasoning text from a teacher model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub sequence_id: String,
    pub template_frame: usize,
    pub search_frame: usize,
    pub template_image: String,
    pub search_image: String,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub search_image: String,
    pub template_image: String,
    pub language: String,
    pub reasoning: String,
}

impl SftRecord {
    /// Attaches the teacher's tagged reply; it must at least carry all three tags.
    pub fn from_sample(sample: &SftSample, reasoning: String) -> Result<Self, DatasetError> {
        let record = Self {
            search_image: sample.search_image.clone(),
            template_image: sample.template_image.clone(),
            language: sample.language.clone(),
            reasoning,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if parse(&self.reasoning).level < FormatLevel::TagsPresent {
            return Err(DatasetError::InvalidRecord(
                "reasoning lacks the <think>/<d>/<answer> tags".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlRecord {
    pub sequence_id: String,
    pub template_frame: usize,
    pub search_frame: usize,
    pub search_image: String,
    pub template_image: String,
    pub language: String,
    pub box_template: BoundingBox,
    pub box_search: BoundingBox,
}

impl RlRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for b in [&self.box_template, &self.box_search] {
            if !b.is_valid() || !b.has_positive_area() {
                return Err(DatasetError::InvalidRecord(format!(
                    "box [{b}] must be valid with positive area"
                )));
            }
        }
        Ok(())
    }
}

pub fn build_sft_samples(
    sequences: &[SequenceAnnotation],
    count: usize,
    seed: u64,
    image_root: &Path,
) -> Result<Vec<SftSample>, DatasetError> {
    let pairs = sample_pairs(sequences, count, seed, |s, i| s.is_visible(i))?;
    Ok(pairs
        .into_iter()
        .map(|p| {
            let s = &sequences[p.sequence];
            SftSample {
                sequence_id: s.sequence_id.clone(),
                template_frame: p.template,
                search_frame: p.search,
                template_image: frame_image_path(image_root, &s.sequence_id, p.template),
                search_image: frame_image_path(image_root, &s.sequence_id, p.search),
                language: s.language.clone(),
            }
        })
        .collect())
}

/// Like [`build_sft_samples`], but frames must also carry a positive-area box,
/// which is copied into the record.
pub fn build_rl_samples(
    sequences: &[SequenceAnnotation],
    count: usize,
    seed: u64,
    image_root: &Path,
) -> Result<Vec<RlRecord>, DatasetError> {
    let pairs = sample_pairs(sequences, count, seed, |s, i| {
        s.is_visible(i) && s.gt_boxes[i].has_positive_area()
    })?;
    Ok(pairs
        .into_iter()
        .map(|p| {
            let s = &sequences[p.sequence];
            RlRecord {
                sequence_id: s.sequence_id.clone(),
                template_frame: p.template,
                search_frame: p.search,
                search_image: frame_image_path(image_root, &s.sequence_id, p.search),
                template_image: frame_image_path(image_root, &s.sequence_id, p.template),
                language: s.language.clone(),
                box_template: s.gt_boxes[p.template],
                box_search: s.gt_boxes[p.search],
            }
        })
        .collect())
}

pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, records: &[T]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
