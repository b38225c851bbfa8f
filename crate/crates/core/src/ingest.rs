//! Line-oriented readers and writers for detection dumps, expressions,
//! ground-truth regions and GloVe-style embedding tables, plus vocabulary
//! construction.
//!
//! Detection dump:
//!
//! ```text
//! #refnms-dets v1 feature_dim=<D>
//! image_id<TAB>x1 y1 x2 y2<TAB>category_id<TAB>category_name<TAB>confidence<TAB>f1 ... fD
//! ```
//!
//! Expressions: `expression_id<TAB>image_id<TAB>split<TAB>x1 y1 x2 y2<TAB>tokens[<TAB>pos tags]`.
//! Regions: `region_id<TAB>image_id<TAB>x1 y1 x2 y2<TAB>category_name`.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const DUMP_MAGIC: &str = "#refnms-dets";
pub const DUMP_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub bbox: BBox,
    pub category_id: i64,
    pub category_name: String,
    pub confidence: f64,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetections {
    pub image_id: String,
    pub records: Vec<DetectionRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    TestA,
    TestB,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestA => "testA",
            Split::TestB => "testB",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "testA" => Ok(Split::TestA),
            "testB" => Ok(Split::TestB),
            "test" => Ok(Split::Test),
            other => Err(Error::Schema(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionRecord {
    pub expression_id: String,
    pub image_id: String,
    pub tokens: Vec<String>,
    pub pos_tags: Option<Vec<String>>,
    pub referent: BBox,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRegion {
    pub region_id: String,
    pub image_id: String,
    pub bbox: BBox,
    pub category_name: String,
}

/// Word vectors keyed by word; all vectors share one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> Self {
        EmbeddingTable {
            dimension,
            entries: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts or replaces a vector. Returns true when the word was already present.
    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<bool> {
        if vector.len() != self.dimension {
            return Err(Error::Schema(format!(
                "embedding of length {} in a {}-d table",
                vector.len(),
                self.dimension
            )));
        }
        Ok(self.entries.insert(word.into(), vector).is_some())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    /// Words in lexicographic order.
    pub fn words(&self) -> Vec<&str> {
        let mut w: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        w.sort_unstable();
        w
    }
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;
pub const MIN_WORD_COUNT: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    max_sentence_length: usize,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its word list (index order, including the
    /// reserved padding and unknown entries).
    pub fn from_words(words: Vec<String>, max_sentence_length: usize) -> Result<Self> {
        if words.len() < 2 || words[PAD_INDEX] != PAD_TOKEN || words[UNK_INDEX] != UNK_TOKEN {
            return Err(Error::Schema(
                "vocabulary must start with the padding and unknown entries".into(),
            ));
        }
        if max_sentence_length == 0 {
            return Err(Error::Config("max sentence length must be >= 1".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Vocabulary {
            words,
            index,
            max_sentence_length,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn max_sentence_length(&self) -> usize {
        self.max_sentence_length
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_INDEX)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }
}

/// Counts tokens over the training expressions and keeps words seen at least
/// twice, ordered by descending count then lexicographically.
pub fn build_vocabulary(train: &[ExpressionRecord], max_len: usize) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(Error::Empty("no training expressions for vocabulary".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for expr in train {
        for tok in &expr.tokens {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(w, c)| c >= MIN_WORD_COUNT && w != PAD_TOKEN && w != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut words = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    words.extend(kept.into_iter().map(|(w, _)| w.to_string()));
    Vocabulary::from_words(words, max_len)
}

/// Maps tokens to vocabulary indices, truncating to the sentence limit.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<Vec<usize>> {
    if tokens.is_empty() {
        return Err(Error::Empty("cannot encode an empty token list".into()));
    }
    Ok(tokens
        .iter()
        .take(vocab.max_sentence_length)
        .map(|t| vocab.lookup(t.as_ref()))
        .collect())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what} `{field}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("non-finite {what} `{field}`"),
        });
    }
    Ok(v)
}

fn parse_box(field: &str, line: usize) -> Result<BBox> {
    let coords: Vec<f64> = field
        .split_whitespace()
        .map(|f| parse_f64(f, line, "box coordinate"))
        .collect::<Result<_>>()?;
    if coords.len() != 4 {
        return Err(Error::Parse {
            line,
            msg: format!("expected 4 box coordinates, found {}", coords.len()),
        });
    }
    BBox::new(coords[0], coords[1], coords[2], coords[3]).map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })
}

fn non_empty<'a>(field: &'a str, line: usize, what: &str) -> Result<&'a str> {
    if field.is_empty() {
        Err(Error::Parse {
            line,
            msg: format!("empty {what}"),
        })
    } else {
        Ok(field)
    }
}

fn parse_dump_header(header: &str) -> Result<usize> {
    let mut parts = header.split_whitespace();
    let (magic, version, dim) = (parts.next(), parts.next(), parts.next());
    if magic != Some(DUMP_MAGIC) || parts.next().is_some() {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected `{DUMP_MAGIC} {DUMP_VERSION} feature_dim=<D>` header"),
        });
    }
    if version != Some(DUMP_VERSION) {
        return Err(Error::Schema(format!(
            "unsupported dump version {}",
            version.unwrap_or("<missing>")
        )));
    }
    dim.and_then(|d| d.strip_prefix("feature_dim="))
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing or invalid feature_dim".into(),
        })
}

/// Parses a detection dump. Returns the declared feature dimension and the
/// images in order of first appearance.
pub fn parse_detection_dump(text: &str) -> Result<(usize, Vec<ImageDetections>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let dim = parse_dump_header(header)?;

    let mut images: Vec<ImageDetections> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 6 tab-separated fields, found {}", fields.len()),
            });
        }
        let image_id = non_empty(fields[0], line, "image id")?;
        let bbox = parse_box(fields[1], line)?;
        let category_id: i64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad category id `{}`", fields[2]),
        })?;
        let category_name = non_empty(fields[3], line, "category name")?.to_string();
        let confidence = parse_f64(fields[4], line, "confidence")?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Range(format!(
                "line {line}: confidence {confidence} outside [0, 1]"
            )));
        }
        let feature: Vec<f64> = fields[5]
            .split_whitespace()
            .map(|f| parse_f64(f, line, "feature value"))
            .collect::<Result<_>>()?;
        if feature.len() != dim {
            return Err(Error::Schema(format!(
                "line {line}: feature of length {} but header declares {dim}",
                feature.len()
            )));
        }
        let idx = *slot.entry(image_id.to_string()).or_insert_with(|| {
            images.push(ImageDetections {
                image_id: image_id.to_string(),
                records: Vec::new(),
            });
            images.len() - 1
        });
        images[idx].records.push(DetectionRecord {
            bbox,
            category_id,
            category_name,
            confidence,
            feature,
        });
    }
    Ok((dim, images))
}

pub fn load_detection_dump(path: impl AsRef<Path>) -> Result<(usize, Vec<ImageDetections>)> {
    parse_detection_dump(&read_text(path.as_ref())?)
}

pub fn format_detection_dump(feature_dim: usize, images: &[ImageDetections]) -> Result<String> {
    let mut out = format!("{DUMP_MAGIC} {DUMP_VERSION} feature_dim={feature_dim}\n");
    for img in images {
        for rec in &img.records {
            if rec.feature.len() != feature_dim {
                return Err(Error::Schema(format!(
                    "image {}: feature of length {} in a {feature_dim}-d dump",
                    img.image_id,
                    rec.feature.len()
                )));
            }
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}\t{}\t",
                img.image_id, rec.bbox, rec.category_id, rec.category_name, rec.confidence
            );
            push_joined(&mut out, &rec.feature);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_detection_dump(path: impl AsRef<Path>, feature_dim: usize, images: &[ImageDetections]) -> Result<()> {
    write_text(path.as_ref(), &format_detection_dump(feature_dim, images)?)
}

fn push_joined(out: &mut String, values: &[f64]) {
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
}

pub fn parse_expressions(text: &str) -> Result<Vec<ExpressionRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if !(5..=6).contains(&fields.len()) {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 or 6 tab-separated fields, found {}", fields.len()),
            });
        }
        let split: Split = fields[2].parse().map_err(|e: Error| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let tokens: Vec<String> = fields[4].split_whitespace().map(str::to_lowercase).collect();
        if tokens.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "expression has no tokens".into(),
            });
        }
        let pos_tags = match fields.get(5) {
            Some(f) if !f.trim().is_empty() => {
                let tags: Vec<String> = f.split_whitespace().map(str::to_uppercase).collect();
                if tags.len() != tokens.len() {
                    return Err(Error::Schema(format!(
                        "line {line}: {} POS tags for {} tokens",
                        tags.len(),
                        tokens.len()
                    )));
                }
                Some(tags)
            }
            _ => None,
        };
        out.push(ExpressionRecord {
            expression_id: non_empty(fields[0], line, "expression id")?.to_string(),
            image_id: non_empty(fields[1], line, "image id")?.to_string(),
            tokens,
            pos_tags,
            referent: parse_box(fields[3], line)?,
            split,
        });
    }
    Ok(out)
}

pub fn load_expressions(path: impl AsRef<Path>) -> Result<Vec<ExpressionRecord>> {
    parse_expressions(&read_text(path.as_ref())?)
}

pub fn format_expressions(exprs: &[ExpressionRecord]) -> String {
    let mut out = String::new();
    for e in exprs {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            e.expression_id,
            e.image_id,
            e.split,
            e.referent,
            e.tokens.join(" ")
        );
        if let Some(tags) = &e.pos_tags {
            out.push('\t');
            out.push_str(&tags.join(" "));
        }
        out.push('\n');
    }
    out
}

pub fn write_expressions(path: impl AsRef<Path>, exprs: &[ExpressionRecord]) -> Result<()> {
    write_text(path.as_ref(), &format_expressions(exprs))
}

pub fn parse_regions(text: &str) -> Result<Vec<GroundTruthRegion>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push(GroundTruthRegion {
            region_id: non_empty(fields[0], line, "region id")?.to_string(),
            image_id: non_empty(fields[1], line, "image id")?.to_string(),
            bbox: parse_box(fields[2], line)?,
            category_name: non_empty(fields[3].trim(), line, "category name")?.to_string(),
        });
    }
    Ok(out)
}

pub fn load_regions(path: impl AsRef<Path>) -> Result<Vec<GroundTruthRegion>> {
    parse_regions(&read_text(path.as_ref())?)
}

pub fn format_regions(regions: &[GroundTruthRegion]) -> String {
    let mut out = String::new();
    for r in regions {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.region_id, r.image_id, r.bbox, r.category_name);
    }
    out
}

pub fn write_regions(path: impl AsRef<Path>, regions: &[GroundTruthRegion]) -> Result<()> {
    write_text(path.as_ref(), &format_regions(regions))
}

/// Parses GloVe text format. Duplicate words keep the last vector.
pub fn parse_embeddings(text: &str) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut parts = raw.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let vector: Vec<f64> = parts
            .map(|f| parse_f64(f, line, "embedding value"))
            .collect::<Result<_>>()?;
        let t = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
        if vector.is_empty() || vector.len() != t.dimension {
            return Err(Error::Schema(format!(
                "line {line}: embedding of length {} but table dimension is {}",
                vector.len(),
                t.dimension
            )));
        }
        if t.insert(word, vector)? {
            warn!("duplicate embedding for `{word}` at line {line}; keeping the last one");
        }
    }
    table.ok_or_else(|| Error::Empty("embedding file has no entries".into()))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    parse_embeddings(&read_text(path.as_ref())?)
}

pub fn format_embeddings(table: &EmbeddingTable) -> String {
    let mut out = String::new();
    for w in table.words() {
        out.push_str(w);
        out.push(' ');
        push_joined(&mut out, table.get(w).expect("listed word"));
        out.push('\n');
    }
    out
}

pub fn write_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    write_text(path.as_ref(), &format_embeddings(table))
}
