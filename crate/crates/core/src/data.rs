//! Corpus ingestion and the synthetic bilingual grounded-corpus generator.
//!
//! Visual features arrive as a little-endian binary file (magic `VFEAT001`,
//! float32 payload widened to f64 in memory); captions and sentence pairs as
//! UTF-8 TSV. All loaders report located errors instead of skipping bad
//! records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::Vocabulary;

pub const FEATURE_MAGIC: &[u8; 8] = b"VFEAT001";

#[derive(Clone, Debug, PartialEq)]
pub enum DataError {
    Io { path: String, message: String },
    /// Malformed text record.
    ParseLine { path: String, line: usize, message: String },
    /// Malformed binary record.
    ParseBytes { path: String, offset: usize, message: String },
    /// A validated contract was violated (counts, ranges, consistency).
    Contract { message: String },
    ScoreOutOfRange { path: String, line: usize, score: f64 },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, message } => write!(f, "{path}: {message}"),
            DataError::ParseLine { path, line, message } => {
                write!(f, "{path}:{line}: {message}")
            }
            DataError::ParseBytes { path, offset, message } => {
                write!(f, "{path}: byte {offset}: {message}")
            }
            DataError::Contract { message } => write!(f, "{message}"),
            DataError::ScoreOutOfRange { path, line, score } => {
                write!(f, "{path}:{line}: score {score} outside [0, 5]")
            }
        }
    }
}

impl std::error::Error for DataError {}

pub type DataResult<T> = Result<T, DataError>;

fn io_err(path: &Path, e: impl fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

// ── Corpus ───────────────────────────────────────────────────────────

/// Packed object features of one image: `rows` valid rows of width d_v.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub rows: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// In-memory corpus: image features plus tokenized captions per language and
/// the split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub d_v: usize,
    pub max_objects: usize,
    pub images: BTreeMap<String, ImageFeatures>,
    pub captions_a: BTreeMap<String, Vec<Vec<String>>>,
    pub captions_b: BTreeMap<String, Vec<Vec<String>>>,
    pub splits: Splits,
}

impl Corpus {
    /// Cross-field invariants: caption ids resolve, splits are disjoint and
    /// resolve, object counts respect the maximum.
    pub fn validate(&self) -> DataResult<()> {
        for (name, feats) in &self.images {
            if feats.rows * self.d_v != feats.data.len() {
                return Err(DataError::Contract {
                    message: format!("image {name}: feature payload does not match row count"),
                });
            }
            if feats.rows > self.max_objects {
                return Err(DataError::Contract {
                    message: format!(
                        "image {name}: {} objects exceed maximum {}",
                        feats.rows, self.max_objects
                    ),
                });
            }
        }
        for (lang, table) in [("a", &self.captions_a), ("b", &self.captions_b)] {
            for id in table.keys() {
                if !self.images.contains_key(id) {
                    return Err(DataError::Contract {
                        message: format!("captions_{lang}: unknown image id '{id}'"),
                    });
                }
            }
        }
        let mut seen = BTreeSet::new();
        for split in [&self.splits.train, &self.splits.val, &self.splits.test] {
            for id in split {
                if !self.images.contains_key(id) {
                    return Err(DataError::Contract {
                        message: format!("split references unknown image id '{id}'"),
                    });
                }
                if !seen.insert(id.clone()) {
                    return Err(DataError::Contract {
                        message: format!("image id '{id}' appears in more than one split"),
                    });
                }
                if self.captions_a.get(id).map_or(true, |c| c.is_empty())
                    || self.captions_b.get(id).map_or(true, |c| c.is_empty())
                {
                    return Err(DataError::Contract {
                        message: format!("image id '{id}' lacks captions in both languages"),
                    });
                }
            }
        }
        Ok(())
    }
}

// ── Visual feature codec ─────────────────────────────────────────────

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> DataResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::ParseBytes {
                path: self.path.clone(),
                offset: self.pos,
                message: format!("unexpected end of file reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> DataResult<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Write image features: header then one record per image in map order.
pub fn write_features(
    path: &Path,
    d_v: usize,
    max_objects: usize,
    images: &BTreeMap<String, ImageFeatures>,
) -> DataResult<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(d_v as u32).to_le_bytes());
    out.extend_from_slice(&(max_objects as u32).to_le_bytes());
    for (id, feats) in images {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(feats.rows as u32).to_le_bytes());
        for &v in &feats.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read image features. Payload floats are widened to f64.
pub fn load_features(path: &Path) -> DataResult<(usize, usize, BTreeMap<String, ImageFeatures>)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let magic = cur.take(8, "magic header")?;
    if magic != FEATURE_MAGIC {
        return Err(DataError::ParseBytes {
            path: cur.path,
            offset: 0,
            message: format!("bad magic {magic:?}, expected {FEATURE_MAGIC:?}"),
        });
    }
    let d_v = cur.u32("feature width")? as usize;
    let max_objects = cur.u32("object maximum")? as usize;
    if d_v == 0 || max_objects == 0 {
        return Err(DataError::ParseBytes {
            path: cur.path,
            offset: 8,
            message: "feature width and object maximum must be positive".into(),
        });
    }
    let mut images = BTreeMap::new();
    while !cur.done() {
        let record_at = cur.pos;
        let id_len = cur.u32("id length")? as usize;
        let id_bytes = cur.take(id_len, "image id")?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|e| DataError::ParseBytes {
                path: cur.path.clone(),
                offset: record_at,
                message: format!("image id is not UTF-8: {e}"),
            })?
            .to_string();
        let rows = cur.u32("object count")? as usize;
        if rows > max_objects {
            return Err(DataError::Contract {
                message: format!(
                    "image {id}: {rows} objects exceed declared maximum {max_objects}"
                ),
            });
        }
        let payload = cur.take(rows * d_v * 4, "feature payload")?;
        let mut data = Vec::with_capacity(rows * d_v);
        for chunk in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        if images.insert(id.clone(), ImageFeatures { rows, data }).is_some() {
            return Err(DataError::ParseBytes {
                path: cur.path.clone(),
                offset: record_at,
                message: format!("duplicate image id '{id}'"),
            });
        }
    }
    Ok((d_v, max_objects, images))
}

// ── Text loaders ─────────────────────────────────────────────────────

/// Lower-case, whitespace-tokenize, truncate.
pub fn tokenize(text: &str, max_len: usize) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .take(max_len)
        .map(str::to_string)
        .collect()
}

/// `image_id<TAB>caption` per line. Captions are tokenized on load; empty
/// captions and missing separators are rejected with their line number.
pub fn load_captions(
    path: &Path,
    max_len: usize,
) -> DataResult<BTreeMap<String, Vec<Vec<String>>>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut table: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, caption) = line.split_once('\t').ok_or_else(|| DataError::ParseLine {
            path: path.display().to_string(),
            line: lineno + 1,
            message: "missing image-id column (expected 'id<TAB>caption')".into(),
        })?;
        let tokens = tokenize(caption, max_len);
        if tokens.is_empty() {
            return Err(DataError::ParseLine {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "empty caption".into(),
            });
        }
        table.entry(id.to_string()).or_default().push(tokens);
    }
    Ok(table)
}

/// One image id per line.
pub fn load_split(path: &Path) -> DataResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Token frequencies over caption lists; kept tokens ordered by frequency
/// descending, ties lexicographic. Reserved indices are prepended.
pub fn build_vocab<'a>(
    captions: impl IntoIterator<Item = &'a Vec<String>>,
    min_count: usize,
) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for caption in captions {
        for token in caption {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
}

/// One sentence pair with a gold similarity in [0, 5].
#[derive(Clone, Debug, PartialEq)]
pub struct StsPair {
    pub tokens_a: Vec<String>,
    pub tokens_b: Vec<String>,
    pub gold: f64,
}

/// `sent_a<TAB>sent_b<TAB>score` per line.
pub fn load_sts(path: &Path, max_len: usize) -> DataResult<Vec<StsPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (a, b, score) = match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), Some(s)) => (a, b, s),
            _ => {
                return Err(DataError::ParseLine {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: "expected 'sent_a<TAB>sent_b<TAB>score'".into(),
                })
            }
        };
        let gold: f64 = score.trim().parse().map_err(|e| DataError::ParseLine {
            path: path.display().to_string(),
            line: lineno + 1,
            message: format!("bad score '{score}': {e}"),
        })?;
        if !(0.0..=5.0).contains(&gold) {
            return Err(DataError::ScoreOutOfRange {
                path: path.display().to_string(),
                line: lineno + 1,
                score: gold,
            });
        }
        pairs.push(StsPair {
            tokens_a: tokenize(a, max_len),
            tokens_b: tokenize(b, max_len),
            gold,
        });
    }
    Ok(pairs)
}

/// Assemble a corpus from its on-disk parts and validate it.
pub fn load_corpus(
    features: &Path,
    captions_a: &Path,
    captions_b: &Path,
    split_train: &Path,
    split_val: &Path,
    split_test: &Path,
    max_len: usize,
) -> DataResult<Corpus> {
    let (d_v, max_objects, images) = load_features(features)?;
    let corpus = Corpus {
        d_v,
        max_objects,
        images,
        captions_a: load_captions(captions_a, max_len)?,
        captions_b: load_captions(captions_b, max_len)?,
        splits: Splits {
            train: load_split(split_train)?,
            val: load_split(split_val)?,
            test: load_split(split_test)?,
        },
    };
    corpus.validate()?;
    Ok(corpus)
}

// ── Synthetic corpus ─────────────────────────────────────────────────

/// Settings for the synthetic bilingual grounded corpus. Deterministic for a
/// fixed seed. `noise` drives both the Gaussian feature noise and the
/// per-caption concept dropout probability; at 0 every caption lists all of
/// its image's concepts and features are exact prototypes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_concepts: usize,
    pub n_images: usize,
    pub objects_per_image: usize,
    pub vocab_per_language: usize,
    pub captions_per_image: usize,
    pub noise: f64,
    pub d_v: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_concepts: 40,
            n_images: 500,
            objects_per_image: 3,
            vocab_per_language: 60,
            captions_per_image: 2,
            noise: 0.0,
            d_v: 64,
            seed: 7,
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; the loop guards against log(0).
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 1e-12 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

fn combination_count(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let mut c: u128 = 1;
    for i in 0..k {
        c = c.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    c
}

/// Generate a corpus of images built from concept prototypes, described in
/// two disjoint-vocabulary languages. Concept sets are unique per image, so
/// a caption listing all concepts identifies its image exactly at zero
/// noise. Splits are 80/10/10.
pub fn generate_synthetic(spec: &SyntheticSpec) -> DataResult<Corpus> {
    if spec.vocab_per_language < spec.n_concepts {
        return Err(DataError::Contract {
            message: format!(
                "vocab_per_language {} is too small for {} concepts",
                spec.vocab_per_language, spec.n_concepts
            ),
        });
    }
    if spec.objects_per_image == 0 || spec.n_images == 0 || spec.captions_per_image == 0 {
        return Err(DataError::Contract {
            message: "objects_per_image, n_images and captions_per_image must be positive".into(),
        });
    }
    if combination_count(spec.n_concepts, spec.objects_per_image) < spec.n_images as u128 {
        return Err(DataError::Contract {
            message: format!(
                "cannot draw {} distinct concept sets of size {} from {} concepts",
                spec.n_images, spec.objects_per_image, spec.n_concepts
            ),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Unit-norm concept prototypes.
    let mut prototypes = Vec::with_capacity(spec.n_concepts);
    for _ in 0..spec.n_concepts {
        let mut v: Vec<f64> = (0..spec.d_v).map(|_| gaussian(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        prototypes.push(v);
    }

    // Distinct concept sets, one per image.
    let mut used: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut image_concepts = Vec::with_capacity(spec.n_images);
    let mut pool: Vec<usize> = (0..spec.n_concepts).collect();
    while image_concepts.len() < spec.n_images {
        pool.shuffle(&mut rng);
        let mut combo: Vec<usize> = pool[..spec.objects_per_image].to_vec();
        combo.sort_unstable();
        if used.insert(combo.clone()) {
            image_concepts.push(combo);
        }
    }

    let n_fillers = spec.vocab_per_language - spec.n_concepts;
    let drop_p = spec.noise.clamp(0.0, 0.9);
    let id_width = spec.n_images.to_string().len().max(4);

    let mut images = BTreeMap::new();
    let mut captions_a: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    let mut captions_b: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    let mut ids = Vec::with_capacity(spec.n_images);

    for (i, concepts) in image_concepts.iter().enumerate() {
        let id = format!("img{:0width$}", i, width = id_width);
        let mut data = Vec::with_capacity(spec.objects_per_image * spec.d_v);
        for &c in concepts {
            for j in 0..spec.d_v {
                // Round through f32 so the on-disk codec is value-exact.
                let v = prototypes[c][j] + spec.noise * gaussian(&mut rng);
                data.push((v as f32) as f64);
            }
        }
        images.insert(
            id.clone(),
            ImageFeatures {
                rows: spec.objects_per_image,
                data,
            },
        );

        for (lang, table) in [("a", &mut captions_a), ("b", &mut captions_b)] {
            let mut caps = Vec::with_capacity(spec.captions_per_image);
            for _ in 0..spec.captions_per_image {
                let mut tokens: Vec<String> = concepts
                    .iter()
                    .filter(|_| drop_p == 0.0 || rng.gen::<f64>() >= drop_p)
                    .map(|c| format!("{lang}{c}"))
                    .collect();
                if tokens.is_empty() {
                    tokens.push(format!("{lang}{}", concepts[0]));
                }
                if n_fillers > 0 {
                    for _ in 0..rng.gen_range(1..=2) {
                        let f = rng.gen_range(0..n_fillers);
                        let at = rng.gen_range(0..=tokens.len());
                        tokens.insert(at, format!("f{lang}{f}"));
                    }
                }
                tokens.shuffle(&mut rng);
                caps.push(tokens);
            }
            table.insert(id.clone(), caps);
        }
        ids.push(id);
    }

    // 80/10/10 split over a shuffled id order.
    let mut order = ids.clone();
    order.shuffle(&mut rng);
    let n_train = (spec.n_images * 8) / 10;
    let n_val = (spec.n_images - n_train) / 2;
    let mut splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    let corpus = Corpus {
        d_v: spec.d_v,
        max_objects: spec.objects_per_image.max(1),
        images,
        captions_a,
        captions_b,
        splits,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Write a corpus to a directory as the standard file set.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> DataResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_features(
        &dir.join("features.bin"),
        corpus.d_v,
        corpus.max_objects,
        &corpus.images,
    )?;
    for (name, table) in [("captions_a.tsv", &corpus.captions_a), ("captions_b.tsv", &corpus.captions_b)] {
        let mut out = String::new();
        for (id, caps) in table {
            for cap in caps {
                out.push_str(id);
                out.push('\t');
                out.push_str(&cap.join(" "));
                out.push('\n');
            }
        }
        let path = dir.join(name);
        std::fs::write(&path, out).map_err(|e| io_err(&path, e))?;
    }
    for (name, ids) in [
        ("train.txt", &corpus.splits.train),
        ("val.txt", &corpus.splits.val),
        ("test.txt", &corpus.splits.test),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, ids.join("\n") + "\n").map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

// ── Batches ──────────────────────────────────────────────────────────

/// Aligned batch of visual features and per-language token id sequences,
/// padded to the within-batch maxima with validity masks.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleBatch {
    pub image_ids: Vec<String>,
    pub d_v: usize,
    /// Per instance: object rows padded to the batch maximum, row-major.
    pub objects: Vec<Vec<f64>>,
    pub obj_mask: Vec<Vec<bool>>,
    pub tokens_a: Vec<Vec<u32>>,
    pub mask_a: Vec<Vec<bool>>,
    pub tokens_b: Vec<Vec<u32>>,
    pub mask_b: Vec<Vec<bool>>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// Assemble a batch for the given image ids, drawing one caption per
    /// language uniformly among each image's captions.
    pub fn build(
        corpus: &Corpus,
        ids: &[String],
        vocab_a: &Vocabulary,
        vocab_b: &Vocabulary,
        rng: &mut impl Rng,
    ) -> DataResult<TripleBatch> {
        let mut object_rows = Vec::with_capacity(ids.len());
        let mut caps_a = Vec::with_capacity(ids.len());
        let mut caps_b = Vec::with_capacity(ids.len());
        for id in ids {
            let feats = corpus.images.get(id).ok_or_else(|| DataError::Contract {
                message: format!("batch references unknown image id '{id}'"),
            })?;
            let pick = |table: &BTreeMap<String, Vec<Vec<String>>>,
                        vocab: &Vocabulary,
                        rng: &mut dyn rand::RngCore|
             -> DataResult<Vec<u32>> {
                let caps = table.get(id).ok_or_else(|| DataError::Contract {
                    message: format!("image '{id}' has no captions"),
                })?;
                let cap = &caps[rng.gen_range(0..caps.len())];
                Ok(vocab.encode_seq(cap))
            };
            caps_a.push(pick(&corpus.captions_a, vocab_a, rng)?);
            caps_b.push(pick(&corpus.captions_b, vocab_b, rng)?);
            object_rows.push(feats);
        }

        let max_m = object_rows.iter().map(|f| f.rows).max().unwrap_or(1).max(1);
        let max_a = caps_a.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let max_b = caps_b.iter().map(Vec::len).max().unwrap_or(1).max(1);

        let mut objects = Vec::with_capacity(ids.len());
        let mut obj_mask = Vec::with_capacity(ids.len());
        for feats in &object_rows {
            let mut data = feats.data.clone();
            data.resize(max_m * corpus.d_v, 0.0);
            objects.push(data);
            let mut mask = vec![true; feats.rows];
            mask.resize(max_m, false);
            obj_mask.push(mask);
        }
        let pad = |seqs: Vec<Vec<u32>>, width: usize| -> (Vec<Vec<u32>>, Vec<Vec<bool>>) {
            let mut toks = Vec::with_capacity(seqs.len());
            let mut masks = Vec::with_capacity(seqs.len());
            for mut s in seqs {
                let mut mask = vec![true; s.len()];
                s.resize(width, Vocabulary::PAD);
                mask.resize(width, false);
                toks.push(s);
                masks.push(mask);
            }
            (toks, masks)
        };
        let (tokens_a, mask_a) = pad(caps_a, max_a);
        let (tokens_b, mask_b) = pad(caps_b, max_b);

        Ok(TripleBatch {
            image_ids: ids.to_vec(),
            d_v: corpus.d_v,
            objects,
            obj_mask,
            tokens_a,
            mask_a,
            tokens_b,
            mask_b,
        })
    }
}
