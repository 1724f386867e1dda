//! Retrieval and similarity evaluation over a frozen model.
//!
//! Retrieval runs in four directions (each language to image and back) with
//! cosine similarity over concatenated head outputs. Sentence queries score
//! against every image; image queries succeed when any of the image's
//! captions ranks inside the cutoff. Ties break by target index, so reports
//! are deterministic.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use crate::data::{Corpus, StsPair};
use crate::encoders::Vocabulary;
use crate::model::{
    encode_images, encode_sentences, EncodedValues, Lang, ModelError, ModelParams,
};
use crate::tensor::cosine_slices;

#[derive(Clone, Debug, PartialEq)]
pub enum EvalError {
    /// A retrieval query has no gold target.
    EmptyGold { query: usize },
    /// Pearson correlation is undefined for constant inputs.
    ZeroVariance,
    /// Pearson correlation needs at least two pairs.
    TooFewPairs { got: usize },
    /// Diversity diagnostics need at least two heads.
    SingleHead,
    /// Query/gold bookkeeping mismatch.
    GoldLength { queries: usize, gold: usize },
    Model(String),
    UnknownSplit { name: String },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyGold { query } => write!(f, "query {query} has no gold target"),
            EvalError::ZeroVariance => {
                write!(f, "correlation undefined: zero variance in predictions or gold")
            }
            EvalError::TooFewPairs { got } => {
                write!(f, "correlation needs at least 2 pairs, got {got}")
            }
            EvalError::SingleHead => write!(f, "diversity report needs at least 2 heads"),
            EvalError::GoldLength { queries, gold } => {
                write!(f, "{queries} queries but {gold} gold sets")
            }
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::UnknownSplit { name } => write!(f, "unknown split '{name}'"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e.to_string())
    }
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Retrieval direction; `A`/`B` are the two languages, `I` the image stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AToImage,
    ImageToA,
    BToImage,
    ImageToB,
}

impl Direction {
    pub fn label(&self) -> &'static str {
        match self {
            Direction::AToImage => "a2i",
            Direction::ImageToA => "i2a",
            Direction::BToImage => "b2i",
            Direction::ImageToB => "i2b",
        }
    }

    pub const ALL: [Direction; 4] = [
        Direction::AToImage,
        Direction::ImageToA,
        Direction::BToImage,
        Direction::ImageToB,
    ];
}

/// Recall percentages at the requested cutoffs, plus the median rank.
#[derive(Clone, Debug)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub ks: Vec<usize>,
    /// Percentages aligned with `ks`.
    pub recall: Vec<f64>,
    pub median_rank: f64,
    pub n_queries: usize,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn csv_row(&self) -> String {
        let recalls: Vec<String> = self
            .ks
            .iter()
            .zip(&self.recall)
            .map(|(k, r)| format!("{k},{r}"))
            .collect();
        format!(
            "{},{},{}",
            self.label_string(),
            recalls.join(","),
            self.median_rank
        )
    }

    fn label_string(&self) -> &'static str {
        self.direction.label()
    }
}

/// Per-query rank of the best-ranked gold target (1-based). Targets are
/// ordered by similarity descending, ties by index ascending.
fn gold_ranks(
    queries: &[Vec<f64>],
    targets: &[Vec<f64>],
    gold: &[Vec<usize>],
    threads: usize,
) -> EvalResult<Vec<usize>> {
    if queries.len() != gold.len() {
        return Err(EvalError::GoldLength {
            queries: queries.len(),
            gold: gold.len(),
        });
    }
    for (qi, g) in gold.iter().enumerate() {
        if g.is_empty() {
            return Err(EvalError::EmptyGold { query: qi });
        }
    }

    let rank_one = |qi: usize| -> usize {
        let sims: Vec<f64> = targets
            .iter()
            .map(|t| cosine_slices(&queries[qi], t))
            .collect();
        // Best gold rank without a full sort: a gold target t sits at rank
        // 1 + |better| where better = higher similarity, or equal similarity
        // at a lower index.
        let mut best = usize::MAX;
        for &t in &gold[qi] {
            let st = sims[t];
            let mut ahead = 0usize;
            for (j, &sj) in sims.iter().enumerate() {
                if sj > st || (sj == st && j < t) {
                    ahead += 1;
                }
            }
            best = best.min(ahead + 1);
        }
        best
    };

    let n = queries.len();
    if threads <= 1 || n < 2 {
        return Ok((0..n).map(rank_one).collect());
    }
    let threads = threads.min(n);
    let chunk = n.div_ceil(threads);
    let mut out = vec![0usize; n];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (ci, slot) in out.chunks_mut(chunk).enumerate() {
            let start = ci * chunk;
            handles.push(scope.spawn(move || {
                for (off, s) in slot.iter_mut().enumerate() {
                    *s = rank_one(start + off);
                }
            }));
        }
        for h in handles {
            h.join().expect("evaluation shard panicked");
        }
    });
    Ok(out)
}

fn median(ranks: &[usize]) -> f64 {
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Rank every query against the target set and report recall at each cutoff
/// plus the median gold rank.
pub fn rank_retrieval(
    direction: Direction,
    queries: &[Vec<f64>],
    targets: &[Vec<f64>],
    gold: &[Vec<usize>],
    ks: &[usize],
    threads: usize,
) -> EvalResult<RetrievalReport> {
    let ranks = gold_ranks(queries, targets, gold, threads)?;
    let n = ranks.len().max(1);
    let recall = ks
        .iter()
        .map(|&k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64)
        .collect();
    Ok(RetrievalReport {
        direction,
        ks: ks.to_vec(),
        recall,
        median_rank: median(&ranks),
        n_queries: ranks.len(),
    })
}

// ── Split-level encoding ─────────────────────────────────────────────

/// A fully encoded evaluation split: every image once, every caption of
/// both languages once, with back-references from captions to images.
pub struct EncodedSplit {
    pub images: Vec<EncodedValues>,
    pub captions_a: Vec<EncodedValues>,
    pub captions_b: Vec<EncodedValues>,
    /// For each caption (per language), the index of its image in `images`.
    pub caption_image_a: Vec<usize>,
    pub caption_image_b: Vec<usize>,
}

/// Encode all instances of a named split.
pub fn encode_split(
    params: &ModelParams,
    corpus: &Corpus,
    split: &str,
    vocab_a: &Vocabulary,
    vocab_b: &Vocabulary,
    max_objects: usize,
) -> EvalResult<EncodedSplit> {
    let ids = corpus
        .splits
        .get(split)
        .ok_or_else(|| EvalError::UnknownSplit { name: split.into() })?;
    encode_ids(params, corpus, ids, vocab_a, vocab_b, max_objects)
}

/// Encode an explicit id list (used for train-split subsets as well).
pub fn encode_ids(
    params: &ModelParams,
    corpus: &Corpus,
    ids: &[String],
    vocab_a: &Vocabulary,
    vocab_b: &Vocabulary,
    max_objects: usize,
) -> EvalResult<EncodedSplit> {
    let image_items: Vec<(String, &crate::data::ImageFeatures)> = ids
        .iter()
        .map(|id| (id.clone(), &corpus.images[id]))
        .collect();
    let images = encode_images(params, &image_items, corpus.d_v, max_objects)?;

    let mut sent_items_a = Vec::new();
    let mut caption_image_a = Vec::new();
    let mut sent_items_b = Vec::new();
    let mut caption_image_b = Vec::new();
    for (img_idx, id) in ids.iter().enumerate() {
        for (lang, table, items, backrefs) in [
            ("a", &corpus.captions_a, &mut sent_items_a, &mut caption_image_a),
            ("b", &corpus.captions_b, &mut sent_items_b, &mut caption_image_b),
        ] {
            let vocab = if lang == "a" { vocab_a } else { vocab_b };
            for (ci, cap) in table[id].iter().enumerate() {
                items.push((format!("{id}#{ci}"), vocab.encode_seq(cap)));
                backrefs.push(img_idx);
            }
        }
    }
    let captions_a = encode_sentences(params, &sent_items_a, Lang::A)?;
    let captions_b = encode_sentences(params, &sent_items_b, Lang::B)?;
    Ok(EncodedSplit {
        images,
        captions_a,
        captions_b,
        caption_image_a,
        caption_image_b,
    })
}

/// The four retrieval directions over one encoded split. Sentence-to-image
/// uses each caption as a query with its image as the single gold target;
/// image-to-sentence uses each image as a query with all of its captions as
/// gold (any hit counts).
pub fn retrieval_reports(
    split: &EncodedSplit,
    ks: &[usize],
    threads: usize,
) -> EvalResult<[RetrievalReport; 4]> {
    let image_vecs: Vec<Vec<f64>> = split.images.iter().map(|e| e.concat.clone()).collect();
    let cap_a: Vec<Vec<f64>> = split.captions_a.iter().map(|e| e.concat.clone()).collect();
    let cap_b: Vec<Vec<f64>> = split.captions_b.iter().map(|e| e.concat.clone()).collect();

    let gold_a: Vec<Vec<usize>> = split.caption_image_a.iter().map(|&i| vec![i]).collect();
    let gold_b: Vec<Vec<usize>> = split.caption_image_b.iter().map(|&i| vec![i]).collect();

    let mut img_gold_a: Vec<Vec<usize>> = vec![Vec::new(); split.images.len()];
    for (ci, &ii) in split.caption_image_a.iter().enumerate() {
        img_gold_a[ii].push(ci);
    }
    let mut img_gold_b: Vec<Vec<usize>> = vec![Vec::new(); split.images.len()];
    for (ci, &ii) in split.caption_image_b.iter().enumerate() {
        img_gold_b[ii].push(ci);
    }

    Ok([
        rank_retrieval(Direction::AToImage, &cap_a, &image_vecs, &gold_a, ks, threads)?,
        rank_retrieval(Direction::ImageToA, &image_vecs, &cap_a, &img_gold_a, ks, threads)?,
        rank_retrieval(Direction::BToImage, &cap_b, &image_vecs, &gold_b, ks, threads)?,
        rank_retrieval(Direction::ImageToB, &image_vecs, &cap_b, &img_gold_b, ks, threads)?,
    ])
}

/// Sum of all recalls across the four reports (the model-selection score).
pub fn validation_score(reports: &[RetrievalReport; 4]) -> f64 {
    reports.iter().map(|r| r.recall.iter().sum::<f64>()).sum()
}

// ── Semantic textual similarity ──────────────────────────────────────

/// Scaled cosine: maps [-1, 1] onto the [0, 5] similarity scale.
pub fn sts_predict(a: &[f64], b: &[f64]) -> f64 {
    2.5 * (cosine_slices(a, b) + 1.0)
}

/// Product-moment correlation.
pub fn pearson(pred: &[f64], gold: &[f64]) -> EvalResult<f64> {
    if pred.len() != gold.len() || pred.len() < 2 {
        return Err(EvalError::TooFewPairs {
            got: pred.len().min(gold.len()),
        });
    }
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = gold.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in pred.iter().zip(gold) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// STS evaluation output.
#[derive(Clone, Debug)]
pub struct StsReport {
    pub pearson_r: f64,
    pub predictions: Vec<f64>,
}

/// Score sentence pairs with one language encoder and correlate against the
/// gold scores.
pub fn evaluate_sts(
    params: &ModelParams,
    pairs: &[StsPair],
    vocab: &Vocabulary,
    lang: Lang,
) -> EvalResult<StsReport> {
    let mut items = Vec::with_capacity(2 * pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        items.push((format!("p{i}a"), vocab.encode_seq(&p.tokens_a)));
        items.push((format!("p{i}b"), vocab.encode_seq(&p.tokens_b)));
    }
    let encoded = encode_sentences(params, &items, lang)?;
    let predictions: Vec<f64> = (0..pairs.len())
        .map(|i| sts_predict(&encoded[2 * i].concat, &encoded[2 * i + 1].concat))
        .collect();
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    let pearson_r = pearson(&predictions, &gold)?;
    Ok(StsReport {
        pearson_r,
        predictions,
    })
}

// ── Diversity diagnostics ────────────────────────────────────────────

/// Mean pairwise inter-head cosine over instances and unordered head pairs.
pub fn head_diversity(instances: &[EncodedValues]) -> EvalResult<f64> {
    let k = instances.first().map(|e| e.heads.len()).unwrap_or(0);
    if k < 2 {
        return Err(EvalError::SingleHead);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for inst in instances {
        for a in 0..k {
            for b in (a + 1)..k {
                total += cosine_slices(&inst.heads[a], &inst.heads[b]);
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Per-stream mean inter-head cosine of an encoded split.
#[derive(Clone, Copy, Debug)]
pub struct DiversityReport {
    pub visual: f64,
    pub lang_a: f64,
    pub lang_b: f64,
}

impl DiversityReport {
    pub fn mean(&self) -> f64 {
        (self.visual + self.lang_a + self.lang_b) / 3.0
    }
}

pub fn head_diversity_report(split: &EncodedSplit) -> EvalResult<DiversityReport> {
    Ok(DiversityReport {
        visual: head_diversity(&split.images)?,
        lang_a: head_diversity(&split.captions_a)?,
        lang_b: head_diversity(&split.captions_b)?,
    })
}

// ── Embedding export ─────────────────────────────────────────────────

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.11e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn fmt_groups(groups: &[Vec<f64>]) -> String {
    groups.iter().map(|g| fmt_vec(g)).collect::<Vec<_>>().join("|")
}

/// Tab-separated dump: one record per instance and stream. Heads and weight
/// vectors are '|'-separated groups of space-separated floats.
pub fn export_embeddings(split: &EncodedSplit, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "id\tstream\tconcat\theads\tweights")?;
    for (tag, instances) in [
        ("V", &split.images),
        ("E", &split.captions_a),
        ("G", &split.captions_b),
    ] {
        for inst in instances.iter() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                inst.id,
                tag,
                fmt_vec(&inst.concat),
                fmt_groups(&inst.heads),
                fmt_groups(&inst.weights),
            )?;
        }
    }
    Ok(())
}

/// Parse one dump back into records (round-trip verification and external
/// tooling).
pub fn parse_embedding_dump(
    text: &str,
) -> Result<Vec<(String, String, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)>, String> {
    let mut out = Vec::new();
    let parse_vec = |s: &str| -> Result<Vec<f64>, String> {
        s.split(' ')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| format!("bad float '{t}': {e}")))
            .collect()
    };
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(format!("line {}: expected 5 columns, got {}", i + 1, cols.len()));
        }
        let concat = parse_vec(cols[2])?;
        let heads = cols[3]
            .split('|')
            .map(parse_vec)
            .collect::<Result<Vec<_>, _>>()?;
        let weights = cols[4]
            .split('|')
            .map(parse_vec)
            .collect::<Result<Vec<_>, _>>()?;
        out.push((cols[0].to_string(), cols[1].to_string(), concat, heads, weights));
    }
    Ok(out)
}

/// Human-readable retrieval table.
pub fn format_reports(reports: &[RetrievalReport]) -> String {
    let mut out = String::from("direction  ");
    if let Some(first) = reports.first() {
        for k in &first.ks {
            out.push_str(&format!("R@{k:<6}"));
        }
    }
    out.push_str("med_rank\n");
    for r in reports {
        out.push_str(&format!("{:<11}", r.direction.label()));
        for v in &r.recall {
            out.push_str(&format!("{v:<8.2}"));
        }
        out.push_str(&format!("{:.1}\n", r.median_rank));
    }
    out
}

/// Group caption vectors by image id prefix (diagnostics helpers).
pub fn captions_by_image(split: &EncodedSplit) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (ci, cap) in split.captions_a.iter().enumerate() {
        let img = cap.id.split('#').next().unwrap_or("").to_string();
        map.entry(img).or_default().push(ci);
    }
    map
}
