//! Clip manifests and training batches.
//!
//! A manifest is JSON lines, one clip per line. Features are stored inline
//! as rows or in a sidecar file: `F32M`, `u32` rows, `u32` cols, then the
//! row-major little-endian `f32` values.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::decoding::{mbr_rank_weighted, Hypothesis, Utility};
use crate::error::{Error, Result};
use crate::fusion::{AcousticFeatures, Candidate, ClipExample, DecoderMode, EncodedExample, Split};
use crate::labels::{DysfluencyClass, LabelSet, Schema, NONE_TAG};
use crate::seed::indexed_substream;
use crate::synth::lexicon;
use crate::vocab::{Alphabet, TokenId, Vocab};

pub const FEATURE_MAGIC: &[u8; 4] = b"F32M";

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema: Schema,
    pub examples: Vec<ClipExample>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ClipExample> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ClipExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// The generator lexicon followed by any other token in the corpus,
    /// sorted, so the same manifest always yields the same ids.
    pub fn vocab(&self) -> Result<Vocab> {
        let mut tokens = lexicon();
        let known: BTreeSet<String> = tokens.iter().cloned().collect();
        let mut extra = BTreeSet::new();
        for e in &self.examples {
            let texts = std::iter::once(e.transcript.as_str()).chain(e.hypotheses.values().flatten().map(|c| c.text.as_str()));
            for t in texts.flat_map(str::split_whitespace) {
                if !known.contains(t) {
                    extra.insert(t.to_string());
                }
            }
        }
        tokens.extend(extra);
        Vocab::new(tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureStorage {
    Inline,
    /// Raw files in a directory next to the manifest.
    Sidecar,
}

/// Exactly one of `path` and `rows` is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<Vec<f32>>>,
    #[serde(default = "default_layer")]
    layer: u32,
    #[serde(default = "default_finetuned")]
    finetuned: bool,
}

fn default_layer() -> u32 {
    24
}

fn default_finetuned() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    schema: Schema,
    split: Split,
    transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyp_1best: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyp_nbest: Option<Vec<Candidate>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyp_phon: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyp_mbr: Option<Vec<Candidate>>,
    labels: Vec<String>,
    features: FeatureRecord,
}

pub fn encode_feature_file(frames: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * frames.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(frames.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
    for v in frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_file(bytes: &[u8]) -> std::result::Result<Array2<f32>, String> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err("not a feature file".into());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(format!("header says {rows}x{cols} but the file holds {} bytes of data", body.len()));
    }
    let values = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())
}

fn sidecar_dir(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "manifest".into());
    PathBuf::from(format!("{stem}.features"))
}

fn safe_name(index: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:05}-{clean}.f32")
}

fn single(cands: Option<&Vec<Candidate>>) -> Option<String> {
    cands.and_then(|c| c.first()).map(|c| c.text.clone())
}

fn to_record(e: &ClipExample, schema: Schema, path: Option<String>, rows: Option<Vec<Vec<f32>>>) -> Record {
    Record {
        id: e.id.clone(),
        schema,
        split: e.split,
        transcript: e.transcript.clone(),
        hyp_1best: single(e.hypotheses.get(&DecoderMode::OneBest)),
        hyp_nbest: e.hypotheses.get(&DecoderMode::NBest).cloned(),
        hyp_phon: single(e.hypotheses.get(&DecoderMode::Phon)),
        hyp_mbr: e.hypotheses.get(&DecoderMode::Mbr).cloned(),
        labels: e.labels.tags(),
        features: FeatureRecord {
            path,
            rows,
            layer: e.features.layer,
            finetuned: e.features.finetuned,
        },
    }
}

/// Writes the manifest (and sidecar feature files) atomically, file by file.
pub fn save_manifest(manifest: &Manifest, path: &Path, storage: FeatureStorage) -> Result<()> {
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let rel_dir = sidecar_dir(path);
    if storage == FeatureStorage::Sidecar {
        let dir = base.join(&rel_dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut text = String::new();
    for (i, e) in manifest.examples.iter().enumerate() {
        let (path, rows) = match storage {
            FeatureStorage::Inline => (None, Some(e.features.frames.rows().into_iter().map(|r| r.to_vec()).collect())),
            FeatureStorage::Sidecar => {
                let rel = rel_dir.join(safe_name(i, &e.id));
                write_atomic(&base.join(&rel), &encode_feature_file(&e.features.frames))?;
                (Some(rel.to_string_lossy().replace('\\', "/")), None)
            }
        };
        let line = serde_json::to_string(&to_record(e, manifest.schema, path, rows))
            .map_err(|err| Error::Data(format!("encoding record {}: {err}", e.id)))?;
        text.push_str(&line);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn parse_tags(tags: &[String], schema: Schema) -> std::result::Result<LabelSet, String> {
    let mut set = LabelSet::empty();
    if tags.len() == 1 && tags[0] == NONE_TAG {
        return Ok(set);
    }
    for t in tags {
        let class = DysfluencyClass::from_tag(t).ok_or_else(|| format!("unknown label tag {t:?}"))?;
        if !schema.contains(class) {
            return Err(format!("label {t} is not allowed under schema {schema}"));
        }
        set.insert(class);
    }
    Ok(set)
}

fn load_features(rec: &FeatureRecord, base: &Path) -> std::result::Result<AcousticFeatures, String> {
    let frames = match (&rec.path, &rec.rows) {
        (None, Some(rows)) => {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err("inline feature rows have different lengths".into());
            }
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| e.to_string())?
        }
        (Some(path), None) => {
            let full = base.join(path);
            let bytes = std::fs::read(&full).map_err(|e| format!("features file {}: {e}", full.display()))?;
            decode_feature_file(&bytes).map_err(|e| format!("features file {}: {e}", full.display()))?
        }
        _ => return Err("features need exactly one of path and rows".into()),
    };
    let feats = AcousticFeatures {
        frames,
        layer: rec.layer,
        finetuned: rec.finetuned,
    };
    feats.validate().map_err(|e| e.to_string())?;
    Ok(feats)
}

fn candidate(text: String) -> Vec<Candidate> {
    vec![Candidate { text, score: 0.0 }]
}

/// Parses and validates a manifest; every offending record is reported.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut offenders = Vec::new();
    let mut examples = Vec::new();
    let mut schema: Option<Schema> = None;
    let mut seen = BTreeSet::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                offenders.push(format!("line {}: {e}", lineno + 1));
                continue;
            }
        };
        let id = rec.id.clone();
        let mut problems = Vec::new();
        if !seen.insert(id.clone()) {
            problems.push("duplicate id".to_string());
        }
        let s = *schema.get_or_insert(rec.schema);
        if rec.schema != s {
            problems.push(format!("schema {} differs from the manifest schema {s}", rec.schema));
        }
        let labels = parse_tags(&rec.labels, rec.schema).map_err(|e| problems.push(e)).ok();
        let features = load_features(&rec.features, base).map_err(|e| problems.push(e)).ok();
        if let Some(f) = &features {
            let d = *dim.get_or_insert(f.frames.ncols());
            if f.frames.ncols() != d {
                problems.push(format!("feature dim {} differs from {d}", f.frames.ncols()));
            }
        }
        if !problems.is_empty() {
            offenders.push(format!("{id}: {}", problems.join(", ")));
            continue;
        }
        let mut hypotheses = BTreeMap::new();
        if let Some(h) = rec.hyp_1best {
            hypotheses.insert(DecoderMode::OneBest, candidate(h));
        }
        if let Some(h) = rec.hyp_nbest {
            hypotheses.insert(DecoderMode::NBest, h);
        }
        if let Some(h) = rec.hyp_phon {
            hypotheses.insert(DecoderMode::Phon, candidate(h));
        }
        if let Some(h) = rec.hyp_mbr {
            hypotheses.insert(DecoderMode::Mbr, h);
        }
        examples.push(ClipExample {
            id,
            features: features.expect("checked"),
            transcript: rec.transcript,
            hypotheses,
            labels: labels.expect("checked"),
            split: rec.split,
        });
    }
    if !offenders.is_empty() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            offenders,
        });
    }
    let schema = schema.ok_or_else(|| Error::Load {
        path: path.to_path_buf(),
        offenders: vec!["manifest has no records".into()],
    })?;
    Ok(Manifest { schema, examples })
}

/// MBR over a stored N-best list: the candidates are the list itself and
/// the anchors are weighted by the list's renormalized posterior.
pub fn rescore_nbest(cands: &[Candidate], vocab: &Vocab, utility: Utility) -> Result<Vec<Candidate>> {
    if cands.is_empty() {
        return Err(Error::Input("empty N-best list".into()));
    }
    let hyps: Vec<Hypothesis> = cands
        .iter()
        .map(|c| Hypothesis::new(vocab.encode(&c.text), Alphabet::Word, c.score))
        .collect();
    let top = hyps.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
    let anchors: Vec<(&[TokenId], f64)> = hyps
        .iter()
        .map(|h| (h.ids(), if top.is_finite() { (h.log_prob - top).exp() } else { 1.0 }))
        .collect();
    let ranked = mbr_rank_weighted(&hyps, &anchors, utility)?;
    Ok(ranked
        .into_iter()
        .map(|(i, eu)| Candidate {
            text: cands[i].text.clone(),
            score: eu,
        })
        .collect())
}

/// Fills `hyp_mbr` of every clip that has an N-best list.
pub fn rescore_manifest(manifest: &mut Manifest, utility: Utility) -> Result<usize> {
    let vocab = manifest.vocab()?;
    let mut n = 0;
    for e in &mut manifest.examples {
        if let Some(list) = e.hypotheses.get(&DecoderMode::NBest) {
            let ranked = rescore_nbest(list, &vocab, utility)?;
            e.hypotheses.insert(DecoderMode::Mbr, ranked);
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub max_len: usize,
    pub pad: TokenId,
    pub lab: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions of the examples in the input slice.
    pub indices: Vec<usize>,
    pub examples: Vec<EncodedExample>,
}

/// Cuts hypothesis tokens just before `[LAB]` until the sequence fits.
pub fn truncate_example(ex: &EncodedExample, max_len: usize, lab: TokenId) -> Result<EncodedExample> {
    let excess = ex.positions().saturating_sub(max_len);
    if excess == 0 {
        return Ok(ex.clone());
    }
    let at = ex
        .tokens
        .iter()
        .position(|&t| t == lab)
        .ok_or_else(|| Error::Assembly("sequence has no [LAB] token".into()))?;
    // token 0 is [BOS]; hypothesis tokens sit in 1..at
    if at.saturating_sub(1) < excess {
        return Err(Error::Assembly(format!(
            "cannot fit {} positions into {max_len} by cutting the hypothesis",
            ex.positions()
        )));
    }
    let mut tokens = ex.tokens.clone();
    tokens.drain(at - excess..at);
    let mut mask = ex.loss_mask.clone();
    // mask index i + 1 belongs to token i
    mask.drain(at - excess + 1..at + 1);
    Ok(EncodedExample {
        pooled: ex.pooled.clone(),
        tokens,
        loss_mask: mask,
    })
}

/// Shuffled batches for one epoch, each padded to its longest member.
pub fn make_batches(examples: &[EncodedExample], config: &BatchConfig, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to batch".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut indexed_substream(seed, "shuffle", &[epoch as u64]));
    order
        .chunks(config.batch_size)
        .map(|idx| {
            let mut batch = idx
                .iter()
                .map(|&i| truncate_example(&examples[i], config.max_len, config.lab))
                .collect::<Result<Vec<_>>>()?;
            let width = batch.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
            for e in &mut batch {
                e.tokens.resize(width, config.pad);
                e.loss_mask.resize(width + 1, false);
            }
            Ok(Batch {
                indices: idx.to_vec(),
                examples: batch,
            })
        })
        .collect()
}
