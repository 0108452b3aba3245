//! On-disk archives of forward traces.
//!
//! An archive is a directory with two files:
//!
//! * `manifest.txt`: UTF-8 `key=value` lines giving the model dimensions,
//!   the record count and whether embedding outputs are present;
//! * `records.bin`: the records back to back. Every integer is an unsigned
//!   64-bit little-endian value and every float is a little-endian `f32`.
//!
//! One record is laid out as
//!
//! ```text
//! n_tokens
//! n_tokens x (token_id, byte_len, utf8 bytes)
//! byte_len, utf8 sentence characters
//! n_spans, n_spans x (start, end)
//! byte_len, attention   L x M x n x n, row-major
//! byte_len, hidden      L x n x d, outputs of layers 1..=L
//! byte_len, embedding   n x d            (only when has_embed=true)
//! ```
//!
//! Any runtime that can write flat float arrays can produce an archive, so
//! traces of external models go through exactly the same analysis code.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{CharVocab, SegmentedSentence};
use crate::encoder::ForwardTrace;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RECORDS_FILE: &str = "records.bin";
pub const FORMAT: &str = "wordprobe-dump";
pub const VERSION: u32 = 1;

/// Row sums further than this from 1 are rejected.
pub const ROW_SUM_LIMIT: f64 = 1e-2;
/// Row sums further than this from 1 (but within the limit) are rescaled.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("record {record}, layer {layer}, head {head}, row {row}: attention row sums to {sum}")]
    NormalizationViolation { record: u64, layer: usize, head: usize, row: usize, sum: f64 },
    #[error("trace does not match the archive: {0}")]
    ConfigMismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DumpError + '_ {
    move |source| DumpError::Io { path: path.to_path_buf(), source }
}

fn corrupt(msg: impl Into<String>) -> DumpError {
    DumpError::CorruptArchive(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpManifest {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub sentences: u64,
    pub has_embed: bool,
    pub tool_version: String,
}

impl DumpManifest {
    pub fn to_text(&self) -> String {
        format!(
            "format={FORMAT}\nversion={VERSION}\nendianness=little\norder=row-major\nlayers={}\nheads={}\ndim={}\n\
             vocab_size={}\nsentences={}\nhas_embed={}\ntool_version={}\n",
            self.layers, self.heads, self.dim, self.vocab_size, self.sentences, self.has_embed, self.tool_version
        )
    }

    pub fn parse(text: &str) -> Result<DumpManifest, DumpError> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("manifest line {line:?}")))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| corrupt(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<u64, DumpError> {
            get(k)?.parse().map_err(|_| corrupt(format!("manifest {k} is not a number")))
        };
        if get("format")? != FORMAT {
            return Err(corrupt(format!("unknown format {:?}", get("format")?)));
        }
        if num("version")? != VERSION as u64 {
            return Err(corrupt(format!("unsupported version {}", get("version")?)));
        }
        if get("endianness")? != "little" {
            return Err(corrupt("only little-endian archives are supported"));
        }
        let has_embed = match get("has_embed")? {
            "true" => true,
            "false" => false,
            other => return Err(corrupt(format!("has_embed={other}"))),
        };
        Ok(DumpManifest {
            layers: num("layers")? as usize,
            heads: num("heads")? as usize,
            dim: num("dim")? as usize,
            vocab_size: num("vocab_size")? as usize,
            sentences: num("sentences")?,
            has_embed,
            tool_version: map.get("tool_version").unwrap_or(&"unknown").to_string(),
        })
    }
}

/// One decoded record.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    /// Token texts, aligned with `trace.token_ids`.
    pub tokens: Vec<String>,
    pub sentence: SegmentedSentence,
    pub trace: ForwardTrace,
}

/// Streaming archive writer. The manifest is written by [`DumpWriter::finish`].
pub struct DumpWriter {
    dir: PathBuf,
    out: BufWriter<File>,
    manifest: DumpManifest,
}

impl DumpWriter {
    pub fn create(
        dir: &Path,
        layers: usize,
        heads: usize,
        dim: usize,
        vocab_size: usize,
        has_embed: bool,
    ) -> Result<DumpWriter, DumpError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(RECORDS_FILE);
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok(DumpWriter {
            dir: dir.to_path_buf(),
            out: BufWriter::new(file),
            manifest: DumpManifest {
                layers,
                heads,
                dim,
                vocab_size,
                sentences: 0,
                has_embed,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
            },
        })
    }

    pub fn write(
        &mut self,
        trace: &ForwardTrace,
        sentence: &SegmentedSentence,
        tokens: &[String],
    ) -> Result<(), DumpError> {
        let m = &self.manifest;
        if trace.layers != m.layers || trace.heads != m.heads || trace.dim != m.dim {
            return Err(DumpError::ConfigMismatch(format!(
                "trace is {}x{}x{}, archive {}x{}x{}",
                trace.layers, trace.heads, trace.dim, m.layers, m.heads, m.dim
            )));
        }
        if tokens.len() != trace.n_tokens() {
            return Err(DumpError::ConfigMismatch(format!(
                "{} token texts for {} tokens",
                tokens.len(),
                trace.n_tokens()
            )));
        }
        let embed = match (m.has_embed, &trace.embed_out) {
            (true, Some(e)) => Some(e),
            (true, None) => return Err(DumpError::ConfigMismatch("archive stores embeddings, trace has none".into())),
            (false, _) => None,
        };

        let mut buf = Vec::new();
        put_u64(&mut buf, trace.n_tokens() as u64);
        for (&id, text) in trace.token_ids.iter().zip(tokens) {
            put_u64(&mut buf, id as u64);
            put_bytes(&mut buf, text.as_bytes());
        }
        put_bytes(&mut buf, sentence.text().as_bytes());
        put_u64(&mut buf, sentence.spans().len() as u64);
        for &(s, e) in sentence.spans() {
            put_u64(&mut buf, s as u64);
            put_u64(&mut buf, e as u64);
        }
        put_floats(&mut buf, &trace.attention);
        put_floats(&mut buf, &trace.hidden);
        if let Some(e) = embed {
            put_floats(&mut buf, e);
        }
        let path = self.dir.join(RECORDS_FILE);
        self.out.write_all(&buf).map_err(io_err(&path))?;
        self.manifest.sentences += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DumpManifest, DumpError> {
        let path = self.dir.join(RECORDS_FILE);
        self.out.flush().map_err(io_err(&path))?;
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.manifest.to_text()).map_err(io_err(&path))?;
        Ok(self.manifest)
    }
}

fn put_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(buf, bytes.len() as u64);
    buf.extend_from_slice(bytes);
}

fn put_floats(buf: &mut Vec<u8>, xs: &[f32]) {
    put_u64(buf, 4 * xs.len() as u64);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Write traces of `[CLS] sentence [SEP]` with token texts from `vocab`.
/// Embeddings are stored when every trace carries them.
pub fn write_dump(
    dir: &Path,
    vocab: &CharVocab,
    items: &[(&ForwardTrace, &SegmentedSentence)],
) -> Result<DumpManifest, DumpError> {
    let (layers, heads, dim) = items.first().map_or((0, 0, 0), |(t, _)| (t.layers, t.heads, t.dim));
    let has_embed = !items.is_empty() && items.iter().all(|(t, _)| t.embed_out.is_some());
    let mut w = DumpWriter::create(dir, layers, heads, dim, vocab.size(), has_embed)?;
    for (trace, sent) in items {
        let tokens: Vec<String> = trace.token_ids.iter().map(|&id| vocab.token_text(id)).collect();
        w.write(trace, sent, &tokens)?;
    }
    w.finish()
}

/// Streaming reader; yields exactly `manifest.sentences` records.
pub struct DumpReader {
    manifest: DumpManifest,
    path: PathBuf,
    input: BufReader<File>,
    remaining_bytes: u64,
    next: u64,
    failed: bool,
}

/// Open an archive for streaming.
pub fn read_dump(dir: &Path) -> Result<DumpReader, DumpError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest = DumpManifest::parse(&text)?;
    let path = dir.join(RECORDS_FILE);
    let file = File::open(&path).map_err(io_err(&path))?;
    let remaining_bytes = file.metadata().map_err(io_err(&path))?.len();
    Ok(DumpReader { manifest, path, input: BufReader::new(file), remaining_bytes, next: 0, failed: false })
}

impl DumpReader {
    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    fn bytes(&mut self, n: u64, what: &str) -> Result<Vec<u8>, DumpError> {
        if n > self.remaining_bytes {
            return Err(corrupt(format!(
                "record {}: {what} needs {n} bytes, {} left",
                self.next, self.remaining_bytes
            )));
        }
        let mut buf = vec![0; n as usize];
        self.input.read_exact(&mut buf).map_err(io_err(&self.path))?;
        self.remaining_bytes -= n;
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64, DumpError> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, DumpError> {
        let n = self.u64(what)?;
        String::from_utf8(self.bytes(n, what)?)
            .map_err(|_| corrupt(format!("record {}: {what} is not UTF-8", self.next)))
    }

    fn floats(&mut self, count: usize, what: &str) -> Result<Vec<f32>, DumpError> {
        let n = self.u64(what)?;
        if n != 4 * count as u64 {
            return Err(corrupt(format!(
                "record {}: {what} blob has {n} bytes, dimensions need {}",
                self.next,
                4 * count
            )));
        }
        let raw = self.bytes(n, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn record(&mut self) -> Result<DumpRecord, DumpError> {
        let (layers, heads, dim, has_embed) =
            (self.manifest.layers, self.manifest.heads, self.manifest.dim, self.manifest.has_embed);
        let n = self.u64("token count")?;
        // every token takes at least 16 bytes, which bounds n before allocating
        if n.saturating_mul(16) > self.remaining_bytes {
            return Err(corrupt(format!("record {}: token count {n} exceeds the file", self.next)));
        }
        let n = n as usize;
        let mut ids = Vec::with_capacity(n);
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let id = self.u64("token id")?;
            let id = u32::try_from(id).map_err(|_| corrupt(format!("token id {id} out of range")))?;
            ids.push(id);
            tokens.push(self.string("token text")?);
        }
        let chars: Vec<char> = self.string("sentence")?.chars().collect();
        let n_spans = self.u64("span count")?;
        if n_spans.saturating_mul(16) > self.remaining_bytes {
            return Err(corrupt(format!("record {}: span count {n_spans} exceeds the file", self.next)));
        }
        let mut spans = Vec::with_capacity(n_spans as usize);
        for _ in 0..n_spans {
            let s = self.u64("span start")? as usize;
            let e = self.u64("span end")? as usize;
            spans.push((s, e));
        }
        let sentence =
            SegmentedSentence::new(chars, spans).map_err(|e| corrupt(format!("record {}: {e}", self.next)))?;
        let mut attention = self.floats(layers * heads * n * n, "attention")?;
        let hidden = self.floats(layers * n * dim, "hidden")?;
        let embed = if has_embed { Some(self.floats(n * dim, "embedding")?) } else { None };
        check_rows(&mut attention, n, heads, self.next)?;
        let trace = ForwardTrace::new(ids, layers, heads, dim, attention, hidden, embed)
            .map_err(|e| corrupt(format!("record {}: {e}", self.next)))?;
        Ok(DumpRecord { tokens, sentence, trace })
    }
}

/// Reject rows far from stochastic; rescale rows with small rounding drift.
fn check_rows(attention: &mut [f32], n: usize, heads: usize, record: u64) -> Result<(), DumpError> {
    if n == 0 {
        return Ok(());
    }
    for (r, row) in attention.chunks_mut(n).enumerate() {
        let sum: f64 = row.iter().map(|&x| x as f64).sum();
        let bad = row.iter().any(|x| !x.is_finite() || *x < 0.0);
        let dev = (sum - 1.0).abs();
        if bad || dev.is_nan() || dev > ROW_SUM_LIMIT {
            let matrix = r / n;
            return Err(DumpError::NormalizationViolation {
                record,
                layer: matrix / heads,
                head: matrix % heads,
                row: r % n,
                sum,
            });
        }
        if dev > ROW_SUM_TOLERANCE {
            row.iter_mut().for_each(|x| *x = (*x as f64 / sum) as f32);
        }
    }
    Ok(())
}

impl Iterator for DumpReader {
    type Item = Result<DumpRecord, DumpError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.next == self.manifest.sentences {
            if self.remaining_bytes != 0 {
                self.failed = true;
                return Some(Err(corrupt(format!("{} trailing bytes after the last record", self.remaining_bytes))));
            }
            return None;
        }
        let rec = self.record();
        self.failed = rec.is_err();
        self.next += 1;
        Some(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn_stats::{aggregate, specific_char_stats, PatternKind, TokenLayout};
    use crate::corpus::parse_corpus;
    use crate::encoder::{Encoder, ModelConfig};
    use crate::exec::Exec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_and_data() -> (Encoder<f32>, CharVocab, Vec<SegmentedSentence>) {
        let sents = parse_corpus("新华社 北京 电\n我 爱 北京\n上海 浦东 开发 与 法制 建设 同步\n").unwrap();
        let vocab = CharVocab::build(&sents, 1).unwrap();
        let cfg =
            ModelConfig { layers: 2, heads: 2, dim: 8, vocab_size: vocab.size(), max_len: 16, dropout: 0.1, seed: 9 };
        (Encoder::new(cfg).unwrap(), vocab, sents)
    }

    fn read_all(dir: &Path) -> Result<Vec<DumpRecord>, DumpError> {
        read_dump(dir)?.collect()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (model, vocab, sents) = model_and_data();
        let traces: Vec<ForwardTrace> = sents.iter().map(|s| model.trace_sentence(&vocab, s).unwrap()).collect();
        let items: Vec<_> = traces.iter().zip(&sents).collect();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dump(dir.path(), &vocab, &items).unwrap();
        assert_eq!(manifest.sentences, 3);
        assert!(manifest.has_embed);
        let back = read_all(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for ((rec, trace), sent) in back.iter().zip(&traces).zip(&sents) {
            assert_eq!(&rec.trace, trace);
            assert_eq!(&rec.sentence, sent);
            assert_eq!(rec.tokens[0], "[CLS]");
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&rec.trace.attention), bits(&trace.attention));
        }
        let back_items: Vec<_> = back.iter().map(|r| (&r.trace, &r.sentence)).collect();
        assert_eq!(
            aggregate(2, 2, &back_items, Exec::Sequential).unwrap(),
            aggregate(2, 2, &items, Exec::Sequential).unwrap()
        );
    }

    #[test]
    fn empty_archive_is_an_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let w = DumpWriter::create(dir.path(), 2, 2, 4, 10, false).unwrap();
        w.finish().unwrap();
        assert!(read_all(dir.path()).unwrap().is_empty());
    }

    fn uniform_archive(dir: &Path, row_value: f32) {
        let sent = parse_corpus("ab c").unwrap().remove(0);
        let n = 5;
        let trace =
            ForwardTrace::new(vec![2, 5, 6, 7, 3], 1, 1, 2, vec![row_value; n * n], vec![0.0; n * 2], None).unwrap();
        let tokens: Vec<String> = ["[CLS]", "a", "b", "c", "[SEP]"].iter().map(|s| s.to_string()).collect();
        let mut w = DumpWriter::create(dir, 1, 1, 2, 8, false).unwrap();
        w.write(&trace, &sent, &tokens).unwrap();
        w.finish().unwrap();
    }

    #[test]
    fn hand_built_uniform_archive() {
        let dir = tempfile::tempdir().unwrap();
        uniform_archive(dir.path(), 0.2);
        let rec = read_all(dir.path()).unwrap().remove(0);
        let s = specific_char_stats(rec.trace.attention(0, 0), &rec.sentence, &TokenLayout::single(3)).unwrap();
        for kind in [PatternKind::Curr, PatternKind::Next, PatternKind::Prev, PatternKind::ToCls, PatternKind::ToSep] {
            assert!((s.mean(kind).unwrap() - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn small_drift_is_renormalized_and_large_drift_rejected() {
        let dir = tempfile::tempdir().unwrap();
        uniform_archive(dir.path(), 0.2 * 1.005);
        let rec = read_all(dir.path()).unwrap().remove(0);
        assert!(rec.trace.max_row_deviation() < 1e-6);

        let dir = tempfile::tempdir().unwrap();
        uniform_archive(dir.path(), 0.2 * 1.00001);
        let rec = read_all(dir.path()).unwrap().remove(0);
        assert_eq!(rec.trace.attention[0], 0.2f32 * 1.00001);

        let dir = tempfile::tempdir().unwrap();
        uniform_archive(dir.path(), 0.21);
        assert!(matches!(read_all(dir.path()), Err(DumpError::NormalizationViolation { row: 0, .. })));
    }

    #[test]
    fn truncation_and_size_mismatch_are_corruption() {
        let (model, vocab, sents) = model_and_data();
        let traces: Vec<ForwardTrace> = sents.iter().map(|s| model.trace_sentence(&vocab, s).unwrap()).collect();
        let items: Vec<_> = traces.iter().zip(&sents).collect();
        let dir = tempfile::tempdir().unwrap();
        write_dump(dir.path(), &vocab, &items).unwrap();
        let path = dir.path().join(RECORDS_FILE);
        let bytes = std::fs::read(&path).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let cut = rng.random_range(0..bytes.len());
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(read_all(dir.path()), Err(DumpError::CorruptArchive(_))), "cut at {cut}");
        }
        std::fs::write(&path, [&bytes[..], &[0u8; 3]].concat()).unwrap();
        assert!(matches!(read_all(dir.path()), Err(DumpError::CorruptArchive(_))));

        std::fs::write(&path, &bytes).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).unwrap().replace("dim=8", "dim=6");
        std::fs::write(&mpath, text).unwrap();
        assert!(matches!(read_all(dir.path()), Err(DumpError::CorruptArchive(_))));
    }

    #[test]
    fn writer_rejects_foreign_traces() {
        let (model, vocab, sents) = model_and_data();
        let trace = model.trace_sentence(&vocab, &sents[0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut w = DumpWriter::create(dir.path(), 3, 2, 8, vocab.size(), true).unwrap();
        let tokens: Vec<String> = trace.token_ids.iter().map(|&i| vocab.token_text(i)).collect();
        assert!(matches!(w.write(&trace, &sents[0], &tokens), Err(DumpError::ConfigMismatch(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let m = DumpManifest {
            layers: 12,
            heads: 12,
            dim: 768,
            vocab_size: 21128,
            sentences: 5,
            has_embed: false,
            tool_version: "x".into(),
        };
        assert_eq!(DumpManifest::parse(&m.to_text()).unwrap(), m);
        assert!(DumpManifest::parse(&m.to_text().replace("little", "big")).is_err());
    }
}
