//! Per-span contextual representations keyed by `(block, component)`.
//!
//! Dumps come in two encodings: JSON Lines (one record per line) and a packed
//! binary sidecar starting with [`BINARY_MAGIC`]. [`load_dump`] detects which
//! one it is reading.

mod synth;

pub use synth::{synth_generate, SynthConfig, SynthData, SynthType};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SpanRef};
use crate::error::{Error, Result};

/// Reserved span id for end-of-sequence token records.
pub const EOS_SPAN_ID: &str = "EOS";
/// Records whose doc id starts with this prefix hold type-description embeddings.
pub const DESCRIPTION_DOC_PREFIX: &str = "type:";
pub const DESCRIPTION_SPAN_ID: &str = "desc";

pub const BINARY_MAGIC: &[u8; 5] = b"NRDv1";

/// Component names known out of the box. Callers may register more.
pub const CANONICAL_COMPONENTS: &[&str] = &[
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.o",
    "mlp.gate",
    "mlp.up",
    "mlp.down",
    "norm.input",
    "norm.post_attn",
    "resid.mid",
    "block.out",
];

/// Where the reference to the embedding of a type description lives in a dump.
pub fn description_ref(description: &str) -> SpanRef {
    SpanRef::new(format!("{DESCRIPTION_DOC_PREFIX}{description}"), DESCRIPTION_SPAN_ID)
}

pub fn eos_ref(doc_id: &str) -> SpanRef {
    SpanRef::new(doc_id, EOS_SPAN_ID)
}

/// Which token stands in for a mention: the last token of the span, or the
/// end-of-sequence token of its document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionToken {
    #[default]
    SpanEnd,
    Eos,
}

impl MentionToken {
    pub fn resolve(self, span: &SpanRef) -> SpanRef {
        match self {
            MentionToken::SpanEnd => span.clone(),
            MentionToken::Eos => eos_ref(&span.doc_id),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MentionToken::SpanEnd => "span",
            MentionToken::Eos => "eos",
        }
    }
}

/// Serialized as `BLOCK:COMPONENT`, e.g. `17:attn.v`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RepresentationKey {
    pub block: u32,
    pub component: String,
}

impl RepresentationKey {
    pub fn new(block: u32, component: impl Into<String>) -> Self {
        RepresentationKey {
            block,
            component: component.into(),
        }
    }
}

impl fmt::Display for RepresentationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.block, self.component)
    }
}

impl FromStr for RepresentationKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (block, component) = s.split_once(':').ok_or_else(|| Error::InvalidKey(s.into()))?;
        let block = block.trim().parse().map_err(|_| Error::InvalidKey(s.into()))?;
        let component = component.trim();
        if component.is_empty() {
            return Err(Error::InvalidKey(s.into()));
        }
        Ok(RepresentationKey::new(block, component))
    }
}

impl Serialize for RepresentationKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RepresentationKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// The set of component names a loader accepts.
#[derive(Debug, Clone)]
pub struct ComponentRegistry {
    names: BTreeSet<String>,
}

impl Default for ComponentRegistry {
    fn default() -> Self {
        ComponentRegistry {
            names: CANONICAL_COMPONENTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ComponentRegistry {
    pub fn register(&mut self, name: impl Into<String>) {
        self.names.insert(name.into());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationRecord {
    pub doc_id: String,
    pub span_id: String,
    pub key: RepresentationKey,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct KeyTable {
    dim: usize,
    vectors: BTreeMap<SpanRef, Vec<f32>>,
}

/// Write-once store of raw (unnormalized) vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RepresentationStore {
    tables: BTreeMap<RepresentationKey, KeyTable>,
}

impl RepresentationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: RepresentationKey, span: SpanRef, vector: Vec<f32>) -> Result<()> {
        let table = self.tables.entry(key.clone()).or_insert_with(|| KeyTable {
            dim: vector.len(),
            vectors: BTreeMap::new(),
        });
        if table.dim != vector.len() {
            return Err(Error::DimMismatch {
                expected: table.dim,
                actual: vector.len(),
            });
        }
        if table.vectors.contains_key(&span) {
            return Err(Error::MalformedDump(format!(
                "duplicate record for {key} {}/{}",
                span.doc_id, span.span_id
            )));
        }
        table.vectors.insert(span, vector);
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &RepresentationKey> {
        self.tables.keys()
    }

    pub fn dim(&self, key: &RepresentationKey) -> Option<usize> {
        self.tables.get(key).map(|t| t.dim)
    }

    pub fn get(&self, key: &RepresentationKey, span: &SpanRef) -> Option<&[f32]> {
        self.tables.get(key)?.vectors.get(span).map(Vec::as_slice)
    }

    /// Like [`get`](Self::get) but reports the missing coordinate.
    pub fn require(&self, key: &RepresentationKey, span: &SpanRef) -> Result<&[f32]> {
        self.get(key, span).ok_or_else(|| Error::MissingVector {
            key: key.to_string(),
            doc_id: span.doc_id.clone(),
            span_id: span.span_id.clone(),
        })
    }

    pub fn entries(&self, key: &RepresentationKey) -> impl Iterator<Item = (&SpanRef, &[f32])> {
        self.tables
            .get(key)
            .into_iter()
            .flat_map(|t| t.vectors.iter().map(|(r, v)| (r, v.as_slice())))
    }

    pub fn len(&self) -> usize {
        self.tables.values().map(|t| t.vectors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = RepresentationRecord> + '_ {
        self.tables.iter().flat_map(|(key, t)| {
            t.vectors.iter().map(move |(r, v)| RepresentationRecord {
                doc_id: r.doc_id.clone(),
                span_id: r.span_id.clone(),
                key: key.clone(),
                vector: v.clone(),
            })
        })
    }

    /// Checks every record against `corpus`. Description records and EOS
    /// records only need their document (if any) to exist.
    pub fn validate_against(&self, corpus: &Corpus) -> Result<()> {
        for t in self.tables.values() {
            for r in t.vectors.keys() {
                if r.doc_id.starts_with(DESCRIPTION_DOC_PREFIX) {
                    continue;
                }
                let ok = match corpus.get(&r.doc_id) {
                    None => false,
                    Some(_) if r.span_id == EOS_SPAN_ID => true,
                    Some(d) => d.span(&r.span_id).is_some(),
                };
                if !ok {
                    return Err(Error::DanglingSpanRef {
                        doc_id: r.doc_id.clone(),
                        span_id: r.span_id.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in self.records() {
            let line = WireRecord {
                doc_id: rec.doc_id,
                span_id: rec.span_id,
                block: rec.key.block,
                component: rec.key.component,
                dim: rec.vector.len(),
                vector: Some(rec.vector),
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| Error::json(0, e))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        for (key, t) in &self.tables {
            for (r, v) in &t.vectors {
                let header = WireRecord {
                    doc_id: r.doc_id.clone(),
                    span_id: r.span_id.clone(),
                    block: key.block,
                    component: key.component.clone(),
                    dim: v.len(),
                    vector: None,
                };
                let bytes = serde_json::to_vec(&header).map_err(|e| Error::json(0, e))?;
                w.write_all(&(bytes.len() as u32).to_le_bytes())?;
                w.write_all(&bytes)?;
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    doc_id: String,
    span_id: String,
    block: u32,
    component: String,
    dim: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    vector: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions<'a> {
    pub registry: ComponentRegistry,
    pub corpus: Option<&'a Corpus>,
}

fn accept(store: &mut RepresentationStore, opts: &LoadOptions<'_>, header: WireRecord, vector: Vec<f32>) -> Result<()> {
    if !opts.registry.contains(&header.component) {
        return Err(Error::UnknownComponent(header.component));
    }
    if header.dim != vector.len() {
        return Err(Error::DimMismatch {
            expected: header.dim,
            actual: vector.len(),
        });
    }
    store.insert(
        RepresentationKey::new(header.block, header.component),
        SpanRef::new(header.doc_id, header.span_id),
        vector,
    )
}

pub fn read_dump_jsonl<R: BufRead>(reader: R, opts: &LoadOptions<'_>) -> Result<RepresentationStore> {
    let mut store = RepresentationStore::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: WireRecord = serde_json::from_str(&line).map_err(|e| Error::json(i + 1, e))?;
        let vector = rec
            .vector
            .take()
            .ok_or_else(|| Error::MalformedDump(format!("line {}: missing vector", i + 1)))?;
        accept(&mut store, opts, rec, vector)?;
    }
    if let Some(c) = opts.corpus {
        store.validate_against(c)?;
    }
    Ok(store)
}

/// Reads the binary sidecar encoding; `reader` must be positioned after the magic.
fn read_dump_binary_body<R: Read>(mut reader: R, opts: &LoadOptions<'_>) -> Result<RepresentationStore> {
    let mut store = RepresentationStore::new();
    let mut len_buf = [0u8; 4];
    let mut record = 0usize;
    loop {
        if !read_exact_or_eof(&mut reader, &mut len_buf)? {
            break;
        }
        record += 1;
        let len = u32::from_le_bytes(len_buf) as usize;
        let mut header = vec![0u8; len];
        reader
            .read_exact(&mut header)
            .map_err(|_| Error::MalformedDump(format!("record {record}: truncated header")))?;
        let header: WireRecord = serde_json::from_slice(&header).map_err(|e| Error::json(record, e))?;
        let mut raw = vec![0u8; header.dim * 4];
        reader
            .read_exact(&mut raw)
            .map_err(|_| Error::MalformedDump(format!("record {record}: truncated vector")))?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        accept(&mut store, opts, header, vector)?;
    }
    if let Some(c) = opts.corpus {
        store.validate_against(c)?;
    }
    Ok(store)
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::MalformedDump("truncated record length".into()));
        }
        filled += n;
    }
    Ok(true)
}

/// Loads a dump in either encoding.
pub fn load_dump(path: impl AsRef<Path>, opts: &LoadOptions<'_>) -> Result<RepresentationStore> {
    let mut reader = BufReader::new(File::open(path)?);
    let head = reader.fill_buf()?;
    if head.starts_with(BINARY_MAGIC) {
        reader.consume(BINARY_MAGIC.len());
        read_dump_binary_body(reader, opts)
    } else {
        read_dump_jsonl(reader, opts)
    }
}

pub fn read_dump_binary<R: Read>(mut reader: R, opts: &LoadOptions<'_>) -> Result<RepresentationStore> {
    let mut magic = [0u8; 5];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::MalformedDump("missing magic".into()))?;
    if &magic != BINARY_MAGIC {
        return Err(Error::MalformedDump("bad magic".into()));
    }
    read_dump_binary_body(reader, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(doc: &str, span: &str, block: u32, comp: &str, v: &[f32]) -> String {
        format!(
            "{{\"doc_id\":\"{doc}\",\"span_id\":\"{span}\",\"block\":{block},\"component\":\"{comp}\",\"dim\":{},\"vector\":{:?}}}\n",
            v.len(),
            v
        )
    }

    #[test]
    fn key_parse_and_display() {
        let k: RepresentationKey = "17:attn.v".parse().unwrap();
        assert_eq!(k, RepresentationKey::new(17, "attn.v"));
        assert_eq!(k.to_string(), "17:attn.v");
        assert!("attn.v".parse::<RepresentationKey>().is_err());
        assert!("x:attn.v".parse::<RepresentationKey>().is_err());
        assert!("3:".parse::<RepresentationKey>().is_err());
    }

    #[test]
    fn loads_two_records() {
        let src = line("d1", "s0", 3, "attn.v", &[0.5; 8]) + &line("d2", "s0", 3, "attn.v", &[1.0; 8]);
        let store = read_dump_jsonl(src.as_bytes(), &LoadOptions::default()).unwrap();
        assert_eq!(store.len(), 2);
        let key = RepresentationKey::new(3, "attn.v");
        assert_eq!(store.dim(&key), Some(8));
        assert_eq!(store.get(&key, &SpanRef::new("d2", "s0")).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn dim_mismatch_under_one_key() {
        let src = line("d1", "s0", 3, "attn.v", &[0.5; 8]) + &line("d2", "s0", 3, "attn.v", &[1.0; 16]);
        assert!(matches!(
            read_dump_jsonl(src.as_bytes(), &LoadOptions::default()),
            Err(Error::DimMismatch {
                expected: 8,
                actual: 16
            })
        ));
        let lying =
            "{\"doc_id\":\"d\",\"span_id\":\"s\",\"block\":0,\"component\":\"attn.v\",\"dim\":3,\"vector\":[1.0]}\n";
        assert!(matches!(
            read_dump_jsonl(lying.as_bytes(), &LoadOptions::default()),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn empty_dump_is_empty_store() {
        let store = read_dump_jsonl(&b""[..], &LoadOptions::default()).unwrap();
        assert!(store.is_empty());
    }

    #[test]
    fn unknown_component_unless_registered() {
        let src = line("d1", "s0", 0, "weird.tap", &[1.0, 2.0]);
        assert!(matches!(
            read_dump_jsonl(src.as_bytes(), &LoadOptions::default()),
            Err(Error::UnknownComponent(_))
        ));
        let mut opts = LoadOptions::default();
        opts.registry.register("weird.tap");
        assert_eq!(read_dump_jsonl(src.as_bytes(), &opts).unwrap().len(), 1);
    }

    #[test]
    fn dangling_refs_detected() {
        let corpus = Corpus::read_jsonl(
            &b"{\"doc_id\":\"d1\",\"text\":\"Rex ran\",\"spans\":[{\"span_id\":\"s0\",\"start\":0,\"end\":3,\"types\":[\"dog\"]}]}\n"[..],
        )
        .unwrap();
        let opts = LoadOptions {
            corpus: Some(&corpus),
            ..Default::default()
        };
        let ok = line("d1", "s0", 0, "attn.v", &[1.0])
            + &line("d1", EOS_SPAN_ID, 0, "attn.v", &[1.0])
            + &line("type:dog", DESCRIPTION_SPAN_ID, 0, "attn.v", &[1.0]);
        assert_eq!(read_dump_jsonl(ok.as_bytes(), &opts).unwrap().len(), 3);
        for bad in [
            line("d1", "s9", 0, "attn.v", &[1.0]),
            line("d9", "EOS", 0, "attn.v", &[1.0]),
        ] {
            assert!(matches!(
                read_dump_jsonl(bad.as_bytes(), &opts),
                Err(Error::DanglingSpanRef { .. })
            ));
        }
    }

    #[test]
    fn binary_truncation_rejected() {
        let mut store = RepresentationStore::new();
        store
            .insert(
                RepresentationKey::new(1, "attn.k"),
                SpanRef::new("a", "b"),
                vec![1.0, 2.0, 3.0],
            )
            .unwrap();
        let mut buf = Vec::new();
        store.write_binary(&mut buf).unwrap();
        assert_eq!(read_dump_binary(&buf[..], &LoadOptions::default()).unwrap(), store);
        buf.truncate(buf.len() - 2);
        assert!(matches!(
            read_dump_binary(&buf[..], &LoadOptions::default()),
            Err(Error::MalformedDump(_))
        ));
    }

    fn store_strategy() -> impl Strategy<Value = RepresentationStore> {
        prop::collection::vec((0u32..4, 0usize..3, prop::collection::vec(any::<u32>(), 5)), 0..12).prop_map(|rows| {
            let mut store = RepresentationStore::new();
            for (i, (block, comp, bits)) in rows.into_iter().enumerate() {
                let v: Vec<f32> = bits
                    .into_iter()
                    .map(|b| {
                        let x = f32::from_bits(b);
                        if x.is_finite() {
                            x
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let key = RepresentationKey::new(block, CANONICAL_COMPONENTS[comp]);
                store.insert(key, SpanRef::new(format!("d{i}"), "s0"), v).unwrap();
            }
            store
        })
    }

    proptest! {
        #[test]
        fn dumps_round_trip_bit_exact(store in store_strategy()) {
            let mut text = Vec::new();
            store.write_jsonl(&mut text).unwrap();
            let back = read_dump_jsonl(&text[..], &LoadOptions::default()).unwrap();
            for rec in store.records() {
                let got = back.get(&rec.key, &SpanRef::new(&rec.doc_id, &rec.span_id)).unwrap();
                let want: Vec<u32> = rec.vector.iter().map(|x| x.to_bits()).collect();
                let got: Vec<u32> = got.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(got, want);
            }
            let mut bin = Vec::new();
            store.write_binary(&mut bin).unwrap();
            prop_assert_eq!(read_dump_binary(&bin[..], &LoadOptions::default()).unwrap(), store);
        }
    }
}
