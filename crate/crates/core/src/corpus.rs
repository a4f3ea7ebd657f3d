//! Annotated corpora: documents, typed entity spans, type queries, and the
//! `##`-marker format emitted by category-agnostic entity detectors.
//!
//! All offsets are Unicode scalar-value indices into the document text, half-open.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker delimiting entity mentions in detector output.
pub const SPAN_MARKER: &str = "##";

/// Default character-Jaccard threshold for matching predicted to gold spans.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.8;

/// A reference to one span occurrence within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanRef {
    pub doc_id: String,
    pub span_id: String,
}

impl SpanRef {
    pub fn new(doc_id: impl Into<String>, span_id: impl Into<String>) -> Self {
        SpanRef {
            doc_id: doc_id.into(),
            span_id: span_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    pub span_id: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub types: BTreeSet<String>,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn shares_type_with(&self, other: &EntitySpan) -> bool {
        self.types.intersection(&other.types).next().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    doc_id: String,
    text: String,
    spans: Vec<EntitySpan>,
}

/// Byte offset of every char boundary, plus the final length.
fn char_boundaries(text: &str) -> Vec<usize> {
    text.char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect()
}

impl Document {
    /// Builds a document from `(span_id, start, end, types)` tuples, deriving and
    /// validating each span's surface form.
    pub fn new<I, S>(doc_id: impl Into<String>, text: impl Into<String>, spans: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, usize, usize, S)>,
        S: IntoIterator<Item = String>,
    {
        let doc_id = doc_id.into();
        let text = text.into();
        let bounds = char_boundaries(&text);
        let n_chars = bounds.len() - 1;
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for (span_id, start, end, types) in spans {
            let invalid = |reason: String| Error::InvalidSpan {
                doc_id: doc_id.clone(),
                span_id: span_id.clone(),
                reason,
            };
            if start >= end {
                return Err(invalid(format!("start {start} must be < end {end}")));
            }
            if end > n_chars {
                return Err(invalid(format!("end {end} exceeds text length {n_chars}")));
            }
            if !seen.insert(span_id.clone()) {
                return Err(invalid("duplicate span id".into()));
            }
            if let Some(prev) = out.last().map(|s: &EntitySpan| s.start) {
                if start < prev {
                    return Err(invalid("spans must be sorted by start offset".into()));
                }
            }
            out.push(EntitySpan {
                surface: text[bounds[start]..bounds[end]].to_string(),
                span_id,
                start,
                end,
                types: types.into_iter().collect(),
            });
        }
        Ok(Document {
            doc_id,
            text,
            spans: out,
        })
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn spans(&self) -> &[EntitySpan] {
        &self.spans
    }

    pub fn span(&self, span_id: &str) -> Option<&EntitySpan> {
        self.spans.iter().find(|s| s.span_id == span_id)
    }
}

#[derive(Serialize, Deserialize)]
struct WireSpan {
    span_id: String,
    start: usize,
    end: usize,
    #[serde(default)]
    types: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct WireDocument {
    doc_id: String,
    text: String,
    #[serde(default)]
    spans: Vec<WireSpan>,
}

impl From<&Document> for WireDocument {
    fn from(d: &Document) -> Self {
        WireDocument {
            doc_id: d.doc_id.clone(),
            text: d.text.clone(),
            spans: d
                .spans
                .iter()
                .map(|s| WireSpan {
                    span_id: s.span_id.clone(),
                    start: s.start,
                    end: s.end,
                    types: s.types.iter().cloned().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<WireDocument> for Document {
    type Error = Error;

    fn try_from(w: WireDocument) -> Result<Self> {
        Document::new(
            w.doc_id,
            w.text,
            w.spans.into_iter().map(|s| (s.span_id, s.start, s.end, s.types)),
        )
    }
}

/// An immutable collection of documents with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::DuplicateDocument(d.doc_id.clone()));
            }
        }
        Ok(Corpus { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn span(&self, r: &SpanRef) -> Option<&EntitySpan> {
        self.get(&r.doc_id).and_then(|d| d.span(&r.span_id))
    }

    /// Every labeled mention grouped by type label, in corpus order.
    pub fn mentions_by_type(&self) -> BTreeMap<String, Vec<SpanRef>> {
        let mut out: BTreeMap<String, Vec<SpanRef>> = BTreeMap::new();
        for d in &self.docs {
            for s in &d.spans {
                for t in &s.types {
                    out.entry(t.clone())
                        .or_default()
                        .push(SpanRef::new(&d.doc_id, &s.span_id));
                }
            }
        }
        out
    }

    /// Ids of documents containing at least one span labeled `label`.
    pub fn docs_with_type(&self, label: &str) -> BTreeSet<String> {
        self.docs
            .iter()
            .filter(|d| d.spans.iter().any(|s| s.types.contains(label)))
            .map(|d| d.doc_id.clone())
            .collect()
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut docs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let w: WireDocument = serde_json::from_str(&line).map_err(|e| Error::json(i + 1, e))?;
            docs.push(Document::try_from(w)?);
        }
        Corpus::new(docs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for d in &self.docs {
            serde_json::to_writer(&mut w, &WireDocument::from(d)).map_err(|e| Error::json(0, e))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeQuery {
    pub query_id: String,
    pub description: String,
    #[serde(rename = "relevant_docs", default)]
    pub relevant_docs: BTreeSet<String>,
}

impl TypeQuery {
    pub fn new(
        query_id: impl Into<String>,
        description: impl Into<String>,
        relevant_docs: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let q = TypeQuery {
            query_id: query_id.into(),
            description: description.into(),
            relevant_docs: relevant_docs.into_iter().collect(),
        };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<()> {
        if self.description.trim().is_empty() {
            return Err(Error::EmptyDescription(self.query_id.clone()));
        }
        Ok(())
    }
}

pub fn read_queries<R: BufRead>(reader: R) -> Result<Vec<TypeQuery>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: TypeQuery = serde_json::from_str(&line).map_err(|e| Error::json(i + 1, e))?;
        q.validate()?;
        out.push(q);
    }
    Ok(out)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<TypeQuery>> {
    read_queries(BufReader::new(File::open(path)?))
}

pub fn save_queries(queries: &[TypeQuery], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for q in queries {
        serde_json::to_writer(&mut w, q).map_err(|e| Error::json(0, e))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Strips `##` markers from detector output, returning the clean text and one
/// unlabeled span per marked region. Span ids are `s0`, `s1`, ... in order.
pub fn parse_marked_text(marked: &str) -> Result<(String, Vec<EntitySpan>)> {
    let pieces: Vec<&str> = marked.split(SPAN_MARKER).collect();
    let markers = pieces.len() - 1;
    if !markers.is_multiple_of(2) {
        return Err(Error::UnbalancedMarkers(markers));
    }
    let mut clean = String::with_capacity(marked.len());
    let mut spans = Vec::with_capacity(markers / 2);
    let mut pos = 0usize;
    for (i, piece) in pieces.iter().enumerate() {
        let n = piece.chars().count();
        if i % 2 == 1 {
            if n == 0 {
                return Err(Error::EmptySpan(pos));
            }
            spans.push(EntitySpan {
                span_id: format!("s{}", spans.len()),
                start: pos,
                end: pos + n,
                surface: piece.to_string(),
                types: BTreeSet::new(),
            });
        }
        clean.push_str(piece);
        pos += n;
    }
    Ok((clean, spans))
}

/// Inverse of [`parse_marked_text`] for non-overlapping spans.
pub fn render_marked(text: &str, spans: &[EntitySpan]) -> String {
    let bounds = char_boundaries(text);
    let mut out = String::with_capacity(text.len() + spans.len() * 4);
    let mut cursor = 0usize;
    for s in spans {
        out.push_str(&text[bounds[cursor]..bounds[s.start]]);
        out.push_str(SPAN_MARKER);
        out.push_str(&text[bounds[s.start]..bounds[s.end]]);
        out.push_str(SPAN_MARKER);
        cursor = s.end;
    }
    out.push_str(&text[bounds[cursor]..]);
    out
}

/// Character-level Jaccard similarity of two spans over the same text.
pub fn span_jaccard(a: &EntitySpan, b: &EntitySpan) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Fraction of gold spans matched by at least one predicted span whose
/// Jaccard similarity strictly exceeds `threshold`. A predicted span may
/// cover several gold spans.
pub fn detection_coverage(gold: &[EntitySpan], predicted: &[EntitySpan], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "match threshold must be in (0, 1], got {threshold}"
        )));
    }
    if gold.is_empty() {
        return Ok(1.0);
    }
    let matched = gold
        .iter()
        .filter(|g| predicted.iter().any(|p| span_jaccard(g, p) > threshold))
        .count();
    Ok(matched as f64 / gold.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn span(start: usize, end: usize) -> EntitySpan {
        EntitySpan {
            span_id: format!("{start}-{end}"),
            start,
            end,
            surface: String::new(),
            types: BTreeSet::new(),
        }
    }

    #[test]
    fn parses_detector_example() {
        let (clean, spans) = parse_marked_text("##Claremore Lake## is a reservoir in ##Rogers County##").unwrap();
        assert_eq!(clean, "Claremore Lake is a reservoir in Rogers County");
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start, spans[0].end), (0, 14));
        assert_eq!(spans[0].surface, "Claremore Lake");
        assert_eq!((spans[1].start, spans[1].end), (33, 46));
        assert_eq!(spans[1].surface, "Rogers County");
        assert!(spans.iter().all(|s| s.types.is_empty()));
    }

    #[test]
    fn unmarked_text_passes_through() {
        let (clean, spans) = parse_marked_text("no entities here").unwrap();
        assert_eq!(clean, "no entities here");
        assert!(spans.is_empty());
    }

    #[test]
    fn marker_errors() {
        assert!(matches!(
            parse_marked_text("##a## b ##"),
            Err(Error::UnbalancedMarkers(3))
        ));
        assert!(matches!(parse_marked_text("x ####"), Err(Error::EmptySpan(2))));
    }

    #[test]
    fn offsets_count_chars_not_bytes() {
        let (clean, spans) = parse_marked_text("Visit ##Zürich## and ##Łódź##.").unwrap();
        let doc = Document::new(
            "d",
            clean.clone(),
            spans
                .iter()
                .map(|s| (s.span_id.clone(), s.start, s.end, Vec::<String>::new())),
        )
        .unwrap();
        assert_eq!(doc.spans()[0].surface, "Zürich");
        assert_eq!(doc.spans()[1].surface, "Łódź");
        assert_eq!((spans[1].start, spans[1].end), (17, 21));
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(span_jaccard(&span(0, 10), &span(0, 10)), 1.0);
        assert!((span_jaccard(&span(0, 10), &span(5, 15)) - 5.0 / 15.0).abs() < 1e-12);
        assert_eq!(span_jaccard(&span(0, 3), &span(10, 12)), 0.0);
        assert_eq!(span_jaccard(&span(0, 3), &span(3, 6)), 0.0);
    }

    #[test]
    fn coverage_examples() {
        let gold = vec![span(0, 10), span(20, 30)];
        assert_eq!(detection_coverage(&gold, &gold, 0.8).unwrap(), 1.0);
        let pred = vec![span(0, 10), span(22, 30)];
        // 8/10 = 0.8 does not exceed the threshold
        assert_eq!(detection_coverage(&gold, &pred, 0.8).unwrap(), 0.5);
        assert_eq!(detection_coverage(&[], &pred, 0.8).unwrap(), 1.0);
        assert!(detection_coverage(&gold, &pred, 0.0).is_err());
        assert!(detection_coverage(&gold, &pred, 1.5).is_err());
    }

    #[test]
    fn one_prediction_covers_many_gold() {
        let gold = vec![span(0, 10), span(0, 10)];
        assert_eq!(detection_coverage(&gold, &[span(0, 10)], 0.8).unwrap(), 1.0);
    }

    #[test]
    fn document_validation() {
        let bad = |spans: Vec<(String, usize, usize, Vec<String>)>| Document::new("d", "hello", spans);
        assert!(bad(vec![("a".into(), 2, 2, vec![])]).is_err());
        assert!(bad(vec![("a".into(), 2, 6, vec![])]).is_err());
        assert!(bad(vec![("a".into(), 3, 4, vec![]), ("b".into(), 0, 2, vec![])]).is_err());
        assert!(bad(vec![("a".into(), 0, 2, vec![]), ("a".into(), 1, 3, vec![])]).is_err());
        // nested spans are fine
        let d = bad(vec![("a".into(), 0, 5, vec![]), ("b".into(), 1, 3, vec![])]).unwrap();
        assert_eq!(d.spans()[1].surface, "el");
    }

    #[test]
    fn corpus_rejects_duplicate_ids() {
        let d = Document::new("x", "t", Vec::<(String, usize, usize, Vec<String>)>::new()).unwrap();
        assert!(matches!(
            Corpus::new(vec![d.clone(), d]),
            Err(Error::DuplicateDocument(_))
        ));
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let src = concat!(
            r#"{"doc_id":"d1","text":"Claremore Lake is a reservoir","spans":[{"span_id":"s0","start":0,"end":14,"types":["lake"]}]}"#,
            "\n",
            r#"{"doc_id":"d2","text":"nothing","spans":[]}"#,
            "\n"
        );
        let c = Corpus::read_jsonl(src.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("d1").unwrap().spans()[0].surface, "Claremore Lake");
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), src);
        assert_eq!(Corpus::read_jsonl(&buf[..]).unwrap(), c);
    }

    #[test]
    fn bad_corpus_line_reports_line_number() {
        let src = "{\"doc_id\":\"d1\",\"text\":\"a\"}\n{oops\n";
        assert!(matches!(
            Corpus::read_jsonl(src.as_bytes()),
            Err(Error::Json { line: 2, .. })
        ));
    }

    #[test]
    fn queries_parse_and_validate() {
        let src = "{\"query_id\":\"q1\",\"description\":\"dinosaur\",\"relevant_docs\":[\"a\",\"b\"]}\n";
        let qs = read_queries(src.as_bytes()).unwrap();
        assert_eq!(qs[0].relevant_docs.len(), 2);
        let empty = "{\"query_id\":\"q1\",\"description\":\" \",\"relevant_docs\":[]}\n";
        assert!(matches!(
            read_queries(empty.as_bytes()),
            Err(Error::EmptyDescription(_))
        ));
    }

    fn marked_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec(("[a-zé ]{0,6}", "[a-zA-Zł ]{1,6}"), 0..5).prop_flat_map(|parts| {
            "[a-z ]{0,4}".prop_map(move |tail| {
                let mut s = String::new();
                for (plain, ent) in &parts {
                    s.push_str(plain);
                    s.push_str("##");
                    s.push_str(ent);
                    s.push_str("##");
                }
                s.push_str(&tail);
                s
            })
        })
    }

    proptest! {
        #[test]
        fn marker_round_trip(marked in marked_strategy()) {
            let (clean, spans) = parse_marked_text(&marked).unwrap();
            prop_assert_eq!(render_marked(&clean, &spans), marked);
        }

        #[test]
        fn jaccard_symmetric_and_identity(a0 in 0usize..40, la in 1usize..20, b0 in 0usize..40, lb in 1usize..20) {
            let (a, b) = (span(a0, a0 + la), span(b0, b0 + lb));
            let j = span_jaccard(&a, &b);
            prop_assert_eq!(j, span_jaccard(&b, &a));
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(j == 1.0, a0 == b0 && la == lb);
        }

        #[test]
        fn coverage_monotone_in_predictions(
            gold in prop::collection::vec((0usize..50, 1usize..10), 1..6),
            pred in prop::collection::vec((0usize..50, 1usize..10), 0..8),
            extra in (0usize..50, 1usize..10),
        ) {
            let gold: Vec<_> = gold.into_iter().map(|(s, l)| span(s, s + l)).collect();
            let mut pred: Vec<_> = pred.into_iter().map(|(s, l)| span(s, s + l)).collect();
            let before = detection_coverage(&gold, &pred, 0.8).unwrap();
            pred.push(span(extra.0, extra.0 + extra.1));
            prop_assert!(detection_coverage(&gold, &pred, 0.8).unwrap() >= before);
        }
    }
}
