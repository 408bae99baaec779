//! Embedding tables, corpora, gold annotations, and latent export.
//!
//! File formats are plain UTF-8 text with LF line endings and single-space
//! separation. An embedding file holds one record per line (token followed
//! by its vector); an optional first line with exactly two integers
//! (`vocab_size dim`) is treated as a header and skipped. Token, tag, and
//! head files hold one sentence per line. Heads are 1-based with 0 for the
//! root's child.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::matrix::Mat;
use crate::scalar::Scalar;

/// What to do when a corpus token is missing from the embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnkPolicy {
    /// Fail loading.
    Error,
    /// Substitute the mean of all table vectors.
    MeanVector,
}

/// An ordered vocabulary with one embedding vector per token.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<S> {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    vectors: Mat<S>,
    pub unk_policy: UnkPolicy,
}

impl<S: Scalar> EmbeddingTable<S> {
    pub fn new(vocab: Vec<String>, vectors: Mat<S>, unk_policy: UnkPolicy) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate token {tok:?} in table")));
            }
        }
        let dim = vectors.cols();
        Ok(EmbeddingTable { vocab, index, dim, vectors, unk_policy })
    }

    /// Parse a whitespace-separated embedding file. `expected_dim`, when
    /// given, must match the dimension found in the file.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&display, e))?;
        let reader = BufReader::new(file);

        let mut vocab = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut data: Vec<S> = Vec::new();
        let mut dim: Option<usize> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|e| Error::io(&display, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            // Optional "V d" header: exactly two integer fields on line 1.
            if lineno == 1
                && fields.len() == 2
                && fields.iter().all(|f| f.parse::<usize>().is_ok())
            {
                dim = Some(fields[1].parse::<usize>().unwrap());
                continue;
            }
            if fields.len() < 2 {
                return Err(Error::parse(&display, lineno, "expected token and vector"));
            }
            let token = fields[0].to_string();
            let row_dim = fields.len() - 1;
            match dim {
                None => dim = Some(row_dim),
                Some(d) if d != row_dim => {
                    return Err(Error::parse(
                        &display,
                        lineno,
                        format!("dimension mismatch: expected {d}, found {row_dim}"),
                    ));
                }
                _ => {}
            }
            if index.insert(token.clone(), vocab.len()).is_some() {
                return Err(Error::parse(&display, lineno, format!("duplicate token {token:?}")));
            }
            for f in &fields[1..] {
                let v: S = f
                    .parse()
                    .map_err(|_| Error::parse(&display, lineno, format!("non-numeric value {f:?}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(&display, lineno, format!("non-finite value {f:?}")));
                }
                data.push(v);
            }
            vocab.push(token);
        }
        let dim = dim.ok_or_else(|| Error::parse(&display, 1, "empty embedding file"))?;
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(Error::DimensionMismatch {
                    context: "embedding file",
                    expected,
                    found: dim,
                });
            }
        }
        let vectors = Mat::from_vec(vocab.len(), dim, data);
        Ok(EmbeddingTable { vocab, index, dim, vectors, unk_policy: UnkPolicy::MeanVector })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn lookup(&self, token: &str) -> Option<&[S]> {
        self.index.get(token).map(|&i| self.vectors.row(i))
    }

    /// Mean of all table vectors, the unknown-token fallback.
    pub fn mean_vector(&self) -> Vec<S> {
        let mut mean = vec![S::zero(); self.dim];
        for r in 0..self.vectors.rows() {
            for (m, &v) in mean.iter_mut().zip(self.vectors.row(r)) {
                *m += v;
            }
        }
        let n = S::of_usize(self.vectors.rows().max(1));
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// One sentence: parallel tokens, embeddings, and optional gold annotations.
#[derive(Debug, Clone)]
pub struct Sentence<S> {
    pub tokens: Vec<String>,
    /// `len × dim` observed embedding vectors.
    pub embeddings: Mat<S>,
    pub gold_tags: Option<Vec<String>>,
    /// 1-based heads, 0 = root's child.
    pub gold_heads: Option<Vec<usize>>,
    /// Set when the gold tree is valid but not projective.
    pub non_projective: bool,
}

impl<S: Scalar> Sentence<S> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A non-empty, dimension-consistent list of sentences.
#[derive(Debug, Clone)]
pub struct Corpus<S> {
    pub sentences: Vec<Sentence<S>>,
    pub tag_inventory: Option<BTreeSet<String>>,
    dim: usize,
}

impl<S: Scalar> Corpus<S> {
    pub fn new(sentences: Vec<Sentence<S>>, tag_inventory: Option<BTreeSet<String>>) -> Result<Self> {
        let dim = match sentences.first() {
            None => return Err(Error::EmptyCorpus("")),
            Some(s) => s.embeddings.cols(),
        };
        for s in &sentences {
            if s.is_empty() {
                return Err(Error::EmptyCorpus(" (zero-length sentence)"));
            }
            if s.embeddings.cols() != dim {
                return Err(Error::DimensionMismatch {
                    context: "corpus embedding dimension",
                    expected: dim,
                    found: s.embeddings.cols(),
                });
            }
        }
        Ok(Corpus { sentences, tag_inventory, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::io(&display, e)))
        .collect()
}

/// Single root, in-range heads, acyclic. Returns whether the tree is
/// projective (every token between a head and its dependent descends from
/// that head).
fn validate_heads(heads: &[usize], sentence: usize) -> Result<bool> {
    let n = heads.len();
    for (i, &h) in heads.iter().enumerate() {
        if h > n {
            return Err(Error::HeadOutOfRange { sentence, head: h, len: n });
        }
        if h == i + 1 {
            return Err(Error::MalformedTree {
                sentence,
                msg: format!("token {} is its own head", i + 1),
            });
        }
    }
    let roots = heads.iter().filter(|&&h| h == 0).count();
    if roots != 1 {
        return Err(Error::MalformedTree { sentence, msg: format!("{roots} root tokens, expected 1") });
    }
    for start in 1..=n {
        let mut cur = start;
        let mut steps = 0;
        while heads[cur - 1] != 0 {
            cur = heads[cur - 1];
            steps += 1;
            if steps > n {
                return Err(Error::MalformedTree { sentence, msg: "cycle in head assignments".into() });
            }
        }
    }
    let descends_from = |anc: usize, mut node: usize| -> bool {
        for _ in 0..n {
            let h = heads[node - 1];
            if h == anc {
                return true;
            }
            if h == 0 {
                return false;
            }
            node = h;
        }
        false
    };
    for m in 1..=n {
        let h = heads[m - 1];
        if h == 0 {
            continue;
        }
        let (lo, hi) = if h < m { (h, m) } else { (m, h) };
        for p in lo + 1..hi {
            if !descends_from(h, p) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Load a token corpus, attach embeddings, and cross-validate optional gold
/// tag and head files (same line/sentence shapes).
pub fn load_corpus<S: Scalar>(
    tokens_path: &Path,
    table: &EmbeddingTable<S>,
    tags_path: Option<&Path>,
    heads_path: Option<&Path>,
) -> Result<Corpus<S>> {
    let token_lines = read_lines(tokens_path)?;
    let tag_lines = tags_path.map(read_lines).transpose()?;
    let head_lines = heads_path.map(read_lines).transpose()?;
    for (name, lines) in [("tags", &tag_lines), ("heads", &head_lines)] {
        if let Some(lines) = lines {
            if lines.len() != token_lines.len() {
                return Err(Error::DimensionMismatch {
                    context: if name == "tags" {
                        "tags file line count"
                    } else {
                        "heads file line count"
                    },
                    expected: token_lines.len(),
                    found: lines.len(),
                });
            }
        }
    }

    let mean = table.mean_vector();
    let mut sentences = Vec::with_capacity(token_lines.len());
    let mut inventory: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in token_lines.iter().enumerate() {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::parse(tokens_path.display().to_string(), idx + 1, "empty sentence"));
        }
        let mut emb = Mat::zeros(tokens.len(), table.dim());
        for (i, tok) in tokens.iter().enumerate() {
            match table.lookup(tok) {
                Some(v) => emb.row_mut(i).copy_from_slice(v),
                None => match table.unk_policy {
                    UnkPolicy::MeanVector => emb.row_mut(i).copy_from_slice(&mean),
                    UnkPolicy::Error => {
                        return Err(Error::UnknownToken { token: tok.clone(), sentence: idx + 1 })
                    }
                },
            }
        }
        let gold_tags = match &tag_lines {
            None => None,
            Some(lines) => {
                let tags: Vec<String> = lines[idx].split_whitespace().map(str::to_string).collect();
                if tags.len() != tokens.len() {
                    return Err(Error::DimensionMismatch {
                        context: "tags per sentence",
                        expected: tokens.len(),
                        found: tags.len(),
                    });
                }
                inventory.extend(tags.iter().cloned());
                Some(tags)
            }
        };
        let (gold_heads, non_projective) = match &head_lines {
            None => (None, false),
            Some(lines) => {
                let heads: Vec<usize> = lines[idx]
                    .split_whitespace()
                    .map(|f| {
                        f.parse::<usize>().map_err(|_| {
                            Error::parse(
                                heads_path.unwrap().display().to_string(),
                                idx + 1,
                                format!("non-integer head {f:?}"),
                            )
                        })
                    })
                    .collect::<Result<_>>()?;
                if heads.len() != tokens.len() {
                    return Err(Error::DimensionMismatch {
                        context: "heads per sentence",
                        expected: tokens.len(),
                        found: heads.len(),
                    });
                }
                let projective = validate_heads(&heads, idx + 1)?;
                (Some(heads), !projective)
            }
        };
        sentences.push(Sentence { tokens, embeddings: emb, gold_tags, gold_heads, non_projective });
    }
    let tag_inventory = tag_lines.is_some().then_some(inventory);
    Corpus::new(sentences, tag_inventory)
}

/// Punctuation tokens stripped by default.
pub fn default_punct_set() -> HashSet<String> {
    [
        ",", ".", ":", ";", "!", "?", "``", "''", "`", "'", "(", ")", "[", "]", "{", "}", "--",
        "-", "...", "-LRB-", "-RRB-", "-LCB-", "-RCB-", "$", "#", "%",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Strip punctuation tokens (re-mapping gold heads), then drop sentences
/// longer than `max_len`.
///
/// A dependent of a removed token is reattached to that token's own head,
/// applied transitively through chains of removed tokens. If re-mapping
/// leaves several root tokens, the leftmost stays the root and the others
/// attach to it.
pub fn filter_by_length<S: Scalar>(
    corpus: &Corpus<S>,
    max_len: usize,
    strip_punct: bool,
    punct_set: &HashSet<String>,
) -> Result<Corpus<S>> {
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be at least 1".into()));
    }
    let mut kept = Vec::new();
    for (idx, sent) in corpus.sentences.iter().enumerate() {
        let sent = if strip_punct {
            match strip_punct_sentence(sent, punct_set, idx + 1)? {
                None => continue,
                Some(s) => s,
            }
        } else {
            sent.clone()
        };
        if sent.len() <= max_len {
            kept.push(sent);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus(" (all sentences filtered out)"));
    }
    Corpus::new(kept, corpus.tag_inventory.clone())
}

fn strip_punct_sentence<S: Scalar>(
    sent: &Sentence<S>,
    punct_set: &HashSet<String>,
    sentence_no: usize,
) -> Result<Option<Sentence<S>>> {
    let n = sent.len();
    let is_punct: Vec<bool> = sent.tokens.iter().map(|t| punct_set.contains(t)).collect();
    if is_punct.iter().all(|&p| !p) {
        return Ok(Some(sent.clone()));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !is_punct[i]).collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let mut new_index = vec![usize::MAX; n];
    for (new_i, &old_i) in keep.iter().enumerate() {
        new_index[old_i] = new_i;
    }

    let gold_heads = match &sent.gold_heads {
        None => None,
        Some(heads) => {
            // Resolve each surviving token's head through removed tokens.
            let resolve = |mut h: usize| -> Result<usize> {
                let mut steps = 0;
                while h != 0 && is_punct[h - 1] {
                    h = heads[h - 1];
                    steps += 1;
                    if steps > n {
                        return Err(Error::MalformedTree {
                            sentence: sentence_no,
                            msg: "cycle while re-mapping heads around punctuation".into(),
                        });
                    }
                }
                Ok(h)
            };
            let mut remapped = Vec::with_capacity(keep.len());
            for &old_i in &keep {
                let h = resolve(heads[old_i])?;
                remapped.push(if h == 0 { 0 } else { new_index[h - 1] + 1 });
            }
            // Several tokens may now point at the root; keep the leftmost.
            let roots: Vec<usize> = (0..remapped.len()).filter(|&i| remapped[i] == 0).collect();
            if let Some((&first, rest)) = roots.split_first() {
                for &r in rest {
                    remapped[r] = first + 1;
                }
            }
            Some(remapped)
        }
    };

    let mut emb = Mat::zeros(keep.len(), sent.embeddings.cols());
    for (new_i, &old_i) in keep.iter().enumerate() {
        emb.row_mut(new_i).copy_from_slice(sent.embeddings.row(old_i));
    }
    let non_projective = match &gold_heads {
        Some(heads) => !validate_heads(heads, sentence_no)?,
        None => false,
    };
    Ok(Some(Sentence {
        tokens: keep.iter().map(|&i| sent.tokens[i].clone()).collect(),
        embeddings: emb,
        gold_tags: sent
            .gold_tags
            .as_ref()
            .map(|tags| keep.iter().map(|&i| tags[i].clone()).collect()),
        gold_heads,
        non_projective,
    }))
}

/// Write one record per token type: the token followed by the inverse
/// projection of its embedding, in the embedding-file format. Types appear
/// in first-occurrence order.
pub fn export_latent<S: Scalar>(corpus: &Corpus<S>, flow: &Flow<S>, path: &Path) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(""));
    }
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut out = BufWriter::new(file);
    let mut seen: HashSet<String> = HashSet::new();
    for sent in &corpus.sentences {
        for (i, tok) in sent.tokens.iter().enumerate() {
            if !seen.insert(tok.clone()) {
                continue;
            }
            let (latent, _) = flow.inverse_apply(sent.embeddings.row(i))?;
            write!(out, "{tok}").map_err(|e| Error::io(&display, e))?;
            for v in &latent {
                write!(out, " {v}").map_err(|e| Error::io(&display, e))?;
            }
            writeln!(out).map_err(|e| Error::io(&display, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(&display, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, contents: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        p
    }

    fn table_from(pairs: &[(&str, Vec<f64>)]) -> EmbeddingTable<f64> {
        let vocab: Vec<String> = pairs.iter().map(|(t, _)| t.to_string()).collect();
        let rows: Vec<Vec<f64>> = pairs.iter().map(|(_, v)| v.clone()).collect();
        EmbeddingTable::new(vocab, Mat::from_rows(&rows), UnkPolicy::MeanVector).unwrap()
    }

    #[test]
    fn load_embeddings_plain_and_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let plain = write_tmp(&dir, "e.txt", "a 1.0 2.0\nb 3.0 4.0\n");
        let t = EmbeddingTable::<f64>::load(&plain, None).unwrap();
        assert_eq!(t.vocab(), &["a".to_string(), "b".to_string()]);
        assert_eq!(t.dim(), 2);
        assert_eq!(t.lookup("b").unwrap(), &[3.0, 4.0]);

        let with_header = write_tmp(&dir, "h.txt", "2 2\na 1.0 2.0\nb 3.0 4.0\n");
        let t2 = EmbeddingTable::<f64>::load(&with_header, None).unwrap();
        assert_eq!(t2.vocab(), t.vocab());
        assert_eq!(t2.lookup("a").unwrap(), t.lookup("a").unwrap());
    }

    #[test]
    fn load_embeddings_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let bad_dim = write_tmp(&dir, "d.txt", "a 1.0\nb 2.0 3.0\n");
        match EmbeddingTable::<f64>::load(&bad_dim, None) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("dimension mismatch"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let non_numeric = write_tmp(&dir, "n.txt", "a 1.0 x\n");
        assert!(matches!(
            EmbeddingTable::<f64>::load(&non_numeric, None),
            Err(Error::Parse { line: 1, .. })
        ));
        let dup = write_tmp(&dir, "dup.txt", "a 1.0\na 2.0\n");
        match EmbeddingTable::<f64>::load(&dup, None) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let ok = write_tmp(&dir, "ok.txt", "a 1.0 2.0\n");
        assert!(matches!(
            EmbeddingTable::<f64>::load(&ok, Some(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn load_corpus_attaches_embeddings_and_gold() {
        let dir = tempfile::tempdir().unwrap();
        let table = table_from(&[("the", vec![1.0, 0.0]), ("dog", vec![0.0, 1.0])]);
        let toks = write_tmp(&dir, "t.txt", "the dog\n");
        let heads = write_tmp(&dir, "h.txt", "2 0\n");
        let corpus = load_corpus(&toks, &table, None, Some(&heads)).unwrap();
        assert_eq!(corpus.len(), 1);
        let s = &corpus.sentences[0];
        assert_eq!(s.len(), 2);
        assert_eq!(s.embeddings.row(0), &[1.0, 0.0]);
        assert_eq!(s.gold_heads.as_deref(), Some(&[2usize, 0][..]));
        assert!(!s.non_projective);
    }

    #[test]
    fn load_corpus_rejects_bad_heads() {
        let dir = tempfile::tempdir().unwrap();
        let table = table_from(&[("a", vec![1.0]), ("b", vec![2.0])]);
        let toks = write_tmp(&dir, "t.txt", "a b\n");
        let heads = write_tmp(&dir, "h.txt", "3 0\n");
        assert!(matches!(
            load_corpus(&toks, &table, None, Some(&heads)),
            Err(Error::HeadOutOfRange { head: 3, len: 2, .. })
        ));
        let two_roots = write_tmp(&dir, "h2.txt", "0 0\n");
        assert!(matches!(
            load_corpus(&toks, &table, None, Some(&two_roots)),
            Err(Error::MalformedTree { .. })
        ));
    }

    #[test]
    fn load_corpus_flags_non_projective_trees() {
        let dir = tempfile::tempdir().unwrap();
        let table = table_from(&[
            ("a", vec![1.0]),
            ("b", vec![2.0]),
            ("c", vec![3.0]),
            ("d", vec![4.0]),
        ]);
        let toks = write_tmp(&dir, "t.txt", "a b c d\n");
        // Arcs 3->1 and 4->2 cross.
        let heads = write_tmp(&dir, "h.txt", "3 4 0 3\n");
        let corpus = load_corpus(&toks, &table, None, Some(&heads)).unwrap();
        assert!(corpus.sentences[0].non_projective);
    }

    #[test]
    fn unknown_token_policies() {
        let dir = tempfile::tempdir().unwrap();
        let mut table = table_from(&[("a", vec![2.0]), ("b", vec![4.0])]);
        let toks = write_tmp(&dir, "t.txt", "a z\n");
        let corpus = load_corpus(&toks, &table, None, None).unwrap();
        // Mean of [2], [4] is [3].
        assert_eq!(corpus.sentences[0].embeddings.row(1), &[3.0]);
        table.unk_policy = UnkPolicy::Error;
        assert!(matches!(
            load_corpus(&toks, &table, None, None),
            Err(Error::UnknownToken { .. })
        ));
    }

    #[test]
    fn filter_drops_long_sentences() {
        let mk = |len: usize| Sentence {
            tokens: vec!["a".to_string(); len],
            embeddings: Mat::filled(len, 1, 1.0),
            gold_tags: None,
            gold_heads: None,
            non_projective: false,
        };
        let corpus = Corpus::new(vec![mk(12), mk(3)], None).unwrap();
        let filtered = filter_by_length(&corpus, 10, false, &default_punct_set()).unwrap();
        assert_eq!(filtered.len(), 1);
        assert_eq!(filtered.sentences[0].len(), 3);
    }

    #[test]
    fn punct_removal_remaps_heads() {
        // "a , b" with heads [0, 1, 1]: both survivors keep head links to a.
        let sent = Sentence {
            tokens: vec!["a".into(), ",".into(), "b".into()],
            embeddings: Mat::filled(3, 1, 0.5),
            gold_tags: Some(vec!["X".into(), "PU".into(), "Y".into()]),
            gold_heads: Some(vec![0, 1, 1]),
            non_projective: false,
        };
        let corpus = Corpus::new(vec![sent], None).unwrap();
        let filtered = filter_by_length(&corpus, 10, true, &default_punct_set()).unwrap();
        let s = &filtered.sentences[0];
        assert_eq!(s.tokens, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(s.gold_heads.as_deref(), Some(&[0usize, 1][..]));
        assert_eq!(s.gold_tags.as_deref(), Some(&["X".to_string(), "Y".to_string()][..]));
    }

    #[test]
    fn punct_removal_reattaches_dependents_transitively() {
        // "x , , y": y hangs off the second comma, which hangs off the
        // first, which hangs off x. y must reattach to x.
        let sent = Sentence {
            tokens: vec!["x".into(), ",".into(), ",".into(), "y".into()],
            embeddings: Mat::filled(4, 1, 0.0),
            gold_tags: None,
            gold_heads: Some(vec![0, 1, 2, 3]),
            non_projective: false,
        };
        let corpus = Corpus::new(vec![sent], None).unwrap();
        let filtered = filter_by_length(&corpus, 10, true, &default_punct_set()).unwrap();
        assert_eq!(filtered.sentences[0].gold_heads.as_deref(), Some(&[0usize, 1][..]));
    }

    #[test]
    fn punct_root_child_keeps_single_root() {
        // The comma is the root's child; both a and b hang off it. After
        // removal the leftmost becomes the root and b attaches to it.
        let sent = Sentence {
            tokens: vec!["a".into(), ",".into(), "b".into()],
            embeddings: Mat::filled(3, 1, 0.0),
            gold_tags: None,
            gold_heads: Some(vec![2, 0, 2]),
            non_projective: false,
        };
        let corpus = Corpus::new(vec![sent], None).unwrap();
        let filtered = filter_by_length(&corpus, 10, true, &default_punct_set()).unwrap();
        let heads = filtered.sentences[0].gold_heads.as_deref().unwrap();
        assert_eq!(heads, &[0, 1]);
    }

    #[test]
    fn filter_is_idempotent() {
        let sent = Sentence::<f64> {
            tokens: vec!["a".into(), ",".into(), "b".into(), "c".into()],
            embeddings: Mat::filled(4, 1, 0.0),
            gold_tags: None,
            gold_heads: Some(vec![0, 1, 1, 3]),
            non_projective: false,
        };
        let corpus = Corpus::new(vec![sent], None).unwrap();
        let once = filter_by_length(&corpus, 3, true, &default_punct_set()).unwrap();
        let twice = filter_by_length(&once, 3, true, &default_punct_set()).unwrap();
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.sentences.iter().zip(&twice.sentences) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.gold_heads, b.gold_heads);
        }
    }

    #[test]
    fn filter_empty_result_is_an_error() {
        let sent = Sentence::<f64> {
            tokens: vec!["a".into(); 5],
            embeddings: Mat::filled(5, 1, 0.0),
            gold_tags: None,
            gold_heads: None,
            non_projective: false,
        };
        let corpus = Corpus::new(vec![sent], None).unwrap();
        assert!(matches!(
            filter_by_length(&corpus, 3, false, &default_punct_set()),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn export_identity_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let table = table_from(&[
            ("a", vec![1.25, -0.5]),
            ("b", vec![0.333333333333333314829616256247, 2.0]),
        ]);
        let toks = write_tmp(&dir, "t.txt", "a b a\n");
        let corpus = load_corpus(&toks, &table, None, None).unwrap();
        let out = dir.path().join("latent.txt");
        export_latent(&corpus, &Flow::identity(2), &out).unwrap();
        let reloaded = EmbeddingTable::<f64>::load(&out, Some(2)).unwrap();
        assert_eq!(reloaded.vocab(), table.vocab());
        for tok in ["a", "b"] {
            assert_eq!(reloaded.lookup(tok).unwrap(), table.lookup(tok).unwrap());
        }
    }

    #[test]
    fn export_applies_the_coupling_map() {
        // One left-fixed layer with g(u) = relu(u): (1, 1) -> (1, 2).
        let mut layer =
            crate::flow::CouplingLayer::<f64>::zeros(2, crate::flow::Side::LeftFixed).unwrap();
        layer.w1.set(0, 0, 1.0);
        layer.w2.set(0, 0, 1.0);
        let flow = Flow::from_layers(2, vec![layer]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let table = table_from(&[("a", vec![1.0, 1.0])]);
        let toks = write_tmp(&dir, "t.txt", "a\n");
        let corpus = load_corpus(&toks, &table, None, None).unwrap();
        let out = dir.path().join("latent.txt");
        export_latent(&corpus, &flow, &out).unwrap();
        let reloaded = EmbeddingTable::<f64>::load(&out, Some(2)).unwrap();
        assert_eq!(reloaded.lookup("a").unwrap(), &[1.0, 2.0]);
    }
}
