//! Plain-text readers and writers for embeddings, lexicons, stop-lists and
//! frequency tables.
//!
//! Embedding files hold one `token v1 ... vd` row per line, optionally
//! preceded by a word2vec-style `n d` header. Lexicons are `source<TAB>target`
//! lines, with a single space accepted as separator when no tab is present.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVectorView};

use crate::error::{AlignError, Result};

/// A value read from disk together with the number of input lines that were
/// skipped while reading it.
#[derive(Clone, Debug)]
pub struct Loaded<T> {
    pub value: T,
    pub skipped: usize,
}

/// A vocabulary and its `d × n` matrix of column embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    tokens: Vec<String>,
    vectors: DMatrix<f64>,
    token_index: HashMap<String, usize>,
}

impl EmbeddingSet {
    /// Builds a set from tokens and a matrix whose column `i` embeds `tokens[i]`.
    pub fn new(tokens: Vec<String>, vectors: DMatrix<f64>) -> Result<Self> {
        if vectors.ncols() != tokens.len() {
            return Err(AlignError::Shape(format!(
                "{} tokens but {} vector columns",
                tokens.len(),
                vectors.ncols()
            )));
        }
        if vectors.nrows() == 0 {
            return Err(AlignError::Shape("embedding dimension is zero".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(AlignError::NonFinite("embedding vectors"));
        }
        let mut token_index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if token_index.insert(tok.clone(), i).is_some() {
                return Err(AlignError::InvalidArgument(format!(
                    "duplicate token {tok:?}"
                )));
            }
        }
        Ok(EmbeddingSet {
            tokens,
            vectors,
            token_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.token_index.get(token).copied()
    }

    pub fn vector(&self, idx: usize) -> DVectorView<'_, f64> {
        self.vectors.column(idx)
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    /// Scales every nonzero column to unit Euclidean norm.
    pub fn normalize(&mut self) {
        for mut col in self.vectors.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Keep only the first `limit` valid rows.
    pub limit: Option<usize>,
    /// Scale vectors to unit length after loading.
    pub normalize: bool,
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut fields = line.split_whitespace();
    let n = fields.next()?.parse().ok()?;
    let d = fields.next()?.parse().ok()?;
    if fields.next().is_some() {
        return None;
    }
    Some((n, d))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| AlignError::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .map(|l| l.trim_end_matches('\r'))
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Loads a text embedding file (GloVe layout, word2vec header optional).
///
/// Rows with the wrong vector length, unparseable or non-finite values, or a
/// token already seen are skipped and counted. When more than half of the
/// examined rows disagree with the dimension the file is rejected.
pub fn load_embeddings(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Loaded<EmbeddingSet>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut lines = content_lines(&text).peekable();

    let header_dim = match lines.peek() {
        Some((_, first)) => match parse_header(first) {
            Some((_, d)) => {
                lines.next();
                Some(d)
            }
            None => None,
        },
        None => None,
    };
    let rows: Vec<&str> = lines.map(|(_, l)| l).collect();

    let dim = match header_dim {
        Some(d) => d,
        None => modal_dim(&rows).ok_or_else(|| AlignError::format(path, "zero valid rows"))?,
    };
    if dim == 0 {
        return Err(AlignError::format(path, "embedding dimension is zero"));
    }

    let limit = opts.limit.unwrap_or(usize::MAX);
    let mut tokens = Vec::new();
    let mut seen = HashSet::new();
    let mut data = Vec::new();
    let mut skipped = 0;
    let mut wrong_dim = 0;
    let mut examined = 0;
    let mut values = Vec::with_capacity(dim);

    for row in rows {
        if tokens.len() >= limit {
            break;
        }
        examined += 1;
        let mut fields = row.split_whitespace();
        let token = match fields.next() {
            Some(t) => t,
            None => continue,
        };
        values.clear();
        let mut ok = true;
        for f in fields {
            match f.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    ok = false;
                    values.push(f64::NAN);
                }
            }
        }
        if values.len() != dim {
            wrong_dim += 1;
            skipped += 1;
            continue;
        }
        if !ok || !seen.insert(token) {
            skipped += 1;
            continue;
        }
        tokens.push(token.to_string());
        data.extend_from_slice(&values);
    }

    if examined > 0 && 2 * wrong_dim > examined {
        return Err(AlignError::format(
            path,
            format!("{wrong_dim} of {examined} rows disagree with dimension {dim}"),
        ));
    }
    if tokens.is_empty() {
        return Err(AlignError::format(path, "zero valid rows"));
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} embedding rows", path.display());
    }

    let n = tokens.len();
    let mut set = EmbeddingSet::new(tokens, DMatrix::from_vec(dim, n, data))?;
    if opts.normalize {
        set.normalize();
    }
    Ok(Loaded {
        value: set,
        skipped,
    })
}

/// Most common vector length among the first rows of a headerless file.
fn modal_dim(rows: &[&str]) -> Option<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for row in rows.iter().take(1000) {
        let len = row.split_whitespace().count();
        if len >= 2 {
            *counts.entry(len - 1).or_default() += 1;
        }
    }
    // ties resolve to the smaller dimension so the choice is deterministic
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(d, _)| d)
}

/// Writes embeddings with a `n d` header and 17 significant digits per value.
pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| AlignError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(out, "{} {}", set.len(), set.dim())?;
        for (tok, col) in set.tokens.iter().zip(set.vectors.column_iter()) {
            write!(out, "{tok}")?;
            for v in col.iter() {
                write!(out, " {v:.16e}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| AlignError::io(path, e))
}

/// Ordered supervision pairs of (source index, target index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pairs: Vec<(usize, usize)>,
}

impl Lexicon {
    /// Validates index ranges and rejects exact duplicate pairs.
    pub fn new(pairs: Vec<(usize, usize)>, src_len: usize, tgt_len: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for &(s, t) in &pairs {
            if s >= src_len || t >= tgt_len {
                return Err(AlignError::InvalidArgument(format!(
                    "pair ({s}, {t}) out of range for vocabularies of size {src_len} and {tgt_len}"
                )));
            }
            if !seen.insert((s, t)) {
                return Err(AlignError::InvalidArgument(format!("duplicate pair ({s}, {t})")));
            }
        }
        Ok(Lexicon { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Token strings of pair `i`, for reporting.
    pub fn tokens<'a>(&self, i: usize, src: &'a EmbeddingSet, tgt: &'a EmbeddingSet) -> (&'a str, &'a str) {
        let (s, t) = self.pairs[i];
        (src.token(s), tgt.token(t))
    }
}

fn split_pair(line: &str) -> Option<(&str, &str)> {
    if line.contains('\t') {
        let mut it = line.split('\t');
        let a = it.next()?.trim();
        let b = it.next()?.trim();
        if it.next().is_some() || a.is_empty() || b.is_empty() {
            return None;
        }
        Some((a, b))
    } else {
        let mut it = line.split_whitespace();
        let a = it.next()?;
        let b = it.next()?;
        if it.next().is_some() {
            return None;
        }
        Some((a, b))
    }
}

/// Reads a `source<TAB>target` dictionary and resolves it against two vocabularies.
///
/// Lines with out-of-vocabulary tokens, malformed lines and exact repeats are
/// skipped and counted. File order is preserved.
pub fn load_lexicon(
    path: impl AsRef<Path>,
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
) -> Result<Loaded<Lexicon>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    let mut skipped = 0;
    for (_, line) in content_lines(&text) {
        let resolved = split_pair(line).and_then(|(a, b)| Some((src.index_of(a)?, tgt.index_of(b)?)));
        match resolved {
            Some(p) if seen.insert(p) => pairs.push(p),
            _ => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(AlignError::EmptyLexicon);
    }
    Ok(Loaded {
        value: Lexicon { pairs },
        skipped,
    })
}

/// Writes a lexicon as `source<TAB>target` lines.
pub fn save_lexicon(
    lex: &Lexicon,
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for &(s, t) in lex.pairs() {
        text.push_str(src.token(s));
        text.push('\t');
        text.push_str(tgt.token(t));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| AlignError::io(path, e))
}

/// One token per line.
pub fn load_stoplist(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    Ok(content_lines(&text).map(|(_, l)| l.trim().to_string()).collect())
}

/// Relative token frequencies, each in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrequencyTable {
    freqs: HashMap<String, f64>,
}

impl FrequencyTable {
    pub fn new(freqs: HashMap<String, f64>) -> Result<Self> {
        if let Some((tok, f)) = freqs.iter().find(|(_, f)| !(0.0..=1.0).contains(*f)) {
            return Err(AlignError::InvalidArgument(format!(
                "frequency {f} of {tok:?} is outside [0, 1]"
            )));
        }
        Ok(FrequencyTable { freqs })
    }

    pub fn get(&self, token: &str) -> Option<f64> {
        self.freqs.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }
}

/// Reads a `token<TAB>frequency` table.
pub fn load_frequencies(path: impl AsRef<Path>) -> Result<FrequencyTable> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut freqs = HashMap::new();
    for (lineno, line) in content_lines(&text) {
        let (tok, val) = split_pair(line)
            .ok_or_else(|| AlignError::format(path, format!("line {}: expected token and frequency", lineno + 1)))?;
        let f: f64 = val
            .parse()
            .map_err(|_| AlignError::format(path, format!("line {}: bad frequency {val:?}", lineno + 1)))?;
        if !(0.0..=1.0).contains(&f) {
            return Err(AlignError::format(
                path,
                format!("line {}: frequency {f} outside [0, 1]", lineno + 1),
            ));
        }
        freqs.insert(tok.to_string(), f);
    }
    Ok(FrequencyTable { freqs })
}

/// Pairs every token shared by both vocabularies with itself, in source order.
///
/// Stop words and tokens whose vector is all zeros in either space are left out.
pub fn build_identity_lexicon(
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    stoplist: Option<&HashSet<String>>,
) -> Result<Lexicon> {
    let is_empty_vec = |set: &EmbeddingSet, i: usize| set.vector(i).iter().all(|&v| v == 0.0);
    let pairs: Vec<(usize, usize)> = src
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, tok)| stoplist.is_none_or(|s| !s.contains(tok.as_str())))
        .filter_map(|(i, tok)| tgt.index_of(tok).map(|j| (i, j)))
        .filter(|&(i, j)| !is_empty_vec(src, i) && !is_empty_vec(tgt, j))
        .collect();
    if pairs.is_empty() {
        return Err(AlignError::EmptyIntersection);
    }
    Ok(Lexicon { pairs })
}

/// Stacks the source and target vectors of each lexicon pair as columns of `X` and `Y`.
pub fn gather_pairs(
    lex: &Lexicon,
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if src.dim() != tgt.dim() {
        return Err(AlignError::Shape(format!(
            "source dimension {} differs from target dimension {}",
            src.dim(),
            tgt.dim()
        )));
    }
    if lex.is_empty() {
        return Err(AlignError::EmptyLexicon);
    }
    let n = lex.len();
    let x = DMatrix::from_fn(src.dim(), n, |r, c| src.vectors[(r, lex.pairs[c].0)]);
    let y = DMatrix::from_fn(tgt.dim(), n, |r, c| tgt.vectors[(r, lex.pairs[c].1)]);
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_with(contents: &str) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn set(tokens: &[&str], cols: &[&[f64]]) -> EmbeddingSet {
        let d = cols[0].len();
        let data: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        EmbeddingSet::new(
            tokens.iter().map(|s| s.to_string()).collect(),
            DMatrix::from_vec(d, cols.len(), data),
        )
        .unwrap()
    }

    #[test]
    fn minimal_file() {
        let f = file_with("a 1 0\nb 0 1");
        let e = load_embeddings(f.path(), &LoadOptions::default()).unwrap().value;
        assert_eq!(e.dim(), 2);
        assert_eq!(e.tokens(), &["a", "b"]);
        assert_eq!(e.vector(1)[1], 1.0);
    }

    #[test]
    fn header_is_consumed() {
        let f = file_with("2 2\na 1 0\nb 0 1\n");
        let l = load_embeddings(f.path(), &LoadOptions::default()).unwrap();
        assert_eq!(l.value.tokens(), &["a", "b"]);
        assert_eq!(l.skipped, 0);
    }

    #[test]
    fn crlf_limit_and_skips() {
        let f = file_with("a 1 0\r\nb 0 1 5\r\nc nan 1\r\na 3 3\r\nd 2 2\r\ne 1 1\r\n");
        let l = load_embeddings(f.path(), &LoadOptions { limit: Some(2), normalize: false }).unwrap();
        assert_eq!(l.value.tokens(), &["a", "d"]);
        assert_eq!(l.skipped, 3);
    }

    #[test]
    fn mostly_inconsistent_rows_are_fatal() {
        let f = file_with("2 2\na 1 0 3\nb 0 1 1\nc 1 1\n");
        assert!(matches!(
            load_embeddings(f.path(), &LoadOptions::default()),
            Err(AlignError::Format { .. })
        ));
    }

    #[test]
    fn missing_file_and_empty_file() {
        assert!(matches!(
            load_embeddings("/nonexistent/emb.txt", &LoadOptions::default()),
            Err(AlignError::Io { .. })
        ));
        let f = file_with("");
        assert!(load_embeddings(f.path(), &LoadOptions::default()).is_err());
    }

    #[test]
    fn normalize_flag() {
        let f = file_with("a 3 4\nz 0 0\n");
        let e = load_embeddings(f.path(), &LoadOptions { limit: None, normalize: true }).unwrap().value;
        assert!((e.vector(0).norm() - 1.0).abs() < 1e-15);
        assert_eq!(e.vector(1).norm(), 0.0);
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let e = set(&["x", "y"], &[&[0.1, -1.0 / 3.0, 1e-300], &[std::f64::consts::PI, 2.5e17, -0.0]]);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_embeddings(&e, f.path()).unwrap();
        let back = load_embeddings(f.path(), &LoadOptions::default()).unwrap().value;
        assert_eq!(back.tokens(), e.tokens());
        for (a, b) in back.vectors().iter().zip(e.vectors().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn lexicon_multi_translation_and_oov() {
        let src = set(&["dog", "good"], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let tgt = set(&["cane", "cani", "buon"], &[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0]]);
        let f = file_with("dog\tcane\ndog\tcani\n");
        let l = load_lexicon(f.path(), &src, &tgt).unwrap();
        assert_eq!(l.value.pairs(), &[(0, 0), (0, 1)]);

        let f = file_with("dog\tcane\ngood\tsanto\ngood buon\ndog\tcane\n");
        let l = load_lexicon(f.path(), &src, &tgt).unwrap();
        assert_eq!(l.value.pairs(), &[(0, 0), (1, 2)]);
        assert_eq!(l.skipped, 2);

        let f = file_with("");
        assert!(matches!(load_lexicon(f.path(), &src, &tgt), Err(AlignError::EmptyLexicon)));
    }

    #[test]
    fn lexicon_rejects_duplicates_and_out_of_range() {
        assert!(Lexicon::new(vec![(0, 0), (0, 0)], 1, 1).is_err());
        assert!(Lexicon::new(vec![(0, 2)], 1, 2).is_err());
        assert!(Lexicon::new(vec![(0, 0), (0, 1)], 1, 2).is_ok());
    }

    #[test]
    fn identity_lexicon() {
        let a = set(&["a", "b", "c"], &[&[1.0], &[2.0], &[3.0]]);
        let lex = build_identity_lexicon(&a, &a, None).unwrap();
        assert_eq!(lex.pairs(), &[(0, 0), (1, 1), (2, 2)]);

        let b = set(&["b", "q"], &[&[1.0], &[2.0]]);
        let stop: HashSet<String> = ["b".to_string()].into();
        assert!(matches!(
            build_identity_lexicon(&a, &b, Some(&stop)),
            Err(AlignError::EmptyIntersection)
        ));
        assert_eq!(build_identity_lexicon(&a, &b, None).unwrap().pairs(), &[(1, 0)]);
    }

    #[test]
    fn identity_lexicon_drops_empty_embeddings() {
        let a = set(&["a", "b"], &[&[1.0, 0.0], &[0.0, 0.0]]);
        let lex = build_identity_lexicon(&a, &a, None).unwrap();
        assert_eq!(lex.pairs(), &[(0, 0)]);
    }

    #[test]
    fn gather_duplicates_columns() {
        let src = set(&["dog", "good"], &[&[1.0, 2.0], &[3.0, 4.0]]);
        let tgt = set(&["cane", "cani"], &[&[5.0, 6.0], &[7.0, 8.0]]);
        let lex = Lexicon::new(vec![(0, 0), (0, 1)], 2, 2).unwrap();
        let (x, y) = gather_pairs(&lex, &src, &tgt).unwrap();
        assert_eq!(x.ncols(), 2);
        assert_eq!(x.column(0), x.column(1));
        assert_eq!(y.column(1)[0], 7.0);

        let one = Lexicon::new(vec![(1, 0)], 2, 2).unwrap();
        let (x, _) = gather_pairs(&one, &src, &tgt).unwrap();
        assert_eq!(x.ncols(), 1);

        let other = set(&["z"], &[&[1.0, 2.0, 3.0]]);
        assert!(matches!(gather_pairs(&one, &src, &other), Err(AlignError::Shape(_))));
    }

    #[test]
    fn frequency_table() {
        let f = file_with("the\t0.05\nrare\t1e-7\n");
        let t = load_frequencies(f.path()).unwrap();
        assert_eq!(t.get("rare"), Some(1e-7));
        let bad = file_with("the\t1.5\n");
        assert!(load_frequencies(bad.path()).is_err());
    }
}
