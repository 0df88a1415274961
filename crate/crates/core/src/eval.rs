//! Retrieval evaluation, semantic-shift ranking and lexicon refinement.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::TranslationMatrix;
use crate::em::{Label, Responsibilities};
use crate::error::{AlignError, Result};
use crate::io::{EmbeddingSet, FrequencyTable, Lexicon};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    /// Scores are negated squared Euclidean distances.
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = AlignError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            _ => Err(AlignError::InvalidArgument(format!("unknown metric {s:?} (cosine, euclidean)"))),
        }
    }
}

/// Brute-force nearest-neighbour index over a target embedding set.
pub struct NnIndex<'a> {
    set: &'a EmbeddingSet,
    metric: Metric,
    /// Unit-normalized columns (cosine) or raw columns (Euclidean).
    columns: DMatrix<f64>,
    sq_norms: DVector<f64>,
    excluded: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub token: String,
    pub score: f64,
}

impl<'a> NnIndex<'a> {
    pub fn new(set: &'a EmbeddingSet, metric: Metric) -> Self {
        let mut columns = set.vectors().clone();
        let mut excluded = vec![false; set.len()];
        if metric == Metric::Cosine {
            for (i, mut col) in columns.column_iter_mut().enumerate() {
                let norm = col.norm();
                if norm > 0.0 {
                    col /= norm;
                } else {
                    excluded[i] = true;
                }
            }
        }
        let sq_norms = DVector::from_iterator(columns.ncols(), columns.column_iter().map(|c| c.norm_squared()));
        NnIndex {
            set,
            metric,
            columns,
            sq_norms,
            excluded,
        }
    }

    pub fn cosine(set: &'a EmbeddingSet) -> Self {
        Self::new(set, Metric::Cosine)
    }

    /// Number of zero vectors left out of a cosine index.
    pub fn excluded_count(&self) -> usize {
        self.excluded.iter().filter(|&&e| e).count()
    }

    fn scores(&self, q: DVectorView<'_, f64>) -> Result<DVector<f64>> {
        if q.len() != self.columns.nrows() {
            return Err(AlignError::Shape(format!(
                "query has {} coordinates, index has {}",
                q.len(),
                self.columns.nrows()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(AlignError::NonFinite("query vector"));
        }
        let norm = q.norm();
        if norm == 0.0 {
            return Err(AlignError::InvalidArgument("zero query vector".into()));
        }
        let dots = self.columns.tr_mul(&q);
        Ok(match self.metric {
            Metric::Cosine => dots / norm,
            Metric::Euclidean => {
                let qq = norm * norm;
                DVector::from_iterator(
                    dots.len(),
                    dots.iter().zip(self.sq_norms.iter()).map(|(d, s)| -(qq - 2.0 * d + s)),
                )
            }
        })
    }

    /// The `k` best-scoring targets, ties broken by ascending index.
    pub fn nearest(&self, q: DVectorView<'_, f64>, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(AlignError::InvalidArgument("k must be positive".into()));
        }
        let scores = self.scores(q)?;
        let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !self.excluded[i]).collect();
        let better = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        let k = k.min(cand.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, better);
            cand.truncate(k);
        }
        cand.sort_unstable_by(better);
        Ok(cand
            .into_iter()
            .map(|i| Neighbor {
                index: i,
                token: self.set.token(i).to_string(),
                score: scores[i],
            })
            .collect())
    }

    /// Index of the single best target, or `None` for an empty index.
    pub fn top1(&self, q: DVectorView<'_, f64>) -> Result<Option<usize>> {
        let scores = self.scores(q)?;
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if self.excluded[i] {
                continue;
            }
            if best.is_none_or(|b| s > scores[b]) {
                best = Some(i);
            }
        }
        Ok(best)
    }
}

/// Top-`k` targets for query `q` as `(token, similarity)`.
pub fn nearest_neighbor(index: &NnIndex<'_>, q: DVectorView<'_, f64>, k: usize) -> Result<Vec<(String, f64)>> {
    Ok(index
        .nearest(q, k)?
        .into_iter()
        .map(|n| (n.token, n.score))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalScore {
    pub p_at_1: f64,
    pub n_queries: usize,
    pub correct: usize,
}

/// Precision@1 over the unique source words of a test lexicon.
///
/// A query is correct when its nearest mapped neighbour is any of its gold
/// targets.
pub fn precision_at_1(
    q: &TranslationMatrix,
    test_lex: &Lexicon,
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    metric: Metric,
) -> Result<RetrievalScore> {
    if test_lex.is_empty() {
        return Err(AlignError::EmptyLexicon);
    }
    if q.dim() != src.dim() || src.dim() != tgt.dim() {
        return Err(AlignError::Shape(format!(
            "map of dimension {} between spaces of dimension {} and {}",
            q.dim(),
            src.dim(),
            tgt.dim()
        )));
    }
    let mut gold: HashMap<usize, HashSet<usize>> = HashMap::new();
    let mut queries = Vec::new();
    for &(s, t) in test_lex.pairs() {
        gold.entry(s)
            .or_insert_with(|| {
                queries.push(s);
                HashSet::new()
            })
            .insert(t);
    }
    let index = NnIndex::new(tgt, metric);
    let xq = src.vectors().select_columns(&queries);
    let mapped = q.matrix() * xq;
    let correct = queries
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let col = mapped.column(i);
            if col.norm() == 0.0 {
                return Ok(false);
            }
            Ok(index.top1(col)?.is_some_and(|p| gold[s].contains(&p)))
        })
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    Ok(RetrievalScore {
        p_at_1: correct as f64 / queries.len() as f64,
        n_queries: queries.len(),
        correct,
    })
}

/// Summary of an alignment run. Fields that do not apply to a run are `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p_at_1: Option<f64>,
    pub n_queries: usize,
    pub test_error: Option<f64>,
    pub iterations: Option<usize>,
    pub noise_rate: Option<f64>,
}

impl EvalReport {
    pub fn with_retrieval(mut self, score: &RetrievalScore) -> Self {
        self.p_at_1 = Some(score.p_at_1);
        self.n_queries = score.n_queries;
        self
    }

    /// Records the discarded fraction `1 − α` of a fitted mixture.
    pub fn with_final_alpha(mut self, alpha: f64) -> Self {
        self.noise_rate = Some(1.0 - alpha);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_tsv(&self) -> String {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(String::new, |v| v.to_string())
        }
        let mut out = String::from("p_at_1\tn_queries\ttest_error\titerations\tnoise_rate\n");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            opt(&self.p_at_1),
            self.n_queries,
            opt(&self.test_error),
            opt(&self.iterations),
            opt(&self.noise_rate)
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftEntry {
    pub token: String,
    /// `1 − cos(Q·x, y)`, in `[0, 2]`.
    pub distance: f64,
    pub label: Option<Label>,
}

/// Shared tokens ordered by post-alignment cosine distance, largest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShiftRanking {
    pub entries: Vec<ShiftEntry>,
    /// Tokens removed by the frequency filter, including those with no entry.
    pub dropped_low_frequency: usize,
    pub missing_frequency: usize,
    /// Tokens with a zero vector on either side.
    pub dropped_empty: usize,
}

impl ShiftRanking {
    pub fn noise_count(&self) -> usize {
        self.entries.iter().filter(|e| e.label == Some(Label::Noise)).count()
    }

    pub fn to_json(&self) -> String {
        let rankings: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|e| serde_json::json!([e.token, e.distance, e.label.map(Label::as_str)]))
            .collect();
        let value = serde_json::json!({
            "rankings": rankings,
            "dropped_low_frequency": self.dropped_low_frequency,
            "missing_frequency": self.missing_frequency,
            "dropped_empty": self.dropped_empty,
        });
        serde_json::to_string_pretty(&value).expect("ranking serializes")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank\ttoken\tdistance\tlabel\n");
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                i + 1,
                e.token,
                e.distance,
                e.label.map_or("", Label::as_str)
            );
        }
        out
    }
}

/// Frequency tables for the source and target periods plus the cut-off below
/// which a token is removed.
#[derive(Clone, Copy, Debug)]
pub struct FrequencyFilter<'a> {
    pub src: &'a FrequencyTable,
    pub tgt: &'a FrequencyTable,
    pub threshold: f64,
}

/// Ranks the pairs of an identity lexicon by how far each mapped source
/// vector lands from its own target vector.
///
/// `labels`, when given, must come from a fit on the same lexicon and are
/// attached to the entries. Tokens whose frequency is below the threshold in
/// either table, or missing from a table, are removed after ranking.
pub fn rank_semantic_shift(
    q: &TranslationMatrix,
    identity_lex: &Lexicon,
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    filter: Option<FrequencyFilter<'_>>,
    labels: Option<&Responsibilities>,
) -> Result<ShiftRanking> {
    if let Some(r) = labels {
        if r.len() != identity_lex.len() {
            return Err(AlignError::Shape(format!(
                "{} responsibilities for {} lexicon pairs",
                r.len(),
                identity_lex.len()
            )));
        }
    }
    if q.dim() != src.dim() || src.dim() != tgt.dim() {
        return Err(AlignError::Shape("dimension mismatch between map and embedding sets".into()));
    }
    let mut ranking = ShiftRanking::default();
    for (t, &(s, g)) in identity_lex.pairs().iter().enumerate() {
        let mapped = q.matrix() * src.vector(s);
        let target = tgt.vector(g);
        let denom = mapped.norm() * target.norm();
        if denom == 0.0 {
            ranking.dropped_empty += 1;
            continue;
        }
        let token = src.token(s);
        if let Some(f) = filter {
            match (f.src.get(token), f.tgt.get(tgt.token(g))) {
                (Some(a), Some(b)) => {
                    if a < f.threshold || b < f.threshold {
                        ranking.dropped_low_frequency += 1;
                        continue;
                    }
                }
                _ => {
                    ranking.missing_frequency += 1;
                    ranking.dropped_low_frequency += 1;
                    continue;
                }
            }
        }
        let cos = mapped.dot(&target) / denom;
        ranking.entries.push(ShiftEntry {
            token: token.to_string(),
            distance: (1.0 - cos).clamp(0.0, 2.0),
            label: labels.map(|r| r.label(t)),
        });
    }
    // stable: equal distances keep lexicon order
    ranking
        .entries
        .sort_by(|a, b| b.distance.total_cmp(&a.distance));
    Ok(ranking)
}

/// Pairs each of the first `size_cap` source words (vocabulary order stands in
/// for frequency) with its nearest target under `Q`.
pub fn refine_lexicon(
    q: &TranslationMatrix,
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    size_cap: usize,
) -> Result<Lexicon> {
    if size_cap < 1 {
        return Err(AlignError::InvalidArgument("size_cap must be at least 1".into()));
    }
    if q.dim() != src.dim() || src.dim() != tgt.dim() {
        return Err(AlignError::Shape("dimension mismatch between map and embedding sets".into()));
    }
    let m = size_cap.min(src.len());
    let index = NnIndex::cosine(tgt);
    let mapped = q.matrix() * src.vectors().columns(0, m);
    let pairs: Vec<(usize, usize)> = (0..m)
        .into_par_iter()
        .map(|s| {
            let col = mapped.column(s);
            if col.norm() == 0.0 {
                return Ok(None);
            }
            Ok(index.top1(col)?.map(|t| (s, t)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if pairs.is_empty() {
        return Err(AlignError::EmptyLexicon);
    }
    Lexicon::new(pairs, src.len(), tgt.len())
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn exact_match_ranks_first() {
        let tgt = set(&["a", "b", "c"], &[&[1.0, 0.0, 0.0], &[0.6, 0.8, 0.0], &[0.0, 0.0, 2.0]]);
        let idx = NnIndex::cosine(&tgt);
        let q = DVector::from_vec(vec![0.0, 0.0, 5.0]);
        let nn = nearest_neighbor(&idx, q.column(0), 2).unwrap();
        assert_eq!(nn[0].0, "c");
        assert!((nn[0].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_follow_index_order() {
        let tgt = set(&["a", "b", "c"], &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 2.0, 0.0]]);
        let idx = NnIndex::cosine(&tgt);
        let q = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let nn = nearest_neighbor(&idx, q.column(0), 3).unwrap();
        let toks: Vec<&str> = nn.iter().map(|n| n.0.as_str()).collect();
        assert_eq!(toks, ["a", "b", "c"]);
        assert!(nn.iter().all(|n| n.1 == 0.0));
    }

    #[test]
    fn zero_query_and_zero_targets() {
        let tgt = set(&["z", "a"], &[&[0.0, 0.0], &[1.0, 1.0]]);
        let idx = NnIndex::cosine(&tgt);
        assert_eq!(idx.excluded_count(), 1);
        let zero = DVector::zeros(2);
        assert!(idx.nearest(zero.column(0), 1).is_err());
        let q = DVector::from_vec(vec![1.0, 0.0]);
        let nn = idx.nearest(q.column(0), 5).unwrap();
        assert_eq!(nn.len(), 1);
        assert_eq!(nn[0].token, "a");
    }

    #[test]
    fn euclidean_metric() {
        let tgt = set(&["near", "far"], &[&[1.0, 1.0], &[10.0, 10.0]]);
        let idx = NnIndex::new(&tgt, Metric::Euclidean);
        let q = DVector::from_vec(vec![2.0, 2.0]);
        let nn = idx.nearest(q.column(0), 2).unwrap();
        assert_eq!(nn[0].token, "near");
        assert!((nn[0].score + 2.0).abs() < 1e-12);
    }

    #[test]
    fn p_at_1_identity_and_multi_translation() {
        let e = set(&["a", "b", "c"], &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let lex = Lexicon::new(vec![(0, 0), (1, 1), (2, 2)], 3, 3).unwrap();
        let s = precision_at_1(&TranslationMatrix::identity(2), &lex, &e, &e, Metric::Cosine).unwrap();
        assert_eq!(s.p_at_1, 1.0);
        assert_eq!(s.n_queries, 3);

        let src = set(&["dog"], &[&[1.0, 0.0]]);
        let tgt = set(&["cane", "cani", "gatto"], &[&[1.0, 0.05], &[0.9, 0.4], &[0.0, 1.0]]);
        let gold = Lexicon::new(vec![(0, 1), (0, 0)], 1, 3).unwrap();
        let s = precision_at_1(&TranslationMatrix::identity(2), &gold, &src, &tgt, Metric::Cosine).unwrap();
        assert_eq!((s.n_queries, s.correct), (1, 1));

        let empty = Lexicon::new(vec![], 1, 3).unwrap();
        assert!(precision_at_1(&TranslationMatrix::identity(2), &empty, &src, &tgt, Metric::Cosine).is_err());
    }

    #[test]
    fn shift_ranking_orders_and_filters() {
        let src = set(&["same", "moved", "rare"], &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let tgt = set(&["same", "moved", "rare"], &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let lex = Lexicon::new(vec![(0, 0), (1, 1), (2, 2)], 3, 3).unwrap();
        let q = TranslationMatrix::identity(2);
        let r = rank_semantic_shift(&q, &lex, &src, &tgt, None, None).unwrap();
        let toks: Vec<&str> = r.entries.iter().map(|e| e.token.as_str()).collect();
        assert_eq!(toks, ["moved", "rare", "same"]);
        assert_eq!(r.entries[2].distance, 0.0);

        let f1 = FrequencyTable::new([("same".into(), 0.1), ("moved".into(), 0.1), ("rare".into(), 1e-7)].into()).unwrap();
        let f2 = FrequencyTable::new([("same".into(), 0.1), ("rare".into(), 0.1)].into()).unwrap();
        let filter = FrequencyFilter { src: &f1, tgt: &f2, threshold: 1e-5 };
        let r = rank_semantic_shift(&q, &lex, &src, &tgt, Some(filter), None).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].token, "same");
        assert_eq!(r.dropped_low_frequency, 2);
        assert_eq!(r.missing_frequency, 1);

        let json = r.to_json();
        assert!(json.contains("\"same\""));
    }

    #[test]
    fn refine_cases() {
        let e = set(&["a", "b", "c"], &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let q = TranslationMatrix::identity(2);
        assert_eq!(refine_lexicon(&q, &e, &e, 10).unwrap().pairs(), &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(refine_lexicon(&q, &e, &e, 1).unwrap().pairs(), &[(0, 0)]);
        assert!(refine_lexicon(&q, &e, &e, 0).is_err());
    }

    #[test]
    fn report_json_keys() {
        let r = EvalReport {
            p_at_1: Some(0.5),
            n_queries: 4,
            test_error: Some(1.0),
            iterations: Some(3),
            noise_rate: None,
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["p_at_1", "n_queries", "test_error", "iterations", "noise_rate"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(r.to_tsv().lines().count() == 2);
    }
}
