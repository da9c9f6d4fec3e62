//! Lexical similarity kernels (Okapi BM25, Jaccard, Levenshtein) and the
//! baseline joins built on them.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::joiner::{select_top_k, Direction, JoinResult, Match, ScoreOrder};
use crate::joinspec::TokenizerKind;
use crate::model::Dataset;
use crate::prepare::{tokenize, Preparer};

pub const BM25_K1: f64 = 1.5;
pub const BM25_B: f64 = 0.75;
/// Levenshtein baseline keeps candidates within this many edits.
pub const LEVENSHTEIN_MAX_EDITS: usize = 30;
/// Jaccard baselines keep candidates at or above this similarity.
pub const JACCARD_MIN_SIMILARITY: f64 = 0.3;

/// Okapi BM25 over a fixed document collection.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    doc_term_freqs: Vec<HashMap<String, u32>>,
    doc_lengths: Vec<usize>,
    avgdl: f64,
    df: HashMap<String, usize>,
    postings: HashMap<String, Vec<(u32, u32)>>,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn new<I, S>(docs: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<String>)>,
        S: Into<String>,
    {
        Self::with_params(docs, BM25_K1, BM25_B)
    }

    pub fn with_params<I, S>(docs: I, k1: f64, b: f64) -> Self
    where
        I: IntoIterator<Item = (S, Vec<String>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut positions = HashMap::new();
        let mut doc_term_freqs = Vec::new();
        let mut doc_lengths = Vec::new();
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        for (i, (id, tokens)) in docs.into_iter().enumerate() {
            let id = id.into();
            positions.insert(id.clone(), i);
            ids.push(id);
            doc_lengths.push(tokens.len());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, &f) in &tf {
                *df.entry(t.clone()).or_default() += 1;
                postings.entry(t.clone()).or_default().push((i as u32, f));
            }
            doc_term_freqs.push(tf);
        }
        let n = ids.len();
        let avgdl = if n == 0 {
            0.0
        } else {
            doc_lengths.iter().sum::<usize>() as f64 / n as f64
        };
        Bm25Index {
            ids,
            positions,
            doc_term_freqs,
            doc_lengths,
            avgdl,
            df,
            postings,
            k1,
            b,
        }
    }

    pub fn from_dataset(ds: &Dataset, preparer: &Preparer) -> Self {
        Self::new(ds.records().iter().map(|r| (r.id.clone(), preparer.prepare(r).tokens)))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_freq(&self, token: &str) -> usize {
        self.df.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// ln((N − df + 0.5)/(df + 0.5) + 1); never negative.
    pub fn idf(&self, token: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.doc_freq(token) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_score(&self, token: &str, tf: u32, doc: usize) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let f = tf as f64;
        let dl = self.doc_lengths[doc] as f64;
        let norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl);
        self.idf(token) * f * (self.k1 + 1.0) / (f + norm)
    }

    pub fn score(&self, query_tokens: &[String], doc_id: &str) -> Result<f64> {
        let doc = *self
            .positions
            .get(doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))?;
        let tfs = &self.doc_term_freqs[doc];
        Ok(query_tokens
            .iter()
            .map(|q| self.term_score(q, tfs.get(q).copied().unwrap_or(0), doc))
            .sum())
    }

    /// Scores every document in one pass over the postings of the query
    /// tokens. Per-document sums accumulate in query order, so each entry
    /// equals [`Bm25Index::score`] exactly.
    pub fn score_all(&self, query_tokens: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.ids.len()];
        for q in query_tokens {
            if let Some(list) = self.postings.get(q) {
                for &(doc, tf) in list {
                    scores[doc as usize] += self.term_score(q, tf, doc as usize);
                }
            }
        }
        scores
    }

    /// Top `k` documents by score, ties broken by ascending id. Ids in
    /// `exclude` are never returned. Documents with zero score are included.
    pub fn top_k(&self, query_tokens: &[String], k: usize, exclude: &HashSet<String>) -> Vec<(String, f64)> {
        let scores = self.score_all(query_tokens);
        let candidates: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !exclude.contains(&self.ids[*i]))
            .collect();
        select_top_k(candidates, k, ScoreOrder::HigherIsBetter, &self.ids)
            .into_iter()
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect()
    }
}

pub fn bm25_score(index: &Bm25Index, query_tokens: &[String], doc_id: &str) -> Result<f64> {
    index.score(query_tokens, doc_id)
}

pub fn bm25_topk(
    index: &Bm25Index,
    query_tokens: &[String],
    k: usize,
    exclude: &HashSet<String>,
) -> Vec<(String, f64)> {
    index.top_k(query_tokens, k, exclude)
}

/// |A ∩ B| / |A ∪ B|, with J(∅, ∅) = 0.
pub fn jaccard<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|x| large.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn jaccard_tokens(a: &[String], b: &[String]) -> f64 {
    let a: HashSet<&str> = a.iter().map(String::as_str).collect();
    let b: HashSet<&str> = b.iter().map(String::as_str).collect();
    jaccard(&a, &b)
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_chars(&a, &b)
}

fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LexicalKind {
    Levenshtein,
    JaccardWs,
    Jaccard2g,
    JaccardKeyWs,
    JaccardKey2g,
    Bm25,
}

impl LexicalKind {
    pub const ALL: [LexicalKind; 6] = [
        LexicalKind::Levenshtein,
        LexicalKind::JaccardWs,
        LexicalKind::Jaccard2g,
        LexicalKind::JaccardKeyWs,
        LexicalKind::JaccardKey2g,
        LexicalKind::Bm25,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LexicalKind::Levenshtein => "LD",
            LexicalKind::JaccardWs => "J-WS",
            LexicalKind::Jaccard2g => "J-2G",
            LexicalKind::JaccardKeyWs => "JK-WS",
            LexicalKind::JaccardKey2g => "JK-2G",
            LexicalKind::Bm25 => "BM25",
        }
    }

    pub fn needs_key_column(self) -> bool {
        matches!(
            self,
            LexicalKind::Levenshtein | LexicalKind::JaccardKeyWs | LexicalKind::JaccardKey2g
        )
    }

    pub fn score_order(self) -> ScoreOrder {
        match self {
            LexicalKind::Levenshtein => ScoreOrder::LowerIsBetter,
            _ => ScoreOrder::HigherIsBetter,
        }
    }
}

impl fmt::Display for LexicalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LexicalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LexicalKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown baseline {s:?} (expected LD, J-WS, J-2G, JK-WS, JK-2G or BM25)"
                ))
            })
    }
}

fn key_texts(ds: &Dataset, column: &str) -> Result<Vec<String>> {
    if !ds.column_names().iter().any(|c| c == column) {
        return Err(Error::MissingKeyColumn(format!("{column} (dataset {})", ds.name)));
    }
    Ok(ds
        .records()
        .iter()
        .map(|r| r.get(column).map(|v| v.as_text().to_lowercase()).unwrap_or_default())
        .collect())
}

fn token_sets(texts: &[String], mode: TokenizerKind) -> Vec<HashSet<String>> {
    texts.iter().map(|t| tokenize(t, mode).into_iter().collect()).collect()
}

/// Runs a lexical baseline join: for every base record, the top `k` aux
/// records under the kernel, after the kernel's threshold. Base records with
/// no surviving candidate produce no rows.
pub fn lexical_join(
    kind: LexicalKind,
    base: &Dataset,
    aux: &Dataset,
    key_column: Option<&str>,
    k: usize,
) -> Result<JoinResult> {
    let aux_ids: Vec<String> = aux.records().iter().map(|r| r.id.clone()).collect();
    let key = if kind.needs_key_column() {
        Some(key_column.ok_or_else(|| Error::MissingKeyColumn(format!("{kind} requires a key column")))?)
    } else {
        None
    };

    let per_base: Vec<Vec<(usize, f64)>> = match kind {
        LexicalKind::Levenshtein => {
            let key = key.unwrap_or_default();
            let b: Vec<Vec<char>> = key_texts(base, key)?.iter().map(|s| s.chars().collect()).collect();
            let a: Vec<Vec<char>> = key_texts(aux, key)?.iter().map(|s| s.chars().collect()).collect();
            b.par_iter()
                .map(|q| {
                    let scored = a
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| q.len().abs_diff(c.len()) <= LEVENSHTEIN_MAX_EDITS)
                        .map(|(i, c)| (i, levenshtein_chars(q, c) as f64))
                        .filter(|&(_, d)| d <= LEVENSHTEIN_MAX_EDITS as f64)
                        .collect();
                    select_top_k(scored, k, ScoreOrder::LowerIsBetter, &aux_ids)
                })
                .collect()
        }
        LexicalKind::JaccardWs | LexicalKind::Jaccard2g | LexicalKind::JaccardKeyWs | LexicalKind::JaccardKey2g => {
            let mode = match kind {
                LexicalKind::JaccardWs | LexicalKind::JaccardKeyWs => TokenizerKind::Whitespace,
                _ => TokenizerKind::Char2gram,
            };
            let (bt, at) = match key {
                Some(key) => (key_texts(base, key)?, key_texts(aux, key)?),
                None => {
                    let p = Preparer::default();
                    let text =
                        |ds: &Dataset| -> Vec<String> { ds.records().iter().map(|r| p.prepare(r).text).collect() };
                    (text(base), text(aux))
                }
            };
            let bs = token_sets(&bt, mode);
            let as_ = token_sets(&at, mode);
            bs.par_iter()
                .map(|q| {
                    let scored = as_
                        .iter()
                        .enumerate()
                        .map(|(i, c)| (i, jaccard(q, c)))
                        .filter(|&(_, s)| s >= JACCARD_MIN_SIMILARITY)
                        .collect();
                    select_top_k(scored, k, ScoreOrder::HigherIsBetter, &aux_ids)
                })
                .collect()
        }
        LexicalKind::Bm25 => {
            let p = Preparer::default();
            let index = Bm25Index::from_dataset(aux, &p);
            base.records()
                .par_iter()
                .map(|r| {
                    let q = p.prepare(r).tokens;
                    let scored = index
                        .score_all(&q)
                        .into_iter()
                        .enumerate()
                        .filter(|&(_, s)| s > 0.0)
                        .collect();
                    select_top_k(scored, k, ScoreOrder::HigherIsBetter, &aux_ids)
                })
                .collect()
        }
    };

    let mut matches = Vec::new();
    for (r, top) in base.records().iter().zip(per_base) {
        for (rank, (i, score)) in top.into_iter().enumerate() {
            matches.push(Match {
                base_id: Some(r.id.clone()),
                aux_id: Some(aux_ids[i].clone()),
                rank: rank + 1,
                score,
                direction: Direction::BaseToAux,
                path: Vec::new(),
            });
        }
    }
    Ok(JoinResult {
        matches,
        spec: None,
        order: kind.score_order(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Record, Role};
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn absent_term_contributes_zero() {
        let idx = Bm25Index::new([("a", toks("x y")), ("b", toks("z"))]);
        assert_eq!(idx.score(&toks("q"), "a").unwrap(), 0.0);
        assert!(matches!(idx.score(&toks("x"), "nope"), Err(Error::UnknownDocument(_))));
    }

    #[test]
    fn two_doc_hand_arithmetic() {
        // N=2, df=1, f=1, |D| = avgdl → idf = ln(1.5/1.5 + 1) = ln 2, tf part = 2.5/2.5
        let idx = Bm25Index::new([("a", toks("x")), ("b", toks("y"))]);
        let s = idx.score(&toks("x"), "a").unwrap();
        assert!((s - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn topk_edge_cases() {
        let idx = Bm25Index::new([("a", toks("x y")), ("b", toks("x")), ("c", toks("z"))]);
        let all = idx.top_k(&toks("x"), 10, &HashSet::new());
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].0, "b");
        assert_eq!(all[2], ("c".to_string(), 0.0));
        let everything: HashSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert!(idx.top_k(&toks("x"), 10, &everything).is_empty());
    }

    #[test]
    fn jaccard_cases() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<HashSet<_>>();
        assert_eq!(jaccard(&s(&["a", "b"]), &s(&["a", "b"])), 1.0);
        assert_eq!(jaccard(&s(&["a"]), &s(&["b"])), 0.0);
        assert_eq!(jaccard(&s(&["a", "b", "c"]), &s(&["b", "c", "d"])), 0.5);
        assert_eq!(jaccard(&s(&[]), &s(&[])), 0.0);
    }

    #[test]
    fn levenshtein_cases() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("flaw", "lawn"), 2);
        assert_eq!(levenshtein("über", "uber"), 1);
    }

    proptest! {
        #[test]
        fn levenshtein_is_a_metric(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert_eq!(levenshtein(&a, &a), 0);
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
            prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
        }

        #[test]
        fn jaccard_symmetric_and_bounded(a in prop::collection::hash_set(0u8..10, 0..8), b in prop::collection::hash_set(0u8..10, 0..8)) {
            let j = jaccard(&a, &b);
            prop_assert_eq!(j, jaccard(&b, &a));
            prop_assert!((0.0..=1.0).contains(&j));
            if !a.is_empty() {
                prop_assert_eq!(jaccard(&a, &a), 1.0);
            }
        }

        #[test]
        fn bm25_monotone_in_term_frequency(extra in 0usize..6, filler in 1usize..6) {
            let mut doc = vec!["t".to_string(); 1 + extra];
            doc.extend(std::iter::repeat_n("f".to_string(), filler));
            // same length, one filler swapped for another occurrence of t
            let mut more = doc.clone();
            let pos = more.iter().position(|x| x == "f").unwrap();
            more[pos] = "t".into();
            let other = vec!["o".to_string(); 3];
            let i1 = Bm25Index::new([("d", doc), ("o", other.clone())]);
            let i2 = Bm25Index::new([("d", more), ("o", other)]);
            let q = vec!["t".to_string()];
            prop_assert!(i2.score(&q, "d").unwrap() >= i1.score(&q, "d").unwrap());
        }
    }

    #[test]
    fn bm25_term_score_increases_with_tf_at_fixed_length() {
        let idx = Bm25Index::new([
            ("a", toks("t f f f")),
            ("b", toks("t t f f")),
            ("c", toks("t t t f")),
            ("d", toks("o o o o")),
        ]);
        let q = toks("t");
        let s: Vec<f64> = ["a", "b", "c"].iter().map(|d| idx.score(&q, d).unwrap()).collect();
        assert!(s[0] < s[1] && s[1] < s[2]);
    }

    fn ds(role: Role, rows: &[(&str, &str)]) -> Dataset {
        Dataset::from_records(
            "t",
            role,
            rows.iter()
                .map(|(id, name)| Record::new(*id, [("name", *name)]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn levenshtein_join_exact_key_ranks_first() {
        let base = ds(Role::Base, &[("b1", "Dunkirk")]);
        let aux = ds(Role::Auxiliary, &[("a1", "Dunkrik"), ("a2", "Dunkirk"), ("a3", "Up")]);
        let r = lexical_join(LexicalKind::Levenshtein, &base, &aux, Some("name"), 2).unwrap();
        assert_eq!(r.matches[0].aux_id.as_deref(), Some("a2"));
        assert_eq!(r.matches[0].score, 0.0);
        assert_eq!(r.matches.len(), 2);
    }

    #[test]
    fn levenshtein_threshold_drops_far_candidates() {
        let far = "x".repeat(40);
        let base = ds(Role::Base, &[("b1", "ab")]);
        let aux = ds(Role::Auxiliary, &[("a1", &far)]);
        let r = lexical_join(LexicalKind::Levenshtein, &base, &aux, Some("name"), 5).unwrap();
        assert!(r.matches.is_empty());
    }

    #[test]
    fn key_column_required() {
        let base = ds(Role::Base, &[("b1", "ab")]);
        assert!(matches!(
            lexical_join(LexicalKind::JaccardKeyWs, &base, &base, None, 1),
            Err(Error::MissingKeyColumn(_))
        ));
        assert!(matches!(
            lexical_join(LexicalKind::Levenshtein, &base, &base, Some("nope"), 1),
            Err(Error::MissingKeyColumn(_))
        ));
    }

    #[test]
    fn kinds_parse() {
        for k in LexicalKind::ALL {
            assert_eq!(k.name().parse::<LexicalKind>().unwrap(), k);
        }
        assert_eq!("bm25".parse::<LexicalKind>().unwrap(), LexicalKind::Bm25);
        assert!("AFJ".parse::<LexicalKind>().is_err());
    }
}
