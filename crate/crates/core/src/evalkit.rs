//! Retrieval metrics and the baseline comparison harness.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::encoder::{embed_dataset, Encoder, EncoderModel, Encoders};
use crate::error::{Error, Result};
use crate::joiner::{execute_join, JoinOptions, JoinResult};
use crate::joinspec::{Distance, JoinSpec, JoinType};
use crate::lexrank::{lexical_join, LexicalKind};
use crate::model::{Dataset, SupervisionPair};
use crate::prepare::Preparer;

/// Known related auxiliary records of each base record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TruthSet {
    pub related: BTreeMap<String, BTreeSet<String>>,
}

impl TruthSet {
    pub fn from_pairs(pairs: &[SupervisionPair]) -> Self {
        let mut related: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for p in pairs {
            related.entry(p.base_id.clone()).or_default().insert(p.aux_id.clone());
        }
        TruthSet { related }
    }

    pub fn len(&self) -> usize {
        self.related.len()
    }

    pub fn is_empty(&self) -> bool {
        self.related.is_empty()
    }

    pub fn contains(&self, base_id: &str) -> bool {
        self.related.contains_key(base_id)
    }

    pub fn edge_count(&self) -> usize {
        self.related.values().map(BTreeSet::len).sum()
    }
}

/// Base id → aux ids ordered by rank, limited to rank ≤ k.
fn top_k_lists(result: &JoinResult, k: usize) -> HashMap<&str, Vec<(usize, &str)>> {
    let mut out: HashMap<&str, Vec<(usize, &str)>> = HashMap::new();
    for m in &result.matches {
        if let (Some(b), Some(a)) = (&m.base_id, &m.aux_id) {
            if m.rank >= 1 && m.rank <= k {
                out.entry(b.as_str()).or_default().push((m.rank, a.as_str()));
            }
        }
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    out
}

fn mean_over_truth(truth: &TruthSet, mut per_base: impl FnMut(&str, &BTreeSet<String>) -> f64) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let total: f64 = truth.related.iter().map(|(b, rel)| per_base(b, rel)).sum();
    total / truth.len() as f64
}

/// Fraction of truth base records whose whole truth set is within their
/// top `k` matches.
pub fn recall_at_k(result: &JoinResult, truth: &TruthSet, k: usize) -> f64 {
    let lists = top_k_lists(result, k);
    mean_over_truth(truth, |b, rel| {
        let got: BTreeSet<&str> = lists
            .get(b)
            .map(|v| v.iter().map(|&(_, a)| a).collect())
            .unwrap_or_default();
        if rel.iter().all(|a| got.contains(a.as_str())) {
            1.0
        } else {
            0.0
        }
    })
}

/// Per base record, the fraction of its truth edges found within its top
/// `k`, averaged over truth base records.
pub fn edge_recall_at_k(result: &JoinResult, truth: &TruthSet, k: usize) -> f64 {
    let lists = top_k_lists(result, k);
    mean_over_truth(truth, |b, rel| {
        let got: BTreeSet<&str> = lists
            .get(b)
            .map(|v| v.iter().map(|&(_, a)| a).collect())
            .unwrap_or_default();
        rel.iter().filter(|a| got.contains(a.as_str())).count() as f64 / rel.len() as f64
    })
}

/// Mean reciprocal rank of the first relevant match within the top `k`,
/// counting 0 when none appears.
pub fn mrr_at_k(result: &JoinResult, truth: &TruthSet, k: usize) -> f64 {
    let lists = top_k_lists(result, k);
    mean_over_truth(truth, |b, rel| {
        lists
            .get(b)
            .and_then(|v| v.iter().find(|(_, a)| rel.contains(*a)))
            .map_or(0.0, |&(rank, _)| 1.0 / rank as f64)
    })
}

pub fn mse(predictions: &BTreeMap<String, f64>, truth: &HashMap<String, f64>) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let mut total = 0.0;
    for (id, p) in predictions {
        let t = truth
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("prediction for {id} has no true value")))?;
        total += (p - t).powi(2);
    }
    Ok(total / predictions.len() as f64)
}

/// A row of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Lexical(LexicalKind),
    UntrainedEncoder,
    TrainedEncoder,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Lexical(LexicalKind::Levenshtein),
        Method::Lexical(LexicalKind::JaccardWs),
        Method::Lexical(LexicalKind::Jaccard2g),
        Method::Lexical(LexicalKind::JaccardKeyWs),
        Method::Lexical(LexicalKind::JaccardKey2g),
        Method::Lexical(LexicalKind::Bm25),
        Method::UntrainedEncoder,
        Method::TrainedEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lexical(k) => k.name(),
            Method::UntrainedEncoder => "untrained-encoder",
            Method::TrainedEncoder => "trained-encoder",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "untrained-encoder" => Ok(Method::UntrainedEncoder),
            "trained-encoder" => Ok(Method::TrainedEncoder),
            _ => s.parse().map(Method::Lexical),
        }
    }
}

/// Inputs the encoder rows of a comparison need.
pub struct ComparisonContext<'a> {
    pub preparer: Preparer,
    /// Column used by the key-based kernels (LD, JK-*).
    pub key_column: Option<String>,
    pub untrained: Option<&'a EncoderModel>,
    pub trained: Option<&'a Encoders>,
    pub metric: Distance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, method: &str, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.k == k)
            .map(|r| r.recall)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["method", "k", "recall"])?;
        for r in &self.rows {
            w.write_record([r.method.clone(), r.k.to_string(), format!("{:.6}", r.recall)])?;
        }
        w.flush().map_err(|e| Error::io("<metrics>", e))?;
        Ok(())
    }

    /// Methods down, one `recall@k` column per k, values in percent.
    pub fn render(&self) -> String {
        let mut methods: Vec<&str> = Vec::new();
        let mut ks: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
            if !ks.contains(&r.k) {
                ks.push(r.k);
            }
        }
        let width = methods.iter().map(|m| m.len()).max().unwrap_or(0).max("method".len());
        let mut out = format!("{:<width$}", "method");
        for k in &ks {
            out.push_str(&format!("  {:>9}", format!("recall@{k}")));
        }
        out.push('\n');
        for m in methods {
            out.push_str(&format!("{m:<width$}"));
            for &k in &ks {
                match self.get(m, k) {
                    Some(v) => out.push_str(&format!("  {:>9.2}", 100.0 * v)),
                    None => out.push_str(&format!("  {:>9}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Top-`k` retrieval for every base record with one method.
pub fn method_result(
    method: Method,
    base: &Dataset,
    aux: &Dataset,
    k: usize,
    ctx: &ComparisonContext<'_>,
) -> Result<JoinResult> {
    let embed_join = |b: &dyn Encoder, a: &dyn Encoder| {
        let spec = JoinSpec {
            join_type: JoinType::Left,
            left_size: 1,
            right_size: k,
            ..JoinSpec::default_for(&base.name, &aux.name, "supervision")
        };
        let be = embed_dataset(b, base, &ctx.preparer);
        let ae = embed_dataset(a, aux, &ctx.preparer);
        execute_join(&spec, &be, &ae, ctx.metric, &JoinOptions::default())
    };
    match method {
        Method::Lexical(kind) => lexical_join(kind, base, aux, ctx.key_column.as_deref(), k),
        Method::UntrainedEncoder => {
            let m = ctx
                .untrained
                .ok_or_else(|| Error::InvalidArgument("untrained-encoder row needs a model".into()))?;
            embed_join(m, m)
        }
        Method::TrainedEncoder => {
            let e = ctx
                .trained
                .ok_or_else(|| Error::InvalidArgument("trained-encoder row needs a trained model".into()))?;
            embed_join(e.base(), e.aux())
        }
    }
}

/// Recall@k of every method for every k. Only base records with known
/// truth are queried.
pub fn run_comparison(
    base: &Dataset,
    aux: &Dataset,
    truth: &TruthSet,
    methods: &[Method],
    ks: &[usize],
    ctx: &ComparisonContext<'_>,
) -> Result<MetricTable> {
    let k_max = ks.iter().copied().max().unwrap_or(1);
    if ks.contains(&0) {
        return Err(Error::InvalidArgument("k must be ≥ 1".into()));
    }
    let queried = base.filter(|r| truth.contains(&r.id));
    let mut table = MetricTable::default();
    for &method in methods {
        let result = method_result(method, &queried, aux, k_max, ctx)?;
        for &k in ks {
            table.rows.push(MetricRow {
                method: method.name().to_string(),
                k,
                recall: recall_at_k(&result, truth, k),
            });
        }
    }
    Ok(table)
}
