//! Embedding index, k-NN retrieval and join execution.
//!
//! The reference index is an exact linear scan. Join results are
//! materialized in a canonical order (anchor record order, then rank) so
//! the same inputs always produce the same bytes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::joinspec::{Distance, JoinSpec, JoinType};
use crate::model::{dot, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreOrder {
    LowerIsBetter,
    HigherIsBetter,
}

impl ScoreOrder {
    pub fn for_metric(metric: Distance) -> Self {
        match metric {
            Distance::L2 => ScoreOrder::LowerIsBetter,
            Distance::InnerProduct => ScoreOrder::HigherIsBetter,
        }
    }

    /// `Less` when `a` is the better score.
    pub fn compare(self, a: f64, b: f64) -> Ordering {
        // -0.0 and 0.0 tie; NaN falls back to a total order
        let cmp = |x: f64, y: f64| x.partial_cmp(&y).unwrap_or_else(|| x.total_cmp(&y));
        match self {
            ScoreOrder::LowerIsBetter => cmp(a, b),
            ScoreOrder::HigherIsBetter => cmp(b, a),
        }
    }

    pub fn passes(self, score: f64, threshold: Option<f64>) -> bool {
        match (self, threshold) {
            (_, None) => true,
            (ScoreOrder::LowerIsBetter, Some(t)) => score <= t,
            (ScoreOrder::HigherIsBetter, Some(t)) => score >= t,
        }
    }
}

/// Keeps the best `k` of `(position, score)` candidates, ties broken by
/// ascending id, returned best first.
pub(crate) fn select_top_k(
    mut candidates: Vec<(usize, f64)>,
    k: usize,
    order: ScoreOrder,
    ids: &[String],
) -> Vec<(usize, f64)> {
    let cmp = |a: &(usize, f64), b: &(usize, f64)| order.compare(a.1, b.1).then_with(|| ids[a.0].cmp(&ids[b.0]));
    if k == 0 {
        return Vec::new();
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    candidates
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub score: f64,
}

/// Retrieval backend. Implementations must return the exact top `k` or
/// declare themselves approximate.
pub trait VectorIndex: Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn metric(&self) -> Distance;
    fn id(&self, position: usize) -> &str;
    fn is_approximate(&self) -> bool {
        false
    }
    /// Best-first `(position, score)` pairs.
    fn search(&self, query: &[f64], k: usize, threshold: Option<f64>) -> Result<Vec<(usize, f64)>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Exact linear-scan index.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    data: Vec<f64>,
    dim: usize,
    metric: Distance,
}

pub fn build_index(entries: &[(String, EmbeddingVector)], metric: Distance) -> Result<EmbeddingIndex> {
    EmbeddingIndex::build(entries, metric)
}

impl EmbeddingIndex {
    pub fn build(entries: &[(String, EmbeddingVector)], metric: Distance) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot index an empty embedding set".into()))?;
        let dim = first.1.dim();
        let mut seen = HashSet::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        let mut ids = Vec::with_capacity(entries.len());
        for (id, v) in entries {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
            ids.push(id.clone());
            data.extend_from_slice(v.as_slice());
        }
        Ok(EmbeddingIndex { ids, data, dim, metric })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, position: usize) -> &[f64] {
        &self.data[position * self.dim..(position + 1) * self.dim]
    }

    pub fn entries(&self) -> Vec<(String, EmbeddingVector)> {
        (0..self.ids.len())
            .map(|i| (self.ids[i].clone(), EmbeddingVector(self.vector(i).to_vec())))
            .collect()
    }

    pub fn order(&self) -> ScoreOrder {
        ScoreOrder::for_metric(self.metric)
    }

    fn check_dim(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        Ok(())
    }

    /// Score of every entry against `query`, in index order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(query)?;
        Ok(self
            .data
            .chunks_exact(self.dim)
            .map(|v| pair_score(self.metric, query, v))
            .collect())
    }

    pub fn knn(&self, query: &EmbeddingVector, k: usize, threshold: Option<f64>) -> Result<Vec<Neighbor>> {
        Ok(self
            .search(query.as_slice(), k, threshold)?
            .into_iter()
            .map(|(i, score)| Neighbor {
                id: self.ids[i].clone(),
                score,
            })
            .collect())
    }
}

/// Euclidean distance or inner product. Symmetric in its arguments bit for
/// bit, which the index-side equivalence relies on.
pub fn pair_score(metric: Distance, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Distance::L2 => crate::model::l2_distance(a, b),
        Distance::InnerProduct => dot(a, b),
    }
}

impl VectorIndex for EmbeddingIndex {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn metric(&self) -> Distance {
        self.metric
    }

    fn id(&self, position: usize) -> &str {
        &self.ids[position]
    }

    fn search(&self, query: &[f64], k: usize, threshold: Option<f64>) -> Result<Vec<(usize, f64)>> {
        let order = self.order();
        let candidates: Vec<(usize, f64)> = self
            .scores(query)?
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| order.passes(s, threshold))
            .collect();
        Ok(select_top_k(candidates, k, order, &self.ids))
    }
}

pub fn knn(index: &EmbeddingIndex, query: &EmbeddingVector, k: usize, threshold: Option<f64>) -> Result<Vec<Neighbor>> {
    index.knn(query, k, threshold)
}

/// Which query produced a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    BaseToAux,
    AuxToBase,
    Both,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::BaseToAux => "base_to_aux",
            Direction::AuxToBase => "aux_to_base",
            Direction::Both => "both",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "base_to_aux" | "" => Ok(Direction::BaseToAux),
            "aux_to_base" => Ok(Direction::AuxToBase),
            "both" => Ok(Direction::Both),
            other => Err(Error::InvalidArgument(format!("unknown direction {other:?}"))),
        }
    }
}

/// One joined tuple. `None` on either side is the ABSENT marker of an
/// outer join; such rows have rank 0 and a NaN score.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub base_id: Option<String>,
    pub aux_id: Option<String>,
    pub rank: usize,
    pub score: f64,
    pub direction: Direction,
    /// Intermediate record ids of a multi-hop chain.
    pub path: Vec<String>,
}

impl Match {
    fn pair(base: &str, aux: &str, rank: usize, score: f64, direction: Direction) -> Self {
        Match {
            base_id: Some(base.to_string()),
            aux_id: Some(aux.to_string()),
            rank,
            score,
            direction,
            path: Vec::new(),
        }
    }

    fn absent_aux(base: &str) -> Self {
        Match {
            base_id: Some(base.to_string()),
            aux_id: None,
            rank: 0,
            score: f64::NAN,
            direction: Direction::BaseToAux,
            path: Vec::new(),
        }
    }

    fn absent_base(aux: &str) -> Self {
        Match {
            base_id: None,
            aux_id: Some(aux.to_string()),
            rank: 0,
            score: f64::NAN,
            direction: Direction::AuxToBase,
            path: Vec::new(),
        }
    }

    pub fn is_absent(&self) -> bool {
        self.base_id.is_none() || self.aux_id.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct JoinResult {
    pub matches: Vec<Match>,
    pub spec: Option<JoinSpec>,
    pub order: ScoreOrder,
}

impl PartialEq for JoinResult {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.order == other.order
            && self.matches.len() == other.matches.len()
            && self.matches.iter().zip(&other.matches).all(|(a, b)| {
                a.base_id == b.base_id
                    && a.aux_id == b.aux_id
                    && a.rank == b.rank
                    && a.direction == b.direction
                    && a.path == b.path
                    && a.score.to_bits() == b.score.to_bits()
            })
    }
}

impl JoinResult {
    /// Matched (non-ABSENT) pairs.
    pub fn pairs(&self) -> HashSet<(String, String)> {
        self.matches
            .iter()
            .filter_map(|m| Some((m.base_id.clone()?, m.aux_id.clone()?)))
            .collect()
    }

    fn tags_directions(&self) -> bool {
        matches!(&self.spec, Some(s) if s.join_type == JoinType::Full)
            || self.matches.iter().any(|m| m.direction == Direction::Both)
    }

    fn has_paths(&self) -> bool {
        self.matches.iter().any(|m| !m.path.is_empty())
    }

    /// `base_id,aux_id,rank,score`; ABSENT sides are empty cells. FULL joins
    /// add a `direction` column and chains a `path` column (`|`-separated).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let tag = self.tags_directions();
        let paths = self.has_paths();
        let mut header = vec!["base_id", "aux_id", "rank", "score"];
        if tag {
            header.push("direction");
        }
        if paths {
            header.push("path");
        }
        w.write_record(&header)?;
        for m in &self.matches {
            let mut row = vec![
                m.base_id.clone().unwrap_or_default(),
                m.aux_id.clone().unwrap_or_default(),
                m.rank.to_string(),
                if m.score.is_nan() {
                    String::new()
                } else {
                    m.score.to_string()
                },
            ];
            if tag {
                row.push(m.direction.as_str().to_string());
            }
            if paths {
                row.push(m.path.join("|"));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<join result>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a result CSV. The score order is not stored in the file; ranks
    /// carry the ordering.
    pub fn read_csv<R: Read>(reader: R, order: ScoreOrder) -> Result<JoinResult> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let col = |name: &str| header.iter().position(|h| h == name);
        let (b, a, r, s) = match (col("base_id"), col("aux_id"), col("rank"), col("score")) {
            (Some(b), Some(a), Some(r), Some(s)) => (b, a, r, s),
            _ => {
                return Err(Error::InvalidArgument(
                    "result CSV needs base_id,aux_id,rank,score columns".into(),
                ))
            }
        };
        let (d, p) = (col("direction"), col("path"));
        let mut matches = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let line = i + 2;
            let opt = |v: &str| (!v.is_empty()).then(|| v.to_string());
            let rank = row[r]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("line {line}: bad rank {:?}", &row[r])))?;
            let score = if row[s].is_empty() {
                f64::NAN
            } else {
                row[s]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("line {line}: bad score {:?}", &row[s])))?
            };
            matches.push(Match {
                base_id: opt(&row[b]),
                aux_id: opt(&row[a]),
                rank,
                score,
                direction: d
                    .map(|d| Direction::parse(&row[d]))
                    .transpose()?
                    .unwrap_or(Direction::BaseToAux),
                path: p
                    .map(|p| {
                        row[p]
                            .split('|')
                            .filter(|x| !x.is_empty())
                            .map(str::to_string)
                            .collect()
                    })
                    .unwrap_or_default(),
            });
        }
        Ok(JoinResult {
            matches,
            spec: None,
            order,
        })
    }

    pub fn load_csv(path: &Path, order: ScoreOrder) -> Result<JoinResult> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), order)
    }
}

/// Where the index lives for an INNER join.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexSide {
    /// Index the larger dataset and query it with the smaller one.
    #[default]
    Larger,
    /// Index the smaller dataset; the same result is recovered by scanning it
    /// with every record of the larger side. Slower, kept for comparison.
    Smaller,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct JoinOptions {
    pub threshold: Option<f64>,
    pub index_side: IndexSide,
    /// INNER only: union both retrieval directions instead of the single
    /// size-chosen direction.
    pub both_directions: bool,
}

type Entries = [(String, EmbeddingVector)];

/// Per query, best-first `(target position, score)` lists.
fn retrieve(
    queries: &Entries,
    targets: &Entries,
    k: usize,
    metric: Distance,
    threshold: Option<f64>,
    side: IndexSide,
) -> Result<Vec<Vec<(usize, f64)>>> {
    match side {
        IndexSide::Larger => {
            let index = EmbeddingIndex::build(targets, metric)?;
            queries
                .par_iter()
                .map(|(_, q)| index.search(q.as_slice(), k, threshold))
                .collect()
        }
        IndexSide::Smaller => {
            // index the queries, scan it with every target, regroup per query
            let index = EmbeddingIndex::build(queries, metric)?;
            let order = index.order();
            let per_target: Vec<Vec<f64>> = targets
                .par_iter()
                .map(|(_, t)| index.scores(t.as_slice()))
                .collect::<Result<_>>()?;
            let target_ids: Vec<String> = targets.iter().map(|(id, _)| id.clone()).collect();
            Ok((0..queries.len())
                .into_par_iter()
                .map(|qi| {
                    let candidates: Vec<(usize, f64)> = per_target
                        .iter()
                        .enumerate()
                        .map(|(ti, scores)| (ti, scores[qi]))
                        .filter(|&(_, s)| order.passes(s, threshold))
                        .collect();
                    select_top_k(candidates, k, order, &target_ids)
                })
                .collect())
        }
    }
}

struct Row {
    base: usize,
    aux: usize,
    score: f64,
    direction: Direction,
}

fn check_dims(base: &Entries, aux: &Entries) -> Result<()> {
    if let (Some(b), Some(a)) = (base.first(), aux.first()) {
        if b.1.dim() != a.1.dim() {
            return Err(Error::DimensionMismatch {
                expected: b.1.dim(),
                actual: a.1.dim(),
            });
        }
    }
    Ok(())
}

/// Executes a keyless join over precomputed embeddings.
///
/// * LEFT: index aux, `right_size` matches per base record, ABSENT when none
///   survive the threshold.
/// * RIGHT: the mirror image, `left_size` matches per aux record.
/// * INNER: one direction, querying the smaller side against the larger;
///   `right_size` per base record when querying base→aux (then at most
///   `left_size` base records kept per aux record), or `left_size` per aux
///   record the other way round (then at most `right_size` per base record).
/// * FULL: union of both directions, duplicate pairs merged, ABSENT rows for
///   records unmatched on either side.
pub fn execute_join(
    spec: &JoinSpec,
    base: &Entries,
    aux: &Entries,
    metric: Distance,
    opts: &JoinOptions,
) -> Result<JoinResult> {
    check_dims(base, aux)?;
    let order = ScoreOrder::for_metric(metric);
    let threshold = opts.threshold;
    let base_ids: Vec<String> = base.iter().map(|(id, _)| id.clone()).collect();
    let aux_ids: Vec<String> = aux.iter().map(|(id, _)| id.clone()).collect();

    let forward = |k: usize, side: IndexSide| -> Result<Vec<Row>> {
        if base.is_empty() || aux.is_empty() {
            return Ok(Vec::new());
        }
        let lists = retrieve(base, aux, k, metric, threshold, side)?;
        Ok(lists
            .into_iter()
            .enumerate()
            .flat_map(|(b, list)| {
                list.into_iter().map(move |(a, score)| Row {
                    base: b,
                    aux: a,
                    score,
                    direction: Direction::BaseToAux,
                })
            })
            .collect())
    };
    let backward = |k: usize, side: IndexSide| -> Result<Vec<Row>> {
        if base.is_empty() || aux.is_empty() {
            return Ok(Vec::new());
        }
        let lists = retrieve(aux, base, k, metric, threshold, side)?;
        Ok(lists
            .into_iter()
            .enumerate()
            .flat_map(|(a, list)| {
                list.into_iter().map(move |(b, score)| Row {
                    base: b,
                    aux: a,
                    score,
                    direction: Direction::AuxToBase,
                })
            })
            .collect())
    };

    let matches = match spec.join_type {
        JoinType::Left => {
            let rows = forward(spec.right_size, IndexSide::Larger)?;
            group_by_base(rows, &base_ids, &aux_ids, order, true, false)
        }
        JoinType::Right => {
            let rows = backward(spec.left_size, IndexSide::Larger)?;
            group_by_aux(rows, &base_ids, &aux_ids, order)
        }
        JoinType::Inner if opts.both_directions => {
            let rows = union_rows(
                forward(spec.right_size, IndexSide::Larger)?,
                backward(spec.left_size, IndexSide::Larger)?,
                order,
            );
            group_by_base(rows, &base_ids, &aux_ids, order, false, false)
        }
        JoinType::Inner => {
            let rows = if aux.len() >= base.len() {
                let rows = forward(spec.right_size, opts.index_side)?;
                cap_per(rows, spec.left_size, order, |r| r.aux, |r| &base_ids[r.base])
            } else {
                let rows = backward(spec.left_size, opts.index_side)?;
                cap_per(rows, spec.right_size, order, |r| r.base, |r| &aux_ids[r.aux])
            };
            group_by_base(rows, &base_ids, &aux_ids, order, false, false)
        }
        JoinType::Full => {
            let rows = union_rows(
                forward(spec.right_size, IndexSide::Larger)?,
                backward(spec.left_size, IndexSide::Larger)?,
                order,
            );
            group_by_base(rows, &base_ids, &aux_ids, order, true, true)
        }
    };
    Ok(JoinResult {
        matches,
        spec: Some(spec.clone()),
        order,
    })
}

/// Keeps, for every key, the best `cap` rows.
fn cap_per<'a>(
    rows: Vec<Row>,
    cap: usize,
    order: ScoreOrder,
    key: impl Fn(&Row) -> usize,
    tie: impl Fn(&Row) -> &'a String,
) -> Vec<Row> {
    let mut groups: BTreeMap<usize, Vec<Row>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(&r)).or_default().push(r);
    }
    groups
        .into_values()
        .flat_map(|mut g| {
            g.sort_by(|x, y| order.compare(x.score, y.score).then_with(|| tie(x).cmp(tie(y))));
            g.truncate(cap);
            g
        })
        .collect()
}

fn union_rows(forward: Vec<Row>, backward: Vec<Row>, order: ScoreOrder) -> Vec<Row> {
    let mut merged: HashMap<(usize, usize), Row> = HashMap::with_capacity(forward.len() + backward.len());
    for r in forward.into_iter().chain(backward) {
        match merged.get_mut(&(r.base, r.aux)) {
            None => {
                merged.insert((r.base, r.aux), r);
            }
            Some(existing) => {
                if order.compare(r.score, existing.score) == Ordering::Less {
                    existing.score = r.score;
                }
                existing.direction = Direction::Both;
            }
        }
    }
    merged.into_values().collect()
}

/// Rows grouped per base record in base order, ranked 1.. by score (ties by
/// aux id). Optionally adds ABSENT rows for unmatched base and aux records.
fn group_by_base(
    rows: Vec<Row>,
    base_ids: &[String],
    aux_ids: &[String],
    order: ScoreOrder,
    absent_base_rows: bool,
    absent_aux_rows: bool,
) -> Vec<Match> {
    let mut per_base: Vec<Vec<Row>> = (0..base_ids.len()).map(|_| Vec::new()).collect();
    let mut aux_matched = vec![false; aux_ids.len()];
    for r in rows {
        aux_matched[r.aux] = true;
        per_base[r.base].push(r);
    }
    let mut out = Vec::new();
    for (b, mut group) in per_base.into_iter().enumerate() {
        if group.is_empty() {
            if absent_base_rows {
                out.push(Match::absent_aux(&base_ids[b]));
            }
            continue;
        }
        group.sort_by(|x, y| {
            order
                .compare(x.score, y.score)
                .then_with(|| aux_ids[x.aux].cmp(&aux_ids[y.aux]))
        });
        for (i, r) in group.into_iter().enumerate() {
            out.push(Match::pair(&base_ids[b], &aux_ids[r.aux], i + 1, r.score, r.direction));
        }
    }
    if absent_aux_rows {
        for (a, matched) in aux_matched.into_iter().enumerate() {
            if !matched {
                out.push(Match::absent_base(&aux_ids[a]));
            }
        }
    }
    out
}

/// RIGHT joins: rows grouped per aux record, ABSENT for unmatched aux.
fn group_by_aux(rows: Vec<Row>, base_ids: &[String], aux_ids: &[String], order: ScoreOrder) -> Vec<Match> {
    let mut per_aux: Vec<Vec<Row>> = (0..aux_ids.len()).map(|_| Vec::new()).collect();
    for r in rows {
        per_aux[r.aux].push(r);
    }
    let mut out = Vec::new();
    for (a, mut group) in per_aux.into_iter().enumerate() {
        if group.is_empty() {
            out.push(Match::absent_base(&aux_ids[a]));
            continue;
        }
        group.sort_by(|x, y| {
            order
                .compare(x.score, y.score)
                .then_with(|| base_ids[x.base].cmp(&base_ids[y.base]))
        });
        for (i, r) in group.into_iter().enumerate() {
            out.push(Match::pair(
                &base_ids[r.base],
                &aux_ids[a],
                i + 1,
                r.score,
                Direction::AuxToBase,
            ));
        }
    }
    out
}

/// One hop of a chain: the index to query and the embeddings, in this
/// stage's space, of every record the previous hop can return.
#[derive(Debug, Clone)]
pub struct ChainStage {
    pub spec: JoinSpec,
    pub index: EmbeddingIndex,
    pub queries: HashMap<String, EmbeddingVector>,
    pub threshold: Option<f64>,
}

/// Multi-hop retrieval. Stage 0 is queried with `initial`; every later
/// stage is queried with the records retrieved by the stage before it,
/// `right_size` results per hop. Final rows relate each initial query to
/// last-stage matches, ranked in path order, with the intermediate ids in
/// `path`. A single stage is exactly [`execute_join`].
pub fn chain_joins(initial: &Entries, stages: &[ChainStage]) -> Result<JoinResult> {
    let first = stages
        .first()
        .ok_or_else(|| Error::InvalidArgument("a chain needs at least one stage".into()))?;
    let metric = first.index.metric;
    if stages.len() == 1 {
        return execute_join(
            &first.spec,
            initial,
            &first.index.entries(),
            metric,
            &JoinOptions {
                threshold: first.threshold,
                ..JoinOptions::default()
            },
        );
    }
    for (s, pair) in stages.windows(2).enumerate() {
        if pair[1].spec.base_ref != pair[0].spec.aux_ref {
            return Err(Error::BrokenChain {
                stage: s + 1,
                message: format!(
                    "queries {} but the previous stage retrieves from {}",
                    pair[1].spec.base_ref, pair[0].spec.aux_ref
                ),
            });
        }
    }

    struct Partial {
        path: Vec<String>,
        score: f64,
    }

    let order = ScoreOrder::for_metric(metric);
    let mut matches = Vec::new();
    for (qid, qvec) in initial {
        let mut frontier = vec![Partial {
            path: Vec::new(),
            score: f64::NAN,
        }];
        for (s, stage) in stages.iter().enumerate() {
            let mut next = Vec::new();
            for partial in &frontier {
                let query = match partial.path.last() {
                    None => qvec,
                    Some(id) => stage.queries.get(id).ok_or_else(|| Error::BrokenChain {
                        stage: s,
                        message: format!("no embedding for retrieved record {id}"),
                    })?,
                };
                for n in stage.index.knn(query, stage.spec.right_size, stage.threshold)? {
                    let mut path = partial.path.clone();
                    path.push(n.id);
                    next.push(Partial { path, score: n.score });
                }
            }
            frontier = next;
        }
        if frontier.is_empty() {
            if matches!(first.spec.join_type, JoinType::Left | JoinType::Full) {
                matches.push(Match::absent_aux(qid));
            }
            continue;
        }
        for (rank, mut p) in frontier.into_iter().enumerate() {
            let last = p.path.pop().unwrap_or_default();
            matches.push(Match {
                base_id: Some(qid.clone()),
                aux_id: Some(last),
                rank: rank + 1,
                score: p.score,
                direction: Direction::BaseToAux,
                path: p.path,
            });
        }
    }
    Ok(JoinResult {
        matches,
        spec: Some(first.spec.clone()),
        order,
    })
}

/// Mean label of each base record's top `k` labeled matches. Base records
/// without any labeled match are left out; unlabeled matches are skipped.
pub fn aggregate_labels(result: &JoinResult, labels: &HashMap<String, f64>, k: usize) -> BTreeMap<String, f64> {
    let mut per_base: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for m in &result.matches {
        if let (Some(b), Some(a)) = (&m.base_id, &m.aux_id) {
            if let Some(&label) = labels.get(a) {
                per_base.entry(b).or_default().push((m.rank, label));
            }
        }
    }
    per_base
        .into_iter()
        .map(|(b, mut v)| {
            v.sort_by_key(|&(rank, _)| rank);
            v.truncate(k);
            let mean = v.iter().map(|&(_, l)| l).sum::<f64>() / v.len() as f64;
            (b.to_string(), mean)
        })
        .collect()
}

const EMBEDDINGS_MAGIC: &[u8; 8] = b"EMBREMBS";
const EMBEDDINGS_VERSION: u32 = 1;

/// Embedding cache: magic, version, count, dim, then per entry a
/// length-prefixed UTF-8 id and `dim` little-endian f64 values.
pub fn write_embeddings<W: Write>(mut w: W, entries: &Entries) -> Result<()> {
    let dim = entries.first().map(|e| e.1.dim()).unwrap_or(0);
    let io = |e| Error::io("<embeddings>", e);
    w.write_all(EMBEDDINGS_MAGIC).map_err(io)?;
    w.write_all(&EMBEDDINGS_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(entries.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u64).to_le_bytes()).map_err(io)?;
    for (id, v) in entries {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
        w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(id.as_bytes()).map_err(io)?;
        for x in v.as_slice() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_embeddings<R: Read>(mut r: R) -> Result<Vec<(String, EmbeddingVector)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<embeddings>", e))?;
    let mut cur = crate::encoder::ByteCursor::new(&buf);
    if cur.take(8)? != EMBEDDINGS_MAGIC {
        return Err(Error::ModelFormat("not an embeddings file".into()));
    }
    let version = cur.u32()?;
    if version != EMBEDDINGS_VERSION {
        return Err(Error::ModelFormat(format!(
            "embeddings format version {version}, expected {EMBEDDINGS_VERSION}"
        )));
    }
    let n = cur.u64()? as usize;
    let dim = cur.u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::ModelFormat("embedding id is not UTF-8".into()))?
            .to_string();
        out.push((id, EmbeddingVector(cur.f64s(dim)?)));
    }
    cur.finish()?;
    Ok(out)
}

pub fn save_embeddings(path: &Path, entries: &Entries) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(std::io::BufWriter::new(file), entries)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<(String, EmbeddingVector)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(std::io::BufReader::new(file))
}

impl fmt::Display for JoinResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|_| fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector(v.to_vec())
    }

    fn entries(prefix: &str, vs: &[&[f64]]) -> Vec<(String, EmbeddingVector)> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| (format!("{prefix}{i}"), ev(v)))
            .collect()
    }

    #[test]
    fn three_point_instance() {
        let idx = build_index(
            &[
                ("a".into(), ev(&[0.0, 0.0])),
                ("b".into(), ev(&[1.0, 0.0])),
                ("c".into(), ev(&[0.0, 2.0])),
            ],
            Distance::L2,
        )
        .unwrap();
        let got = idx.knn(&ev(&[0.6, 0.0]), 2, None).unwrap();
        assert_eq!(got[0].id, "b");
        assert!((got[0].score - 0.4).abs() < 1e-12);
        assert_eq!(got[1].id, "a");
        assert!((got[1].score - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_entry_and_exact_hit() {
        let idx = build_index(&[("only".into(), ev(&[3.0, 4.0]))], Distance::L2).unwrap();
        let got = idx.knn(&ev(&[-1.0, 7.0]), 5, None).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id, "only");
        let hit = idx.knn(&ev(&[3.0, 4.0]), 1, None).unwrap();
        assert_eq!(hit[0].score, 0.0);
    }

    #[test]
    fn duplicates_tie_break_by_id_and_threshold() {
        let idx = build_index(
            &[
                ("z".into(), ev(&[1.0])),
                ("m".into(), ev(&[1.0])),
                ("q".into(), ev(&[5.0])),
            ],
            Distance::L2,
        )
        .unwrap();
        let got = idx.knn(&ev(&[1.0]), 2, None).unwrap();
        assert_eq!(got.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(), ["m", "z"]);
        assert!(idx.knn(&ev(&[100.0]), 3, Some(1.0)).unwrap().is_empty());
        let ip = build_index(
            &[("a".into(), ev(&[1.0])), ("b".into(), ev(&[2.0]))],
            Distance::InnerProduct,
        )
        .unwrap();
        let got = ip.knn(&ev(&[1.0]), 2, Some(1.5)).unwrap();
        assert_eq!(
            got,
            vec![Neighbor {
                id: "b".into(),
                score: 2.0
            }]
        );
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(build_index(&[], Distance::L2).is_err());
        assert!(matches!(
            build_index(&[("a".into(), ev(&[1.0])), ("b".into(), ev(&[1.0, 2.0]))], Distance::L2),
            Err(Error::DimensionMismatch { expected: 1, actual: 2 })
        ));
        assert!(matches!(
            build_index(&[("a".into(), ev(&[1.0])), ("a".into(), ev(&[2.0]))], Distance::L2),
            Err(Error::DuplicateId(_))
        ));
    }

    fn spec(jt: JoinType, l: usize, r: usize) -> JoinSpec {
        JoinSpec {
            join_type: jt,
            left_size: l,
            right_size: r,
            ..JoinSpec::default_for("b", "a", "s")
        }
    }

    #[test]
    fn left_join_emits_absent_rows() {
        let base = entries("b", &[&[0.0], &[10.0]]);
        let aux = entries("a", &[&[0.1], &[0.3]]);
        let opts = JoinOptions {
            threshold: Some(1.0),
            ..Default::default()
        };
        let r = execute_join(&spec(JoinType::Left, 1, 5), &base, &aux, Distance::L2, &opts).unwrap();
        assert_eq!(r.matches.len(), 3);
        assert_eq!(r.matches[2].base_id.as_deref(), Some("b1"));
        assert!(r.matches[2].aux_id.is_none());
        let inner = execute_join(&spec(JoinType::Inner, 5, 5), &base, &aux, Distance::L2, &opts).unwrap();
        assert!(inner.matches.iter().all(|m| !m.is_absent()));
    }

    #[test]
    fn inner_indexes_larger_side_and_caps() {
        // 2 base, 3 aux: aux indexed, right_size per base, left_size per aux
        let base = entries("b", &[&[0.0], &[0.2]]);
        let aux = entries("a", &[&[0.1], &[5.0], &[6.0]]);
        let r = execute_join(
            &spec(JoinType::Inner, 1, 2),
            &base,
            &aux,
            Distance::L2,
            &JoinOptions::default(),
        )
        .unwrap();
        let mut per_base: HashMap<String, usize> = HashMap::new();
        let mut per_aux: HashMap<String, usize> = HashMap::new();
        for m in &r.matches {
            *per_base.entry(m.base_id.clone().unwrap()).or_default() += 1;
            *per_aux.entry(m.aux_id.clone().unwrap()).or_default() += 1;
            assert_eq!(m.direction, Direction::BaseToAux);
        }
        assert!(per_base.values().all(|&c| c <= 2));
        assert!(per_aux.values().all(|&c| c <= 1));
        // a0 is nearest to both; only its best base (b0, 0.1 vs 0.1 tie → id) keeps it
        assert_eq!(r.matches[0].aux_id.as_deref(), Some("a0"));
        assert_eq!(r.matches[0].base_id.as_deref(), Some("b0"));
    }

    #[test]
    fn right_mirrors_left() {
        let base = entries("b", &[&[0.0, 1.0], &[2.0, 0.5], &[1.0, 1.0]]);
        let aux = entries("a", &[&[0.1, 0.9], &[3.0, 0.0]]);
        let right = execute_join(
            &spec(JoinType::Right, 2, 1),
            &base,
            &aux,
            Distance::L2,
            &JoinOptions::default(),
        )
        .unwrap();
        let mirrored = execute_join(
            &spec(JoinType::Left, 1, 2),
            &aux,
            &base,
            Distance::L2,
            &JoinOptions::default(),
        )
        .unwrap();
        assert_eq!(right.matches.len(), mirrored.matches.len());
        for (r, m) in right.matches.iter().zip(&mirrored.matches) {
            assert_eq!(r.base_id, m.aux_id);
            assert_eq!(r.aux_id, m.base_id);
            assert_eq!(r.rank, m.rank);
            assert_eq!(r.score.to_bits(), m.score.to_bits());
        }
    }

    #[test]
    fn full_join_tags_and_absent_both_sides() {
        let base = entries("b", &[&[0.0], &[50.0]]);
        let aux = entries("a", &[&[0.5], &[-40.0]]);
        let opts = JoinOptions {
            threshold: Some(2.0),
            ..Default::default()
        };
        let r = execute_join(&spec(JoinType::Full, 1, 1), &base, &aux, Distance::L2, &opts).unwrap();
        assert_eq!(r.matches.len(), 3);
        assert_eq!(r.matches[0].direction, Direction::Both);
        assert!(r.matches[1].aux_id.is_none());
        assert!(r.matches[2].base_id.is_none());
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "base_id,aux_id,rank,score,direction\nb0,a0,1,0.5,both\nb1,,0,,base_to_aux\n,a1,0,,aux_to_base\n"
        );
        let back = JoinResult::read_csv(text.as_bytes(), ScoreOrder::LowerIsBetter).unwrap();
        assert_eq!(back.matches.len(), 3);
        assert_eq!(back.matches[0].direction, Direction::Both);
        assert!(back.matches[1].score.is_nan());
    }

    #[test]
    fn two_hop_chain_composes_bijections() {
        // q_i → m_{(i+1)%3} → t_{(i+2)%3}
        let q = entries("q", &[&[0.0], &[10.0], &[20.0]]);
        let m: Vec<_> = (0..3)
            .map(|i| (format!("m{}", (i + 1) % 3), ev(&[10.0 * i as f64])))
            .collect();
        let m_as_query: HashMap<String, EmbeddingVector> =
            (0..3).map(|i| (format!("m{i}"), ev(&[100.0 * i as f64]))).collect();
        let t: Vec<_> = (0..3)
            .map(|i| (format!("t{i}"), ev(&[100.0 * ((i + 2) % 3) as f64])))
            .collect();
        let hop = |b: &str, a: &str| JoinSpec {
            join_type: JoinType::Left,
            left_size: 1,
            right_size: 1,
            ..JoinSpec::default_for(b, a, "s")
        };
        let stages = vec![
            ChainStage {
                spec: hop("q", "m"),
                index: build_index(&m, Distance::L2).unwrap(),
                queries: HashMap::new(),
                threshold: None,
            },
            ChainStage {
                spec: hop("m", "t"),
                index: build_index(&t, Distance::L2).unwrap(),
                queries: m_as_query,
                threshold: None,
            },
        ];
        let r = chain_joins(&q, &stages).unwrap();
        let got: Vec<(String, String, Vec<String>)> = r
            .matches
            .iter()
            .map(|x| (x.base_id.clone().unwrap(), x.aux_id.clone().unwrap(), x.path.clone()))
            .collect();
        // q0→m1, m1 queries at 100 → t whose vector is 100 → (i+2)%3 = 1 → i = 2
        assert_eq!(got[0], ("q0".into(), "t2".into(), vec!["m1".into()]));
        assert_eq!(got.len(), 3);
        assert!(got.iter().all(|g| g.2.len() == 1));

        let mut broken = stages.clone();
        broken[1].spec.base_ref = "x".into();
        assert!(matches!(
            chain_joins(&q, &broken),
            Err(Error::BrokenChain { stage: 1, .. })
        ));
        let mut missing = stages;
        missing[1].queries.remove("m1");
        assert!(matches!(
            chain_joins(&q, &missing),
            Err(Error::BrokenChain { stage: 1, .. })
        ));
    }

    #[test]
    fn single_stage_chain_is_execute_join() {
        let q = entries("q", &[&[0.0, 1.0], &[1.0, 0.0], &[0.5, 0.5]]);
        let a = entries("a", &[&[0.0, 0.9], &[1.0, 0.1], &[0.4, 0.4], &[9.0, 9.0]]);
        for jt in JoinType::ALL {
            let s = spec(jt, 2, 2);
            let direct = execute_join(&s, &q, &a, Distance::L2, &JoinOptions::default()).unwrap();
            let stage = ChainStage {
                spec: s,
                index: build_index(&a, Distance::L2).unwrap(),
                queries: HashMap::new(),
                threshold: None,
            };
            assert_eq!(chain_joins(&q, &[stage]).unwrap(), direct);
        }
    }

    #[test]
    fn label_aggregation() {
        let m = |b: &str, a: Option<&str>, rank| Match {
            base_id: Some(b.into()),
            aux_id: a.map(str::to_string),
            rank,
            score: 0.0,
            direction: Direction::BaseToAux,
            path: vec![],
        };
        let result = JoinResult {
            matches: vec![
                m("x", Some("p"), 1),
                m("x", Some("q"), 2),
                m("x", Some("r"), 3),
                m("y", None, 0),
            ],
            spec: None,
            order: ScoreOrder::LowerIsBetter,
        };
        let labels: HashMap<String, f64> = [("p", 2.0), ("q", 4.0), ("r", 9.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(aggregate_labels(&result, &labels, 1)["x"], 2.0);
        assert_eq!(aggregate_labels(&result, &labels, 2)["x"], 3.0);
        assert_eq!(aggregate_labels(&result, &labels, 10)["x"], 5.0);
        assert!(!aggregate_labels(&result, &labels, 2).contains_key("y"));
    }

    #[test]
    fn embeddings_file_round_trip_and_truncation() {
        let e = entries("r", &[&[1.5, -2.0], &[0.1, f64::MIN_POSITIVE]]);
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &e).unwrap();
        assert_eq!(read_embeddings(&buf[..]).unwrap(), e);
        assert!(read_embeddings(&buf[..buf.len() - 3]).is_err());
    }

    fn brute_force(data: &[(String, EmbeddingVector)], q: &[f64], k: usize, metric: Distance) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = data
            .iter()
            .map(|(id, v)| {
                let s = match metric {
                    Distance::L2 => v.0.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
                    Distance::InnerProduct => v.0.iter().zip(q).map(|(a, b)| a * b).sum(),
                };
                (id.clone(), s)
            })
            .collect();
        all.sort_by(|a, b| {
            let c = match metric {
                Distance::L2 => a.1.partial_cmp(&b.1).unwrap(),
                Distance::InnerProduct => b.1.partial_cmp(&a.1).unwrap(),
            };
            c.then(a.0.cmp(&b.0))
        });
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn knn_matches_brute_force(
            data in prop::collection::vec(prop::collection::vec(-4i8..4, 3), 1..40),
            q in prop::collection::vec(-4i8..4, 3),
            k in 1usize..50,
            ip in any::<bool>(),
        ) {
            let metric = if ip { Distance::InnerProduct } else { Distance::L2 };
            let entries: Vec<_> = data.iter().enumerate()
                .map(|(i, v)| (format!("id{i:03}"), EmbeddingVector(v.iter().map(|&x| x as f64).collect())))
                .collect();
            let q: Vec<f64> = q.iter().map(|&x| x as f64).collect();
            let idx = build_index(&entries, metric).unwrap();
            let got: Vec<(String, f64)> = idx.knn(&EmbeddingVector(q.clone()), k, None).unwrap()
                .into_iter().map(|n| (n.id, n.score)).collect();
            prop_assert_eq!(got, brute_force(&entries, &q, k, metric));
        }

        #[test]
        fn unit_vectors_rank_identically_under_both_metrics(
            data in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..30),
            q in prop::collection::vec(-1.0f64..1.0, 4),
        ) {
            let unit = |v: &[f64]| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                EmbeddingVector(v.iter().map(|x| x / n).collect())
            };
            let entries: Vec<_> = data.iter().enumerate().map(|(i, v)| (format!("{i:02}"), unit(v))).collect();
            let q = unit(&q);
            let l2 = build_index(&entries, Distance::L2).unwrap().knn(&q, entries.len(), None).unwrap();
            let ip = build_index(&entries, Distance::InnerProduct).unwrap().knn(&q, entries.len(), None).unwrap();
            // ‖x−y‖² = 2 − 2⟨x,y⟩; compare through that identity to absorb rounding
            for (a, b) in l2.iter().zip(&ip) {
                let l2_from_ip = (2.0 - 2.0 * b.score).max(0.0).sqrt();
                prop_assert!((a.score - l2_from_ip).abs() < 1e-6);
            }
        }
    }
}
