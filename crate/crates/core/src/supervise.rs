//! Negative sampling, self-supervised pretraining pairs and the synthetic
//! fuzzy-join workload.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::joinspec::SamplerKind;
use crate::lexrank::{jaccard_tokens, Bm25Index};
use crate::model::{Dataset, FieldValue, Record, Role, SupervisionPair, SupervisionTriple};
use crate::prepare::Preparer;

/// Stage-local seed: the first 8 bytes of sha256(seed ‖ stage).
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn rng_for(seed: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(seed, stage))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub tier_size: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, seed: u64) -> Self {
        SamplerConfig {
            kind,
            tier_size: 20,
            seed,
        }
    }
}

/// Converts pair supervision into triples. Tiers of hard negatives are
/// computed once; each call to [`NegativeSampler::sample_epoch`] redraws
/// the negatives.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    pairs: Vec<SupervisionPair>,
    aux_ids: Vec<String>,
    positives: HashMap<String, HashSet<String>>,
    tiers: HashMap<String, Vec<String>>,
    seed: u64,
}

impl NegativeSampler {
    pub fn new(
        pairs: &[SupervisionPair],
        base: &Dataset,
        aux: &Dataset,
        cfg: &SamplerConfig,
        preparer: &Preparer,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no supervision pairs to sample from".into()));
        }
        if cfg.tier_size == 0 {
            return Err(Error::InvalidArgument("tier_size must be ≥ 1".into()));
        }
        if aux.len() < 2 {
            return Err(Error::CannotSample(format!(
                "auxiliary dataset has {} record(s), need at least 2",
                aux.len()
            )));
        }
        let mut positives: HashMap<String, HashSet<String>> = HashMap::new();
        for p in pairs {
            positives.entry(p.base_id.clone()).or_default().insert(p.aux_id.clone());
        }
        for (anchor, pos) in &positives {
            if pos.len() >= aux.len() {
                return Err(Error::CannotSample(format!(
                    "every auxiliary record is a positive for {anchor}"
                )));
            }
        }

        let mut anchors: Vec<&String> = positives.keys().collect();
        anchors.sort();
        let anchor_tokens = |id: &str| -> Result<Vec<String>> {
            let record = base
                .get(id)
                .ok_or_else(|| Error::UnresolvedIds(vec![format!("base_id {id}")]))?;
            Ok(preparer.prepare(record).tokens)
        };
        let tiers: HashMap<String, Vec<String>> = match cfg.kind {
            SamplerKind::Random => HashMap::new(),
            SamplerKind::Custom => {
                return Err(Error::InvalidArgument(
                    "the custom sampler expects user-provided triples".into(),
                ))
            }
            SamplerKind::StratifiedBm25 => {
                let index = Bm25Index::from_dataset(aux, preparer);
                anchors
                    .par_iter()
                    .map(|&a| {
                        let tokens = anchor_tokens(a)?;
                        let tier = index
                            .top_k(&tokens, cfg.tier_size, &positives[a])
                            .into_iter()
                            .filter(|(_, s)| *s > 0.0)
                            .map(|(id, _)| id)
                            .collect();
                        Ok((a.clone(), tier))
                    })
                    .collect::<Result<_>>()?
            }
            SamplerKind::StratifiedJaccard => {
                let aux_tokens: Vec<(String, Vec<String>)> = aux
                    .records()
                    .iter()
                    .map(|r| (r.id.clone(), preparer.prepare(r).tokens))
                    .collect();
                anchors
                    .par_iter()
                    .map(|&a| {
                        let tokens = anchor_tokens(a)?;
                        let mut scored: Vec<(f64, &String)> = aux_tokens
                            .iter()
                            .filter(|(id, _)| !positives[a].contains(id))
                            .map(|(id, t)| (jaccard_tokens(&tokens, t), id))
                            .filter(|(s, _)| *s > 0.0)
                            .collect();
                        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(y.1)));
                        scored.truncate(cfg.tier_size);
                        Ok((a.clone(), scored.into_iter().map(|(_, id)| id.clone()).collect()))
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(NegativeSampler {
            pairs: pairs.to_vec(),
            aux_ids: aux.records().iter().map(|r| r.id.clone()).collect(),
            positives,
            tiers,
            seed: cfg.seed,
        })
    }

    /// The hard-negative tier of an anchor (empty for the random sampler).
    pub fn tier(&self, anchor: &str) -> &[String] {
        self.tiers.get(anchor).map(Vec::as_slice).unwrap_or(&[])
    }

    /// One triple per pair, negatives drawn with an epoch-specific seed.
    pub fn sample_epoch(&self, epoch: usize) -> Vec<SupervisionTriple> {
        let mut rng = rng_for(self.seed, &format!("negatives/{epoch}"));
        self.pairs
            .iter()
            .map(|p| {
                let tier = self.tier(&p.base_id);
                let negative = if tier.is_empty() {
                    self.uniform_negative(&p.base_id, &mut rng)
                } else {
                    tier[rng.random_range(0..tier.len())].clone()
                };
                SupervisionTriple::new(&p.base_id, &p.aux_id, negative)
            })
            .collect()
    }

    fn uniform_negative(&self, anchor: &str, rng: &mut ChaCha8Rng) -> String {
        let pos = &self.positives[anchor];
        // at least one non-positive exists (checked in new)
        loop {
            let id = &self.aux_ids[rng.random_range(0..self.aux_ids.len())];
            if !pos.contains(id) {
                return id.clone();
            }
        }
    }
}

pub fn sample_triples(
    pairs: &[SupervisionPair],
    base: &Dataset,
    aux: &Dataset,
    cfg: &SamplerConfig,
) -> Result<Vec<SupervisionTriple>> {
    Ok(NegativeSampler::new(pairs, base, aux, cfg, &Preparer::default())?.sample_epoch(0))
}

/// Self-supervised triples: for each base record the BM25 top-1 auxiliary
/// record is the positive and a uniformly drawn other auxiliary record the
/// negative.
pub fn build_pretraining_pairs(
    base: &Dataset,
    aux: &Dataset,
    per_record: usize,
    seed: u64,
    preparer: &Preparer,
) -> Result<Vec<SupervisionTriple>> {
    if base.is_empty() || aux.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs non-empty datasets".into()));
    }
    if aux.len() < 2 {
        return Err(Error::CannotSample("auxiliary dataset has a single record".into()));
    }
    let index = Bm25Index::from_dataset(aux, preparer);
    let none = HashSet::new();
    let tops: Vec<String> = base
        .records()
        .par_iter()
        .map(|r| {
            index
                .top_k(&preparer.prepare(r).tokens, 1, &none)
                .into_iter()
                .next()
                .map(|(id, _)| id)
                .expect("aux is non-empty")
        })
        .collect();
    let aux_ids = index.ids();
    let mut rng = rng_for(seed, "pretrain");
    let mut out = Vec::with_capacity(base.len() * per_record);
    for (record, top) in base.records().iter().zip(&tops) {
        for _ in 0..per_record {
            let negative = loop {
                let id = &aux_ids[rng.random_range(0..aux_ids.len())];
                if id != top {
                    break id.clone();
                }
            };
            out.push(SupervisionTriple::new(&record.id, top, negative));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    pub perturbations_per_row: usize,
    pub max_fraction: f64,
    pub copies_per_row: usize,
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn easy(seed: u64) -> Self {
        PerturbationConfig {
            perturbations_per_row: 5,
            max_fraction: 0.25,
            copies_per_row: 5,
            seed,
        }
    }

    pub fn hard(seed: u64) -> Self {
        PerturbationConfig {
            perturbations_per_row: 15,
            ..Self::easy(seed)
        }
    }

    /// Edits applied to a record whose prepared sentence has `tokens` tokens.
    pub fn edit_budget(&self, tokens: usize) -> usize {
        if self.perturbations_per_row == 0 {
            return 0;
        }
        let cap = ((self.max_fraction * tokens as f64).floor() as usize).max(1);
        self.perturbations_per_row.min(cap)
    }
}

#[derive(Debug, Clone)]
pub struct FuzzyJoin {
    pub base: Dataset,
    pub aux: Dataset,
    pub truth: Vec<SupervisionPair>,
    /// Edits applied to each base row, in base order.
    pub edits: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Edit {
    Insert,
    Delete,
    Replace,
}

/// Perturbs `copies_per_row` variants of every source row. Edits act on
/// value tokens (keys stay intact); the edit budget is taken from the
/// whitespace token count of the prepared sentence. Inserted and
/// replacement tokens come from the sorted source value vocabulary.
pub fn generate_fuzzy_join(source: &Dataset, cfg: &PerturbationConfig) -> Result<FuzzyJoin> {
    if !(cfg.max_fraction > 0.0 && cfg.max_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "max_fraction must be in (0, 1], got {}",
            cfg.max_fraction
        )));
    }
    let vocab: Vec<String> = source
        .records()
        .iter()
        .flat_map(|r| r.fields.iter().flat_map(|(_, v)| split_value(&v.as_text())))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let preparer = Preparer::default();

    let rows: Vec<(Vec<Record>, Vec<usize>)> = source
        .records()
        .par_iter()
        .enumerate()
        .map(|(row, origin)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ row as u64);
            let budget = cfg.edit_budget(preparer.prepare(origin).tokens.len());
            let mut records = Vec::with_capacity(cfg.copies_per_row);
            let mut edits = Vec::with_capacity(cfg.copies_per_row);
            for c in 0..cfg.copies_per_row {
                let (fields, applied) = perturb(origin, budget, &vocab, &mut rng);
                records.push(Record {
                    id: format!("{}_{c}", origin.id),
                    fields,
                });
                edits.push(applied);
            }
            (records, edits)
        })
        .collect();

    let mut base_records = Vec::with_capacity(source.len() * cfg.copies_per_row);
    let mut truth = Vec::with_capacity(base_records.capacity());
    let mut edits = Vec::with_capacity(base_records.capacity());
    for (origin, (records, e)) in source.records().iter().zip(rows) {
        for r in &records {
            truth.push(SupervisionPair::new(&r.id, &origin.id));
        }
        base_records.extend(records);
        edits.extend(e);
    }
    let columns = source.column_names().to_vec();
    Ok(FuzzyJoin {
        base: Dataset::new("base", Role::Base, columns.clone(), base_records)?,
        aux: Dataset::new("aux", Role::Auxiliary, columns, source.records().to_vec())?,
        truth,
        edits,
    })
}

fn split_value(v: &str) -> Vec<String> {
    v.split_whitespace().map(str::to_string).collect()
}

fn perturb(
    origin: &Record,
    budget: usize,
    vocab: &[String],
    rng: &mut ChaCha8Rng,
) -> (Vec<(String, FieldValue)>, usize) {
    let mut tokens: Vec<Vec<String>> = origin.fields.iter().map(|(_, v)| split_value(&v.as_text())).collect();
    let mut touched = vec![false; tokens.len()];
    let total = |t: &[Vec<String>]| t.iter().map(Vec::len).sum::<usize>();
    let mut applied = 0;
    if total(&tokens) > 0 && !vocab.is_empty() {
        for _ in 0..budget {
            let len = total(&tokens);
            let mut edit = match rng.random_range(0..3) {
                0 => Edit::Insert,
                1 => Edit::Delete,
                _ => Edit::Replace,
            };
            if matches!(edit, Edit::Delete) && len <= 1 {
                edit = Edit::Replace;
            }
            let word = vocab[rng.random_range(0..vocab.len())].clone();
            match edit {
                Edit::Insert => {
                    let (f, i) = locate(&tokens, rng.random_range(0..=len));
                    tokens[f].insert(i, word);
                    touched[f] = true;
                }
                Edit::Delete => {
                    let (f, i) = locate(&tokens, rng.random_range(0..len));
                    tokens[f].remove(i);
                    touched[f] = true;
                }
                Edit::Replace => {
                    let (f, i) = locate(&tokens, rng.random_range(0..len));
                    tokens[f][i] = word;
                    touched[f] = true;
                }
            }
            applied += 1;
        }
    }
    let fields = origin
        .fields
        .iter()
        .zip(tokens)
        .zip(touched)
        .map(|(((k, v), t), touched)| {
            let value = if touched {
                FieldValue::Text(t.join(" "))
            } else {
                v.clone()
            };
            (k.clone(), value)
        })
        .collect();
    (fields, applied)
}

/// Maps a flat token position to (field, index within field). Position
/// `len` maps to the end of the last non-empty field.
fn locate(tokens: &[Vec<String>], mut pos: usize) -> (usize, usize) {
    let mut last = 0;
    for (f, t) in tokens.iter().enumerate() {
        if pos < t.len() {
            return (f, pos);
        }
        pos -= t.len();
        if !t.is_empty() {
            last = f;
        }
    }
    (last, tokens[last].len())
}

/// Splits truth pairs by origin (aux) group so that all perturbations of one
/// origin land on the same side. `round(test_fraction · groups)` groups go
/// to the test split.
pub fn split_train_test(
    truth: &[SupervisionPair],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<SupervisionPair>, Vec<SupervisionPair>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut groups: Vec<&str> = truth
        .iter()
        .map(|p| p.aux_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    groups.shuffle(&mut rng_for(seed, "split"));
    let n_test = (test_fraction * groups.len() as f64).round() as usize;
    let test_groups: HashSet<&str> = groups.into_iter().take(n_test).collect();
    let (test, train) = truth
        .iter()
        .cloned()
        .partition(|p| test_groups.contains(p.aux_id.as_str()));
    Ok((train, test))
}

const GENRES: &[&str] = &[
    "Drama",
    "Comedy",
    "Documentary",
    "Action",
    "Romance",
    "Thriller",
    "Crime",
    "Horror",
    "Adventure",
    "Family",
    "Animation",
    "Mystery",
    "Fantasy",
    "Biography",
    "Music",
    "History",
    "War",
    "Sci-Fi",
    "Western",
    "Sport",
    "Musical",
    "Film-Noir",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "ten", "su", "vo", "an", "el", "dor", "is", "pe", "qua", "ri", "ne", "ba", "tho", "um",
    "ge", "lin", "ox", "ve", "za", "mor",
];

/// A movie-like source table (Title, Year, Genre). Title words follow a
/// Zipf distribution over a pseudo-word vocabulary; genre combinations are
/// comma-joined like the public movie catalogs.
pub fn synthetic_source(rows: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng_for(seed, "source");
    let vocab_size = (rows * 3).max(50);
    let mut words = Vec::with_capacity(vocab_size);
    let mut seen = HashSet::new();
    while words.len() < vocab_size {
        let n = rng.random_range(2..=4);
        let w: String = (0..n)
            .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
            .collect();
        if seen.insert(w.clone()) {
            let mut c = w.chars();
            let first = c.next().expect("syllables are non-empty").to_uppercase();
            words.push(first.chain(c).collect::<String>());
        }
    }
    let word_dist = Zipf::new(vocab_size as f64, 1.1).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let genre_dist = Zipf::new(GENRES.len() as f64, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut records = Vec::with_capacity(rows);
    for i in 0..rows {
        let title_len = rng.random_range(1..=5);
        let title: Vec<&str> = (0..title_len)
            .map(|_| words[word_dist.sample(&mut rng) as usize - 1].as_str())
            .collect();
        let year = rng.random_range(1920..=2023).to_string();
        let mut genres: Vec<&str> = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            let g = GENRES[genre_dist.sample(&mut rng) as usize - 1];
            if !genres.contains(&g) {
                genres.push(g);
            }
        }
        records.push(Record::new(
            format!("m{i:05}"),
            [("Title", title.join(" ")), ("Year", year), ("Genre", genres.join(","))],
        ));
    }
    Dataset::new(
        "source",
        Role::Auxiliary,
        vec!["Title".into(), "Year".into(), "Genre".into()],
        records,
    )
}

/// Truth pairs grouped per base id.
pub fn group_truth(pairs: &[SupervisionPair]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for p in pairs {
        out.entry(p.base_id.clone()).or_default().push(p.aux_id.clone());
    }
    out
}
