//! Records, datasets, supervision and the on-disk formats for them.
//!
//! Datasets are read from CSV (with a header row) or JSONL (one flat object
//! per line). An `id` column, when present, supplies record ids; otherwise
//! the zero-based row ordinal is used. The id column is not a field and never
//! reaches the sentence preparer.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ID_COLUMN: &str = "id";

/// A field value. Numbers keep their JSON rendering so that re-serialization
/// is lossless; for preparation every value is used as text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Text(String),
    Number(serde_json::Number),
}

impl FieldValue {
    pub fn as_text(&self) -> std::borrow::Cow<'_, str> {
        match self {
            FieldValue::Text(s) => std::borrow::Cow::Borrowed(s),
            FieldValue::Number(n) => std::borrow::Cow::Owned(n.to_string()),
        }
    }
}

impl From<&str> for FieldValue {
    fn from(s: &str) -> Self {
        FieldValue::Text(s.to_string())
    }
}

impl From<String> for FieldValue {
    fn from(s: String) -> Self {
        FieldValue::Text(s)
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_text())
    }
}

/// One row of a dataset: an id plus ordered key/value fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub fields: Vec<(String, FieldValue)>,
}

impl Record {
    pub fn new<K, V>(id: impl Into<String>, fields: impl IntoIterator<Item = (K, V)>) -> Self
    where
        K: Into<String>,
        V: Into<FieldValue>,
    {
        Record {
            id: id.into(),
            fields: fields.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&FieldValue> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Auxiliary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(DataFormat::Csv),
            "jsonl" | "ndjson" => Some(DataFormat::Jsonl),
            _ => None,
        }
    }
}

/// An immutable collection of records with unique ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub role: Role,
    columns: Vec<String>,
    id_position: Option<usize>,
    records: Vec<Record>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset, checking id uniqueness and non-empty keys.
    /// `columns` excludes the id column.
    pub fn new(name: impl Into<String>, role: Role, columns: Vec<String>, records: Vec<Record>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.fields.iter().any(|(k, _)| k.is_empty()) {
                return Err(Error::InvalidRecord(format!("record {} has an empty field key", r.id)));
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            role,
            columns,
            id_position: None,
            records,
            index,
        })
    }

    /// Builds a dataset whose columns are the keys of its records in
    /// first-seen order.
    pub fn from_records(name: impl Into<String>, role: Role, records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut columns = Vec::new();
        for r in &records {
            for (k, _) in &r.fields {
                if seen.insert(k.as_str()) {
                    columns.push(k.clone());
                }
            }
        }
        Dataset::new(name, role, columns, records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn column_names(&self) -> &[String] {
        &self.columns
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Keeps only the records whose id passes `keep`, preserving order.
    pub fn filter(&self, keep: impl Fn(&Record) -> bool) -> Dataset {
        let records: Vec<Record> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let index = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Dataset {
            name: self.name.clone(),
            role: self.role,
            columns: self.columns.clone(),
            id_position: self.id_position,
            records,
            index,
        }
    }

    fn header(&self) -> Vec<String> {
        let mut header = self.columns.clone();
        let pos = self.id_position.unwrap_or(0).min(header.len());
        header.insert(pos, ID_COLUMN.to_string());
        header
    }

    /// Writes the dataset as CSV. The id column goes back to where it was
    /// read from (first column for datasets built in memory).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header = self.header();
        w.write_record(&header)?;
        for r in &self.records {
            let row: Vec<String> = header
                .iter()
                .map(|col| {
                    if col == ID_COLUMN {
                        r.id.clone()
                    } else {
                        r.get(col).map(|v| v.as_text().into_owned()).unwrap_or_default()
                    }
                })
                .collect();
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for r in &self.records {
            let mut obj = serde_json::Map::new();
            obj.insert(ID_COLUMN.into(), serde_json::Value::String(r.id.clone()));
            for (k, v) in &r.fields {
                let value = match v {
                    FieldValue::Text(s) => serde_json::Value::String(s.clone()),
                    FieldValue::Number(n) => serde_json::Value::Number(n.clone()),
                };
                obj.insert(k.clone(), value);
            }
            serde_json::to_writer(&mut writer, &obj)?;
            writer.write_all(b"\n").map_err(|e| Error::io("<jsonl writer>", e))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a dataset, inferring the format from the file extension.
pub fn load_dataset_auto(path: &Path, role: Role) -> Result<Dataset> {
    let format = DataFormat::from_path(path).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "cannot infer dataset format of {} (expected .csv or .jsonl)",
            path.display()
        ))
    })?;
    load_dataset(path, format, role)
}

pub fn load_dataset(path: &Path, format: DataFormat, role: Role) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ds = match format {
        DataFormat::Csv => read_csv_dataset(file, path)?,
        DataFormat::Jsonl => read_jsonl_dataset(BufReader::new(file), path)?,
    };
    ds.name = dataset_name(path);
    ds.role = role;
    Ok(ds)
}

pub fn read_csv_dataset<R: std::io::Read>(reader: R, path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let id_position = header.iter().position(|h| h == ID_COLUMN);
    if let Some(empty) = header.iter().position(|h| h.is_empty()) {
        return Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            message: format!("header column {} has an empty name", empty + 1),
        });
    }
    let columns: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != id_position)
        .map(|(_, h)| h.clone())
        .collect();

    let mut records = Vec::new();
    for (ordinal, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(ordinal as u64 + 2);
            Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        if row.len() != header.len() {
            let line = row.position().map(|p| p.line()).unwrap_or(ordinal as u64 + 2);
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} columns, found {}", header.len(), row.len()),
            });
        }
        let id = match id_position {
            Some(p) => row[p].to_string(),
            None => ordinal.to_string(),
        };
        let fields = header
            .iter()
            .zip(row.iter())
            .enumerate()
            .filter(|(i, _)| Some(*i) != id_position)
            .map(|(_, (k, v))| (k.clone(), FieldValue::Text(v.to_string())))
            .collect();
        records.push(Record { id, fields });
    }
    let mut ds = Dataset::new(dataset_name(path), Role::Base, columns, records)?;
    ds.id_position = id_position;
    Ok(ds)
}

pub fn read_jsonl_dataset<R: BufRead>(reader: R, path: &Path) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut ordinal = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = lineno as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("expected a JSON object".into()))?;
        let mut id = None;
        let mut fields = Vec::with_capacity(obj.len());
        for (k, v) in obj {
            let fv = match v {
                serde_json::Value::String(s) => FieldValue::Text(s.clone()),
                serde_json::Value::Number(n) => FieldValue::Number(n.clone()),
                serde_json::Value::Bool(b) => FieldValue::Text(b.to_string()),
                serde_json::Value::Null => FieldValue::Text(String::new()),
                _ => return Err(malformed(format!("field {k} is not a scalar"))),
            };
            if k == ID_COLUMN {
                id = Some(fv.as_text().into_owned());
            } else {
                if k.is_empty() {
                    return Err(malformed("empty field key".into()));
                }
                fields.push((k.clone(), fv));
            }
        }
        records.push(Record {
            id: id.unwrap_or_else(|| ordinal.to_string()),
            fields,
        });
        ordinal += 1;
    }
    Dataset::from_records(dataset_name(path), Role::Base, records)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SupervisionPair {
    pub base_id: String,
    pub aux_id: String,
}

impl SupervisionPair {
    pub fn new(base_id: impl Into<String>, aux_id: impl Into<String>) -> Self {
        SupervisionPair {
            base_id: base_id.into(),
            aux_id: aux_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SupervisionTriple {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
}

impl SupervisionTriple {
    pub fn new(anchor_id: impl Into<String>, positive_id: impl Into<String>, negative_id: impl Into<String>) -> Self {
        SupervisionTriple {
            anchor_id: anchor_id.into(),
            positive_id: positive_id.into(),
            negative_id: negative_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Supervision {
    Pairs(Vec<SupervisionPair>),
    Triples(Vec<SupervisionTriple>),
}

impl Supervision {
    pub fn len(&self) -> usize {
        match self {
            Supervision::Pairs(p) => p.len(),
            Supervision::Triples(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that every id resolves; the error lists each offending row
    /// (1-based, counting from the first data row).
    pub fn validate(&self, base: &Dataset, aux: &Dataset) -> Result<()> {
        let mut bad = Vec::new();
        match self {
            Supervision::Pairs(pairs) => {
                for (i, p) in pairs.iter().enumerate() {
                    let mut missing = Vec::new();
                    if !base.contains(&p.base_id) {
                        missing.push(format!("base_id {}", p.base_id));
                    }
                    if !aux.contains(&p.aux_id) {
                        missing.push(format!("aux_id {}", p.aux_id));
                    }
                    if !missing.is_empty() {
                        bad.push(format!("row {}: {}", i + 1, missing.join(", ")));
                    }
                }
            }
            Supervision::Triples(triples) => {
                for (i, t) in triples.iter().enumerate() {
                    let mut missing = Vec::new();
                    if !base.contains(&t.anchor_id) {
                        missing.push(format!("anchor_id {}", t.anchor_id));
                    }
                    if !aux.contains(&t.positive_id) {
                        missing.push(format!("positive_id {}", t.positive_id));
                    }
                    if !aux.contains(&t.negative_id) {
                        missing.push(format!("negative_id {}", t.negative_id));
                    }
                    if t.positive_id == t.negative_id {
                        missing.push("positive_id equals negative_id".to_string());
                    }
                    if !missing.is_empty() {
                        bad.push(format!("row {}: {}", i + 1, missing.join(", ")));
                    }
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::UnresolvedIds(bad))
        }
    }
}

/// Reads a supervision CSV without resolving ids. Two columns mean pairs,
/// three mean triples.
pub fn read_supervision(path: &Path) -> Result<Supervision> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let rows = rdr
        .records()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::MalformedRow {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match header.len() {
        2 => Ok(Supervision::Pairs(
            rows.iter().map(|r| SupervisionPair::new(&r[0], &r[1])).collect(),
        )),
        3 => Ok(Supervision::Triples(
            rows.iter()
                .map(|r| SupervisionTriple::new(&r[0], &r[1], &r[2]))
                .collect(),
        )),
        n => Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            message: format!("supervision files have 2 or 3 columns, found {n}"),
        }),
    }
}

pub fn load_supervision(path: &Path, base: &Dataset, aux: &Dataset) -> Result<Supervision> {
    let sup = read_supervision(path)?;
    sup.validate(base, aux)?;
    Ok(sup)
}

pub fn write_pairs(path: &Path, pairs: &[SupervisionPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["base_id", "aux_id"])?;
    for p in pairs {
        w.write_record([&p.base_id, &p.aux_id])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_triples(path: &Path, triples: &[SupervisionTriple]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["anchor_id", "positive_id", "negative_id"])?;
    for t in triples {
        w.write_record([&t.anchor_id, &t.positive_id, &t.negative_id])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A fixed-length embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn l2_distance(&self, other: &EmbeddingVector) -> f64 {
        l2_distance(&self.0, &other.0)
    }
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(text: &str) -> Result<Dataset> {
        read_csv_dataset(text.as_bytes(), Path::new("t.csv"))
    }

    #[test]
    fn loads_csv_with_id_column() {
        let ds = csv("id,t\n1,a\n2,b").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records()[0], Record::new("1", [("t", "a")]));
        assert_eq!(ds.records()[1], Record::new("2", [("t", "b")]));
        assert_eq!(ds.column_names(), ["t"]);
    }

    #[test]
    fn header_only_is_empty() {
        let ds = csv("id,t\n").unwrap();
        assert_eq!(ds.len(), 0);
        assert!(ds.is_empty());
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let err = csv("id,t\n1,a\n1,b").unwrap_err();
        assert_eq!(err.to_string(), "duplicate id 1");
    }

    #[test]
    fn ordinal_ids_without_id_column() {
        let ds = csv("name,year\n\"Smith, J\",1990\nDoe,\n").unwrap();
        assert_eq!(ds.records()[0].id, "0");
        assert_eq!(ds.records()[1].id, "1");
        assert_eq!(ds.records()[0].get("name").unwrap().as_text(), "Smith, J");
        assert_eq!(ds.records()[1].get("year").unwrap().as_text(), "");
    }

    #[test]
    fn ragged_row_names_its_line() {
        let err = csv("id,t\n1,a\n2,b,c\n").unwrap_err();
        match err {
            Error::MalformedRow { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_round_trip_keeps_id_position_and_order() {
        let text = "b,id,a\nx,7,\"q, r\"\ny,8,z\n";
        let ds = csv(text).unwrap();
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn jsonl_numbers_render_as_text() {
        let text = "{\"id\": 5, \"Title\": \"Dunkirk\", \"Year\": 2017}\n\n{\"Title\": \"Up\", \"Year\": null}\n";
        let ds = read_jsonl_dataset(text.as_bytes(), Path::new("m.jsonl")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records()[0].id, "5");
        assert_eq!(ds.records()[0].get("Year").unwrap().as_text(), "2017");
        assert_eq!(ds.records()[1].id, "1");
        assert_eq!(ds.records()[1].get("Year").unwrap().as_text(), "");
        assert_eq!(ds.column_names(), ["Title", "Year"]);
    }

    #[test]
    fn jsonl_rejects_nested_values() {
        let err = read_jsonl_dataset("{\"a\": [1]}\n".as_bytes(), Path::new("x.jsonl")).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 1, .. }));
    }

    #[test]
    fn role_is_metadata_only() {
        let ds = csv("id,t\n1,a\n").unwrap();
        let aux = ds.clone().with_role(Role::Auxiliary);
        assert_eq!(aux.role, Role::Auxiliary);
        assert_eq!(aux.records(), ds.records());
    }

    #[test]
    fn supervision_kinds_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let base = csv("id,t\n1,a\n2,b").unwrap();
        let aux = csv("id,t\n9,a\n8,b").unwrap();

        let pairs = dir.path().join("pairs.csv");
        std::fs::write(&pairs, "base_id,aux_id\n1,9\n").unwrap();
        assert_eq!(
            load_supervision(&pairs, &base, &aux).unwrap(),
            Supervision::Pairs(vec![SupervisionPair::new("1", "9")])
        );

        let triples = dir.path().join("triples.csv");
        std::fs::write(&triples, "anchor_id,positive_id,negative_id\n1,9,8\n").unwrap();
        assert!(matches!(
            load_supervision(&triples, &base, &aux).unwrap(),
            Supervision::Triples(t) if t.len() == 1
        ));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "base_id,aux_id\n1,9\n3,9\n2,77\n").unwrap();
        let err = load_supervision(&bad, &base, &aux).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2: base_id 3"), "{msg}");
        assert!(msg.contains("row 3: aux_id 77"), "{msg}");
    }
}
