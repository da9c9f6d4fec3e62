//! The keyless-join statement and the JSON engine configuration.
//!
//! ```text
//! base_ref [INNER|LEFT|RIGHT|FULL] KEYLESS JOIN aux_ref
//!     LEFT SIZE <int> RIGHT SIZE <int> USING supervision_ref ;
//! ```
//!
//! Keywords are case-insensitive; identifiers are case-sensitive.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JoinType {
    #[default]
    Inner,
    Left,
    Right,
    Full,
}

impl JoinType {
    pub const ALL: [JoinType; 4] = [JoinType::Inner, JoinType::Left, JoinType::Right, JoinType::Full];

    pub fn keyword(self) -> &'static str {
        match self {
            JoinType::Inner => "INNER",
            JoinType::Left => "LEFT",
            JoinType::Right => "RIGHT",
            JoinType::Full => "FULL",
        }
    }
}

impl fmt::Display for JoinType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for JoinType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "INNER" => Ok(JoinType::Inner),
            "LEFT" => Ok(JoinType::Left),
            "RIGHT" => Ok(JoinType::Right),
            "FULL" => Ok(JoinType::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown join type {other:?} (expected INNER, LEFT, RIGHT or FULL)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct JoinSpec {
    pub base_ref: String,
    pub aux_ref: String,
    pub join_type: JoinType,
    pub left_size: usize,
    pub right_size: usize,
    pub supervision_ref: String,
}

impl JoinSpec {
    /// INNER, sizes 1 and 10: the engine's default join.
    pub fn default_for(base_ref: &str, aux_ref: &str, supervision_ref: &str) -> Self {
        JoinSpec {
            base_ref: base_ref.to_string(),
            aux_ref: aux_ref.to_string(),
            join_type: JoinType::Inner,
            left_size: 1,
            right_size: 10,
            supervision_ref: supervision_ref.to_string(),
        }
    }
}

impl fmt::Display for JoinSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_join_spec(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TokenKind {
    Word(String),
    Integer(String),
    Semicolon,
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '.' | '-' | '/')
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(offset, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == ';' {
            chars.next();
            tokens.push(Token {
                kind: TokenKind::Semicolon,
                offset,
            });
        } else if c == '-' && text[offset..].starts_with("--") {
            // comment to end of line
            while let Some(&(_, c)) = chars.peek() {
                if c == '\n' {
                    break;
                }
                chars.next();
            }
        } else if is_ident_char(c) {
            let mut end = offset;
            while let Some(&(i, c)) = chars.peek() {
                if !is_ident_char(c) {
                    break;
                }
                end = i + c.len_utf8();
                chars.next();
            }
            let word = &text[offset..end];
            let kind = if word.bytes().all(|b| b.is_ascii_digit()) {
                TokenKind::Integer(word.to_string())
            } else {
                TokenKind::Word(word.to_string())
            };
            tokens.push(Token { kind, offset });
        } else {
            return Err(Error::Parse {
                offset,
                message: format!("unexpected character {c:?}"),
            });
        }
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    end_offset: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn offset(&self) -> usize {
        self.peek().map(|t| t.offset).unwrap_or(self.end_offset)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token { kind: TokenKind::Word(w), .. }) if w.eq_ignore_ascii_case(kw))
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<()> {
        if self.peek_keyword(kw) {
            self.pos += 1;
            Ok(())
        } else {
            match self.peek() {
                Some(Token {
                    kind: TokenKind::Word(w),
                    ..
                }) => self.error(format!("unknown keyword {w:?}, expected {kw}")),
                Some(_) => self.error(format!("expected {kw}")),
                None => self.error(format!("unexpected end of input, expected {kw}")),
            }
        }
    }

    fn identifier(&mut self, what: &str) -> Result<String> {
        match self.peek() {
            Some(Token {
                kind: TokenKind::Word(w),
                ..
            }) => {
                self.pos += 1;
                Ok(w.clone())
            }
            Some(_) => self.error(format!("expected {what}")),
            None => self.error(format!("unexpected end of input, expected {what}")),
        }
    }

    fn size(&mut self) -> Result<usize> {
        let offset = self.offset();
        match self.peek() {
            Some(Token {
                kind: TokenKind::Integer(digits),
                ..
            }) => {
                let value: usize = digits.parse().map_err(|_| Error::Parse {
                    offset,
                    message: format!("size {digits} is out of range"),
                })?;
                if value == 0 {
                    return Err(Error::Parse {
                        offset,
                        message: "size must be ≥ 1".into(),
                    });
                }
                self.pos += 1;
                Ok(value)
            }
            Some(Token {
                kind: TokenKind::Word(w),
                ..
            }) => self.error(format!("size must be a non-negative integer, found {w:?}")),
            _ => self.error("expected an integer size"),
        }
    }

    fn statement(&mut self) -> Result<JoinSpec> {
        let base_ref = self.identifier("base table reference")?;
        let mut join_type = JoinType::Inner;
        for jt in JoinType::ALL {
            if self.peek_keyword(jt.keyword()) {
                self.pos += 1;
                join_type = jt;
                break;
            }
        }
        self.expect_keyword("KEYLESS")?;
        self.expect_keyword("JOIN")?;
        let aux_ref = self.identifier("auxiliary table reference")?;
        self.expect_keyword("LEFT")?;
        self.expect_keyword("SIZE")?;
        let left_size = self.size()?;
        self.expect_keyword("RIGHT")?;
        self.expect_keyword("SIZE")?;
        let right_size = self.size()?;
        if !self.peek_keyword("USING") {
            return self.error("missing USING clause");
        }
        self.pos += 1;
        let supervision_ref = self.identifier("supervision reference")?;
        match self.peek() {
            Some(Token {
                kind: TokenKind::Semicolon,
                ..
            }) => self.pos += 1,
            Some(_) => return self.error("expected ';' after supervision reference"),
            None => return self.error("statement must be terminated by ';'"),
        }
        Ok(JoinSpec {
            base_ref,
            aux_ref,
            join_type,
            left_size,
            right_size,
            supervision_ref,
        })
    }
}

/// Parses exactly one statement.
pub fn parse_join_spec(text: &str) -> Result<JoinSpec> {
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens: &tokens,
        pos: 0,
        end_offset: text.len(),
    };
    let spec = parser.statement()?;
    if parser.peek().is_some() {
        return parser.error("unexpected input after ';'");
    }
    Ok(spec)
}

/// Parses a sequence of statements, as used by chain files.
pub fn parse_join_specs(text: &str) -> Result<Vec<JoinSpec>> {
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens: &tokens,
        pos: 0,
        end_offset: text.len(),
    };
    let mut specs = Vec::new();
    while parser.peek().is_some() {
        specs.push(parser.statement()?);
    }
    if specs.is_empty() {
        return parser.error("no join statements");
    }
    Ok(specs)
}

pub fn render_join_spec(spec: &JoinSpec) -> String {
    format!(
        "{} {} KEYLESS JOIN {} LEFT SIZE {} RIGHT SIZE {} USING {};",
        spec.base_ref, spec.join_type, spec.aux_ref, spec.left_size, spec.right_size, spec.supervision_ref
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInit {
    Random,
    PretrainedArtifact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Random,
    StratifiedBm25,
    StratifiedJaccard,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Whitespace,
    Char2gram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    L2,
    InnerProduct,
}

/// Every engine knob with its default. Only `data_dir` is required.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    pub join_type: JoinType,
    pub left_size: usize,
    pub right_size: usize,
    pub num_encoders: usize,
    pub encoder_init: EncoderInit,
    pub finetune: bool,
    pub pretrain: bool,
    pub supervision_fraction: f64,
    pub sampler: SamplerKind,
    pub tier_size: usize,
    pub resample_negatives: bool,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub embedding_dim: usize,
    pub hash_dim: usize,
    pub pooling: Pooling,
    pub tokenizer: TokenizerKind,
    pub learning_rate: f64,
    pub loss_margin: f64,
    pub distance: Distance,
    pub normalize: bool,
    pub threshold: Option<f64>,
    pub seed: u64,
}

impl EngineConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        EngineConfig {
            data_dir: data_dir.into(),
            join_type: JoinType::Inner,
            left_size: 1,
            right_size: 10,
            num_encoders: 1,
            encoder_init: EncoderInit::Random,
            finetune: true,
            pretrain: true,
            supervision_fraction: 1.0,
            sampler: SamplerKind::StratifiedBm25,
            tier_size: 20,
            resample_negatives: true,
            epochs: 10,
            pretrain_epochs: 1,
            batch_size: 8,
            embedding_dim: 200,
            hash_dim: 1 << 16,
            pooling: Pooling::Mean,
            tokenizer: TokenizerKind::Whitespace,
            learning_rate: 1e-5,
            loss_margin: 1.0,
            distance: Distance::L2,
            normalize: true,
            threshold: None,
            seed: 0,
        }
    }

    /// The join statement implied by the configuration and the fixed file
    /// naming convention.
    pub fn join_spec(&self) -> JoinSpec {
        JoinSpec {
            base_ref: "base".into(),
            aux_ref: "aux".into(),
            join_type: self.join_type,
            left_size: self.left_size,
            right_size: self.right_size,
            supervision_ref: "supervision".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.left_size == 0 || self.right_size == 0 {
            return bad("left_size and right_size must be ≥ 1".into());
        }
        if !(1..=2).contains(&self.num_encoders) {
            return bad(format!("num_encoders must be 1 or 2, got {}", self.num_encoders));
        }
        if !(self.supervision_fraction > 0.0 && self.supervision_fraction <= 1.0) {
            return bad(format!(
                "supervision_fraction must be in (0, 1], got {}",
                self.supervision_fraction
            ));
        }
        if self.batch_size == 0 || self.embedding_dim == 0 || self.hash_dim == 0 || self.tier_size == 0 {
            return bad("batch_size, embedding_dim, hash_dim and tier_size must be ≥ 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.loss_margin >= 0.0 && self.loss_margin.is_finite()) {
            return bad(format!("loss_margin must be ≥ 0, got {}", self.loss_margin));
        }
        Ok(())
    }
}

/// Keys accepted by [`parse_config`].
pub const CONFIG_KEYS: &[&str] = &[
    "data_dir",
    "join_type",
    "left_size",
    "right_size",
    "num_encoders",
    "encoder_init",
    "finetune",
    "pretrain",
    "supervision_fraction",
    "sampler",
    "tier_size",
    "resample_negatives",
    "epochs",
    "pretrain_epochs",
    "batch_size",
    "embedding_dim",
    "hash_dim",
    "pooling",
    "tokenizer",
    "learning_rate",
    "loss_margin",
    "distance",
    "normalize",
    "threshold",
    "seed",
];

fn type_error(key: &str, expected: &str) -> Error {
    Error::Config(format!("key {key:?}: expected {expected}"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| type_error(key, "a non-negative integer"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| type_error(key, "a number"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_error(key, "a boolean"))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str().ok_or_else(|| type_error(key, "a string"))
}

fn one_of<T: Copy>(key: &str, v: &Value, options: &[(&str, T)]) -> Result<T> {
    let s = as_str(key, v)?;
    options
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(s))
        .map(|&(_, t)| t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!(
                "key {key:?}: unknown value {s:?} (expected one of {})",
                names.join(", ")
            ))
        })
}

/// Parses a JSON configuration, applying defaults for absent keys. Unknown
/// keys and ill-typed values are rejected by name.
pub fn parse_config(json_text: &str) -> Result<EngineConfig> {
    let value: Value = serde_json::from_str(json_text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
    let data_dir = match obj.get("data_dir") {
        Some(v) => as_str("data_dir", v)?.to_string(),
        None => return Err(Error::Config("data_dir required".into())),
    };
    let mut cfg = EngineConfig::new(data_dir);
    apply_config_object(&mut cfg, obj)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Like [`parse_config`], but `data_dir` may come from elsewhere.
pub fn parse_config_with_fallback(json_text: &str, data_dir: Option<PathBuf>) -> Result<EngineConfig> {
    let value: Value = serde_json::from_str(json_text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
    let dir = match (obj.get("data_dir"), data_dir) {
        (Some(v), _) => PathBuf::from(as_str("data_dir", v)?),
        (None, Some(d)) => d,
        (None, None) => return Err(Error::Config("data_dir required".into())),
    };
    let mut cfg = EngineConfig::new(dir);
    apply_config_object(&mut cfg, obj)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies configuration keys on top of `cfg` and revalidates. Accepts the
/// same keys and value types as [`parse_config`]; `data_dir` replaces the
/// data directory.
pub fn apply_overrides(cfg: &mut EngineConfig, overrides: &serde_json::Map<String, Value>) -> Result<()> {
    if let Some(v) = overrides.get("data_dir") {
        cfg.data_dir = PathBuf::from(as_str("data_dir", v)?);
    }
    apply_config_object(cfg, overrides)?;
    cfg.validate()
}

fn apply_config_object(cfg: &mut EngineConfig, obj: &serde_json::Map<String, Value>) -> Result<()> {
    for (key, v) in obj {
        let k = key.as_str();
        match k {
            "data_dir" => {}
            "join_type" => cfg.join_type = as_str(k, v)?.parse()?,
            "left_size" => cfg.left_size = as_usize(k, v)?,
            "right_size" => cfg.right_size = as_usize(k, v)?,
            "num_encoders" => cfg.num_encoders = as_usize(k, v)?,
            "encoder_init" => {
                cfg.encoder_init = one_of(
                    k,
                    v,
                    &[
                        ("random", EncoderInit::Random),
                        ("pretrained_artifact", EncoderInit::PretrainedArtifact),
                    ],
                )?
            }
            "finetune" => cfg.finetune = as_bool(k, v)?,
            "pretrain" => cfg.pretrain = as_bool(k, v)?,
            "supervision_fraction" => cfg.supervision_fraction = as_f64(k, v)?,
            "sampler" => {
                cfg.sampler = one_of(
                    k,
                    v,
                    &[
                        ("random", SamplerKind::Random),
                        ("stratified_bm25", SamplerKind::StratifiedBm25),
                        ("stratified_jaccard", SamplerKind::StratifiedJaccard),
                        ("custom", SamplerKind::Custom),
                    ],
                )?
            }
            "tier_size" => cfg.tier_size = as_usize(k, v)?,
            "resample_negatives" => cfg.resample_negatives = as_bool(k, v)?,
            "epochs" => cfg.epochs = as_usize(k, v)?,
            "pretrain_epochs" => cfg.pretrain_epochs = as_usize(k, v)?,
            "batch_size" => cfg.batch_size = as_usize(k, v)?,
            "embedding_dim" => cfg.embedding_dim = as_usize(k, v)?,
            "hash_dim" => cfg.hash_dim = as_usize(k, v)?,
            "pooling" => {
                let s = as_str(k, v)?;
                if s.eq_ignore_ascii_case("cls") {
                    return Err(Error::Config(
                        "pooling \"cls\" needs a leading classification token, which the bag-of-tokens encoder does not have; use \"mean\"".into(),
                    ));
                }
                cfg.pooling = one_of(k, v, &[("mean", Pooling::Mean)])?
            }
            "tokenizer" => {
                cfg.tokenizer = one_of(
                    k,
                    v,
                    &[
                        ("whitespace", TokenizerKind::Whitespace),
                        ("char2gram", TokenizerKind::Char2gram),
                    ],
                )?
            }
            "learning_rate" => cfg.learning_rate = as_f64(k, v)?,
            "loss_margin" => cfg.loss_margin = as_f64(k, v)?,
            "distance" => {
                cfg.distance = one_of(k, v, &[("l2", Distance::L2), ("inner_product", Distance::InnerProduct)])?
            }
            "normalize" => cfg.normalize = as_bool(k, v)?,
            "threshold" => cfg.threshold = if v.is_null() { None } else { Some(as_f64(k, v)?) },
            "seed" => cfg.seed = v.as_u64().ok_or_else(|| type_error(k, "a non-negative integer"))?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }
    Ok(())
}
