//! Impression-log parsing, feature hashing, click sequences and the
//! skip-gram pair / negative sampling helpers used by the correlation task.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    User,
    Query,
    Ad,
    Other,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::User, Group::Query, Group::Ad, Group::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::User => "user",
            Group::Query => "query",
            Group::Ad => "ad",
            Group::Other => "other",
        }
    }
}

impl FromStr for Group {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "user" => Ok(Group::User),
            "query" => Ok(Group::Query),
            "ad" => Ok(Group::Ad),
            "other" => Ok(Group::Other),
            other => Err(FeatureError::Schema(format!("unknown group {other:?}"))),
        }
    }
}

/// How a raw column value becomes features.
///
/// `Multivalent` splits on `|` and whitespace and emits one feature per token.
/// `Bigram` emits consecutive token pairs (or the lone token when there is
/// only one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Valence {
    Univalent,
    Multivalent,
    Bigram,
}

impl Valence {
    pub fn as_str(self) -> &'static str {
        match self {
            Valence::Univalent => "univalent",
            Valence::Multivalent => "multivalent",
            Valence::Bigram => "bigram",
        }
    }
}

impl FromStr for Valence {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "univalent" | "uni" => Ok(Valence::Univalent),
            "multivalent" | "multi" => Ok(Valence::Multivalent),
            "bigram" | "multivalent_bigram" => Ok(Valence::Bigram),
            other => Err(FeatureError::Schema(format!("unknown valence {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FieldSpec {
    pub name: String,
    pub group: Group,
    pub valence: Valence,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FieldSchema {
    fields: Vec<FieldSpec>,
}

impl FieldSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self, FeatureError> {
        let mut seen = std::collections::HashSet::new();
        for f in &fields {
            if f.name.is_empty() || f.name.contains([',', '\t', '\n']) {
                return Err(FeatureError::Schema(format!("bad field name {:?}", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(FeatureError::Schema(format!("duplicate field {:?}", f.name)));
            }
        }
        for g in [Group::User, Group::Ad] {
            if !fields.iter().any(|f| f.group == g) {
                return Err(FeatureError::Schema(format!("no field in group {}", g.as_str())));
            }
        }
        Ok(Self { fields })
    }

    /// Parses the `name,group,valence` line format. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self, FeatureError> {
        let mut fields = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(FeatureError::Schema(format!(
                    "line {}: expected name,group,valence",
                    n + 1
                )));
            }
            fields.push(FieldSpec {
                name: parts[0].to_string(),
                group: parts[1].parse()?,
                valence: parts[2].parse()?,
            });
        }
        Self::new(fields)
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = std::fs::read_to_string(path).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field_count(&self, group: Group) -> usize {
        self.fields.iter().filter(|f| f.group == group).count()
    }

    /// Columns of a log line: label, user_id, timestamp, then one per field.
    pub fn column_count(&self) -> usize {
        3 + self.fields.len()
    }
}

impl fmt::Display for FieldSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for field in &self.fields {
            writeln!(f, "{},{},{}", field.name, field.group.as_str(), field.valence.as_str())?;
        }
        Ok(())
    }
}

/// Hashed features of one group: outer list is fields, inner list is the
/// features of that field.
pub type FieldIndices = Vec<Vec<usize>>;

/// The ad-group features of one impression.
pub type AdBundle = FieldIndices;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub label: u8,
    pub user_id: String,
    pub timestamp: i64,
    pub user_indices: FieldIndices,
    pub query_indices: FieldIndices,
    pub ad_indices: FieldIndices,
    pub other_indices: FieldIndices,
}

impl Instance {
    pub fn group(&self, group: Group) -> &FieldIndices {
        match group {
            Group::User => &self.user_indices,
            Group::Query => &self.query_indices,
            Group::Ad => &self.ad_indices,
            Group::Other => &self.other_indices,
        }
    }

    fn group_mut(&mut self, group: Group) -> &mut FieldIndices {
        match group {
            Group::User => &mut self.user_indices,
            Group::Query => &mut self.query_indices,
            Group::Ad => &mut self.ad_indices,
            Group::Other => &mut self.other_indices,
        }
    }

    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }

    /// Every hashed index of the instance, in schema-group order, repeats kept.
    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        Group::ALL
            .into_iter()
            .flat_map(move |g| self.group(g).iter().flatten().copied())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a of `field=value`, reduced modulo `n`.
pub fn hash_feature(field: &str, value: &str, n: usize) -> usize {
    assert!(n >= 1, "hash space must be at least 1");
    let mut h = FNV_OFFSET;
    for &b in field.as_bytes().iter().chain(b"=").chain(value.as_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    (h % n as u64) as usize
}

fn tokens(raw: &str) -> Vec<&str> {
    raw.split(|c: char| c == '|' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect()
}

fn hash_field(spec: &FieldSpec, raw: &str, n: usize) -> Vec<usize> {
    if raw.is_empty() {
        return Vec::new();
    }
    match spec.valence {
        Valence::Univalent => vec![hash_feature(&spec.name, raw, n)],
        Valence::Multivalent => tokens(raw)
            .into_iter()
            .map(|t| hash_feature(&spec.name, t, n))
            .collect(),
        Valence::Bigram => {
            let toks = tokens(raw);
            if toks.len() < 2 {
                toks.into_iter().map(|t| hash_feature(&spec.name, t, n)).collect()
            } else {
                toks.windows(2)
                    .map(|w| hash_feature(&spec.name, &format!("{} {}", w[0], w[1]), n))
                    .collect()
            }
        }
    }
}

/// Parses one tab-separated log line. `line_no` is only used in errors.
pub fn parse_log_line(
    line: &str,
    line_no: usize,
    schema: &FieldSchema,
    hash_space: usize,
) -> Result<Instance, FeatureError> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let cols: Vec<&str> = line.split('\t').collect();
    let err = |message: String| FeatureError::Parse { line: line_no, message };
    if cols.len() != schema.column_count() {
        return Err(err(format!(
            "expected {} columns, got {}",
            schema.column_count(),
            cols.len()
        )));
    }
    let label = match cols[0] {
        "0" => 0,
        "1" => 1,
        other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
    };
    let timestamp: i64 = cols[2]
        .parse()
        .map_err(|_| err(format!("bad timestamp {:?}", cols[2])))?;
    let mut inst = Instance {
        label,
        user_id: cols[1].to_string(),
        timestamp,
        user_indices: Vec::new(),
        query_indices: Vec::new(),
        ad_indices: Vec::new(),
        other_indices: Vec::new(),
    };
    for (spec, raw) in schema.fields().iter().zip(&cols[3..]) {
        let feats = hash_field(spec, raw, hash_space);
        inst.group_mut(spec.group).push(feats);
    }
    Ok(inst)
}

/// Parses a whole log. Lines starting with `#` and blank lines are skipped.
pub fn parse_log<R: Read>(
    reader: R,
    schema: &FieldSchema,
    hash_space: usize,
) -> Result<Vec<Instance>, FeatureError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| FeatureError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_log_line(&line, i + 1, schema, hash_space)?);
    }
    Ok(out)
}

pub fn read_log(path: &Path, schema: &FieldSchema, hash_space: usize) -> Result<Vec<Instance>, FeatureError> {
    let file = File::open(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_log(file, schema, hash_space)
}

/// A user's clicked ads in time order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickSequence {
    pub user_id: String,
    pub ads: Vec<AdBundle>,
    pub timestamps: Vec<i64>,
}

impl ClickSequence {
    pub fn len(&self) -> usize {
        self.ads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ads.is_empty()
    }
}

/// Groups clicked instances by user, sorted by timestamp (stable), keeping
/// only users with at least two clicks. Output is ordered by user id.
pub fn build_click_sequences(instances: &[Instance]) -> Vec<ClickSequence> {
    let mut by_user: BTreeMap<&str, Vec<&Instance>> = BTreeMap::new();
    for inst in instances.iter().filter(|i| i.label == 1) {
        by_user.entry(inst.user_id.as_str()).or_default().push(inst);
    }
    by_user
        .into_iter()
        .filter(|(_, clicks)| clicks.len() >= 2)
        .map(|(user, mut clicks)| {
            clicks.sort_by_key(|i| i.timestamp);
            ClickSequence {
                user_id: user.to_string(),
                ads: clicks.iter().map(|i| i.ad_indices.clone()).collect(),
                timestamps: clicks.iter().map(|i| i.timestamp).collect(),
            }
        })
        .collect()
}

/// All `(center, context)` positions with `0 < |center - context| <= window`,
/// zero-based, in center-major order.
pub fn skipgram_positions(len: usize, window: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..len {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(len.saturating_sub(1));
        for j in lo..=hi {
            if j != i {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

pub fn extract_skipgram_pairs(seq: &ClickSequence, window: usize) -> Vec<(usize, usize)> {
    skipgram_positions(seq.len(), window)
}

/// Draws `count` ids uniformly from `0..vocab_size` minus `exclude`, with
/// replacement.
pub fn sample_negatives<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    vocab_size: usize,
    exclude: &[usize],
) -> Result<Vec<usize>, FeatureError> {
    let mut excluded: Vec<usize> = exclude.iter().copied().filter(|&e| e < vocab_size).collect();
    excluded.sort_unstable();
    excluded.dedup();
    if vocab_size <= excluded.len() {
        return Err(FeatureError::Config(format!(
            "negative sampling needs more than {} ad ids, vocabulary has {vocab_size}",
            excluded.len()
        )));
    }
    let support = vocab_size - excluded.len();
    Ok((0..count)
        .map(|_| {
            let mut r = rng.random_range(0..support);
            for &e in &excluded {
                if r >= e {
                    r += 1;
                } else {
                    break;
                }
            }
            r
        })
        .collect())
}

/// The distinct ad bundles seen in training clicks; negatives are drawn
/// uniformly from it.
#[derive(Debug, Clone, Default)]
pub struct AdVocabulary {
    bundles: Vec<AdBundle>,
    ids: HashMap<AdBundle, usize>,
}

impl AdVocabulary {
    pub fn from_sequences(seqs: &[ClickSequence]) -> Self {
        let mut vocab = Self::default();
        for ad in seqs.iter().flat_map(|s| &s.ads) {
            vocab.intern(ad);
        }
        vocab
    }

    pub fn intern(&mut self, bundle: &AdBundle) -> usize {
        if let Some(&id) = self.ids.get(bundle) {
            return id;
        }
        let id = self.bundles.len();
        self.bundles.push(bundle.clone());
        self.ids.insert(bundle.clone(), id);
        id
    }

    pub fn id(&self, bundle: &AdBundle) -> Option<usize> {
        self.ids.get(bundle).copied()
    }

    pub fn get(&self, id: usize) -> &AdBundle {
        &self.bundles[id]
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }
}
