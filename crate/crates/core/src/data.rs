//! Interaction logs: ingestion, binarization, chronological splitting and
//! recent-interaction sequences.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Default positive-rating threshold: ratings strictly above it are kept.
pub const DEFAULT_THRESHOLD: u8 = 3;
pub const DEFAULT_MAX_SEQ_LEN: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    User,
    Item,
}

impl EntityKind {
    pub fn name(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
        }
    }

    pub fn other(self) -> Self {
        match self {
            EntityKind::User => EntityKind::Item,
            EntityKind::Item => EntityKind::User,
        }
    }
}

impl std::fmt::Display for EntityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
    pub timestamp: u64,
}

/// Bijection between external string ids and dense indices `0..len`.
///
/// Indices are handed out in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    external: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_external(ids: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut map = Self::new();
        for id in ids {
            if map.index.contains_key(&id) {
                return Err(Error::Invalid(format!("duplicate id `{id}` in id map")));
            }
            map.get_or_insert(&id);
        }
        Ok(map)
    }

    pub fn get_or_insert(&mut self, id: &str) -> usize {
        if let Some(&ix) = self.index.get(id) {
            return ix;
        }
        let ix = self.external.len();
        self.external.push(id.to_string());
        self.index.insert(id.to_string(), ix);
        ix
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn external(&self, ix: usize) -> Option<&str> {
        self.external.get(ix).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.external.iter().enumerate().map(|(i, s)| (i, s.as_str()))
    }

    /// Keeps only indices with `keep[ix] == true`, returning the new map and
    /// the old→new remapping. Relative order is preserved.
    fn compact(&self, keep: &[bool]) -> (IdMap, Vec<Option<usize>>) {
        let mut map = IdMap::new();
        let remap = self
            .external
            .iter()
            .zip(keep)
            .map(|(id, &k)| k.then(|| map.get_or_insert(id)))
            .collect();
        (map, remap)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let res: std::io::Result<()> = (|| {
            writeln!(out, "external_id,index")?;
            for (ix, id) in self.iter() {
                writeln!(out, "{id},{ix}")?;
            }
            out.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ids = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if n == 0 || line.is_empty() {
                continue;
            }
            let (id, ix) = line.rsplit_once(',').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected `external_id,index`".into(),
            })?;
            let ix: usize = ix.trim().parse().map_err(|_| Error::Parse {
                line: n + 1,
                message: format!("bad index `{ix}`"),
            })?;
            if ix != ids.len() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("indices must be dense and ordered, found {ix}"),
                });
            }
            ids.push(id.to_string());
        }
        Self::from_external(ids)
    }
}

#[derive(Clone, Debug)]
pub struct InteractionLog {
    /// Sorted non-decreasing by timestamp.
    pub records: Vec<InteractionRecord>,
    pub users: IdMap,
    pub items: IdMap,
}

impl InteractionLog {
    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub delimiter: String,
    pub has_header: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            delimiter: ",".into(),
            has_header: false,
        }
    }
}

fn parse_rating(field: &str) -> Option<u8> {
    let field = field.trim();
    let value = match field.parse::<u8>() {
        Ok(v) => v as f64,
        Err(_) => field.parse::<f64>().ok()?,
    };
    (value.fract() == 0.0 && (0.0..=5.0).contains(&value)).then_some(value as u8)
}

/// Parses `user,item,rating,timestamp` rows from a reader.
pub fn parse_interactions<R: BufRead>(reader: R, opts: &LoadOptions) -> Result<InteractionLog> {
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if (n == 0 && opts.has_header) || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split(opts.delimiter.as_str()).collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let rating = parse_rating(fields[2]).ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("rating `{}` is not an integer in [0, 5]", fields[2]),
        })?;
        let timestamp = fields[3].trim().parse::<u64>().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("timestamp `{}` is not a non-negative integer", fields[3]),
        })?;
        let user = users.get_or_insert(fields[0].trim());
        let item = items.get_or_insert(fields[1].trim());
        records.push(InteractionRecord {
            user,
            item,
            rating,
            timestamp,
        });
    }
    if records.is_empty() {
        return Err(Error::Empty("interaction file has no records".into()));
    }
    records.sort_by_key(|r| r.timestamp);
    Ok(InteractionLog {
        records,
        users,
        items,
    })
}

pub fn load_interactions(path: &Path, opts: &LoadOptions) -> Result<InteractionLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file), opts)
}

/// Keeps records with `rating > threshold` and drops entities left without
/// any positive interaction.
pub fn binarize(log: &InteractionLog, threshold: u8) -> Result<InteractionLog> {
    if threshold > 5 {
        return Err(Error::Invalid(format!("threshold {threshold} outside [0, 5]")));
    }
    let kept: Vec<InteractionRecord> = log
        .records
        .iter()
        .filter(|r| r.rating > threshold)
        .copied()
        .collect();
    if kept.is_empty() {
        return Err(Error::Empty(format!("no ratings above {threshold}")));
    }
    let mut keep_users = vec![false; log.user_count()];
    let mut keep_items = vec![false; log.item_count()];
    for r in &kept {
        keep_users[r.user] = true;
        keep_items[r.item] = true;
    }
    let (users, user_remap) = log.users.compact(&keep_users);
    let (items, item_remap) = log.items.compact(&keep_items);
    let records = kept
        .into_iter()
        .map(|r| InteractionRecord {
            user: user_remap[r.user].expect("kept user"),
            item: item_remap[r.item].expect("kept item"),
            ..r
        })
        .collect();
    Ok(InteractionLog {
        records,
        users,
        items,
    })
}

#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Vec<InteractionRecord>,
    pub valid: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    /// Last timestamp of the train and validation slices.
    pub train_end: u64,
    pub valid_end: u64,
}

/// Slices records chronologically. Each non-first slice gets
/// `floor(n * ratio / total)` records; the remainder goes to train.
pub fn split_chronological(
    records: &[InteractionRecord],
    ratios: (usize, usize, usize),
) -> Result<SplitDataset> {
    let (rt, rv, rs) = ratios;
    let total = rt + rv + rs;
    if total == 0 || rt == 0 || rv == 0 || rs == 0 {
        return Err(Error::Invalid(format!("bad split ratios {ratios:?}")));
    }
    let n = records.len();
    let n_valid = n * rv / total;
    let n_test = n * rs / total;
    if n_valid == 0 || n_test == 0 || n_valid + n_test >= n {
        return Err(Error::Empty(format!(
            "{n} records cannot fill a {rt}:{rv}:{rs} split"
        )));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.timestamp);
    let n_train = n - n_valid - n_test;
    let test = sorted.split_off(n_train + n_valid);
    let valid = sorted.split_off(n_train);
    let train = sorted;
    Ok(SplitDataset {
        train_end: train.last().map_or(0, |r| r.timestamp),
        valid_end: valid.last().map_or(0, |r| r.timestamp),
        train,
        valid,
        test,
    })
}

/// Time-ordered neighbor lists of one entity kind.
#[derive(Clone, Debug, Default)]
struct Timelines {
    ids: Vec<Vec<usize>>,
    times: Vec<Vec<u64>>,
}

impl Timelines {
    fn new(n: usize) -> Self {
        Self {
            ids: vec![Vec::new(); n],
            times: vec![Vec::new(); n],
        }
    }

    fn recent(&self, entity: usize, before: Option<u64>, cap: usize) -> &[usize] {
        let Some(ids) = self.ids.get(entity) else {
            return &[];
        };
        let end = match before {
            Some(t) => self.times[entity].partition_point(|&ts| ts < t),
            None => ids.len(),
        };
        &ids[end.saturating_sub(cap)..end]
    }

    fn visible(&self, entity: usize, before: Option<u64>) -> usize {
        match (self.times.get(entity), before) {
            (None, _) => 0,
            (Some(times), Some(t)) => times.partition_point(|&ts| ts < t),
            (Some(times), None) => times.len(),
        }
    }

    fn last_time(&self, entity: usize) -> Option<u64> {
        self.times.get(entity).and_then(|t| t.last().copied())
    }
}

/// Recent-interaction sequences `S_u` (items) and `S_i` (users) built from
/// the train slice only; most recent last.
#[derive(Clone, Debug)]
pub struct SequenceStore {
    max_seq_len: usize,
    users: Timelines,
    items: Timelines,
}

pub fn build_sequences(
    train: &[InteractionRecord],
    user_count: usize,
    item_count: usize,
    max_seq_len: usize,
) -> Result<SequenceStore> {
    if train.is_empty() {
        return Err(Error::Empty("train slice".into()));
    }
    let mut sorted = train.to_vec();
    sorted.sort_by_key(|r| r.timestamp);
    let mut users = Timelines::new(user_count);
    let mut items = Timelines::new(item_count);
    for r in &sorted {
        if r.user >= user_count || r.item >= item_count {
            return Err(Error::UnknownEntity(format!("({}, {})", r.user, r.item)));
        }
        users.ids[r.user].push(r.item);
        users.times[r.user].push(r.timestamp);
        items.ids[r.item].push(r.user);
        items.times[r.item].push(r.timestamp);
    }
    Ok(SequenceStore {
        max_seq_len,
        users,
        items,
    })
}

impl SequenceStore {
    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn user_count(&self) -> usize {
        self.users.ids.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.ids.len()
    }

    /// Most recent items of `user` over the whole train slice.
    pub fn user_sequence(&self, user: usize) -> &[usize] {
        self.users.recent(user, None, self.max_seq_len)
    }

    pub fn item_sequence(&self, item: usize) -> &[usize] {
        self.items.recent(item, None, self.max_seq_len)
    }

    /// Most recent items of `user` with timestamp strictly before `t`.
    pub fn user_sequence_before(&self, user: usize, t: u64) -> &[usize] {
        self.users.recent(user, Some(t), self.max_seq_len)
    }

    pub fn item_sequence_before(&self, item: usize, t: u64) -> &[usize] {
        self.items.recent(item, Some(t), self.max_seq_len)
    }

    /// Recent sequence of either kind, optionally strictly before `before`.
    pub fn sequence(&self, kind: EntityKind, entity: usize, before: Option<u64>) -> &[usize] {
        self.timelines(kind).recent(entity, before, self.max_seq_len)
    }

    /// How many train interactions of `entity` precede `before` (all when
    /// `None`); identifies a truncated sequence even when it is capped.
    pub fn visible_count(&self, kind: EntityKind, entity: usize, before: Option<u64>) -> usize {
        self.timelines(kind).visible(entity, before)
    }

    fn timelines(&self, kind: EntityKind) -> &Timelines {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }

    pub fn user_last_time(&self, user: usize) -> Option<u64> {
        self.users.last_time(user)
    }

    pub fn item_last_time(&self, item: usize) -> Option<u64> {
        self.items.last_time(item)
    }

    /// Number of train interactions of `user`, uncapped.
    pub fn user_activity(&self, user: usize) -> usize {
        self.users.ids.get(user).map_or(0, Vec::len)
    }

    pub fn item_activity(&self, item: usize) -> usize {
        self.items.ids.get(item).map_or(0, Vec::len)
    }
}

/// Uniform sampler over items a user has not positively interacted with.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    item_count: usize,
    positives: Vec<HashSet<usize>>,
}

impl NegativeSampler {
    pub fn new(records: &[InteractionRecord], user_count: usize, item_count: usize) -> Self {
        let mut positives = vec![HashSet::new(); user_count];
        for r in records {
            positives[r.user].insert(r.item);
        }
        Self {
            item_count,
            positives,
        }
    }

    pub fn is_positive(&self, user: usize, item: usize) -> bool {
        self.positives.get(user).is_some_and(|s| s.contains(&item))
    }

    pub fn sample<R: Rng + ?Sized>(&self, user: usize, rng: &mut R) -> Result<usize> {
        let seen = self
            .positives
            .get(user)
            .ok_or_else(|| Error::UnknownEntity(format!("user {user}")))?;
        let eligible = self.item_count - seen.len();
        if eligible == 0 {
            return Err(Error::Invalid(format!(
                "user {user} interacted with every item"
            )));
        }
        if seen.len() * 2 <= self.item_count {
            loop {
                let item = rng.random_range(0..self.item_count);
                if !seen.contains(&item) {
                    return Ok(item);
                }
            }
        }
        let k = rng.random_range(0..eligible);
        Ok((0..self.item_count)
            .filter(|i| !seen.contains(i))
            .nth(k)
            .expect("k < eligible"))
    }
}

/// Categorical attributes keyed by entity index. `None` marks unknown.
#[derive(Clone, Debug, Default)]
pub struct AttributeTable {
    pub families: Vec<String>,
    pub values: Vec<Vec<Option<String>>>,
}

impl AttributeTable {
    pub fn empty(entity_count: usize) -> Self {
        Self {
            families: Vec::new(),
            values: vec![Vec::new(); entity_count],
        }
    }
}

/// Reads `entity,attr_1,...,attr_k` rows. Entities not in `ids` are ignored;
/// entities missing from the file get all-unknown values.
pub fn load_attributes(path: &Path, opts: &LoadOptions, ids: &IdMap) -> Result<AttributeTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_attributes(BufReader::new(file), opts, ids)
}

pub fn parse_attributes<R: BufRead>(
    reader: R,
    opts: &LoadOptions,
    ids: &IdMap,
) -> Result<AttributeTable> {
    let mut families: Vec<String> = Vec::new();
    let mut values = vec![Vec::new(); ids.len()];
    let mut width = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split(opts.delimiter.as_str()).collect();
        if n == 0 && opts.has_header {
            families = fields[1..].iter().map(|s| s.trim().to_string()).collect();
            width = Some(families.len());
            continue;
        }
        let w = *width.get_or_insert(fields.len() - 1);
        if fields.len() - 1 != w {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected {} attribute columns, found {}", w, fields.len() - 1),
            });
        }
        if let Some(ix) = ids.get(fields[0].trim()) {
            values[ix] = fields[1..]
                .iter()
                .map(|v| {
                    let v = v.trim();
                    (!v.is_empty()).then(|| v.to_string())
                })
                .collect();
        }
    }
    let w = width.unwrap_or(0);
    if families.is_empty() {
        families = (0..w).map(|k| format!("attr{k}")).collect();
    }
    for row in &mut values {
        if row.is_empty() {
            *row = vec![None; w];
        }
    }
    Ok(AttributeTable { families, values })
}

/// Writes records as `user_index,item_index,rating,timestamp`.
pub fn write_records(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(out, "user,item,rating,timestamp")?;
        for r in records {
            writeln!(out, "{},{},{},{}", r.user, r.item, r.rating, r.timestamp)?;
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<InteractionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 || line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: n + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        records.push(InteractionRecord {
            user: f[0].parse().map_err(|_| bad("user index"))?,
            item: f[1].parse().map_err(|_| bad("item index"))?,
            rating: f[2].parse().map_err(|_| bad("rating"))?,
            timestamp: f[3].parse().map_err(|_| bad("timestamp"))?,
        });
    }
    Ok(records)
}
