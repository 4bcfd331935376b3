//! Interaction ingestion, k-core filtering and per-user train/validation/test
//! splitting.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Tsv,
    Csv,
}

impl Format {
    fn separator(self) -> char {
        match self {
            Format::Tsv => '\t',
            Format::Csv => ',',
        }
    }

    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            _ => Format::Tsv,
        }
    }
}

/// Bidirectional map between opaque string keys and contiguous indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyMap {
    keys: Vec<String>,
    index: HashMap<String, u32>,
}

impl KeyMap {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, id: u32) -> &str {
        &self.keys[id as usize]
    }

    pub fn id(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    fn intern(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        let id = self.keys.len() as u32;
        self.keys.push(key.to_owned());
        self.index.insert(key.to_owned(), id);
        id
    }

    fn from_keys(keys: Vec<String>) -> KeyMap {
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i as u32))
            .collect();
        KeyMap { keys, index }
    }
}

/// Deduplicated implicit-feedback pairs over a contiguous id space.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSet {
    pairs: Vec<(u32, u32)>,
    users: Arc<KeyMap>,
    items: Arc<KeyMap>,
}

impl InteractionSet {
    /// Builds a set from raw key pairs, dropping repeats and assigning ids in
    /// first-seen order.
    pub fn from_keys<'a, I>(raw: I) -> Result<InteractionSet>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut users = KeyMap::default();
        let mut items = KeyMap::default();
        let mut seen = std::collections::HashSet::new();
        let mut pairs = Vec::new();
        for (u, i) in raw {
            if u.is_empty() || i.is_empty() {
                return Err(Error::InvalidArgument("empty user or item key".into()));
            }
            let pair = (users.intern(u), items.intern(i));
            if seen.insert(pair) {
                pairs.push(pair);
            }
        }
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(InteractionSet {
            pairs,
            users: Arc::new(users),
            items: Arc::new(items),
        })
    }

    /// Builds a set over an existing id space. Pairs must be in range; repeats
    /// are dropped.
    pub fn with_id_space(
        pairs: impl IntoIterator<Item = (u32, u32)>,
        users: Arc<KeyMap>,
        items: Arc<KeyMap>,
    ) -> Result<InteractionSet> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for (u, i) in pairs {
            if u as usize >= users.len() || i as usize >= items.len() {
                return Err(Error::InvalidArgument(format!(
                    "pair ({u}, {i}) outside {}x{} id space",
                    users.len(),
                    items.len()
                )));
            }
            if seen.insert((u, i)) {
                out.push((u, i));
            }
        }
        Ok(InteractionSet {
            pairs: out,
            users,
            items,
        })
    }

    /// Id-only set with synthetic keys `u{id}` / `i{id}`.
    pub fn from_ids(
        num_users: usize,
        num_items: usize,
        pairs: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<InteractionSet> {
        let users = KeyMap::from_keys((0..num_users).map(|u| format!("u{u}")).collect());
        let items = KeyMap::from_keys((0..num_items).map(|i| format!("i{i}")).collect());
        InteractionSet::with_id_space(pairs, Arc::new(users), Arc::new(items))
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn users(&self) -> &Arc<KeyMap> {
        &self.users
    }

    pub fn items(&self) -> &Arc<KeyMap> {
        &self.items
    }

    /// Item lists per user, sorted ascending.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_users()];
        for &(u, i) in &self.pairs {
            out[u as usize].push(i);
        }
        for row in &mut out {
            row.sort_unstable();
        }
        out
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_users()];
        for &(u, _) in &self.pairs {
            d[u as usize] += 1;
        }
        d
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_items()];
        for &(_, i) in &self.pairs {
            d[i as usize] += 1;
        }
        d
    }

    /// Same id space, pairs of `self` followed by the unseen pairs of `extra`.
    pub fn union_pairs(&self, extra: impl IntoIterator<Item = (u32, u32)>) -> Result<InteractionSet> {
        InteractionSet::with_id_space(
            self.pairs.iter().copied().chain(extra),
            self.users.clone(),
            self.items.clone(),
        )
    }

    pub fn write<W: Write>(&self, mut w: W, format: Format) -> Result<()> {
        let sep = format.separator();
        for &(u, i) in &self.pairs {
            writeln!(w, "{}{sep}{}", self.users.key(u), self.items.key(i))?;
        }
        Ok(())
    }
}

fn parse_line(line: &str, sep: char, line_no: usize) -> Result<(&str, &str)> {
    let mut fields = line.split(sep).map(str::trim);
    let user = fields.next().unwrap_or("");
    let item = fields.next().ok_or_else(|| Error::MalformedLine {
        line_no,
        reason: "expected at least 2 fields".into(),
    })?;
    if user.is_empty() || item.is_empty() {
        return Err(Error::MalformedLine {
            line_no,
            reason: "empty key".into(),
        });
    }
    Ok((user, item))
}

/// Reads `user<sep>item[<sep>...]` lines. Blank lines are skipped; extra
/// fields are ignored. Line numbers in errors are 1-based.
pub fn read_interactions<R: BufRead>(reader: R, format: Format) -> Result<InteractionSet> {
    let sep = format.separator();
    let mut raw = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (u, i) = parse_line(&line, sep, idx + 1)?;
        raw.push((u.to_owned(), i.to_owned()));
    }
    InteractionSet::from_keys(raw.iter().map(|(u, i)| (u.as_str(), i.as_str())))
}

pub fn load_interactions(path: &Path, format: Format) -> Result<InteractionSet> {
    let file = File::open(path)?;
    read_interactions(BufReader::new(file), format)
}

/// Iteratively removes users and items with fewer than `k` interactions until
/// every survivor has at least `k`, then remaps ids contiguously keeping the
/// original relative order.
pub fn kcore_filter(set: &InteractionSet, k: usize) -> Result<InteractionSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-core requires k >= 1".into()));
    }
    let m = set.num_users();
    let n = set.num_items();
    let mut user_deg = set.user_degrees();
    let mut item_deg = set.item_degrees();
    let mut user_alive = vec![true; m];
    let mut item_alive = vec![true; n];
    let by_user = set.items_by_user();
    let mut by_item = vec![Vec::new(); n];
    for &(u, i) in set.pairs() {
        by_item[i as usize].push(u);
    }

    // Nodes are queued once when they first drop below k.
    let mut queue: Vec<(bool, usize)> = Vec::new();
    for u in 0..m {
        if user_deg[u] < k {
            user_alive[u] = false;
            queue.push((true, u));
        }
    }
    for i in 0..n {
        if item_deg[i] < k {
            item_alive[i] = false;
            queue.push((false, i));
        }
    }
    while let Some((is_user, v)) = queue.pop() {
        if is_user {
            for &i in &by_user[v] {
                let i = i as usize;
                if item_alive[i] {
                    item_deg[i] -= 1;
                    if item_deg[i] < k {
                        item_alive[i] = false;
                        queue.push((false, i));
                    }
                }
            }
        } else {
            for &u in &by_item[v] {
                let u = u as usize;
                if user_alive[u] {
                    user_deg[u] -= 1;
                    if user_deg[u] < k {
                        user_alive[u] = false;
                        queue.push((true, u));
                    }
                }
            }
        }
    }

    let (user_remap, users) = compact(&user_alive, set.users());
    let (item_remap, items) = compact(&item_alive, set.items());
    let pairs: Vec<(u32, u32)> = set
        .pairs()
        .iter()
        .filter(|&&(u, i)| user_alive[u as usize] && item_alive[i as usize])
        .map(|&(u, i)| (user_remap[u as usize], item_remap[i as usize]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(InteractionSet {
        pairs,
        users: Arc::new(users),
        items: Arc::new(items),
    })
}

fn compact(alive: &[bool], keys: &KeyMap) -> (Vec<u32>, KeyMap) {
    let mut remap = vec![u32::MAX; alive.len()];
    let mut kept = Vec::new();
    for (old, &ok) in alive.iter().enumerate() {
        if ok {
            remap[old] = kept.len() as u32;
            kept.push(keys.key(old as u32).to_owned());
        }
    }
    (remap, KeyMap::from_keys(kept))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for Ratios {
    fn default() -> Self {
        Ratios {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl Ratios {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be in [0,1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// (train, validation, test) counts for a user with `n` interactions:
    /// floor for the held-out parts, remainder to training.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        // Absorb representation error such as 0.1 * 30 = 2.9999999999999996.
        let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let mut val = floor(self.validation);
        let mut test = floor(self.test);
        if val + test >= n {
            // Only reachable when train ratio is 0; keep one training pair.
            test = test.min(n.saturating_sub(1));
            val = val.min(n.saturating_sub(1) - test);
        }
        (n - val - test, val, test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub test: InteractionSet,
}

/// Sidecar written next to serialized splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub num_users: usize,
    pub num_items: usize,
    pub seed: u64,
    pub ratios: Ratios,
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALIDATION_FILE: &str = "validation.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const SPLIT_META_FILE: &str = "split.json";

/// Random per-user partition. Deterministic for a fixed seed.
pub fn split(set: &InteractionSet, ratios: Ratios, seed: u64) -> Result<SplitSet> {
    ratios.validate()?;
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); set.num_users()];
    for (idx, &(u, _)) in set.pairs().iter().enumerate() {
        by_user[u as usize].push(idx);
    }
    let mut rng = rng::stream(seed, "split", 0);
    // 0 = train, 1 = validation, 2 = test
    let mut bucket = vec![0u8; set.len()];
    for (u, idxs) in by_user.iter_mut().enumerate() {
        if idxs.is_empty() {
            return Err(Error::InvalidArgument(format!("user {u} has no interactions")));
        }
        idxs.shuffle(&mut rng);
        let (_, val, test) = ratios.counts(idxs.len());
        for &p in &idxs[..test] {
            bucket[p] = 2;
        }
        for &p in &idxs[test..test + val] {
            bucket[p] = 1;
        }
    }
    let part = |b: u8| {
        InteractionSet::with_id_space(
            set.pairs()
                .iter()
                .zip(&bucket)
                .filter(|(_, &x)| x == b)
                .map(|(&p, _)| p),
            set.users().clone(),
            set.items().clone(),
        )
    };
    Ok(SplitSet {
        train: part(0)?,
        validation: part(1)?,
        test: part(2)?,
    })
}

impl SplitSet {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    /// Writes the three splits as TSV plus the JSON sidecar.
    pub fn write_dir(&self, dir: &Path, seed: u64, ratios: Ratios) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, set) in [
            (TRAIN_FILE, &self.train),
            (VALIDATION_FILE, &self.validation),
            (TEST_FILE, &self.test),
        ] {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            set.write(&mut w, Format::Tsv)?;
            w.flush()?;
        }
        let meta = SplitMeta {
            num_users: self.num_users(),
            num_items: self.num_items(),
            seed,
            ratios,
        };
        let json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
        fs::write(dir.join(SPLIT_META_FILE), json + "\n")?;
        Ok(())
    }

    /// Reads splits written by [`SplitSet::write_dir`]. Ids are assigned in
    /// first-seen order over train, then validation, then test.
    pub fn read_dir(dir: &Path) -> Result<(SplitSet, SplitMeta)> {
        let meta: SplitMeta = serde_json::from_str(&fs::read_to_string(dir.join(SPLIT_META_FILE))?)
            .map_err(|e| Error::Config(format!("{}: {e}", SPLIT_META_FILE)))?;
        let mut users = KeyMap::default();
        let mut items = KeyMap::default();
        let mut parts: Vec<Vec<(u32, u32)>> = Vec::new();
        for name in [TRAIN_FILE, VALIDATION_FILE, TEST_FILE] {
            let reader = BufReader::new(File::open(dir.join(name))?);
            let mut pairs = Vec::new();
            for (idx, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let (u, i) = parse_line(&line, '\t', idx + 1)?;
                pairs.push((users.intern(u), items.intern(i)));
            }
            parts.push(pairs);
        }
        if users.len() != meta.num_users || items.len() != meta.num_items {
            return Err(Error::shape(
                format!("{}x{} from {SPLIT_META_FILE}", meta.num_users, meta.num_items),
                format!("{}x{} in split files", users.len(), items.len()),
            ));
        }
        let users = Arc::new(users);
        let items = Arc::new(items);
        let mut sets = parts
            .into_iter()
            .map(|p| InteractionSet::with_id_space(p, users.clone(), items.clone()));
        let train = sets.next().unwrap()?;
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let split = SplitSet {
            train,
            validation: sets.next().unwrap()?,
            test: sets.next().unwrap()?,
        };
        Ok((split, meta))
    }
}
