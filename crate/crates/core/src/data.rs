//! Knowledge-graph triples: loading, vocabularies, reciprocal augmentation,
//! filtered-evaluation index and mini-batching.
//!
//! Files hold one `head<TAB>relation<TAB>tail` triple per line. Vocabularies
//! assign dense ids in first-seen order; inverse relations take id `r + |R|`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexSet;
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{KgeError, Result};

/// Integer-encoded `(source, relation, target)` fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub source: u32,
    pub relation: u32,
    pub target: u32,
}

impl Triple {
    pub fn new(source: u32, relation: u32, target: u32) -> Self {
        Triple {
            source,
            relation,
            target,
        }
    }

    /// `(t, r⁻¹, s)` for an original relation, `(t, r, s)` for an inverse one.
    pub fn reciprocal(self, relation_count: u32) -> Triple {
        let relation = if self.relation < relation_count {
            self.relation + relation_count
        } else {
            self.relation - relation_count
        };
        Triple::new(self.target, relation, self.source)
    }
}

/// Entity and relation name ↔ id maps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    entities: IndexSet<String>,
    relations: IndexSet<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Placeholder names `e0..`, `r0..` for id-only graphs.
    pub fn numbered(entities: usize, relations: usize) -> Self {
        Vocabulary {
            entities: (0..entities).map(|i| format!("e{i}")).collect(),
            relations: (0..relations).map(|i| format!("r{i}")).collect(),
        }
    }

    /// Builds one vocabulary over several files, in file then line order.
    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        for path in paths {
            let path = path.as_ref();
            let text = read_text(path)?;
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let (h, r, t) = split_line(path, lineno + 1, line)?;
                vocab.entities.insert(h.to_string());
                vocab.relations.insert(r.to_string());
                vocab.entities.insert(t.to_string());
            }
        }
        Ok(vocab)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Number of original relations, |R| (inverse relations not included).
    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<u32> {
        self.entities.get_index_of(name).map(|i| i as u32)
    }

    pub fn relation_id(&self, name: &str) -> Option<u32> {
        self.relations.get_index_of(name).map(|i| i as u32)
    }

    pub fn entity_name(&self, id: u32) -> Option<&str> {
        self.entities.get_index(id as usize).map(String::as_str)
    }

    /// Name of an original or inverse relation id (inverse names get a `^-1` suffix).
    pub fn relation_name(&self, id: u32) -> Option<String> {
        let r = self.relations.len() as u32;
        if id < r {
            self.relations.get_index(id as usize).cloned()
        } else {
            self.relations
                .get_index((id - r) as usize)
                .map(|n| format!("{n}^-1"))
        }
    }

    /// Maps an id triple back to names; inverse relations are undone first.
    pub fn decode(&self, triple: Triple) -> Option<(String, String, String)> {
        let r = self.relations.len() as u32;
        let original = if triple.relation >= r {
            triple.reciprocal(r)
        } else {
            triple
        };
        Some((
            self.entity_name(original.source)?.to_string(),
            self.relations.get_index(original.relation as usize)?.clone(),
            self.entity_name(original.target)?.to_string(),
        ))
    }

    /// Writes `entities.tsv` and `relations.tsv` as `name<TAB>id` lines.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| KgeError::io(dir, e))?;
        for (file, names) in [("entities.tsv", &self.entities), ("relations.tsv", &self.relations)] {
            let path = dir.join(file);
            let mut out = String::new();
            for (i, n) in names.iter().enumerate() {
                out.push_str(&format!("{n}\t{i}\n"));
            }
            fs::write(&path, out).map_err(|e| KgeError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Triples of one split together with the number of original relations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripleStore {
    triples: Vec<Triple>,
    relation_count: u32,
    reciprocals: bool,
}

impl TripleStore {
    pub fn new(triples: Vec<Triple>, relation_count: usize) -> Self {
        TripleStore {
            triples,
            relation_count: relation_count as u32,
            reciprocals: false,
        }
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count as usize
    }

    pub fn has_reciprocals(&self) -> bool {
        self.reciprocals
    }

    /// Triples whose relation id is original (`< |R|`).
    pub fn originals(&self) -> impl Iterator<Item = &Triple> {
        let r = self.relation_count;
        self.triples.iter().filter(move |t| t.relation < r)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| KgeError::io(path, e))
}

fn split_line<'l>(path: &Path, line_no: usize, line: &'l str) -> Result<(&'l str, &'l str, &'l str)> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields: Vec<&str> = line.split('\t').collect();
    match fields.as_slice() {
        [h, r, t] => Ok((h, r, t)),
        _ => Err(KgeError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
        }),
    }
}

/// Reads a triple file.
///
/// With `vocab = None` a fresh vocabulary is built from this file alone; with
/// a supplied vocabulary every name must already be known and the same
/// vocabulary is returned. Duplicate triples are dropped with a warning.
pub fn load_triples(path: &Path, vocab: Option<&Vocabulary>) -> Result<(TripleStore, Vocabulary)> {
    let text = read_text(path)?;
    let mut owned = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::new(),
    };
    let fixed = vocab.is_some();
    let mut triples = Vec::new();
    let mut seen = HashSet::new();
    let mut duplicates = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (h, r, t) = split_line(path, i + 1, line)?;
        let lookup = |set: &mut IndexSet<String>, name: &str, kind: &'static str| -> Result<u32> {
            if fixed {
                set.get_index_of(name).map(|x| x as u32).ok_or_else(|| KgeError::Vocabulary {
                    path: path.to_path_buf(),
                    line: i + 1,
                    kind,
                    name: name.to_string(),
                })
            } else {
                Ok(set.insert_full(name.to_string()).0 as u32)
            }
        };
        let s = lookup(&mut owned.entities, h, "entity")?;
        let rel = lookup(&mut owned.relations, r, "relation")?;
        let o = lookup(&mut owned.entities, t, "entity")?;
        let triple = Triple::new(s, rel, o);
        if seen.insert(triple) {
            triples.push(triple);
        } else {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        warn!("{}: dropped {duplicates} duplicate triples", path.display());
    }
    let store = TripleStore::new(triples, owned.relation_count());
    Ok((store, owned))
}

/// Appends `(t, r + |R|, s)` for every `(s, r, t)`.
pub fn add_reciprocals(store: &TripleStore, vocab: &Vocabulary) -> Result<TripleStore> {
    let r = vocab.relation_count() as u32;
    if store.reciprocals {
        return Err(KgeError::Contract("reciprocals already added".into()));
    }
    if let Some(bad) = store.triples.iter().find(|t| t.relation >= r) {
        return Err(KgeError::Contract(format!(
            "relation id {} >= |R| = {r}; reciprocals already present?",
            bad.relation
        )));
    }
    let mut triples = Vec::with_capacity(store.len() * 2);
    triples.extend_from_slice(&store.triples);
    triples.extend(store.triples.iter().map(|t| t.reciprocal(r)));
    Ok(TripleStore {
        triples,
        relation_count: r,
        reciprocals: true,
    })
}

/// Known targets per `(source, relation)` query.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    map: HashMap<(u32, u32), HashSet<u32>>,
}

impl FilterIndex {
    pub fn from_stores(stores: &[&TripleStore]) -> Self {
        let mut map: HashMap<(u32, u32), HashSet<u32>> = HashMap::new();
        for store in stores {
            for t in store.triples() {
                map.entry((t.source, t.relation)).or_default().insert(t.target);
            }
        }
        FilterIndex { map }
    }

    pub fn targets(&self, source: u32, relation: u32) -> Option<&HashSet<u32>> {
        self.map.get(&(source, relation))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Writes `source<TAB>relation<TAB>t1,t2,...` lines sorted by key.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut keys: Vec<_> = self.map.keys().copied().collect();
        keys.sort_unstable();
        let mut out = Vec::new();
        for (s, r) in keys {
            let mut ts: Vec<u32> = self.map[&(s, r)].iter().copied().collect();
            ts.sort_unstable();
            let joined: Vec<String> = ts.iter().map(u32::to_string).collect();
            writeln!(out, "{s}\t{r}\t{}", joined.join(",")).expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| KgeError::io(path, e))
    }
}

/// Filter index over the union of all splits (each should include reciprocals).
pub fn build_filter_index(train: &TripleStore, valid: &TripleStore, test: &TripleStore) -> FilterIndex {
    FilterIndex::from_stores(&[train, valid, test])
}

/// One training mini-batch of `(s, r)` queries with their true targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryBatch {
    pub sources: Vec<u32>,
    pub relations: Vec<u32>,
    pub targets: Vec<u32>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn from_triples(triples: &[Triple]) -> Self {
        QueryBatch {
            sources: triples.iter().map(|t| t.source).collect(),
            relations: triples.iter().map(|t| t.relation).collect(),
            targets: triples.iter().map(|t| t.target).collect(),
        }
    }

    fn extend(&mut self, other: QueryBatch) {
        self.sources.extend(other.sources);
        self.relations.extend(other.relations);
        self.targets.extend(other.targets);
    }
}

/// Mixes a seed with stream identifiers into one 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Shuffles a store with a permutation determined by `(seed, epoch)` and cuts
/// it into batches of at most `batch_size` triples.
pub fn batch_queries(store: &TripleStore, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<QueryBatch>> {
    if batch_size == 0 {
        return Err(KgeError::Parameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..store.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5348_5546, epoch]));
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let triples: Vec<Triple> = chunk.iter().map(|&i| store.triples[i]).collect();
            QueryBatch::from_triples(&triples)
        })
        .collect())
}

/// Folds a trailing single-row batch into its predecessor (train-mode batch
/// norm needs at least two rows).
pub fn merge_singleton_tail(mut batches: Vec<QueryBatch>) -> Vec<QueryBatch> {
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Locates `train`, `valid`, `test` files (bare or with `.txt`) in a directory.
pub fn split_paths(dir: &Path) -> Result<[PathBuf; 3]> {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for split in SPLITS {
        let candidates = [dir.join(format!("{split}.txt")), dir.join(split)];
        match candidates.into_iter().find(|p| p.is_file()) {
            Some(p) => found.push(p),
            None => missing.push(format!("{split}.txt")),
        }
    }
    if !missing.is_empty() {
        return Err(KgeError::MissingFiles {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    Ok([found[0].clone(), found[1].clone(), found[2].clone()])
}

/// Split sizes and vocabulary sizes, counted before reciprocal augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetStats {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Published split statistics of the two standard benchmarks.
pub fn published_stats(name: &str) -> Option<DatasetStats> {
    match crate::config::dataset_key(name).as_str() {
        "fb15k-237" => Some(DatasetStats {
            entities: 14_541,
            relations: 237,
            train: 272_115,
            valid: 17_535,
            test: 20_466,
        }),
        "wn18rr" => Some(DatasetStats {
            entities: 40_943,
            relations: 11,
            train: 86_835,
            valid: 3_034,
            test: 3_134,
        }),
        _ => None,
    }
}

/// A loaded benchmark: shared vocabulary, reciprocal-augmented splits and
/// the filter index over all of them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub vocab: Vocabulary,
    pub train: TripleStore,
    pub valid: TripleStore,
    pub test: TripleStore,
    pub filter: FilterIndex,
    /// SHA-256 over the three split files, in train/valid/test order.
    pub checksum: String,
    pub file_checksums: Vec<(String, String)>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let paths = split_paths(dir)?;
        let vocab = Vocabulary::from_files(&paths)?;
        let mut stores = Vec::with_capacity(3);
        let mut total = Sha256::new();
        let mut file_checksums = Vec::new();
        for (split, path) in SPLITS.iter().zip(&paths) {
            let bytes = fs::read(path).map_err(|e| KgeError::io(path, e))?;
            total.update(&bytes);
            file_checksums.push((split.to_string(), hex(&Sha256::digest(&bytes))));
            let (store, _) = load_triples(path, Some(&vocab))?;
            stores.push(add_reciprocals(&store, &vocab)?);
        }
        let test = stores.pop().unwrap();
        let valid = stores.pop().unwrap();
        let train = stores.pop().unwrap();
        let filter = build_filter_index(&train, &valid, &test);
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Dataset {
            name,
            vocab,
            train,
            valid,
            test,
            filter,
            checksum: hex(&total.finalize()),
            file_checksums,
        })
    }

    /// In-memory dataset over id triples with numbered names; used for
    /// synthetic graphs. The checksum covers the id triples.
    pub fn from_id_triples(
        name: &str,
        entities: usize,
        relations: usize,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let vocab = Vocabulary::numbered(entities, relations);
        if let Some(bad) = train
            .iter()
            .chain(&valid)
            .chain(&test)
            .find(|t| t.source as usize >= entities || t.target as usize >= entities || t.relation as usize >= relations)
        {
            return Err(KgeError::Contract(format!("triple {bad:?} outside the id ranges")));
        }
        let mut total = Sha256::new();
        let mut stores = Vec::with_capacity(3);
        for split in [train, valid, test] {
            for t in &split {
                total.update(format!("{}\t{}\t{}\n", t.source, t.relation, t.target).as_bytes());
            }
            total.update(b"--\n");
            stores.push(add_reciprocals(&TripleStore::new(split, relations), &vocab)?);
        }
        let test = stores.pop().unwrap();
        let valid = stores.pop().unwrap();
        let train = stores.pop().unwrap();
        let filter = build_filter_index(&train, &valid, &test);
        Ok(Dataset {
            name: name.to_string(),
            vocab,
            train,
            valid,
            test,
            filter,
            checksum: hex(&total.finalize()),
            file_checksums: Vec::new(),
        })
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            entities: self.vocab.entity_count(),
            relations: self.vocab.relation_count(),
            train: self.train.originals().count(),
            valid: self.valid.originals().count(),
            test: self.test.originals().count(),
        }
    }

    pub fn split(&self, name: &str) -> Option<&TripleStore> {
        match name {
            "train" => Some(&self.train),
            "valid" | "validation" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes vocabulary dumps, id-encoded augmented splits and the filter index.
    pub fn write_processed(&self, out: &Path) -> Result<()> {
        self.vocab.dump(out)?;
        for (split, store) in SPLITS.iter().zip([&self.train, &self.valid, &self.test]) {
            let path = out.join(format!("{split}.ids.tsv"));
            let mut buf = Vec::new();
            for t in store.triples() {
                writeln!(buf, "{}\t{}\t{}", t.source, t.relation, t.target).expect("write to Vec");
            }
            fs::write(&path, buf).map_err(|e| KgeError::io(&path, e))?;
        }
        self.filter.dump(&out.join("filter.tsv"))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
