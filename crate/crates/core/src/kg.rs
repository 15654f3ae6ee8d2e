//! Triple storage, split families and the relation-indexed adjacency used by
//! the symbolic engine.
//!
//! Triples are kept exactly as given on disk. No inverse relations are
//! synthesized.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitLabel {
    Train,
    TrainValid,
    Full,
}

impl SplitLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::Train => "train",
            SplitLabel::TrainValid => "train+valid",
            SplitLabel::Full => "full",
        }
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitLabel::Train),
            "train+valid" => Ok(SplitLabel::TrainValid),
            "full" => Ok(SplitLabel::Full),
            other => Err(Error::Config(format!("unknown split label {other:?}"))),
        }
    }
}

/// A validated, deduplicated triple set over a fixed vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    num_entities: usize,
    num_relations: usize,
    /// Sorted ascending, no duplicates.
    triples: Vec<Triple>,
    split: SplitLabel,
}

impl KnowledgeGraph {
    pub fn new(
        num_entities: usize,
        num_relations: usize,
        triples: impl IntoIterator<Item = Triple>,
        split: SplitLabel,
    ) -> Result<Self> {
        let mut triples: Vec<Triple> = triples.into_iter().collect();
        for t in &triples {
            check_range("entity", t.head, num_entities)?;
            check_range("entity", t.tail, num_entities)?;
            check_range("relation", t.relation, num_relations)?;
        }
        triples.sort_unstable();
        triples.dedup();
        Ok(KnowledgeGraph {
            num_entities,
            num_relations,
            triples,
            split,
        })
    }

    pub fn empty(num_entities: usize, num_relations: usize, split: SplitLabel) -> Self {
        KnowledgeGraph {
            num_entities,
            num_relations,
            triples: Vec::new(),
            split,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
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

    pub fn split(&self) -> SplitLabel {
        self.split
    }

    pub fn with_split(mut self, split: SplitLabel) -> Self {
        self.split = split;
        self
    }

    pub fn contains(&self, head: usize, relation: usize, tail: usize) -> bool {
        self.triples
            .binary_search(&Triple::new(head, relation, tail))
            .is_ok()
    }

    pub fn is_subset_of(&self, other: &KnowledgeGraph) -> bool {
        self.triples.iter().all(|t| other.triples.binary_search(t).is_ok())
    }

    /// Writes the triple file plus a sibling `.manifest` (key=value).
    pub fn save(&self, triple_file: &Path) -> Result<()> {
        let file = fs::File::create(triple_file).map_err(|e| Error::io(triple_file, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.triples {
            writeln!(w, "{}\t{}\t{}", t.head, t.relation, t.tail)
                .map_err(|e| Error::io(triple_file, e))?;
        }
        w.flush().map_err(|e| Error::io(triple_file, e))?;

        let manifest = manifest_path(triple_file);
        let body = format!(
            "num_entities={}\nnum_relations={}\nsplit_label={}\nnum_triples={}\n",
            self.num_entities,
            self.num_relations,
            self.split,
            self.triples.len()
        );
        fs::write(&manifest, body).map_err(|e| Error::io(&manifest, e))
    }

    /// Reads a triple file previously written by [`KnowledgeGraph::save`].
    pub fn load(triple_file: &Path) -> Result<Self> {
        let manifest = manifest_path(triple_file);
        let kv = read_key_values(&manifest)?;
        let get = |key: &str| {
            kv.get(key).ok_or_else(|| Error::Parse {
                path: manifest.clone(),
                line: 0,
                msg: format!("missing key {key}"),
            })
        };
        let parse_count = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Parse {
                path: manifest.clone(),
                line: 0,
                msg: format!("bad integer for {key}"),
            })
        };
        let num_entities = parse_count("num_entities")?;
        let num_relations = parse_count("num_relations")?;
        let split: SplitLabel = get("split_label")?.parse()?;
        let triples = read_triples(triple_file, num_entities, num_relations)?;
        KnowledgeGraph::new(num_entities, num_relations, triples, split)
    }
}

fn check_range(what: &'static str, id: usize, count: usize) -> Result<()> {
    if id >= count {
        return Err(Error::OutOfRange { what, id, count });
    }
    Ok(())
}

pub fn manifest_path(triple_file: &Path) -> PathBuf {
    let mut name = triple_file
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest");
    triple_file.with_file_name(name)
}

pub(crate) fn read_key_values(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Reads a `name<TAB>id` map file. Ids must cover `0..n` exactly once.
pub fn read_name_map(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let (name, id) = line
            .rsplit_once('\t')
            .ok_or_else(|| parse_err("expected name<TAB>id"))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| parse_err("id is not a non-negative integer"))?;
        pairs.push((id, name.to_string(), i + 1));
    }
    let n = pairs.len();
    let mut names = vec![None; n];
    for (id, name, line) in pairs {
        if id >= n {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("id {id} exceeds entry count {n}"),
            });
        }
        if names[id].replace(name).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("duplicate id {id}"),
            });
        }
    }
    Ok(names.into_iter().map(|n| n.unwrap_or_default()).collect())
}

pub fn write_name_map(path: &Path, names: &[String]) -> Result<()> {
    let mut body = String::new();
    for (id, name) in names.iter().enumerate() {
        body.push_str(&format!("{name}\t{id}\n"));
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Reads `h<TAB>r<TAB>t` lines, range-checking every id.
pub fn read_triples(path: &Path, num_entities: usize, num_relations: usize) -> Result<Vec<Triple>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let mut ids = [0usize; 3];
        for (slot, field) in ids.iter_mut().zip(&fields) {
            *slot = field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("not a non-negative integer: {field:?}")))?;
        }
        let [h, r, t] = ids;
        for (what, id, count) in [
            ("entity", h, num_entities),
            ("relation", r, num_relations),
            ("entity", t, num_entities),
        ] {
            if id >= count {
                return Err(parse_err(format!("{what} id {id} out of range (count {count})")));
            }
        }
        out.push(Triple::new(h, r, t));
    }
    Ok(out)
}

/// Loads a triple file with vocabulary sizes taken from the two map files.
pub fn load_kg(
    triple_file: &Path,
    entity_map: &Path,
    relation_map: &Path,
    split: SplitLabel,
) -> Result<KnowledgeGraph> {
    let num_entities = read_name_map(entity_map)?.len();
    let num_relations = read_name_map(relation_map)?.len();
    let triples = read_triples(triple_file, num_entities, num_relations)?;
    KnowledgeGraph::new(num_entities, num_relations, triples, split)
}

/// Union of several graphs over the same vocabulary.
pub fn merge_graphs(parts: &[&KnowledgeGraph], split: SplitLabel) -> Result<KnowledgeGraph> {
    let first = parts
        .first()
        .ok_or_else(|| Error::VocabMismatch("nothing to merge".into()))?;
    for p in parts {
        if p.num_entities != first.num_entities || p.num_relations != first.num_relations {
            return Err(Error::VocabMismatch(format!(
                "({}, {}) vs ({}, {})",
                first.num_entities, first.num_relations, p.num_entities, p.num_relations
            )));
        }
    }
    KnowledgeGraph::new(
        first.num_entities,
        first.num_relations,
        parts.iter().flat_map(|p| p.triples.iter().copied()),
        split,
    )
}

/// Train / train+valid / full graphs sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct SplitFamily {
    pub train: KnowledgeGraph,
    pub train_valid: KnowledgeGraph,
    pub full: KnowledgeGraph,
}

impl SplitFamily {
    /// Builds the cumulative family from the three disjoint edge sets.
    pub fn from_parts(
        train: KnowledgeGraph,
        valid: &KnowledgeGraph,
        test: &KnowledgeGraph,
    ) -> Result<Self> {
        let train = train.with_split(SplitLabel::Train);
        let train_valid = merge_graphs(&[&train, valid], SplitLabel::TrainValid)?;
        let full = merge_graphs(&[&train_valid, test], SplitLabel::Full)?;
        Ok(SplitFamily {
            train,
            train_valid,
            full,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.train.is_subset_of(&self.train_valid) || !self.train_valid.is_subset_of(&self.full) {
            return Err(Error::VocabMismatch(
                "split family is not nested (train ⊆ train+valid ⊆ full)".into(),
            ));
        }
        Ok(())
    }

    pub const FILES: [(&'static str, SplitLabel); 3] = [
        ("train.tsv", SplitLabel::Train),
        ("train_valid.tsv", SplitLabel::TrainValid),
        ("full.tsv", SplitLabel::Full),
    ];

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.save(&dir.join(Self::FILES[0].0))?;
        self.train_valid.save(&dir.join(Self::FILES[1].0))?;
        self.full.save(&dir.join(Self::FILES[2].0))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let family = SplitFamily {
            train: KnowledgeGraph::load(&dir.join(Self::FILES[0].0))?,
            train_valid: KnowledgeGraph::load(&dir.join(Self::FILES[1].0))?,
            full: KnowledgeGraph::load(&dir.join(Self::FILES[2].0))?,
        };
        family.validate()?;
        Ok(family)
    }
}

/// Relation-indexed adjacency in both directions.
#[derive(Clone, Debug, Default)]
pub struct GraphIndex {
    num_entities: usize,
    num_relations: usize,
    forward: HashMap<(usize, usize), Vec<usize>>,
    backward: HashMap<(usize, usize), Vec<usize>>,
    /// Per tail entity: sorted `(relation, head)` pairs.
    incoming: Vec<Vec<(usize, usize)>>,
}

impl GraphIndex {
    pub fn build(kg: &KnowledgeGraph) -> Self {
        let mut forward: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let mut backward: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let mut incoming = vec![Vec::new(); kg.num_entities];
        // triples are sorted by (h, r, t) so forward lists come out sorted
        for t in &kg.triples {
            forward.entry((t.head, t.relation)).or_default().push(t.tail);
            backward.entry((t.tail, t.relation)).or_default().push(t.head);
            incoming[t.tail].push((t.relation, t.head));
        }
        for list in backward.values_mut() {
            list.sort_unstable();
        }
        for list in &mut incoming {
            list.sort_unstable();
        }
        GraphIndex {
            num_entities: kg.num_entities,
            num_relations: kg.num_relations,
            forward,
            backward,
            incoming,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn tails(&self, head: usize, relation: usize) -> &[usize] {
        self.forward
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn heads(&self, tail: usize, relation: usize) -> &[usize] {
        self.backward
            .get(&(tail, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn incoming(&self, tail: usize) -> &[(usize, usize)] {
        self.incoming.get(tail).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn forward_pairs(&self) -> usize {
        self.forward.values().map(Vec::len).sum()
    }

    pub fn forward_entries(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<usize>)> {
        self.forward.iter()
    }

    pub fn backward_entries(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<usize>)> {
        self.backward.iter()
    }
}
