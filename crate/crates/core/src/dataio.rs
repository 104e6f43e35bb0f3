//! Interaction and item-relation ingestion, graph construction, the
//! leave-one-out split, negative samplers and dataset persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CkmlError, Result};
use crate::numerics::Csr;
use crate::synthetic::GroundTruth;

/// Candidate list length besides the held-out positive.
pub const EVAL_NEGATIVES: usize = 99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub behavior: usize,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemRelationRecord {
    pub item_a: usize,
    pub item_b: usize,
    pub relation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub users: usize,
    pub items: usize,
    pub behaviors: usize,
    pub relations: usize,
}

/// Bipartite user–item graph of one behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorGraph {
    pub behavior: usize,
    /// Unique (user, item) pairs sorted by user then item.
    pub edges: Vec<(usize, usize)>,
    /// Latest timestamp of each edge, parallel to `edges`.
    pub timestamps: Vec<u64>,
    pub user_adjacency: Csr,
    pub item_adjacency: Csr,
}

impl BehaviorGraph {
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_adjacency.n_rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_adjacency.n_rows()
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        self.user_adjacency.contains(user, item)
    }

    pub fn items_of(&self, user: usize) -> &[usize] {
        self.user_adjacency.row(user)
    }

    fn from_edges(behavior: usize, users: usize, items: usize, mut edges: Vec<((usize, usize), u64)>) -> Self {
        edges.sort_unstable();
        let mut unique: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        let mut timestamps: Vec<u64> = Vec::with_capacity(edges.len());
        for (pair, ts) in edges {
            if unique.last() == Some(&pair) {
                // sorted ascending, so the later duplicate has the larger timestamp
                *timestamps.last_mut().expect("parallel") = ts;
            } else {
                unique.push(pair);
                timestamps.push(ts);
            }
        }
        let user_adjacency = Csr::from_pairs(users, items, &unique).expect("validated ids");
        let item_adjacency = user_adjacency.transpose();
        BehaviorGraph {
            behavior,
            edges: unique,
            timestamps,
            user_adjacency,
            item_adjacency,
        }
    }
}

/// Undirected item–item graph of one relation type.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    pub relation: usize,
    pub adjacency: Csr,
    pub degrees: Vec<usize>,
}

impl RelationGraph {
    /// Each undirected edge once, as (a, b) with a ≤ b.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.adjacency.n_rows() {
            for &b in self.adjacency.row(a) {
                if a <= b {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestPositive {
    pub item: usize,
    pub timestamp: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dims: Dims,
    pub target_behavior: usize,
    pub behavior_graphs: Vec<BehaviorGraph>,
    pub relation_graphs: Vec<RelationGraph>,
    pub test_positive: BTreeMap<usize, TestPositive>,
    pub eval_negatives: BTreeMap<usize, Vec<usize>>,
    pub rng_seed: u64,
    pub ground_truth: Option<GroundTruth>,
}

fn parse_field(field: Option<&str>, what: &str, line: usize) -> Result<u64> {
    let raw = field.ok_or_else(|| CkmlError::data_at(format!("missing {what} field"), line))?;
    raw.trim()
        .parse::<u64>()
        .map_err(|_| CkmlError::data_at(format!("malformed {what} '{raw}'"), line))
}

fn check_range(value: u64, bound: usize, what: &str, line: usize) -> Result<usize> {
    if value as usize >= bound {
        return Err(CkmlError::data_at(format!("{what} id out of range"), line));
    }
    Ok(value as usize)
}

fn content_lines(reader: impl BufRead) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    reader.lines().enumerate().map(|(i, l)| (i + 1, l))
}

/// Parses `user item behavior [timestamp]` lines; `#` lines and blank lines
/// are skipped.
pub fn parse_interactions(reader: impl BufRead, dims: &Dims) -> Result<Vec<InteractionRecord>> {
    let mut out = Vec::new();
    for (line_no, line) in content_lines(reader) {
        let line = line.map_err(|e| CkmlError::data_at(e.to_string(), line_no))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let user = parse_field(fields.next(), "user", line_no)?;
        let item = parse_field(fields.next(), "item", line_no)?;
        let behavior = parse_field(fields.next(), "behavior", line_no)?;
        let timestamp = match fields.next() {
            Some(f) => parse_field(Some(f), "timestamp", line_no)?,
            None => 0,
        };
        if fields.next().is_some() {
            return Err(CkmlError::data_at("too many fields", line_no));
        }
        out.push(InteractionRecord {
            user: check_range(user, dims.users, "user", line_no)?,
            item: check_range(item, dims.items, "item", line_no)?,
            behavior: check_range(behavior, dims.behaviors, "behavior", line_no)?,
            timestamp,
        });
    }
    Ok(out)
}

pub fn load_interactions(path: &Path, dims: &Dims) -> Result<Vec<InteractionRecord>> {
    let file = fs::File::open(path).map_err(|e| CkmlError::io(path, e))?;
    parse_interactions(BufReader::new(file), dims)
}

pub fn parse_relations(reader: impl BufRead, dims: &Dims) -> Result<Vec<ItemRelationRecord>> {
    let mut out = Vec::new();
    for (line_no, line) in content_lines(reader) {
        let line = line.map_err(|e| CkmlError::data_at(e.to_string(), line_no))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let a = parse_field(fields.next(), "item_a", line_no)?;
        let b = parse_field(fields.next(), "item_b", line_no)?;
        let r = parse_field(fields.next(), "relation", line_no)?;
        if fields.next().is_some() {
            return Err(CkmlError::data_at("too many fields", line_no));
        }
        out.push(ItemRelationRecord {
            item_a: check_range(a, dims.items, "item", line_no)?,
            item_b: check_range(b, dims.items, "item", line_no)?,
            relation: check_range(r, dims.relations, "relation", line_no)?,
        });
    }
    Ok(out)
}

pub fn load_relations(path: &Path, dims: &Dims) -> Result<Vec<ItemRelationRecord>> {
    let file = fs::File::open(path).map_err(|e| CkmlError::io(path, e))?;
    parse_relations(BufReader::new(file), dims)
}

pub fn build_behavior_graphs(
    records: &[InteractionRecord],
    users: usize,
    items: usize,
    behaviors: usize,
) -> Vec<BehaviorGraph> {
    let mut per_behavior: Vec<Vec<((usize, usize), u64)>> = vec![Vec::new(); behaviors];
    for r in records {
        per_behavior[r.behavior].push(((r.user, r.item), r.timestamp));
    }
    per_behavior
        .into_iter()
        .enumerate()
        .map(|(k, edges)| BehaviorGraph::from_edges(k, users, items, edges))
        .collect()
}

pub fn build_relation_graphs(
    records: &[ItemRelationRecord],
    items: usize,
    relations: usize,
    allow_self_loops: bool,
) -> Result<Vec<RelationGraph>> {
    let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); relations];
    for rec in records {
        if rec.item_a == rec.item_b && !allow_self_loops {
            return Err(CkmlError::data(format!(
                "self-loop on item {} in relation {}",
                rec.item_a, rec.relation
            )));
        }
        if rec.relation >= relations || rec.item_a >= items || rec.item_b >= items {
            return Err(CkmlError::data("relation record out of range"));
        }
        pairs[rec.relation].push((rec.item_a, rec.item_b));
        pairs[rec.relation].push((rec.item_b, rec.item_a));
    }
    pairs
        .into_iter()
        .enumerate()
        .map(|(r, p)| {
            let adjacency = Csr::from_pairs(items, items, &p)?;
            let degrees = adjacency.degrees();
            Ok(RelationGraph {
                relation: r,
                adjacency,
                degrees,
            })
        })
        .collect()
}

/// Holds out each user's latest target-behavior interaction (greatest
/// timestamp, then greatest item id). Every record of the held-out
/// (user, item) pair under the target behavior leaves the training set.
pub fn leave_one_out_split(
    records: &[InteractionRecord],
    target_behavior: usize,
) -> (Vec<InteractionRecord>, BTreeMap<usize, TestPositive>) {
    let mut latest: BTreeMap<usize, (u64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.behavior == target_behavior) {
        let key = (r.timestamp, r.item);
        latest
            .entry(r.user)
            .and_modify(|best| {
                if key > *best {
                    *best = key;
                }
            })
            .or_insert(key);
    }
    let train = records
        .iter()
        .filter(|r| {
            !(r.behavior == target_behavior
                && latest.get(&r.user).is_some_and(|&(_, item)| item == r.item))
        })
        .copied()
        .collect();
    let test = latest
        .into_iter()
        .map(|(u, (timestamp, item))| (u, TestPositive { item, timestamp }))
        .collect();
    (train, test)
}

/// 99 distinct negatives per evaluated user, excluding every item the user
/// touched under the target behavior (training edges and the held-out item).
pub fn sample_eval_negatives(
    target_graph: &BehaviorGraph,
    test_positive: &BTreeMap<usize, TestPositive>,
    n_items: usize,
    seed: u64,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (&user, pos) in test_positive {
        let history: BTreeSet<usize> = target_graph
            .items_of(user)
            .iter()
            .copied()
            .chain(std::iter::once(pos.item))
            .collect();
        let mut pool: Vec<usize> = (0..n_items).filter(|i| !history.contains(i)).collect();
        if pool.len() < EVAL_NEGATIVES {
            return Err(CkmlError::data(format!(
                "user {user}: only {} candidate negatives, need {EVAL_NEGATIVES}",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        pool.truncate(EVAL_NEGATIVES);
        out.insert(user, pool);
    }
    Ok(out)
}

/// Draws a negative for `user` uniformly from items outside its positives
/// in `graph`; `None` when the user has interacted with every item.
pub fn sample_negative(graph: &BehaviorGraph, user: usize, n_items: usize, rng: &mut impl Rng) -> Option<usize> {
    let positives = graph.items_of(user);
    let free = n_items - positives.len();
    if free == 0 {
        return None;
    }
    // rank among the non-positive items, shifted past each (sorted) positive
    let mut item = rng.gen_range(0..free);
    for &p in positives {
        if p <= item {
            item += 1;
        } else {
            break;
        }
    }
    Some(item)
}

/// `count` triples with the positive edge drawn uniformly over edges.
pub fn sample_training_triples(
    graph: &BehaviorGraph,
    count: usize,
    seed: u64,
) -> Result<Vec<(usize, usize, usize)>> {
    if graph.edges.is_empty() {
        return Err(CkmlError::data(format!("behavior {} graph is empty", graph.behavior)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut skipped = 0usize;
    for _ in 0..count {
        let (u, p) = graph.edges[rng.gen_range(0..graph.edges.len())];
        match sample_negative(graph, u, graph.n_items(), &mut rng) {
            Some(q) => out.push((u, p, q)),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("behavior {}: skipped {skipped} triples for saturated users", graph.behavior);
    }
    Ok(out)
}

/// One triple per edge in shuffled order, as used by each training epoch.
pub fn epoch_triples(graph: &BehaviorGraph, rng: &mut impl Rng) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(graph.edges.len());
    for &(u, p) in &graph.edges {
        if let Some(q) = sample_negative(graph, u, graph.n_items(), rng) {
            out.push((u, p, q));
        }
    }
    out.shuffle(rng);
    out
}

/// One (anchor, related, unrelated) triple per directed relation edge.
pub fn relation_triples(graph: &RelationGraph, rng: &mut impl Rng) -> Vec<(usize, usize, usize)> {
    let n = graph.adjacency.n_rows();
    let mut out = Vec::new();
    for a in 0..n {
        let related = graph.adjacency.row(a);
        let free = n - related.len() - usize::from(!graph.adjacency.contains(a, a));
        if free == 0 {
            continue;
        }
        for &p in related {
            let q = loop {
                let c = rng.gen_range(0..n);
                if c != a && !graph.adjacency.contains(a, c) {
                    break c;
                }
            };
            out.push((a, p, q));
        }
    }
    out.shuffle(rng);
    out
}

impl Dataset {
    /// Splits, builds graphs and (optionally) draws evaluation negatives.
    pub fn from_records(
        dims: Dims,
        interactions: &[InteractionRecord],
        relations: &[ItemRelationRecord],
        target_behavior: usize,
        seed: u64,
        with_eval_negatives: bool,
    ) -> Result<Dataset> {
        if target_behavior >= dims.behaviors {
            return Err(CkmlError::data(format!(
                "target behavior {target_behavior} outside {} behaviors",
                dims.behaviors
            )));
        }
        let (train, test_positive) = leave_one_out_split(interactions, target_behavior);
        let behavior_graphs = build_behavior_graphs(&train, dims.users, dims.items, dims.behaviors);
        let relation_graphs = build_relation_graphs(relations, dims.items, dims.relations, false)?;
        let eval_negatives = if with_eval_negatives {
            sample_eval_negatives(&behavior_graphs[target_behavior], &test_positive, dims.items, seed)?
        } else {
            BTreeMap::new()
        };
        Ok(Dataset {
            dims,
            target_behavior,
            behavior_graphs,
            relation_graphs,
            test_positive,
            eval_negatives,
            rng_seed: seed,
            ground_truth: None,
        })
    }

    pub fn target_graph(&self) -> &BehaviorGraph {
        &self.behavior_graphs[self.target_behavior]
    }

    /// All interactions including held-out positives, in canonical order.
    pub fn interaction_records(&self) -> Vec<InteractionRecord> {
        let mut out = Vec::new();
        for g in &self.behavior_graphs {
            for (&(user, item), &timestamp) in g.edges.iter().zip(&g.timestamps) {
                out.push(InteractionRecord { user, item, behavior: g.behavior, timestamp });
            }
        }
        for (&user, pos) in &self.test_positive {
            out.push(InteractionRecord {
                user,
                item: pos.item,
                behavior: self.target_behavior,
                timestamp: pos.timestamp,
            });
        }
        out.sort_by_key(|r| (r.user, r.behavior, r.timestamp, r.item));
        out
    }

    pub fn relation_records(&self) -> Vec<ItemRelationRecord> {
        self.relation_graphs
            .iter()
            .flat_map(|g| {
                g.undirected_edges()
                    .into_iter()
                    .map(move |(item_a, item_b)| ItemRelationRecord { item_a, item_b, relation: g.relation })
            })
            .collect()
    }

    /// SHA-256 over the structural content (dims, graphs, split, negatives, seed).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |v: u64| h.update(v.to_le_bytes());
        let d = self.dims;
        for v in [d.users, d.items, d.behaviors, d.relations, self.target_behavior] {
            put(v as u64);
        }
        put(self.rng_seed);
        for g in &self.behavior_graphs {
            put(g.edges.len() as u64);
            for (&(u, i), &t) in g.edges.iter().zip(&g.timestamps) {
                put(u as u64);
                put(i as u64);
                put(t);
            }
        }
        for g in &self.relation_graphs {
            let e = g.undirected_edges();
            put(e.len() as u64);
            for (a, b) in e {
                put(a as u64);
                put(b as u64);
            }
        }
        put(self.test_positive.len() as u64);
        for (&u, p) in &self.test_positive {
            put(u as u64);
            put(p.item as u64);
            put(p.timestamp);
        }
        put(self.eval_negatives.len() as u64);
        for (&u, negs) in &self.eval_negatives {
            put(u as u64);
            for &n in negs {
                put(n as u64);
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes interactions, relations, optional ground truth and a manifest
    /// into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| CkmlError::io(dir, e))?;
        let mut inter = String::from("# user\titem\tbehavior\ttimestamp\n");
        for r in self.interaction_records() {
            inter.push_str(&format!("{}\t{}\t{}\t{}\n", r.user, r.item, r.behavior, r.timestamp));
        }
        write_file(&dir.join("interactions.tsv"), &inter)?;
        let mut rel = String::from("# item_a\titem_b\trelation\n");
        for r in self.relation_records() {
            rel.push_str(&format!("{}\t{}\t{}\n", r.item_a, r.item_b, r.relation));
        }
        write_file(&dir.join("relations.tsv"), &rel)?;
        let mut manifest = Manifest {
            users: self.dims.users,
            items: self.dims.items,
            behaviors: self.dims.behaviors,
            relations: self.dims.relations,
            target_behavior: self.target_behavior,
            interactions: PathBuf::from("interactions.tsv"),
            relations_file: PathBuf::from("relations.tsv"),
            seed: self.rng_seed,
            eval_negatives: !self.eval_negatives.is_empty(),
            ground_truth: None,
        };
        if let Some(gt) = &self.ground_truth {
            write_file(&dir.join("ground_truth.tsv"), &gt.to_tsv())?;
            manifest.ground_truth = Some(PathBuf::from("ground_truth.tsv"));
        }
        let path = dir.join("manifest.txt");
        write_file(&path, &manifest.to_text())?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let manifest = Manifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let dims = Dims {
            users: manifest.users,
            items: manifest.items,
            behaviors: manifest.behaviors,
            relations: manifest.relations,
        };
        let interactions = load_interactions(&base.join(&manifest.interactions), &dims)?;
        let relations = load_relations(&base.join(&manifest.relations_file), &dims)?;
        let mut ds = Dataset::from_records(
            dims,
            &interactions,
            &relations,
            manifest.target_behavior,
            manifest.seed,
            manifest.eval_negatives,
        )?;
        if let Some(gt) = &manifest.ground_truth {
            let path = base.join(gt);
            let text = fs::read_to_string(&path).map_err(|e| CkmlError::io(&path, e))?;
            ds.ground_truth = Some(GroundTruth::from_tsv(&text)?);
        }
        Ok(ds)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CkmlError::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| CkmlError::io(path, e))
}

/// `key = value` header describing a dataset on disk. Paths are relative to
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub users: usize,
    pub items: usize,
    pub behaviors: usize,
    pub relations: usize,
    pub target_behavior: usize,
    pub interactions: PathBuf,
    pub relations_file: PathBuf,
    pub seed: u64,
    pub eval_negatives: bool,
    pub ground_truth: Option<PathBuf>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "users = {}\nitems = {}\nbehaviors = {}\nrelations = {}\ntarget_behavior = {}\n\
             interactions = {}\nrelations_file = {}\nseed = {}\neval_negatives = {}\n",
            self.users,
            self.items,
            self.behaviors,
            self.relations,
            self.target_behavior,
            self.interactions.display(),
            self.relations_file.display(),
            self.seed,
            self.eval_negatives,
        );
        if let Some(gt) = &self.ground_truth {
            s.push_str(&format!("ground_truth = {}\n", gt.display()));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CkmlError::data_at("expected key = value", i + 1))?;
            let key = k.trim().to_string();
            if kv.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CkmlError::data_at(format!("duplicate key '{key}'"), i + 1));
            }
        }
        fn take<T: std::str::FromStr>(kv: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = kv
                .remove(key)
                .ok_or_else(|| CkmlError::data(format!("manifest missing '{key}'")))?;
            raw.parse()
                .map_err(|_| CkmlError::data(format!("manifest '{key}' has bad value '{raw}'")))
        }
        let m = Manifest {
            users: take(&mut kv, "users")?,
            items: take(&mut kv, "items")?,
            behaviors: take(&mut kv, "behaviors")?,
            relations: take(&mut kv, "relations")?,
            target_behavior: take(&mut kv, "target_behavior")?,
            interactions: take::<String>(&mut kv, "interactions")?.into(),
            relations_file: take::<String>(&mut kv, "relations_file")?.into(),
            seed: if kv.contains_key("seed") { take(&mut kv, "seed")? } else { 0 },
            eval_negatives: if kv.contains_key("eval_negatives") {
                take(&mut kv, "eval_negatives")?
            } else {
                true
            },
            ground_truth: kv.remove("ground_truth").map(PathBuf::from),
        };
        if let Some(k) = kv.keys().next() {
            return Err(CkmlError::data(format!("unknown manifest key '{k}'")));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| CkmlError::io(path, e))?;
        Manifest::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(users: usize, items: usize, behaviors: usize) -> Dims {
        Dims { users, items, behaviors, relations: 1 }
    }

    fn rec(user: usize, item: usize, behavior: usize, timestamp: u64) -> InteractionRecord {
        InteractionRecord { user, item, behavior, timestamp }
    }

    #[test]
    fn parse_empty_and_single() {
        assert!(parse_interactions("".as_bytes(), &dims(1, 1, 1)).unwrap().is_empty());
        let r = parse_interactions("0\t0\t0\t100\n".as_bytes(), &dims(1, 1, 1)).unwrap();
        assert_eq!(r, vec![rec(0, 0, 0, 100)]);
    }

    #[test]
    fn parse_reports_out_of_range_with_line() {
        let err = parse_interactions("5\t0\t0\t0\n".as_bytes(), &dims(3, 1, 1)).unwrap_err();
        assert_eq!(err.to_string(), "user id out of range at line 1");
    }

    #[test]
    fn parse_skips_comments_and_reports_malformed() {
        let text = "# header\n0\t0\t0\t1\n0\tx\t0\t1\n";
        let err = parse_interactions(text.as_bytes(), &dims(1, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let ok = parse_interactions("# c\n\n0\t0\t0\n".as_bytes(), &dims(1, 1, 1)).unwrap();
        assert_eq!(ok, vec![rec(0, 0, 0, 0)]);
    }

    #[test]
    fn behavior_graphs_empty_and_dedup() {
        let gs = build_behavior_graphs(&[], 2, 2, 2);
        assert_eq!(gs.len(), 2);
        assert!(gs.iter().all(|g| g.edge_count() == 0));

        let gs = build_behavior_graphs(&[rec(0, 1, 0, 3), rec(0, 1, 0, 9)], 1, 2, 1);
        assert_eq!(gs[0].edge_count(), 1);
        assert_eq!(gs[0].user_adjacency.degree(0), 1);
        assert_eq!(gs[0].timestamps, vec![9]);
    }

    #[test]
    fn behavior_graphs_match_brute_force() {
        let records = [rec(0, 0, 0, 0), rec(1, 0, 0, 0), rec(0, 1, 1, 0)];
        let gs = build_behavior_graphs(&records, 2, 2, 2);
        assert_eq!(gs[0].edge_count(), 2);
        assert_eq!(gs[0].item_adjacency.degree(0), 2);
        assert_eq!(gs[1].edge_count(), 1);
        // brute-force dense adjacency
        for g in &gs {
            for u in 0..2 {
                for i in 0..2 {
                    let expected = records.iter().any(|r| r.behavior == g.behavior && r.user == u && r.item == i);
                    assert_eq!(g.has_edge(u, i), expected);
                    assert_eq!(g.item_adjacency.contains(i, u), expected);
                }
            }
        }
    }

    #[test]
    fn relation_graphs_symmetrize_and_dedup() {
        let r = |a, b| ItemRelationRecord { item_a: a, item_b: b, relation: 0 };
        let gs = build_relation_graphs(&[r(0, 1)], 3, 1, false).unwrap();
        assert!(gs[0].adjacency.contains(0, 1) && gs[0].adjacency.contains(1, 0));
        let gs = build_relation_graphs(&[r(0, 1), r(1, 0)], 2, 1, false).unwrap();
        assert_eq!(gs[0].degrees, vec![1, 1]);
        assert_eq!(gs[0].undirected_edges(), vec![(0, 1)]);
        let gs = build_relation_graphs(&[], 2, 2, false).unwrap();
        assert!(gs.iter().all(|g| g.adjacency.nnz() == 0));
        assert!(build_relation_graphs(&[r(1, 1)], 2, 1, false).is_err());
        assert!(build_relation_graphs(&[r(1, 1)], 2, 1, true).is_ok());
    }

    #[test]
    fn split_takes_latest_then_largest_item() {
        let (train, test) = leave_one_out_split(&[rec(0, 3, 1, 1), rec(0, 4, 1, 2)], 1);
        assert_eq!(test[&0].item, 4);
        assert_eq!(train, vec![rec(0, 3, 1, 1)]);

        let (train, test) = leave_one_out_split(&[rec(0, 5, 0, 7)], 0);
        assert_eq!(test[&0].item, 5);
        assert!(train.is_empty());

        let (_, test) = leave_one_out_split(&[rec(0, 2, 0, 5), rec(0, 7, 0, 5)], 0);
        assert_eq!(test[&0].item, 7);
    }

    #[test]
    fn split_excludes_users_without_target() {
        let (train, test) = leave_one_out_split(&[rec(0, 1, 0, 1), rec(1, 2, 1, 1)], 1);
        assert!(!test.contains_key(&0));
        assert_eq!(train.len(), 1);
    }

    #[test]
    fn eval_negatives_forced_set() {
        let graphs = build_behavior_graphs(&[], 1, 101, 1);
        let test: BTreeMap<usize, TestPositive> = [(0, TestPositive { item: 50, timestamp: 0 })].into();
        let a = sample_eval_negatives(&graphs[0], &test, 101, 7).unwrap();
        let b = sample_eval_negatives(&graphs[0], &test, 101, 7).unwrap();
        assert_eq!(a, b);
        let mut set = a[&0].clone();
        set.sort_unstable();
        let expected: Vec<usize> = (0..101).filter(|&i| i != 50).collect();
        assert_eq!(set.len(), 99);
        // 100 free items, 99 drawn: all distinct and all from the pool
        assert!(set.iter().all(|i| expected.contains(i)));
        set.dedup();
        assert_eq!(set.len(), 99);
    }

    #[test]
    fn eval_negatives_insufficient_pool() {
        let graphs = build_behavior_graphs(&[], 1, 99, 1);
        let test: BTreeMap<usize, TestPositive> = [(0, TestPositive { item: 0, timestamp: 0 })].into();
        assert!(sample_eval_negatives(&graphs[0], &test, 99, 1).is_err());
    }

    #[test]
    fn eval_negatives_vary_with_seed_and_respect_history() {
        let records: Vec<_> = (0..30).map(|i| rec(0, i * 3, 0, i as u64)).collect();
        let (train, test) = leave_one_out_split(&records, 0);
        let graphs = build_behavior_graphs(&train, 1, 1000, 1);
        let a = sample_eval_negatives(&graphs[0], &test, 1000, 11).unwrap();
        let b = sample_eval_negatives(&graphs[0], &test, 1000, 12).unwrap();
        assert_ne!(a, b);
        for negs in [&a[&0], &b[&0]] {
            for &n in negs {
                assert!(!records.iter().any(|r| r.item == n));
            }
        }
    }

    #[test]
    fn training_triples_forced_negative() {
        let graphs = build_behavior_graphs(&[rec(0, 0, 0, 0)], 1, 2, 1);
        let triples = sample_training_triples(&graphs[0], 50, 3).unwrap();
        assert!(triples.iter().all(|&t| t == (0, 0, 1)));
        let empty = build_behavior_graphs(&[], 1, 2, 1);
        assert!(sample_training_triples(&empty[0], 5, 3).is_err());
    }

    #[test]
    fn training_triples_skip_saturated_users() {
        let graphs = build_behavior_graphs(&[rec(0, 0, 0, 0), rec(0, 1, 0, 0), rec(1, 0, 0, 0)], 2, 2, 1);
        let triples = sample_training_triples(&graphs[0], 200, 5).unwrap();
        assert!(!triples.is_empty());
        assert!(triples.iter().all(|&(u, p, q)| u == 1 && p == 0 && q == 1));
    }

    #[test]
    fn positive_frequencies_are_uniform_over_edges() {
        // chi-square of positive-edge counts against the uniform law
        let mut records = Vec::new();
        for u in 0..10 {
            for i in 0..(u % 4 + 1) {
                records.push(rec(u, i * 2 + u % 2, 0, 0));
            }
        }
        let g = &build_behavior_graphs(&records, 10, 20, 1)[0];
        let n = 100_000;
        let triples = sample_training_triples(g, n, 99).unwrap();
        let mut counts = vec![0usize; g.edge_count()];
        for &(u, p, q) in &triples {
            assert!(g.has_edge(u, p));
            assert!(!g.has_edge(u, q));
            let pos = g.edges.binary_search(&(u, p)).unwrap();
            counts[pos] += 1;
        }
        let expected = n as f64 / g.edge_count() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let dof = (g.edge_count() - 1) as f64;
        assert!(chi2 < dof + 3.0 * (2.0 * dof).sqrt(), "chi2 {chi2} dof {dof}");
    }

    #[test]
    fn manifest_round_trip_and_unknown_key() {
        let m = Manifest {
            users: 3,
            items: 4,
            behaviors: 2,
            relations: 1,
            target_behavior: 1,
            interactions: "a.tsv".into(),
            relations_file: "b.tsv".into(),
            seed: 9,
            eval_negatives: false,
            ground_truth: Some("gt.tsv".into()),
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        let bad = format!("{}colour = red\n", m.to_text());
        assert!(Manifest::parse(&bad).is_err());
    }

    use proptest::prelude::*;

    fn records_strategy() -> impl Strategy<Value = Vec<InteractionRecord>> {
        prop::collection::vec((0usize..5, 0usize..7, 0usize..2, 0u64..20), 0..40)
            .prop_map(|v| v.into_iter().map(|(u, i, k, t)| rec(u, i, k, t)).collect())
    }

    proptest! {
        #[test]
        fn adjacency_transposes_agree(records in records_strategy()) {
            for g in build_behavior_graphs(&records, 5, 7, 2) {
                prop_assert_eq!(g.user_adjacency.transpose(), g.item_adjacency.clone());
                let su: usize = g.user_adjacency.degrees().iter().sum();
                let si: usize = g.item_adjacency.degrees().iter().sum();
                prop_assert_eq!(su, g.edge_count());
                prop_assert_eq!(si, g.edge_count());
            }
        }

        #[test]
        fn split_then_reinsert_restores_target_edges(records in records_strategy()) {
            let (train, test) = leave_one_out_split(&records, 1);
            let mut restored = train.clone();
            for (&u, p) in &test {
                restored.push(rec(u, p.item, 1, p.timestamp));
                prop_assert!(!train.iter().any(|r| r.behavior == 1 && r.user == u && r.item == p.item));
            }
            let a = build_behavior_graphs(&records, 5, 7, 2);
            let b = build_behavior_graphs(&restored, 5, 7, 2);
            prop_assert_eq!(&a[1].edges, &b[1].edges);
            prop_assert_eq!(&a[0].edges, &b[0].edges);
        }

        #[test]
        fn sampled_negatives_never_positive(records in records_strategy(), seed in 0u64..1000) {
            let gs = build_behavior_graphs(&records, 5, 7, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for g in &gs {
                for (u, p, q) in epoch_triples(g, &mut rng) {
                    prop_assert!(g.has_edge(u, p));
                    prop_assert!(!g.has_edge(u, q));
                }
            }
        }
    }
}
