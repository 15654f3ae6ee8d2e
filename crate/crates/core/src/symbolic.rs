//! Exact set-algebra query answering, the independent brute-force oracle,
//! easy/hard answer splitting and random-walk query sampling.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{QueryRecord, SampledDataset};
use crate::error::{Error, Result};
use crate::kg::{GraphIndex, KnowledgeGraph, SplitFamily};
use crate::query::{
    template_expr, to_dnf, ConjunctiveGraph, DnfQuery, NodeKind, QueryExpr, QueryType,
};

/// Sorted, duplicate-free entity set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AnswerSet(Vec<usize>);

impl AnswerSet {
    pub fn from_unsorted(mut ids: Vec<usize>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        AnswerSet(ids)
    }

    pub fn singleton(id: usize) -> Self {
        AnswerSet(vec![id])
    }

    pub fn all(num_entities: usize) -> Self {
        AnswerSet((0..num_entities).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.0.clone()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &AnswerSet) -> AnswerSet {
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        let (a, b) = (&self.0, &other.0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        AnswerSet(out)
    }

    pub fn intersect(&self, other: &AnswerSet) -> AnswerSet {
        AnswerSet(self.0.iter().copied().filter(|x| other.contains(*x)).collect())
    }

    pub fn difference(&self, other: &AnswerSet) -> AnswerSet {
        AnswerSet(self.0.iter().copied().filter(|x| !other.contains(*x)).collect())
    }

    pub fn complement(&self, num_entities: usize) -> AnswerSet {
        AnswerSet((0..num_entities).filter(|x| !self.contains(*x)).collect())
    }
}

impl FromIterator<usize> for AnswerSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        AnswerSet::from_unsorted(iter.into_iter().collect())
    }
}

fn project(set: &AnswerSet, relation: usize, index: &GraphIndex) -> AnswerSet {
    set.iter()
        .flat_map(|e| index.tails(e, relation).iter().copied())
        .collect()
}

/// Evaluates one clause node by node in topological order.
pub fn answer_conjunctive(g: &ConjunctiveGraph, index: &GraphIndex) -> AnswerSet {
    let layers = crate::query::topological_layers(g).expect("valid query graph");
    let mut order: Vec<usize> = (0..g.nodes.len()).collect();
    order.sort_by_key(|&n| (layers.layer(n), n));

    let mut sets: Vec<Option<AnswerSet>> = vec![None; g.nodes.len()];
    for node in order {
        let set = match g.nodes[node].kind {
            NodeKind::Anchor(e) => AnswerSet::singleton(e),
            NodeKind::Var | NodeKind::FreeVar => {
                let mut acc: Option<AnswerSet> = None;
                for edge in g.in_edges(node) {
                    let src = sets[edge.src].as_ref().expect("topological order");
                    let mut s = project(src, edge.relation, index);
                    if edge.negated {
                        s = s.complement(index.num_entities());
                    }
                    acc = Some(match acc {
                        None => s,
                        Some(prev) => prev.intersect(&s),
                    });
                }
                acc.unwrap_or_default()
            }
        };
        sets[node] = Some(set);
    }
    let free = g.free_var().expect("valid query graph");
    sets[free].take().unwrap_or_default()
}

/// Union of the clause answers.
pub fn answer_dnf(q: &DnfQuery, index: &GraphIndex) -> AnswerSet {
    q.conjuncts
        .iter()
        .map(|g| answer_conjunctive(g, index))
        .fold(AnswerSet::default(), |acc, s| acc.union(&s))
}

/// A quantifier block of the brute-force oracle: existentially bound
/// variables, the positive literals checked inside the block, and nested
/// negated blocks (each negated edge scopes over the variables above it).
struct Block {
    vars: Vec<usize>,
    positive: Vec<(usize, usize, usize)>,
    negated: Vec<Block>,
}

/// Enumerates variable assignments directly against the triple set.
///
/// A negated edge `¬r(a, b)` negates the whole branch feeding it: its
/// variables are quantified inside the negation, which is the set-complement
/// reading the public datasets use. Independent of [`answer_conjunctive`].
pub fn brute_force_answers(g: &ConjunctiveGraph, kg: &KnowledgeGraph) -> Result<AnswerSet> {
    let violations = g.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidGraph(format!("{violations:?}")));
    }
    let nvars = g.num_variables();
    if nvars > 4 {
        return Err(Error::TooManyVariables(nvars));
    }
    let n = g.nodes.len();

    // ancestors[v] = every node with a directed path into v
    let mut ancestors = vec![HashSet::new(); n];
    let mut changed = true;
    while changed {
        changed = false;
        for e in &g.edges {
            let mut add: Vec<usize> = ancestors[e.src].iter().copied().collect();
            add.push(e.src);
            for a in add {
                changed |= ancestors[e.dst].insert(a);
            }
        }
    }

    // scope of a negated edge: its source plus the source's ancestors
    let scope = |edge: usize| -> HashSet<usize> {
        let e = &g.edges[edge];
        let mut s = ancestors[e.src].clone();
        s.insert(e.src);
        s
    };
    let negated: Vec<usize> = (0..g.edges.len()).filter(|&i| g.edges[i].negated).collect();
    let scopes: Vec<HashSet<usize>> = negated.iter().map(|&i| scope(i)).collect();

    // innermost enclosing negation for a node, if any
    let owner = |node: usize| -> Option<usize> {
        (0..negated.len())
            .filter(|&k| scopes[k].contains(&node))
            .min_by_key(|&k| scopes[k].len())
    };
    // negation k is nested in negation j if k's edge destination lies in j's scope
    let parent_of = |k: usize| owner(g.edges[negated[k]].dst);

    let is_var = |v: usize| !matches!(g.nodes[v].kind, NodeKind::Anchor(_));
    let free = g.free_var().expect("validated");

    fn build(
        block: Option<usize>,
        g: &ConjunctiveGraph,
        negated: &[usize],
        owner: &dyn Fn(usize) -> Option<usize>,
        parent_of: &dyn Fn(usize) -> Option<usize>,
        is_var: &dyn Fn(usize) -> bool,
        free: usize,
    ) -> Block {
        let vars = (0..g.nodes.len())
            .filter(|&v| is_var(v) && v != free && owner(v) == block)
            .collect();
        let mut positive: Vec<(usize, usize, usize)> = g
            .edges
            .iter()
            .filter(|e| !e.negated && owner(e.dst) == block)
            .map(|e| (e.src, e.relation, e.dst))
            .collect();
        if let Some(k) = block {
            let e = &g.edges[negated[k]];
            positive.push((e.src, e.relation, e.dst));
        }
        let nested = (0..negated.len())
            .filter(|&k| parent_of(k) == block)
            .map(|k| build(Some(k), g, negated, owner, parent_of, is_var, free))
            .collect();
        Block {
            vars,
            positive,
            negated: nested,
        }
    }
    let top = build(None, g, &negated, &owner, &parent_of, &is_var, free);

    // anchors are bound up front
    let mut assignment: Vec<Option<usize>> = g
        .nodes
        .iter()
        .map(|node| match node.kind {
            NodeKind::Anchor(e) => Some(e),
            _ => None,
        })
        .collect();

    fn satisfied(block: &Block, depth: usize, asg: &mut Vec<Option<usize>>, kg: &KnowledgeGraph) -> bool {
        if depth == block.vars.len() {
            let lits = block.positive.iter().all(|&(s, r, d)| {
                kg.contains(asg[s].expect("bound"), r, asg[d].expect("bound"))
            });
            return lits && block.negated.iter().all(|nb| !satisfied(nb, 0, asg, kg));
        }
        let var = block.vars[depth];
        for value in 0..kg.num_entities() {
            asg[var] = Some(value);
            if satisfied(block, depth + 1, asg, kg) {
                asg[var] = None;
                return true;
            }
        }
        asg[var] = None;
        false
    }

    let mut answers = Vec::new();
    for x in 0..kg.num_entities() {
        assignment[free] = Some(x);
        if satisfied(&top, 0, &mut assignment, kg) {
            answers.push(x);
        }
    }
    Ok(AnswerSet(answers))
}

/// Answers on the observed graph (easy) and the ones that need at least one
/// missing edge (hard).
pub fn hard_answers(q: &DnfQuery, observed: &GraphIndex, full: &GraphIndex) -> (AnswerSet, AnswerSet) {
    let easy = answer_dnf(q, observed);
    let hard = answer_dnf(q, full).difference(&easy);
    (easy, hard)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Rejection budget for each negated branch.
    pub negation_attempts: usize,
    /// Whole-query restarts before giving up.
    pub query_attempts: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            negation_attempts: 100,
            query_attempts: 100,
        }
    }
}

/// Instantiates query templates by walking backward from a random answer.
pub struct QuerySampler<'a> {
    index: &'a GraphIndex,
    /// Entities with at least one incoming edge.
    reachable: Vec<usize>,
    cfg: SamplerConfig,
}

impl<'a> QuerySampler<'a> {
    pub fn new(index: &'a GraphIndex, cfg: SamplerConfig) -> Self {
        let reachable = (0..index.num_entities())
            .filter(|&e| !index.incoming(e).is_empty())
            .collect();
        QuerySampler {
            index,
            reachable,
            cfg,
        }
    }

    pub fn sample(&self, qt: QueryType, rng: &mut impl Rng) -> Result<DnfQuery> {
        let (na, nr) = qt
            .arity()
            .ok_or_else(|| Error::SamplingFailure("custom queries cannot be sampled".into()))?;
        if self.reachable.is_empty() {
            return Err(Error::SamplingFailure("graph has no edges".into()));
        }
        // the template with placeholder ids gives the operator shape
        let shape = template_expr(qt, &vec![0; na], &vec![0; nr])?;
        for _ in 0..self.cfg.query_attempts {
            let target = *self.reachable.choose(rng).expect("non-empty");
            if let Some(expr) = self.walk(&shape, target, rng) {
                return to_dnf(&expr);
            }
        }
        Err(Error::SamplingFailure(format!(
            "{qt} not instantiable after {} attempts",
            self.cfg.query_attempts
        )))
    }

    fn walk(&self, shape: &QueryExpr, target: usize, rng: &mut impl Rng) -> Option<QueryExpr> {
        match shape {
            QueryExpr::Anchor(_) => Some(QueryExpr::Anchor(target)),
            QueryExpr::Project(inner, _) => {
                let &(relation, head) = self.index.incoming(target).choose(rng)?;
                let inner = self.walk(inner, head, rng)?;
                Some(QueryExpr::Project(Box::new(inner), relation))
            }
            QueryExpr::Intersect(branches) | QueryExpr::Union(branches) => {
                let mut out = Vec::with_capacity(branches.len());
                for b in branches {
                    let e = match b {
                        QueryExpr::Negate(inner) => {
                            QueryExpr::Negate(Box::new(self.negated_branch(inner, target, rng)?))
                        }
                        other => self.walk(other, target, rng)?,
                    };
                    // coinciding branches make a degenerate query; resample
                    if out.contains(&e) {
                        return None;
                    }
                    out.push(e);
                }
                Some(if matches!(shape, QueryExpr::Union(_)) {
                    QueryExpr::Union(out)
                } else {
                    QueryExpr::Intersect(out)
                })
            }
            QueryExpr::Negate(_) => None,
        }
    }

    /// A branch whose answers exclude `target`.
    fn negated_branch(&self, shape: &QueryExpr, target: usize, rng: &mut impl Rng) -> Option<QueryExpr> {
        for _ in 0..self.cfg.negation_attempts {
            let start = *self.reachable.choose(rng)?;
            let Some(branch) = self.walk(shape, start, rng) else {
                continue;
            };
            let g = branch.to_graph().ok()?;
            if !answer_conjunctive(&g, self.index).contains(target) {
                return Some(branch);
            }
        }
        None
    }
}

/// Requested number of queries per type for each split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitCounts {
    pub train: Vec<(QueryType, usize)>,
    pub valid: Vec<(QueryType, usize)>,
    pub test: Vec<(QueryType, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratedSplits {
    pub train: SampledDataset,
    pub valid: SampledDataset,
    pub test: SampledDataset,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateConfig {
    pub sampler: SamplerConfig,
    /// Sampling attempts allowed per requested record.
    pub attempts_per_record: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            sampler: SamplerConfig::default(),
            attempts_per_record: 50,
        }
    }
}

fn job_seed(seed: u64, split: u64, qt: QueryType) -> u64 {
    // splitmix-style mixing keeps per-job streams independent
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(split + 1))
        .wrapping_add((qt as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples train / valid / test queries from a split family.
///
/// Training queries are sampled and answered on the training graph.
/// Validation (test) queries are sampled on train+valid (full) and kept only
/// when they have at least one hard answer. Every `(split, type)` job owns
/// its own generator, so the output does not depend on scheduling.
pub fn generate_dataset(
    family: &SplitFamily,
    counts: &SplitCounts,
    seed: u64,
    cfg: &GenerateConfig,
) -> Result<GeneratedSplits> {
    family.validate()?;
    let train_idx = GraphIndex::build(&family.train);
    let tv_idx = GraphIndex::build(&family.train_valid);
    let full_idx = GraphIndex::build(&family.full);

    let run = |split: u64, jobs: &[(QueryType, usize)]| -> Result<SampledDataset> {
        let (sample_on, observed, complete) = match split {
            0 => (&train_idx, &train_idx, None),
            1 => (&tv_idx, &train_idx, Some(&tv_idx)),
            _ => (&full_idx, &tv_idx, Some(&full_idx)),
        };
        let parts = jobs
            .par_iter()
            .map(|&(qt, count)| {
                let mut rng = ChaCha8Rng::seed_from_u64(job_seed(seed, split, qt));
                let sampler = QuerySampler::new(sample_on, cfg.sampler);
                let mut seen = HashSet::new();
                let mut out = Vec::with_capacity(count);
                let budget = count.saturating_mul(cfg.attempts_per_record);
                let mut attempts = 0;
                while out.len() < count {
                    if attempts >= budget {
                        return Err(Error::SamplingFailure(format!(
                            "{qt}: produced {} of {count} queries in {budget} attempts",
                            out.len()
                        )));
                    }
                    attempts += 1;
                    let query = match sampler.sample(qt, &mut rng) {
                        Ok(q) => q,
                        Err(Error::SamplingFailure(_)) => continue,
                        Err(e) => return Err(e),
                    };
                    let form = query.to_nested()?;
                    if seen.contains(&form) {
                        continue;
                    }
                    let record = match complete {
                        None => QueryRecord {
                            easy: answer_dnf(&query, observed),
                            hard: AnswerSet::default(),
                            query,
                        },
                        Some(complete) => {
                            let (easy, hard) = hard_answers(&query, observed, complete);
                            if hard.is_empty() {
                                continue;
                            }
                            QueryRecord { query, easy, hard }
                        }
                    };
                    seen.insert(form);
                    out.push(record);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ds = SampledDataset::new(parts.into_iter().flatten().collect());
        ds.sort_canonical();
        Ok(ds)
    };

    Ok(GeneratedSplits {
        train: run(0, &counts.train)?,
        valid: run(1, &counts.valid)?,
        test: run(2, &counts.test)?,
    })
}
