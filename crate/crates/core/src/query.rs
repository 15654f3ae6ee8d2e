//! EFO-1 query representation.
//!
//! Queries exist in two forms. [`QueryExpr`] is the operator tree that the
//! nested-tuple text format describes (projection, intersection, negation,
//! union). [`DnfQuery`] is the disjunction of union-free [`ConjunctiveGraph`]s
//! obtained by distributing unions outward; every downstream consumer works
//! on the graphs.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QueryType {
    P1,
    P2,
    P3,
    I2,
    I3,
    Pi,
    Ip,
    U2,
    Up,
    In2,
    In3,
    Inp,
    Pin,
    Pni,
    Custom,
}

impl QueryType {
    /// The fourteen named templates, in reporting order.
    pub const TEMPLATES: [QueryType; 14] = [
        QueryType::P1,
        QueryType::P2,
        QueryType::P3,
        QueryType::I2,
        QueryType::I3,
        QueryType::Pi,
        QueryType::Ip,
        QueryType::U2,
        QueryType::Up,
        QueryType::In2,
        QueryType::In3,
        QueryType::Inp,
        QueryType::Pin,
        QueryType::Pni,
    ];

    /// Positive-only (EPFO) types averaged into A_p.
    pub const EPFO: [QueryType; 9] = [
        QueryType::P1,
        QueryType::P2,
        QueryType::P3,
        QueryType::I2,
        QueryType::I3,
        QueryType::Pi,
        QueryType::Ip,
        QueryType::U2,
        QueryType::Up,
    ];

    /// Negation types averaged into A_n.
    pub const NEGATION: [QueryType; 5] = [
        QueryType::In2,
        QueryType::In3,
        QueryType::Inp,
        QueryType::Pin,
        QueryType::Pni,
    ];

    /// Types that receive supervision during encoder training.
    pub const SUPERVISED: [QueryType; 10] = [
        QueryType::P1,
        QueryType::P2,
        QueryType::P3,
        QueryType::I2,
        QueryType::I3,
        QueryType::In2,
        QueryType::In3,
        QueryType::Inp,
        QueryType::Pin,
        QueryType::Pni,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryType::P1 => "1p",
            QueryType::P2 => "2p",
            QueryType::P3 => "3p",
            QueryType::I2 => "2i",
            QueryType::I3 => "3i",
            QueryType::Pi => "pi",
            QueryType::Ip => "ip",
            QueryType::U2 => "2u",
            QueryType::Up => "up",
            QueryType::In2 => "2in",
            QueryType::In3 => "3in",
            QueryType::Inp => "inp",
            QueryType::Pin => "pin",
            QueryType::Pni => "pni",
            QueryType::Custom => "custom",
        }
    }

    pub fn is_epfo(self) -> bool {
        Self::EPFO.contains(&self)
    }

    pub fn is_negation(self) -> bool {
        Self::NEGATION.contains(&self)
    }

    pub fn is_supervised(self) -> bool {
        Self::SUPERVISED.contains(&self)
    }

    fn shape(self) -> Option<Shape> {
        use Shape::*;
        let p = |inner: Shape| Project(Box::new(inner));
        let n = |inner: Shape| Negate(Box::new(inner));
        let a1 = || p(Anchor);
        let shape = match self {
            QueryType::P1 => a1(),
            QueryType::P2 => p(a1()),
            QueryType::P3 => p(p(a1())),
            QueryType::I2 => Intersect(vec![a1(), a1()]),
            QueryType::I3 => Intersect(vec![a1(), a1(), a1()]),
            QueryType::Ip => p(Intersect(vec![a1(), a1()])),
            QueryType::Pi => Intersect(vec![p(a1()), a1()]),
            QueryType::U2 => Union(vec![a1(), a1()]),
            QueryType::Up => p(Union(vec![a1(), a1()])),
            QueryType::In2 => Intersect(vec![a1(), n(a1())]),
            QueryType::In3 => Intersect(vec![a1(), a1(), n(a1())]),
            QueryType::Inp => p(Intersect(vec![a1(), n(a1())])),
            QueryType::Pin => Intersect(vec![p(a1()), n(a1())]),
            QueryType::Pni => Intersect(vec![n(p(a1())), a1()]),
            QueryType::Custom => return None,
        };
        Some(shape)
    }

    /// `(anchors, relations)` a template consumes.
    pub fn arity(self) -> Option<(usize, usize)> {
        self.shape().map(|s| s.arity())
    }

    fn static_name(self) -> &'static str {
        self.as_str()
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryType::TEMPLATES
            .iter()
            .copied()
            .chain(std::iter::once(QueryType::Custom))
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown query type {s:?}")))
    }
}

/// Operator tree without bound ids; used to match templates.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Shape {
    Anchor,
    Project(Box<Shape>),
    Negate(Box<Shape>),
    Intersect(Vec<Shape>),
    Union(Vec<Shape>),
}

impl Shape {
    fn arity(&self) -> (usize, usize) {
        match self {
            Shape::Anchor => (1, 0),
            Shape::Project(inner) => {
                let (a, r) = inner.arity();
                (a, r + 1)
            }
            Shape::Negate(inner) => inner.arity(),
            Shape::Intersect(bs) | Shape::Union(bs) => bs.iter().fold((0, 0), |(a, r), b| {
                let (ba, br) = b.arity();
                (a + ba, r + br)
            }),
        }
    }

    fn bind(
        &self,
        anchors: &mut impl Iterator<Item = usize>,
        relations: &mut impl Iterator<Item = usize>,
    ) -> QueryExpr {
        match self {
            Shape::Anchor => QueryExpr::Anchor(anchors.next().expect("arity checked")),
            Shape::Project(inner) => {
                let inner = inner.bind(anchors, relations);
                QueryExpr::Project(Box::new(inner), relations.next().expect("arity checked"))
            }
            Shape::Negate(inner) => QueryExpr::Negate(Box::new(inner.bind(anchors, relations))),
            Shape::Intersect(bs) => {
                QueryExpr::Intersect(bs.iter().map(|b| b.bind(anchors, relations)).collect())
            }
            Shape::Union(bs) => {
                QueryExpr::Union(bs.iter().map(|b| b.bind(anchors, relations)).collect())
            }
        }
    }
}

/// Logical operator tree over bound anchors and relations.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum QueryExpr {
    Anchor(usize),
    Project(Box<QueryExpr>, usize),
    Negate(Box<QueryExpr>),
    Intersect(Vec<QueryExpr>),
    Union(Vec<QueryExpr>),
}

impl QueryExpr {
    fn shape(&self) -> Shape {
        match self {
            QueryExpr::Anchor(_) => Shape::Anchor,
            QueryExpr::Project(inner, _) => Shape::Project(Box::new(inner.shape())),
            QueryExpr::Negate(inner) => Shape::Negate(Box::new(inner.shape())),
            QueryExpr::Intersect(bs) => Shape::Intersect(bs.iter().map(Self::shape).collect()),
            QueryExpr::Union(bs) => Shape::Union(bs.iter().map(Self::shape).collect()),
        }
    }

    /// The named template this expression instantiates, or `Custom`.
    pub fn classify(&self) -> QueryType {
        let shape = self.shape();
        QueryType::TEMPLATES
            .iter()
            .copied()
            .find(|t| t.shape().as_ref() == Some(&shape))
            .unwrap_or(QueryType::Custom)
    }

    /// Anchors and relations in nested-text order.
    pub fn bindings(&self) -> (Vec<usize>, Vec<usize>) {
        fn walk(e: &QueryExpr, a: &mut Vec<usize>, r: &mut Vec<usize>) {
            match e {
                QueryExpr::Anchor(x) => a.push(*x),
                QueryExpr::Project(inner, rel) => {
                    walk(inner, a, r);
                    r.push(*rel);
                }
                QueryExpr::Negate(inner) => walk(inner, a, r),
                QueryExpr::Intersect(bs) | QueryExpr::Union(bs) => {
                    bs.iter().for_each(|b| walk(b, a, r))
                }
            }
        }
        let (mut a, mut r) = (Vec::new(), Vec::new());
        walk(self, &mut a, &mut r);
        (a, r)
    }

    pub fn has_union(&self) -> bool {
        match self {
            QueryExpr::Anchor(_) => false,
            QueryExpr::Project(inner, _) | QueryExpr::Negate(inner) => inner.has_union(),
            QueryExpr::Intersect(bs) => bs.iter().any(Self::has_union),
            QueryExpr::Union(_) => true,
        }
    }

    /// Distributes every union to the top, returning union-free disjuncts.
    pub fn disjuncts(&self) -> Result<Vec<QueryExpr>> {
        Ok(match self {
            QueryExpr::Anchor(_) => vec![self.clone()],
            QueryExpr::Project(inner, r) => inner
                .disjuncts()?
                .into_iter()
                .map(|c| QueryExpr::Project(Box::new(c), *r))
                .collect(),
            QueryExpr::Negate(inner) => {
                if inner.has_union() {
                    return Err(Error::UnsupportedStructure(
                        "union nested under negation".into(),
                    ));
                }
                vec![self.clone()]
            }
            QueryExpr::Intersect(bs) => {
                let mut acc: Vec<Vec<QueryExpr>> = vec![Vec::new()];
                for b in bs {
                    let options = b.disjuncts()?;
                    acc = acc
                        .into_iter()
                        .flat_map(|prefix| {
                            options.iter().map(move |o| {
                                let mut next = prefix.clone();
                                next.push(o.clone());
                                next
                            })
                        })
                        .collect();
                }
                acc.into_iter().map(QueryExpr::Intersect).collect()
            }
            QueryExpr::Union(bs) => {
                let mut out = Vec::new();
                for b in bs {
                    out.extend(b.disjuncts()?);
                }
                out
            }
        })
    }

    /// Nested-tuple text, e.g. `(7,(3,))` or `((1,(5,)),(2,(6,n)))`.
    pub fn to_nested(&self) -> Result<String> {
        let mut out = String::new();
        write_branch(self, &mut out)?;
        Ok(out)
    }

    /// Builds the graph of a union-free expression.
    pub fn to_graph(&self) -> Result<ConjunctiveGraph> {
        if self.has_union() {
            return Err(Error::UnsupportedStructure(
                "union inside a conjunctive clause".into(),
            ));
        }
        let mut g = ConjunctiveGraph::default();
        let root = build_node(self, &mut g)?;
        if matches!(g.nodes[root].kind, NodeKind::Anchor(_)) {
            return Err(Error::UnsupportedStructure(
                "query has no free variable".into(),
            ));
        }
        g.nodes[root].kind = NodeKind::FreeVar;
        Ok(g)
    }
}

fn build_node(e: &QueryExpr, g: &mut ConjunctiveGraph) -> Result<usize> {
    match e {
        QueryExpr::Anchor(x) => Ok(g.add_node(NodeKind::Anchor(*x))),
        QueryExpr::Project(inner, r) => {
            let src = build_node(inner, g)?;
            let dst = g.add_node(NodeKind::Var);
            g.edges.push(QueryEdge {
                src,
                dst,
                relation: *r,
                negated: false,
            });
            Ok(dst)
        }
        QueryExpr::Intersect(bs) => {
            if bs.is_empty() {
                return Err(Error::UnsupportedStructure("empty intersection".into()));
            }
            let mut incoming = Vec::with_capacity(bs.len());
            for b in bs {
                let (inner, r, negated) = match b {
                    QueryExpr::Project(inner, r) => (inner, *r, false),
                    QueryExpr::Negate(p) => match p.as_ref() {
                        QueryExpr::Project(inner, r) => (inner, *r, true),
                        _ => {
                            return Err(Error::UnsupportedStructure(
                                "negation must wrap a projection".into(),
                            ))
                        }
                    },
                    _ => {
                        return Err(Error::UnsupportedStructure(
                            "intersection branches must end in a projection".into(),
                        ))
                    }
                };
                incoming.push((build_node(inner, g)?, r, negated));
            }
            let dst = g.add_node(NodeKind::Var);
            for (src, relation, negated) in incoming {
                g.edges.push(QueryEdge {
                    src,
                    dst,
                    relation,
                    negated,
                });
            }
            Ok(dst)
        }
        QueryExpr::Negate(_) => Err(Error::UnsupportedStructure(
            "negation outside an intersection".into(),
        )),
        QueryExpr::Union(_) => unreachable!("checked by to_graph"),
    }
}

fn write_branch(e: &QueryExpr, out: &mut String) -> Result<()> {
    // peel a chain of projections (optionally negated at the end)
    let (negated, mut cur) = match e {
        QueryExpr::Negate(inner) => (true, inner.as_ref()),
        other => (false, other),
    };
    let mut chain = Vec::new();
    while let QueryExpr::Project(inner, r) = cur {
        chain.push(r.to_string());
        cur = inner;
    }
    chain.reverse();
    if negated {
        if chain.is_empty() {
            return Err(Error::UnsupportedStructure(
                "negation must wrap a projection".into(),
            ));
        }
        chain.push("n".into());
    }
    if chain.is_empty() {
        return match cur {
            QueryExpr::Intersect(bs) => {
                out.push('(');
                write_list(bs, out)?;
                out.push(')');
                Ok(())
            }
            QueryExpr::Union(bs) => {
                out.push('(');
                write_list(bs, out)?;
                out.push_str(",(u,))");
                Ok(())
            }
            _ => Err(Error::UnsupportedStructure(
                "bare anchor is not a query".into(),
            )),
        };
    }
    out.push('(');
    match cur {
        QueryExpr::Anchor(x) => out.push_str(&x.to_string()),
        other => write_branch(other, out)?,
    }
    out.push_str(",(");
    out.push_str(&chain.join(","));
    if chain.len() == 1 {
        out.push(',');
    }
    out.push_str("))");
    Ok(())
}

fn write_list(bs: &[QueryExpr], out: &mut String) -> Result<()> {
    for (i, b) in bs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_branch(b, out)?;
    }
    Ok(())
}

/// Token tree of the nested-tuple text.
#[derive(Clone, Debug, PartialEq)]
enum Value {
    Int(i64),
    Neg,
    UnionMark,
    Tuple(Vec<Value>),
}

struct Lexer<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Lexer<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Syntax {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn value(&mut self) -> Result<Value> {
        self.skip_ws();
        match self.bytes.get(self.pos) {
            Some(b'(') => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    if self.bytes.get(self.pos) == Some(&b')') {
                        self.pos += 1;
                        break;
                    }
                    items.push(self.value()?);
                    self.skip_ws();
                    match self.bytes.get(self.pos) {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {
                            self.pos += 1;
                            break;
                        }
                        _ => return Err(self.err("expected ',' or ')'")),
                    }
                }
                Ok(Value::Tuple(items))
            }
            Some(b'n') => {
                self.pos += 1;
                Ok(Value::Neg)
            }
            Some(b'u') => {
                self.pos += 1;
                Ok(Value::UnionMark)
            }
            Some(c) if c.is_ascii_digit() || *c == b'-' => {
                let start = self.pos;
                self.pos += 1;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii");
                match text.parse::<i64>() {
                    // integer-encoded markers used by the public datasets
                    Ok(-2) => Ok(Value::Neg),
                    Ok(-1) => Ok(Value::UnionMark),
                    Ok(v) if v >= 0 => Ok(Value::Int(v)),
                    _ => Err(Error::Syntax {
                        pos: start,
                        msg: format!("bad integer {text:?}"),
                    }),
                }
            }
            Some(_) => Err(self.err("unexpected character")),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

fn is_chain(v: &Value) -> bool {
    matches!(v, Value::Tuple(items) if !items.is_empty()
        && items.iter().all(|i| matches!(i, Value::Int(_) | Value::Neg)))
}

fn is_union_mark(v: &Value) -> bool {
    matches!(v, Value::Tuple(items) if items.as_slice() == [Value::UnionMark])
}

fn interpret(v: &Value) -> Result<QueryExpr> {
    let unsupported = || Error::UnsupportedStructure(format!("{v:?}"));
    let Value::Tuple(items) = v else {
        return Err(unsupported());
    };
    if items.len() == 2 && is_chain(&items[1]) {
        let mut cur = match &items[0] {
            Value::Int(e) => QueryExpr::Anchor(*e as usize),
            t @ Value::Tuple(_) => {
                let base = interpret(t)?;
                if !matches!(base, QueryExpr::Intersect(_) | QueryExpr::Union(_)) {
                    return Err(unsupported());
                }
                base
            }
            _ => return Err(unsupported()),
        };
        let Value::Tuple(chain) = &items[1] else {
            unreachable!()
        };
        for (i, link) in chain.iter().enumerate() {
            match link {
                Value::Int(r) => cur = QueryExpr::Project(Box::new(cur), *r as usize),
                Value::Neg if i + 1 == chain.len() && i > 0 => cur = QueryExpr::Negate(Box::new(cur)),
                _ => return Err(unsupported()),
            }
        }
        return Ok(cur);
    }
    let (branches, union) = match items.split_last() {
        Some((last, rest)) if is_union_mark(last) => (rest, true),
        _ => (items.as_slice(), false),
    };
    if branches.len() < 2 {
        return Err(unsupported());
    }
    let parsed = branches.iter().map(interpret).collect::<Result<Vec<_>>>()?;
    Ok(if union {
        QueryExpr::Union(parsed)
    } else {
        QueryExpr::Intersect(parsed)
    })
}

/// Parses nested-tuple text into an operator tree without checking it
/// against the template catalog.
pub fn parse_expr(form: &str) -> Result<QueryExpr> {
    let mut lx = Lexer {
        bytes: form.as_bytes(),
        pos: 0,
    };
    let v = lx.value()?;
    lx.skip_ws();
    if lx.pos != form.len() {
        return Err(lx.err("trailing input"));
    }
    interpret(&v)
}

/// Parses one of the fourteen template encodings. Anything else is refused.
pub fn parse_nested(form: &str) -> Result<DnfQuery> {
    let expr = parse_expr(form)?;
    let qt = expr.classify();
    if qt == QueryType::Custom {
        return Err(Error::UnsupportedStructure(format!(
            "{form} matches none of the query templates"
        )));
    }
    to_dnf(&expr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Anchor(usize),
    Var,
    FreeVar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QueryNode {
    pub id: usize,
    pub kind: NodeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QueryEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
    pub negated: bool,
}

/// One conjunctive clause as an anchored DAG. Node ids equal their index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConjunctiveGraph {
    pub nodes: Vec<QueryNode>,
    pub edges: Vec<QueryEdge>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Empty,
    NoFreeVariable,
    MultipleFreeVariables,
    FreeVariableNotSink,
    NodeIdMismatch(usize),
    DanglingEdge(usize),
    SelfLoop(usize),
    Cycle,
    Disconnected,
    SourceNotAnchor(usize),
    AnchorHasIncoming(usize),
    /// An existential variable feeding several edges; set-based evaluation
    /// would decorrelate its uses.
    SharedVariable(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "graph has no nodes"),
            Violation::NoFreeVariable => write!(f, "no free variable"),
            Violation::MultipleFreeVariables => write!(f, "multiple free variables"),
            Violation::FreeVariableNotSink => write!(f, "free variable is not sink"),
            Violation::NodeIdMismatch(i) => write!(f, "node at index {i} has a different id"),
            Violation::DanglingEdge(e) => write!(f, "edge {e} references a missing node"),
            Violation::SelfLoop(e) => write!(f, "edge {e} is a self loop"),
            Violation::Cycle => write!(f, "graph has a directed cycle"),
            Violation::Disconnected => write!(f, "graph is not weakly connected"),
            Violation::SourceNotAnchor(n) => write!(f, "node {n} has no incoming edge but is not an anchor"),
            Violation::AnchorHasIncoming(n) => write!(f, "anchor {n} has an incoming edge"),
            Violation::SharedVariable(n) => write!(f, "variable {n} has more than one outgoing edge"),
        }
    }
}

impl ConjunctiveGraph {
    fn add_node(&mut self, kind: NodeKind) -> usize {
        let id = self.nodes.len();
        self.nodes.push(QueryNode { id, kind });
        id
    }

    pub fn free_var(&self) -> Option<usize> {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::FreeVar)
            .map(|n| n.id)
    }

    pub fn in_edges(&self, node: usize) -> impl Iterator<Item = &QueryEdge> {
        self.edges.iter().filter(move |e| e.dst == node)
    }

    pub fn out_edges(&self, node: usize) -> impl Iterator<Item = &QueryEdge> {
        self.edges.iter().filter(move |e| e.src == node)
    }

    pub fn num_variables(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.kind, NodeKind::Anchor(_)))
            .count()
    }

    /// Every violated well-formedness rule (empty means valid).
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let n = self.nodes.len();
        if n == 0 {
            v.push(Violation::Empty);
            return v;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                v.push(Violation::NodeIdMismatch(i));
            }
        }
        let mut edges_ok = true;
        for (i, e) in self.edges.iter().enumerate() {
            if e.src >= n || e.dst >= n {
                v.push(Violation::DanglingEdge(i));
                edges_ok = false;
            } else if e.src == e.dst {
                v.push(Violation::SelfLoop(i));
            }
        }
        let free: Vec<usize> = self
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::FreeVar)
            .map(|n| n.id)
            .collect();
        match free.len() {
            0 => v.push(Violation::NoFreeVariable),
            1 => {}
            _ => v.push(Violation::MultipleFreeVariables),
        }
        if !edges_ok {
            return v;
        }
        let mut indeg = vec![0usize; n];
        let mut outdeg = vec![0usize; n];
        for e in &self.edges {
            indeg[e.dst] += 1;
            outdeg[e.src] += 1;
        }
        if free.iter().any(|&f| outdeg[f] > 0) {
            v.push(Violation::FreeVariableNotSink);
        }
        for node in &self.nodes {
            match node.kind {
                NodeKind::Anchor(_) if indeg[node.id] > 0 => {
                    v.push(Violation::AnchorHasIncoming(node.id))
                }
                NodeKind::Var | NodeKind::FreeVar if indeg[node.id] == 0 => {
                    v.push(Violation::SourceNotAnchor(node.id))
                }
                NodeKind::Var if outdeg[node.id] > 1 => v.push(Violation::SharedVariable(node.id)),
                _ => {}
            }
        }
        if topo_order(self).is_none() {
            v.push(Violation::Cycle);
        }
        if !weakly_connected(self) {
            v.push(Violation::Disconnected);
        }
        v
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Rebuilds the operator tree rooted at the free variable.
    pub fn to_expr(&self) -> Result<QueryExpr> {
        let violations = self.validate();
        if !violations.is_empty() {
            return Err(Error::InvalidGraph(join_violations(&violations)));
        }
        fn expr_of(g: &ConjunctiveGraph, node: usize) -> QueryExpr {
            if let NodeKind::Anchor(x) = g.nodes[node].kind {
                return QueryExpr::Anchor(x);
            }
            let branches: Vec<QueryExpr> = g
                .in_edges(node)
                .map(|e| {
                    let p = QueryExpr::Project(Box::new(expr_of(g, e.src)), e.relation);
                    if e.negated {
                        QueryExpr::Negate(Box::new(p))
                    } else {
                        p
                    }
                })
                .collect();
            match <[QueryExpr; 1]>::try_from(branches) {
                Ok([QueryExpr::Negate(p)]) => QueryExpr::Intersect(vec![QueryExpr::Negate(p)]),
                Ok([single]) => single,
                Err(many) => QueryExpr::Intersect(many),
            }
        }
        Ok(expr_of(self, self.free_var().expect("validated")))
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

fn topo_order(g: &ConjunctiveGraph) -> Option<Vec<usize>> {
    let n = g.nodes.len();
    let mut indeg = vec![0usize; n];
    for e in &g.edges {
        indeg[e.dst] += 1;
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for e in g.out_edges(u) {
            indeg[e.dst] -= 1;
            if indeg[e.dst] == 0 {
                queue.push_back(e.dst);
            }
        }
    }
    (order.len() == n).then_some(order)
}

fn weakly_connected(g: &ConjunctiveGraph) -> bool {
    let n = g.nodes.len();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for e in &g.edges {
            let next = if e.src == u {
                e.dst
            } else if e.dst == u {
                e.src
            } else {
                continue;
            };
            if !seen[next] {
                seen[next] = true;
                stack.push(next);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Topological layer per node id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerAssignment(pub Vec<usize>);

impl LayerAssignment {
    pub fn layer(&self, node: usize) -> usize {
        self.0[node]
    }
}

/// Longest-path layering: `layer[v]` is the longest directed path from any
/// source to `v`, so every edge strictly increases the layer.
pub fn topological_layers(g: &ConjunctiveGraph) -> Result<LayerAssignment> {
    let order = topo_order(g).ok_or_else(|| Error::InvalidGraph("directed cycle".into()))?;
    let mut layer = vec![0usize; g.nodes.len()];
    for u in order {
        for e in g.out_edges(u) {
            layer[e.dst] = layer[e.dst].max(layer[u] + 1);
        }
    }
    Ok(LayerAssignment(layer))
}

/// A query in disjunctive normal form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DnfQuery {
    pub query_type: QueryType,
    pub conjuncts: Vec<ConjunctiveGraph>,
    expr: QueryExpr,
}

impl DnfQuery {
    /// Operator-tree form (unions kept where they were written).
    pub fn expr(&self) -> &QueryExpr {
        &self.expr
    }

    pub fn to_nested(&self) -> Result<String> {
        self.expr.to_nested()
    }

    /// Wraps already-built conjunctive graphs as a custom query.
    pub fn from_conjuncts(conjuncts: Vec<ConjunctiveGraph>) -> Result<Self> {
        if conjuncts.is_empty() {
            return Err(Error::InvalidGraph("no conjuncts".into()));
        }
        let mut exprs = conjuncts
            .iter()
            .map(ConjunctiveGraph::to_expr)
            .collect::<Result<Vec<_>>>()?;
        let expr = if exprs.len() == 1 {
            exprs.pop().expect("one")
        } else {
            QueryExpr::Union(exprs)
        };
        Ok(DnfQuery {
            query_type: QueryType::Custom,
            conjuncts,
            expr,
        })
    }
}

/// Converts an operator tree to DNF and validates every clause.
pub fn to_dnf(expr: &QueryExpr) -> Result<DnfQuery> {
    let conjuncts = expr
        .disjuncts()?
        .iter()
        .map(QueryExpr::to_graph)
        .collect::<Result<Vec<_>>>()?;
    for g in &conjuncts {
        let v = g.validate();
        if !v.is_empty() {
            return Err(Error::InvalidGraph(join_violations(&v)));
        }
    }
    Ok(DnfQuery {
        query_type: expr.classify(),
        conjuncts,
        expr: expr.clone(),
    })
}

/// Instantiates the operator tree of a named template.
pub fn template_expr(
    query_type: QueryType,
    anchors: &[usize],
    relations: &[usize],
) -> Result<QueryExpr> {
    let shape = query_type.shape().ok_or_else(|| {
        Error::UnsupportedStructure("custom queries have no template".into())
    })?;
    let (na, nr) = shape.arity();
    if anchors.len() != na || relations.len() != nr {
        return Err(Error::Arity {
            template: query_type.static_name(),
            anchors: na,
            relations: nr,
            got_anchors: anchors.len(),
            got_relations: relations.len(),
        });
    }
    Ok(shape.bind(&mut anchors.iter().copied(), &mut relations.iter().copied()))
}

pub fn build_from_template(
    query_type: QueryType,
    anchors: &[usize],
    relations: &[usize],
) -> Result<DnfQuery> {
    to_dnf(&template_expr(query_type, anchors, relations)?)
}
