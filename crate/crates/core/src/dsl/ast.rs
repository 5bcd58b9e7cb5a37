use std::collections::BTreeMap;
use std::fmt;

/// Target selector of a unicast 1-to-N router.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Selector {
    RoundRobin,
    Fixed(u32),
    /// Route to whichever output asked for work. Parsed, not executed.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DistPolicy {
    Unicast(Selector),
    Broadcast,
    Scatter,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GatherPolicy {
    /// Forward each input in arrival order.
    Gather,
    /// Barrier: one item from every input, emitted as an ordered vector.
    Gatherall,
    /// Barrier followed by a left fold of the named function.
    Reduce(String),
}

/// A building-block expression.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum BlockExpr {
    Seq(String),
    Par(String),
    Distribute { body: Box<BlockExpr>, nodeset: String },
    /// At least two stages, none of which is itself a `Pipe`.
    Pipe(Vec<BlockExpr>),
    Reduce(String),
    Spread(String),
    OneToN(DistPolicy),
    NToOne(GatherPolicy),
    Feedback { body: Box<BlockExpr>, cond: String },
}

impl BlockExpr {
    pub fn seq(name: impl Into<String>) -> Self {
        BlockExpr::Seq(name.into())
    }

    pub fn par(name: impl Into<String>) -> Self {
        BlockExpr::Par(name.into())
    }

    pub fn reduce(name: impl Into<String>) -> Self {
        BlockExpr::Reduce(name.into())
    }

    pub fn distribute(body: BlockExpr, nodeset: impl Into<String>) -> Self {
        BlockExpr::Distribute {
            body: Box::new(body),
            nodeset: nodeset.into(),
        }
    }

    pub fn feedback(body: BlockExpr, cond: impl Into<String>) -> Self {
        BlockExpr::Feedback {
            body: Box::new(body),
            cond: cond.into(),
        }
    }

    /// Chains stages, splicing nested pipes so the result stays flat. A
    /// single stage is returned as-is.
    pub fn pipe(stages: impl IntoIterator<Item = BlockExpr>) -> Self {
        let mut flat = Vec::new();
        for s in stages {
            match s {
                BlockExpr::Pipe(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        if flat.len() == 1 {
            flat.pop().expect("one stage")
        } else {
            BlockExpr::Pipe(flat)
        }
    }

    /// Stages of this expression viewed as a pipe.
    pub fn stages(&self) -> &[BlockExpr] {
        match self {
            BlockExpr::Pipe(s) => s,
            other => std::slice::from_ref(other),
        }
    }

    pub fn children(&self) -> Vec<&BlockExpr> {
        match self {
            BlockExpr::Distribute { body, .. } | BlockExpr::Feedback { body, .. } => vec![body],
            BlockExpr::Pipe(stages) => stages.iter().collect(),
            _ => Vec::new(),
        }
    }

    /// Pre-order walk with the child-index path of each node.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&[usize], &'a BlockExpr)) {
        fn go<'a>(e: &'a BlockExpr, path: &mut Vec<usize>, f: &mut impl FnMut(&[usize], &'a BlockExpr)) {
            f(path, e);
            for (i, c) in e.children().into_iter().enumerate() {
                path.push(i);
                go(c, path, f);
                path.pop();
            }
        }
        go(self, &mut Vec::new(), f);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum NodeSetDecl {
    Count(u32),
    Members(Vec<String>),
}

impl NodeSetDecl {
    pub fn cardinality(&self) -> u32 {
        match self {
            NodeSetDecl::Count(n) => *n,
            NodeSetDecl::Members(m) => m.len() as u32,
        }
    }

    pub fn member_name(&self, set: &str, index: u32) -> String {
        match self {
            NodeSetDecl::Count(_) => format!("{set}{index}"),
            NodeSetDecl::Members(m) => m[index as usize].clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CondDecl {
    Rounds(u32),
    Infinite,
}

/// Byte span and 1-based line/column of a source construct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub line: u32,
    pub column: u32,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

/// Spans of parsed expressions, keyed by child-index path from the body root.
#[derive(Debug, Clone, Default)]
pub struct SourceMap {
    pub(crate) exprs: BTreeMap<Vec<usize>, Span>,
}

impl SourceMap {
    pub fn span_of(&self, path: &[usize]) -> Option<Span> {
        self.exprs.get(path).copied()
    }
}

/// Header declarations plus the body expression.
///
/// Equality is structural and ignores source positions.
#[derive(Debug, Clone)]
pub struct Program {
    pub nodesets: BTreeMap<String, NodeSetDecl>,
    pub conds: BTreeMap<String, CondDecl>,
    pub body: BlockExpr,
    pub source_map: SourceMap,
}

impl PartialEq for Program {
    fn eq(&self, other: &Self) -> bool {
        self.nodesets == other.nodesets && self.conds == other.conds && self.body == other.body
    }
}

impl Eq for Program {}

impl Program {
    pub fn new(body: BlockExpr) -> Self {
        Program {
            nodesets: BTreeMap::new(),
            conds: BTreeMap::new(),
            body,
            source_map: SourceMap::default(),
        }
    }

    pub fn with_nodeset(mut self, name: impl Into<String>, decl: NodeSetDecl) -> Self {
        self.nodesets.insert(name.into(), decl);
        self
    }

    pub fn with_cond(mut self, name: impl Into<String>, decl: CondDecl) -> Self {
        self.conds.insert(name.into(), decl);
        self
    }

    pub fn cardinality(&self, nodeset: &str) -> Option<u32> {
        self.nodesets.get(nodeset).map(NodeSetDecl::cardinality)
    }
}
