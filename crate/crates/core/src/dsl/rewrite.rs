use std::fmt;

use thiserror::Error;

use super::ast::{BlockExpr, DistPolicy, GatherPolicy, Program, SourceMap};
use super::validate::BUILTIN_REDUCERS;
use crate::graph::compile_structure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleId {
    /// `NtoOne(gatherall) . seq(g)` to `reduce(g)`.
    R1Fuse,
    /// `reduce(g)` to `NtoOne(gatherall) . seq(g)`.
    R1Split,
    /// `dist[P]{... . 1toN(bcast) . reduce(g)}` to `dist[P]{... . 1toN(bcast)} . dist[P]{reduce(g)}`.
    R2Split,
    /// The converse of [`RuleId::R2Split`].
    R2Fuse,
}

impl RuleId {
    pub const ALL: [RuleId; 4] = [RuleId::R1Fuse, RuleId::R1Split, RuleId::R2Split, RuleId::R2Fuse];
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleId::R1Fuse => "R1",
            RuleId::R1Split => "R1-inverse",
            RuleId::R2Split => "R2",
            RuleId::R2Fuse => "R2-inverse",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RewriteError {
    #[error("rule {0} matches nowhere in the program")]
    PatternNotFound(RuleId),
}

/// Tries the rule at `stages[i]`, returning how many stages it consumes and
/// their replacement.
fn local(rule: RuleId, stages: &[BlockExpr], i: usize) -> Option<(usize, Vec<BlockExpr>)> {
    let next = stages.get(i + 1);
    match (rule, &stages[i], next) {
        (RuleId::R1Fuse, BlockExpr::NToOne(GatherPolicy::Gatherall), Some(BlockExpr::Seq(g)))
            if BUILTIN_REDUCERS.contains(&g.as_str()) =>
        {
            Some((2, vec![BlockExpr::Reduce(g.clone())]))
        }
        (RuleId::R1Split, BlockExpr::Reduce(g), _) => Some((
            1,
            vec![BlockExpr::NToOne(GatherPolicy::Gatherall), BlockExpr::Seq(g.clone())],
        )),
        (RuleId::R2Split, BlockExpr::Distribute { body, nodeset }, _) => {
            let inner = body.stages();
            let n = inner.len();
            match (n >= 2).then(|| (&inner[n - 2], &inner[n - 1])) {
                Some((BlockExpr::OneToN(DistPolicy::Broadcast), BlockExpr::Reduce(g))) => Some((
                    1,
                    vec![
                        BlockExpr::distribute(BlockExpr::pipe(inner[..n - 1].to_vec()), nodeset.clone()),
                        BlockExpr::distribute(BlockExpr::Reduce(g.clone()), nodeset.clone()),
                    ],
                )),
                _ => None,
            }
        }
        (
            RuleId::R2Fuse,
            BlockExpr::Distribute { body: left, nodeset: a },
            Some(BlockExpr::Distribute { body: right, nodeset: b }),
        ) if a == b
            && matches!(**right, BlockExpr::Reduce(_))
            && left.stages().last() == Some(&BlockExpr::OneToN(DistPolicy::Broadcast)) =>
        {
            let mut joined = left.stages().to_vec();
            joined.push((**right).clone());
            Some((2, vec![BlockExpr::distribute(BlockExpr::pipe(joined), a.clone())]))
        }
        _ => None,
    }
}

/// Rewrites the `target`-th occurrence (pre-order) of the rule.
fn nth(e: &BlockExpr, rule: RuleId, seen: &mut usize, target: usize) -> Option<BlockExpr> {
    let stages = e.stages();
    for i in 0..stages.len() {
        if let Some((used, repl)) = local(rule, stages, i) {
            if *seen == target {
                let mut out = stages[..i].to_vec();
                out.extend(repl);
                out.extend_from_slice(&stages[i + used..]);
                return Some(BlockExpr::pipe(out));
            }
            *seen += 1;
        }
        let child = match &stages[i] {
            BlockExpr::Distribute { body, nodeset } => {
                nth(body, rule, seen, target).map(|b| BlockExpr::distribute(b, nodeset.clone()))
            }
            BlockExpr::Feedback { body, cond } => nth(body, rule, seen, target).map(|b| BlockExpr::feedback(b, cond.clone())),
            _ => None,
        };
        if let Some(c) = child {
            let mut out = stages.to_vec();
            out[i] = c;
            return Some(BlockExpr::pipe(out));
        }
    }
    None
}

/// Applies `rule` at its first occurrence whose rewrite keeps channel arities
/// consistent.
pub fn rewrite(p: &Program, rule: RuleId) -> Result<Program, RewriteError> {
    let was_valid = compile_structure(p).is_ok();
    let mut target = 0;
    while let Some(body) = nth(&p.body, rule, &mut 0, target) {
        let candidate = Program {
            nodesets: p.nodesets.clone(),
            conds: p.conds.clone(),
            body,
            source_map: SourceMap::default(),
        };
        if !was_valid || compile_structure(&candidate).is_ok() {
            return Ok(candidate);
        }
        target += 1;
    }
    Err(RewriteError::PatternNotFound(rule))
}
