use std::fmt;

use super::ast::{BlockExpr, CondDecl, DistPolicy, GatherPolicy, NodeSetDecl, Program, Selector, Span};
use crate::graph::{compile_structure, GraphError, NameKind, Resolve};

/// Reducers provided by the runtime without user registration.
pub const BUILTIN_REDUCERS: [&str; 4] = ["FedAvg", "F", "sum", "concat"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
    pub span: Option<Span>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match self.span {
            Some(s) => write!(f, "{s}: {sev}: {}", self.message),
            None => write!(f, "{sev}: {}", self.message),
        }
    }
}

struct Builtins;

impl Resolve for Builtins {
    fn resolves(&self, kind: NameKind, name: &str) -> bool {
        kind != NameKind::Reducer || BUILTIN_REDUCERS.contains(&name)
    }
}

/// Structural checks against the builtin reducer set.
pub fn validate(p: &Program) -> Vec<Diagnostic> {
    validate_with(p, &Builtins)
}

/// Structural checks, with every identifier resolved against `names`.
pub fn validate_with(p: &Program, names: &dyn Resolve) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let error = |message: String, span: Option<Span>| Diagnostic {
        severity: Severity::Error,
        message,
        span,
    };
    for (name, decl) in &p.nodesets {
        match decl {
            NodeSetDecl::Count(0) => out.push(error(format!("node set `{name}` is empty"), None)),
            NodeSetDecl::Members(m) if m.is_empty() => out.push(error(format!("node set `{name}` is empty"), None)),
            NodeSetDecl::Members(m) => {
                for (i, a) in m.iter().enumerate() {
                    if m[..i].contains(a) {
                        out.push(error(format!("node set `{name}` lists `{a}` twice"), None));
                    }
                }
            }
            NodeSetDecl::Count(_) => {}
        }
    }
    for (name, decl) in &p.conds {
        if *decl == CondDecl::Rounds(0) {
            out.push(error(format!("condition `{name}` must allow at least one round"), None));
        }
    }

    p.body.walk(&mut |path, e| {
        let span = p.source_map.span_of(path);
        let mut check = |kind: NameKind, name: &str| {
            if !names.resolves(kind, name) {
                out.push(error(format!("{kind} `{name}` is not registered"), span));
            }
        };
        match e {
            BlockExpr::Pipe(stages) => {
                if stages.len() < 2 {
                    out.push(error(format!("pipe has {} stage(s); at least 2 are required", stages.len()), span));
                }
                if stages.iter().any(|s| matches!(s, BlockExpr::Pipe(_))) {
                    out.push(error("pipe contains a nested pipe".into(), span));
                }
            }
            BlockExpr::Distribute { nodeset, .. } if !p.nodesets.contains_key(nodeset) => {
                out.push(error(format!("undeclared node set `{nodeset}`"), span));
            }
            BlockExpr::Feedback { cond, .. } if !p.conds.contains_key(cond) => {
                out.push(error(format!("undeclared condition `{cond}`"), span));
            }
            BlockExpr::Seq(f) | BlockExpr::Par(f) => check(NameKind::Logic, f),
            BlockExpr::Reduce(f) | BlockExpr::NToOne(GatherPolicy::Reduce(f)) => check(NameKind::Reducer, f),
            BlockExpr::Spread(f) => check(NameKind::Spreader, f),
            BlockExpr::OneToN(DistPolicy::Unicast(Selector::Auto)) => out.push(Diagnostic {
                severity: Severity::Warning,
                message: "ucast:auto routes round-robin; on-demand routing is not implemented".into(),
                span,
            }),
            _ => {}
        }
    });

    if out.iter().all(|d| d.severity != Severity::Error) {
        if let Err(e) = compile_structure(p) {
            let span = match &e {
                GraphError::Arity { path, .. } => p.source_map.span_of(path),
                _ => None,
            };
            out.push(error(e.to_string(), span));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    fn errors(src: &str) -> Vec<Diagnostic> {
        validate(&parse(src).unwrap())
    }

    #[test]
    fn master_worker_is_clean() {
        let src = "nodeset W = 4;\ncond r = 20;\n\
            seq(init) . feedback(dist[W]{par(test) . par(train)} . reduce(FedAvg) . 1toN(bcast), r)";
        assert_eq!(errors(src), []);
    }

    #[test]
    fn arity_mismatch_points_at_the_stage() {
        let src = "nodeset W = 4;\nnodeset P = 3;\ndist[W]{seq(a)} . NtoOne(gather) . dist[P]{seq(b)}";
        let d = errors(src);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("single stream without a 1toN"), "{}", d[0]);
        let span = d[0].span.unwrap();
        assert_eq!(&src[span.start..span.end], "dist[P]{seq(b)}");
    }

    #[test]
    fn unregistered_reducer() {
        let d = errors("nodeset W = 2;\ndist[W]{seq(a)} . reduce(mystery)");
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("`mystery`"));
        assert_eq!(d[0].span.unwrap().column, 19);
    }

    #[test]
    fn programmatic_invariant_violations() {
        let mut p = Program::new(BlockExpr::Pipe(vec![BlockExpr::seq("a")]));
        assert!(validate(&p).iter().any(|d| d.message.contains("at least 2")));
        p.body = BlockExpr::distribute(BlockExpr::seq("a"), "Q");
        assert!(validate(&p).iter().any(|d| d.message.contains("undeclared node set")));
        p = Program::new(BlockExpr::feedback(BlockExpr::seq("a"), "r")).with_cond("r", CondDecl::Rounds(0));
        assert!(validate(&p).iter().any(|d| d.message.contains("at least one round")));
    }

    #[test]
    fn custom_resolver_and_warnings() {
        let p = parse("seq(a) . seq(b)").unwrap();
        let only_a = |k: NameKind, n: &str| k == NameKind::Logic && n == "a";
        let d = validate_with(&p, &only_a);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("logic `b`"));

        let d = errors("nodeset W = 2;\nseq(a) . 1toN(ucast:auto) . dist[W]{seq(b)} . NtoOne(gather)");
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].severity, Severity::Warning);
    }
}
