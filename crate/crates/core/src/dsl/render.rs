use std::fmt::Write;

use super::ast::{BlockExpr, CondDecl, DistPolicy, GatherPolicy, NodeSetDecl, Program, Selector};

/// Pretty-prints a program in the concrete syntax accepted by [`super::parse`].
pub fn render(p: &Program) -> String {
    let mut out = String::new();
    for (name, decl) in &p.nodesets {
        match decl {
            NodeSetDecl::Count(n) => writeln!(out, "nodeset {name} = {n};"),
            NodeSetDecl::Members(m) => writeln!(out, "nodeset {name} = {{{}}};", m.join(", ")),
        }
        .expect("write to string");
    }
    for (name, decl) in &p.conds {
        match decl {
            CondDecl::Rounds(r) => writeln!(out, "cond {name} = {r};"),
            CondDecl::Infinite => writeln!(out, "cond {name} = inf;"),
        }
        .expect("write to string");
    }
    if !out.is_empty() {
        out.push('\n');
    }
    out.push_str(&render_expr(&p.body));
    out.push('\n');
    out
}

pub fn render_expr(e: &BlockExpr) -> String {
    match e {
        BlockExpr::Seq(f) => format!("seq({f})"),
        BlockExpr::Par(f) => format!("par({f})"),
        BlockExpr::Reduce(f) => format!("reduce({f})"),
        BlockExpr::Spread(f) => format!("spread({f})"),
        BlockExpr::Distribute { body, nodeset } => format!("dist[{nodeset}]{{{}}}", render_expr(body)),
        BlockExpr::Pipe(stages) => stages.iter().map(render_expr).collect::<Vec<_>>().join(" . "),
        BlockExpr::Feedback { body, cond } => format!("feedback({}, {cond})", render_expr(body)),
        BlockExpr::OneToN(policy) => {
            let p = match policy {
                DistPolicy::Broadcast => "bcast".to_string(),
                DistPolicy::Scatter => "scatter".to_string(),
                DistPolicy::Unicast(Selector::RoundRobin) => "ucast:rr".to_string(),
                DistPolicy::Unicast(Selector::Auto) => "ucast:auto".to_string(),
                DistPolicy::Unicast(Selector::Fixed(n)) => format!("ucast:{n}"),
            };
            format!("1toN({p})")
        }
        BlockExpr::NToOne(policy) => match policy {
            GatherPolicy::Gather => "NtoOne(gather)".to_string(),
            GatherPolicy::Gatherall => "NtoOne(gatherall)".to_string(),
            GatherPolicy::Reduce(f) => format!("NtoOne(reduce:{f})"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    #[test]
    fn simple_forms() {
        assert_eq!(render_expr(&BlockExpr::seq("init")), "seq(init)");
        let p = BlockExpr::pipe([BlockExpr::seq("a"), BlockExpr::seq("b")]);
        assert_eq!(render_expr(&p), "seq(a) . seq(b)");
    }

    #[test]
    fn p2p_round_trip() {
        let src = "nodeset P = 4;\ncond r = 20;\n\
            dist[P]{seq(init)} . feedback(dist[P]{par(test) . par(train) . 1toN(bcast) . reduce(FedAvg)}, r)";
        let p = parse(src).unwrap();
        let text = render(&p);
        assert_eq!(parse(&text).unwrap(), p);
        assert_eq!(render(&parse(&text).unwrap()), text);
    }
}
