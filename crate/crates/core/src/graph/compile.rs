use std::collections::BTreeMap;
use std::fmt;

use super::{Channel, ChannelRole, DataflowGraph, GraphError, Guard, NodeId, NodeKind, NodeSpec};
use crate::dsl::{BlockExpr, CondDecl, DistPolicy, GatherPolicy, Program, Selector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NameKind {
    Logic,
    Reducer,
    Spreader,
}

impl fmt::Display for NameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NameKind::Logic => "logic",
            NameKind::Reducer => "reducer",
            NameKind::Spreader => "spreader",
        })
    }
}

/// Anything that can say whether an identifier is bound.
pub trait Resolve {
    fn resolves(&self, kind: NameKind, name: &str) -> bool;
}

impl<F: Fn(NameKind, &str) -> bool> Resolve for F {
    fn resolves(&self, kind: NameKind, name: &str) -> bool {
        self(kind, name)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stream {
    /// Nothing upstream.
    Source,
    Ports(Vec<NodeId>),
    /// Routers whose outputs go to every consumer of the next stage.
    Fanout(Vec<NodeId>),
    /// A merge whose replica count is fixed by its consumer.
    Pending(Pending),
    /// The input of a feedback body.
    Loop(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    kind: NodeKind,
    inputs: Vec<NodeId>,
    all_to_all: bool,
    /// Only `reduce(f)` may be replicated to match a downstream `dist`.
    splittable: bool,
    path: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Lane {
    stream: Stream,
    group: usize,
    home: Option<String>,
    replica: Option<u32>,
    /// Logic node that a following `seq`/`par` inside the same replica joins.
    open_logic: Option<NodeId>,
}

struct Builder<'p> {
    program: &'p Program,
    nodes: Vec<NodeSpec>,
    channels: Vec<Channel>,
    loops: Vec<Vec<NodeId>>,
    groups: usize,
}

fn arity(path: &[usize], message: impl Into<String>) -> GraphError {
    GraphError::Arity {
        message: message.into(),
        path: path.to_vec(),
    }
}

impl<'p> Builder<'p> {
    fn add(&mut self, kind: NodeKind, home: Option<String>, replica: Option<u32>) -> NodeId {
        let id = self.nodes.len() as NodeId;
        self.nodes.push(NodeSpec {
            id,
            kind,
            home,
            replica,
            guard: None,
        });
        id
    }

    fn connect(&mut self, src: NodeId, dst: NodeId, role: ChannelRole) {
        let role = if role == ChannelRole::Data && self.nodes[src as usize].guard.is_some() {
            ChannelRole::Exit
        } else {
            role
        };
        let id = self.channels.len() as u32;
        self.channels.push(Channel {
            id,
            src,
            dst,
            role,
            feedback: role == ChannelRole::Loop,
        });
    }

    /// Connects a stream into a single consumer node.
    fn feed(&mut self, stream: &Stream, dst: NodeId, what: &str, path: &[usize]) -> Result<(), GraphError> {
        match stream {
            Stream::Source => Ok(()),
            Stream::Ports(ps) if ps.len() == 1 => {
                self.connect(ps[0], dst, ChannelRole::Data);
                Ok(())
            }
            Stream::Ports(ps) => Err(arity(
                path,
                format!("{what} receives {} parallel streams; merge them with NtoOne or reduce first", ps.len()),
            )),
            Stream::Fanout(rs) => {
                for &r in rs {
                    self.connect(r, dst, ChannelRole::Data);
                }
                Ok(())
            }
            Stream::Loop(id) => {
                self.loops[*id].push(dst);
                Ok(())
            }
            Stream::Pending(_) => unreachable!("pending merges are settled before feeding"),
        }
    }

    /// Materialises a pending merge as `count` nodes.
    fn resolve(&mut self, p: Pending, homes: &[(Option<String>, Option<u32>)]) -> Result<Vec<NodeId>, GraphError> {
        let count = homes.len();
        if !p.all_to_all && count > p.inputs.len() {
            return Err(arity(
                &p.path,
                format!("cannot split {} inputs across {count} merge nodes", p.inputs.len()),
            ));
        }
        let ids: Vec<NodeId> = homes
            .iter()
            .map(|(h, r)| self.add(p.kind.clone(), h.clone(), *r))
            .collect();
        if p.all_to_all || count == 1 {
            for &id in &ids {
                for &src in &p.inputs {
                    self.connect(src, id, ChannelRole::Data);
                }
            }
        } else {
            let (base, extra) = (p.inputs.len() / count, p.inputs.len() % count);
            let mut start = 0;
            for (i, &id) in ids.iter().enumerate() {
                let size = base + usize::from(i < extra);
                for &src in &p.inputs[start..start + size] {
                    self.connect(src, id, ChannelRole::Data);
                }
                start += size;
            }
        }
        Ok(ids)
    }

    fn settle(&mut self, lane: &mut Lane) -> Result<Stream, GraphError> {
        if let Stream::Pending(p) = &lane.stream {
            let ids = self.resolve(p.clone(), &[(lane.home.clone(), lane.replica)])?;
            lane.stream = Stream::Ports(ids);
        }
        Ok(lane.stream.clone())
    }

    fn stages(&mut self, e: &BlockExpr, mut lanes: Vec<Lane>, path: &mut Vec<usize>) -> Result<Vec<Lane>, GraphError> {
        match e {
            BlockExpr::Pipe(stages) => {
                for (i, s) in stages.iter().enumerate() {
                    path.push(i);
                    let r = self.stage(s, lanes, path);
                    path.pop();
                    lanes = r?;
                }
                Ok(lanes)
            }
            other => self.stage(other, lanes, path),
        }
    }

    fn stage(&mut self, e: &BlockExpr, mut lanes: Vec<Lane>, path: &mut Vec<usize>) -> Result<Vec<Lane>, GraphError> {
        match e {
            BlockExpr::Pipe(_) => return self.stages(e, lanes, path),
            BlockExpr::Seq(f) | BlockExpr::Par(f) => {
                for lane in &mut lanes {
                    if let (Some(n), Stream::Ports(ps)) = (lane.open_logic, &lane.stream) {
                        if ps.as_slice() == [n] {
                            if let NodeKind::Logic { stages, .. } = &mut self.nodes[n as usize].kind {
                                stages.push(f.clone());
                                continue;
                            }
                        }
                    }
                    let stream = self.settle(lane)?;
                    let kind = NodeKind::Logic {
                        stages: vec![f.clone()],
                        combiner: None,
                    };
                    let n = self.add(kind, lane.home.clone(), lane.replica);
                    self.feed(&stream, n, &format!("`{f}`"), path)?;
                    lane.stream = Stream::Ports(vec![n]);
                    lane.open_logic = lane.replica.map(|_| n);
                }
            }
            BlockExpr::OneToN(_) | BlockExpr::Spread(_) => {
                for lane in &mut lanes {
                    let stream = self.settle(lane)?;
                    let (kind, what) = match e {
                        BlockExpr::OneToN(policy) => (NodeKind::Router { policy: policy.clone() }, "1toN".to_string()),
                        BlockExpr::Spread(f) => (NodeKind::Spreader { function: f.clone() }, format!("spread({f})")),
                        _ => unreachable!(),
                    };
                    if stream == Stream::Source {
                        return Err(arity(path, format!("{what} has no input")));
                    }
                    let n = self.add(kind, lane.home.clone(), lane.replica);
                    self.feed(&stream, n, &what, path)?;
                    lane.stream = Stream::Fanout(vec![n]);
                    lane.open_logic = None;
                }
            }
            BlockExpr::Reduce(_) | BlockExpr::NToOne(_) => {
                let kind = match e {
                    BlockExpr::Reduce(f) | BlockExpr::NToOne(GatherPolicy::Reduce(f)) => {
                        NodeKind::Reducer { function: f.clone() }
                    }
                    BlockExpr::NToOne(policy) => NodeKind::Merger { policy: policy.clone() },
                    _ => unreachable!(),
                };
                for lane in &mut lanes {
                    self.settle(lane)?;
                }
                let mut unions: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
                for lane in &lanes {
                    if let Stream::Fanout(rs) = &lane.stream {
                        let u = unions.entry(lane.group).or_default();
                        for r in rs {
                            if !u.contains(r) {
                                u.push(*r);
                            }
                        }
                    }
                }
                for lane in &mut lanes {
                    let (inputs, all_to_all) = match &lane.stream {
                        Stream::Ports(ps) => (ps.clone(), false),
                        Stream::Fanout(_) => (unions[&lane.group].clone(), true),
                        Stream::Source => return Err(arity(path, "merge has no input")),
                        Stream::Loop(_) => return Err(arity(path, "a feedback body cannot begin with a merge")),
                        Stream::Pending(_) => unreachable!("settled above"),
                    };
                    lane.stream = Stream::Pending(Pending {
                        kind: kind.clone(),
                        inputs,
                        all_to_all,
                        splittable: matches!(e, BlockExpr::Reduce(_)),
                        path: path.clone(),
                    });
                    lane.open_logic = None;
                }
            }
            BlockExpr::Distribute { body, nodeset } => {
                let decl = self.program.nodesets.get(nodeset).ok_or_else(|| GraphError::Undeclared {
                    kind: "node set",
                    name: nodeset.clone(),
                })?;
                let m = decl.cardinality() as usize;
                let mut children = Vec::with_capacity(lanes.len() * m);
                for lane in &mut lanes {
                    let group = self.groups;
                    self.groups += 1;
                    let homes: Vec<(Option<String>, Option<u32>)> = (0..m as u32)
                        .map(|i| {
                            let member = decl.member_name(nodeset, i);
                            let home = match &lane.home {
                                Some(h) => format!("{h}/{member}"),
                                None => member,
                            };
                            (Some(home), Some(i))
                        })
                        .collect();
                    if matches!(&lane.stream, Stream::Pending(p) if !p.splittable) {
                        self.settle(lane)?;
                    }
                    let streams: Vec<Stream> = match std::mem::replace(&mut lane.stream, Stream::Source) {
                        Stream::Pending(p) => self.resolve(p, &homes)?.into_iter().map(|n| Stream::Ports(vec![n])).collect(),
                        Stream::Ports(ps) if ps.len() == m => ps.into_iter().map(|p| Stream::Ports(vec![p])).collect(),
                        Stream::Ports(ps) if ps.len() == 1 => {
                            return Err(arity(
                                path,
                                format!("dist[{nodeset}] has {m} members but is fed by a single stream without a 1toN"),
                            ))
                        }
                        Stream::Ports(ps) => {
                            return Err(arity(
                                path,
                                format!("dist[{nodeset}] has {m} members but is fed by {} streams", ps.len()),
                            ))
                        }
                        other => vec![other; m],
                    };
                    for (stream, (home, replica)) in streams.into_iter().zip(homes) {
                        children.push(Lane {
                            stream,
                            group,
                            home,
                            replica,
                            open_logic: None,
                        });
                    }
                }
                path.push(0);
                let children = self.stages(body, children, path);
                path.pop();
                let mut children = children?;
                for (lane, chunk) in lanes.iter_mut().zip(children.chunks_mut(m)) {
                    let mut ports = Vec::new();
                    let mut routers = Vec::new();
                    for child in chunk {
                        match self.settle(child)? {
                            Stream::Ports(ps) => ports.extend(ps),
                            Stream::Fanout(rs) => {
                                for r in rs {
                                    if !routers.contains(&r) {
                                        routers.push(r);
                                    }
                                }
                            }
                            _ => return Err(arity(path, format!("dist[{nodeset}] body produces no output"))),
                        }
                    }
                    lane.stream = match (ports.is_empty(), routers.is_empty()) {
                        (false, true) => Stream::Ports(ports),
                        (true, false) => Stream::Fanout(routers),
                        _ => return Err(arity(path, format!("dist[{nodeset}] replicas end in mixed stage kinds"))),
                    };
                    lane.open_logic = None;
                }
            }
            BlockExpr::Feedback { body, cond } => {
                let rounds = match self.program.conds.get(cond) {
                    Some(CondDecl::Rounds(r)) => Some(*r),
                    Some(CondDecl::Infinite) => None,
                    None => {
                        return Err(GraphError::Undeclared {
                            kind: "condition",
                            name: cond.clone(),
                        })
                    }
                };
                let mut body_lanes = Vec::with_capacity(lanes.len());
                let mut loop_ids = Vec::with_capacity(lanes.len());
                for lane in &lanes {
                    if let Stream::Loop(_) = lane.stream {
                        return Err(arity(path, "a feedback body cannot begin with another feedback"));
                    }
                    let id = self.loops.len();
                    self.loops.push(Vec::new());
                    loop_ids.push(id);
                    body_lanes.push(Lane {
                        stream: Stream::Loop(id),
                        open_logic: None,
                        ..lane.clone()
                    });
                }
                path.push(0);
                let body_lanes = self.stages(body, body_lanes, path);
                path.pop();
                let body_lanes = body_lanes?;
                for ((lane, mut exit), id) in lanes.iter_mut().zip(body_lanes).zip(loop_ids) {
                    let entries = self.loops[id].clone();
                    if entries.is_empty() {
                        return Err(arity(path, "feedback body never consumes its input"));
                    }
                    let guards = match self.settle(&mut exit)? {
                        Stream::Ports(es) => {
                            if es.len() == entries.len() {
                                for (&e, &n) in es.iter().zip(&entries) {
                                    self.connect(e, n, ChannelRole::Loop);
                                }
                            } else if es.len() == 1 {
                                for &n in &entries {
                                    self.connect(es[0], n, ChannelRole::Loop);
                                }
                            } else {
                                return Err(arity(
                                    path,
                                    format!(
                                        "feedback body ends in {} streams but begins with {} entries",
                                        es.len(),
                                        entries.len()
                                    ),
                                ));
                            }
                            es
                        }
                        Stream::Fanout(rs) => {
                            for &r in &rs {
                                for &n in &entries {
                                    self.connect(r, n, ChannelRole::Loop);
                                }
                            }
                            rs
                        }
                        _ => return Err(arity(path, "feedback body produces no output")),
                    };
                    for &g in &guards {
                        let node = &mut self.nodes[g as usize];
                        if node.guard.is_some() {
                            return Err(arity(path, "nested feedback loops share an exit node"));
                        }
                        node.guard = Some(Guard {
                            cond: cond.clone(),
                            rounds,
                        });
                    }
                    if matches!(&lane.stream, Stream::Pending(p) if !p.splittable) {
                        self.settle(lane)?;
                    }
                    let external = match std::mem::replace(&mut lane.stream, Stream::Source) {
                        Stream::Pending(p) => {
                            let homes: Vec<_> = guards
                                .iter()
                                .map(|&g| (self.nodes[g as usize].home.clone(), self.nodes[g as usize].replica))
                                .collect();
                            Stream::Ports(self.resolve(p, &homes)?)
                        }
                        s => s,
                    };
                    match external {
                        Stream::Ports(ps) if ps.len() == guards.len() => {
                            for (&p, &g) in ps.iter().zip(&guards) {
                                self.connect(p, g, ChannelRole::Entry);
                            }
                        }
                        Stream::Ports(ps) if ps.len() == 1 => {
                            for &g in &guards {
                                self.connect(ps[0], g, ChannelRole::Entry);
                            }
                        }
                        Stream::Ports(ps) => {
                            return Err(arity(
                                path,
                                format!("feedback is fed by {} streams but has {} exit nodes", ps.len(), guards.len()),
                            ))
                        }
                        Stream::Fanout(rs) => {
                            for &r in &rs {
                                for &g in &guards {
                                    self.connect(r, g, ChannelRole::Entry);
                                }
                            }
                        }
                        _ => return Err(arity(path, "feedback needs an input stream")),
                    }
                    lane.stream = Stream::Ports(guards);
                    lane.open_logic = None;
                }
            }
        }
        Ok(lanes)
    }
}

/// Folds a guarded reducer into the logic node it loops back to, when that
/// node sits in the same replica and has no other input.
fn fuse_aggregators(nodes: &mut Vec<Option<NodeSpec>>, channels: &mut Vec<Option<Channel>>, outputs: &mut [NodeId]) {
    for r in 0..nodes.len() {
        let Some(NodeSpec {
            kind: NodeKind::Reducer { function },
            guard: Some(_),
            ..
        }) = &nodes[r]
        else {
            continue;
        };
        let function = function.clone();
        let loops: Vec<usize> = (0..channels.len())
            .filter(|&c| matches!(&channels[c], Some(ch) if ch.src as usize == r && ch.role == ChannelRole::Loop))
            .collect();
        let [lc] = loops[..] else { continue };
        let target = channels[lc].as_ref().expect("live").dst as usize;
        let target_inputs = channels
            .iter()
            .flatten()
            .filter(|c| c.dst as usize == target)
            .count();
        let (red, tgt) = (nodes[r].as_ref().expect("live"), nodes[target].as_ref().expect("live"));
        let fusible = matches!(&tgt.kind, NodeKind::Logic { combiner: None, .. })
            && tgt.guard.is_none()
            && tgt.home == red.home
            && tgt.replica == red.replica
            && target_inputs == 1;
        if !fusible {
            continue;
        }
        let guard = nodes[r].take().expect("live").guard;
        let tgt = nodes[target].as_mut().expect("live");
        if let NodeKind::Logic { combiner, .. } = &mut tgt.kind {
            *combiner = Some(function);
        }
        tgt.guard = guard;
        channels[lc] = None;
        for ch in channels.iter_mut().flatten() {
            if ch.dst as usize == r {
                ch.dst = target as NodeId;
                if ch.role == ChannelRole::Data {
                    ch.feedback = true;
                }
            }
            if ch.src as usize == r {
                ch.src = target as NodeId;
            }
        }
        for o in outputs.iter_mut() {
            if *o as usize == r {
                *o = target as NodeId;
            }
        }
    }
}

/// Builds the graph shape of a program without consulting any bindings.
pub fn compile_structure(p: &Program) -> Result<DataflowGraph, GraphError> {
    let mut b = Builder {
        program: p,
        nodes: Vec::new(),
        channels: Vec::new(),
        loops: Vec::new(),
        groups: 1,
    };
    let top = Lane {
        stream: Stream::Source,
        group: 0,
        home: None,
        replica: None,
        open_logic: None,
    };
    let mut lanes = b.stages(&p.body, vec![top], &mut Vec::new())?;
    let mut outputs = match b.settle(&mut lanes[0])? {
        Stream::Ports(ps) => ps,
        Stream::Fanout(_) => return Err(arity(&[], "the program ends with a 1toN that has no consumer")),
        _ => return Err(arity(&[], "the program produces no output")),
    };

    for n in &b.nodes {
        let fan_out = b.channels.iter().filter(|c| c.src == n.id).count();
        match &n.kind {
            NodeKind::Router { .. } | NodeKind::Spreader { .. } if fan_out == 0 => {
                return Err(arity(&[], format!("{} node {} has no consumer", n.kind.label(), n.id)));
            }
            NodeKind::Router {
                policy: DistPolicy::Unicast(Selector::Fixed(k)),
            } if *k as usize >= fan_out => {
                return Err(arity(&[], format!("unicast target {k} is out of range for {fan_out} outputs")));
            }
            _ => {}
        }
    }

    let mut nodes: Vec<Option<NodeSpec>> = b.nodes.into_iter().map(Some).collect();
    let mut channels: Vec<Option<Channel>> = b.channels.into_iter().map(Some).collect();
    fuse_aggregators(&mut nodes, &mut channels, &mut outputs);

    let mut remap = vec![u32::MAX; nodes.len()];
    let mut live = Vec::new();
    for n in nodes.into_iter().flatten() {
        remap[n.id as usize] = live.len() as NodeId;
        live.push(NodeSpec {
            id: live.len() as NodeId,
            ..n
        });
    }
    let channels: Vec<Channel> = channels
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(i, c)| Channel {
            id: i as u32,
            src: remap[c.src as usize],
            dst: remap[c.dst as usize],
            ..c
        })
        .collect();
    let outputs: Vec<NodeId> = outputs.into_iter().map(|o| remap[o as usize]).collect();
    let inputs = live
        .iter()
        .filter(|n| !channels.iter().any(|c| c.dst == n.id))
        .map(|n| n.id)
        .collect();
    let g = DataflowGraph {
        nodes: live,
        channels,
        inputs,
        outputs,
    };
    g.check()?;
    Ok(g)
}

/// Compiles a program and checks that every identifier it uses is bound.
pub fn compile(p: &Program, bindings: &dyn Resolve) -> Result<DataflowGraph, GraphError> {
    let g = compile_structure(p)?;
    for n in &g.nodes {
        let mut names: Vec<(NameKind, &str)> = Vec::new();
        match &n.kind {
            NodeKind::Logic { stages, combiner } => {
                names.extend(stages.iter().map(|s| (NameKind::Logic, s.as_str())));
                names.extend(combiner.iter().map(|c| (NameKind::Reducer, c.as_str())));
            }
            NodeKind::Reducer { function } => names.push((NameKind::Reducer, function)),
            NodeKind::Spreader { function } => names.push((NameKind::Spreader, function)),
            NodeKind::Router { .. } | NodeKind::Merger { .. } => {}
        }
        for (kind, name) in names {
            if !bindings.resolves(kind, name) {
                return Err(GraphError::Unbound {
                    kind,
                    name: name.to_string(),
                });
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    fn shape(src: &str) -> DataflowGraph {
        compile_structure(&parse(src).unwrap()).unwrap()
    }

    fn edges(g: &DataflowGraph, role: ChannelRole) -> Vec<(NodeId, NodeId)> {
        g.channels.iter().filter(|c| c.role == role).map(|c| (c.src, c.dst)).collect()
    }

    #[test]
    fn two_stage_pipeline() {
        let g = shape("seq(a) . seq(b)");
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.channels.len(), 1);
        assert_eq!((g.inputs.clone(), g.outputs.clone()), (vec![0], vec![1]));
    }

    #[test]
    fn master_worker_topology() {
        let g = shape(
            "nodeset W = 2;\ncond r = 20;\n\
             seq(init) . feedback(dist[W]{par(test) . par(train)} . reduce(FedAvg) . 1toN(bcast), r)",
        );
        let kinds: Vec<String> = g.nodes.iter().map(|n| n.kind.label()).collect();
        assert_eq!(kinds, ["init", "test+train", "test+train", "reduce:FedAvg", "bcast"]);
        assert_eq!(edges(&g, ChannelRole::Data), [(1, 3), (2, 3), (3, 4)]);
        assert_eq!(edges(&g, ChannelRole::Loop), [(4, 1), (4, 2)]);
        assert_eq!(edges(&g, ChannelRole::Entry), [(0, 4)]);
        assert_eq!(g.node(4).guard.as_ref().unwrap().rounds, Some(20));
        assert_eq!(g.node(1).home.as_deref(), Some("W0"));
        assert_eq!(g.outputs, [4]);
    }

    #[test]
    fn p2p_fuses_reducers_into_aggregators() {
        let g = shape(
            "nodeset P = 4;\ncond r = 20;\n\
             dist[P]{seq(init)} . feedback(dist[P]{par(test) . par(train) . 1toN(bcast) . reduce(FedAvg)}, r)",
        );
        assert_eq!(g.nodes.len(), 12);
        let aggs: Vec<&NodeSpec> = g
            .nodes
            .iter()
            .filter(|n| matches!(&n.kind, NodeKind::Logic { combiner: Some(_), .. }))
            .collect();
        assert_eq!(aggs.len(), 4);
        for a in &aggs {
            assert!(a.guard.is_some());
            let from: Vec<NodeId> = g.inputs_of(a.id).filter(|c| c.role == ChannelRole::Data).map(|c| c.src).collect();
            assert_eq!(from.len(), 4, "every distributor reaches aggregator {}", a.id);
            assert!(g.inputs_of(a.id).filter(|c| c.role == ChannelRole::Data).all(|c| c.feedback));
            let own: Vec<&NodeSpec> = g.outputs_of(a.id).map(|c| g.node(c.dst)).collect();
            assert_eq!(own.len(), 1);
            assert_eq!(own[0].home, a.home);
        }
        assert_eq!(g.outputs.len(), 4);
    }

    #[test]
    fn tree_reduces_in_blocks() {
        let g = shape(
            "nodeset L = 4;\nnodeset C = 2;\nnodeset R = 1;\ncond forever = inf;\n\
             seq(init) . feedback(dist[L]{par(infer)} . reduce(F) . dist[C]{par(combine)} . reduce(F) \
             . dist[R]{seq(alert)}, forever)",
        );
        let reducers: Vec<NodeId> = g
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Reducer { .. }))
            .map(|n| n.id)
            .collect();
        assert_eq!(reducers.len(), 3);
        let fan_in: Vec<usize> = reducers.iter().map(|&r| g.inputs_of(r).count()).collect();
        assert_eq!(fan_in, [2, 2, 2]);
        let alert = g.outputs[0];
        assert_eq!(g.outputs_of(alert).filter(|c| c.role == ChannelRole::Loop).count(), 4);
        assert!(g.node(alert).guard.as_ref().unwrap().rounds.is_none());
    }

    #[test]
    fn split_and_fused_all_to_all_compile_identically() {
        let fused = shape("nodeset P = 3;\ndist[P]{seq(a) . 1toN(bcast) . reduce(g)} . NtoOne(gather)");
        let split = shape("nodeset P = 3;\ndist[P]{seq(a) . 1toN(bcast)} . dist[P]{reduce(g)} . NtoOne(gather)");
        assert_eq!(fused, split);
    }

    #[test]
    fn arity_errors() {
        let cases = [
            "nodeset W = 4;\nnodeset P = 3;\ndist[W]{seq(a)} . NtoOne(gather) . dist[P]{seq(b)}",
            "nodeset W = 4;\nnodeset P = 3;\ndist[W]{seq(a)} . dist[P]{seq(b)}",
            "nodeset W = 2;\ndist[W]{seq(a)} . seq(b)",
            "seq(a) . 1toN(bcast)",
            "1toN(bcast) . seq(a)",
            "reduce(f) . seq(a)",
            "nodeset W = 2;\nseq(a) . 1toN(ucast:2) . dist[W]{seq(b)}",
        ];
        for src in cases {
            let err = compile_structure(&parse(src).unwrap()).unwrap_err();
            assert!(matches!(err, GraphError::Arity { .. }), "{src}: {err}");
        }
    }

    #[test]
    fn deterministic_and_bound_checked() {
        let src = "nodeset W = 3;\ncond r = 2;\nseq(i) . feedback(dist[W]{par(t)} . reduce(FedAvg) . 1toN(bcast), r)";
        let p = parse(src).unwrap();
        assert_eq!(compile_structure(&p).unwrap(), compile_structure(&p).unwrap());
        let all = |_: NameKind, _: &str| true;
        assert!(compile(&p, &all).is_ok());
        let no_t = |k: NameKind, n: &str| !(k == NameKind::Logic && n == "t");
        assert_eq!(
            compile(&p, &no_t).unwrap_err(),
            GraphError::Unbound {
                kind: NameKind::Logic,
                name: "t".into()
            }
        );
    }
}
