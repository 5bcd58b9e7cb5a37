use std::collections::VecDeque;

use super::{ChannelRole, DataflowGraph, DeploymentPlan, GraphError, NodeKind};
use crate::dsl::{DistPolicy, Selector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelStats {
    pub inter_channels: usize,
    /// Inter-dgroup DATA messages added by each feedback round.
    pub per_round_messages: u64,
    /// Inter-dgroup DATA messages independent of the round count.
    pub once_messages: u64,
}

impl ChannelStats {
    pub fn inter_messages(&self, rounds: u32) -> u64 {
        self.once_messages + rounds as u64 * self.per_round_messages
    }
}

#[derive(Clone, Copy)]
enum Token {
    Data(u32),
    Eos,
}

struct InState {
    channel: usize,
    role: ChannelRole,
    queue: VecDeque<u32>,
    closed: bool,
}

struct NodeState {
    inputs: Vec<InState>,
    outputs: Vec<(usize, ChannelRole)>,
    closed_out: Vec<bool>,
    rr: usize,
    done: bool,
}

/// Abstract execution counting the DATA messages every channel would carry.
///
/// Node semantics match the runtime: non-barrier nodes emit once per input,
/// barrier nodes once per complete set of open inputs, routers per their
/// policy, and guards either loop with `round + 1` or exit.
pub fn predict_counts(g: &DataflowGraph, rounds: Option<u32>) -> Result<Vec<u64>, GraphError> {
    let mut counts = vec![0u64; g.channels.len()];
    let mut states: Vec<NodeState> = g
        .nodes
        .iter()
        .map(|n| {
            let mut inputs: Vec<InState> = g
                .inputs_of(n.id)
                .map(|c| InState {
                    channel: c.id as usize,
                    role: c.role,
                    queue: VecDeque::new(),
                    closed: false,
                })
                .collect();
            inputs.sort_by_key(|i| g.channels[i.channel].src);
            let outputs: Vec<(usize, ChannelRole)> = g.outputs_of(n.id).map(|c| (c.id as usize, c.role)).collect();
            NodeState {
                closed_out: vec![false; outputs.len()],
                inputs,
                outputs,
                rr: 0,
                done: false,
            }
        })
        .collect();
    let limit = |n: usize| -> Result<Option<u32>, GraphError> {
        match (&g.nodes[n].guard, rounds) {
            (None, _) => Ok(None),
            (Some(_), Some(r)) => Ok(Some(r)),
            (Some(guard), None) => guard.rounds.map(Some).ok_or_else(|| {
                GraphError::Unpredictable(format!("condition `{}` is unbounded", guard.cond))
            }),
        }
    };

    let mut events: VecDeque<(usize, Token)> = VecDeque::new();
    let send = |state: &mut NodeState, idx: usize, tok: Token, counts: &mut Vec<u64>, events: &mut VecDeque<(usize, Token)>| {
        if state.closed_out[idx] {
            return;
        }
        let ch = state.outputs[idx].0;
        match tok {
            Token::Data(_) => counts[ch] += 1,
            Token::Eos => state.closed_out[idx] = true,
        }
        events.push_back((ch, tok));
    };

    // Emits `round` from node `n` through its post-stage.
    fn dispatch(
        g: &DataflowGraph,
        n: usize,
        state: &mut NodeState,
        targets: &[usize],
        round: u32,
        send: &mut dyn FnMut(&mut NodeState, usize, Token),
    ) {
        match &g.nodes[n].kind {
            NodeKind::Router {
                policy: DistPolicy::Unicast(sel),
            } => {
                if targets.is_empty() {
                    return;
                }
                let pick = match sel {
                    Selector::Fixed(k) => (*k as usize).min(targets.len() - 1),
                    Selector::RoundRobin | Selector::Auto => {
                        let k = state.rr % targets.len();
                        state.rr += 1;
                        k
                    }
                };
                send(state, targets[pick], Token::Data(round));
            }
            _ => {
                for &t in targets {
                    send(state, t, Token::Data(round));
                }
            }
        }
    }

    fn emit(
        g: &DataflowGraph,
        n: usize,
        state: &mut NodeState,
        round: u32,
        limit: Option<u32>,
        send: &mut dyn FnMut(&mut NodeState, usize, Token),
    ) {
        let all: Vec<usize> = (0..state.outputs.len()).collect();
        if g.nodes[n].guard.is_none() {
            return dispatch(g, n, state, &all, round, send);
        }
        let (exit, cont): (Vec<usize>, Vec<usize>) = all.into_iter().partition(|&i| state.outputs[i].1 == ChannelRole::Exit);
        if limit.map_or(true, |r| round < r) {
            dispatch(g, n, state, &cont, round + 1, send);
        } else {
            for &i in &exit {
                send(state, i, Token::Data(round));
            }
            for &i in &cont {
                send(state, i, Token::Eos);
            }
        }
    }

    for n in 0..g.nodes.len() {
        if states[n].inputs.is_empty() {
            let st = &mut states[n];
            let mut s = |st: &mut NodeState, i: usize, t: Token| send(st, i, t, &mut counts, &mut events);
            emit(g, n, st, 0, limit(n)?, &mut s);
            for i in 0..st.outputs.len() {
                s(st, i, Token::Eos);
            }
            st.done = true;
        }
    }

    while let Some((ch, tok)) = events.pop_front() {
        let n = g.channels[ch].dst as usize;
        let lim = limit(n)?;
        let barrier = g.nodes[n].kind.is_barrier();
        let st = &mut states[n];
        if st.done {
            continue;
        }
        let idx = st.inputs.iter().position(|i| i.channel == ch).expect("input registered");
        let mut s = |st: &mut NodeState, i: usize, t: Token| send(st, i, t, &mut counts, &mut events);
        match tok {
            Token::Data(round) => {
                if !barrier || st.inputs[idx].role == ChannelRole::Entry {
                    emit(g, n, st, round, lim, &mut s);
                } else {
                    st.inputs[idx].queue.push_back(round);
                }
            }
            Token::Eos => st.inputs[idx].closed = true,
        }
        if barrier {
            loop {
                let members: Vec<usize> = (0..st.inputs.len())
                    .filter(|&i| st.inputs[i].role != ChannelRole::Entry)
                    .collect();
                let ready = members.iter().any(|&i| !st.inputs[i].queue.is_empty())
                    && members
                        .iter()
                        .all(|&i| !st.inputs[i].queue.is_empty() || st.inputs[i].closed);
                if !ready {
                    break;
                }
                let round = members
                    .iter()
                    .filter_map(|&i| st.inputs[i].queue.pop_front())
                    .max()
                    .expect("at least one queued");
                emit(g, n, st, round, lim, &mut s);
            }
        }
        if st.inputs.iter().all(|i| i.closed) {
            for i in 0..st.outputs.len() {
                s(st, i, Token::Eos);
            }
            st.done = true;
        }
    }
    Ok(counts)
}

/// Static per-round inter-dgroup traffic, derived from one and two feedback cycles.
pub fn channel_stats(plan: &DeploymentPlan) -> Result<ChannelStats, GraphError> {
    let one = predict_counts(&plan.graph, Some(1))?;
    let two = predict_counts(&plan.graph, Some(2))?;
    let inter: Vec<usize> = plan.inter_channels().map(|c| c as usize).collect();
    let sum = |v: &[u64]| inter.iter().map(|&c| v[c]).sum::<u64>();
    let (c1, c2) = (sum(&one), sum(&two));
    Ok(ChannelStats {
        inter_channels: inter.len(),
        per_round_messages: c2 - c1,
        once_messages: 2 * c1 - c2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;
    use crate::graph::{compile_structure, partition, Endpoint};
    use std::collections::BTreeMap;

    fn plan(src: &str, default_group: &str) -> DeploymentPlan {
        let g = compile_structure(&parse(src).unwrap()).unwrap();
        let a = g.assignment_by_home(default_group);
        let eps: BTreeMap<String, Endpoint> = a
            .iter()
            .map(|(_, grp)| (grp.clone(), Endpoint::new("127.0.0.1", 1)))
            .collect();
        partition(&g, &a, &eps).unwrap()
    }

    #[test]
    fn pipeline_counts() {
        let g = compile_structure(&parse("seq(a) . seq(b) . seq(c)").unwrap()).unwrap();
        assert_eq!(predict_counts(&g, None).unwrap(), [1, 1]);
    }

    #[test]
    fn master_worker_per_round_is_two_w() {
        for w in [1u64, 2, 4, 8] {
            let p = plan(
                &format!(
                    "nodeset W = {w};\ncond r = 20;\n\
                     seq(init) . feedback(dist[W]{{par(test) . par(train)}} . reduce(FedAvg) . 1toN(bcast), r)"
                ),
                "A",
            );
            let s = channel_stats(&p).unwrap();
            assert_eq!((s.per_round_messages, s.once_messages), (2 * w, 0));
            let total: u64 = predict_counts(&p.graph, None).unwrap().iter().sum();
            // init->router once, then W down + W up + reducer->router per round.
            assert_eq!(total, 1 + 20 * (2 * w + 1));
        }
    }

    #[test]
    fn p2p_per_round_is_p_times_p_minus_one() {
        for p in [2u64, 4, 8] {
            let plan = plan(
                &format!(
                    "nodeset P = {p};\ncond r = 5;\n\
                     dist[P]{{seq(init)}} . feedback(dist[P]{{par(test) . par(train) . 1toN(bcast) . reduce(FedAvg)}}, r)"
                ),
                "unused",
            );
            let s = channel_stats(&plan).unwrap();
            assert_eq!(s.per_round_messages, p * (p - 1));
            assert_eq!(s.inter_messages(5), 5 * p * (p - 1));
        }
    }

    #[test]
    fn unbounded_needs_override() {
        let g = compile_structure(
            &parse("nodeset L = 2;\ncond f = inf;\nseq(i) . feedback(dist[L]{par(x)} . reduce(F), f)").unwrap(),
        )
        .unwrap();
        assert!(predict_counts(&g, None).is_err());
        assert!(predict_counts(&g, Some(3)).is_ok());
    }
}
