//! Per-node execution loop shared by the in-process and TCP executors.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Select, SendTimeoutError, Sender};

use super::bindings::{fold, payload, Bindings, CallCtx, Emit, Logic, Payload, Reducer, Site, Spreader};
use super::codec::body_len;
use super::trace::{ExecutionTrace, RoundMark};
use super::{RunOptions, RuntimeError};
use crate::dsl::{DistPolicy, GatherPolicy, Selector};
use crate::graph::{ChannelId, ChannelRole, DataflowGraph, GraphError, NameKind, NodeId, NodeKind, NodeSpec};
use crate::tensor::DenseTensor;

const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone)]
pub(crate) enum Msg {
    Data { round: u32, payload: Payload },
    Eos,
}

/// Shared state of one execution.
pub(crate) struct Control {
    start: Instant,
    abort: AtomicBool,
    activity_ms: AtomicU64,
    busy: AtomicUsize,
    error: Mutex<Option<RuntimeError>>,
    pub(crate) trace: Mutex<ExecutionTrace>,
    outputs: Mutex<BTreeMap<NodeId, Vec<(u32, Payload)>>>,
}

impl Control {
    pub(crate) fn new(trace: ExecutionTrace) -> Arc<Control> {
        Arc::new(Control {
            start: Instant::now(),
            abort: AtomicBool::new(false),
            activity_ms: AtomicU64::new(0),
            busy: AtomicUsize::new(0),
            error: Mutex::new(None),
            trace: Mutex::new(trace),
            outputs: Mutex::new(BTreeMap::new()),
        })
    }

    pub(crate) fn touch(&self) {
        self.activity_ms
            .store(self.start.elapsed().as_millis() as u64, Ordering::Relaxed);
    }

    pub(crate) fn aborted(&self) -> bool {
        self.abort.load(Ordering::Relaxed)
    }

    /// Records the first error and stops every thread.
    pub(crate) fn fail(&self, e: RuntimeError) {
        let mut slot = self.error.lock().expect("error slot");
        if slot.is_none() {
            *slot = Some(e);
        }
        self.abort.store(true, Ordering::SeqCst);
    }

    fn idle(&self) -> Duration {
        let now = self.start.elapsed().as_millis() as u64;
        Duration::from_millis(now.saturating_sub(self.activity_ms.load(Ordering::Relaxed)))
    }

    fn busy_scope(&self) -> BusyGuard<'_> {
        self.busy.fetch_add(1, Ordering::SeqCst);
        BusyGuard(self)
    }
}

struct BusyGuard<'a>(&'a Control);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.busy.fetch_sub(1, Ordering::SeqCst);
        self.0.touch();
    }
}

/// Blocking send that gives up when the execution is aborted.
pub(crate) fn send_msg(ctl: &Control, tx: &Sender<Msg>, mut msg: Msg) -> Result<(), RuntimeError> {
    loop {
        match tx.send_timeout(msg, POLL) {
            Ok(()) => {
                ctl.touch();
                return Ok(());
            }
            Err(SendTimeoutError::Timeout(m)) => {
                if ctl.aborted() {
                    return Err(RuntimeError::Aborted);
                }
                msg = m;
            }
            // The receiver finished; nothing left to deliver to.
            Err(SendTimeoutError::Disconnected(_)) => return Ok(()),
        }
    }
}

pub(crate) struct InPort {
    pub src: NodeId,
    pub role: ChannelRole,
    pub rx: Receiver<Msg>,
    /// Payloads from a gatherall merger are unpacked before logic calls.
    pub unpack: bool,
}

pub(crate) struct OutPort {
    pub channel: ChannelId,
    pub role: ChannelRole,
    pub tx: Sender<Msg>,
    pub closed: bool,
}

enum Stage {
    Logic {
        chain: Vec<(String, Box<dyn Logic>)>,
        combiner: Option<(String, Arc<dyn Reducer>)>,
    },
    Router(DistPolicy),
    Spreader(String, Arc<dyn Spreader>),
    Gather,
    Gatherall,
    Reduce(String, Arc<dyn Reducer>),
}

pub(crate) struct NodeRunner {
    spec: NodeSpec,
    label: String,
    stage: Stage,
    inputs: Vec<InPort>,
    outputs: Vec<OutPort>,
    sink: bool,
    rr: usize,
    ended: bool,
    ctl: Arc<Control>,
}

fn unbound(kind: NameKind, name: &str) -> RuntimeError {
    RuntimeError::Graph(GraphError::Unbound {
        kind,
        name: name.to_string(),
    })
}

impl NodeRunner {
    pub(crate) fn new(
        g: &DataflowGraph,
        node: NodeId,
        bindings: &Bindings,
        opts: &RunOptions,
        mut inputs: Vec<InPort>,
        outputs: Vec<OutPort>,
        ctl: Arc<Control>,
    ) -> Result<NodeRunner, RuntimeError> {
        let spec = g.node(node).clone();
        let reducer = |name: &str| {
            bindings
                .reducer(name)
                .cloned()
                .map(|r| (name.to_string(), r))
                .ok_or_else(|| unbound(NameKind::Reducer, name))
        };
        let stage = match &spec.kind {
            NodeKind::Logic { stages, combiner } => {
                let mut chain = Vec::with_capacity(stages.len());
                for (i, name) in stages.iter().enumerate() {
                    let factory = bindings.logic(name).ok_or_else(|| unbound(NameKind::Logic, name))?;
                    let site = Site {
                        node,
                        stage: i,
                        name: name.clone(),
                        home: spec.home.clone(),
                        replica: spec.replica,
                        seed: opts.seed,
                    };
                    chain.push((name.clone(), factory(&site)));
                }
                Stage::Logic {
                    chain,
                    combiner: combiner.as_deref().map(reducer).transpose()?,
                }
            }
            NodeKind::Router { policy } => Stage::Router(policy.clone()),
            NodeKind::Spreader { function } => Stage::Spreader(
                function.clone(),
                bindings
                    .spreader(function)
                    .cloned()
                    .ok_or_else(|| unbound(NameKind::Spreader, function))?,
            ),
            NodeKind::Merger { policy } => match policy {
                GatherPolicy::Gatherall => Stage::Gatherall,
                _ => Stage::Gather,
            },
            NodeKind::Reducer { function } => {
                let (n, r) = reducer(function)?;
                Stage::Reduce(n, r)
            }
        };
        inputs.sort_by_key(|i| i.src);
        if matches!(spec.kind, NodeKind::Logic { .. }) {
            for i in &mut inputs {
                i.unpack = matches!(
                    g.node(i.src).kind,
                    NodeKind::Merger {
                        policy: GatherPolicy::Gatherall
                    }
                );
            }
        }
        Ok(NodeRunner {
            label: spec.kind.label(),
            sink: g.outputs.contains(&node),
            spec,
            stage,
            inputs,
            outputs,
            rr: 0,
            ended: false,
            ctl,
        })
    }

    pub(crate) fn id(&self) -> NodeId {
        self.spec.id
    }

    pub(crate) fn run(mut self) -> Result<(), RuntimeError> {
        let result = self.run_inner();
        if result.is_ok() {
            self.close_all()?;
        }
        result
    }

    fn run_inner(&mut self) -> Result<(), RuntimeError> {
        if self.inputs.is_empty() {
            if let Some(v) = self.chain(Vec::new(), 0)? {
                self.emit(v, 0)?;
            }
            return Ok(());
        }
        let barrier = self.spec.kind.is_barrier();
        let n = self.inputs.len();
        let mut queues: Vec<VecDeque<(u32, Payload)>> = vec![VecDeque::new(); n];
        let mut closed = vec![false; n];
        while closed.iter().any(|c| !c) {
            let (idx, msg) = self.recv(&closed)?;
            match msg {
                Msg::Eos => closed[idx] = true,
                Msg::Data { .. } if self.ended => {}
                Msg::Data { round, payload } => {
                    if self.inputs[idx].role == ChannelRole::Entry {
                        self.emit(payload, round)?;
                    } else if !barrier {
                        let inputs = self.logic_inputs(idx, payload)?;
                        if let Some(v) = self.pre(inputs, round)? {
                            self.emit(v, round)?;
                        }
                    } else {
                        queues[idx].push_back((round, payload));
                    }
                }
            }
            while barrier && !self.ended {
                let members: Vec<usize> = (0..n).filter(|&i| self.inputs[i].role != ChannelRole::Entry).collect();
                let ready = members.iter().any(|&i| !queues[i].is_empty())
                    && members.iter().all(|&i| !queues[i].is_empty() || closed[i]);
                if !ready {
                    break;
                }
                let items: Vec<(u32, Payload)> = members.iter().filter_map(|&i| queues[i].pop_front()).collect();
                let round = items.iter().map(|(r, _)| *r).max().expect("at least one item");
                let parts: Vec<Payload> = items.into_iter().map(|(_, p)| p).collect();
                let v = self.combine(parts)?;
                self.emit(v, round)?;
            }
        }
        Ok(())
    }

    fn recv(&self, closed: &[bool]) -> Result<(usize, Msg), RuntimeError> {
        let open: Vec<usize> = (0..self.inputs.len()).filter(|&i| !closed[i]).collect();
        let mut sel = Select::new();
        for &i in &open {
            sel.recv(&self.inputs[i].rx);
        }
        loop {
            match sel.select_timeout(POLL) {
                Ok(op) => {
                    let idx = open[op.index()];
                    let msg = op.recv(&self.inputs[idx].rx).unwrap_or(Msg::Eos);
                    self.ctl.touch();
                    return Ok((idx, msg));
                }
                Err(_) if self.ctl.aborted() => return Err(RuntimeError::Aborted),
                Err(_) => {}
            }
        }
    }

    fn logic_inputs(&self, idx: usize, p: Payload) -> Result<Vec<Payload>, RuntimeError> {
        if self.inputs[idx].unpack {
            unpack(&p).map_err(|message| self.fault("gatherall", message))
        } else {
            Ok(vec![p])
        }
    }

    fn fault(&self, name: &str, message: String) -> RuntimeError {
        RuntimeError::Node {
            node: self.spec.id,
            label: self.label.clone(),
            name: name.to_string(),
            source: super::LogicError::Other(message),
        }
    }

    /// Per-input work of a non-barrier node.
    fn pre(&mut self, inputs: Vec<Payload>, round: u32) -> Result<Option<Payload>, RuntimeError> {
        match self.stage {
            Stage::Logic { combiner: None, .. } => self.chain(inputs, round),
            _ => Ok(inputs.into_iter().next()),
        }
    }

    /// Barrier work over one item per open input.
    fn combine(&mut self, parts: Vec<Payload>) -> Result<Payload, RuntimeError> {
        let _busy = self.ctl.busy_scope();
        let started = Instant::now();
        let (name, out) = match &self.stage {
            Stage::Reduce(name, r) | Stage::Logic { combiner: Some((name, r)), .. } => (name.clone(), fold(r.as_ref(), &parts)),
            Stage::Gatherall => return Ok(pack(&parts)),
            _ => unreachable!("only barrier stages combine"),
        };
        self.ctl.trace.lock().expect("trace").add_busy(self.spec.id, started.elapsed());
        out.map_err(|source| RuntimeError::Node {
            node: self.spec.id,
            label: self.label.clone(),
            name,
            source,
        })
    }

    /// Runs the logic chain; `None` once a stage ends the stream.
    fn chain(&mut self, inputs: Vec<Payload>, round: u32) -> Result<Option<Payload>, RuntimeError> {
        let Stage::Logic { chain, .. } = &mut self.stage else {
            return Ok(inputs.into_iter().next());
        };
        let ctx = CallCtx {
            node: self.spec.id,
            round,
            replica: self.spec.replica,
        };
        let _busy = self.ctl.busy_scope();
        let started = Instant::now();
        let mut current = inputs;
        let mut result = None;
        for (name, logic) in chain.iter_mut() {
            match logic.call(&ctx, &current) {
                Ok(Emit::Data(p)) => {
                    result = Some(p.clone());
                    current = vec![p];
                }
                Ok(Emit::End) => {
                    result = None;
                    break;
                }
                Err(source) => {
                    return Err(RuntimeError::Node {
                        node: self.spec.id,
                        label: self.label.clone(),
                        name: name.clone(),
                        source,
                    })
                }
            }
        }
        self.ctl.trace.lock().expect("trace").add_busy(self.spec.id, started.elapsed());
        drop(_busy);
        if result.is_none() {
            self.ended = true;
            self.close_all()?;
        }
        Ok(result)
    }

    /// Applies the guard, then the post-stage on the selected outputs.
    fn emit(&mut self, v: Payload, round: u32) -> Result<(), RuntimeError> {
        let all: Vec<usize> = (0..self.outputs.len()).collect();
        let Some(guard) = self.spec.guard.clone() else {
            self.to_sink(round, &v);
            return self.post(v, round, &all);
        };
        let (exit, cont): (Vec<usize>, Vec<usize>) = all
            .into_iter()
            .partition(|&i| self.outputs[i].role == ChannelRole::Exit);
        self.ctl.trace.lock().expect("trace").rounds.push(RoundMark {
            node: self.spec.id,
            round,
            elapsed_ms: self.ctl.start.elapsed().as_secs_f64() * 1e3,
        });
        if guard.continues(round) {
            self.post(v, round + 1, &cont)
        } else {
            self.to_sink(round, &v);
            for &i in &exit {
                self.send(i, round, v.clone())?;
            }
            for &i in &cont {
                self.close(i)?;
            }
            Ok(())
        }
    }

    fn post(&mut self, v: Payload, round: u32, targets: &[usize]) -> Result<(), RuntimeError> {
        if targets.is_empty() {
            return Ok(());
        }
        match &self.stage {
            Stage::Router(DistPolicy::Broadcast) | Stage::Gather | Stage::Gatherall | Stage::Reduce(..) => {}
            Stage::Router(DistPolicy::Unicast(sel)) => {
                let pick = match sel {
                    Selector::Fixed(k) => (*k as usize).min(targets.len() - 1),
                    Selector::RoundRobin | Selector::Auto => {
                        self.rr += 1;
                        (self.rr - 1) % targets.len()
                    }
                };
                return self.send(targets[pick], round, v);
            }
            Stage::Router(DistPolicy::Scatter) => {
                let n = targets.len();
                if v.len() % n != 0 {
                    return Err(RuntimeError::Scatter {
                        node: self.spec.id,
                        tensors: v.len(),
                        outputs: n,
                    });
                }
                let k = v.len() / n;
                for (j, &t) in targets.iter().enumerate() {
                    self.send(t, round, payload(v[j * k..(j + 1) * k].to_vec()))?;
                }
                return Ok(());
            }
            Stage::Spreader(name, s) => {
                let name = name.clone();
                let parts = s.spread(&v, targets.len()).map_err(|source| RuntimeError::Node {
                    node: self.spec.id,
                    label: self.label.clone(),
                    name,
                    source,
                })?;
                for (&t, p) in targets.iter().zip(parts) {
                    self.send(t, round, p)?;
                }
                return Ok(());
            }
            Stage::Logic { combiner: Some(_), .. } => {
                let Some(out) = self.chain(vec![v], round)? else {
                    return Ok(());
                };
                for &t in targets {
                    self.send(t, round, out.clone())?;
                }
                return Ok(());
            }
            Stage::Logic { combiner: None, .. } => {}
        }
        for &t in targets {
            self.send(t, round, v.clone())?;
        }
        Ok(())
    }

    fn to_sink(&self, round: u32, v: &Payload) {
        if self.sink {
            self.ctl
                .outputs
                .lock()
                .expect("outputs")
                .entry(self.spec.id)
                .or_default()
                .push((round, v.clone()));
        }
    }

    fn send(&mut self, idx: usize, round: u32, p: Payload) -> Result<(), RuntimeError> {
        let out = &self.outputs[idx];
        if out.closed {
            return Ok(());
        }
        self.ctl
            .trace
            .lock()
            .expect("trace")
            .record_send(out.channel, 4 + body_len(&p));
        send_msg(&self.ctl, &out.tx, Msg::Data { round, payload: p })
    }

    fn close(&mut self, idx: usize) -> Result<(), RuntimeError> {
        let out = &mut self.outputs[idx];
        if out.closed {
            return Ok(());
        }
        out.closed = true;
        send_msg(&self.ctl, &out.tx, Msg::Eos)
    }

    fn close_all(&mut self) -> Result<(), RuntimeError> {
        for i in 0..self.outputs.len() {
            self.close(i)?;
        }
        Ok(())
    }
}

/// `[counts i64 [n], part0..., part1..., ...]`.
pub(crate) fn pack(parts: &[Payload]) -> Payload {
    let counts: Vec<i64> = parts.iter().map(|p| p.len() as i64).collect();
    let mut out = vec![DenseTensor::from_i64(vec![counts.len() as u32], counts).expect("vector shape")];
    for p in parts {
        out.extend(p.iter().cloned());
    }
    payload(out)
}

pub(crate) fn unpack(p: &Payload) -> Result<Vec<Payload>, String> {
    let head = p.first().ok_or("empty gatherall payload")?;
    let counts = head.as_i64().map_err(|e| e.to_string())?;
    let mut at = 1usize;
    let mut parts = Vec::with_capacity(counts.len());
    for &c in counts {
        let end = at + usize::try_from(c).map_err(|_| format!("negative part length {c}"))?;
        let slice = p.get(at..end).ok_or("gatherall part counts exceed the payload")?;
        parts.push(payload(slice.to_vec()));
        at = end;
    }
    if at != p.len() {
        return Err(format!("{} tensors left after unpacking", p.len() - at));
    }
    Ok(parts)
}

/// A thread body that is not a node, such as a network bridge.
pub(crate) type Task = Box<dyn FnOnce() -> Result<(), RuntimeError> + Send>;

/// Runs every node on its own thread, plus the auxiliary tasks, and watches
/// for stalls while no logic call is in progress.
pub(crate) fn execute(
    runners: Vec<NodeRunner>,
    tasks: Vec<Task>,
    ctl: &Arc<Control>,
    opts: &RunOptions,
) -> Result<(ExecutionTrace, BTreeMap<NodeId, Vec<(u32, Payload)>>), RuntimeError> {
    ctl.touch();
    let mut handles = Vec::new();
    let live: Arc<Mutex<BTreeMap<NodeId, ()>>> = Arc::new(Mutex::new(BTreeMap::new()));
    for r in runners {
        let (ctl, live) = (Arc::clone(ctl), Arc::clone(&live));
        let id = r.id();
        live.lock().expect("live").insert(id, ());
        let h = thread::Builder::new()
            .name(format!("node-{id}"))
            .spawn(move || {
                if let Err(e) = r.run() {
                    ctl.fail(e);
                }
                live.lock().expect("live").remove(&id);
            })
            .expect("spawn node thread");
        handles.push((Some(id), h));
    }
    for t in tasks {
        let ctl = Arc::clone(ctl);
        let h = thread::Builder::new()
            .name("bridge".into())
            .spawn(move || {
                if let Err(e) = t() {
                    ctl.fail(e);
                }
            })
            .expect("spawn bridge thread");
        handles.push((None, h));
    }

    while handles.iter().any(|(_, h)| !h.is_finished()) {
        thread::sleep(Duration::from_millis(10));
        if ctl.aborted() {
            continue;
        }
        if ctl.busy.load(Ordering::SeqCst) == 0 && ctl.idle() > opts.watchdog {
            let blocked: Vec<NodeId> = live.lock().expect("live").keys().copied().collect();
            ctl.fail(RuntimeError::Stalled {
                idle_secs: opts.watchdog.as_secs(),
                blocked,
            });
        }
    }
    for (id, h) in handles {
        if h.join().is_err() {
            ctl.fail(RuntimeError::Panicked(match id {
                Some(n) => format!("node {n}"),
                None => "network bridge".into(),
            }));
        }
    }
    if let Some(e) = ctl.error.lock().expect("error slot").take() {
        return Err(e);
    }
    let mut trace = ctl.trace.lock().expect("trace").clone();
    trace.wall_ms = ctl.start.elapsed().as_secs_f64() * 1e3;
    let outputs = std::mem::take(&mut *ctl.outputs.lock().expect("outputs"));
    Ok((trace, outputs))
}
