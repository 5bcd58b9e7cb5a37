//! One dgroup of a deployment plan, linked to its peers over TCP.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};

use super::bindings::Bindings;
use super::codec::{max_frame, read_frame, write_frame, MsgKind, TensorMsg, PROTOCOL_VERSION};
use super::engine::{execute, send_msg, Control, InPort, Msg, NodeRunner, OutPort, Task};
use super::trace::ExecutionTrace;
use super::{RunOptions, RunOutput, RuntimeError};
use crate::graph::{ChannelId, DeploymentPlan, NodeId};

const MAGIC: &[u8; 4] = b"DMLF";
const POLL: Duration = Duration::from_millis(50);

fn net_err(channel: ChannelId, addr: &str, message: impl ToString) -> RuntimeError {
    RuntimeError::Network {
        channel,
        addr: addr.to_string(),
        message: message.to_string(),
    }
}

/// Runs the nodes of `group`. Peers are reached through the plan's endpoints:
/// for every inter-dgroup channel the lexicographically smaller group listens
/// and the other connects.
pub fn run_group(
    plan: &DeploymentPlan,
    group: &str,
    bindings: &Bindings,
    opts: &RunOptions,
) -> Result<RunOutput, RuntimeError> {
    let local = plan
        .dgroups
        .get(group)
        .ok_or_else(|| RuntimeError::UnknownGroup(group.to_string()))?;
    let g = &plan.graph;
    let ctl = Control::new(ExecutionTrace::new(g, Some(plan)));

    let mut ins: BTreeMap<NodeId, Vec<InPort>> = BTreeMap::new();
    let mut outs: BTreeMap<NodeId, Vec<OutPort>> = BTreeMap::new();
    let mut writers: BTreeMap<ChannelId, Receiver<Msg>> = BTreeMap::new();
    let mut readers: BTreeMap<ChannelId, Sender<Msg>> = BTreeMap::new();
    let mut accept: BTreeSet<ChannelId> = BTreeSet::new();
    let mut dial: Vec<(ChannelId, String)> = Vec::new();

    for c in &g.channels {
        let (src_here, dst_here) = (local.contains(&c.src), local.contains(&c.dst));
        if !src_here && !dst_here {
            continue;
        }
        let (tx, rx) = bounded(opts.capacity.max(1));
        if src_here {
            outs.entry(c.src).or_default().push(OutPort {
                channel: c.id,
                role: c.role,
                tx: tx.clone(),
                closed: false,
            });
        } else {
            readers.insert(c.id, tx.clone());
        }
        if dst_here {
            ins.entry(c.dst).or_default().push(InPort {
                src: c.src,
                role: c.role,
                rx: rx.clone(),
                unpack: false,
            });
        } else {
            writers.insert(c.id, rx);
        }
        if src_here != dst_here {
            let peer = plan.group_of(if src_here { c.dst } else { c.src });
            if group < peer {
                accept.insert(c.id);
            } else {
                let ep = plan
                    .endpoints
                    .get(peer)
                    .ok_or_else(|| RuntimeError::Graph(crate::graph::GraphError::MissingEndpoint(peer.to_string())))?;
                dial.push((c.id, ep.address()));
            }
        }
    }

    let runners = local
        .iter()
        .map(|&n| {
            NodeRunner::new(
                g,
                n,
                bindings,
                opts,
                ins.remove(&n).unwrap_or_default(),
                outs.remove(&n).unwrap_or_default(),
                Arc::clone(&ctl),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let streams = connect_all(plan, group, accept, dial, opts)?;
    let mut tasks: Vec<Task> = Vec::new();
    for (channel, stream) in streams {
        let ctl = Arc::clone(&ctl);
        if let Some(rx) = writers.remove(&channel) {
            let src = g.channel(channel).src;
            tasks.push(Box::new(move || write_loop(&ctl, stream, channel, src, rx)));
        } else if let Some(tx) = readers.remove(&channel) {
            tasks.push(Box::new(move || read_loop(&ctl, stream, channel, tx)));
        }
    }
    drop(readers);
    let (trace, outputs) = execute(runners, tasks, &ctl, opts)?;
    Ok(RunOutput { outputs, trace })
}

fn connect_all(
    plan: &DeploymentPlan,
    group: &str,
    accept: BTreeSet<ChannelId>,
    dial: Vec<(ChannelId, String)>,
    opts: &RunOptions,
) -> Result<Vec<(ChannelId, TcpStream)>, RuntimeError> {
    let deadline = Instant::now() + opts.connect_timeout;
    let listener = if accept.is_empty() {
        None
    } else {
        let ep = plan
            .endpoints
            .get(group)
            .ok_or_else(|| RuntimeError::Graph(crate::graph::GraphError::MissingEndpoint(group.to_string())))?;
        let addr = ep.address();
        let l = TcpListener::bind(&addr).map_err(|e| net_err(*accept.first().expect("non-empty"), &addr, e))?;
        l.set_nonblocking(true).map_err(|e| net_err(0, &addr, e))?;
        Some((l, addr))
    };
    let acceptor = listener.map(|(l, addr)| thread::spawn(move || accept_loop(l, addr, accept, deadline)));

    let mut streams = Vec::new();
    for (channel, addr) in dial {
        streams.push((channel, dial_one(channel, &addr, deadline)?));
    }
    if let Some(h) = acceptor {
        streams.extend(h.join().map_err(|_| RuntimeError::Panicked("acceptor".into()))??);
    }
    for (channel, s) in &streams {
        s.set_nodelay(true).map_err(|e| net_err(*channel, "", e))?;
    }
    Ok(streams)
}

fn accept_loop(
    l: TcpListener,
    addr: String,
    mut pending: BTreeSet<ChannelId>,
    deadline: Instant,
) -> Result<Vec<(ChannelId, TcpStream)>, RuntimeError> {
    let mut out = Vec::new();
    while !pending.is_empty() {
        match l.accept() {
            Ok((mut s, _)) => {
                s.set_nonblocking(false).map_err(|e| net_err(0, &addr, e))?;
                s.set_read_timeout(Some(Duration::from_secs(10))).map_err(|e| net_err(0, &addr, e))?;
                let mut hello = [0u8; 9];
                s.read_exact(&mut hello).map_err(|e| net_err(0, &addr, format!("handshake: {e}")))?;
                let channel = u32::from_le_bytes([hello[5], hello[6], hello[7], hello[8]]);
                let ok = &hello[..4] == MAGIC && hello[4] == PROTOCOL_VERSION && pending.remove(&channel);
                s.write_all(&[u8::from(ok)]).map_err(|e| net_err(channel, &addr, e))?;
                if !ok {
                    return Err(net_err(channel, &addr, "unexpected handshake"));
                }
                s.set_read_timeout(None).map_err(|e| net_err(channel, &addr, e))?;
                out.push((channel, s));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() > deadline {
                    return Err(net_err(
                        *pending.first().expect("non-empty"),
                        &addr,
                        format!("timed out waiting for {} peer connection(s)", pending.len()),
                    ));
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(net_err(0, &addr, e)),
        }
    }
    Ok(out)
}

fn dial_one(channel: ChannelId, addr: &str, deadline: Instant) -> Result<TcpStream, RuntimeError> {
    let mut backoff = Duration::from_millis(20);
    loop {
        let attempt = addr
            .to_socket_addrs()
            .map_err(|e| net_err(channel, addr, e))?
            .next()
            .ok_or_else(|| net_err(channel, addr, "address does not resolve"))
            .and_then(|sa| TcpStream::connect_timeout(&sa, Duration::from_secs(2)).map_err(|e| net_err(channel, addr, e)));
        match attempt {
            Ok(mut s) => {
                let mut hello = MAGIC.to_vec();
                hello.push(PROTOCOL_VERSION);
                hello.extend_from_slice(&channel.to_le_bytes());
                s.write_all(&hello).map_err(|e| net_err(channel, addr, e))?;
                let mut ack = [0u8; 1];
                s.read_exact(&mut ack).map_err(|e| net_err(channel, addr, format!("handshake: {e}")))?;
                if ack[0] != 1 {
                    return Err(net_err(channel, addr, "peer rejected the channel"));
                }
                return Ok(s);
            }
            Err(e) if Instant::now() > deadline => return Err(e),
            Err(_) => {
                thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_millis(500));
            }
        }
    }
}

fn write_loop(ctl: &Control, mut s: TcpStream, channel: ChannelId, src: NodeId, rx: Receiver<Msg>) -> Result<(), RuntimeError> {
    let io = |e: super::codec::CodecError| RuntimeError::Codec { channel, source: e };
    loop {
        let msg = match rx.recv_timeout(POLL) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) if ctl.aborted() => return Err(RuntimeError::Aborted),
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return Ok(()),
        };
        match msg {
            Msg::Data { round, payload } => {
                write_frame(&mut s, &TensorMsg::data(src, channel, round, payload.to_vec())).map_err(io)?;
            }
            Msg::Eos => {
                write_frame(&mut s, &TensorMsg::eos(src, channel, 0)).map_err(io)?;
                s.flush().map_err(|e| io(e.into()))?;
                let _ = s.shutdown(Shutdown::Write);
                return Ok(());
            }
        }
        ctl.touch();
    }
}

/// Retries timed-out reads until the execution aborts.
struct Patient<'a> {
    s: &'a mut TcpStream,
    ctl: &'a Control,
}

impl Read for Patient<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        loop {
            match self.s.read(buf) {
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    if self.ctl.aborted() {
                        return Err(io::Error::other("aborted"));
                    }
                }
                r => return r,
            }
        }
    }
}

fn read_loop(ctl: &Control, mut s: TcpStream, channel: ChannelId, tx: Sender<Msg>) -> Result<(), RuntimeError> {
    s.set_read_timeout(Some(POLL))
        .map_err(|e| RuntimeError::Codec { channel, source: e.into() })?;
    let max = max_frame();
    let mut r = Patient { s: &mut s, ctl };
    loop {
        let frame = match read_frame(&mut r, max) {
            Ok(f) => f,
            Err(_) if ctl.aborted() => return Err(RuntimeError::Aborted),
            Err(e) => return Err(RuntimeError::Codec { channel, source: e }),
        };
        let Some(m) = frame else {
            return Err(RuntimeError::PeerClosed { channel });
        };
        if m.envelope.channel != channel {
            return Err(RuntimeError::Network {
                channel,
                addr: String::new(),
                message: format!("frame for channel {} on this connection", m.envelope.channel),
            });
        }
        ctl.touch();
        match m.envelope.kind {
            MsgKind::Data => send_msg(
                ctl,
                &tx,
                Msg::Data {
                    round: m.envelope.round,
                    payload: Arc::new(m.payload),
                },
            )?,
            MsgKind::Eos => return send_msg(ctl, &tx, Msg::Eos),
            MsgKind::RoundEnd => {}
        }
    }
}
