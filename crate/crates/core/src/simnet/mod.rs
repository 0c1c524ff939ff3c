//! Simulated device mesh with per-device clocks and exact byte accounting.
//!
//! Time and values are independent: payloads move unchanged, while each
//! transfer advances simulated clocks according to the topology.
//!
//! Bytes charged to a device are its egress under the algorithm-bandwidth
//! model: a p2p send charges the payload, an all-reduce of `B` bytes charges
//! `2(n-1)/n·B`, an all-gather with gathered size `G` charges `(n-1)/n·G`,
//! and an all-to-all charges the full send buffer. Groups of one device move
//! nothing and charge nothing.

mod topology;

use std::collections::{BTreeMap, HashMap, VecDeque};

use num_rational::Ratio;
use serde::Serialize;

pub use topology::{InterLinkSpec, IntraLinkSpec, Link, LinkKind, Topology};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Exact byte count; collectives charge fractional multiples of the payload.
pub type Bytes = Ratio<u128>;

pub fn bytes(n: u64) -> Bytes {
    Ratio::from_integer(n as u128)
}

pub fn bytes_to_f64(b: &Bytes) -> f64 {
    *b.numer() as f64 / *b.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    AllToAll,
}

impl CollectiveKind {
    /// Multiplier from payload bytes to per-device egress.
    pub fn algobw_factor(self, n: usize) -> Ratio<u128> {
        let n = n as u128;
        match self {
            CollectiveKind::AllReduce => Ratio::new(2 * (n - 1), n),
            CollectiveKind::AllGather => Ratio::new(n - 1, n),
            CollectiveKind::AllToAll => Ratio::from_integer(1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "all_reduce",
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::AllToAll => "all_to_all",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub seq: u64,
    pub src: usize,
    pub dst: usize,
    pub tag: String,
    pub bytes: u64,
    pub send_time: f64,
    pub deliver_time: f64,
    pub overlap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveRecord {
    pub seq: u64,
    pub kind: CollectiveKind,
    pub group: Vec<usize>,
    /// Per-device egress charged by this collective, in group order.
    pub charged: Vec<Bytes>,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogEntry {
    P2p(DeliveryRecord),
    Collective(CollectiveRecord),
}

impl LogEntry {
    pub fn seq(&self) -> u64 {
        match self {
            LogEntry::P2p(r) => r.seq,
            LogEntry::Collective(r) => r.seq,
        }
    }

    pub fn time(&self) -> f64 {
        match self {
            LogEntry::P2p(r) => r.send_time,
            LogEntry::Collective(r) => r.start,
        }
    }
}

/// Pending asynchronous all-gather.
#[derive(Debug, Clone)]
pub struct GatherHandle {
    pub parts: Vec<Tensor>,
    pub ready_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElapsedReport {
    pub device_time: Vec<f64>,
    pub compute_time: Vec<f64>,
    pub wait_time: Vec<f64>,
    /// p2p payload bytes per directed `(src, dst)` pair.
    pub link_bytes: BTreeMap<(usize, usize), u64>,
    #[serde(serialize_with = "ser_bytes_vec")]
    pub device_bytes: Vec<Bytes>,
    pub collective_counts: BTreeMap<CollectiveKind, u64>,
    pub p2p_count: u64,
}

fn ser_bytes_vec<S: serde::Serializer>(v: &[Bytes], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(bytes_to_f64))
}

impl ElapsedReport {
    pub fn makespan(&self) -> f64 {
        self.device_time.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_device_bytes(&self) -> Bytes {
        self.device_bytes.iter().cloned().max().unwrap_or_else(|| bytes(0))
    }

    pub fn total_bytes(&self) -> Bytes {
        self.device_bytes.iter().cloned().fold(bytes(0), |a, b| a + b)
    }
}

#[derive(Debug, Clone)]
pub struct SimNet {
    topology: Topology,
    element_size: usize,
    clocks: Vec<f64>,
    compute_time: Vec<f64>,
    wait_time: Vec<f64>,
    log: Vec<LogEntry>,
    mailbox: HashMap<(usize, usize, String), VecDeque<(Tensor, f64)>>,
    link_bytes: BTreeMap<(usize, usize), u64>,
    device_bytes: Vec<Bytes>,
    collective_counts: BTreeMap<CollectiveKind, u64>,
    p2p_count: u64,
    seq: u64,
}

impl SimNet {
    /// A mesh over the first `num_devices` devices of `topology`.
    pub fn new(topology: Topology, num_devices: usize, element_size: usize) -> Result<Self> {
        topology.validate()?;
        if num_devices == 0 || num_devices > topology.num_devices() {
            return Err(Error::Config(format!(
                "mesh of {num_devices} devices does not fit topology with {}",
                topology.num_devices()
            )));
        }
        Ok(Self {
            topology,
            element_size,
            clocks: vec![0.0; num_devices],
            compute_time: vec![0.0; num_devices],
            wait_time: vec![0.0; num_devices],
            log: Vec::new(),
            mailbox: HashMap::new(),
            link_bytes: BTreeMap::new(),
            device_bytes: vec![bytes(0); num_devices],
            collective_counts: BTreeMap::new(),
            p2p_count: 0,
            seq: 0,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.clocks.len()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn element_size(&self) -> usize {
        self.element_size
    }

    pub fn clock(&self, dev: usize) -> f64 {
        self.clocks[dev]
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    fn check(&self, dev: usize) -> Result<()> {
        if dev < self.clocks.len() {
            Ok(())
        } else {
            Err(Error::UnknownDevice(dev))
        }
    }

    fn check_group(&self, group: &[usize]) -> Result<()> {
        for (i, &d) in group.iter().enumerate() {
            self.check(d)?;
            if group[..i].contains(&d) {
                return Err(Error::Collective {
                    op: "group",
                    msg: format!("device {d} repeated"),
                });
            }
        }
        if group.is_empty() {
            return Err(Error::Collective {
                op: "group",
                msg: "empty group".into(),
            });
        }
        Ok(())
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn payload(&self, t: &Tensor) -> u64 {
        t.bytes(self.element_size)
    }

    pub fn compute(&mut self, dev: usize, flops: f64) {
        let dt = flops / self.topology.throughput();
        self.clocks[dev] += dt;
        self.compute_time[dev] += dt;
    }

    /// Posts a message. With `overlap`, the sender does not wait for it.
    pub fn send(&mut self, src: usize, dst: usize, tag: &str, tensor: Tensor, overlap: bool) -> Result<DeliveryRecord> {
        self.check(src)?;
        self.check(dst)?;
        if src == dst {
            return Err(Error::Collective {
                op: "p2p_send",
                msg: format!("source and destination are both {src}"),
            });
        }
        let b = self.payload(&tensor);
        let link = self.topology.link_between(src, dst);
        let send_time = self.clocks[src];
        let deliver_time = send_time + link.transfer_time(b as f64);
        if !overlap {
            self.clocks[src] = deliver_time;
        }
        let rec = DeliveryRecord {
            seq: self.next_seq(),
            src,
            dst,
            tag: tag.to_string(),
            bytes: b,
            send_time,
            deliver_time,
            overlap,
        };
        *self.link_bytes.entry((src, dst)).or_default() += b;
        self.device_bytes[src] += bytes(b);
        self.p2p_count += 1;
        self.mailbox
            .entry((src, dst, tag.to_string()))
            .or_default()
            .push_back((tensor, deliver_time));
        self.log.push(LogEntry::P2p(rec.clone()));
        Ok(rec)
    }

    /// Takes the oldest message on `(src, dst, tag)`, waiting for delivery.
    pub fn recv(&mut self, dst: usize, src: usize, tag: &str) -> Result<Tensor> {
        let (t, at) = self
            .mailbox
            .get_mut(&(src, dst, tag.to_string()))
            .and_then(|q| q.pop_front())
            .ok_or_else(|| Error::NoMessage {
                src,
                dst,
                tag: tag.to_string(),
            })?;
        self.wait_until(dst, at);
        Ok(t)
    }

    pub fn pending_messages(&self) -> usize {
        self.mailbox.values().map(|q| q.len()).sum()
    }

    fn wait_until(&mut self, dev: usize, at: f64) {
        if at > self.clocks[dev] {
            self.wait_time[dev] += at - self.clocks[dev];
            self.clocks[dev] = at;
        }
    }

    fn charge_collective(&mut self, kind: CollectiveKind, group: &[usize], payload: &[u64], advance: bool) -> f64 {
        let n = group.len();
        let factor = kind.algobw_factor(n);
        let charged: Vec<Bytes> = payload.iter().map(|&b| factor * bytes(b)).collect();
        let link = self.topology.group_link(group);
        let start = group.iter().map(|&d| self.clocks[d]).fold(0.0, f64::max);
        let heaviest = charged.iter().cloned().max().unwrap_or_else(|| bytes(0));
        let end = start + link.transfer_time(bytes_to_f64(&heaviest));
        for (&d, c) in group.iter().zip(&charged) {
            self.device_bytes[d] += *c;
            if advance {
                self.wait_until(d, end);
            }
        }
        *self.collective_counts.entry(kind).or_default() += 1;
        let seq = self.next_seq();
        self.log.push(LogEntry::Collective(CollectiveRecord {
            seq,
            kind,
            group: group.to_vec(),
            charged,
            start,
            end,
        }));
        end
    }

    /// Elementwise sum over the group, accumulated in group order.
    pub fn all_reduce(&mut self, group: &[usize], inputs: Vec<Tensor>) -> Result<Tensor> {
        self.check_group(group)?;
        if inputs.len() != group.len() {
            return Err(Error::Collective {
                op: "all_reduce",
                msg: format!("{} inputs for a group of {}", inputs.len(), group.len()),
            });
        }
        let mut it = inputs.into_iter();
        let mut acc = it.next().expect("non-empty group");
        for t in it {
            if t.shape() != acc.shape() {
                return Err(Error::Collective {
                    op: "all_reduce",
                    msg: format!("ragged inputs {:?} vs {:?}", acc.shape(), t.shape()),
                });
            }
            acc.add_assign(&t)?;
        }
        if group.len() > 1 {
            let b = self.payload(&acc);
            self.charge_collective(CollectiveKind::AllReduce, group, &vec![b; group.len()], true);
        }
        Ok(acc)
    }

    fn gather_sizes(&self, group: &[usize], parts: &[Tensor]) -> Result<u64> {
        if parts.len() != group.len() {
            return Err(Error::Collective {
                op: "all_gather",
                msg: format!("{} parts for a group of {}", parts.len(), group.len()),
            });
        }
        let cols = parts[0].shape()[1..].to_vec();
        if parts.iter().any(|p| p.shape()[1..] != cols[..]) {
            return Err(Error::Collective {
                op: "all_gather",
                msg: "ragged parts".into(),
            });
        }
        Ok(parts.iter().map(|p| self.payload(p)).sum())
    }

    /// Every device receives all parts, in group order.
    pub fn all_gather(&mut self, group: &[usize], parts: Vec<Tensor>) -> Result<Vec<Tensor>> {
        self.check_group(group)?;
        let total = self.gather_sizes(group, &parts)?;
        if group.len() > 1 {
            self.charge_collective(CollectiveKind::AllGather, group, &vec![total; group.len()], true);
        }
        Ok(parts)
    }

    /// Starts an all-gather without blocking; see [`SimNet::wait`].
    pub fn all_gather_async(&mut self, group: &[usize], parts: Vec<Tensor>) -> Result<GatherHandle> {
        self.check_group(group)?;
        let total = self.gather_sizes(group, &parts)?;
        let ready_time = if group.len() > 1 {
            self.charge_collective(CollectiveKind::AllGather, group, &vec![total; group.len()], false)
        } else {
            self.clocks[group[0]]
        };
        Ok(GatherHandle { parts, ready_time })
    }

    pub fn wait(&mut self, dev: usize, handle: &GatherHandle) {
        self.wait_until(dev, handle.ready_time);
    }

    /// `send[i][j]` goes from `group[i]` to `group[j]`; returns `recv[j][i]`.
    pub fn all_to_all(&mut self, group: &[usize], send: Vec<Vec<Tensor>>) -> Result<Vec<Vec<Tensor>>> {
        self.check_group(group)?;
        let n = group.len();
        if send.len() != n || send.iter().any(|r| r.len() != n) {
            return Err(Error::Collective {
                op: "all_to_all",
                msg: format!("expected {n}x{n} shards"),
            });
        }
        for j in 0..n {
            let s = send[0][j].shape()[1..].to_vec();
            if send.iter().any(|r| r[j].shape()[1..] != s[..]) {
                return Err(Error::Collective {
                    op: "all_to_all",
                    msg: format!("ragged shards for destination {j}"),
                });
            }
        }
        if n > 1 {
            let payload: Vec<u64> = send.iter().map(|r| r.iter().map(|t| self.payload(t)).sum()).collect();
            self.charge_collective(CollectiveKind::AllToAll, group, &payload, true);
        }
        let mut recv: Vec<Vec<Option<Tensor>>> = (0..n).map(|_| (0..n).map(|_| None).collect()).collect();
        for (i, row) in send.into_iter().enumerate() {
            for (j, t) in row.into_iter().enumerate() {
                recv[j][i] = Some(t);
            }
        }
        Ok(recv
            .into_iter()
            .map(|r| r.into_iter().map(|t| t.expect("filled")).collect())
            .collect())
    }

    /// Each member receives the tensor of the member `steps` places before it.
    pub fn ring_shift(&mut self, group: &[usize], tensors: Vec<Tensor>, steps: usize, tag: &str, overlap: bool) -> Result<Vec<Tensor>> {
        self.check_group(group)?;
        let n = group.len();
        if tensors.len() != n {
            return Err(Error::Collective {
                op: "ring_shift",
                msg: format!("{} tensors for a ring of {n}", tensors.len()),
            });
        }
        let mut cur = tensors;
        if n == 1 {
            return Ok(cur);
        }
        for hop in 0..steps {
            let htag = format!("{tag}#{hop}");
            for (i, t) in cur.iter().enumerate() {
                self.send(group[i], group[(i + 1) % n], &htag, t.clone(), overlap)?;
            }
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                next.push(self.recv(group[i], group[(i + n - 1) % n], &htag)?);
            }
            cur = next;
        }
        Ok(cur)
    }

    pub fn elapsed_report(&self) -> ElapsedReport {
        ElapsedReport {
            device_time: self.clocks.clone(),
            compute_time: self.compute_time.clone(),
            wait_time: self.wait_time.clone(),
            link_bytes: self.link_bytes.clone(),
            device_bytes: self.device_bytes.clone(),
            collective_counts: self.collective_counts.clone(),
            p2p_count: self.p2p_count,
        }
    }

    /// Log entries ordered by `(time, seq)`.
    pub fn sorted_log(&self) -> Vec<LogEntry> {
        let mut v = self.log.clone();
        v.sort_by(|a, b| a.time().total_cmp(&b.time()).then(a.seq().cmp(&b.seq())));
        v
    }
}
