//! Hardware description: nodes, links and device throughput.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Nvlink,
    Pcie,
    Ethernet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub kind: LinkKind,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds.
    pub latency: f64,
}

impl Link {
    pub fn transfer_time(&self, bytes: f64) -> f64 {
        self.latency + bytes / self.bandwidth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraLinkSpec {
    pub kind: LinkKind,
    pub gbytes_per_s: f64,
    pub latency_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterLinkSpec {
    pub kind: LinkKind,
    pub gbits_per_s: f64,
    pub latency_us: f64,
}

/// On-disk topology description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: usize,
    pub devices_per_node: usize,
    /// Devices sharing a socket; groups spanning sockets use `qpi` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub devices_per_socket: Option<usize>,
    pub intra_node: IntraLinkSpec,
    pub inter_node: InterLinkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qpi: Option<IntraLinkSpec>,
    pub device_gflops: f64,
}

impl Topology {
    pub fn single_node(devices: usize, kind: LinkKind, gbytes_per_s: f64, latency_us: f64, gflops: f64) -> Self {
        Self {
            nodes: 1,
            devices_per_node: devices,
            devices_per_socket: None,
            intra_node: IntraLinkSpec {
                kind,
                gbytes_per_s,
                latency_us,
            },
            inter_node: InterLinkSpec {
                kind: LinkKind::Ethernet,
                gbits_per_s: 100.0,
                latency_us: 10.0,
            },
            qpi: None,
            device_gflops: gflops,
        }
    }

    /// 600 GB/s NVLink box with A100-class throughput.
    pub fn nvlink_node(devices: usize) -> Self {
        Self::single_node(devices, LinkKind::Nvlink, 600.0, 10.0, 150_000.0)
    }

    /// Two PCIe nodes (25 GB/s) joined by 100 Gbit/s Ethernet.
    pub fn two_node_pcie_ethernet(devices_per_node: usize) -> Self {
        Self {
            nodes: 2,
            devices_per_node,
            devices_per_socket: None,
            intra_node: IntraLinkSpec {
                kind: LinkKind::Pcie,
                gbytes_per_s: 25.0,
                latency_us: 10.0,
            },
            inter_node: InterLinkSpec {
                kind: LinkKind::Ethernet,
                gbits_per_s: 100.0,
                latency_us: 30.0,
            },
            qpi: None,
            device_gflops: 150_000.0,
        }
    }

    pub fn num_devices(&self) -> usize {
        self.nodes * self.devices_per_node
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("topology: {m}")));
        if self.nodes == 0 || self.devices_per_node == 0 {
            return bad("nodes and devices_per_node must be positive");
        }
        if !(self.intra_node.gbytes_per_s > 0.0) || !(self.inter_node.gbits_per_s > 0.0) {
            return bad("bandwidth must be positive");
        }
        if !(self.intra_node.latency_us >= 0.0) || !(self.inter_node.latency_us >= 0.0) {
            return bad("latency must be non-negative");
        }
        if let Some(q) = &self.qpi {
            if !(q.gbytes_per_s > 0.0) || !(q.latency_us >= 0.0) {
                return bad("qpi link parameters out of range");
            }
        }
        if let Some(s) = self.devices_per_socket {
            if s == 0 || self.devices_per_node % s != 0 {
                return bad("devices_per_socket must divide devices_per_node");
            }
        }
        if !(self.device_gflops > 0.0) {
            return bad("device_gflops must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read topology {}: {e}", path.display())))?;
        let t: Topology = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn node_of(&self, device: usize) -> usize {
        device / self.devices_per_node
    }

    fn socket_of(&self, device: usize) -> Option<usize> {
        self.devices_per_socket.map(|s| device / s)
    }

    pub fn intra_link(&self) -> Link {
        Link {
            kind: self.intra_node.kind,
            bandwidth: self.intra_node.gbytes_per_s * 1e9,
            latency: self.intra_node.latency_us * 1e-6,
        }
    }

    pub fn inter_link(&self) -> Link {
        Link {
            kind: self.inter_node.kind,
            bandwidth: self.inter_node.gbits_per_s * 1e9 / 8.0,
            latency: self.inter_node.latency_us * 1e-6,
        }
    }

    fn qpi_link(&self) -> Option<Link> {
        self.qpi.as_ref().map(|q| Link {
            kind: q.kind,
            bandwidth: q.gbytes_per_s * 1e9,
            latency: q.latency_us * 1e-6,
        })
    }

    pub fn link_between(&self, a: usize, b: usize) -> Link {
        if self.node_of(a) != self.node_of(b) {
            return self.inter_link();
        }
        match (self.socket_of(a), self.socket_of(b), self.qpi_link()) {
            (Some(sa), Some(sb), Some(q)) if sa != sb => q,
            _ => self.intra_link(),
        }
    }

    /// Bottleneck link of a group: slowest bandwidth, largest latency.
    pub fn group_link(&self, devices: &[usize]) -> Link {
        let mut worst: Option<Link> = None;
        for (i, &a) in devices.iter().enumerate() {
            for &b in &devices[i + 1..] {
                let l = self.link_between(a, b);
                worst = Some(match worst {
                    None => l,
                    Some(w) => Link {
                        kind: if l.bandwidth < w.bandwidth { l.kind } else { w.kind },
                        bandwidth: w.bandwidth.min(l.bandwidth),
                        latency: w.latency.max(l.latency),
                    },
                });
            }
        }
        worst.unwrap_or_else(|| self.intra_link())
    }

    pub fn throughput(&self) -> f64 {
        self.device_gflops * 1e9
    }

    /// Copy with every bandwidth multiplied by `factor`.
    pub fn scale_bandwidth(&self, factor: f64) -> Self {
        let mut t = self.clone();
        t.intra_node.gbytes_per_s *= factor;
        t.inter_node.gbits_per_s *= factor;
        if let Some(q) = &mut t.qpi {
            q.gbytes_per_s *= factor;
        }
        t
    }
}
