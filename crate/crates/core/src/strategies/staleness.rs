//! Which diffusion step produced the K/V each attention reads.
//!
//! [`staleness_oracle`] replays the write/read schedule of a strategy as a
//! plain event list, with no numerics, so the engines' buffer stamps can be
//! checked against an independent account.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StaleStrategy {
    PipeFusion,
    DistriFusion,
}

/// `(step, micro_step, block, patch)`.
pub type FreshKey = (usize, usize, usize, usize);

/// Step stamp of the K/V visible at each attention read.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FreshnessTable {
    pub entries: BTreeMap<FreshKey, usize>,
}

impl FreshnessTable {
    pub fn insert(&mut self, key: FreshKey, stamp: usize) {
        self.entries.insert(key, stamp);
    }

    pub fn get(&self, key: FreshKey) -> Option<usize> {
        self.entries.get(&key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Patches read fresh at `(step, micro_step, block)`.
    pub fn fresh_patches(&self, step: usize, micro: usize, block: usize) -> Vec<usize> {
        self.entries
            .range((step, micro, block, 0)..=(step, micro, block, usize::MAX))
            .filter(|(_, &s)| s == step)
            .map(|(k, _)| k.3)
            .collect()
    }

    pub fn micro_steps(&self, step: usize) -> usize {
        self.entries
            .range((step, 0, 0, 0)..=(step, usize::MAX, usize::MAX, usize::MAX))
            .map(|(k, _)| k.1 + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Replays the schedule of `strategy` over `num_steps` steps.
///
/// PipeFusion's stage count does not change the stamps (each block sees its
/// micro-steps in the same order on whichever stage owns it); `devices` is
/// validated against the layer split. For DistriFusion each device owns one
/// patch and its micro-step index is the device index.
pub fn staleness_oracle(
    strategy: StaleStrategy,
    devices: usize,
    patches: usize,
    layers: usize,
    num_steps: usize,
    warmup: usize,
) -> Result<FreshnessTable> {
    if devices == 0 || patches == 0 {
        return Err(Error::Infeasible("devices and patches must be positive".into()));
    }
    let mut table = FreshnessTable::default();
    match strategy {
        StaleStrategy::PipeFusion => {
            if layers % devices != 0 {
                return Err(Error::Infeasible(format!("{layers} layers over {devices} stages")));
            }
            if patches > 1 && warmup == 0 {
                return Err(Error::Infeasible("pipelined patches need a warmup step".into()));
            }
            // last_write[block][patch]
            let mut last_write = vec![vec![None::<usize>; patches]; layers];
            for t in (1..=num_steps).rev() {
                let sync = t + warmup > num_steps || patches == 1;
                // events: (micro, block, written patches)
                let mut events: Vec<(usize, usize, Vec<usize>)> = Vec::new();
                if sync {
                    for b in 0..layers {
                        events.push((0, b, (0..patches).collect()));
                    }
                } else {
                    for m in 0..patches {
                        for b in 0..layers {
                            events.push((m, b, vec![m]));
                        }
                    }
                }
                for (m, b, written) in events {
                    for j in written {
                        last_write[b][j] = Some(t);
                    }
                    for j in 0..patches {
                        let s = last_write[b][j].expect("buffer populated by warmup");
                        table.insert((t, m, b, j), s);
                    }
                }
            }
        }
        StaleStrategy::DistriFusion => {
            if patches != devices {
                return Err(Error::Infeasible("DistriFusion needs one patch per device".into()));
            }
            if warmup == 0 {
                return Err(Error::Infeasible("DistriFusion needs a warmup step".into()));
            }
            // view[device][block][patch]
            let mut view = vec![vec![vec![None::<usize>; patches]; layers]; devices];
            for t in (1..=num_steps).rev() {
                let sync = t + warmup > num_steps;
                let mut delivered: Vec<(usize, usize)> = Vec::new();
                for d in 0..devices {
                    for b in 0..layers {
                        if sync {
                            for j in 0..patches {
                                view[d][b][j] = Some(t);
                            }
                        } else {
                            view[d][b][d] = Some(t);
                            delivered.push((d, b));
                        }
                        let micro = if sync { 0 } else { d };
                        if sync && d > 0 {
                            continue;
                        }
                        for j in 0..patches {
                            table.insert((t, micro, b, j), view[d][b][j].expect("warmup filled view"));
                        }
                    }
                }
                // asynchronous gathers land before the next step reads
                for (src, b) in delivered {
                    for v in view.iter_mut() {
                        v[b][src] = Some(t);
                    }
                }
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_warmup_is_all_fresh() {
        for s in [StaleStrategy::PipeFusion, StaleStrategy::DistriFusion] {
            let t = staleness_oracle(s, 4, 4, 4, 5, 5).unwrap();
            assert!(t.entries.iter().all(|(k, v)| k.0 == *v));
        }
    }

    #[test]
    fn distrifusion_one_fresh_patch() {
        let t = staleness_oracle(StaleStrategy::DistriFusion, 4, 4, 2, 6, 1).unwrap();
        for step in 1..=5 {
            for d in 0..4 {
                for b in 0..2 {
                    assert_eq!(t.fresh_patches(step, d, b), vec![d]);
                }
            }
        }
    }

    #[test]
    fn pipefusion_fresh_set_grows() {
        let t = staleness_oracle(StaleStrategy::PipeFusion, 4, 4, 4, 8, 1).unwrap();
        for step in 1..=7 {
            assert_eq!(t.micro_steps(step), 4);
            for b in 0..4 {
                let mut prev = 0;
                for m in 0..4 {
                    let f = t.fresh_patches(step, m, b);
                    assert_eq!(f, (0..=m).collect::<Vec<_>>());
                    assert!(f.len() >= prev);
                    prev = f.len();
                }
            }
        }
    }

    #[test]
    fn infeasible_inputs() {
        assert!(staleness_oracle(StaleStrategy::PipeFusion, 3, 4, 4, 8, 1).is_err());
        assert!(staleness_oracle(StaleStrategy::PipeFusion, 2, 4, 4, 8, 0).is_err());
        assert!(staleness_oracle(StaleStrategy::DistriFusion, 2, 4, 4, 8, 1).is_err());
    }
}
