//! Token layout: patches along the image sequence and SP shards within them.
//!
//! Global row indices follow the canonical sequence order: in-context text
//! rows first, then image rows. Text rides with patch 0. Each shard of a
//! patch takes an equal slice of the patch's image rows; shards of the text
//! take equal slices of the text rows.

use std::ops::Range;

use crate::error::{Error, Result};

/// The token set processed in one micro-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unit {
    /// Every token (synchronous steps).
    Whole,
    Patch(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    context: usize,
    image: usize,
    patches: usize,
    shards: usize,
}

impl PatchPlan {
    pub fn new(context: usize, image: usize, patches: usize, shards: usize) -> Result<Self> {
        if patches == 0 || shards == 0 {
            return Err(Error::Infeasible("patch and shard counts must be positive".into()));
        }
        if image % (patches * shards) != 0 {
            return Err(Error::Infeasible(format!(
                "image tokens {image} not divisible into {patches} patches x {shards} shards"
            )));
        }
        if context % shards != 0 {
            return Err(Error::Infeasible(format!(
                "text tokens {context} not divisible into {shards} shards"
            )));
        }
        Ok(Self {
            context,
            image,
            patches,
            shards,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.context + self.image
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn shards(&self) -> usize {
        self.shards
    }

    /// Global image rows of patch `j`.
    pub fn patch_range(&self, j: usize) -> Range<usize> {
        let w = self.image / self.patches;
        self.context + j * w..self.context + (j + 1) * w
    }

    fn text_piece(&self, q: usize) -> Range<usize> {
        let w = self.context / self.shards;
        q * w..(q + 1) * w
    }

    fn image_piece(&self, j: usize, q: usize) -> Range<usize> {
        let p = self.patch_range(j);
        let w = p.len() / self.shards;
        p.start + q * w..p.start + (q + 1) * w
    }

    fn units_patches(&self, unit: Unit) -> Range<usize> {
        match unit {
            Unit::Whole => 0..self.patches,
            Unit::Patch(j) => j..j + 1,
        }
    }

    /// Rows of a unit, ascending.
    pub fn unit_rows(&self, unit: Unit) -> Vec<usize> {
        let mut rows: Vec<usize> = Vec::new();
        let ps = self.units_patches(unit);
        if ps.start == 0 {
            rows.extend(0..self.context);
        }
        for j in ps {
            rows.extend(self.patch_range(j));
        }
        rows
    }

    /// Rows of shard `q` within a unit, ascending.
    pub fn shard_rows(&self, unit: Unit, q: usize) -> Vec<usize> {
        let mut rows: Vec<usize> = Vec::new();
        let ps = self.units_patches(unit);
        if ps.start == 0 {
            rows.extend(self.text_piece(q));
        }
        for j in ps {
            rows.extend(self.image_piece(j, q));
        }
        rows
    }

    /// Image rows owned by shard `q` across all patches, as latent indices.
    pub fn latent_rows(&self, q: usize) -> Vec<usize> {
        (0..self.patches)
            .flat_map(|j| self.image_piece(j, q))
            .map(|r| r - self.context)
            .collect()
    }

    /// Image rows of a unit, as latent indices.
    pub fn unit_latent_rows(&self, unit: Unit) -> Vec<usize> {
        self.unit_rows(unit)
            .into_iter()
            .filter(|&r| r >= self.context)
            .map(|r| r - self.context)
            .collect()
    }

    /// Patch a global row belongs to; text rows belong to patch 0.
    pub fn patch_of(&self, row: usize) -> usize {
        if row < self.context {
            0
        } else {
            (row - self.context) / (self.image / self.patches)
        }
    }

    pub fn is_image(&self, row: usize) -> bool {
        row >= self.context
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_layout() {
        let p = PatchPlan::new(4, 16, 2, 2).unwrap();
        assert_eq!(p.unit_rows(Unit::Patch(0)), vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
        assert_eq!(p.unit_rows(Unit::Patch(1)), (12..20).collect::<Vec<_>>());
        assert_eq!(p.shard_rows(Unit::Patch(0), 1), vec![2, 3, 8, 9, 10, 11]);
        assert_eq!(p.shard_rows(Unit::Whole, 0), vec![0, 1, 4, 5, 6, 7, 12, 13, 14, 15]);
        assert_eq!(p.latent_rows(1), vec![4, 5, 6, 7, 12, 13, 14, 15]);
        assert_eq!(p.patch_of(2), 0);
        assert_eq!(p.patch_of(12), 1);
        assert!(PatchPlan::new(4, 16, 3, 1).is_err());
        assert!(PatchPlan::new(3, 16, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn shards_partition_units(ctx_mul in 0usize..3, m in 1usize..5, sp in 1usize..5, w in 1usize..3) {
            let plan = PatchPlan::new(ctx_mul * sp, m * sp * w, m, sp).unwrap();
            let mut all: Vec<usize> = Vec::new();
            for j in 0..m {
                let mut unit: Vec<usize> = (0..sp).flat_map(|q| plan.shard_rows(Unit::Patch(j), q)).collect();
                unit.sort();
                prop_assert_eq!(&unit, &plan.unit_rows(Unit::Patch(j)));
                all.extend(unit);
            }
            all.sort();
            prop_assert_eq!(all, (0..plan.seq_len()).collect::<Vec<_>>());
            for q in 0..sp {
                let mut union: Vec<usize> = (0..m).flat_map(|j| plan.shard_rows(Unit::Patch(j), q)).collect();
                union.sort();
                prop_assert_eq!(union, plan.shard_rows(Unit::Whole, q));
            }
        }
    }
}
