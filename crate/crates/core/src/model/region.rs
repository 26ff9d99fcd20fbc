//! Overlapping horizontal bands over the shared feature map.

use std::ops::Range;

use crate::autograd::{Graph, Var};
use crate::error::{RamError, Result};

/// `k` bands of `region_h` rows each; neighbours share `overlap_h` rows and
/// together the bands cover the map height exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionSpec {
    pub k: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub map_c: usize,
    pub region_h: usize,
    pub overlap_h: usize,
}

impl RegionSpec {
    pub fn new(k: usize, map_c: usize, map_h: usize, map_w: usize, region_h: usize, overlap_h: usize) -> Result<Self> {
        let spec = RegionSpec {
            k,
            map_h,
            map_w,
            map_c,
            region_h,
            overlap_h,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RamError::Config(format!("region geometry: {m}")));
        if self.k == 0 || self.region_h == 0 || self.map_w == 0 || self.map_c == 0 {
            return bad(format!("degenerate spec {self:?}"));
        }
        if self.overlap_h >= self.region_h {
            return bad(format!(
                "overlap {} must be smaller than the region height {}",
                self.overlap_h, self.region_h
            ));
        }
        let covered = (self.k - 1) * self.stride() + self.region_h;
        if covered != self.map_h {
            return bad(format!(
                "{} regions of {} rows overlapping by {} cover {covered} rows, but the map has {}",
                self.k, self.region_h, self.overlap_h, self.map_h
            ));
        }
        Ok(())
    }

    /// Row offset between consecutive regions.
    pub fn stride(&self) -> usize {
        self.region_h - self.overlap_h
    }

    pub fn row_range(&self, i: usize) -> Range<usize> {
        let start = i * self.stride();
        start..start + self.region_h
    }

    pub fn row_ranges(&self) -> Vec<Range<usize>> {
        (0..self.k).map(|i| self.row_range(i)).collect()
    }

    /// Number of regions containing each map row.
    pub fn row_coverage(&self) -> Vec<usize> {
        let mut counts = vec![0; self.map_h];
        for r in self.row_ranges() {
            for row in r {
                counts[row] += 1;
            }
        }
        counts
    }
}

/// Cuts an NCHW feature map into the spec's row bands (full width and
/// channels). Gradients from overlapping bands add up in the map.
pub fn split_regions(g: &mut Graph, m: Var, spec: &RegionSpec) -> Result<Vec<Var>> {
    let shape = g.shape(m);
    match shape {
        &[_, c, h, w] if c == spec.map_c && h == spec.map_h && w == spec.map_w => {}
        _ => {
            return Err(RamError::shape(
                "split_regions",
                shape,
                &[0, spec.map_c, spec.map_h, spec.map_w],
            ))
        }
    }
    spec.row_ranges()
        .into_iter()
        .map(|r| g.slice(m, 2, r.start, r.len()))
        .collect()
}
