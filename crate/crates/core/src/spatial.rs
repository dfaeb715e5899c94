//! Uniform-grid spatial index for closed-ball radius queries and 1-NN lookup.
//!
//! Points are bucketed into cubic cells keyed by `floor(x / cell)`; each cell
//! owns a contiguous run of a sorted index array. Distances are compared in
//! squared form, so a query returns exactly `{ i : |p_i - q|^2 <= r^2 }`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lidar_io::Point;

type CellKey = [i64; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point>,
    cell: f64,
    /// Point indices sorted by cell key.
    order: Vec<u32>,
    cells: HashMap<CellKey, (u32, u32)>,
    key_min: CellKey,
    key_max: CellKey,
}

impl SpatialIndex {
    /// Builds an index with a cell size derived from the cloud's extent and density.
    pub fn build(points: &[Point]) -> Result<SpatialIndex> {
        let cell = auto_cell_size(points);
        SpatialIndex::with_cell_size(points, cell)
    }

    pub fn with_cell_size(points: &[Point], cell: f64) -> Result<SpatialIndex> {
        if !(cell.is_finite() && cell > 0.0) {
            return Err(Error::arg(format!("cell size must be positive, got {cell}")));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite { index: i });
        }
        if points.len() > u32::MAX as usize {
            return Err(Error::arg("too many points for a spatial index"));
        }
        let keys: Vec<CellKey> = points.iter().map(|p| key_of(p, cell)).collect();
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        order.sort_unstable_by_key(|&i| (keys[i as usize], i));

        let mut cells = HashMap::new();
        let mut key_min = [i64::MAX; 3];
        let mut key_max = [i64::MIN; 3];
        let mut start = 0usize;
        while start < order.len() {
            let key = keys[order[start] as usize];
            let mut end = start + 1;
            while end < order.len() && keys[order[end] as usize] == key {
                end += 1;
            }
            cells.insert(key, (start as u32, end as u32));
            for a in 0..3 {
                key_min[a] = key_min[a].min(key[a]);
                key_max[a] = key_max[a].max(key[a]);
            }
            start = end;
        }
        Ok(SpatialIndex {
            points: points.to_vec(),
            cell,
            order,
            cells,
            key_min,
            key_max,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// Indices of all points within distance `r` of `query` (inclusive), ascending.
    pub fn radius_neighbors(&self, query: &Point, r: f64) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        self.for_each_within(query, r, |i, _| out.push(i))?;
        out.sort_unstable();
        Ok(out)
    }

    /// Calls `f(index, squared_distance)` for every point within `r` of `query`,
    /// in unspecified order.
    pub fn for_each_within(
        &self,
        query: &Point,
        r: f64,
        mut f: impl FnMut(usize, f64),
    ) -> Result<()> {
        if r.is_nan() || r < 0.0 {
            return Err(Error::arg(format!("radius must be non-negative, got {r}")));
        }
        if query.iter().any(|c| !c.is_finite()) {
            return Err(Error::arg("query point must be finite"));
        }
        if self.points.is_empty() {
            return Ok(());
        }
        let r2 = r * r;
        let lo = key_of(&[query[0] - r, query[1] - r, query[2] - r], self.cell);
        let hi = key_of(&[query[0] + r, query[1] + r, query[2] + r], self.cell);
        let lo = [0, 1, 2].map(|a| lo[a].max(self.key_min[a]));
        let hi = [0, 1, 2].map(|a| hi[a].min(self.key_max[a]));
        if (0..3).any(|a| lo[a] > hi[a]) {
            return Ok(());
        }
        let span: u128 = (0..3).map(|a| (hi[a] - lo[a] + 1) as u128).product();
        let mut visit = |&(s, e): &(u32, u32)| {
            for &i in &self.order[s as usize..e as usize] {
                let d2 = dist2(&self.points[i as usize], query);
                if d2 <= r2 {
                    f(i as usize, d2);
                }
            }
        };
        if span > self.cells.len() as u128 {
            for (key, range) in &self.cells {
                if (0..3).all(|a| key[a] >= lo[a] && key[a] <= hi[a]) {
                    visit(range);
                }
            }
        } else {
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        if let Some(range) = self.cells.get(&[x, y, z]) {
                            visit(range);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nearest point within `r` of `query`; ties go to the smallest index.
    pub fn nearest_within(&self, query: &Point, r: f64) -> Result<Option<(usize, f64)>> {
        let mut best: Option<(usize, f64)> = None;
        self.for_each_within(query, r, |i, d2| {
            if best.is_none_or(|(bi, bd)| d2 < bd || (d2 == bd && i < bi)) {
                best = Some((i, d2));
            }
        })?;
        Ok(best.map(|(i, d2)| (i, d2.sqrt())))
    }

    /// Nearest point to `query` other than `exclude`, with its distance.
    /// Ties go to the smallest index.
    pub fn nearest(&self, query: &Point, exclude: Option<usize>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let consider = |best: &mut Option<(usize, f64)>, i: usize, p: &Point| {
            if Some(i) == exclude {
                return;
            }
            let d2 = dist2(p, query);
            if best.is_none_or(|(bi, bd)| d2 < bd || (d2 == bd && i < bi)) {
                *best = Some((i, d2));
            }
        };
        if self.points.is_empty() {
            return None;
        }
        let center = key_of(query, self.cell);
        let max_ring = (0..3)
            .map(|a| {
                (center[a] - self.key_min[a])
                    .abs()
                    .max((self.key_max[a] - center[a]).abs())
            })
            .max()
            .unwrap_or(0);
        let mut ring: i64 = 0;
        loop {
            // A ring touching more cells than are occupied is cheaper as a full scan.
            let side = (2 * ring + 1) as u128;
            if side * side * side > 8 * self.cells.len() as u128 + 27 {
                for (i, p) in self.points.iter().enumerate() {
                    consider(&mut best, i, p);
                }
                break;
            }
            for x in center[0] - ring..=center[0] + ring {
                for y in center[1] - ring..=center[1] + ring {
                    for z in center[2] - ring..=center[2] + ring {
                        let on_shell = (x - center[0]).abs() == ring
                            || (y - center[1]).abs() == ring
                            || (z - center[2]).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        if let Some(&(s, e)) = self.cells.get(&[x, y, z]) {
                            for &i in &self.order[s as usize..e as usize] {
                                consider(&mut best, i as usize, &self.points[i as usize]);
                            }
                        }
                    }
                }
            }
            // Any point outside rings 0..=ring lies at least ring * cell away.
            let bound = ring as f64 * self.cell;
            if let Some((_, d2)) = best {
                if d2 < bound * bound {
                    break;
                }
            }
            if ring >= max_ring {
                break;
            }
            ring += 1;
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}

/// Convenience wrapper matching the free-function style of the other modules.
pub fn build_index(points: &[Point]) -> Result<SpatialIndex> {
    SpatialIndex::build(points)
}

pub fn radius_neighbors(index: &SpatialIndex, query: &Point, r: f64) -> Result<Vec<usize>> {
    index.radius_neighbors(query, r)
}

#[inline]
fn key_of(p: &Point, cell: f64) -> CellKey {
    p.map(|c| {
        let k = (c / cell).floor();
        k.clamp(i64::MIN as f64 / 4.0, i64::MAX as f64 / 4.0) as i64
    })
}

fn auto_cell_size(points: &[Point]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if !(extent.is_finite() && extent > 0.0) {
        return 1.0;
    }
    (extent / (points.len() as f64).cbrt()).max(extent * 1e-6)
}
