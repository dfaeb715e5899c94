//! Single-threshold Euclidean clustering (DBSCAN-style) over a subset of points.
//!
//! With `min_pts = 1` the clusters are exactly the connected components of the
//! graph joining every pair of points at distance `<= eps`. This case runs on a
//! grid of cells with diagonal just under `eps`: points sharing a cell are always
//! connected, so connectivity is resolved between cells rather than points.
//!
//! With `min_pts > 1` the usual core/border/noise rules apply; noise points come
//! back as singleton clusters so every input point keeps a cluster.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lidar_io::Point;
use crate::spatial::{dist2, SpatialIndex};

/// Cluster assignment for a subset of points, aligned with the subset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    pub assignment: Vec<u32>,
    pub count: usize,
}

impl Clustering {
    /// Point indices per cluster, each list ascending; clusters ordered by id.
    pub fn groups(&self, subset: &[u32]) -> Vec<Vec<u32>> {
        let mut groups = vec![Vec::new(); self.count];
        for (&c, &p) in self.assignment.iter().zip(subset) {
            groups[c as usize].push(p);
        }
        for g in &mut groups {
            g.sort_unstable();
        }
        groups
    }
}

pub(crate) struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    pub(crate) fn union(&mut self, a: u32, b: u32) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if self.rank[ra as usize] < self.rank[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[lo as usize] = hi;
        if self.rank[lo as usize] == self.rank[hi as usize] {
            self.rank[hi as usize] += 1;
        }
        true
    }
}

/// Clusters `subset` (indices into `points`) at distance threshold `eps`.
///
/// Cluster ids are numbered in order of each cluster's smallest point index.
pub fn cluster(points: &[Point], subset: &[u32], eps: f64, min_pts: usize) -> Result<Clustering> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::arg(format!("eps must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::arg("min_pts must be at least 1"));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i as usize >= points.len()) {
        return Err(Error::arg(format!(
            "subset index {bad} out of range for {} points",
            points.len()
        )));
    }
    if subset.is_empty() {
        return Ok(Clustering {
            assignment: Vec::new(),
            count: 0,
        });
    }
    let roots = if min_pts == 1 {
        connected_components(points, subset, eps)
    } else {
        dbscan(points, subset, eps, min_pts)?
    };
    Ok(number_by_smallest_member(subset, &roots))
}

/// Turns arbitrary per-position component labels into ids ordered by the
/// smallest point index of each component.
fn number_by_smallest_member(subset: &[u32], roots: &[u32]) -> Clustering {
    let mut min_member: HashMap<u32, u32> = HashMap::new();
    for (&r, &p) in roots.iter().zip(subset) {
        min_member
            .entry(r)
            .and_modify(|m| *m = (*m).min(p))
            .or_insert(p);
    }
    let mut order: Vec<(u32, u32)> = min_member.into_iter().map(|(r, m)| (m, r)).collect();
    order.sort_unstable();
    let id_of: HashMap<u32, u32> = order
        .iter()
        .enumerate()
        .map(|(id, &(_, r))| (r, id as u32))
        .collect();
    Clustering {
        assignment: roots.iter().map(|r| id_of[r]).collect(),
        count: order.len(),
    }
}

type CellKey = [i64; 3];

fn connected_components(points: &[Point], subset: &[u32], eps: f64) -> Vec<u32> {
    // Slightly under eps / sqrt(3) so that any two points in one cell are within eps.
    let cell = eps / 3f64.sqrt() * (1.0 - 1e-9);
    let eps2 = eps * eps;
    let key = |p: &Point| -> CellKey { p.map(|c| (c / cell).floor() as i64) };

    let keys: Vec<CellKey> = subset.iter().map(|&i| key(&points[i as usize])).collect();
    let mut order: Vec<u32> = (0..subset.len() as u32).collect();
    order.sort_unstable_by_key(|&j| keys[j as usize]);

    // Cells as contiguous runs of `order`.
    let mut cell_ranges: Vec<(usize, usize)> = Vec::new();
    let mut cell_keys: Vec<CellKey> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let k = keys[order[start] as usize];
        let mut end = start + 1;
        while end < order.len() && keys[order[end] as usize] == k {
            end += 1;
        }
        cell_ranges.push((start, end));
        cell_keys.push(k);
        start = end;
    }
    let lookup: HashMap<CellKey, u32> = cell_keys
        .iter()
        .enumerate()
        .map(|(c, &k)| (k, c as u32))
        .collect();

    // Neighbor offsets in the positive half-space whose cells can hold points within eps.
    let reach = (eps / cell).ceil() as i64;
    let mut offsets = Vec::new();
    for dx in -reach..=reach {
        for dy in -reach..=reach {
            for dz in -reach..=reach {
                if (dx, dy, dz) <= (0, 0, 0) {
                    continue;
                }
                let gap = |d: i64| ((d.abs() - 1).max(0)) as f64 * cell;
                let g2 = gap(dx).powi(2) + gap(dy).powi(2) + gap(dz).powi(2);
                if g2 <= eps2 {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
    }

    let mut uf = UnionFind::new(cell_ranges.len());
    for (a, &ka) in cell_keys.iter().enumerate() {
        let (sa, ea) = cell_ranges[a];
        for off in &offsets {
            let kb = [ka[0] + off[0], ka[1] + off[1], ka[2] + off[2]];
            let Some(&b) = lookup.get(&kb) else { continue };
            if uf.find(a as u32) == uf.find(b) {
                continue;
            }
            let (sb, eb) = cell_ranges[b as usize];
            let linked = order[sa..ea].iter().any(|&ja| {
                let pa = &points[subset[ja as usize] as usize];
                order[sb..eb]
                    .iter()
                    .any(|&jb| dist2(pa, &points[subset[jb as usize] as usize]) <= eps2)
            });
            if linked {
                uf.union(a as u32, b);
            }
        }
    }

    let mut cell_of = vec![0u32; subset.len()];
    for (c, &(s, e)) in cell_ranges.iter().enumerate() {
        for &j in &order[s..e] {
            cell_of[j as usize] = c as u32;
        }
    }
    cell_of.iter().map(|&c| uf.find(c)).collect()
}

fn dbscan(points: &[Point], subset: &[u32], eps: f64, min_pts: usize) -> Result<Vec<u32>> {
    let local: Vec<Point> = subset.iter().map(|&i| points[i as usize]).collect();
    let index = SpatialIndex::with_cell_size(&local, eps)?;
    let neighbors: Vec<Vec<usize>> = local
        .iter()
        .map(|p| index.radius_neighbors(p, eps))
        .collect::<Result<_>>()?;
    let core: Vec<bool> = neighbors.iter().map(|n| n.len() >= min_pts).collect();

    let mut uf = UnionFind::new(local.len());
    for (j, ns) in neighbors.iter().enumerate() {
        if !core[j] {
            continue;
        }
        for &o in ns {
            if core[o] {
                uf.union(j as u32, o as u32);
            }
        }
    }
    let mut roots: Vec<u32> = (0..local.len() as u32).map(|j| uf.find(j)).collect();
    for (j, ns) in neighbors.iter().enumerate() {
        if core[j] {
            continue;
        }
        // Border points join their nearest core neighbor (smallest point index on ties);
        // noise stays on its own root.
        let owner = ns.iter().filter(|&&o| core[o]).min_by(|&&a, &&b| {
            dist2(&local[a], &local[j])
                .total_cmp(&dist2(&local[b], &local[j]))
                .then(subset[a].cmp(&subset[b]))
        });
        if let Some(&o) = owner {
            roots[j] = uf.find(o as u32);
        }
    }
    Ok(roots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(N^2) union-find over all point pairs.
    fn oracle_partition(points: &[Point], subset: &[u32], eps: f64) -> Vec<Vec<u32>> {
        let n = subset.len();
        let mut uf = UnionFind::new(n);
        for a in 0..n {
            for b in a + 1..n {
                if dist2(&points[subset[a] as usize], &points[subset[b] as usize]) <= eps * eps {
                    uf.union(a as u32, b as u32);
                }
            }
        }
        let mut groups: HashMap<u32, Vec<u32>> = HashMap::new();
        for a in 0..n {
            groups.entry(uf.find(a as u32)).or_default().push(subset[a]);
        }
        let mut out: Vec<Vec<u32>> = groups
            .into_values()
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect();
        out.sort();
        out
    }

    fn sorted_groups(c: &Clustering, subset: &[u32]) -> Vec<Vec<u32>> {
        let mut g = c.groups(subset);
        g.sort();
        g
    }

    fn line(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    #[test]
    fn collinear_examples() {
        let pts = line(&[0.0, 0.5, 1.0, 5.0]);
        let subset = [0, 1, 2, 3];
        let c = cluster(&pts, &subset, 0.6, 1).unwrap();
        assert_eq!(c.groups(&subset), vec![vec![0, 1, 2], vec![3]]);
        assert_eq!(c.assignment, vec![0, 0, 0, 1]);
        let c = cluster(&pts, &subset, 0.4, 1).unwrap();
        assert_eq!(c.count, 4);
    }

    #[test]
    fn single_point_and_empty() {
        let pts = line(&[3.0]);
        assert_eq!(cluster(&pts, &[0], 0.1, 1).unwrap().count, 1);
        assert_eq!(cluster(&pts, &[], 0.1, 1).unwrap().count, 0);
    }

    #[test]
    fn argument_errors() {
        let pts = line(&[0.0]);
        assert!(matches!(cluster(&pts, &[0], 0.0, 1), Err(Error::Argument(_))));
        assert!(matches!(cluster(&pts, &[0], -1.0, 1), Err(Error::Argument(_))));
        assert!(matches!(cluster(&pts, &[0], 1.0, 0), Err(Error::Argument(_))));
        assert!(matches!(cluster(&pts, &[4], 1.0, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn ids_follow_smallest_member() {
        let pts = line(&[10.0, 0.0, 10.2, 0.1]);
        let subset = [2, 3, 0, 1];
        let c = cluster(&pts, &subset, 0.5, 1).unwrap();
        // Cluster containing point 0 is id 0 even though it appears later in the subset.
        assert_eq!(c.assignment, vec![0, 1, 0, 1]);
    }

    #[test]
    fn boundary_distance_connects() {
        let pts = line(&[0.0, 0.25, 0.5]);
        let c = cluster(&pts, &[0, 1, 2], 0.25, 1).unwrap();
        assert_eq!(c.count, 1);
    }

    #[test]
    fn dbscan_noise_becomes_singletons() {
        // dense run of 5 points plus one far point and one border point
        let pts = line(&[0.0, 0.1, 0.2, 0.3, 0.4, 0.75, 5.0]);
        let subset: Vec<u32> = (0..7).collect();
        let c = cluster(&pts, &subset, 0.36, 3).unwrap();
        assert_eq!(
            c.groups(&subset),
            vec![vec![0, 1, 2, 3, 4, 5], vec![6]]
        );
        let c = cluster(&pts, &subset, 0.3, 3).unwrap();
        assert_eq!(
            c.groups(&subset),
            vec![vec![0, 1, 2, 3, 4], vec![5], vec![6]]
        );
    }

    #[test]
    fn oracle_equivalence_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let n = rng.gen_range(1..400);
            let extent = rng.gen_range(0.5..8.0);
            let pts: Vec<Point> = (0..n)
                .map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..extent)))
                .collect();
            let subset: Vec<u32> = (0..n as u32).filter(|_| rng.gen_bool(0.8)).collect();
            let eps = rng.gen_range(0.05..1.5);
            let c = cluster(&pts, &subset, eps, 1).unwrap();
            assert_eq!(sorted_groups(&c, &subset), oracle_partition(&pts, &subset, eps));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn refinement_and_permutation(seed in any::<u64>(), n in 1usize..150, e1 in 0.05f64..1.0, de in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..3.0))).collect();
            let subset: Vec<u32> = (0..n as u32).collect();
            let fine = cluster(&pts, &subset, e1, 1).unwrap();
            let coarse = cluster(&pts, &subset, e1 + de, 1).unwrap();
            // each fine cluster lies in exactly one coarse cluster
            let mut owner: HashMap<u32, u32> = HashMap::new();
            for (f, c) in fine.assignment.iter().zip(&coarse.assignment) {
                prop_assert_eq!(*owner.entry(*f).or_insert(*c), *c);
            }
            let mut shuffled = subset.clone();
            shuffled.reverse();
            let again = cluster(&pts, &shuffled, e1, 1).unwrap();
            prop_assert_eq!(sorted_groups(&again, &shuffled), sorted_groups(&fine, &subset));
        }
    }
}
