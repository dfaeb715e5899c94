//! Hierarchical segmentation trees and the optimal worst-case tree cut.
//!
//! A forest is built by clustering the masked points at the coarsest threshold
//! of a decreasing `eps` schedule, then re-clustering every node within its own
//! points at the next finer thresholds. A node gets children only when
//! re-clustering actually splits it, so every child is strictly smaller than its
//! parent.
//!
//! Nodes live in an arena. Each node owns a contiguous range of one shared
//! permutation of the masked point indices, and the children of a node are
//! consecutive arena entries whose ranges tile the parent's range. Memory is
//! linear in the number of masked points plus the number of nodes.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;

use crate::clustering::cluster;
use crate::error::{Error, Result};
use crate::lidar_io::Point;

/// Distance thresholds in meters, coarse to fine.
pub const DEFAULT_SCHEDULE: [f64; 6] = [1.2488, 0.8136, 0.6952, 0.594, 0.4353, 0.3221];

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct SegNode {
    range: (u32, u32),
    /// Depth in the tree, 0 for roots.
    pub depth: u32,
    /// Threshold that produced this node.
    pub eps: f64,
    pub parent: Option<NodeId>,
    children: (u32, u32),
    pub score: Option<f64>,
}

impl SegNode {
    pub fn size(&self) -> usize {
        (self.range.1 - self.range.0) as usize
    }

    pub fn children(&self) -> Range<NodeId> {
        self.children.0..self.children.1
    }

    pub fn is_leaf(&self) -> bool {
        self.children.0 == self.children.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegForest {
    nodes: Vec<SegNode>,
    order: Vec<u32>,
    num_roots: u32,
    schedule: Vec<f64>,
}

/// Explicit tree shape, used to build forests directly from point sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Hierarchy {
    Leaf(Vec<u32>),
    Node(Vec<Hierarchy>),
}

impl Hierarchy {
    fn points(&self, out: &mut Vec<u32>) {
        match self {
            Hierarchy::Leaf(p) => out.extend_from_slice(p),
            Hierarchy::Node(ch) => ch.iter().for_each(|c| c.points(out)),
        }
    }

    fn depth(&self) -> usize {
        match self {
            Hierarchy::Leaf(_) => 0,
            Hierarchy::Node(ch) => 1 + ch.iter().map(Hierarchy::depth).max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutResult {
    pub nodes: Vec<NodeId>,
    /// Point indices of each selected node, ascending.
    pub segments: Vec<Vec<u32>>,
    /// Minimum score over the selected nodes (1.0 for an empty forest).
    pub global_score: f64,
}

pub fn validate_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::arg("eps schedule is empty"));
    }
    if schedule.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::arg(format!("eps schedule must be positive: {schedule:?}")));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::arg(format!(
            "eps schedule must be strictly decreasing: {schedule:?}"
        )));
    }
    Ok(())
}

/// Builds the segmentation forest over `mask` with pure eps-connectivity.
pub fn build_forest(points: &[Point], mask: &[u32], schedule: &[f64]) -> Result<SegForest> {
    SegForest::build(points, mask, schedule, 1)
}

impl SegForest {
    pub fn build(points: &[Point], mask: &[u32], schedule: &[f64], min_pts: usize) -> Result<SegForest> {
        validate_schedule(schedule)?;
        let mut mask = mask.to_vec();
        mask.sort_unstable();
        mask.dedup();

        let mut forest = SegForest {
            nodes: Vec::new(),
            order: Vec::with_capacity(mask.len()),
            num_roots: 0,
            schedule: schedule.to_vec(),
        };
        let top = cluster(points, &mask, schedule[0], min_pts)?;
        for group in top.groups(&mask) {
            let start = forest.order.len() as u32;
            forest.order.extend_from_slice(&group);
            forest.nodes.push(SegNode {
                range: (start, forest.order.len() as u32),
                depth: 0,
                eps: schedule[0],
                parent: None,
                children: (0, 0),
                score: None,
            });
        }
        forest.num_roots = forest.nodes.len() as u32;

        // Depth-first expansion; (node, schedule level that produced it).
        let mut stack: Vec<(NodeId, usize)> = (0..forest.num_roots).rev().map(|id| (id, 0)).collect();
        while let Some((id, level)) = stack.pop() {
            let (start, end) = forest.nodes[id as usize].range;
            if end - start <= 1 {
                continue;
            }
            let members: Vec<u32> = forest.order[start as usize..end as usize].to_vec();
            for (next, &eps) in schedule.iter().enumerate().skip(level + 1) {
                let split = cluster(points, &members, eps, min_pts)?;
                if split.count <= 1 {
                    continue;
                }
                let first_child = forest.nodes.len() as u32;
                let depth = forest.nodes[id as usize].depth + 1;
                let mut cursor = start;
                for group in split.groups(&members) {
                    let len = group.len() as u32;
                    forest.order[cursor as usize..(cursor + len) as usize].copy_from_slice(&group);
                    forest.nodes.push(SegNode {
                        range: (cursor, cursor + len),
                        depth,
                        eps,
                        parent: Some(id),
                        children: (0, 0),
                        score: None,
                    });
                    cursor += len;
                }
                let last = forest.nodes.len() as u32;
                forest.nodes[id as usize].children = (first_child, last);
                for child in (first_child..last).rev() {
                    stack.push((child, next));
                }
                break;
            }
        }
        Ok(forest)
    }

    /// Builds a forest from an explicit hierarchy. Every internal node needs
    /// at least two children, leaves must be non-empty and all point sets disjoint.
    /// Node `eps` values are synthetic: `2^-depth` meters.
    pub fn from_hierarchy(roots: &[Hierarchy]) -> Result<SegForest> {
        let depth = roots.iter().map(Hierarchy::depth).max().unwrap_or(0);
        let schedule: Vec<f64> = (0..=depth).map(|d| 0.5f64.powi(d as i32)).collect();
        let mut all = Vec::new();
        roots.iter().for_each(|r| r.points(&mut all));
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != total {
            return Err(Error::arg("hierarchy point sets overlap"));
        }

        let mut forest = SegForest {
            nodes: Vec::new(),
            order: Vec::with_capacity(total),
            num_roots: roots.len() as u32,
            schedule,
        };
        // Lay out siblings in order of their smallest point.
        fn sorted_level(level: &[Hierarchy]) -> Result<Vec<(&Hierarchy, Vec<u32>)>> {
            let mut out = Vec::with_capacity(level.len());
            for h in level {
                let mut pts = Vec::new();
                h.points(&mut pts);
                pts.sort_unstable();
                if pts.is_empty() {
                    return Err(Error::arg("hierarchy leaf without points"));
                }
                out.push((h, pts));
            }
            out.sort_by_key(|(_, p)| p[0]);
            Ok(out)
        }
        fn place(
            forest: &mut SegForest,
            level: &[Hierarchy],
            parent: Option<NodeId>,
            depth: u32,
            start: u32,
        ) -> Result<()> {
            let sorted = sorted_level(level)?;
            let first = forest.nodes.len() as u32;
            let mut cursor = start;
            for (_, pts) in &sorted {
                let len = pts.len() as u32;
                forest.order[cursor as usize..(cursor + len) as usize].copy_from_slice(pts);
                forest.nodes.push(SegNode {
                    range: (cursor, cursor + len),
                    depth,
                    eps: forest.schedule[depth as usize],
                    parent,
                    children: (0, 0),
                    score: None,
                });
                cursor += len;
            }
            if let Some(p) = parent {
                forest.nodes[p as usize].children = (first, forest.nodes.len() as u32);
            }
            for (k, (h, _)) in sorted.iter().enumerate() {
                if let Hierarchy::Node(children) = h {
                    if children.len() < 2 {
                        return Err(Error::arg("internal hierarchy node needs at least two children"));
                    }
                    let id = first + k as u32;
                    let s = forest.nodes[id as usize].range.0;
                    place(forest, children, Some(id), depth + 1, s)?;
                }
            }
            Ok(())
        }
        forest.order = vec![0; total];
        place(&mut forest, roots, None, 0, 0)?;
        Ok(forest)
    }

    pub fn schedule(&self) -> &[f64] {
        &self.schedule
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of masked points covered by the roots.
    pub fn num_points(&self) -> usize {
        self.order.len()
    }

    pub fn roots(&self) -> Range<NodeId> {
        0..self.num_roots
    }

    pub fn node(&self, id: NodeId) -> &SegNode {
        &self.nodes[id as usize]
    }

    pub fn nodes(&self) -> &[SegNode] {
        &self.nodes
    }

    /// Point indices of a node. Ascending for leaves; for inner nodes the
    /// concatenation of the children's ranges.
    pub fn points(&self, id: NodeId) -> &[u32] {
        let (s, e) = self.nodes[id as usize].range;
        &self.order[s as usize..e as usize]
    }

    pub fn point_set(&self, id: NodeId) -> Vec<u32> {
        let mut p = self.points(id).to_vec();
        p.sort_unstable();
        p
    }

    /// Stable identity `(smallest point index, size, eps)` used in messages and ordering.
    pub fn node_key(&self, id: NodeId) -> (u32, usize, f64) {
        let n = self.node(id);
        (self.points(id)[0], n.size(), n.eps)
    }

    fn describe(&self, id: NodeId) -> String {
        let (first, size, eps) = self.node_key(id);
        format!("#{id} (first point {first}, {size} points, eps {eps})")
    }

    /// Scores every node once, in parallel. Scores must lie in `[0, 1]`.
    pub fn score_nodes<F>(&mut self, scorer: F) -> Result<()>
    where
        F: Fn(NodeId, &[u32]) -> Result<f64> + Sync,
    {
        let scores: Vec<f64> = (0..self.nodes.len() as NodeId)
            .into_par_iter()
            .map(|id| {
                let wrap = |e: Error| Error::Scorer {
                    node: self.describe(id),
                    source: Box::new(e),
                };
                let s = scorer(id, self.points(id)).map_err(wrap)?;
                if !(0.0..=1.0).contains(&s) {
                    return Err(wrap(Error::arg(format!("score {s} outside [0, 1]"))));
                }
                Ok(s)
            })
            .collect::<Result<_>>()?;
        for (node, s) in self.nodes.iter_mut().zip(scores) {
            node.score = Some(s);
        }
        Ok(())
    }

    pub fn set_score(&mut self, id: NodeId, score: f64) {
        self.nodes[id as usize].score = Some(score);
    }

    fn score_of(&self, id: NodeId) -> Result<f64> {
        self.nodes[id as usize].score.ok_or_else(|| Error::Scorer {
            node: self.describe(id),
            source: Box::new(Error::arg("node has not been scored")),
        })
    }

    /// Line-oriented dump: `node_id parent_id level eps size score`,
    /// with `-1` for a missing parent and `-` for a missing score.
    pub fn dump(&self) -> String {
        let mut out = String::from("# node_id parent_id level eps size score\n");
        for (id, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or(-1, |p| p as i64);
            let score = n.score.map_or("-".to_string(), |s| s.to_string());
            let _ = writeln!(out, "{id} {parent} {} {} {} {score}", n.depth, n.eps, n.size());
        }
        out
    }
}

/// Optimal worst-case cut over scored nodes.
///
/// At a node with score `f`, the children are solved first; if any child's
/// best score is `<= f` the node itself is kept, otherwise the node is
/// replaced by the union of its children's cuts, scored by their minimum.
pub fn tree_cut(forest: &SegForest) -> Result<CutResult> {
    fn solve(forest: &SegForest, id: NodeId, out: &mut Vec<NodeId>) -> Result<f64> {
        let own = forest.score_of(id)?;
        let node = forest.node(id);
        if node.is_leaf() {
            out.push(id);
            return Ok(own);
        }
        let mark = out.len();
        let mut worst = f64::INFINITY;
        for child in node.children() {
            let f = solve(forest, child, out)?;
            if f <= own {
                out.truncate(mark);
                out.push(id);
                return Ok(own);
            }
            worst = worst.min(f);
        }
        Ok(worst)
    }

    let mut nodes = Vec::new();
    let mut global = 1.0f64;
    for root in forest.roots() {
        global = global.min(solve(forest, root, &mut nodes)?);
    }
    let segments = nodes.iter().map(|&id| forest.point_set(id)).collect();
    Ok(CutResult {
        nodes,
        segments,
        global_score: global,
    })
}

/// Scores the forest with `scorer` and cuts it.
pub fn tree_cut_with<F>(forest: &mut SegForest, scorer: F) -> Result<CutResult>
where
    F: Fn(NodeId, &[u32]) -> Result<f64> + Sync,
{
    forest.score_nodes(scorer)?;
    tree_cut(forest)
}

/// Largest forest [`enumerate_cuts`] accepts.
pub const MAX_ENUMERATION_NODES: usize = 20;

/// Every antichain of nodes that partitions the forest's points, each exactly once.
pub fn enumerate_cuts(forest: &SegForest) -> Result<Vec<Vec<NodeId>>> {
    if forest.len() > MAX_ENUMERATION_NODES {
        return Err(Error::arg(format!(
            "forest has {} nodes; enumeration is limited to {MAX_ENUMERATION_NODES}",
            forest.len()
        )));
    }
    fn product(parts: Vec<Vec<Vec<NodeId>>>) -> Vec<Vec<NodeId>> {
        parts.into_iter().fold(vec![Vec::new()], |acc, options| {
            acc.iter()
                .flat_map(|prefix| {
                    options.iter().map(move |o| {
                        let mut v = prefix.clone();
                        v.extend_from_slice(o);
                        v
                    })
                })
                .collect()
        })
    }
    fn cuts(forest: &SegForest, id: NodeId) -> Vec<Vec<NodeId>> {
        let node = forest.node(id);
        let mut out = vec![vec![id]];
        if !node.is_leaf() {
            out.extend(product(node.children().map(|c| cuts(forest, c)).collect()));
        }
        out
    }
    Ok(product(forest.roots().map(|r| cuts(forest, r)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Hierarchy::{Leaf, Node};

    fn scored(roots: &[Hierarchy], scores: &[f64]) -> SegForest {
        let mut f = SegForest::from_hierarchy(roots).unwrap();
        for (id, &s) in scores.iter().enumerate() {
            f.set_score(id as NodeId, s);
        }
        f
    }

    fn best_by_enumeration(f: &SegForest) -> f64 {
        enumerate_cuts(f)
            .unwrap()
            .iter()
            .map(|cut| {
                cut.iter()
                    .map(|&id| f.node(id).score.unwrap())
                    .fold(1.0, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn default_schedule_constants() {
        assert_eq!(DEFAULT_SCHEDULE, [1.2488, 0.8136, 0.6952, 0.594, 0.4353, 0.3221]);
        validate_schedule(&DEFAULT_SCHEDULE).unwrap();
        assert!(validate_schedule(&[1.0, 1.0]).is_err());
        assert!(validate_schedule(&[]).is_err());
        assert!(validate_schedule(&[1.0, -0.5]).is_err());
    }

    #[test]
    fn leaf_cut() {
        let f = scored(&[Leaf(vec![0, 1])], &[0.3]);
        let cut = tree_cut(&f).unwrap();
        assert_eq!(cut.nodes, vec![0]);
        assert_eq!(cut.global_score, 0.3);
    }

    #[test]
    fn splits_when_children_beat_parent() {
        // root 0.4 -> A 0.9 (leaf), B 0.3 -> B1 0.8, B2 0.7
        let roots = [Node(vec![
            Leaf(vec![0]),
            Node(vec![Leaf(vec![1]), Leaf(vec![2])]),
        ])];
        // arena order: root, A, B, B1, B2
        let f = scored(&roots, &[0.4, 0.9, 0.3, 0.8, 0.7]);
        let cut = tree_cut(&f).unwrap();
        assert_eq!(cut.nodes, vec![1, 3, 4]);
        assert_eq!(cut.segments, vec![vec![0], vec![1], vec![2]]);
        assert!((cut.global_score - 0.7).abs() < 1e-15);
        assert_eq!(cut.global_score, best_by_enumeration(&f));
    }

    #[test]
    fn keeps_parent_that_beats_children() {
        let roots = [Node(vec![Leaf(vec![0]), Leaf(vec![1])])];
        let f = scored(&roots, &[0.9, 0.5, 0.6]);
        let cut = tree_cut(&f).unwrap();
        assert_eq!(cut.nodes, vec![0]);
        assert_eq!(cut.global_score, 0.9);
    }

    #[test]
    fn tie_keeps_parent() {
        let roots = [Node(vec![Leaf(vec![0]), Leaf(vec![1])])];
        let f = scored(&roots, &[0.6, 0.6, 0.9]);
        assert_eq!(tree_cut(&f).unwrap().nodes, vec![0]);
        let f = scored(&roots, &[0.6, 0.9, 0.6]);
        assert_eq!(tree_cut(&f).unwrap().nodes, vec![0]);
    }

    #[test]
    fn unscored_node_is_an_error() {
        let f = SegForest::from_hierarchy(&[Leaf(vec![4])]).unwrap();
        assert!(matches!(tree_cut(&f), Err(Error::Scorer { .. })));
    }

    #[test]
    fn scorer_failure_names_node() {
        let mut f = SegForest::from_hierarchy(&[Leaf(vec![4, 5])]).unwrap();
        let err = f
            .score_nodes(|_, _| Err(Error::arg("boom")))
            .unwrap_err();
        match err {
            Error::Scorer { node, .. } => assert!(node.contains("first point 4"), "{node}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(f.score_nodes(|_, _| Ok(1.5)).is_err());
    }

    #[test]
    fn enumeration_counts() {
        let f = SegForest::from_hierarchy(&[Leaf(vec![0])]).unwrap();
        assert_eq!(enumerate_cuts(&f).unwrap().len(), 1);
        let f = SegForest::from_hierarchy(&[Node(vec![Leaf(vec![0]), Leaf(vec![1])])]).unwrap();
        assert_eq!(enumerate_cuts(&f).unwrap(), vec![vec![0], vec![1, 2]]);
        let f = SegForest::from_hierarchy(&[Node(vec![
            Leaf(vec![0]),
            Node(vec![Leaf(vec![1]), Leaf(vec![2])]),
        ])])
        .unwrap();
        assert_eq!(
            enumerate_cuts(&f).unwrap(),
            vec![vec![0], vec![1, 2], vec![1, 3, 4]]
        );
        let big = SegForest::from_hierarchy(
            &(0..21).map(|i| Leaf(vec![i])).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(matches!(enumerate_cuts(&big), Err(Error::Argument(_))));
    }

    #[test]
    fn hierarchy_validation() {
        assert!(SegForest::from_hierarchy(&[Node(vec![Leaf(vec![0])])]).is_err());
        assert!(SegForest::from_hierarchy(&[Leaf(vec![0]), Leaf(vec![0])]).is_err());
        assert!(SegForest::from_hierarchy(&[Leaf(vec![])]).is_err());
    }

    fn blob(center: Point, n: usize, gap: f64) -> Vec<Point> {
        (0..n)
            .map(|i| [center[0] + gap * (i % 5) as f64, center[1] + gap * (i / 5) as f64, center[2]])
            .collect()
    }

    #[test]
    fn two_blobs_make_two_childless_roots() {
        let mut pts = blob([0.0, 0.0, 0.0], 25, 0.1);
        pts.extend(blob([10.0, 0.0, 0.0], 25, 0.1));
        let mask: Vec<u32> = (0..50).collect();
        let f = build_forest(&pts, &mask, &DEFAULT_SCHEDULE).unwrap();
        assert_eq!(f.roots().len(), 2);
        assert_eq!(f.len(), 2);
        assert_eq!(f.point_set(0), (0..25).collect::<Vec<_>>());
        assert_eq!(f.point_set(1), (25..50).collect::<Vec<_>>());
    }

    #[test]
    fn empty_mask_gives_empty_forest() {
        let f = build_forest(&[[0.0; 3]], &[], &DEFAULT_SCHEDULE).unwrap();
        assert!(f.is_empty());
        let cut = tree_cut(&f).unwrap();
        assert!(cut.segments.is_empty());
        assert!(matches!(
            build_forest(&[[0.0; 3]], &[0], &[0.5, 0.7]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn skipped_levels_and_strict_shrinkage() {
        // gaps of 0.9 (split at 0.8136) and 0.5 (split at 0.4353)
        let xs = [0.0, 0.5, 1.4, 1.9];
        let pts: Vec<Point> = xs.iter().map(|&x| [x, 0.0, 0.0]).collect();
        let f = build_forest(&pts, &[0, 1, 2, 3], &DEFAULT_SCHEDULE).unwrap();
        assert_eq!(f.roots().len(), 1);
        let root = f.node(0);
        assert_eq!(root.children().len(), 2);
        let child = f.node(root.children().start);
        assert_eq!(child.eps, 0.8136);
        let grandchild = f.node(child.children().start);
        assert_eq!(grandchild.eps, 0.4353);
        assert_eq!(grandchild.depth, 2);
        assert_eq!(f.len(), 7);
        let dump = f.dump();
        assert!(dump.lines().nth(1).unwrap().starts_with("0 -1 0 1.2488 4 -"));
    }

    fn random_hierarchy(rng: &mut ChaCha8Rng, next: &mut u32, budget: &mut usize, depth: usize) -> Hierarchy {
        if *budget >= 2 && depth < 5 && rng.gen_bool(0.5) {
            let k = rng.gen_range(2..=3).min(*budget);
            *budget -= k;
            Node((0..k).map(|_| random_hierarchy(rng, next, budget, depth + 1)).collect())
        } else {
            let n = rng.gen_range(1..4);
            let pts = (*next..*next + n).collect();
            *next += n;
            Leaf(pts)
        }
    }

    #[test]
    fn random_forests_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let mut next = 0;
            let mut budget = rng.gen_range(1..=17usize);
            let mut roots = Vec::new();
            while budget > 0 && roots.len() < 3 {
                budget -= 1;
                roots.push(random_hierarchy(&mut rng, &mut next, &mut budget, 0));
            }
            let mut f = SegForest::from_hierarchy(&roots).unwrap();
            assert!(f.len() <= MAX_ENUMERATION_NODES);
            for id in 0..f.len() as NodeId {
                f.set_score(id, rng.gen_range(0.0..1.0));
            }
            let cut = tree_cut(&f).unwrap();
            assert_eq!(cut.global_score, best_by_enumeration(&f));
            let mut covered: Vec<u32> = cut.segments.concat();
            covered.sort_unstable();
            assert_eq!(covered, (0..next).collect::<Vec<_>>());
        }
    }
}
