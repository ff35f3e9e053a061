//! Neighbor graphs over hits and the voxel grid used for pooling.
//!
//! Search is exhaustive: events hold tens of hits, and the exact tie rules
//! below make every graph a deterministic function of the input.

use std::cmp::Ordering;
use std::collections::BTreeMap;

/// Directed neighbor lists for one (source view -> destination view) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    pub src_view: usize,
    pub dst_view: usize,
    pub k_nn: usize,
    /// `neighbors[k]` lists source indices attending into destination `k`,
    /// nearest first.
    pub neighbors: Vec<Vec<usize>>,
}

impl EdgeSet {
    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Flattened `(dst, src)` pairs in destination-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(dst, list)| list.iter().map(move |&src| (dst, src)))
    }

    /// Edge arrays `(dst_of_edge, src_of_edge)` in [`EdgeSet::edges`] order.
    pub fn edge_index(&self) -> (Vec<usize>, Vec<usize>) {
        self.edges().unzip()
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dz = a[1] - b[1];
    dx * dx + dz * dz
}

/// k nearest other points within one view, Euclidean in grid units.
/// Ties are broken by the lower point index.
pub fn knn_intra(coords: &[[f64; 2]], k_nn: usize, view: usize) -> EdgeSet {
    let mut neighbors = Vec::with_capacity(coords.len());
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(coords.len());
    for (k, &p) in coords.iter().enumerate() {
        cand.clear();
        cand.extend(
            coords
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .map(|(i, &q)| (sq_dist(p, q), i)),
        );
        let take = k_nn.min(cand.len());
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if take < cand.len() {
            cand.select_nth_unstable_by(take, by_key);
            cand.truncate(take);
        }
        cand.sort_unstable_by(by_key);
        neighbors.push(cand.iter().map(|&(_, i)| i).collect());
    }
    EdgeSet {
        src_view: view,
        dst_view: view,
        k_nn,
        neighbors,
    }
}

/// Cross-view ordering key: plane distance, then transverse distance, then
/// source index. The plane axis is the only one both views share.
fn inter_key(dst: [f64; 2], src: [f64; 2]) -> (f64, f64) {
    ((dst[1] - src[1]).abs(), (dst[0] - src[0]).abs())
}

/// k nearest source-view points for every destination-view point.
pub fn knn_inter(
    src_coords: &[[f64; 2]],
    dst_coords: &[[f64; 2]],
    k_nn: usize,
    src_view: usize,
    dst_view: usize,
) -> EdgeSet {
    let mut neighbors = Vec::with_capacity(dst_coords.len());
    let mut cand: Vec<(f64, f64, usize)> = Vec::with_capacity(src_coords.len());
    let by_key = |a: &(f64, f64, usize), b: &(f64, f64, usize)| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
    };
    for &d in dst_coords {
        cand.clear();
        cand.extend(src_coords.iter().enumerate().map(|(i, &s)| {
            let (dz, dt) = inter_key(d, s);
            (dz, dt, i)
        }));
        let take = k_nn.min(cand.len());
        if take < cand.len() {
            cand.select_nth_unstable_by(take, by_key);
            cand.truncate(take);
        }
        cand.sort_unstable_by(by_key);
        neighbors.push(cand.iter().map(|c| c.2).collect());
    }
    EdgeSet {
        src_view,
        dst_view,
        k_nn,
        neighbors,
    }
}

/// Partition of points into occupied grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelAssignment {
    pub voxel_size: f64,
    /// Occupied cells in lexicographic cell order, so the pooled point order
    /// does not depend on the input order.
    pub cells: Vec<[i64; 2]>,
    /// Member point indices of each cell, ascending.
    pub groups: Vec<Vec<usize>>,
    /// Mean member coordinate of each cell.
    pub barycenters: Vec<[f64; 2]>,
    /// Group index of every input point.
    pub group_of: Vec<usize>,
}

impl VoxelAssignment {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_points(&self) -> usize {
        self.group_of.len()
    }
}

pub fn voxel_cell(coord: [f64; 2], voxel_size: f64) -> [i64; 2] {
    [
        (coord[0] / voxel_size).floor() as i64,
        (coord[1] / voxel_size).floor() as i64,
    ]
}

/// Groups points by `floor(coord / voxel_size)` per axis.
pub fn voxel_assign(coords: &[[f64; 2]], voxel_size: f64) -> VoxelAssignment {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    let mut by_cell: BTreeMap<[i64; 2], Vec<usize>> = BTreeMap::new();
    for (i, &c) in coords.iter().enumerate() {
        by_cell
            .entry(voxel_cell(c, voxel_size))
            .or_default()
            .push(i);
    }
    let mut group_of = vec![0; coords.len()];
    let mut cells = Vec::with_capacity(by_cell.len());
    let mut groups = Vec::with_capacity(by_cell.len());
    let mut barycenters = Vec::with_capacity(by_cell.len());
    for (g, (cell, members)) in by_cell.into_iter().enumerate() {
        let mut sum = [0.0; 2];
        for &i in &members {
            group_of[i] = g;
            sum[0] += coords[i][0];
            sum[1] += coords[i][1];
        }
        let n = members.len() as f64;
        cells.push(cell);
        barycenters.push([sum[0] / n, sum[1] / n]);
        groups.push(members);
    }
    VoxelAssignment {
        voxel_size,
        cells,
        groups,
        barycenters,
        group_of,
    }
}

/// Compares two neighbor keys the way [`knn_intra`] orders candidates.
pub fn intra_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_intra(coords: &[[f64; 2]], k: usize) -> Vec<Vec<usize>> {
        coords
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let mut all: Vec<(f64, usize)> = (0..coords.len())
                    .filter(|&j| j != i)
                    .map(|j| (sq_dist(p, coords[j]), j))
                    .collect();
                all.sort_by(|a, b| intra_order(*a, *b));
                all.into_iter().take(k).map(|x| x.1).collect()
            })
            .collect()
    }

    fn brute_inter(src: &[[f64; 2]], dst: &[[f64; 2]], k: usize) -> Vec<Vec<usize>> {
        dst.iter()
            .map(|&d| {
                let mut all: Vec<(f64, f64, usize)> = src
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| ((d[1] - s[1]).abs(), (d[0] - s[0]).abs(), i))
                    .collect();
                all.sort_by(|a, b| {
                    a.0.partial_cmp(&b.0)
                        .unwrap()
                        .then(a.1.partial_cmp(&b.1).unwrap())
                        .then(a.2.cmp(&b.2))
                });
                all.into_iter().take(k).map(|x| x.2).collect()
            })
            .collect()
    }

    fn random_grid_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(0..80) as f64,
                    rng.random_range(0..100) as f64,
                ]
            })
            .collect()
    }

    #[test]
    fn intra_small_cases() {
        let one = knn_intra(&[[1.0, 1.0]], 4, 0);
        assert_eq!(one.neighbors, vec![Vec::<usize>::new()]);
        let two = knn_intra(&[[1.0, 1.0], [5.0, 5.0]], 4, 0);
        assert_eq!(two.neighbors, vec![vec![1], vec![0]]);
        assert!(knn_intra(&[], 4, 0).neighbors.is_empty());
    }

    #[test]
    fn intra_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let coords = random_grid_coords(&mut rng, 50);
            assert_eq!(knn_intra(&coords, 8, 0).neighbors, brute_intra(&coords, 8));
        }
    }

    #[test]
    fn inter_small_cases() {
        let e = knn_inter(&[], &[[1.0, 1.0], [2.0, 2.0]], 4, 1, 0);
        assert!(e.neighbors.iter().all(Vec::is_empty));
        let e = knn_inter(&[[30.0, 5.0]], &[[1.0, 4.0], [2.0, 90.0]], 4, 1, 0);
        assert_eq!(e.neighbors, vec![vec![0], vec![0]]);
    }

    #[test]
    fn inter_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let src = random_grid_coords(&mut rng, 37);
            let dst = random_grid_coords(&mut rng, 29);
            assert_eq!(
                knn_inter(&src, &dst, 4, 1, 0).neighbors,
                brute_inter(&src, &dst, 4)
            );
        }
    }

    #[test]
    fn voxel_single_group_and_boundary() {
        let a = voxel_assign(&[[0.5, 0.5], [1.5, 1.0], [1.0, 1.9]], 2.0);
        assert_eq!(a.groups, vec![vec![0, 1, 2]]);
        assert_eq!(a.barycenters, vec![[1.0, (0.5 + 1.0 + 1.9) / 3.0]]);

        let b = voxel_assign(&[[2.0, 0.0], [1.999, 0.0]], 2.0);
        assert_eq!(b.cells, vec![[0, 0], [1, 0]]);
        assert_eq!(b.group_of, vec![1, 0]);
    }

    #[test]
    fn voxel_matches_floor_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let coords: Vec<[f64; 2]> = (0..100)
            .map(|_| [rng.random_range(0.0..80.0), rng.random_range(0.0..100.0)])
            .collect();
        let a = voxel_assign(&coords, 2.0);
        for i in 0..coords.len() {
            for j in 0..coords.len() {
                let same = (coords[i][0] / 2.0).floor() == (coords[j][0] / 2.0).floor()
                    && (coords[i][1] / 2.0).floor() == (coords[j][1] / 2.0).floor();
                assert_eq!(same, a.group_of[i] == a.group_of[j]);
            }
        }
        let total: usize = a.groups.iter().map(Vec::len).sum();
        assert_eq!(total, coords.len());
        for (g, members) in a.groups.iter().enumerate() {
            let lo = [a.cells[g][0] as f64 * 2.0, a.cells[g][1] as f64 * 2.0];
            let b = a.barycenters[g];
            assert!(b[0] >= lo[0] && b[0] <= lo[0] + 2.0);
            assert!(b[1] >= lo[1] && b[1] <= lo[1] + 2.0);
            assert!(members.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
