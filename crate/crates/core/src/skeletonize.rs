//! Joint candidates from a splat cloud, connected into a kinematic tree by a
//! Euclidean minimum spanning tree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::{GaussianCloud, Skeleton};

pub const DEFAULT_CANDIDATES: usize = 70;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub points: Vec<Vec3>,
    /// Largest distance from any splat to its nearest candidate.
    pub coverage_radius: f64,
}

/// Picks `m` splat positions by farthest-point sampling.
///
/// Sampling starts at the splat nearest the cloud centroid. Exact distance
/// ties, both for the start and for each farthest pick, are broken by a
/// draw from a `seed`-keyed generator.
pub fn sample_candidates(cloud: &GaussianCloud, m: usize, seed: u64) -> Result<CandidateSet> {
    let n = cloud.len();
    if m < 2 || m > n {
        return Err(Error::OutOfRange {
            what: "candidate count",
            value: m as i64,
            min: 2,
            max: n as i64,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = &cloud.positions;
    let centroid = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / n as f64;

    let start = pick_extreme(pts.iter().map(|p| -(p - centroid).norm_squared()), &mut rng);
    let mut chosen = vec![start];
    let mut nearest: Vec<f64> = pts.iter().map(|p| (p - pts[start]).norm_squared()).collect();
    while chosen.len() < m {
        let next = pick_extreme(nearest.iter().copied(), &mut rng);
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(pts) {
            *d = d.min((p - pts[next]).norm_squared());
        }
    }
    let coverage_radius = nearest.iter().copied().fold(0.0, f64::max).sqrt();
    Ok(CandidateSet {
        points: chosen.into_iter().map(|i| pts[i]).collect(),
        coverage_radius,
    })
}

/// Index of the maximum value; exact ties resolved uniformly at random.
fn pick_extreme(values: impl Iterator<Item = f64>, rng: &mut ChaCha8Rng) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut ties: Vec<usize> = Vec::new();
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            ties.clear();
            ties.push(i);
        } else if v == best {
            ties.push(i);
        }
    }
    if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng.gen_range(0..ties.len())]
    }
}

/// Exact Euclidean MST over the candidates, rooted at its highest-degree
/// vertex (lowest index on ties).
pub fn build_tree(candidates: &CandidateSet) -> Result<Skeleton> {
    let edges = euclidean_mst(&candidates.points)?;
    let parents = root_tree(candidates.points.len(), &edges);
    Skeleton::new(candidates.points.clone(), parents)
}

/// Dense Prim's algorithm; O(M²). Equal-weight choices go to the
/// lexicographically smallest `(i, j)` edge.
pub fn euclidean_mst(points: &[Vec3]) -> Result<Vec<(usize, usize)>> {
    let m = points.len();
    if m < 2 {
        return Err(Error::OutOfRange {
            what: "candidate count",
            value: m as i64,
            min: 2,
            max: i64::MAX,
        });
    }
    for i in 0..m {
        for j in i + 1..m {
            if points[i] == points[j] {
                return Err(Error::DuplicateCandidate(i, j));
            }
        }
    }
    let mut in_tree = vec![false; m];
    let mut best = vec![f64::INFINITY; m];
    let mut link = vec![usize::MAX; m];
    in_tree[0] = true;
    for j in 1..m {
        best[j] = (points[j] - points[0]).norm();
        link[j] = 0;
    }
    let mut edges = Vec::with_capacity(m - 1);
    for _ in 1..m {
        let mut pick = usize::MAX;
        for j in 0..m {
            if in_tree[j] {
                continue;
            }
            let better = pick == usize::MAX
                || best[j] < best[pick]
                || (best[j] == best[pick] && edge_key(link[j], j) < edge_key(link[pick], pick));
            if better {
                pick = j;
            }
        }
        in_tree[pick] = true;
        edges.push(edge_key(link[pick], pick));
        for j in 0..m {
            if in_tree[j] {
                continue;
            }
            let d = (points[j] - points[pick]).norm();
            if d < best[j] || (d == best[j] && edge_key(pick, j) < edge_key(link[j], j)) {
                best[j] = d;
                link[j] = pick;
            }
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Orients an undirected spanning tree away from the max-degree vertex.
pub fn root_tree(m: usize, edges: &[(usize, usize)]) -> Vec<Option<usize>> {
    let mut adj = vec![Vec::new(); m];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    let root = (0..m).fold(0, |r, j| if adj[j].len() > adj[r].len() { j } else { r });
    let mut parents = vec![None; m];
    let mut seen = vec![false; m];
    seen[root] = true;
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(j) = queue.pop_front() {
        for &k in &adj[j] {
            if !seen[k] {
                seen[k] = true;
                parents[k] = Some(j);
                queue.push_back(k);
            }
        }
    }
    parents
}

pub fn tree_weight(points: &[Vec3], edges: &[(usize, usize)]) -> f64 {
    edges.iter().map(|&(a, b)| (points[a] - points[b]).norm()).sum()
}
