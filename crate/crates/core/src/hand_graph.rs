//! Hand skeleton graphs and their three-subset adjacency decomposition.
//!
//! Joint order within one hand: wrist (0), then thumb, index, middle, ring and
//! little finger, four joints each from base to tip. A second hand is the same
//! layout offset by 21.

use std::collections::VecDeque;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const JOINTS_PER_HAND: usize = 21;
pub const FINGERS: usize = 5;
pub const JOINTS_PER_FINGER: usize = 4;
pub const BONES_PER_HAND: usize = JOINTS_PER_HAND - 1;
/// Number of neighbourhood subsets (self, centripetal, centrifugal).
pub const NUM_SUBSETS: usize = 3;
pub const DEFAULT_SIGMA: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hands {
    One,
    Two,
}

impl Hands {
    pub fn count(self) -> usize {
        match self {
            Hands::One => 1,
            Hands::Two => 2,
        }
    }

    pub fn num_vertices(self) -> usize {
        self.count() * JOINTS_PER_HAND
    }

    pub fn from_vertices(v: usize) -> Result<Self> {
        match v {
            JOINTS_PER_HAND => Ok(Hands::One),
            x if x == 2 * JOINTS_PER_HAND => Ok(Hands::Two),
            _ => Err(Error::invalid(format!("no hand graph has {v} vertices"))),
        }
    }
}

/// Index of joint `j` (0 = base, 3 = tip) of `finger` (0 = thumb) on `hand`.
pub fn finger_joint(hand: usize, finger: usize, j: usize) -> usize {
    hand * JOINTS_PER_HAND + 1 + finger * JOINTS_PER_FINGER + j
}

pub fn wrist(hand: usize) -> usize {
    hand * JOINTS_PER_HAND
}

/// Skeleton of one or two hands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandGraph {
    num_vertices: usize,
    /// Bones as `(parent, child)`, the parent being one hop closer to the wrist.
    edges: Vec<(usize, usize)>,
    roots: Vec<usize>,
    hop_distance: Vec<usize>,
}

impl HandGraph {
    pub fn new(hands: Hands) -> Self {
        let mut edges = Vec::with_capacity(hands.count() * BONES_PER_HAND);
        for h in 0..hands.count() {
            for f in 0..FINGERS {
                edges.push((wrist(h), finger_joint(h, f, 0)));
                for j in 1..JOINTS_PER_FINGER {
                    edges.push((finger_joint(h, f, j - 1), finger_joint(h, f, j)));
                }
            }
        }
        let roots: Vec<usize> = (0..hands.count()).map(wrist).collect();
        let num_vertices = hands.num_vertices();
        let hop_distance = bfs_hops(num_vertices, &edges, &roots);
        Self {
            num_vertices,
            edges,
            roots,
            hop_distance,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn hands(&self) -> Hands {
        Hands::from_vertices(self.num_vertices).expect("hand graph vertex count")
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Wrist of the first hand.
    pub fn root(&self) -> usize {
        self.roots[0]
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn hop_distance(&self) -> &[usize] {
        &self.hop_distance
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == v || b == v).count()
    }

    /// Symmetric 0/1 adjacency matrix of the bones.
    pub fn adjacency(&self) -> Tensor {
        let n = self.num_vertices;
        let mut a = Tensor::zeros(&[n, n]);
        for &(p, c) in &self.edges {
            a.set(&[p, c], 1.0);
            a.set(&[c, p], 1.0);
        }
        a
    }

    /// Raw subset matrices: self-connections, neighbours closer to the wrist,
    /// and neighbours farther from it. Row `i` lists the neighbours vertex `i`
    /// aggregates from.
    pub fn partition_subsets(&self) -> [Tensor; NUM_SUBSETS] {
        partition_by_hops(self.num_vertices, &self.edges, &self.hop_distance)
    }

    /// Normalized subset matrices with guard `sigma`.
    pub fn subset_adjacency(&self, sigma: f64) -> Result<SubsetAdjacency> {
        let raw = self.partition_subsets();
        let matrices = [
            normalize_subset(&raw[0], sigma)?,
            normalize_subset(&raw[1], sigma)?,
            normalize_subset(&raw[2], sigma)?,
        ];
        Ok(SubsetAdjacency { matrices, sigma })
    }
}

/// The three normalized subset matrices of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetAdjacency {
    pub matrices: [Tensor; NUM_SUBSETS],
    pub sigma: f64,
}

fn bfs_hops(n: usize, edges: &[(usize, usize)], roots: &[usize]) -> Vec<usize> {
    let mut nbrs = vec![Vec::new(); n];
    for &(a, b) in edges {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let mut hops = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for &r in roots {
        hops[r] = 0;
        queue.push_back(r);
    }
    while let Some(v) = queue.pop_front() {
        for &u in &nbrs[v] {
            if hops[u] == usize::MAX {
                hops[u] = hops[v] + 1;
                queue.push_back(u);
            }
        }
    }
    hops
}

/// Three-way split of the neighbourhoods of an arbitrary graph by hop distance.
pub fn partition_by_hops(n: usize, edges: &[(usize, usize)], hops: &[usize]) -> [Tensor; NUM_SUBSETS] {
    let identity = Tensor::eye(n);
    let mut closer = Tensor::zeros(&[n, n]);
    let mut farther = Tensor::zeros(&[n, n]);
    for &(a, b) in edges {
        for (i, j) in [(a, b), (b, a)] {
            if hops[j] < hops[i] {
                closer.set(&[i, j], 1.0);
            } else if hops[j] > hops[i] {
                farther.set(&[i, j], 1.0);
            }
        }
    }
    [identity, closer, farther]
}

/// `Λ^{-1/2}·raw·Λ^{-1/2}` with `Λ_ii = Σ_j raw_ij + sigma`.
///
/// A row that sums to zero with `sigma = 0` has a zero inverse degree, so the
/// result never contains NaN or infinities.
pub fn normalize_subset(raw: &Tensor, sigma: f64) -> Result<Tensor> {
    let shape = raw.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("subset matrix must be square, got {shape:?}")));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid(format!("sigma must be a finite non-negative value, got {sigma}")));
    }
    if let Some(bad) = raw.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid(format!("subset matrix entries must be >= 0, found {bad}")));
    }
    let n = shape[0];
    let inv_sqrt: Vec<f64> = raw
        .data()
        .chunks(n)
        .map(|row| {
            let d = row.iter().sum::<f64>() + sigma;
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        inv_sqrt[i] * raw.data()[k] * inv_sqrt[j]
    }))
}
