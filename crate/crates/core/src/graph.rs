//! Symmetric CSR adjacency over users and items, plus the two augmentations:
//! edge dropout (weak) and pseudo-edge addition (strong).

use std::io::Write;

use rand::Rng;

use crate::dataset::InteractionSet;
use crate::error::Result;
use crate::generation::PseudoInteractionSet;
use crate::rng;

/// Users occupy nodes `0..M`, items occupy `M..M+N`.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteGraph {
    num_users: usize,
    num_items: usize,
    edges: Vec<(u32, u32)>,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    coeff: Vec<f64>,
    degree: Vec<u32>,
}

/// Which undirected edges survive a dropout pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationMask {
    pub keep: Vec<bool>,
    pub rho: f64,
    pub seed: u64,
}

impl AugmentationMask {
    pub fn sample(num_edges: usize, rho: f64, seed: u64) -> AugmentationMask {
        assert!((0.0..1.0).contains(&rho), "dropout ratio must be in [0, 1)");
        let mut rng = rng::stream(seed, "edge-dropout", 0);
        let keep = (0..num_edges).map(|_| rng.random::<f64>() >= rho).collect();
        AugmentationMask { keep, rho, seed }
    }

    pub fn retained(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

impl BipartiteGraph {
    /// Builds the graph from undirected (user, item) edges. Repeats collapse.
    pub fn from_edges(num_users: usize, num_items: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> BipartiteGraph {
        let mut edges: Vec<(u32, u32)> = edges.into_iter().collect();
        edges.sort_unstable();
        edges.dedup();
        for &(u, i) in &edges {
            assert!(
                (u as usize) < num_users && (i as usize) < num_items,
                "edge ({u}, {i}) outside {num_users}x{num_items}"
            );
        }

        let nodes = num_users + num_items;
        let mut degree = vec![0u32; nodes];
        for &(u, i) in &edges {
            degree[u as usize] += 1;
            degree[num_users + i as usize] += 1;
        }
        let mut row_ptr = vec![0usize; nodes + 1];
        for v in 0..nodes {
            row_ptr[v + 1] = row_ptr[v] + degree[v] as usize;
        }
        let mut fill = row_ptr.clone();
        let mut col = vec![0u32; row_ptr[nodes]];
        // Edges are sorted by (u, i), so user rows come out sorted; item rows
        // receive users in ascending order as well.
        for &(u, i) in &edges {
            let iv = num_users + i as usize;
            col[fill[u as usize]] = iv as u32;
            fill[u as usize] += 1;
            col[fill[iv]] = u;
            fill[iv] += 1;
        }
        let mut coeff = vec![0.0; col.len()];
        for v in 0..nodes {
            for e in row_ptr[v]..row_ptr[v + 1] {
                let w = col[e] as usize;
                coeff[e] = 1.0 / (f64::from(degree[v]) * f64::from(degree[w])).sqrt();
            }
        }
        BipartiteGraph {
            num_users,
            num_items,
            edges,
            row_ptr,
            col,
            coeff,
            degree,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Undirected (user, item) edges in ascending order.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degree(&self, node: usize) -> u32 {
        self.degree[node]
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degree
    }

    pub fn item_node(&self, item: u32) -> usize {
        self.num_users + item as usize
    }

    /// Neighbours of `node` with their normalization coefficients.
    pub fn row(&self, node: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[node]..self.row_ptr[node + 1];
        (&self.col[r.clone()], &self.coeff[r])
    }

    pub fn has_edge(&self, user: u32, item: u32) -> bool {
        let (cols, _) = self.row(user as usize);
        cols.binary_search(&(self.num_users as u32 + item)).is_ok()
    }

    pub fn dropout(&self, mask: &AugmentationMask) -> BipartiteGraph {
        assert_eq!(mask.keep.len(), self.edges.len(), "mask length must match edge count");
        let kept = self.edges.iter().zip(&mask.keep).filter(|(_, &k)| k).map(|(&e, _)| e);
        BipartiteGraph::from_edges(self.num_users, self.num_items, kept)
    }

    /// Writes one `user<TAB>item` line per undirected edge.
    pub fn dump_edges<W: Write>(&self, mut w: W) -> Result<()> {
        for &(u, i) in &self.edges {
            writeln!(w, "{u}\t{i}")?;
        }
        Ok(())
    }
}

pub fn build_graph(train: &InteractionSet) -> BipartiteGraph {
    BipartiteGraph::from_edges(train.num_users(), train.num_items(), train.pairs().iter().copied())
}

/// Drops each undirected edge independently with probability `rho` and
/// renormalizes with the surviving degrees.
pub fn weak_augment(g: &BipartiteGraph, rho: f64, seed: u64) -> BipartiteGraph {
    if rho == 0.0 {
        return g.clone();
    }
    g.dropout(&AugmentationMask::sample(g.num_edges(), rho, seed))
}

/// Adds the pseudo interactions as edges.
pub fn strong_augment(g: &BipartiteGraph, pseudo: &PseudoInteractionSet) -> BipartiteGraph {
    if pseudo.is_empty() {
        return g.clone();
    }
    BipartiteGraph::from_edges(
        g.num_users,
        g.num_items,
        g.edges.iter().copied().chain(pseudo.pairs()),
    )
}
