//! Structured fine triangulation of the unit square and its coarse-block overlay.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Uniform triangulation of `[0,1]^2` with `n` cells per side.
///
/// Node `(i, j)` (column `i`, row `j`) has index `j * (n + 1) + i`. Each square
/// cell `(ci, cj)` is split along its lower-left to upper-right diagonal into
/// triangles `2 * (cj * n + ci)` (lower) and `2 * (cj * n + ci) + 1` (upper), both
/// counter-clockwise.
#[derive(Debug, Clone)]
pub struct FineGrid<T> {
    n: usize,
    nodes: Vec<[T; 2]>,
    triangles: Vec<[usize; 3]>,
}

impl<T: Scalar> FineGrid<T> {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("fine grid needs at least one cell per side"));
        }
        let inv = T::one() / T::from_count(n);
        let mut nodes = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                nodes.push([T::from_count(i) * inv, T::from_count(j) * inv]);
            }
        }
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let mut triangles = Vec::with_capacity(2 * n * n);
        for cj in 0..n {
            for ci in 0..n {
                let a = idx(ci, cj);
                let b = idx(ci + 1, cj);
                let c = idx(ci + 1, cj + 1);
                let d = idx(ci, cj + 1);
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        Ok(Self { n, nodes, triangles })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn tri_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn nodes(&self) -> &[[T; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    /// Lattice coordinates `(i, j)` of a node.
    pub fn node_lattice(&self, node: usize) -> (usize, usize) {
        (node % (self.n + 1), node / (self.n + 1))
    }

    pub fn cell_triangles(&self, ci: usize, cj: usize) -> [usize; 2] {
        let base = 2 * (cj * self.n + ci);
        [base, base + 1]
    }

    pub fn vertices(&self, tri: usize) -> [[T; 2]; 3] {
        let [a, b, c] = self.triangles[tri];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    /// Signed area (positive for counter-clockwise orientation).
    pub fn signed_area(&self, tri: usize) -> T {
        let [p0, p1, p2] = self.vertices(tri);
        ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])) * crate::lit(0.5)
    }

    pub fn centroid(&self, tri: usize) -> [T; 2] {
        let [p0, p1, p2] = self.vertices(tri);
        let third = crate::lit::<T>(1.0 / 3.0);
        [(p0[0] + p1[0] + p2[0]) * third, (p0[1] + p1[1] + p2[1]) * third]
    }

    /// Fine-node vector sampling `f` at every node.
    pub fn interpolate(&self, f: impl Fn(T, T) -> T) -> DVector<T> {
        DVector::from_iterator(self.node_count(), self.nodes.iter().map(|p| f(p[0], p[1])))
    }
}

/// Half-open range of fine cells `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRange {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

/// Fine triangles and nodes covered by a rectangular union of cells.
#[derive(Debug, Clone)]
pub struct Region {
    pub cells: CellRange,
    pub triangles: Vec<usize>,
    pub nodes: Vec<usize>,
    /// Nodes strictly inside the region; these carry the zero-trace local spaces.
    pub interior_nodes: Vec<usize>,
}

impl Region {
    fn from_cells<T: Scalar>(grid: &FineGrid<T>, cells: CellRange) -> Self {
        let mut triangles = Vec::new();
        for cj in cells.y0..cells.y1 {
            for ci in cells.x0..cells.x1 {
                triangles.extend(grid.cell_triangles(ci, cj));
            }
        }
        let mut nodes = Vec::new();
        let mut interior_nodes = Vec::new();
        for j in cells.y0..=cells.y1 {
            for i in cells.x0..=cells.x1 {
                let node = grid.node_index(i, j);
                nodes.push(node);
                if i > cells.x0 && i < cells.x1 && j > cells.y0 && j < cells.y1 {
                    interior_nodes.push(node);
                }
            }
        }
        Self {
            cells,
            triangles,
            nodes,
            interior_nodes,
        }
    }
}

/// One coarse block `K_i` with its oversampled neighbourhood `K_i^+`.
#[derive(Debug, Clone)]
pub struct CoarseBlock {
    pub index: usize,
    pub bx: usize,
    pub by: usize,
    pub element: Region,
    pub oversampled: Region,
    /// Coarse blocks contained in `K_i^+`, in increasing index order.
    pub neighborhood: Vec<usize>,
}

/// `Nc x Nc` coarse blocks over a [`FineGrid`], numbered `by * Nc + bx`.
#[derive(Debug, Clone)]
pub struct CoarseDecomposition {
    nc: usize,
    layers: usize,
    cells_per_block: usize,
    blocks: Vec<CoarseBlock>,
}

impl CoarseDecomposition {
    pub fn new<T: Scalar>(grid: &FineGrid<T>, nc: usize, layers: usize) -> Result<Self> {
        let n = grid.n();
        if nc == 0 || !n.is_multiple_of(nc) {
            return Err(Error::invalid(format!(
                "coarse block count {nc} must be positive and divide the fine resolution {n}"
            )));
        }
        let m = n / nc;
        let mut blocks = Vec::with_capacity(nc * nc);
        for by in 0..nc {
            for bx in 0..nc {
                let element = Region::from_cells(
                    grid,
                    CellRange {
                        x0: bx * m,
                        x1: (bx + 1) * m,
                        y0: by * m,
                        y1: (by + 1) * m,
                    },
                );
                let (bx0, bx1) = (bx.saturating_sub(layers), (bx + layers).min(nc - 1));
                let (by0, by1) = (by.saturating_sub(layers), (by + layers).min(nc - 1));
                let oversampled = Region::from_cells(
                    grid,
                    CellRange {
                        x0: bx0 * m,
                        x1: (bx1 + 1) * m,
                        y0: by0 * m,
                        y1: (by1 + 1) * m,
                    },
                );
                let neighborhood = (by0..=by1)
                    .flat_map(|y| (bx0..=bx1).map(move |x| y * nc + x))
                    .collect();
                blocks.push(CoarseBlock {
                    index: by * nc + bx,
                    bx,
                    by,
                    element,
                    oversampled,
                    neighborhood,
                });
            }
        }
        Ok(Self {
            nc,
            layers,
            cells_per_block: m,
            blocks,
        })
    }

    pub fn nc(&self) -> usize {
        self.nc
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn cells_per_block(&self) -> usize {
        self.cells_per_block
    }

    pub fn blocks(&self) -> &[CoarseBlock] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Coarse mesh size `H = 1 / Nc`.
    pub fn coarse_size<T: Scalar>(&self) -> T {
        T::one() / T::from_count(self.nc)
    }
}

/// Bilinear coarse hat functions sampled at the fine nodes.
#[derive(Debug, Clone)]
pub struct PartitionOfUnity<T> {
    /// One fine-node vector per coarse node, coarse node `(a, b)` at index `b * (Nc + 1) + a`.
    pub functions: Vec<DVector<T>>,
}

impl<T: Scalar> PartitionOfUnity<T> {
    pub fn new(grid: &FineGrid<T>, dec: &CoarseDecomposition) -> Self {
        let nc = dec.nc();
        let m = T::from_count(dec.cells_per_block());
        let hat = |node_coord: usize, a: usize| {
            let x = T::from_count(node_coord) / m;
            (T::one() - (x - T::from_count(a)).abs()).max(T::zero())
        };
        let mut functions = Vec::with_capacity((nc + 1) * (nc + 1));
        for b in 0..=nc {
            for a in 0..=nc {
                let values = (0..grid.node_count()).map(|node| {
                    let (i, j) = grid.node_lattice(node);
                    hat(i, a) * hat(j, b)
                });
                functions.push(DVector::from_iterator(grid.node_count(), values));
            }
        }
        Self { functions }
    }

    /// Per-triangle `sum_i |grad chi_i|^2` of the P1 interpolants.
    pub fn gradient_energy(&self, grid: &FineGrid<T>) -> Vec<T> {
        (0..grid.tri_count())
            .map(|t| {
                let grads = crate::fem::p1_gradients(&grid.vertices(t));
                let [a, b, c] = grid.triangles()[t];
                self.functions
                    .iter()
                    .map(|chi| {
                        let gx = chi[a] * grads[0][0] + chi[b] * grads[1][0] + chi[c] * grads[2][0];
                        let gy = chi[a] * grads[0][1] + chi[b] * grads[1][1] + chi[c] * grads[2][1];
                        gx * gx + gy * gy
                    })
                    .fold(T::zero(), |acc, v| acc + v)
            })
            .collect()
    }
}
