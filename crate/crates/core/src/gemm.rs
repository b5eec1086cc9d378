//! Register-tiled GEMM with a fixed per-element reduction order.
//!
//! `Y[:, j] = K · X[:, j]` for column-major `X` and `Y`. Every output element
//! is accumulated from 0 over the shared dimension in ascending order, one
//! multiply and one add per step, so results do not depend on tiling or on
//! how column blocks are spread over threads.

use rayon::prelude::*;

use crate::tensor::KernelMatrix;

/// Output rows per micro-tile.
const MR: usize = 4;
/// Output columns per micro-tile.
const NR: usize = 8;
/// Shared-dimension block; accumulators are carried across blocks in order.
const KC: usize = 256;
/// Columns handled by one parallel task.
const NC: usize = 64;

/// Kernel matrix repacked into `MR`-row panels, each stored `k`-major.
#[derive(Clone, Debug)]
pub struct PackedKernel {
    rows: usize,
    depth: usize,
    panels: Vec<f32>,
}

impl PackedKernel {
    pub fn new(k: &KernelMatrix) -> Self {
        let n_panels = k.rows.div_ceil(MR);
        let mut panels = vec![0.0; n_panels * MR * k.cols];
        for p in 0..n_panels {
            let panel = &mut panels[p * MR * k.cols..(p + 1) * MR * k.cols];
            for r in 0..k.cols {
                for i in 0..MR {
                    let row = p * MR + i;
                    if row < k.rows {
                        panel[r * MR + i] = k.data[row * k.cols + r];
                    }
                }
            }
        }
        PackedKernel {
            rows: k.rows,
            depth: k.cols,
            panels,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    fn panel(&self, p: usize) -> &[f32] {
        &self.panels[p * MR * self.depth..(p + 1) * MR * self.depth]
    }
}

#[inline(always)]
fn micro_kernel(a: &[f32], b: &[f32], acc: &mut [[f32; NR]; MR]) {
    for (av, bv) in a.chunks_exact(MR).zip(b.chunks_exact(NR)) {
        for i in 0..MR {
            let ai = av[i];
            for j in 0..NR {
                acc[i][j] += ai * bv[j];
            }
        }
    }
}

/// Packs columns `[c0, c0 + n)` of `x` into `NR`-wide strips, `k`-major.
fn pack_columns(x: &[f32], depth: usize, c0: usize, n: usize, out: &mut Vec<f32>) {
    let strips = n.div_ceil(NR);
    out.clear();
    out.resize(strips * NR * depth, 0.0);
    for s in 0..strips {
        let strip = &mut out[s * NR * depth..(s + 1) * NR * depth];
        for j in 0..NR.min(n - s * NR) {
            let col = &x[(c0 + s * NR + j) * depth..(c0 + s * NR + j + 1) * depth];
            for (r, &v) in col.iter().enumerate() {
                strip[r * NR + j] = v;
            }
        }
    }
}

fn gemm_block(kernel: &PackedKernel, x: &[f32], c0: usize, y: &mut [f32]) {
    let depth = kernel.depth;
    let m = kernel.rows;
    let n = y.len() / m;
    let mut packed = Vec::new();
    pack_columns(x, depth, c0, n, &mut packed);
    let strips = n.div_ceil(NR);
    let panels = m.div_ceil(MR);
    // Accumulators for the whole block, carried across shared-dim blocks.
    let mut acc = vec![[[0.0f32; NR]; MR]; panels * strips];
    let mut k0 = 0;
    while k0 < depth {
        let k1 = (k0 + KC).min(depth);
        for p in 0..panels {
            let a = &kernel.panel(p)[k0 * MR..k1 * MR];
            for s in 0..strips {
                let b = &packed[s * NR * depth + k0 * NR..s * NR * depth + k1 * NR];
                micro_kernel(a, b, &mut acc[p * strips + s]);
            }
        }
        k0 = k1;
    }
    for p in 0..panels {
        for s in 0..strips {
            let tile = &acc[p * strips + s];
            for j in 0..NR.min(n - s * NR) {
                let col = &mut y[(s * NR + j) * m..(s * NR + j + 1) * m];
                for i in 0..MR.min(m - p * MR) {
                    col[p * MR + i] = tile[i][j];
                }
            }
        }
    }
}

/// `y = K x` with `x` holding `n` columns of `kernel.depth()` values and `y`
/// `n` columns of `kernel.rows()` values, both column-major.
pub fn gemm_into(kernel: &PackedKernel, x: &[f32], n: usize, y: &mut [f32]) {
    let m = kernel.rows;
    assert_eq!(x.len(), n * kernel.depth, "gemm: x has wrong length");
    assert_eq!(y.len(), n * m, "gemm: y has wrong length");
    if n == 0 || m == 0 {
        return;
    }
    if kernel.depth == 0 {
        y.fill(0.0);
        return;
    }
    if n <= NC {
        gemm_block(kernel, x, 0, y);
    } else {
        y.par_chunks_mut(NC * m)
            .enumerate()
            .for_each(|(b, yb)| gemm_block(kernel, x, b * NC, yb));
    }
}
