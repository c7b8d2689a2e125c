//! Block-structured normal equations and their Schur-complement solve.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::OptimError;

/// Normal equations `H·Δ = b` split into a camera part and independent
/// point blocks:
///
/// ```text
/// | H_cc  H_cp | |Δc|   |b_c|
/// | H_pc  H_pp | |Δp| = |b_p|      H_pp block-diagonal
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSystem {
    pub camera_dims: Vec<usize>,
    pub point_dims: Vec<usize>,
    /// Dense over all camera coordinates.
    pub h_cc: DMatrix<f64>,
    /// Keyed by `(camera block, point block)`.
    pub h_cp: BTreeMap<(usize, usize), DMatrix<f64>>,
    pub h_pp: Vec<DMatrix<f64>>,
    pub b_c: DVector<f64>,
    pub b_p: Vec<DVector<f64>>,
}

/// Solution of a [`BlockSystem`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSolution {
    pub cameras: DVector<f64>,
    pub points: Vec<DVector<f64>>,
}

impl BlockSolution {
    pub fn to_dense(&self) -> DVector<f64> {
        let mut parts: Vec<f64> = self.cameras.iter().copied().collect();
        for p in &self.points {
            parts.extend(p.iter());
        }
        DVector::from_vec(parts)
    }
}

impl BlockSystem {
    pub fn new(camera_dims: Vec<usize>, point_dims: Vec<usize>) -> Self {
        let nc: usize = camera_dims.iter().sum();
        BlockSystem {
            h_cc: DMatrix::zeros(nc, nc),
            b_c: DVector::zeros(nc),
            h_cp: BTreeMap::new(),
            h_pp: point_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect(),
            b_p: point_dims.iter().map(|&d| DVector::zeros(d)).collect(),
            camera_dims,
            point_dims,
        }
    }

    pub fn camera_offsets(&self) -> Vec<usize> {
        offsets(&self.camera_dims)
    }

    pub fn num_camera_coords(&self) -> usize {
        self.camera_dims.iter().sum()
    }

    /// Assembles the full symmetric matrix, cameras first.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let nc = self.num_camera_coords();
        let p_off = offsets(&self.point_dims);
        let n = nc + self.point_dims.iter().sum::<usize>();
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        h.view_mut((0, 0), (nc, nc)).copy_from(&self.h_cc);
        b.rows_mut(0, nc).copy_from(&self.b_c);
        let c_off = self.camera_offsets();
        for (&(c, p), block) in &self.h_cp {
            let (r0, c0) = (c_off[c], nc + p_off[p]);
            h.view_mut((r0, c0), block.shape()).copy_from(block);
            h.view_mut((c0, r0), (block.ncols(), block.nrows()))
                .copy_from(&block.transpose());
        }
        for (p, block) in self.h_pp.iter().enumerate() {
            let o = nc + p_off[p];
            h.view_mut((o, o), block.shape()).copy_from(block);
            b.rows_mut(o, self.point_dims[p]).copy_from(&self.b_p[p]);
        }
        (h, b)
    }
}

pub(crate) fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(dims.len());
    let mut acc = 0;
    for d in dims {
        out.push(acc);
        acc += d;
    }
    out
}

/// Inverts a (small) point block, retrying with `regularization·I` added
/// when the block is not positive definite.
fn invert_point_block(
    block: &DMatrix<f64>,
    index: usize,
    regularization: f64,
) -> Result<DMatrix<f64>, OptimError> {
    if let Some(chol) = block.clone().cholesky() {
        return Ok(chol.inverse());
    }
    if regularization > 0.0 {
        let n = block.nrows();
        if let Some(chol) = (block + DMatrix::identity(n, n) * regularization).cholesky() {
            return Ok(chol.inverse());
        }
    }
    Err(OptimError::SingularPointBlock(index))
}

/// Eliminates the point blocks, solves the reduced camera system
/// `(H_cc − H_cp·H_pp⁻¹·H_pc)·Δc = b_c − H_cp·H_pp⁻¹·b_p` and back-substitutes
/// `Δp = H_pp⁻¹·(b_p − H_pc·Δc)`.
pub fn schur_solve(
    system: &BlockSystem,
    point_regularization: f64,
) -> Result<BlockSolution, OptimError> {
    let inverses: Vec<DMatrix<f64>> = system
        .h_pp
        .iter()
        .enumerate()
        .map(|(i, block)| invert_point_block(block, i, point_regularization))
        .collect::<Result<_, _>>()?;

    let nc = system.num_camera_coords();
    let c_off = system.camera_offsets();
    let mut reduced = system.h_cc.clone();
    let mut rhs = system.b_c.clone();

    // group the coupling blocks by point
    let mut by_point: Vec<Vec<(usize, &DMatrix<f64>)>> = vec![Vec::new(); system.point_dims.len()];
    for (&(c, p), block) in &system.h_cp {
        by_point[p].push((c, block));
    }
    for (p, couplings) in by_point.iter().enumerate() {
        let inv = &inverses[p];
        let inv_b = inv * &system.b_p[p];
        let scaled: Vec<DMatrix<f64>> = couplings.iter().map(|(_, w)| *w * inv).collect();
        for (i, (ci, _)) in couplings.iter().enumerate() {
            let mut r = rhs.rows_mut(c_off[*ci], system.camera_dims[*ci]);
            r -= couplings[i].1 * &inv_b;
            for (cj, wj) in couplings.iter() {
                let update = &scaled[i] * wj.transpose();
                let mut view = reduced.view_mut(
                    (c_off[*ci], c_off[*cj]),
                    (system.camera_dims[*ci], system.camera_dims[*cj]),
                );
                view -= update;
            }
        }
    }

    let cameras = if nc == 0 {
        DVector::zeros(0)
    } else {
        let chol = reduced.cholesky().ok_or(OptimError::SingularSystem)?;
        chol.solve(&rhs)
    };

    let mut points: Vec<DVector<f64>> = system.b_p.clone();
    for (p, couplings) in by_point.iter().enumerate() {
        for (c, w) in couplings {
            points[p] -= w.transpose() * cameras.rows(c_off[*c], system.camera_dims[*c]);
        }
        points[p] = &inverses[p] * &points[p];
    }
    Ok(BlockSolution { cameras, points })
}

/// Solves the assembled system directly with a dense Cholesky factorization.
pub fn dense_solve(h: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, OptimError> {
    if h.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let chol = h.clone().cholesky().ok_or(OptimError::SingularSystem)?;
    Ok(chol.solve(b))
}
