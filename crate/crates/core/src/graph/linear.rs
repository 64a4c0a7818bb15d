//! Normal equations of a window: block-tridiagonal over knots, dense over
//! landmarks, solved by eliminating knots first and reducing onto the
//! landmark block.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::factor::{Linearized, Var};
use super::{GraphError, KnotId, LandmarkId};
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct LinearSystem {
    first_id: KnotId,
    d: usize,
    landmark_index: BTreeMap<LandmarkId, usize>,
    pub diag: Vec<DMatrix<f64>>,
    /// `off[i]` is the block coupling knot `i` (rows) with knot `i + 1`.
    pub off: Vec<DMatrix<f64>>,
    /// Knot-landmark coupling, `d x 3m` per knot.
    pub hxl: Vec<DMatrix<f64>>,
    pub hll: DMatrix<f64>,
    pub bx: Vec<DVector<f64>>,
    pub bl: DVector<f64>,
}

#[derive(Clone, Copy)]
enum Slot {
    Knot(usize),
    Landmark(usize),
}

impl LinearSystem {
    pub fn new(first_id: KnotId, n: usize, d: usize, landmarks: impl IntoIterator<Item = LandmarkId>) -> Self {
        let landmark_index: BTreeMap<_, _> = landmarks.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        let m3 = 3 * landmark_index.len();
        Self {
            first_id,
            d,
            diag: vec![DMatrix::zeros(d, d); n],
            off: vec![DMatrix::zeros(d, d); n.saturating_sub(1)],
            hxl: vec![DMatrix::zeros(d, m3); n],
            hll: DMatrix::zeros(m3, m3),
            bx: vec![DVector::zeros(d); n],
            bl: DVector::zeros(m3),
            landmark_index,
        }
    }

    pub fn num_knots(&self) -> usize {
        self.diag.len()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmark_index.len()
    }

    pub fn dimension(&self) -> usize {
        self.diag.len() * self.d + self.hll.nrows()
    }

    fn slot(&self, v: Var) -> Result<Slot, GraphError> {
        match v {
            Var::Knot(id) => id
                .checked_sub(self.first_id)
                .map(|i| i as usize)
                .filter(|&i| i < self.diag.len())
                .map(Slot::Knot)
                .ok_or(GraphError::UnknownVariable(v)),
            Var::Landmark(id) => self.landmark_index.get(&id).map(|&j| Slot::Landmark(j)).ok_or(GraphError::UnknownVariable(v)),
        }
    }

    /// Accumulates `J^T J` and `J^T r` of one factor.
    pub fn add(&mut self, lin: &Linearized) -> Result<(), GraphError> {
        let slots: Vec<Slot> = lin.blocks.iter().map(|(v, _)| self.slot(*v)).collect::<Result<_, _>>()?;
        for (a, (va, ja)) in lin.blocks.iter().enumerate() {
            let jat = ja.transpose();
            let g = &jat * &lin.residual;
            match slots[a] {
                Slot::Knot(i) => self.bx[i] += g,
                Slot::Landmark(j) => {
                    let mut dst = self.bl.rows_mut(3 * j, 3);
                    dst += g;
                }
            }
            for (b, (vb, jb)) in lin.blocks.iter().enumerate().skip(a) {
                let h = &jat * jb;
                match (slots[a], slots[b]) {
                    (Slot::Knot(i), Slot::Knot(k)) => {
                        if i == k {
                            if a == b {
                                self.diag[i] += &h;
                            } else {
                                self.diag[i] += &h + h.transpose();
                            }
                        } else if k == i + 1 {
                            self.off[i] += &h;
                        } else if i == k + 1 {
                            self.off[k] += h.transpose();
                        } else {
                            let (ka, kb) = match (va, vb) {
                                (Var::Knot(x), Var::Knot(y)) => (*x, *y),
                                _ => unreachable!(),
                            };
                            return Err(GraphError::NonAdjacent(ka, kb));
                        }
                    }
                    (Slot::Knot(i), Slot::Landmark(j)) => {
                        let mut dst = self.hxl[i].columns_mut(3 * j, 3);
                        dst += &h;
                    }
                    (Slot::Landmark(j), Slot::Knot(i)) => {
                        let mut dst = self.hxl[i].columns_mut(3 * j, 3);
                        dst += h.transpose();
                    }
                    (Slot::Landmark(j), Slot::Landmark(l)) => {
                        if j == l {
                            let hs = if a == b { h.clone() } else { &h + h.transpose() };
                            let mut dst = self.hll.view_mut((3 * j, 3 * j), (3, 3));
                            dst += hs;
                        } else {
                            let mut dst = self.hll.view_mut((3 * j, 3 * l), (3, 3));
                            dst += &h;
                            let mut dst = self.hll.view_mut((3 * l, 3 * j), (3, 3));
                            dst += h.transpose();
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Dense Hessian and gradient in the stacked ordering.
    pub fn dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.diag.len();
        let d = self.d;
        let dim = self.dimension();
        let base = n * d;
        let mut h = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        for i in 0..n {
            h.view_mut((i * d, i * d), (d, d)).copy_from(&self.diag[i]);
            b.rows_mut(i * d, d).copy_from(&self.bx[i]);
            if i + 1 < n {
                h.view_mut((i * d, (i + 1) * d), (d, d)).copy_from(&self.off[i]);
                h.view_mut(((i + 1) * d, i * d), (d, d)).copy_from(&self.off[i].transpose());
            }
            if base < dim {
                h.view_mut((i * d, base), (d, dim - base)).copy_from(&self.hxl[i]);
                h.view_mut((base, i * d), (dim - base, d)).copy_from(&self.hxl[i].transpose());
            }
        }
        if base < dim {
            h.view_mut((base, base), (dim - base, dim - base)).copy_from(&self.hll);
            b.rows_mut(base, dim - base).copy_from(&self.bl);
        }
        (h, b)
    }

    /// Solves `(H + lambda diag(H)) dx = -b`.
    pub fn solve(&self, lambda: f64) -> Result<DVector<f64>, GraphError> {
        let n = self.diag.len();
        let d = self.d;
        let m3 = self.hll.nrows();
        let damp = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let mut out = m.clone();
            for i in 0..out.nrows() {
                out[(i, i)] += lambda * m[(i, i)].max(1e-9);
            }
            out
        };

        // Block Cholesky of the knot block: L_i, and M_i = L_i^-1 B_i.
        let mut ls: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        let mut m_blocks: Vec<DMatrix<f64>> = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let mut a = damp(&self.diag[i]);
            if i > 0 {
                let mi: &DMatrix<f64> = &m_blocks[i - 1];
                a -= mi.tr_mul(mi);
            }
            let l = Cholesky::new(a).ok_or(GraphError::NotPositiveDefinite)?.l();
            if i + 1 < n {
                let mi = l.solve_lower_triangular(&self.off[i]).ok_or(GraphError::NotPositiveDefinite)?;
                m_blocks.push(mi);
            }
            ls.push(l);
        }
        let knot_solve = |rhs: &[DMatrix<f64>]| -> Result<Vec<DMatrix<f64>>, GraphError> {
            let lower = |i: usize| &ls[i];
            let mut y: Vec<DMatrix<f64>> = Vec::with_capacity(n);
            for i in 0..n {
                let mut r = rhs[i].clone();
                if i > 0 {
                    r -= m_blocks[i - 1].tr_mul(&y[i - 1]);
                }
                y.push(lower(i).solve_lower_triangular(&r).ok_or(GraphError::NotPositiveDefinite)?);
            }
            let mut x = vec![DMatrix::zeros(0, 0); n];
            for i in (0..n).rev() {
                let mut r = y[i].clone();
                if i + 1 < n {
                    r -= &m_blocks[i] * &x[i + 1];
                }
                x[i] = lower(i).tr_solve_lower_triangular(&r).ok_or(GraphError::NotPositiveDefinite)?;
            }
            Ok(x)
        };

        let bx: Vec<DMatrix<f64>> = self.bx.iter().map(|b| DMatrix::from_column_slice(d, 1, b.as_slice())).collect();
        let z = knot_solve(&bx)?;
        let mut step = DVector::zeros(self.dimension());
        if m3 == 0 {
            for i in 0..n {
                step.rows_mut(i * d, d).copy_from(&(-&z[i]));
            }
            return Ok(step);
        }
        let y = knot_solve(&self.hxl)?;
        let mut s = damp(&self.hll);
        let mut rhs = self.bl.clone();
        for i in 0..n {
            // Only the landmarks seen from knot i have nonzero coupling columns.
            let seen: Vec<usize> = (0..m3 / 3).filter(|&j| self.hxl[i].columns(3 * j, 3).iter().any(|v| *v != 0.0)).collect();
            if seen.is_empty() {
                continue;
            }
            let cols: Vec<usize> = seen.iter().flat_map(|&j| 3 * j..3 * j + 3).collect();
            let hc_t = self.hxl[i].select_columns(&cols).transpose();
            let upd = &hc_t * &y[i];
            let g = &hc_t * &z[i];
            for (r, &c) in cols.iter().enumerate() {
                let mut row = s.row_mut(c);
                row -= upd.row(r);
                rhs[c] -= g[(r, 0)];
            }
        }
        let s = (&s + s.transpose()) * 0.5;
        let dl = -Cholesky::new(s).ok_or(GraphError::NotPositiveDefinite)?.solve(&rhs);
        for i in 0..n {
            let dx = -(&z[i] + &y[i] * &dl);
            step.rows_mut(i * d, d).copy_from(&dx.column(0));
        }
        step.rows_mut(n * d, m3).copy_from(&dl);
        Ok(step)
    }
}
