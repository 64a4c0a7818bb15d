//! Schur-complement marginalization and the resulting Gaussian prior.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Vector3};

use super::factor::{EvalCache, Factor, FactorEnv, Linearized, States, Var};
use super::{GraphError, KnotId, KnotState, LandmarkId};
use crate::par::Execution;

/// Eigenvalue floor applied when inverting the eliminated block.
pub const SCHUR_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
enum LinPoint {
    Knot(KnotState),
    Landmark(Vector3<f64>),
}

impl LinPoint {
    fn dim(&self) -> usize {
        match self {
            LinPoint::Knot(k) => k.dim(),
            LinPoint::Landmark(_) => 3,
        }
    }
}

/// Gaussian prior on the retained variables, fixed at its linearization
/// point. Stored both as information form `(H, b)` on the stacked tangent
/// and as the equivalent square-root residual `r = r0 + J dx`.
#[derive(Clone, Debug)]
pub struct MarginalPrior {
    vars: Vec<(Var, LinPoint)>,
    pub information: DMatrix<f64>,
    pub information_vector: DVector<f64>,
    sqrt_jacobian: DMatrix<f64>,
    sqrt_residual: DVector<f64>,
}

impl MarginalPrior {
    fn new(vars: Vec<(Var, LinPoint)>, h: DMatrix<f64>, b: DVector<f64>) -> Self {
        let h = (&h + h.transpose()) * 0.5;
        let eig = h.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > SCHUR_FLOOR.max(1e-14 * max)).collect();
        let dim = h.nrows();
        let mut jac = DMatrix::zeros(keep.len(), dim);
        let mut res = DVector::zeros(keep.len());
        for (r, &i) in keep.iter().enumerate() {
            let v = eig.eigenvectors.column(i);
            let l = eig.eigenvalues[i];
            jac.row_mut(r).copy_from(&(v.transpose() * l.sqrt()));
            res[r] = v.dot(&b) / l.sqrt();
        }
        Self { vars, information: h, information_vector: b, sqrt_jacobian: jac, sqrt_residual: res }
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(v, _)| *v)
    }

    pub fn dim(&self) -> usize {
        self.information.nrows()
    }

    pub fn rank(&self) -> usize {
        self.sqrt_jacobian.nrows()
    }

    pub fn touches(&self, v: Var) -> bool {
        self.vars.iter().any(|(w, _)| *w == v)
    }

    pub fn knot_lin_point(&self, id: KnotId) -> Option<KnotState> {
        self.vars.iter().find_map(|(v, p)| match (v, p) {
            (Var::Knot(k), LinPoint::Knot(s)) if *k == id => Some(*s),
            _ => None,
        })
    }

    /// Tangent offset of `states` from the linearization point and the
    /// Jacobian of that offset, blockwise.
    fn offsets(&self, states: &States) -> Result<(DVector<f64>, Vec<DMatrix<f64>>), GraphError> {
        let mut delta = DVector::zeros(self.dim());
        let mut jacs = Vec::with_capacity(self.vars.len());
        let mut off = 0;
        for (var, lin) in &self.vars {
            match (var, lin) {
                (Var::Knot(id), LinPoint::Knot(x0)) => {
                    let x = states.knot(*id)?;
                    delta.rows_mut(off, x0.dim()).copy_from(&x0.local(x));
                    jacs.push(x0.local_jacobian(x));
                }
                (Var::Landmark(id), LinPoint::Landmark(p0)) => {
                    let p = states.landmark(*id)?;
                    delta.rows_mut(off, 3).copy_from(&(p - p0));
                    jacs.push(DMatrix::identity(3, 3));
                }
                _ => unreachable!("linearization point kind matches variable kind"),
            }
            off += lin.dim();
        }
        Ok((delta, jacs))
    }

    pub fn evaluate(&self, states: &States, jacobians: bool) -> Result<Linearized, GraphError> {
        let (delta, jacs) = self.offsets(states)?;
        let residual = &self.sqrt_residual + &self.sqrt_jacobian * delta;
        let mut blocks = Vec::new();
        if jacobians {
            let mut off = 0;
            for ((var, lin), j) in self.vars.iter().zip(&jacs) {
                let n = lin.dim();
                blocks.push((*var, self.sqrt_jacobian.columns(off, n) * j));
                off += n;
            }
        }
        let cost = residual.norm_squared();
        Ok(Linearized { residual, blocks, cost })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarginalizationReport {
    pub knots: Vec<KnotId>,
    pub landmarks: Vec<LandmarkId>,
    pub factors: usize,
    /// Eigenvalues of the eliminated block raised to the floor.
    pub floored: usize,
}

/// Linearizes `factors` at `states`, eliminates `remove` and returns the
/// prior induced on every other variable the factors touch.
pub fn marginalize_variables(
    factors: &[Factor],
    remove: &BTreeSet<Var>,
    states: &States,
    env: &FactorEnv,
    exec: Execution,
) -> Result<(Option<MarginalPrior>, usize), GraphError> {
    let cache = EvalCache::build(states, true, exec);
    let lins: Vec<Linearized> = crate::par::map(exec, factors, |f| f.evaluate(states, env, &cache, true))
        .into_iter()
        .collect::<Result<_, _>>()?;

    // Eliminated variables first, then retained ones, each in key order.
    let mut touched: BTreeSet<Var> = BTreeSet::new();
    for l in &lins {
        touched.extend(l.blocks.iter().map(|(v, _)| *v));
    }
    for f in factors {
        touched.extend(f.vars());
    }
    let order: Vec<Var> = remove.iter().copied().chain(touched.iter().copied().filter(|v| !remove.contains(v))).collect();
    let mut offsets = BTreeMap::new();
    let mut points = Vec::new();
    let mut dim = 0;
    for v in &order {
        let p = match v {
            Var::Knot(id) => LinPoint::Knot(*states.knot(*id)?),
            Var::Landmark(id) => LinPoint::Landmark(*states.landmark(*id)?),
        };
        offsets.insert(*v, dim);
        dim += p.dim();
        points.push((*v, p));
    }
    let nm: usize = points.iter().filter(|(v, _)| remove.contains(v)).map(|(_, p)| p.dim()).sum();

    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for l in &lins {
        for (va, ja) in &l.blocks {
            let oa = offsets[va];
            let mut g = b.rows_mut(oa, ja.ncols());
            g += ja.tr_mul(&l.residual);
            for (vb, jb) in &l.blocks {
                let ob = offsets[vb];
                let mut dst = h.view_mut((oa, ob), (ja.ncols(), jb.ncols()));
                dst += ja.tr_mul(jb);
            }
        }
    }
    let nr = dim - nm;
    if nr == 0 {
        return Ok((None, 0));
    }
    let hmm = h.view((0, 0), (nm, nm)).into_owned();
    let hmr = h.view((0, nm), (nm, nr)).into_owned();
    let hrr = h.view((nm, nm), (nr, nr)).into_owned();
    let (bm, br) = (b.rows(0, nm).into_owned(), b.rows(nm, nr).into_owned());

    // Jacobi scaling keeps the factorization accurate when information
    // levels differ by many orders of magnitude, as they do between anchors,
    // bias walks and landmarks.
    let scale = hmm.diagonal().map(|x| if x > 0.0 { 1.0 / x.sqrt() } else { 1.0 });
    let scaled = DMatrix::from_fn(nm, nm, |i, j| hmm[(i, j)] * scale[i] * scale[j]);
    let chol = if nm == 0 { None } else { scaled.cholesky().filter(|c| c.l().diagonal().min() > 1e-7) };

    let (h_new, b_new, floored) = if nm == 0 {
        (hrr, br, 0)
    } else if let Some(chol) = chol {
        let hs = DMatrix::from_fn(nm, nr, |i, j| hmr[(i, j)] * scale[i]);
        let y = chol.solve(&hs);
        let z = chol.solve(&DVector::from_fn(nm, |i, _| bm[i] * scale[i]));
        (&hrr - hs.tr_mul(&y), &br - hs.tr_mul(&z), 0)
    } else {
        let eig = ((&hmm + hmm.transpose()) * 0.5).symmetric_eigen();
        let floored = eig.eigenvalues.iter().filter(|&&e| e < SCHUR_FLOOR).count();
        if floored > 0 {
            log::warn!("marginalization: {floored} eigenvalue(s) of the eliminated block floored at {SCHUR_FLOOR:e}");
        }
        let inv_vals = eig.eigenvalues.map(|e| 1.0 / e.max(SCHUR_FLOOR));
        let hmm_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
        let t = hmr.tr_mul(&hmm_inv);
        (&hrr - &t * &hmr, &br - &t * &bm, floored)
    };
    let retained: Vec<(Var, LinPoint)> = points.into_iter().filter(|(v, _)| !remove.contains(v)).collect();
    Ok((Some(MarginalPrior::new(retained, h_new, b_new)), floored))
}
