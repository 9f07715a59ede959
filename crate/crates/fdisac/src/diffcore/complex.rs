//! Complex scalars, vectors and matrices as pairs of tape variables.
//!
//! A complex value `z = x + jy` is two real tape positions. Gradients of a
//! real scalar with respect to `z` are reported in the conjugate-Wirtinger
//! convention `g = df/dx + j df/dy = 2 df/dz̄`, which is the direction of
//! steepest ascent: a small update `z += eps*g` increases the objective to
//! first order.

use num_complex::Complex64;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// A complex tape value.
#[derive(Clone, Copy, Debug)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl Graph {
    pub fn cleaf(&mut self, z: Complex64) -> CVar {
        CVar {
            re: self.leaf(z.re),
            im: self.leaf(z.im),
        }
    }

    /// Promote a real tape value to complex with zero imaginary part.
    pub fn creal(&mut self, re: Var) -> CVar {
        CVar {
            re,
            im: self.leaf(0.0),
        }
    }

    pub fn cvalue(&self, z: CVar) -> Complex64 {
        Complex64::new(self.value(z.re), self.value(z.im))
    }

    pub fn cadd(&mut self, a: CVar, b: CVar) -> CVar {
        CVar {
            re: self.add(a.re, b.re),
            im: self.add(a.im, b.im),
        }
    }

    pub fn csub(&mut self, a: CVar, b: CVar) -> CVar {
        CVar {
            re: self.sub(a.re, b.re),
            im: self.sub(a.im, b.im),
        }
    }

    pub fn cneg(&mut self, a: CVar) -> CVar {
        CVar {
            re: self.neg(a.re),
            im: self.neg(a.im),
        }
    }

    pub fn cconj(&mut self, a: CVar) -> CVar {
        CVar {
            re: a.re,
            im: self.neg(a.im),
        }
    }

    pub fn cmul(&mut self, a: CVar, b: CVar) -> CVar {
        let rr = self.mul(a.re, b.re);
        let ii = self.mul(a.im, b.im);
        let ri = self.mul(a.re, b.im);
        let ir = self.mul(a.im, b.re);
        CVar {
            re: self.sub(rr, ii),
            im: self.add(ri, ir),
        }
    }

    /// `conj(a) * b`, the elementary term of Hermitian inner products.
    pub fn cmul_conj(&mut self, a: CVar, b: CVar) -> CVar {
        let rr = self.mul(a.re, b.re);
        let ii = self.mul(a.im, b.im);
        let ri = self.mul(a.re, b.im);
        let ir = self.mul(a.im, b.re);
        CVar {
            re: self.add(rr, ii),
            im: self.sub(ri, ir),
        }
    }

    /// Scale by a real tape value.
    pub fn cscale(&mut self, a: CVar, s: Var) -> CVar {
        CVar {
            re: self.mul(a.re, s),
            im: self.mul(a.im, s),
        }
    }

    pub fn cscale_const(&mut self, a: CVar, s: f64) -> CVar {
        let s = self.leaf(s);
        self.cscale(a, s)
    }

    /// Divide by a real tape value.
    pub fn cdiv_re(&mut self, a: CVar, s: Var) -> CVar {
        CVar {
            re: self.div(a.re, s),
            im: self.div(a.im, s),
        }
    }

    /// Squared modulus `|z|^2` as a real tape value.
    pub fn cmodsq(&mut self, a: CVar) -> Var {
        let rr = self.square(a.re);
        let ii = self.square(a.im);
        self.add(rr, ii)
    }

    /// `exp(j*theta)` for a real phase.
    pub fn cexp_j(&mut self, theta: Var) -> CVar {
        CVar {
            re: self.cos(theta),
            im: self.sin(theta),
        }
    }

    pub fn csum(&mut self, terms: &[CVar]) -> CVar {
        match terms.split_first() {
            None => self.cleaf(Complex64::new(0.0, 0.0)),
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = self.cadd(acc, t);
                }
                acc
            }
        }
    }
}

/// Hermitian inner product `sum_i conj(a_i) * b_i`.
pub fn cdot_h(g: &mut Graph, a: &[CVar], b: &[CVar]) -> Result<CVar> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "inner product length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = g.cleaf(Complex64::new(0.0, 0.0));
    for (&x, &y) in a.iter().zip(b) {
        let t = g.cmul_conj(x, y);
        acc = g.cadd(acc, t);
    }
    Ok(acc)
}

/// Squared Euclidean norm of a complex vector.
pub fn cnorm_sq(g: &mut Graph, a: &[CVar]) -> Var {
    let mut acc = g.leaf(0.0);
    for &x in a {
        let m = g.cmodsq(x);
        acc = g.add(acc, m);
    }
    acc
}

/// Dense complex matrix of tape values, row-major.
#[derive(Clone, Debug)]
pub struct CMatVar {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<CVar>,
}

impl CMatVar {
    pub fn new(rows: usize, cols: usize, data: Vec<CVar>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(CMatVar { rows, cols, data })
    }

    pub fn from_columns(cols: &[Vec<CVar>]) -> Result<Self> {
        let ncols = cols.len();
        let nrows = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|c| c.len() != nrows) {
            return Err(Error::Shape("ragged column list".into()));
        }
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in 0..nrows {
            for col in cols {
                data.push(col[r]);
            }
        }
        Ok(CMatVar {
            rows: nrows,
            cols: ncols,
            data,
        })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> CVar {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[CVar] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<CVar> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    /// Plain transpose; records no operations.
    pub fn transpose(&self) -> CMatVar {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.at(r, c));
            }
        }
        CMatVar {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn values(&self, g: &Graph) -> Vec<Complex64> {
        self.data.iter().map(|&z| g.cvalue(z)).collect()
    }
}

/// Matrix product `a * b`.
pub fn cmatmul(g: &mut Graph, a: &CMatVar, b: &CMatVar) -> Result<CMatVar> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul inner dimension mismatch: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut data = Vec::with_capacity(a.rows * b.cols);
    for r in 0..a.rows {
        for c in 0..b.cols {
            let mut acc = g.cleaf(Complex64::new(0.0, 0.0));
            for k in 0..a.cols {
                let t = g.cmul(a.at(r, k), b.at(k, c));
                acc = g.cadd(acc, t);
            }
            data.push(acc);
        }
    }
    CMatVar::new(a.rows, b.cols, data)
}

/// Conjugate transpose `a^H`.
pub fn chermitian(g: &mut Graph, a: &CMatVar) -> CMatVar {
    let mut data = Vec::with_capacity(a.data.len());
    for c in 0..a.cols {
        for r in 0..a.rows {
            let z = a.at(r, c);
            data.push(g.cconj(z));
        }
    }
    CMatVar {
        rows: a.cols,
        cols: a.rows,
        data,
    }
}

/// Trace of a square matrix.
pub fn ctrace(g: &mut Graph, a: &CMatVar) -> Result<CVar> {
    if a.rows != a.cols {
        return Err(Error::Shape(format!(
            "trace of non-square {}x{}",
            a.rows, a.cols
        )));
    }
    let diag: Vec<CVar> = (0..a.rows).map(|i| a.at(i, i)).collect();
    Ok(g.csum(&diag))
}

/// Squared Frobenius norm, equal to `Tr(A A^H)`.
pub fn cfrobenius_sq(g: &mut Graph, a: &CMatVar) -> Var {
    cnorm_sq(g, &a.data)
}

/// Named dispatch into the registered matrix operations. Unknown names are
/// an [`Error::UnsupportedOp`]; this is the boundary that keeps externally
/// described programs inside the differentiable op set.
pub fn apply_named(g: &mut Graph, name: &str, args: &[&CMatVar]) -> Result<CMatVar> {
    let want = |n: usize| -> Result<()> {
        if args.len() != n {
            Err(Error::Shape(format!(
                "op `{name}` expects {n} operand(s), got {}",
                args.len()
            )))
        } else {
            Ok(())
        }
    };
    match name {
        "add" => {
            want(2)?;
            if args[0].rows != args[1].rows || args[0].cols != args[1].cols {
                return Err(Error::Shape("add shape mismatch".into()));
            }
            let data = args[0]
                .data
                .iter()
                .zip(&args[1].data)
                .map(|(&a, &b)| g.cadd(a, b))
                .collect();
            CMatVar::new(args[0].rows, args[0].cols, data)
        }
        "multiply" => {
            want(2)?;
            if args[0].rows != args[1].rows || args[0].cols != args[1].cols {
                return Err(Error::Shape("multiply shape mismatch".into()));
            }
            let data = args[0]
                .data
                .iter()
                .zip(&args[1].data)
                .map(|(&a, &b)| g.cmul(a, b))
                .collect();
            CMatVar::new(args[0].rows, args[0].cols, data)
        }
        "conjugate" => {
            want(1)?;
            let data = args[0].data.iter().map(|&a| g.cconj(a)).collect();
            CMatVar::new(args[0].rows, args[0].cols, data)
        }
        "matrix_product" => {
            want(2)?;
            cmatmul(g, args[0], args[1])
        }
        "hermitian_transpose" => {
            want(1)?;
            Ok(chermitian(g, args[0]))
        }
        "modulus_squared" => {
            want(1)?;
            let data = args[0]
                .data
                .iter()
                .map(|&a| {
                    let m = g.cmodsq(a);
                    g.creal(m)
                })
                .collect();
            CMatVar::new(args[0].rows, args[0].cols, data)
        }
        "exp_j" => {
            want(1)?;
            let data = args[0].data.iter().map(|&a| g.cexp_j(a.re)).collect();
            CMatVar::new(args[0].rows, args[0].cols, data)
        }
        "log2" => {
            want(1)?;
            let data = args[0]
                .data
                .iter()
                .map(|&a| {
                    let l = g.log2(a.re);
                    g.creal(l)
                })
                .collect();
            CMatVar::new(args[0].rows, args[0].cols, data)
        }
        "real_part" => {
            want(1)?;
            let data = args[0].data.iter().map(|&a| g.creal(a.re)).collect();
            CMatVar::new(args[0].rows, args[0].cols, data)
        }
        "sum" => {
            want(1)?;
            let s = g.csum(&args[0].data);
            CMatVar::new(1, 1, vec![s])
        }
        "trace" => {
            want(1)?;
            let t = ctrace(g, args[0])?;
            CMatVar::new(1, 1, vec![t])
        }
        "norm" => {
            want(1)?;
            let sq = cnorm_sq(g, &args[0].data);
            let n = g.sqrt(sq);
            let c = g.creal(n);
            CMatVar::new(1, 1, vec![c])
        }
        other => Err(Error::UnsupportedOp(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_product_matches_num_complex() {
        let mut g = Graph::new();
        let a = Complex64::new(1.2, -0.7);
        let b = Complex64::new(-2.1, 0.4);
        let av = g.cleaf(a);
        let bv = g.cleaf(b);
        let p = g.cmul(av, bv);
        let want = a * b;
        assert!((g.cvalue(p) - want).norm() < 1e-15);
        let pc = g.cmul_conj(av, bv);
        let want_c = a.conj() * b;
        assert!((g.cvalue(pc) - want_c).norm() < 1e-15);
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::new();
        // [[1, j], [0, 2]] * [1, 1-j]^T = [1 + j(1-j), 2(1-j)] = [2+j, 2-2j]
        let a = CMatVar::new(
            2,
            2,
            vec![
                g.cleaf(Complex64::new(1.0, 0.0)),
                g.cleaf(Complex64::new(0.0, 1.0)),
                g.cleaf(Complex64::new(0.0, 0.0)),
                g.cleaf(Complex64::new(2.0, 0.0)),
            ],
        )
        .unwrap();
        let b = CMatVar::new(
            2,
            1,
            vec![
                g.cleaf(Complex64::new(1.0, 0.0)),
                g.cleaf(Complex64::new(1.0, -1.0)),
            ],
        )
        .unwrap();
        let p = cmatmul(&mut g, &a, &b).unwrap();
        assert!((g.cvalue(p.at(0, 0)) - Complex64::new(2.0, 1.0)).norm() < 1e-15);
        assert!((g.cvalue(p.at(1, 0)) - Complex64::new(2.0, -2.0)).norm() < 1e-15);
    }

    #[test]
    fn unsupported_op_is_an_error() {
        let mut g = Graph::new();
        let a = CMatVar::new(1, 1, vec![g.cleaf(Complex64::new(1.0, 0.0))]).unwrap();
        match apply_named(&mut g, "determinant", &[&a]) {
            Err(Error::UnsupportedOp(name)) => assert_eq!(name, "determinant"),
            other => panic!("expected UnsupportedOp, got {other:?}"),
        }
    }

    #[test]
    fn named_trace_and_norm() {
        let mut g = Graph::new();
        let a = CMatVar::new(
            2,
            2,
            vec![
                g.cleaf(Complex64::new(3.0, 0.0)),
                g.cleaf(Complex64::new(0.0, 5.0)),
                g.cleaf(Complex64::new(0.0, 0.0)),
                g.cleaf(Complex64::new(4.0, 0.0)),
            ],
        )
        .unwrap();
        let t = apply_named(&mut g, "trace", &[&a]).unwrap();
        assert!((g.cvalue(t.at(0, 0)) - Complex64::new(7.0, 0.0)).norm() < 1e-15);
        let n = apply_named(&mut g, "norm", &[&a]).unwrap();
        let want = (9.0f64 + 25.0 + 16.0).sqrt();
        assert!((g.cvalue(n.at(0, 0)).re - want).abs() < 1e-14);
    }
}
