//! Named parameter blocks and whole-program gradient evaluation.

use num_complex::Complex64;

use super::complex::CVar;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BlockKind {
    Real,
    Complex,
}

/// One optimization variable block: a dense real or complex array with a
/// symbolic name. Complex values are stored as interleaved `re, im` pairs.
#[derive(Clone, Debug)]
pub struct ParameterBlock {
    pub id: String,
    pub kind: BlockKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParameterBlock {
    pub fn real(id: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let b = ParameterBlock {
            id: id.to_string(),
            kind: BlockKind::Real,
            shape,
            values,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn complex(id: &str, shape: Vec<usize>, values: Vec<Complex64>) -> Result<Self> {
        let mut flat = Vec::with_capacity(values.len() * 2);
        for z in values {
            flat.push(z.re);
            flat.push(z.im);
        }
        let b = ParameterBlock {
            id: id.to_string(),
            kind: BlockKind::Complex,
            shape,
            values: flat,
        };
        b.validate()?;
        Ok(b)
    }

    /// Number of scalar elements (complex elements count once).
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of real coordinates backing the block.
    pub fn real_len(&self) -> usize {
        match self.kind {
            BlockKind::Real => self.element_count(),
            BlockKind::Complex => self.element_count() * 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.real_len() {
            return Err(Error::Shape(format!(
                "block `{}`: {} stored reals but shape {:?} needs {}",
                self.id,
                self.values.len(),
                self.shape,
                self.real_len()
            )));
        }
        Ok(())
    }

    pub fn complex_values(&self) -> Vec<Complex64> {
        assert_eq!(self.kind, BlockKind::Complex);
        self.values
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect()
    }
}

/// A block bound onto a tape: the input variables, in storage order.
#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub kind: BlockKind,
    pub shape: Vec<usize>,
    pub vars: Vec<Var>,
}

impl BoundBlock {
    pub fn bind(g: &mut Graph, block: &ParameterBlock) -> BoundBlock {
        BoundBlock {
            kind: block.kind,
            shape: block.shape.clone(),
            vars: g.leaves(&block.values),
        }
    }

    /// View a complex block as complex tape values.
    pub fn as_cvars(&self) -> Vec<CVar> {
        assert_eq!(self.kind, BlockKind::Complex);
        self.vars
            .chunks_exact(2)
            .map(|p| CVar { re: p[0], im: p[1] })
            .collect()
    }

    pub fn as_vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-block gradients of a real scalar program. Complex blocks carry the
/// conjugate-Wirtinger gradient `g = df/dRe + j df/dIm` interleaved as
/// `re, im` pairs; real blocks carry plain partials.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub blocks: Vec<BlockGradient>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGradient {
    pub id: String,
    pub kind: BlockKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl GradientBundle {
    pub fn get(&self, id: &str) -> Option<&BlockGradient> {
        self.blocks.iter().find(|b| b.id == id)
    }
}

impl BlockGradient {
    pub fn complex_values(&self) -> Vec<Complex64> {
        assert_eq!(self.kind, BlockKind::Complex);
        self.values
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect()
    }
}

/// Evaluate a real scalar program of the given blocks and return its value
/// together with exact reverse-mode gradients for every block.
pub fn evaluate_with_gradient<F>(
    blocks: &[ParameterBlock],
    program: F,
) -> Result<(f64, GradientBundle)>
where
    F: FnOnce(&mut Graph, &[BoundBlock]) -> Result<Var>,
{
    for b in blocks {
        b.validate()?;
    }
    let mut g = Graph::new();
    let bound: Vec<BoundBlock> = blocks.iter().map(|b| BoundBlock::bind(&mut g, b)).collect();
    let out = program(&mut g, &bound)?;
    g.check_fault()?;
    let value = g.value(out);
    let adj = g.backward_numeric(out);
    let grads = blocks
        .iter()
        .zip(&bound)
        .map(|(b, bb)| BlockGradient {
            id: b.id.clone(),
            kind: b.kind,
            shape: b.shape.clone(),
            values: bb.vars.iter().map(|v| adj[v.index()]).collect(),
        })
        .collect();
    Ok((value, GradientBundle { blocks: grads }))
}

/// Evaluate the program once, without gradients.
pub fn evaluate<F>(blocks: &[ParameterBlock], program: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &[BoundBlock]) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound: Vec<BoundBlock> = blocks.iter().map(|b| BoundBlock::bind(&mut g, b)).collect();
    let out = program(&mut g, &bound)?;
    g.check_fault()?;
    Ok(g.value(out))
}

/// Central finite differences on every real coordinate of every block.
/// For complex blocks the partials recombine into the same conjugate-
/// Wirtinger form as [`evaluate_with_gradient`], making the two directly
/// comparable.
pub fn finite_difference_gradient<F>(
    blocks: &[ParameterBlock],
    step: f64,
    program: F,
) -> Result<GradientBundle>
where
    F: Fn(&mut Graph, &[BoundBlock]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!(
            "finite difference step must be positive, got {step}"
        )));
    }
    let mut work: Vec<ParameterBlock> = blocks.to_vec();
    let mut grads = Vec::with_capacity(blocks.len());
    for bi in 0..blocks.len() {
        let mut values = vec![0.0f64; blocks[bi].values.len()];
        for ci in 0..values.len() {
            let orig = work[bi].values[ci];
            work[bi].values[ci] = orig + step;
            let up = evaluate(&work, &program)?;
            work[bi].values[ci] = orig - step;
            let down = evaluate(&work, &program)?;
            work[bi].values[ci] = orig;
            values[ci] = (up - down) / (2.0 * step);
        }
        grads.push(BlockGradient {
            id: blocks[bi].id.clone(),
            kind: blocks[bi].kind,
            shape: blocks[bi].shape.clone(),
            values,
        });
    }
    Ok(GradientBundle { blocks: grads })
}

/// Max-norm relative difference between two bundles, used by gradient
/// cross-checks. Normalizes by the largest coordinate of `reference`.
pub fn bundle_relative_error(test: &GradientBundle, reference: &GradientBundle) -> f64 {
    let mut max_abs_diff = 0.0f64;
    let mut max_ref = 0.0f64;
    for (a, b) in test.blocks.iter().zip(&reference.blocks) {
        for (&x, &y) in a.values.iter().zip(&b.values) {
            max_abs_diff = max_abs_diff.max((x - y).abs());
            max_ref = max_ref.max(y.abs());
        }
    }
    if max_ref == 0.0 {
        max_abs_diff
    } else {
        max_abs_diff / max_ref
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::complex::cdot_h;

    #[test]
    fn modulus_squared_gradient_is_conjugate_wirtinger() {
        // f(z) = |z|^2 at z = 1 + 2j: value 5, gradient 2z = 2 + 4j.
        let z = ParameterBlock::complex("z", vec![1], vec![Complex64::new(1.0, 2.0)]).unwrap();
        let (value, grads) = evaluate_with_gradient(&[z], |g, blocks| {
            let zv = blocks[0].as_cvars()[0];
            Ok(g.cmodsq(zv))
        })
        .unwrap();
        assert!((value - 5.0).abs() < 1e-15);
        let gz = grads.get("z").unwrap().complex_values()[0];
        assert!((gz - Complex64::new(2.0, 4.0)).norm() < 1e-15);
    }

    #[test]
    fn real_square_gradient() {
        // f(x) = x^2 at x = 3: value 9, gradient 6.
        let x = ParameterBlock::real("x", vec![1], vec![3.0]).unwrap();
        let (value, grads) = evaluate_with_gradient(&[x], |g, blocks| {
            Ok(g.square(blocks[0].as_vars()[0]))
        })
        .unwrap();
        assert_eq!(value, 9.0);
        assert!((grads.get("x").unwrap().values[0] - 6.0).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_cube() {
        // f(x) = x^3 at x = 2: derivative 12.
        let x = ParameterBlock::real("x", vec![1], vec![2.0]).unwrap();
        let fd = finite_difference_gradient(&[x], 1e-5, |g, blocks| {
            let v = blocks[0].as_vars()[0];
            let v2 = g.square(v);
            Ok(g.mul(v2, v))
        })
        .unwrap();
        let d = fd.get("x").unwrap().values[0];
        assert!((d - 12.0).abs() / 12.0 < 1e-6);
    }

    #[test]
    fn finite_difference_real_part_convention() {
        // f(z) = Re(z) at z = j: conjugate-Wirtinger gradient 1 + 0j.
        let z = ParameterBlock::complex("z", vec![1], vec![Complex64::new(0.0, 1.0)]).unwrap();
        let fd = finite_difference_gradient(&[z], 1e-6, |_, blocks| {
            Ok(blocks[0].as_cvars()[0].re)
        })
        .unwrap();
        let gz = fd.get("z").unwrap().complex_values()[0];
        assert!((gz - Complex64::new(1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn bilinear_form_cross_check() {
        // f(a, b) = Re(a^H M b) for a fixed random-ish M: reverse mode and
        // finite differences must agree.
        let a = ParameterBlock::complex(
            "a",
            vec![2],
            vec![Complex64::new(0.3, -1.1), Complex64::new(0.8, 0.2)],
        )
        .unwrap();
        let b = ParameterBlock::complex(
            "b",
            vec![2],
            vec![Complex64::new(-0.5, 0.9), Complex64::new(1.4, -0.6)],
        )
        .unwrap();
        let m = [
            [Complex64::new(0.7, 0.1), Complex64::new(-0.4, 0.8)],
            [Complex64::new(1.2, -0.3), Complex64::new(0.05, 0.6)],
        ];
        let program = move |g: &mut Graph, blocks: &[BoundBlock]| {
            let av = blocks[0].as_cvars();
            let bv = blocks[1].as_cvars();
            let mut mb = Vec::new();
            for r in 0..2 {
                let mut acc = g.cleaf(Complex64::new(0.0, 0.0));
                for (c, &bc) in bv.iter().enumerate() {
                    let mc = g.cleaf(m[r][c]);
                    let t = g.cmul(mc, bc);
                    acc = g.cadd(acc, t);
                }
                mb.push(acc);
            }
            let ip = cdot_h(g, &av, &mb)?;
            Ok(ip.re)
        };
        let blocks = [a, b];
        let (_, ad) = evaluate_with_gradient(&blocks, program).unwrap();
        let fd = finite_difference_gradient(&blocks, 1e-6, program).unwrap();
        assert!(bundle_relative_error(&ad, &fd) < 1e-6);
    }

    #[test]
    fn gradient_of_real_block_through_complex_math_is_real() {
        // A real block fed through complex operations still gets an exact
        // real gradient (there is no imaginary slot to leak into).
        let x = ParameterBlock::real("x", vec![1], vec![0.4]).unwrap();
        let (_, grads) = evaluate_with_gradient(&[x], |g, blocks| {
            let xv = blocks[0].as_vars()[0];
            let z = g.cexp_j(xv);
            Ok(g.cmodsq(z))
        })
        .unwrap();
        // |e^{jx}|^2 = 1, so the gradient is 0 to rounding.
        assert!(grads.get("x").unwrap().values[0].abs() < 1e-15);
    }

    #[test]
    fn determinism_bit_identical() {
        let mk = || {
            ParameterBlock::complex(
                "z",
                vec![3],
                vec![
                    Complex64::new(0.1, 0.2),
                    Complex64::new(-1.0, 0.4),
                    Complex64::new(2.0, -0.3),
                ],
            )
            .unwrap()
        };
        let program = |g: &mut Graph, blocks: &[BoundBlock]| {
            let z = blocks[0].as_cvars();
            let n = cnorm_sq_local(g, &z);
            Ok(g.ln(n))
        };
        fn cnorm_sq_local(g: &mut Graph, z: &[CVar]) -> Var {
            crate::diffcore::complex::cnorm_sq(g, z)
        }
        let (v1, g1) = evaluate_with_gradient(&[mk()], program).unwrap();
        let (v2, g2) = evaluate_with_gradient(&[mk()], program).unwrap();
        assert!(v1.to_bits() == v2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn numeric_fault_reported_with_op() {
        let x = ParameterBlock::real("x", vec![1], vec![-2.0]).unwrap();
        let err = evaluate_with_gradient(&[x], |g, blocks| Ok(g.ln(blocks[0].as_vars()[0])))
            .unwrap_err();
        match err {
            Error::NumericFault { op, .. } => assert_eq!(op, "ln"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }
}
