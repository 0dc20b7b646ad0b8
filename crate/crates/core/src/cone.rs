//! Log-barrier interior-point solver for small Hermitian-PSD-cone programs.
//!
//! A [`ConeProblem`] minimizes a linear objective over Hermitian matrix blocks
//! `X_b ⪰ 0` and real scalars `y`, subject to affine equalities, affine
//! inequalities `ℓ(x) ≤ 0` and hyperbolic constraints `ℓ₁(x)·ℓ₂(x) ≥ 1` with
//! `ℓ₁ > 0` (the 2×2 LMI `[[ℓ₁, 1], [1, ℓ₂]] ⪰ 0`). Every affine form is
//! `Σ_b Re Tr(G_b X_b) + Σ_k c_k y_k + const`.
//!
//! The barrier method runs damped Newton centering on
//! `t·cᵀx − Σ log det X_b − Σ log(−ℓ_i) − Σ log(ℓ₁ℓ₂ − 1)` and grows `t`
//! tenfold per round. The Newton system is never formed in the vectorized
//! matrix space: the inverse Hessian of `−log det X` is `G ↦ X G X`, so the
//! matrix unknowns are eliminated and only a dense system in the form
//! multipliers, the scalars and the equality multipliers is factored.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{hermitian_cholesky, hermitian_eigen, re_trace_product};
use crate::{CMatrix, Error, Result, C64};

/// Coefficient matrix of one block in an affine form.
#[derive(Debug, Clone)]
pub enum FormMatrix {
    /// Hermitian coefficient `G`.
    Dense(CMatrix),
    /// `e_n e_nᵀ`, i.e. picks the diagonal entry `X[n, n]`.
    Unit(usize),
    /// `F Fᴴ` given the (typically thin) factor `F`.
    Factor(CMatrix),
}

impl FormMatrix {
    /// The coefficient as a dense `n × n` matrix.
    pub fn matrix(&self, n: usize) -> CMatrix {
        match self {
            FormMatrix::Dense(g) => g.clone(),
            FormMatrix::Unit(k) => {
                let mut m = CMatrix::zeros(n, n);
                m[(*k, *k)] = C64::new(1.0, 0.0);
                m
            }
            FormMatrix::Factor(f) => f * f.adjoint(),
        }
    }

    fn inner(&self, x: &CMatrix) -> f64 {
        match self {
            FormMatrix::Dense(g) => re_trace_product(g, x),
            FormMatrix::Unit(n) => x[(*n, *n)].re,
            FormMatrix::Factor(f) => factor_quadratic(f, x),
        }
    }
}

/// `Σ_b Re Tr(G_b X_b) + Σ_k c_k y_k + constant`.
#[derive(Debug, Clone, Default)]
pub struct AffineForm {
    pub blocks: Vec<(usize, FormMatrix)>,
    pub scalars: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineForm {
    pub fn scalar(index: usize) -> Self {
        AffineForm {
            scalars: vec![(index, 1.0)],
            ..Default::default()
        }
    }

    pub fn eval(&self, x: &ConePoint) -> f64 {
        let mut v = self.constant;
        for (b, g) in &self.blocks {
            v += g.inner(&x.blocks[*b]);
        }
        for &(k, c) in &self.scalars {
            v += c * x.scalars[k];
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct ConeProblem {
    pub block_sizes: Vec<usize>,
    pub num_scalars: usize,
    /// Hermitian objective coefficient per block.
    pub objective_blocks: Vec<CMatrix>,
    pub objective_scalars: Vec<f64>,
    /// `form(x) = 0`.
    pub equalities: Vec<AffineForm>,
    /// `form(x) ≤ 0`.
    pub inequalities: Vec<AffineForm>,
    /// `f₁(x)·f₂(x) ≥ 1` with `f₁(x) > 0`.
    pub hyperbolic: Vec<(AffineForm, AffineForm)>,
}

impl ConeProblem {
    pub fn new(block_sizes: Vec<usize>, num_scalars: usize) -> Self {
        let objective_blocks = block_sizes.iter().map(|&n| CMatrix::zeros(n, n)).collect();
        ConeProblem {
            block_sizes,
            num_scalars,
            objective_blocks,
            objective_scalars: vec![0.0; num_scalars],
            equalities: Vec::new(),
            inequalities: Vec::new(),
            hyperbolic: Vec::new(),
        }
    }

    pub fn objective(&self, x: &ConePoint) -> f64 {
        let mut v = 0.0;
        for (c, xb) in self.objective_blocks.iter().zip(&x.blocks) {
            v += re_trace_product(c, xb);
        }
        v + self
            .objective_scalars
            .iter()
            .zip(&x.scalars)
            .map(|(c, y)| c * y)
            .sum::<f64>()
    }

    /// Barrier degree: total cone rank.
    pub fn barrier_degree(&self) -> f64 {
        (self.block_sizes.iter().sum::<usize>() + self.inequalities.len() + 2 * self.hyperbolic.len())
            as f64
    }

    fn check_dimensions(&self, x: &ConePoint) -> Result<()> {
        if self.objective_blocks.len() != self.block_sizes.len()
            || self.objective_scalars.len() != self.num_scalars
            || x.blocks.len() != self.block_sizes.len()
            || x.scalars.len() != self.num_scalars
        {
            return Err(Error::Dimension("cone problem and point disagree".into()));
        }
        for ((&n, c), xb) in self.block_sizes.iter().zip(&self.objective_blocks).zip(&x.blocks) {
            if c.shape() != (n, n) || xb.shape() != (n, n) {
                return Err(Error::Dimension(format!("block of size {n} mismatched")));
            }
        }
        let forms = self
            .equalities
            .iter()
            .chain(&self.inequalities)
            .chain(self.hyperbolic.iter().flat_map(|(a, b)| [a, b]));
        for f in forms {
            for (b, g) in &f.blocks {
                let n = *self
                    .block_sizes
                    .get(*b)
                    .ok_or_else(|| Error::Dimension(format!("form references block {b}")))?;
                let ok = match g {
                    FormMatrix::Dense(m) => m.shape() == (n, n),
                    FormMatrix::Unit(k) => *k < n,
                    FormMatrix::Factor(f) => f.nrows() == n,
                };
                if !ok {
                    return Err(Error::Dimension(format!("form matrix does not fit block {b}")));
                }
            }
            if f.scalars.iter().any(|&(k, _)| k >= self.num_scalars) {
                return Err(Error::Dimension("form references a missing scalar".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConePoint {
    pub blocks: Vec<CMatrix>,
    pub scalars: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Target duality gap `m / t`.
    pub tol: f64,
    /// Barrier growth per centering round.
    pub growth: f64,
    pub initial_t: Option<f64>,
    pub max_newton: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-7,
            growth: 10.0,
            initial_t: None,
            max_newton: 2000,
        }
    }
}

/// Optimality certificate of the final barrier iterate.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    /// Newton decrement of the final centering problem divided by `t`:
    /// the Lagrangian gradient measured in the local barrier norm.
    pub stationarity: f64,
    /// Largest equality violation.
    pub primal_residual: f64,
    /// `m / t`, the complementarity measure.
    pub gap: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity.max(self.primal_residual).max(self.gap)
    }
}

#[derive(Debug, Clone)]
pub struct ConeSolution {
    pub point: ConePoint,
    pub objective: f64,
    /// Lower bound on the optimal value implied by the barrier duals.
    pub dual_bound: f64,
    pub kkt: KktReport,
    pub newton_steps: usize,
    pub rounds: usize,
}

/// Barrier-bearing form index layout: inequalities first, then two forms per
/// hyperbolic constraint.
struct Layout<'a> {
    forms: Vec<&'a AffineForm>,
    n_ineq: usize,
    /// Scalar coefficients of the barrier forms (`nf × ny`) and of the
    /// equalities (`ne × ny`).
    form_scalars: DMatrix<f64>,
    equality_scalars: DMatrix<f64>,
}

impl<'a> Layout<'a> {
    fn new(p: &'a ConeProblem) -> Self {
        let mut forms: Vec<&AffineForm> = p.inequalities.iter().collect();
        for (a, b) in &p.hyperbolic {
            forms.push(a);
            forms.push(b);
        }
        let ny = p.num_scalars;
        let mut form_scalars = DMatrix::zeros(forms.len(), ny);
        for (f, form) in forms.iter().enumerate() {
            for &(k, c) in &form.scalars {
                form_scalars[(f, k)] += c;
            }
        }
        let mut equality_scalars = DMatrix::zeros(p.equalities.len(), ny);
        for (e, form) in p.equalities.iter().enumerate() {
            for &(k, c) in &form.scalars {
                equality_scalars[(e, k)] += c;
            }
        }
        Layout {
            forms,
            n_ineq: p.inequalities.len(),
            form_scalars,
            equality_scalars,
        }
    }
}

/// Value, gradient and upper Cholesky factor `R` (`∇² = RᵀR`) of the scalar
/// barriers w.r.t. the form values. Returns `None` outside the domain.
fn form_barrier(layout: &Layout, values: &[f64]) -> Option<(f64, Vec<f64>, DMatrix<f64>)> {
    let nf = values.len();
    let mut phi = 0.0;
    let mut grad = vec![0.0; nf];
    let mut r = DMatrix::zeros(nf, nf);
    for i in 0..layout.n_ineq {
        let slack = -values[i];
        if !(slack > 0.0) {
            return None;
        }
        phi -= slack.ln();
        grad[i] = 1.0 / slack;
        r[(i, i)] = 1.0 / slack;
    }
    let mut k = layout.n_ineq;
    while k < nf {
        let (a, l) = (values[k], values[k + 1]);
        let d = a * l - 1.0;
        if !(a > 0.0) || !(d > 0.0) {
            return None;
        }
        phi -= d.ln();
        grad[k] = -l / d;
        grad[k + 1] = -a / d;
        // ∇² = [[l², 1], [1, a²]] / d²
        r[(k, k)] = l / d;
        r[(k, k + 1)] = 1.0 / (l * d);
        r[(k + 1, k + 1)] = (d * (d + 2.0)).sqrt() / (l * d);
        k += 2;
    }
    Some((phi, grad, r))
}

fn log_det(x: &CMatrix) -> Option<f64> {
    let l = hermitian_cholesky(x)?;
    Some(2.0 * (0..x.nrows()).map(|i| l[(i, i)].re.ln()).sum::<f64>())
}

/// Centering objective `t·cᵀx + Φ(x)`; `None` outside the domain.
fn barrier_value(p: &ConeProblem, layout: &Layout, x: &ConePoint, t: f64) -> Option<f64> {
    let mut v = t * p.objective(x);
    for xb in &x.blocks {
        v -= log_det(xb)?;
    }
    let values: Vec<f64> = layout.forms.iter().map(|f| f.eval(x)).collect();
    let (phi, _, _) = form_barrier(layout, &values)?;
    Some(v + phi)
}

struct NewtonStep {
    dx: Vec<CMatrix>,
    dy: Vec<f64>,
    /// Directional derivative `gᵀΔ`.
    slope: f64,
    /// Squared Newton decrement `Δᵀ∇²Φ Δ`.
    decrement: f64,
}

/// Symmetric diagonal scaling that brings every row of `a` to unit max-norm
/// (a few Ruiz sweeps).
fn equilibrate(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut d = vec![1.0; n];
    let mut next = vec![1.0; n];
    for _ in 0..3 {
        // Symmetric, so the row max equals the column max.
        for (j, col) in a.as_slice().chunks(n).enumerate() {
            let m = col.iter().zip(&d).map(|(x, di)| (x * di).abs()).fold(0.0, f64::max) * d[j];
            next[j] = if m > 0.0 { d[j] / m.sqrt() } else { d[j] };
        }
        std::mem::swap(&mut d, &mut next);
    }
    d
}

/// `Re Σ a_k conj(b_k)`, equal to `Re Tr(A B)` for Hermitian `B`.
fn frobenius(a: &CMatrix, b: &CMatrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x.re * y.re + x.im * y.im)
        .sum()
}

/// `Re vᴴ M v`.
fn quadratic(v: &[C64], m: &CMatrix) -> f64 {
    let n = v.len();
    let m = m.as_slice();
    let mut acc = 0.0;
    for j in 0..n {
        let col = &m[j * n..(j + 1) * n];
        let mut s = C64::new(0.0, 0.0);
        for (i, x) in col.iter().enumerate() {
            s += v[i].conj() * x;
        }
        acc += (s * v[j]).re;
    }
    acc
}

/// `target += scale · F Fᴴ`.
fn add_gram(target: &mut CMatrix, f: &CMatrix, scale: f64) {
    let n = target.nrows();
    let t = target.as_mut_slice();
    for c in f.as_slice().chunks(n) {
        for (j, vj) in c.iter().enumerate() {
            let s = vj.conj() * scale;
            for (ti, vi) in t[j * n..(j + 1) * n].iter_mut().zip(c) {
                *ti += vi * s;
            }
        }
    }
}

/// `A B` for column-major dense matrices.
fn mul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (m, k) = a.shape();
    let n = b.ncols();
    let mut c = CMatrix::zeros(m, n);
    let (av, bv) = (a.as_slice(), b.as_slice());
    for (j, cj) in c.as_mut_slice().chunks_mut(m).enumerate() {
        for (p, ap) in av.chunks(m).enumerate().take(k) {
            let bpj = bv[j * k + p];
            for (ci, x) in cj.iter_mut().zip(ap) {
                *ci += x * bpj;
            }
        }
    }
    c
}

/// `Aᴴ B`; every entry is a contiguous column dot product.
fn ad_mul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (k, m) = a.shape();
    let n = b.ncols();
    let mut c = CMatrix::zeros(m, n);
    let (av, bv) = (a.as_slice(), b.as_slice());
    for j in 0..n {
        let bj = &bv[j * k..(j + 1) * k];
        for i in 0..m {
            let ai = &av[i * k..(i + 1) * k];
            c[(i, j)] = ai.iter().zip(bj).map(|(x, y)| x.conj() * y).sum();
        }
    }
    c
}

/// `A Bᴴ`.
fn mul_adj(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (m, k) = a.shape();
    let n = b.nrows();
    let mut c = CMatrix::zeros(m, n);
    let (av, bv) = (a.as_slice(), b.as_slice());
    for (j, cj) in c.as_mut_slice().chunks_mut(m).enumerate() {
        for (p, ap) in av.chunks(m).enumerate().take(k) {
            let bjp = bv[p * n + j].conj();
            for (ci, x) in cj.iter_mut().zip(ap) {
                *ci += x * bjp;
            }
        }
    }
    c
}

/// Image `Lᴴ G L` of a form matrix under the Cholesky factor of a block;
/// every image is Hermitian.
enum Scaled {
    /// `A Aᴴ`.
    Factor(CMatrix),
    Dense(CMatrix),
}

impl Scaled {
    fn new(g: &FormMatrix, l: &CMatrix) -> Self {
        match g {
            FormMatrix::Dense(m) => Scaled::Dense(ad_mul(l, &mul(m, l))),
            FormMatrix::Unit(n) => Scaled::Factor(CMatrix::from_iterator(l.ncols(), 1, l.row(*n).iter().map(|z| z.conj()))),
            FormMatrix::Factor(f) => Scaled::Factor(ad_mul(l, f)),
        }
    }

    fn inner(&self, other: &Scaled) -> f64 {
        match (self, other) {
            (Scaled::Factor(a), Scaled::Factor(b)) => ad_mul(a, b).norm_squared(),
            (Scaled::Factor(a), Scaled::Dense(m)) | (Scaled::Dense(m), Scaled::Factor(a)) => {
                factor_quadratic(a, m)
            }
            (Scaled::Dense(a), Scaled::Dense(b)) => frobenius(a, b),
        }
    }

    fn inner_matrix(&self, m: &CMatrix) -> f64 {
        match self {
            Scaled::Factor(a) => factor_quadratic(a, m),
            Scaled::Dense(g) => frobenius(g, m),
        }
    }

    fn trace(&self) -> f64 {
        match self {
            Scaled::Factor(a) => a.norm_squared(),
            Scaled::Dense(g) => g.trace().re,
        }
    }

    fn add_scaled_to(&self, target: &mut CMatrix, scale: f64) {
        match self {
            Scaled::Factor(a) => add_gram(target, a, scale),
            Scaled::Dense(g) => target.zip_apply(g, |t, x| *t += x * scale),
        }
    }
}

/// `Re Tr(Aᴴ M A)`.
fn factor_quadratic(a: &CMatrix, m: &CMatrix) -> f64 {
    let n = a.nrows();
    a.as_slice().chunks(n).map(|c| quadratic(c, m)).sum()
}

/// Newton step of the centering problem, computed in the coordinates
/// `X = L Lᴴ` so that the direction `ΔX = L (I − Lᴴ Z L) Lᴴ` keeps its
/// relative accuracy as blocks approach the cone boundary.
fn newton_step(p: &ConeProblem, layout: &Layout, x: &ConePoint, t: f64) -> Result<NewtonStep> {
    let nb = p.block_sizes.len();
    let ny = p.num_scalars;
    let nf = layout.forms.len();
    let ne = p.equalities.len();

    let values: Vec<f64> = layout.forms.iter().map(|f| f.eval(x)).collect();
    let (_, psi, rmat) = form_barrier(layout, &values)
        .ok_or_else(|| Error::Numerical("Newton step requested outside the domain".into()))?;
    let chol: Vec<CMatrix> = x
        .blocks
        .iter()
        .map(|xb| {
            hermitian_cholesky(xb).ok_or_else(|| Error::Numerical("block lost definiteness".into()))
        })
        .collect::<Result<_>>()?;

    let items: Vec<&AffineForm> = layout.forms.iter().copied().chain(p.equalities.iter()).collect();
    let images: Vec<Vec<(usize, Scaled)>> = items
        .iter()
        .map(|f| f.blocks.iter().map(|(b, g)| (*b, Scaled::new(g, &chol[*b]))).collect())
        .collect();

    // Ŷ_b = t Lᴴ C_b L + Σ_f ψ_f Ĝ_{f,b};  g_y = t c_y + Σ_f ψ_f l_{f,y}
    let mut yhat: Vec<CMatrix> = (0..nb)
        .map(|b| ad_mul(&chol[b], &mul(&p.objective_blocks[b], &chol[b])).scale(t))
        .collect();
    let mut gy = DVector::from_iterator(ny, p.objective_scalars.iter().map(|c| t * c));
    for (f, &w) in psi.iter().enumerate() {
        for (b, g) in &images[f] {
            g.add_scaled_to(&mut yhat[*b], w);
        }
        for &(k, c) in &layout.forms[f].scalars {
            gy[k] += w * c;
        }
    }

    let ni = items.len();
    let mut gram = DMatrix::<f64>::zeros(ni, ni);
    for i in 0..ni {
        for j in i..ni {
            let mut acc = 0.0;
            for (b, gi) in &images[i] {
                for (bj, gj) in &images[j] {
                    if bj == b {
                        acc += gi.inner(gj);
                    }
                }
            }
            gram[(i, j)] = acc;
            gram[(j, i)] = acc;
        }
    }
    // r_k = Σ_b <Ĝ_{k,b}, Ŷ_b − I>
    let r: Vec<f64> = images
        .iter()
        .map(|img| img.iter().map(|(b, g)| g.inner_matrix(&yhat[*b]) - g.trace()).sum())
        .collect();

    let ly = &layout.form_scalars;
    let ey = &layout.equality_scalars;
    let eq_res: Vec<f64> = p.equalities.iter().map(|e| e.eval(x)).collect();

    // Unknowns [ŝ (nf), Δy (ny), ν (ne)] with ŝ = R s the Hessian-scaled form
    // change and λ = Rᵀŝ. The system is assembled symmetric and equilibrated
    // before factoring.
    let dim = nf + ny + ne;
    let gff = gram.view((0, 0), (nf, nf));
    let gfe = gram.view((0, nf), (nf, ne));
    let gee = gram.view((nf, nf), (ne, ne));
    let rgr = &rmat * gff * rmat.transpose();
    let rge = &rmat * gfe;
    let rl = &rmat * ly;
    let rr = &rmat * DVector::from_column_slice(&r[..nf]);
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for f in 0..nf {
        for g in 0..nf {
            a[(f, g)] = rgr[(f, g)] + if f == g { 1.0 } else { 0.0 };
        }
        for k in 0..ny {
            a[(f, nf + k)] = -rl[(f, k)];
            a[(nf + k, f)] = -rl[(f, k)];
        }
        for e in 0..ne {
            a[(f, nf + ny + e)] = rge[(f, e)];
            a[(nf + ny + e, f)] = rge[(f, e)];
        }
        rhs[f] = -rr[f];
    }
    for k in 0..ny {
        for e in 0..ne {
            a[(nf + k, nf + ny + e)] = -ey[(e, k)];
            a[(nf + ny + e, nf + k)] = -ey[(e, k)];
        }
        rhs[nf + k] = gy[k];
    }
    for e in 0..ne {
        for e2 in 0..ne {
            a[(nf + ny + e, nf + ny + e2)] = gee[(e, e2)];
        }
        rhs[nf + ny + e] = -r[nf + e] + eq_res[e];
    }
    let scale = equilibrate(&a);
    for i in 0..dim {
        rhs[i] *= scale[i];
        for j in 0..dim {
            a[(i, j)] *= scale[i] * scale[j];
        }
    }
    let mut sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular Newton system".into()))?;
    for i in 0..dim {
        sol[i] *= scale[i];
    }
    let s_hat = sol.rows(0, nf).into_owned();
    let lambda = rmat.transpose() * &s_hat;
    let dy: Vec<f64> = sol.rows(nf, ny).iter().copied().collect();
    let nu: Vec<f64> = sol.rows(nf + ny, ne).iter().copied().collect();

    // D̂_b = I − Ẑ_b with Ẑ_b = Ŷ_b + Σ λ_f Ĝ_f + Σ ν_e Ê_e;  ΔX_b = L D̂ Lᴴ
    let mut dhat: Vec<CMatrix> = yhat.iter().map(|y| -y).collect();
    for (i, img) in images.iter().enumerate() {
        let coef = if i < nf { lambda[i] } else { nu[i - nf] };
        for (b, g) in img {
            g.add_scaled_to(&mut dhat[*b], -coef);
        }
    }
    for d in dhat.iter_mut() {
        for i in 0..d.nrows() {
            d[(i, i)] += C64::new(1.0, 0.0);
        }
    }
    let dx: Vec<CMatrix> = (0..nb).map(|b| mul_adj(&mul(&chol[b], &dhat[b]), &chol[b])).collect();

    // gᵀΔ = Σ_b <Ŷ_b − I, D̂_b> + g_y·Δy;  Δᵀ∇²ΦΔ = Σ_b ‖D̂_b‖² + sᵀK s
    let mut slope = gy.iter().zip(&dy).map(|(g, d)| g * d).sum::<f64>();
    let mut decrement = s_hat.norm_squared();
    for b in 0..nb {
        slope += frobenius(&yhat[b], &dhat[b]) - dhat[b].trace().re;
        decrement += dhat[b].iter().map(|z| z.norm_sqr()).sum::<f64>();
    }
    Ok(NewtonStep {
        dx,
        dy,
        slope,
        decrement,
    })
}

fn step_point(x: &ConePoint, step: &NewtonStep, alpha: f64) -> ConePoint {
    ConePoint {
        blocks: x
            .blocks
            .iter()
            .zip(&step.dx)
            .map(|(xb, d)| crate::linalg::hermitian_part(&(xb + d.scale(alpha))))
            .collect(),
        scalars: x
            .scalars
            .iter()
            .zip(&step.dy)
            .map(|(y, d)| y + alpha * d)
            .collect(),
    }
}

/// Whether `x` is strictly inside every cone and barrier domain.
pub fn is_strictly_feasible(p: &ConeProblem, x: &ConePoint) -> bool {
    let layout = Layout::new(p);
    barrier_value(p, &layout, x, 0.0).is_some()
}

const CENTERING_TOL: f64 = 1e-10;
const PATH_TOL: f64 = 1e-5;
const MAX_CENTERING_STEPS: usize = 60;
const STALL_REGION: f64 = 0.25;
const MAX_STALLS: usize = 3;
const TINY_STEP: f64 = 1e-8;

/// Solve `problem` from the strictly feasible point `start`.
pub fn solve_cone(problem: &ConeProblem, start: &ConePoint, opts: &SolverOptions) -> Result<ConeSolution> {
    problem.check_dimensions(start)?;
    let layout = Layout::new(problem);
    if barrier_value(problem, &layout, start, 0.0).is_none() {
        return Err(Error::Infeasible("starting point is not strictly feasible".into()));
    }
    let m = problem.barrier_degree();
    // Strictly inside the requested gap.
    let t_final = 1.25 * m / opts.tol;
    let mut x = start.clone();
    let mut t = opts
        .initial_t
        .unwrap_or_else(|| m / problem.objective(&x).abs().max(1e-3))
        .min(t_final);
    let mut newton_steps = 0;
    let mut rounds = 0;
    loop {
        rounds += 1;
        // Only the last center is reported; earlier ones merely seed it.
        let centering_tol = if t >= t_final { CENTERING_TOL } else { PATH_TOL };
        let decrement = center(problem, &layout, &mut x, t, centering_tol, opts, &mut newton_steps)?;
        if t >= t_final {
            let primal_residual = problem
                .equalities
                .iter()
                .map(|e| e.eval(&x).abs())
                .fold(0.0, f64::max);
            let kkt = KktReport {
                stationarity: decrement.max(0.0).sqrt() / t,
                primal_residual,
                gap: m / t,
            };
            let objective = problem.objective(&x);
            return Ok(ConeSolution {
                objective,
                dual_bound: objective - m / t,
                point: x,
                kkt,
                newton_steps,
                rounds,
            });
        }
        t = (t * opts.growth).min(t_final);
    }
}

/// Damped Newton centering at weight `t`; returns the final squared
/// decrement.
fn center(
    problem: &ConeProblem,
    layout: &Layout,
    x: &mut ConePoint,
    t: f64,
    centering_tol: f64,
    opts: &SolverOptions,
    newton_steps: &mut usize,
) -> Result<f64> {
    let mut previous = f64::INFINITY;
    let mut stalls = 0;
    for _ in 0..MAX_CENTERING_STEPS {
        let step = newton_step(problem, layout, x, t)?;
        let decrement = step.decrement;
        if decrement / 2.0 <= centering_tol {
            return Ok(decrement);
        }
        // Quadratic convergence at least halves a small decrement; repeated
        // failures mean the rounding floor at this `t` has been reached.
        if decrement < STALL_REGION && decrement > 0.5 * previous {
            stalls += 1;
            if stalls >= MAX_STALLS {
                return Ok(decrement);
            }
        } else {
            stalls = 0;
        }
        previous = decrement;
        // Round-off in the Newton system has swamped the direction: the
        // iterate is as central as this precision allows.
        if step.slope >= 0.0 {
            return Ok(decrement);
        }
        *newton_steps += 1;
        if *newton_steps > opts.max_newton {
            return Err(Error::Numerical(format!(
                "barrier method exceeded {} Newton steps (t = {t:.3e}, decrement {decrement:.3e})",
                opts.max_newton
            )));
        }
        // Inside the quadratic-convergence region of a self-concordant
        // barrier the full step stays in the domain and contracts.
        if decrement < 0.1 {
            let cand = step_point(x, &step, 1.0);
            if barrier_value(problem, layout, &cand, t).is_some() {
                *x = cand;
                continue;
            }
        }
        let f0 = barrier_value(problem, layout, x, t).expect("iterate in domain");
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = step_point(x, &step, alpha);
            if let Some(f1) = barrier_value(problem, layout, &cand, t) {
                if f1 <= f0 + 0.25 * alpha * step.slope.min(-0.5 * decrement) {
                    accepted = Some(cand);
                    break;
                }
            }
            alpha *= 0.5;
        }
        if alpha < TINY_STEP {
            stalls += 1;
            if stalls >= MAX_STALLS {
                if let Some(cand) = accepted {
                    *x = cand;
                }
                return Ok(decrement);
            }
        }
        match accepted {
            Some(cand) => *x = cand,
            None if decrement < STALL_REGION => return Ok(decrement),
            None => {
                return Err(Error::Numerical(format!(
                    "line search failed (t = {t:.3e}, decrement {decrement:.3e})"
                )))
            }
        }
    }
    newton_step(problem, layout, x, t).map(|s| s.decrement)
}

/// Nearest positive semidefinite matrix in Frobenius norm.
pub fn psd_project(x: &CMatrix) -> CMatrix {
    let (values, vectors) = hermitian_eigen(x);
    let n = x.nrows();
    let mut out = CMatrix::zeros(n, n);
    for (k, &v) in values.iter().enumerate() {
        if v > 0.0 {
            let u = vectors.column(k);
            out += (&u * u.adjoint()).scale(v);
        }
    }
    crate::linalg::hermitian_part(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius, principal_eigenpair};
    use crate::CVector;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn unit_diag_problem(n: usize, objective: CMatrix) -> (ConeProblem, ConePoint) {
        let mut p = ConeProblem::new(vec![n], 0);
        p.objective_blocks[0] = objective;
        for k in 0..n {
            p.equalities.push(AffineForm {
                blocks: vec![(0, FormMatrix::Unit(k))],
                scalars: vec![],
                constant: -1.0,
            });
        }
        let start = ConePoint {
            blocks: vec![CMatrix::identity(n, n)],
            scalars: vec![],
        };
        (p, start)
    }

    #[test]
    fn trace_fixed_by_diagonal() {
        let (p, x0) = unit_diag_problem(3, CMatrix::identity(3, 3));
        let sol = solve_cone(&p, &x0, &SolverOptions::default()).unwrap();
        assert!((sol.objective - 3.0).abs() < 1e-7, "{}", sol.objective);
        assert!(sol.kkt.max_residual() < 1e-7, "{:?}", sol.kkt);
    }

    #[test]
    fn rank_one_correlation_maximized() {
        // maximize Tr(Q cc^H) s.t. diag(Q) = 1
        let cv = CVector::from_vec(vec![c(0.8, 0.3), c(-0.2, 1.1)]);
        let cm = &cv * cv.adjoint();
        let (p, x0) = unit_diag_problem(2, -cm.clone());
        let sol = solve_cone(&p, &x0, &SolverOptions::default()).unwrap();
        // phase-scan oracle over q = [1, e^{jθ}]
        let mut best: f64 = 0.0;
        for k in 0..100_000 {
            let th = k as f64 * std::f64::consts::TAU / 100_000.0;
            let s = cv[0].conj() + cv[1].conj() * C64::from_polar(1.0, th);
            best = best.max(s.norm_sqr());
        }
        let closed = cv[0].norm() + cv[1].norm();
        assert!((best - closed * closed).abs() < 1e-6);
        assert!((-sol.objective - closed * closed).abs() < 1e-6, "{}", sol.objective);
        let q = &sol.point.blocks[0];
        let (lmax, _) = principal_eigenpair(q);
        assert!(crate::linalg::trace_re(q) - lmax < 1e-6);
    }

    #[test]
    fn rejects_infeasible_start() {
        let (p, _) = unit_diag_problem(2, CMatrix::identity(2, 2));
        let bad = ConePoint {
            blocks: vec![CMatrix::from_diagonal_element(2, 2, c(-1.0, 0.0))],
            scalars: vec![],
        };
        assert!(matches!(solve_cone(&p, &bad, &SolverOptions::default()), Err(Error::Infeasible(_))));
    }

    #[test]
    fn hyperbolic_and_linear_scalars() {
        // minimize a + b s.t. a * b >= 1, b <= 4, scalar-only problem with a
        // dummy 1x1 block fixed to 1: optimum a = b = 1.
        let mut p = ConeProblem::new(vec![1], 2);
        p.objective_scalars = vec![1.0, 1.0];
        p.equalities.push(AffineForm {
            blocks: vec![(0, FormMatrix::Unit(0))],
            scalars: vec![],
            constant: -1.0,
        });
        p.inequalities.push(AffineForm {
            blocks: vec![],
            scalars: vec![(1, 1.0)],
            constant: -4.0,
        });
        p.hyperbolic.push((AffineForm::scalar(0), AffineForm::scalar(1)));
        let x0 = ConePoint {
            blocks: vec![CMatrix::identity(1, 1)],
            scalars: vec![3.0, 3.0],
        };
        let sol = solve_cone(&p, &x0, &SolverOptions::default()).unwrap();
        assert!((sol.objective - 2.0).abs() < 1e-6, "{}", sol.objective);
        assert!(sol.dual_bound <= sol.objective);
        assert!(sol.objective - sol.dual_bound < SolverOptions::default().tol);
    }

    #[test]
    fn factored_forms_match_dense() {
        // maximize a weighted signal over unit-diagonal X with an interference
        // budget; the same forms given densely and as thin factors.
        let f = CMatrix::from_fn(3, 2, |i, j| c(0.3 * i as f64 - 0.2 * j as f64, 0.1 + 0.2 * (i * j) as f64));
        let v = CMatrix::from_column_slice(3, 1, &[c(1.0, 0.0), c(0.5, -0.5), c(-0.2, 0.7)]);
        let solve = |factored: bool| {
            let gram = |m: &CMatrix| if factored { FormMatrix::Factor(m.clone()) } else { FormMatrix::Dense(m * m.adjoint()) };
            let (mut p, x0) = unit_diag_problem(3, CMatrix::zeros(3, 3));
            p.num_scalars = 1;
            p.objective_scalars = vec![1.0];
            // a · vᴴXv ≥ 1 with objective a, and fᴴXf ≤ 2
            p.hyperbolic.push((
                AffineForm::scalar(0),
                AffineForm { blocks: vec![(0, gram(&v))], scalars: vec![], constant: 0.0 },
            ));
            p.inequalities.push(AffineForm { blocks: vec![(0, gram(&f))], scalars: vec![], constant: -2.0 });
            let start = ConePoint { scalars: vec![10.0], ..x0 };
            solve_cone(&p, &start, &SolverOptions::default()).unwrap().objective
        };
        let (dense, factored) = (solve(false), solve(true));
        assert!((dense - factored).abs() < 1e-6, "{dense} vs {factored}");
    }

    #[test]
    fn restart_from_other_point_agrees() {
        let cv = CVector::from_vec(vec![c(0.3, 0.1), c(0.2, -0.9), c(1.0, 0.4)]);
        let cm = &cv * cv.adjoint();
        let obj = -cm + CMatrix::identity(3, 3).scale(0.1);
        let (p, x0) = unit_diag_problem(3, obj);
        let a = solve_cone(&p, &x0, &SolverOptions::default()).unwrap();
        let mut x1 = x0.clone();
        x1.blocks[0][(0, 1)] = c(0.2, 0.3);
        x1.blocks[0][(1, 0)] = c(0.2, -0.3);
        let b = solve_cone(&p, &x1, &SolverOptions::default()).unwrap();
        let tol = SolverOptions::default().tol;
        assert!((a.objective - b.objective).abs() < 10.0 * tol);
        assert!(a.kkt.max_residual() < tol && b.kkt.max_residual() < tol, "{:?} {:?}", a.kkt, b.kkt);
    }

    #[test]
    fn dual_bound_below_random_feasible_points() {
        use rand_chacha::ChaCha8Rng;
        use rand_core::{RngCore, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut u = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        let n = 4;
        let mut cm = CMatrix::from_fn(n, n, |_, _| c(u(), u()));
        cm = &cm + cm.adjoint();
        // minimize <C, X> + y  s.t. diag(X) = 1, y >= Re X[0,1], y <= 2
        let mut p = ConeProblem::new(vec![n], 1);
        p.objective_blocks[0] = cm.clone();
        p.objective_scalars[0] = 1.0;
        for i in 0..n {
            p.equalities.push(AffineForm {
                blocks: vec![(0, FormMatrix::Unit(i))],
                scalars: vec![],
                constant: -1.0,
            });
        }
        let mut pick = CMatrix::zeros(n, n);
        pick[(0, 1)] = c(0.5, 0.0);
        pick[(1, 0)] = c(0.5, 0.0);
        p.inequalities.push(AffineForm {
            blocks: vec![(0, FormMatrix::Dense(pick))],
            scalars: vec![(0, -1.0)],
            constant: 0.0,
        });
        p.inequalities.push(AffineForm {
            blocks: vec![],
            scalars: vec![(0, 1.0)],
            constant: -2.0,
        });
        let x0 = ConePoint {
            blocks: vec![CMatrix::identity(n, n)],
            scalars: vec![1.0],
        };
        let sol = solve_cone(&p, &x0, &SolverOptions::default()).unwrap();
        assert!(sol.dual_bound <= sol.objective);
        for _ in 0..2000 {
            let v = CMatrix::from_fn(n, n, |_, _| c(u(), u()));
            let g = &v * v.adjoint();
            let d = CMatrix::from_diagonal(&g.diagonal().map(|z| c(1.0 / z.re.sqrt(), 0.0)));
            let x = &d * g * &d;
            let y = x[(0, 1)].re;
            let value = re_trace_product(&cm, &x) + y;
            assert!(sol.dual_bound <= value + 1e-12, "{} > {}", sol.dual_bound, value);
        }
    }

    #[test]
    fn psd_projection() {
        let x = CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)]);
        let y = psd_project(&x);
        let expect = CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        assert!(frobenius(&(y - expect)) < 1e-12);
        let v = CVector::from_vec(vec![c(1.0, 1.0), c(0.5, -0.2)]);
        let psd = &v * v.adjoint() + CMatrix::identity(2, 2).scale(0.3);
        assert!(frobenius(&(psd_project(&psd) - &psd)) < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_is_idempotent(vals in proptest::collection::vec(-2.0f64..2.0, 16)) {
                let mut x = CMatrix::zeros(4, 4);
                let mut k = 0;
                for i in 0..4 {
                    for j in i..4 {
                        let z = if i == j { c(vals[k], 0.0) } else { c(vals[k], vals[(k + 7) % 16]) };
                        x[(i, j)] = z;
                        x[(j, i)] = z.conj();
                        k += 1;
                    }
                }
                let once = psd_project(&x);
                let twice = psd_project(&once);
                prop_assert!(frobenius(&(once - twice)) < 1e-10);
            }
        }
    }
}
