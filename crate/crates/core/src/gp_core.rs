//! Geometric programming: monomial/posynomial algebra, AM-GM condensation,
//! the log-space convex form, and a log-barrier interior point solver.
//!
//! A problem is `min p0(ζ) + Σ c·exp(a·ζ_j)` subject to `p_i(ζ) ≤ 1`,
//! `m_k(ζ) = 1` and `lo ≤ ζ ≤ hi`. Under `y = ln ζ` every constraint becomes a
//! log-sum-exp of affine forms. The solver minimizes the log of the objective,
//! which is again log-sum-exp (with `exp(exp(y))`-type terms for the pure
//! exponentials) and keeps magnitudes moderate when terms differ by decades.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Div, Mul};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("point has a non-positive entry for variable {0}")]
    NonPositivePoint(usize),
    #[error("variable {0} is not registered")]
    UnknownVariable(usize),
    #[error("invalid term: {0}")]
    InvalidTerm(String),
    #[error("variable {name}: bounds [{lo}, {hi}] are not a positive interval")]
    BadBounds { name: String, lo: f64, hi: f64 },
    #[error("no strictly feasible point (phase 1 lower bound {0:e})")]
    Infeasible(f64),
    #[error("equality constraints cannot be met inside the variable bounds")]
    EqualityOutsideBounds,
    #[error("barrier method exceeded {0} outer iterations")]
    MaxIterations(usize),
    #[error("non-finite value during solve")]
    NumericalBreakdown,
}

pub type VarId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coef: f64,
    pub exps: BTreeMap<VarId, f64>,
}

impl Monomial {
    pub fn constant(coef: f64) -> Self {
        Self {
            coef,
            exps: BTreeMap::new(),
        }
    }

    pub fn var(id: VarId) -> Self {
        Self::power(id, 1.0)
    }

    pub fn power(id: VarId, e: f64) -> Self {
        let mut exps = BTreeMap::new();
        exps.insert(id, e);
        Self { coef: 1.0, exps }
    }

    pub fn scale(mut self, c: f64) -> Self {
        self.coef *= c;
        self
    }

    pub fn pow(&self, p: f64) -> Self {
        Self {
            coef: self.coef.powf(p),
            exps: self.exps.iter().map(|(&k, &e)| (k, e * p)).collect(),
        }
    }

    pub fn inv(&self) -> Self {
        self.pow(-1.0)
    }

    fn prune(mut self) -> Self {
        self.exps.retain(|_, e| *e != 0.0);
        self
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, GpError> {
        let mut v = self.coef;
        for (&k, &e) in &self.exps {
            let xi = *x.get(k).ok_or(GpError::UnknownVariable(k))?;
            if xi <= 0.0 {
                return Err(GpError::NonPositivePoint(k));
            }
            v *= xi.powf(e);
        }
        Ok(v)
    }

    /// `ln` of the value; avoids overflow for extreme points.
    pub fn ln_eval(&self, ln_x: &[f64]) -> f64 {
        self.coef.ln() + self.exps.iter().map(|(&k, &e)| e * ln_x[k]).sum::<f64>()
    }
}

impl Mul for Monomial {
    type Output = Monomial;
    fn mul(mut self, rhs: Monomial) -> Monomial {
        self.coef *= rhs.coef;
        for (k, e) in rhs.exps {
            *self.exps.entry(k).or_insert(0.0) += e;
        }
        self.prune()
    }
}

impl Div for Monomial {
    type Output = Monomial;
    fn div(mut self, rhs: Monomial) -> Monomial {
        self.coef /= rhs.coef;
        for (k, e) in rhs.exps {
            *self.exps.entry(k).or_insert(0.0) -= e;
        }
        self.prune()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Posynomial {
    pub terms: Vec<Monomial>,
}

impl Posynomial {
    pub fn new(terms: Vec<Monomial>) -> Self {
        let mut p = Self::default();
        for t in terms {
            p.push(t);
        }
        p
    }

    /// Adds a term; zero-coefficient terms are dropped.
    pub fn push(&mut self, m: Monomial) {
        if m.coef != 0.0 {
            self.terms.push(m);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, GpError> {
        self.terms.iter().map(|t| t.eval(x)).sum()
    }

    pub fn scale(mut self, c: f64) -> Self {
        if c == 0.0 {
            self.terms.clear();
        }
        for t in &mut self.terms {
            t.coef *= c;
        }
        self
    }
}

impl From<Monomial> for Posynomial {
    fn from(m: Monomial) -> Self {
        Posynomial::new(vec![m])
    }
}

impl Add for Posynomial {
    type Output = Posynomial;
    fn add(mut self, rhs: Posynomial) -> Posynomial {
        for t in rhs.terms {
            self.push(t);
        }
        self
    }
}

impl Add<Monomial> for Posynomial {
    type Output = Posynomial;
    fn add(mut self, rhs: Monomial) -> Posynomial {
        self.push(rhs);
        self
    }
}

impl Mul<&Monomial> for Posynomial {
    type Output = Posynomial;
    fn mul(self, rhs: &Monomial) -> Posynomial {
        Posynomial::new(self.terms.into_iter().map(|t| t * rhs.clone()).collect())
    }
}

impl Mul for Posynomial {
    type Output = Posynomial;
    fn mul(self, rhs: Posynomial) -> Posynomial {
        let mut out = Posynomial::default();
        for a in &self.terms {
            for b in &rhs.terms {
                out.push(a.clone() * b.clone());
            }
        }
        out
    }
}

/// Weighted geometric-mean monomial `Π (u_m / γ_m)^{γ_m}` with
/// `γ_m = u_m(anchor) / h(anchor)`. Never exceeds `h` and touches it at the anchor.
pub fn condense(p: &Posynomial, anchor: &[f64]) -> Result<Monomial, GpError> {
    let vals: Vec<f64> = p.terms.iter().map(|t| t.eval(anchor)).collect::<Result<_, _>>()?;
    let total: f64 = vals.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(GpError::InvalidTerm("posynomial does not evaluate positive at the anchor".into()));
    }
    let mut ln_coef = 0.0;
    let mut exps: BTreeMap<VarId, f64> = BTreeMap::new();
    for (t, v) in p.terms.iter().zip(&vals) {
        let g = v / total;
        if g == 0.0 {
            continue;
        }
        ln_coef += g * (t.coef.ln() - g.ln());
        for (&k, &e) in &t.exps {
            *exps.entry(k).or_insert(0.0) += g * e;
        }
    }
    Ok(Monomial {
        coef: ln_coef.exp(),
        exps,
    }
    .prune())
}

/// `coef · exp(rate · ζ_var)`, allowed in objectives only.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpTerm {
    pub coef: f64,
    pub var: VarId,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GpProblem {
    pub vars: Vec<Variable>,
    pub objective: Posynomial,
    pub objective_exp: Vec<ExpTerm>,
    /// `(name, p)` meaning `p ≤ 1`.
    pub constraints: Vec<(String, Posynomial)>,
    /// `(name, m)` meaning `m = 1`.
    pub equalities: Vec<(String, Monomial)>,
}

impl GpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> VarId {
        self.vars.push(Variable {
            name: name.into(),
            lower,
            upper,
        });
        self.vars.len() - 1
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    /// `p ≤ 1`; an empty posynomial is trivially satisfied and skipped.
    pub fn add_constraint(&mut self, name: impl Into<String>, p: Posynomial) {
        if !p.is_empty() {
            self.constraints.push((name.into(), p));
        }
    }

    /// `lhs ≤ rhs` for a monomial right-hand side.
    pub fn add_le(&mut self, name: impl Into<String>, lhs: Posynomial, rhs: &Monomial) {
        self.add_constraint(name, lhs * &rhs.inv());
    }

    pub fn add_equality(&mut self, name: impl Into<String>, m: Monomial) {
        self.equalities.push((name.into(), m));
    }

    pub fn objective_value(&self, x: &[f64]) -> Result<f64, GpError> {
        let mut v = self.objective.eval(x)?;
        for e in &self.objective_exp {
            v += e.coef * (e.rate * x[e.var]).exp();
        }
        Ok(v)
    }

    /// Largest `p_i(x) − 1` and `|ln m_k(x)|`, floored at zero.
    pub fn max_violation(&self, x: &[f64]) -> Result<f64, GpError> {
        let mut worst: f64 = 0.0;
        for (_, p) in &self.constraints {
            worst = worst.max(p.eval(x)? - 1.0);
        }
        for (_, m) in &self.equalities {
            worst = worst.max(m.eval(x)?.ln().abs());
        }
        Ok(worst)
    }

    fn check_monomial(&self, m: &Monomial) -> Result<(), GpError> {
        if !(m.coef > 0.0) || !m.coef.is_finite() {
            return Err(GpError::InvalidTerm(format!("coefficient {}", m.coef)));
        }
        for (&k, e) in &m.exps {
            if k >= self.vars.len() {
                return Err(GpError::UnknownVariable(k));
            }
            if !e.is_finite() {
                return Err(GpError::InvalidTerm(format!("exponent {e}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), GpError> {
        for v in &self.vars {
            if !(v.lower > 0.0 && v.upper > v.lower && v.upper.is_finite()) {
                return Err(GpError::BadBounds {
                    name: v.name.clone(),
                    lo: v.lower,
                    hi: v.upper,
                });
            }
        }
        if self.objective.is_empty() && self.objective_exp.is_empty() {
            return Err(GpError::InvalidTerm("empty objective".into()));
        }
        for t in &self.objective.terms {
            self.check_monomial(t)?;
        }
        for e in &self.objective_exp {
            if e.var >= self.vars.len() {
                return Err(GpError::UnknownVariable(e.var));
            }
            if !(e.coef > 0.0 && e.rate > 0.0) {
                return Err(GpError::InvalidTerm("exp term needs positive coefficient and rate".into()));
            }
        }
        for (_, p) in &self.constraints {
            for t in &p.terms {
                self.check_monomial(t)?;
            }
        }
        for (_, m) in &self.equalities {
            self.check_monomial(m)?;
        }
        Ok(())
    }

    /// Debug dump: variable table, then one term per line as `coef var^exp ...`.
    pub fn dump(&self) -> String {
        self.to_string()
    }
}

fn fmt_monomial(f: &mut fmt::Formatter<'_>, vars: &[Variable], m: &Monomial) -> fmt::Result {
    write!(f, "  {:e}", m.coef)?;
    for (&k, e) in &m.exps {
        let name = vars.get(k).map(|v| v.name.as_str()).unwrap_or("?");
        write!(f, " {name}^{e}")?;
    }
    writeln!(f)
}

impl fmt::Display for GpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variables")?;
        for v in &self.vars {
            writeln!(f, "  {} [{:e}, {:e}]", v.name, v.lower, v.upper)?;
        }
        writeln!(f, "minimize")?;
        for t in &self.objective.terms {
            fmt_monomial(f, &self.vars, t)?;
        }
        for e in &self.objective_exp {
            writeln!(f, "  {:e} exp({:e}*{})", e.coef, e.rate, self.vars[e.var].name)?;
        }
        for (name, p) in &self.constraints {
            writeln!(f, "subject to {name} <= 1")?;
            for t in &p.terms {
                fmt_monomial(f, &self.vars, t)?;
            }
        }
        for (name, m) in &self.equalities {
            writeln!(f, "subject to {name} = 1")?;
            fmt_monomial(f, &self.vars, m)?;
        }
        Ok(())
    }
}

/// Term `b + a·y` of a log-sum-exp.
#[derive(Debug, Clone, PartialEq)]
struct Affine {
    b: f64,
    a: Vec<(usize, f64)>,
}

/// Term `ln c + rate·exp(y_var)`.
#[derive(Debug, Clone, PartialEq)]
struct ExpOfVar {
    ln_c: f64,
    var: usize,
    rate: f64,
}

/// `ln Σ exp(e_k(y))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSumExp {
    aff: Vec<Affine>,
    expv: Vec<ExpOfVar>,
}

impl LogSumExp {
    fn from_posynomial(p: &Posynomial) -> Self {
        Self {
            aff: p
                .terms
                .iter()
                .map(|t| Affine {
                    b: t.coef.ln(),
                    a: t.exps.iter().map(|(&k, &e)| (k, e)).collect(),
                })
                .collect(),
            expv: Vec::new(),
        }
    }

    fn exponents(&self, y: &[f64]) -> Vec<f64> {
        let mut e: Vec<f64> = self
            .aff
            .iter()
            .map(|t| t.b + t.a.iter().map(|&(k, c)| c * y[k]).sum::<f64>())
            .collect();
        e.extend(self.expv.iter().map(|t| t.ln_c + t.rate * y[t.var].exp()));
        e
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        let e = self.exponents(y);
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + e.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    }

    /// Returns `(f, ∇f)` and adds `scale(f)·∇²f` into `h`.
    fn accumulate(&self, y: &[f64], scale: impl Fn(f64) -> f64, h: &mut DMatrix<f64>) -> (f64, DVector<f64>) {
        let e = self.exponents(y);
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = w.iter().sum();
        let value = m + total.ln();
        let scale = scale(value);
        let n = h.nrows();
        let mut grad = DVector::zeros(n);
        let na = self.aff.len();
        for (k, t) in self.aff.iter().enumerate() {
            let wk = w[k] / total;
            if wk == 0.0 {
                continue;
            }
            for &(i, ci) in &t.a {
                grad[i] += wk * ci;
                for &(j, cj) in &t.a {
                    h[(i, j)] += scale * wk * ci * cj;
                }
            }
        }
        for (k, t) in self.expv.iter().enumerate() {
            let wk = w[na + k] / total;
            if wk == 0.0 {
                continue;
            }
            let d = t.rate * y[t.var].exp();
            grad[t.var] += wk * d;
            h[(t.var, t.var)] += scale * wk * (d + d * d);
        }
        // h -= scale · grad gradᵀ, over the non-zero support only
        let support: Vec<usize> = (0..n).filter(|&i| grad[i] != 0.0).collect();
        for &i in &support {
            for &j in &support {
                h[(i, j)] -= scale * grad[i] * grad[j];
            }
        }
        (value, grad)
    }
}

/// The problem after `y = ln ζ`: minimize `f0(y)` s.t. `f_i(y) ≤ 0`,
/// `A y = b`, `lo ≤ y ≤ hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProgram {
    pub n: usize,
    pub objective: LogSumExp,
    pub inequalities: Vec<LogSumExp>,
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub fn to_convex_form(p: &GpProblem) -> ConvexProgram {
    let n = p.n_vars();
    let mut objective = LogSumExp::from_posynomial(&p.objective);
    objective.expv = p
        .objective_exp
        .iter()
        .map(|e| ExpOfVar {
            ln_c: e.coef.ln(),
            var: e.var,
            rate: e.rate,
        })
        .collect();
    let mut eq_a = DMatrix::zeros(p.equalities.len(), n);
    let mut eq_b = DVector::zeros(p.equalities.len());
    for (r, (_, m)) in p.equalities.iter().enumerate() {
        for (&k, &e) in &m.exps {
            eq_a[(r, k)] = e;
        }
        eq_b[r] = -m.coef.ln();
    }
    ConvexProgram {
        n,
        objective,
        inequalities: p.constraints.iter().map(|(_, c)| LogSumExp::from_posynomial(c)).collect(),
        eq_a,
        eq_b,
        lo: p.vars.iter().map(|v| v.lower.ln()).collect(),
        hi: p.vars.iter().map(|v| v.upper.ln()).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub mu_init: f64,
    pub mu_factor: f64,
    pub tol_outer: f64,
    pub tol_newton: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            mu_init: 1.0,
            mu_factor: 0.2,
            tol_outer: 1e-8,
            tol_newton: 1e-10,
            max_outer: 200,
            max_inner: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Newton steps over both phases.
    pub iterations: usize,
    pub converged: bool,
    pub max_violation: f64,
}

/// Phase 1 appends a slack `s` (index `n`) and replaces `f_i ≤ 0` by `f_i ≤ s`
/// for the constraints flagged in `relaxed`, with `s ≥ −1`.
struct Barrier<'a> {
    prog: &'a ConvexProgram,
    phase1: bool,
    relaxed: Vec<bool>,
}

const PHASE1_FLOOR: f64 = -1.0;

impl Barrier<'_> {
    fn dim(&self) -> usize {
        self.prog.n + usize::from(self.phase1)
    }

    fn n_ineq(&self) -> usize {
        self.prog.inequalities.len() + 2 * self.prog.n + usize::from(self.phase1)
    }

    fn slack(&self, x: &[f64]) -> f64 {
        if self.phase1 {
            x[self.prog.n]
        } else {
            0.0
        }
    }

    /// `f0 + μ·barrier`, or `None` outside the barrier's domain.
    #[allow(clippy::needless_range_loop)]
    fn value(&self, x: &[f64], mu: f64) -> Option<f64> {
        let p = self.prog;
        let s = self.slack(x);
        let mut bar = 0.0;
        for j in 0..p.n {
            let (a, b) = (x[j] - p.lo[j], p.hi[j] - x[j]);
            if !(a > 0.0 && b > 0.0) {
                return None;
            }
            bar -= a.ln() + b.ln();
        }
        for (i, c) in p.inequalities.iter().enumerate() {
            let r = self.shift(i, s) - c.value(x);
            if !(r > 0.0) {
                return None;
            }
            bar -= r.ln();
        }
        let obj = if self.phase1 {
            let r = s - PHASE1_FLOOR;
            if !(r > 0.0) {
                return None;
            }
            bar -= r.ln();
            s
        } else {
            p.objective.value(x)
        };
        let v = obj + mu * bar;
        v.is_finite().then_some(v)
    }

    fn grad_hess(&self, x: &[f64], mu: f64) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.prog;
        let d = self.dim();
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        let s = self.slack(x);
        let y = &x[..p.n];
        if self.phase1 {
            g[p.n] += 1.0;
            let r = s - PHASE1_FLOOR;
            g[p.n] -= mu / r;
            h[(p.n, p.n)] += mu / (r * r);
        } else {
            let (_, og) = p.objective.accumulate(y, |_| 1.0, &mut h);
            g += og;
        }
        for j in 0..p.n {
            let (a, b) = (x[j] - p.lo[j], p.hi[j] - x[j]);
            g[j] += mu * (-1.0 / a + 1.0 / b);
            h[(j, j)] += mu * (1.0 / (a * a) + 1.0 / (b * b));
        }
        let n = p.n;
        for (i, c) in p.inequalities.iter().enumerate() {
            // −μ ln(s − f): grad μ(∇f − e_s)/r, hess μ∇²f/r + μ(∇f − e_s)(∇f − e_s)ᵀ/r²
            let si = self.shift(i, s);
            let (f, mut cg) = c.accumulate(y, |f| mu / (si - f), &mut h);
            if self.phase1 && self.relaxed[i] {
                cg[n] = -1.0;
            }
            let r = si - f;
            g.axpy(mu / r, &cg, 1.0);
            let support: Vec<usize> = (0..d).filter(|&i| cg[i] != 0.0).collect();
            let k = mu / (r * r);
            for &i in &support {
                for &j in &support {
                    h[(i, j)] += k * cg[i] * cg[j];
                }
            }
        }
        (g, h)
    }

    fn shift(&self, i: usize, s: f64) -> f64 {
        if self.phase1 && self.relaxed[i] {
            s
        } else {
            0.0
        }
    }

    fn eq_matrix(&self) -> DMatrix<f64> {
        let p = self.prog;
        let mut a = DMatrix::zeros(p.eq_a.nrows(), self.dim());
        a.view_mut((0, 0), (p.eq_a.nrows(), p.n)).copy_from(&p.eq_a);
        a
    }

    /// Newton direction and decrement `λ²`.
    fn newton_step(&self, g: &DVector<f64>, h: &DMatrix<f64>, a: &DMatrix<f64>) -> Option<(DVector<f64>, f64)> {
        let d = g.len();
        let dx = if a.nrows() == 0 {
            let mut reg = 0.0;
            let scale = h.diagonal().amax().max(1.0);
            loop {
                let mut hr = h.clone();
                for i in 0..d {
                    hr[(i, i)] += reg;
                }
                if let Some(ch) = hr.cholesky() {
                    break ch.solve(&(-g));
                }
                reg = if reg == 0.0 { 1e-14 * scale } else { reg * 10.0 };
                if reg > scale {
                    return None;
                }
            }
        } else {
            let m = a.nrows();
            let mut kkt = DMatrix::zeros(d + m, d + m);
            kkt.view_mut((0, 0), (d, d)).copy_from(h);
            kkt.view_mut((d, 0), (m, d)).copy_from(a);
            kkt.view_mut((0, d), (d, m)).copy_from(&a.transpose());
            let mut rhs = DVector::zeros(d + m);
            rhs.rows_mut(0, d).copy_from(&(-g));
            let sol = kkt.lu().solve(&rhs)?;
            sol.rows(0, d).into_owned()
        };
        let lambda2 = -g.dot(&dx);
        (dx.iter().all(|v| v.is_finite()) && lambda2.is_finite()).then_some((dx, lambda2))
    }

    /// Damped Newton centering at fixed `μ`. Returns Newton steps taken and
    /// whether the Newton decrement reached tolerance.
    fn center(
        &self,
        x: &mut Vec<f64>,
        mu: f64,
        set: &SolverSettings,
        mut stop: impl FnMut(&[f64]) -> bool,
    ) -> Result<(usize, bool), GpError> {
        let a = self.eq_matrix();
        let mut fx = self.value(x, mu).ok_or(GpError::NumericalBreakdown)?;
        for it in 0..set.max_inner {
            let (g, h) = self.grad_hess(x, mu);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GpError::NumericalBreakdown);
            }
            let Some((dx, lambda2)) = self.newton_step(&g, &h, &a) else {
                return Err(GpError::NumericalBreakdown);
            };
            if lambda2 / 2.0 <= set.tol_newton {
                return Ok((it, true));
            }
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-14 {
                let cand: Vec<f64> = x.iter().zip(dx.iter()).map(|(xi, di)| xi + t * di).collect();
                if let Some(fc) = self.value(&cand, mu) {
                    if fc <= fx - 0.01 * t * lambda2 {
                        *x = cand;
                        fx = fc;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                // no representable decrease left at this μ
                return Ok((it + 1, true));
            }
            if stop(x) {
                return Ok((it + 1, false));
            }
        }
        Ok((set.max_inner, false))
    }
}

/// Moves `y` strictly inside the log-space box.
#[allow(clippy::needless_range_loop)]
fn interior(prog: &ConvexProgram, y: &mut [f64]) {
    for j in 0..prog.n {
        let (lo, hi) = (prog.lo[j], prog.hi[j]);
        let margin = (1e-10 * (hi - lo)).min(1e-8);
        y[j] = y[j].clamp(lo + margin, hi - margin);
    }
}

fn project_equalities(prog: &ConvexProgram, y: &mut [f64]) -> Result<(), GpError> {
    if prog.eq_a.nrows() == 0 {
        return Ok(());
    }
    let yv = DVector::from_column_slice(y);
    let r = &prog.eq_a * &yv - &prog.eq_b;
    let aat = &prog.eq_a * prog.eq_a.transpose();
    let z = aat.lu().solve(&r).ok_or(GpError::NumericalBreakdown)?;
    let corr = prog.eq_a.transpose() * z;
    for j in 0..prog.n {
        y[j] -= corr[j];
        if !(y[j] > prog.lo[j] && y[j] < prog.hi[j]) {
            return Err(GpError::EqualityOutsideBounds);
        }
    }
    Ok(())
}

pub fn solve(problem: &GpProblem, init: &[f64], settings: &SolverSettings) -> Result<SolveReport, GpError> {
    problem.validate()?;
    if init.len() != problem.n_vars() {
        return Err(GpError::InvalidTerm(format!(
            "init has {} entries for {} variables",
            init.len(),
            problem.n_vars()
        )));
    }
    for (k, &v) in init.iter().enumerate() {
        if !(v > 0.0) {
            return Err(GpError::NonPositivePoint(k));
        }
    }
    let prog = to_convex_form(problem);
    let mut y: Vec<f64> = init.iter().map(|v| v.ln()).collect();
    interior(&prog, &mut y);
    project_equalities(&prog, &mut y)?;
    let mut iterations = 0;

    let feasible = prog.inequalities.iter().all(|c| c.value(&y) < 0.0);
    if !feasible {
        iterations += phase_one(&prog, &mut y, settings)?;
    }

    let bar = Barrier {
        prog: &prog,
        phase1: false,
        relaxed: Vec::new(),
    };
    let m = bar.n_ineq() as f64;
    let mut mu = settings.mu_init;
    let mut converged = false;
    for _ in 0..settings.max_outer {
        iterations += bar.center(&mut y, mu, settings, |_| false)?.0;
        if m * mu < settings.tol_outer {
            converged = true;
            break;
        }
        mu *= settings.mu_factor;
    }
    if !converged {
        return Err(GpError::MaxIterations(settings.max_outer));
    }
    let x: Vec<f64> = y.iter().map(|v| v.exp()).collect();
    let objective = problem.objective_value(&x)?;
    if !objective.is_finite() {
        return Err(GpError::NumericalBreakdown);
    }
    Ok(SolveReport {
        max_violation: problem.max_violation(&x)?,
        x,
        objective,
        iterations,
        converged,
    })
}

/// Minimizes a common slack on the initially violated constraints until every
/// constraint holds strictly. Satisfied constraints keep their plain barrier, so
/// narrow feasible bands elsewhere do not cap the attainable slack.
fn phase_one(prog: &ConvexProgram, y: &mut [f64], settings: &SolverSettings) -> Result<usize, GpError> {
    let values: Vec<f64> = prog.inequalities.iter().map(|c| c.value(y)).collect();
    let bar = Barrier {
        prog,
        phase1: true,
        relaxed: values.iter().map(|&v| v >= 0.0).collect(),
    };
    let worst = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut x = y.to_vec();
    x.push((worst + 1.0).max(PHASE1_FLOOR + 0.5));
    let n = prog.n;
    let m = bar.n_ineq() as f64;
    let mut mu = settings.mu_init;
    let mut iterations = 0;
    for _ in 0..settings.max_outer {
        let (steps, centered) = bar.center(&mut x, mu, settings, |x| x[n] < -1e-6)?;
        iterations += steps;
        let s = x[n];
        if s < 0.0 {
            y.copy_from_slice(&x[..n]);
            return Ok(iterations);
        }
        // s − mμ bounds the optimal slack from below only at a centred point
        if (centered && s - m * mu > 0.0) || m * mu < settings.tol_outer {
            return Err(GpError::Infeasible(s - m * mu));
        }
        mu *= settings.mu_factor;
    }
    Err(GpError::MaxIterations(settings.max_outer))
}
