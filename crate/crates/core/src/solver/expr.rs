//! Scalar expressions with hand-coded first and second derivatives.
//!
//! Objectives and constraints are sums of a small set of term shapes, each
//! knowing its value, gradient, and Hessian contribution. Construction
//! folds constant arguments away, so evaluation only ever sees live
//! variables. A value of `+inf` signals a domain violation (non-positive
//! denominator or log argument), which the line search treats as
//! out-of-bounds.

use nalgebra::DMatrix;

/// Either a decision variable or a number fixed at build time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arg {
    Var(usize),
    Const(f64),
}

impl Arg {
    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            Arg::Var(i) => x[i],
            Arg::Const(c) => c,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Term {
    /// `a / x`, convex for `a >= 0`, `x > 0`.
    Recip { a: f64, x: usize },
    /// `a * x^2`, convex for `a >= 0`.
    Quad { a: f64, x: usize },
    /// `a / (x * y)`, convex on the positive orthant for `a >= 0`.
    RecipProd { a: f64, x: usize, y: usize },
    /// `a * x^2 / y`, convex for `y > 0`, `a >= 0`.
    QuadOverLin { a: f64, x: usize, y: usize },
    /// `a / (sum(xs) + c0)`, convex for a positive denominator.
    RecipSum { a: f64, xs: Vec<usize>, c0: f64 },
    /// `a / ln(1 + s*x)`: transfer time over a log link rate. Convex,
    /// decreasing on `x > 0`.
    LogRecip { a: f64, s: f64, x: usize },
    /// `a * x / ln(1 + s*x)`: transfer energy. Concave on `x > 0`, so it
    /// never enters a convex subproblem directly; only its value and
    /// tangent are used.
    XOverLog { a: f64, s: f64, x: usize },
}

impl Term {
    fn is_convex(&self) -> bool {
        match *self {
            Term::Recip { a, .. }
            | Term::Quad { a, .. }
            | Term::RecipProd { a, .. }
            | Term::QuadOverLin { a, .. }
            | Term::RecipSum { a, .. }
            | Term::LogRecip { a, .. } => a >= 0.0,
            Term::XOverLog { .. } => false,
        }
    }
}

/// A scalar expression: linear part + nonlinear terms + constant.
#[derive(Debug, Clone, Default)]
pub struct Expr {
    pub lin: Vec<(usize, f64)>,
    pub terms: Vec<Term>,
    pub constant: f64,
}

impl Expr {
    pub fn constant(c: f64) -> Self {
        Expr {
            constant: c,
            ..Default::default()
        }
    }

    pub fn push_lin(&mut self, var: usize, coeff: f64) {
        self.lin.push((var, coeff));
    }

    /// Adds `a / x`, folding constants.
    pub fn add_recip(&mut self, a: f64, x: Arg) {
        match x {
            Arg::Var(i) => self.terms.push(Term::Recip { a, x: i }),
            Arg::Const(c) => self.constant += a / c,
        }
    }

    /// Adds `a / (x*y)`, folding constants.
    pub fn add_recip_prod(&mut self, a: f64, x: Arg, y: Arg) {
        match (x, y) {
            (Arg::Var(i), Arg::Var(j)) => self.terms.push(Term::RecipProd { a, x: i, y: j }),
            (Arg::Var(i), Arg::Const(c)) | (Arg::Const(c), Arg::Var(i)) => {
                self.add_recip(a / c, Arg::Var(i))
            }
            (Arg::Const(c1), Arg::Const(c2)) => self.constant += a / (c1 * c2),
        }
    }

    /// Adds `a * x^2 / y`, folding constants.
    pub fn add_quad_over_lin(&mut self, a: f64, x: Arg, y: Arg) {
        match (x, y) {
            (Arg::Var(i), Arg::Var(j)) => self.terms.push(Term::QuadOverLin { a, x: i, y: j }),
            (Arg::Const(c), y) => self.add_recip(a * c * c, y),
            (Arg::Var(i), Arg::Const(c)) => self.terms.push(Term::Quad { a: a / c, x: i }),
        }
    }

    /// Adds `a / (sum of xs)`, folding constant summands into `c0`.
    pub fn add_recip_sum(&mut self, a: f64, xs: impl IntoIterator<Item = Arg>) {
        let mut vars = Vec::new();
        let mut c0 = 0.0;
        for arg in xs {
            match arg {
                Arg::Var(i) => vars.push(i),
                Arg::Const(c) => c0 += c,
            }
        }
        if vars.is_empty() {
            self.constant += a / c0;
        } else if vars.len() == 1 && c0 == 0.0 {
            self.terms.push(Term::Recip { a, x: vars[0] });
        } else {
            self.terms.push(Term::RecipSum { a, xs: vars, c0 });
        }
    }

    /// Adds `a / ln(1 + s*x)`, folding constants.
    pub fn add_log_recip(&mut self, a: f64, s: f64, x: Arg) {
        match x {
            Arg::Var(i) => self.terms.push(Term::LogRecip { a, s, x: i }),
            Arg::Const(c) => self.constant += a / (s * c).ln_1p(),
        }
    }

    /// Adds `a * x / ln(1 + s*x)`, folding constants.
    pub fn add_x_over_log(&mut self, a: f64, s: f64, x: Arg) {
        match x {
            Arg::Var(i) => self.terms.push(Term::XOverLog { a, s, x: i }),
            Arg::Const(c) => self.constant += a * c / (s * c).ln_1p(),
        }
    }

    /// True when every term is a convex shape with nonnegative weight.
    pub fn is_convex(&self) -> bool {
        self.terms.iter().all(Term::is_convex)
    }

    /// Expression value; `+inf` on domain violations.
    pub fn value(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for &(i, c) in &self.lin {
            v += c * x[i];
        }
        for t in &self.terms {
            v += match *t {
                Term::Recip { a, x: i } => {
                    let xi = x[i];
                    if xi <= 0.0 {
                        return f64::INFINITY;
                    }
                    a / xi
                }
                Term::Quad { a, x: i } => a * x[i] * x[i],
                Term::RecipProd { a, x: i, y: j } => {
                    let (xi, yj) = (x[i], x[j]);
                    if xi <= 0.0 || yj <= 0.0 {
                        return f64::INFINITY;
                    }
                    a / (xi * yj)
                }
                Term::QuadOverLin { a, x: i, y: j } => {
                    let yj = x[j];
                    if yj <= 0.0 {
                        return f64::INFINITY;
                    }
                    a * x[i] * x[i] / yj
                }
                Term::RecipSum { a, ref xs, c0 } => {
                    let s: f64 = xs.iter().map(|&i| x[i]).sum::<f64>() + c0;
                    if s <= 0.0 {
                        return f64::INFINITY;
                    }
                    a / s
                }
                Term::LogRecip { a, s, x: i } => {
                    let xi = x[i];
                    if xi <= 0.0 {
                        return f64::INFINITY;
                    }
                    a / (s * xi).ln_1p()
                }
                Term::XOverLog { a, s, x: i } => {
                    let xi = x[i];
                    if xi <= 0.0 {
                        return f64::INFINITY;
                    }
                    a * xi / (s * xi).ln_1p()
                }
            };
        }
        v
    }

    /// Accumulates `w * gradient` into `g`. The point must be in-domain.
    pub fn grad_into(&self, x: &[f64], w: f64, g: &mut [f64]) {
        for &(i, c) in &self.lin {
            g[i] += w * c;
        }
        for t in &self.terms {
            match *t {
                Term::Recip { a, x: i } => {
                    let xi = x[i];
                    g[i] += w * (-a / (xi * xi));
                }
                Term::Quad { a, x: i } => g[i] += w * 2.0 * a * x[i],
                Term::RecipProd { a, x: i, y: j } => {
                    let (xi, yj) = (x[i], x[j]);
                    g[i] += w * (-a / (xi * xi * yj));
                    g[j] += w * (-a / (xi * yj * yj));
                }
                Term::QuadOverLin { a, x: i, y: j } => {
                    let (xi, yj) = (x[i], x[j]);
                    g[i] += w * 2.0 * a * xi / yj;
                    g[j] += w * (-a * xi * xi / (yj * yj));
                }
                Term::RecipSum { a, ref xs, c0 } => {
                    let s: f64 = xs.iter().map(|&i| x[i]).sum::<f64>() + c0;
                    let d = -a / (s * s);
                    for &i in xs {
                        g[i] += w * d;
                    }
                }
                Term::LogRecip { a, s, x: i } => {
                    let v = 1.0 + s * x[i];
                    let l = (s * x[i]).ln_1p();
                    g[i] += w * (-a * s / (v * l * l));
                }
                Term::XOverLog { a, s, x: i } => {
                    let xi = x[i];
                    let v = 1.0 + s * xi;
                    let l = (s * xi).ln_1p();
                    g[i] += w * a * (1.0 / l - xi * s / (v * l * l));
                }
            }
        }
    }

    /// Accumulates `w * Hessian` into `h`. Only convex shapes are
    /// supported; tangent surrogates replace the concave ones first.
    pub fn hess_into(&self, x: &[f64], w: f64, h: &mut DMatrix<f64>) {
        for t in &self.terms {
            match *t {
                Term::Recip { a, x: i } => {
                    let xi = x[i];
                    h[(i, i)] += w * 2.0 * a / (xi * xi * xi);
                }
                Term::Quad { a, x: i } => h[(i, i)] += w * 2.0 * a,
                Term::RecipProd { a, x: i, y: j } => {
                    let (xi, yj) = (x[i], x[j]);
                    h[(i, i)] += w * 2.0 * a / (xi * xi * xi * yj);
                    h[(j, j)] += w * 2.0 * a / (xi * yj * yj * yj);
                    let c = w * a / (xi * xi * yj * yj);
                    h[(i, j)] += c;
                    h[(j, i)] += c;
                }
                Term::QuadOverLin { a, x: i, y: j } => {
                    let (xi, yj) = (x[i], x[j]);
                    h[(i, i)] += w * 2.0 * a / yj;
                    h[(j, j)] += w * 2.0 * a * xi * xi / (yj * yj * yj);
                    let c = w * (-2.0 * a * xi / (yj * yj));
                    h[(i, j)] += c;
                    h[(j, i)] += c;
                }
                Term::RecipSum { a, ref xs, c0 } => {
                    let s: f64 = xs.iter().map(|&i| x[i]).sum::<f64>() + c0;
                    let d = w * 2.0 * a / (s * s * s);
                    for &i in xs {
                        for &j in xs {
                            h[(i, j)] += d;
                        }
                    }
                }
                Term::LogRecip { a, s, x: i } => {
                    let v = 1.0 + s * x[i];
                    let l = (s * x[i]).ln_1p();
                    h[(i, i)] += w * a * s * s * (l + 2.0) / (v * v * l * l * l);
                }
                Term::XOverLog { .. } => {
                    unreachable!("concave transfer-energy term inside a convex subproblem")
                }
            }
        }
    }

    /// A copy with every coefficient (and the constant) multiplied by `w`.
    pub fn scaled(&self, w: f64) -> Expr {
        let mut out = self.clone();
        out.constant *= w;
        for (_, c) in &mut out.lin {
            *c *= w;
        }
        for t in &mut out.terms {
            match t {
                Term::Recip { a, .. }
                | Term::Quad { a, .. }
                | Term::RecipProd { a, .. }
                | Term::QuadOverLin { a, .. }
                | Term::RecipSum { a, .. }
                | Term::LogRecip { a, .. }
                | Term::XOverLog { a, .. } => *a *= w,
            }
        }
        out
    }

    /// Indices of the variables this expression touches.
    pub fn vars(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.lin.iter().map(|&(i, _)| i).collect();
        for t in &self.terms {
            match *t {
                Term::Recip { x, .. }
                | Term::Quad { x, .. }
                | Term::LogRecip { x, .. }
                | Term::XOverLog { x, .. } => out.push(x),
                Term::RecipProd { x, y, .. } | Term::QuadOverLin { x, y, .. } => {
                    out.push(x);
                    out.push(y);
                }
                Term::RecipSum { ref xs, .. } => out.extend_from_slice(xs),
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}
