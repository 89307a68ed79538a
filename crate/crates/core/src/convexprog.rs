//! Convex subproblems in a solver-neutral form: a convex quadratic cost,
//! affine equalities and inequalities, and rotated second-order cones
//! `|w|^2 <= u v, u >= 0, v >= 0` over affine images of the variables.
//!
//! The objective is `0.5 x'Px + q'x + constant`. Solving is delegated to the
//! Clarabel interior-point solver; KKT residuals are recomputed here from the
//! program data rather than taken from the solver's own report.
//!
//! Dual vector layout (one entry per row, in this order): equality rows,
//! inequality rows, then for each cone the rows `(u + v, u - v, 2 w_1, ...)`.
//! With these signs the Lagrangian is
//! `f(x) + sum_eq y (a'x + c) + sum_ineq z (a'x + c) - sum_cone z_k' e_k(x)`,
//! where `e_k(x)` is the cone's row image.

use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITERS: u32 = 200;

/// `sum_i coef_i x_i + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(i: usize) -> Self {
        Self {
            terms: vec![(i, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(mut self, i: usize, coef: f64) -> Self {
        if coef != 0.0 {
            self.terms.push((i, coef));
        }
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn scaled(mut self, a: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= a;
        }
        self.constant *= a;
        self
    }

    pub fn add(mut self, other: &LinExpr) -> Self {
        self.terms.extend_from_slice(&other.terms);
        self.constant += other.constant;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotatedCone {
    pub u: LinExpr,
    pub v: LinExpr,
    pub w: Vec<LinExpr>,
}

impl RotatedCone {
    /// Row images `(u + v, u - v, 2 w_1, ...)` of the equivalent standard cone.
    fn rows(&self) -> Vec<LinExpr> {
        let mut rows = Vec::with_capacity(2 + self.w.len());
        rows.push(self.u.clone().add(&self.v));
        rows.push(self.u.clone().add(&self.v.clone().scaled(-1.0)));
        rows.extend(self.w.iter().map(|w| w.clone().scaled(2.0)));
        rows
    }

    /// How far `x` is from the cone, zero inside.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let r: Vec<f64> = self.rows().iter().map(|e| e.eval(x)).collect();
        let tail = r[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        (tail - r[0]).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIters,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// Largest equality, inequality, or cone violation.
    pub primal: f64,
    /// `|Px + q + A'z|_inf` over the stacked rows.
    pub stationarity: f64,
    /// Largest per-block `|s'z|`.
    pub complementarity: f64,
    /// Largest violation of dual-cone membership.
    pub dual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: Vec<f64>,
    pub duals: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub kkt_residuals: KktResiduals,
    pub iterations: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    n: usize,
    /// Entries of the symmetric `P`, upper triangle only (`i <= j`).
    quad: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    constant: f64,
    eqs: Vec<LinExpr>,
    ineqs: Vec<LinExpr>,
    cones: Vec<RotatedCone>,
}

impl ConicProgram {
    pub fn new(variable_count: usize) -> Self {
        Self {
            n: variable_count,
            linear: vec![0.0; variable_count],
            ..Default::default()
        }
    }

    pub fn variable_count(&self) -> usize {
        self.n
    }

    pub fn add_variables(&mut self, count: usize) -> std::ops::Range<usize> {
        let start = self.n;
        self.n += count;
        self.linear.resize(self.n, 0.0);
        start..self.n
    }

    pub fn add_variable(&mut self) -> usize {
        self.add_variables(1).start
    }

    pub fn equalities(&self) -> &[LinExpr] {
        &self.eqs
    }

    pub fn inequalities(&self) -> &[LinExpr] {
        &self.ineqs
    }

    pub fn cones(&self) -> &[RotatedCone] {
        &self.cones
    }

    pub fn linear_cost(&self) -> &[f64] {
        &self.linear
    }

    pub fn cost_constant(&self) -> f64 {
        self.constant
    }

    /// Adds `value` to `P[i][j]` and `P[j][i]` (once on the diagonal).
    pub fn add_quadratic(&mut self, i: usize, j: usize, value: f64) {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.quad.push((a, b, value));
    }

    pub fn add_linear_cost(&mut self, i: usize, value: f64) {
        self.linear[i] += value;
    }

    pub fn add_cost_constant(&mut self, value: f64) {
        self.constant += value;
    }

    /// Adds `weight · expr^2` to the objective.
    pub fn add_square(&mut self, expr: &LinExpr, weight: f64) {
        // Expand (sum c_i x_i + k)^2 term by term.
        let terms = &expr.terms;
        for a in 0..terms.len() {
            let (i, ci) = terms[a];
            self.add_quadratic(i, i, 2.0 * weight * ci * ci);
            for &(j, cj) in &terms[a + 1..] {
                if i == j {
                    self.add_quadratic(i, i, 4.0 * weight * ci * cj);
                } else {
                    self.add_quadratic(i, j, 2.0 * weight * ci * cj);
                }
            }
            self.linear[i] += 2.0 * weight * ci * expr.constant;
        }
        self.constant += weight * expr.constant * expr.constant;
    }

    /// `expr = 0`.
    pub fn add_eq(&mut self, expr: LinExpr) {
        self.eqs.push(expr);
    }

    /// `expr <= 0`.
    pub fn add_le(&mut self, expr: LinExpr) {
        self.ineqs.push(expr);
    }

    /// `expr >= 0`.
    pub fn add_ge(&mut self, expr: LinExpr) {
        self.ineqs.push(expr.scaled(-1.0));
    }

    pub fn add_bounds(&mut self, i: usize, lo: f64, hi: f64) {
        if lo.is_finite() {
            self.add_ge(LinExpr::var(i).plus(-lo));
        }
        if hi.is_finite() {
            self.add_le(LinExpr::var(i).plus(-hi));
        }
    }

    /// `|w|^2 <= u v` with `u, v >= 0`.
    pub fn add_rotated_cone(&mut self, u: LinExpr, v: LinExpr, w: Vec<LinExpr>) {
        self.cones.push(RotatedCone { u, v, w });
    }

    /// Dense `P` (both triangles).
    pub fn quadratic_matrix(&self) -> Vec<Vec<f64>> {
        let mut p = vec![vec![0.0; self.n]; self.n];
        for &(i, j, v) in &self.quad {
            p[i][j] += v;
            if i != j {
                p[j][i] += v;
            }
        }
        p
    }

    fn p_times(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(i, j, v) in &self.quad {
            out[i] += v * x[j];
            if i != j {
                out[j] += v * x[i];
            }
        }
        out
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p_times(x);
        let quad: f64 = px.iter().zip(x).map(|(a, b)| a * b).sum();
        let lin: f64 = self.linear.iter().zip(x).map(|(a, b)| a * b).sum();
        0.5 * quad + lin + self.constant
    }

    pub fn dual_len(&self) -> usize {
        self.eqs.len() + self.ineqs.len() + self.cones.iter().map(|c| 2 + c.w.len()).sum::<usize>()
    }

    /// Residuals of the KKT system at primal `x` and duals `z` (layout in the
    /// module docs).
    pub fn kkt_residuals(&self, x: &[f64], z: &[f64]) -> KktResiduals {
        let mut res = KktResiduals::default();
        let mut grad = self.p_times(x);
        for (g, q) in grad.iter_mut().zip(&self.linear) {
            *g += q;
        }
        let mut row = 0;
        for e in &self.eqs {
            res.primal = res.primal.max(e.eval(x).abs());
            for &(i, c) in &e.terms {
                grad[i] += c * z[row];
            }
            row += 1;
        }
        for e in &self.ineqs {
            let v = e.eval(x);
            res.primal = res.primal.max(v.max(0.0));
            res.dual = res.dual.max((-z[row]).max(0.0));
            res.complementarity = res.complementarity.max((z[row] * v).abs());
            for &(i, c) in &e.terms {
                grad[i] += c * z[row];
            }
            row += 1;
        }
        for cone in &self.cones {
            res.primal = res.primal.max(cone.violation(x));
            let rows = cone.rows();
            let zs = &z[row..row + rows.len()];
            let tail = zs[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            res.dual = res.dual.max((tail - zs[0]).max(0.0));
            let mut sz = 0.0;
            for (e, zk) in rows.iter().zip(zs) {
                sz += e.eval(x) * zk;
                for &(i, c) in &e.terms {
                    grad[i] -= c * zk;
                }
            }
            res.complementarity = res.complementarity.max(sz.abs());
            row += rows.len();
        }
        res.stationarity = grad.iter().fold(0.0, |m, g| m.max(g.abs()));
        res
    }

    /// Row-major decimal dump of the program data, for solver triage.
    pub fn to_debug_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variables {}", self.n);
        let _ = writeln!(out, "P");
        for row in self.quadratic_matrix() {
            let _ = writeln!(out, "{}", join(&row));
        }
        let _ = writeln!(out, "q\n{}", join(&self.linear));
        let _ = writeln!(out, "constant {:.17e}", self.constant);
        let dense = |e: &LinExpr| {
            let mut r = vec![0.0; self.n];
            for &(i, c) in &e.terms {
                r[i] += c;
            }
            r.push(e.constant);
            r
        };
        let _ = writeln!(out, "eq [a | c] (a'x + c = 0) {}", self.eqs.len());
        for e in &self.eqs {
            let _ = writeln!(out, "{}", join(&dense(e)));
        }
        let _ = writeln!(out, "ineq [a | c] (a'x + c <= 0) {}", self.ineqs.len());
        for e in &self.ineqs {
            let _ = writeln!(out, "{}", join(&dense(e)));
        }
        let _ = writeln!(out, "rotated cones {}", self.cones.len());
        for (k, c) in self.cones.iter().enumerate() {
            let _ = writeln!(out, "cone {k} u\n{}", join(&dense(&c.u)));
            let _ = writeln!(out, "cone {k} v\n{}", join(&dense(&c.v)));
            for w in &c.w {
                let _ = writeln!(out, "cone {k} w\n{}", join(&dense(w)));
            }
        }
        out
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ")
}

/// Solves the program with tolerance `tol` and at most `max_iters` iterations.
pub fn solve(program: &ConicProgram, tol: f64, max_iters: u32) -> Solution {
    let n = program.n;
    let mut ri: Vec<usize> = Vec::new();
    let mut ci: Vec<usize> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut row = 0usize;

    let mut push_row = |e: &LinExpr, sign: f64, rhs: f64, ri: &mut Vec<usize>, ci: &mut Vec<usize>, vals: &mut Vec<f64>, b: &mut Vec<f64>| {
        for &(i, c) in &e.terms {
            ri.push(row);
            ci.push(i);
            vals.push(sign * c);
        }
        b.push(rhs);
        row += 1;
    };

    // a'x + c = 0  ->  A = a, b = -c, s in {0}
    for e in &program.eqs {
        push_row(e, 1.0, -e.constant, &mut ri, &mut ci, &mut vals, &mut b);
    }
    if !program.eqs.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(program.eqs.len()));
    }
    // a'x + c <= 0  ->  s = -c - a'x >= 0
    for e in &program.ineqs {
        push_row(e, 1.0, -e.constant, &mut ri, &mut ci, &mut vals, &mut b);
    }
    if !program.ineqs.is_empty() {
        cones.push(SupportedConeT::NonnegativeConeT(program.ineqs.len()));
    }
    // s = e(x) in SOC  ->  A = -coef, b = constant
    for cone in &program.cones {
        let rows = cone.rows();
        for e in &rows {
            push_row(e, -1.0, e.constant, &mut ri, &mut ci, &mut vals, &mut b);
        }
        cones.push(SupportedConeT::SecondOrderConeT(rows.len()));
    }
    let m = row;

    let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
    for &(i, j, v) in &program.quad {
        pi.push(i);
        pj.push(j);
        pv.push(v);
    }
    let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
    let a = CscMatrix::new_from_triplets(m, n, ri, ci, vals);

    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(max_iters)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .tol_feas(tol)
        .presolve_enable(false)
        .build()
        .expect("static solver settings are valid");

    let failure = |status| Solution {
        values: vec![0.0; n],
        duals: vec![0.0; program.dual_len()],
        status,
        objective: f64::NAN,
        kkt_residuals: KktResiduals {
            primal: f64::INFINITY,
            stationarity: f64::INFINITY,
            complementarity: f64::INFINITY,
            dual: f64::INFINITY,
        },
        iterations: 0,
    };

    let mut solver = match DefaultSolver::new(&p, &program.linear, &a, &b, &cones, settings) {
        Ok(s) => s,
        Err(_) => return failure(SolveStatus::NumericalFailure),
    };
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::MaxIters,
        _ => SolveStatus::NumericalFailure,
    };
    if matches!(status, SolveStatus::Infeasible) {
        let mut f = failure(status);
        f.iterations = sol.iterations;
        return f;
    }
    let values = sol.x.clone();
    let duals = sol.z.clone();
    let kkt = program.kkt_residuals(&values, &duals);
    let objective = program.objective(&values);
    let status = if status == SolveStatus::Optimal && sol.status == SolverStatus::AlmostSolved {
        // accept reduced accuracy only when the recomputed residuals agree
        let scale = 1.0 + b.iter().chain(&program.linear).fold(0.0_f64, |m, v| m.max(v.abs()));
        if kkt.primal.max(kkt.stationarity) <= 1e-5 * scale {
            SolveStatus::Optimal
        } else {
            SolveStatus::NumericalFailure
        }
    } else {
        status
    };
    Solution {
        values,
        duals,
        status,
        objective,
        kkt_residuals: kkt,
        iterations: sol.iterations,
    }
}

pub fn solve_default(program: &ConicProgram) -> Solution {
    solve(program, DEFAULT_TOL, DEFAULT_MAX_ITERS)
}
