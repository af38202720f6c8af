//! Constrained treatment allocation.
//!
//! Minimizes `sum_j w_j (var1_j / e_j + var0_j / (1 - e_j))` subject to
//!
//! - envy-freeness: `|e_j - e_l| <= c1` for every pair of groups,
//! - welfare: `ln(e_j / (1 - e_j)) * effect_j >= -delta`,
//! - feasibility: `c2 <= e_j <= 1 - c2`.
//!
//! The welfare constraint is one-dimensional per group and collapses to an
//! interval (see [`derive_welfare_box`]), so the feasible set is a box cut by
//! pairwise slabs. [`solve`] runs a projected gradient method scaled by the
//! (diagonal) Hessian; each projection is computed by Dykstra's alternating
//! projections onto the box and the slabs in the Hessian metric. A grid
//! search, [`grid_oracle`], is kept alongside as a reference.

use serde::{Deserialize, Serialize};

use crate::config::SolverOptions;
use crate::error::{Error, Result};

/// Constraint tolerance used when checking grid points and reporting
/// active constraints.
const FEAS_TOL: f64 = 1e-9;

/// Armijo sufficient-decrease constant.
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationProblem {
    /// Group weights (true or estimated group proportions).
    pub weights: Vec<f64>,
    pub var_treated: Vec<f64>,
    pub var_control: Vec<f64>,
    /// Group effects entering the welfare constraint; `None` leaves the group
    /// unconstrained by welfare.
    pub effects: Vec<Option<f64>>,
    /// Welfare slack; zero gives the strict sign constraint.
    #[serde(default)]
    pub delta: f64,
    pub c1: f64,
    pub c2: f64,
    /// Groups pinned at one half. Empty means none.
    #[serde(default)]
    pub fixed_half: Vec<bool>,
}

/// Per-group treatment probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AllocationVector(pub Vec<f64>);

impl AllocationVector {
    pub fn half(groups: usize) -> Self {
        AllocationVector(vec![0.5; groups])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `max_j e_j - min_j e_j`.
    pub fn spread(&self) -> f64 {
        let max = self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.0.iter().cloned().fold(f64::INFINITY, f64::min);
        if self.0.is_empty() {
            0.0
        } else {
            max - min
        }
    }
}

impl std::ops::Index<usize> for AllocationVector {
    type Output = f64;

    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub allocation: AllocationVector,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest constraint violation of `allocation`.
    pub max_violation: f64,
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64, tol: f64) -> bool {
        x >= self.lo - tol && x <= self.hi + tol
    }

    fn intersect(self, other: Interval) -> Interval {
        Interval {
            lo: self.lo.max(other.lo),
            hi: self.hi.min(other.hi),
        }
    }

    fn clamp(&self, x: f64) -> f64 {
        x.max(self.lo).min(self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActiveConstraint {
    FixedHalf {
        group: usize,
    },
    FeasibilityLower {
        group: usize,
    },
    FeasibilityUpper {
        group: usize,
    },
    WelfareLower {
        group: usize,
    },
    WelfareUpper {
        group: usize,
    },
    /// `e_high - e_low = c1`.
    Envy {
        high: usize,
        low: usize,
    },
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Neyman split `sd1 / (sd1 + sd0)`; one half when both are zero.
pub fn neyman(sd_treated: f64, sd_control: f64) -> f64 {
    let total = sd_treated + sd_control;
    if total > 0.0 {
        sd_treated / total
    } else {
        0.5
    }
}

/// The welfare constraint `ln(e / (1 - e)) * effect >= -delta` rewritten as
/// an interval for `e`, then intersected with `[c2, 1 - c2]`.
pub fn derive_welfare_box(effect: Option<f64>, delta: f64, c2: f64) -> Interval {
    let welfare = match effect {
        Some(t) if t > 0.0 => Interval {
            lo: logistic(-delta / t),
            hi: 1.0,
        },
        Some(t) if t < 0.0 => Interval {
            lo: 0.0,
            hi: logistic(-delta / t),
        },
        _ => Interval { lo: 0.0, hi: 1.0 },
    };
    welfare.intersect(Interval {
        lo: c2,
        hi: 1.0 - c2,
    })
}

/// `v / x`, with a zero variance contributing nothing even at `x = 0`.
fn inverse_term(variance: f64, x: f64) -> f64 {
    if variance == 0.0 {
        0.0
    } else if x <= 0.0 {
        f64::INFINITY
    } else {
        variance / x
    }
}

impl AllocationProblem {
    pub fn groups(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.groups();
        if m == 0 {
            return Err(Error::InvalidProblem(
                "at least one group is required".into(),
            ));
        }
        let lens = [
            self.var_treated.len(),
            self.var_control.len(),
            self.effects.len(),
        ];
        if lens.iter().any(|&l| l != m)
            || !(self.fixed_half.is_empty() || self.fixed_half.len() == m)
        {
            return Err(Error::InvalidProblem(
                "per-group vectors must all have the same length".into(),
            ));
        }
        let all_finite = self
            .weights
            .iter()
            .chain(&self.var_treated)
            .chain(&self.var_control)
            .chain(self.effects.iter().flatten())
            .chain([&self.delta, &self.c1, &self.c2])
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("allocation problem"));
        }
        if self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidProblem("weights must be nonnegative".into()));
        }
        if self
            .var_treated
            .iter()
            .chain(&self.var_control)
            .any(|&v| v < 0.0)
        {
            return Err(Error::InvalidProblem(
                "variances must be nonnegative".into(),
            ));
        }
        if self.delta < 0.0 {
            return Err(Error::InvalidProblem("delta must be nonnegative".into()));
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::InvalidProblem("c1 must lie in (0,1)".into()));
        }
        if !(self.c2 > 0.0 && self.c2 < 0.5) {
            return Err(Error::InvalidProblem("c2 must lie in (0, 1/2)".into()));
        }
        Ok(())
    }

    /// Pinned at one half: flagged, or the objective does not depend on `e_j`.
    pub fn is_fixed(&self, j: usize) -> bool {
        self.fixed_half.get(j).copied().unwrap_or(false)
            || self.weights[j] == 0.0
            || (self.var_treated[j] == 0.0 && self.var_control[j] == 0.0)
    }

    /// Welfare-and-feasibility interval of group `j` (the point 1/2 when fixed).
    pub fn group_box(&self, j: usize) -> Interval {
        if self.is_fixed(j) {
            Interval { lo: 0.5, hi: 0.5 }
        } else {
            derive_welfare_box(self.effects[j], self.delta, self.c2)
        }
    }

    pub fn objective(&self, e: &[f64]) -> f64 {
        (0..self.groups())
            .filter(|&j| self.weights[j] > 0.0)
            .map(|j| self.group_objective(j, e[j]))
            .sum()
    }

    fn group_objective(&self, j: usize, e: f64) -> f64 {
        self.weights[j]
            * (inverse_term(self.var_treated[j], e) + inverse_term(self.var_control[j], 1.0 - e))
    }

    fn gradient(&self, j: usize, e: f64) -> f64 {
        let f = 1.0 - e;
        self.weights[j] * (-self.var_treated[j] / (e * e) + self.var_control[j] / (f * f))
    }

    fn curvature(&self, j: usize, e: f64) -> f64 {
        let f = 1.0 - e;
        2.0 * self.weights[j]
            * (self.var_treated[j] / (e * e * e) + self.var_control[j] / (f * f * f))
    }

    /// Largest violation of any constraint by `e` (zero when feasible).
    pub fn max_violation(&self, e: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, &ej) in e.iter().enumerate() {
            let b = self.group_box(j);
            worst = worst.max(b.lo - ej).max(ej - b.hi);
        }
        for j in 0..e.len() {
            for l in (j + 1)..e.len() {
                worst = worst.max((e[j] - e[l]).abs() - self.c1);
            }
        }
        worst
    }

    pub fn active_constraints(&self, e: &[f64], tol: f64) -> Vec<ActiveConstraint> {
        let mut out = Vec::new();
        for (j, &ej) in e.iter().enumerate() {
            if self.is_fixed(j) {
                out.push(ActiveConstraint::FixedHalf { group: j });
                continue;
            }
            let b = self.group_box(j);
            if (ej - b.lo).abs() <= tol {
                if b.lo > self.c2 {
                    out.push(ActiveConstraint::WelfareLower { group: j });
                } else {
                    out.push(ActiveConstraint::FeasibilityLower { group: j });
                }
            }
            if (ej - b.hi).abs() <= tol {
                if b.hi < 1.0 - self.c2 {
                    out.push(ActiveConstraint::WelfareUpper { group: j });
                } else {
                    out.push(ActiveConstraint::FeasibilityUpper { group: j });
                }
            }
        }
        for j in 0..e.len() {
            for l in 0..e.len() {
                if j != l && e[j] - e[l] >= self.c1 - tol {
                    out.push(ActiveConstraint::Envy { high: j, low: l });
                }
            }
        }
        out
    }
}

/// Solves the allocation program to `opts.tol`.
///
/// Never fails on a valid problem: the all-one-half vector is always
/// feasible and is the starting point. When the iteration cap is hit, the
/// best iterate is returned with `converged = false`.
pub fn solve(problem: &AllocationProblem, opts: &SolverOptions) -> Result<Solution> {
    problem.validate()?;
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return Err(Error::InvalidProblem(
            "solver tolerance must be positive".into(),
        ));
    }
    let m = problem.groups();
    let active: Vec<usize> = (0..m).filter(|&j| !problem.is_fixed(j)).collect();
    let any_fixed = active.len() < m;

    // Pinned groups act as constants in the envy constraint, which for the
    // remaining groups reduces to |e_j - 1/2| <= c1.
    let boxes: Vec<Interval> = active
        .iter()
        .map(|&j| {
            let b = problem.group_box(j);
            if any_fixed {
                b.intersect(Interval {
                    lo: 0.5 - problem.c1,
                    hi: 0.5 + problem.c1,
                })
            } else {
                b
            }
        })
        .collect();
    let projector = Projector {
        boxes: &boxes,
        c1: problem.c1,
        max_cycles: opts.projection_max_cycles,
    };

    let sub_objective = |x: &[f64]| -> f64 {
        active
            .iter()
            .zip(x)
            .map(|(&j, &xj)| problem.group_objective(j, xj))
            .sum()
    };

    let mut x = vec![0.5; active.len()];
    let mut iterations = 0;
    let mut converged = active.is_empty();
    let mut grad = vec![0.0; active.len()];
    let mut metric = vec![0.0; active.len()];
    let mut target = vec![0.0; active.len()];
    let mut candidate = vec![0.0; active.len()];

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        for (k, &j) in active.iter().enumerate() {
            grad[k] = problem.gradient(j, x[k]);
            metric[k] = problem.curvature(j, x[k]);
            target[k] = x[k] - grad[k] / metric[k];
        }
        let z = projector.project(&target, &metric);
        let step: Vec<f64> = z.iter().zip(&x).map(|(zi, xi)| zi - xi).collect();
        let step_norm = sup_norm(&step);
        if step_norm <= opts.tol {
            converged = true;
            break;
        }

        let f0 = sub_objective(&x);
        let slope: f64 = grad.iter().zip(&step).map(|(g, d)| g * d).sum();
        let mut t = 1.0;
        let accepted = loop {
            for k in 0..x.len() {
                candidate[k] = x[k] + t * step[k];
            }
            if sub_objective(&candidate) <= f0 + ARMIJO * t * slope {
                break true;
            }
            t *= 0.5;
            if t < 1e-12 {
                break false;
            }
        };
        if !accepted {
            // No representable decrease left along the step.
            converged = step_norm <= 1e-7;
            break;
        }
        std::mem::swap(&mut x, &mut candidate);
        if t * step_norm <= opts.tol {
            converged = true;
        }
    }

    let mut e = vec![0.5; m];
    for (k, &j) in active.iter().enumerate() {
        e[j] = boxes[k].clamp(x[k]);
    }
    Ok(Solution {
        objective: problem.objective(&e),
        max_violation: problem.max_violation(&e),
        allocation: AllocationVector(e),
        iterations,
        converged,
    })
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

/// Dykstra's alternating projections onto `{x in box} ∩ {|x_j - x_l| <= c1}`
/// in the metric `sum_k h_k (x_k - y_k)^2`.
struct Projector<'a> {
    boxes: &'a [Interval],
    c1: f64,
    max_cycles: usize,
}

impl Projector<'_> {
    fn project(&self, y: &[f64], metric: &[f64]) -> Vec<f64> {
        let n = y.len();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|j| ((j + 1)..n).map(move |l| (j, l)))
            .collect();
        let mut x = y.to_vec();
        if pairs.is_empty() {
            self.project_box(&mut x);
            return x;
        }
        // One correction vector per constraint set; the box goes last so the
        // returned point always lies in it.
        let mut slab_corr = vec![(0.0, 0.0); pairs.len()];
        let mut box_corr = vec![0.0; n];
        let mut prev = x.clone();
        for _ in 0..self.max_cycles {
            // The iterate can stall for a cycle while the corrections are
            // still moving, so both must settle before stopping.
            let mut corr_change: f64 = 0.0;
            for (p, &(j, l)) in pairs.iter().enumerate() {
                let (cj, cl) = slab_corr[p];
                let (zj, zl) = (x[j] + cj, x[l] + cl);
                let (pj, pl) = self.project_slab(zj, zl, metric[j], metric[l]);
                let next = (zj - pj, zl - pl);
                corr_change = corr_change
                    .max((next.0 - cj).abs())
                    .max((next.1 - cl).abs());
                slab_corr[p] = next;
                x[j] = pj;
                x[l] = pl;
            }
            for k in 0..n {
                let z = x[k] + box_corr[k];
                let p = self.boxes[k].clamp(z);
                corr_change = corr_change.max((z - p - box_corr[k]).abs());
                box_corr[k] = z - p;
                x[k] = p;
            }
            let moved = x
                .iter()
                .zip(&prev)
                .fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs()));
            if moved <= 1e-15 && corr_change <= 1e-14 && self.slab_violation(&x) <= 1e-13 {
                break;
            }
            prev.copy_from_slice(&x);
        }
        x
    }

    fn project_box(&self, x: &mut [f64]) {
        for (xk, b) in x.iter_mut().zip(self.boxes) {
            *xk = b.clamp(*xk);
        }
    }

    /// Metric projection of `(a, b)` onto `|a - b| <= c1`.
    fn project_slab(&self, a: f64, b: f64, ha: f64, hb: f64) -> (f64, f64) {
        let gap = a - b;
        let excess = if gap > self.c1 {
            gap - self.c1
        } else if gap < -self.c1 {
            gap + self.c1
        } else {
            return (a, b);
        };
        let lambda = excess / (1.0 / ha + 1.0 / hb);
        (a - lambda / ha, b + lambda / hb)
    }

    fn slab_violation(&self, x: &[f64]) -> f64 {
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
        (max - min - self.c1).max(0.0)
    }
}

/// Exhaustive search over `{c2, c2 + step, ..., 1 - c2}^m` (pinned groups
/// only take 1/2), keeping points that satisfy every constraint to within
/// `1e-9`. Returns the feasible grid point with the smallest objective.
///
/// Cost is roughly `(1/step)^(m-1)`: the last coordinate is resolved with a
/// range-minimum table instead of a loop. Intended for `m <= 3`.
pub fn grid_oracle(problem: &AllocationProblem, step: f64) -> Result<AllocationVector> {
    problem.validate()?;
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidProblem("grid step must be positive".into()));
    }
    let m = problem.groups();
    let c2 = problem.c2;
    let count = ((1.0 - 2.0 * c2) / step + 1e-9).floor() as usize + 1;
    let full: Vec<f64> = (0..count).map(|k| c2 + k as f64 * step).collect();

    // Candidate values and their objective contribution, per group.
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut costs: Vec<Vec<f64>> = Vec::with_capacity(m);
    for j in 0..m {
        let vals: Vec<f64> = if problem.is_fixed(j) {
            vec![0.5]
        } else {
            let b = problem.group_box(j);
            full.iter()
                .copied()
                .filter(|&v| b.contains(v, FEAS_TOL))
                .collect()
        };
        costs.push(
            vals.iter()
                .map(|&v| {
                    if problem.weights[j] > 0.0 {
                        problem.group_objective(j, v)
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        values.push(vals);
    }

    let last = m - 1;
    let table = RangeMin::new(&costs[last]);
    let mut search = GridSearch {
        values: &values,
        costs: &costs,
        table: &table,
        c1: problem.c1,
        current: vec![0; m],
        best: None,
    };
    search.descend(0, 0.0, f64::INFINITY, f64::NEG_INFINITY);
    let (_, idx) = search
        .best
        .expect("the grid point nearest one half is always feasible");
    Ok(AllocationVector(
        idx.iter().enumerate().map(|(j, &k)| values[j][k]).collect(),
    ))
}

struct GridSearch<'a> {
    values: &'a [Vec<f64>],
    costs: &'a [Vec<f64>],
    table: &'a RangeMin,
    c1: f64,
    current: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
}

impl GridSearch<'_> {
    fn descend(&mut self, j: usize, partial: f64, min: f64, max: f64) {
        let last = self.values.len() - 1;
        if j == last {
            // Remaining coordinate must sit within c1 of every chosen value.
            let vals = &self.values[last];
            let lo = max - self.c1 - FEAS_TOL;
            let hi = min + self.c1 + FEAS_TOL;
            let a = vals.partition_point(|&v| v < lo);
            let b = vals.partition_point(|&v| v <= hi);
            if a >= b {
                return;
            }
            let k = self.table.argmin(a, b);
            let total = partial + self.costs[last][k];
            self.current[last] = k;
            if self.best.as_ref().is_none_or(|(f, _)| total < *f) {
                self.best = Some((total, self.current.clone()));
            }
            return;
        }
        for k in 0..self.values[j].len() {
            let v = self.values[j][k];
            let (lo, hi) = (min.min(v), max.max(v));
            if hi - lo > self.c1 + FEAS_TOL {
                continue;
            }
            self.current[j] = k;
            self.descend(j + 1, partial + self.costs[j][k], lo, hi);
        }
    }
}

/// Sparse table answering "index of the smallest value in `[a, b)`",
/// preferring the lowest index on ties.
struct RangeMin {
    values: Vec<f64>,
    levels: Vec<Vec<usize>>,
}

impl RangeMin {
    fn new(values: &[f64]) -> Self {
        let n = values.len();
        let mut levels = vec![(0..n).collect::<Vec<_>>()];
        let mut width = 1;
        while 2 * width <= n {
            let prev = levels.last().unwrap();
            let next: Vec<usize> = (0..=n - 2 * width)
                .map(|i| Self::pick(values, prev[i], prev[i + width]))
                .collect();
            levels.push(next);
            width *= 2;
        }
        RangeMin {
            values: values.to_vec(),
            levels,
        }
    }

    fn pick(values: &[f64], a: usize, b: usize) -> usize {
        if values[b] < values[a] || (values[b] == values[a] && b < a) {
            b
        } else {
            a
        }
    }

    fn argmin(&self, a: usize, b: usize) -> usize {
        let len = b - a;
        let level = (usize::BITS - 1 - len.leading_zeros()) as usize;
        let width = 1 << level;
        Self::pick(
            &self.values,
            self.levels[level][a],
            self.levels[level][b - width],
        )
    }
}
