//! Exact information quantities on small discrete distributions, used to
//! check the mutual-information rewrite behind the loss and the variational
//! bound on the compression term.

use serde::{Deserialize, Serialize};

use super::ObjectiveError;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Joint probability table `p(t, s, y)`, row-major in `(t, s, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub dims: [usize; 3],
    pub p: Vec<f64>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<(), ObjectiveError> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ObjectiveError::NotNormalized(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(ObjectiveError::NotNormalized(format!(
            "{what} sums to {total}"
        )));
    }
    Ok(())
}

fn xlogy_ratio(p: f64, num: f64, den: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (num / den).ln()
    }
}

impl JointTable {
    pub fn new(dims: [usize; 3], p: Vec<f64>) -> Result<Self, ObjectiveError> {
        if dims.iter().product::<usize>() != p.len() || dims.contains(&0) {
            return Err(ObjectiveError::NotNormalized(format!(
                "table of {} entries does not match {dims:?}",
                p.len()
            )));
        }
        check_distribution(&p, "joint table")?;
        Ok(Self { dims, p })
    }

    /// `p(y) p(t|y) p(s|y)`: the conditional-independence premise holds by construction.
    pub fn conditionally_independent(
        p_y: &[f64],
        t_given_y: &[Vec<f64>],
        s_given_y: &[Vec<f64>],
    ) -> Result<Self, ObjectiveError> {
        let (nt, ns, ny) = (t_given_y[0].len(), s_given_y[0].len(), p_y.len());
        let mut p = vec![0.0; nt * ns * ny];
        for t in 0..nt {
            for s in 0..ns {
                for y in 0..ny {
                    p[(t * ns + s) * ny + y] = p_y[y] * t_given_y[y][t] * s_given_y[y][s];
                }
            }
        }
        Self::new([nt, ns, ny], p)
    }

    fn at(&self, t: usize, s: usize, y: usize) -> f64 {
        self.p[(t * self.dims[1] + s) * self.dims[2] + y]
    }

    /// Marginal over the kept axes, as a function of the full index.
    fn marginal(&self, keep: [bool; 3]) -> impl Fn(usize, usize, usize) -> f64 + '_ {
        let [nt, ns, ny] = self.dims;
        let size = |i: usize, n: usize| if keep[i] { n } else { 1 };
        let (mt, ms, my) = (size(0, nt), size(1, ns), size(2, ny));
        let mut m = vec![0.0; mt * ms * my];
        for t in 0..nt {
            for s in 0..ns {
                for y in 0..ny {
                    let idx = |i: usize, v: usize| if keep[i] { v } else { 0 };
                    m[(idx(0, t) * ms + idx(1, s)) * my + idx(2, y)] += self.at(t, s, y);
                }
            }
        }
        move |t, s, y| {
            let idx = |i: usize, v: usize| if keep[i] { v } else { 0 };
            m[(idx(0, t) * ms + idx(1, s)) * my + idx(2, y)]
        }
    }

    fn expectation(&self, f: impl Fn(usize, usize, usize, f64) -> f64) -> f64 {
        let [nt, ns, ny] = self.dims;
        let mut acc = 0.0;
        for t in 0..nt {
            for s in 0..ns {
                for y in 0..ny {
                    acc += f(t, s, y, self.at(t, s, y));
                }
            }
        }
        acc
    }

    /// Full set of quantities entering the rewrite, each from its own definition.
    pub fn report(&self) -> IdentityReport {
        let pt = self.marginal([true, false, false]);
        let ps = self.marginal([false, true, false]);
        let py = self.marginal([false, false, true]);
        let pts = self.marginal([true, true, false]);
        let pty = self.marginal([true, false, true]);
        let psy = self.marginal([false, true, true]);

        let i_ts = self.expectation(|t, s, y, p| {
            let _ = y;
            xlogy_ratio(p, pts(t, s, 0), pt(t, 0, 0) * ps(0, s, 0))
        });
        let i_ty =
            self.expectation(|t, _, y, p| xlogy_ratio(p, pty(t, 0, y), pt(t, 0, 0) * py(0, 0, y)));
        // I(t;y|s) = E log p(t,y|s) / (p(t|s) p(y|s))
        let i_ty_s = self.expectation(|t, s, y, p| {
            let ps_ = ps(0, s, 0);
            xlogy_ratio(p, p / ps_, (pts(t, s, 0) / ps_) * (psy(0, s, y) / ps_))
        });
        let i_ts_y = self.expectation(|t, s, y, p| {
            let py_ = py(0, 0, y);
            xlogy_ratio(p, p / py_, (pty(t, 0, y) / py_) * (psy(0, s, y) / py_))
        });
        // H(y|s) = -E log p(y|s); H(y|t,s) = -E log p(y|t,s)
        let h_y_s = -self.expectation(|_, s, y, p| xlogy_ratio(p, psy(0, s, y), ps(0, s, 0)));
        let h_y_ts = -self.expectation(|t, s, _, p| xlogy_ratio(p, p, pts(t, s, 0)));
        let h_t = -self.expectation(|t, _, _, p| xlogy_ratio(p, pt(t, 0, 0), 1.0));

        IdentityReport {
            i_ts,
            i_ty,
            i_ty_given_s: i_ty_s,
            i_ts_given_y: i_ts_y,
            h_y_given_s: h_y_s,
            h_y_given_ts: h_y_ts,
            h_t,
            chain_residual: i_ts - (i_ty - i_ty_s),
            entropy_residual: i_ts - (i_ty - h_y_s + h_y_ts),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub i_ts: f64,
    pub i_ty: f64,
    pub i_ty_given_s: f64,
    /// Zero exactly when `t` and `s` are independent given `y`.
    pub i_ts_given_y: f64,
    pub h_y_given_s: f64,
    pub h_y_given_ts: f64,
    pub h_t: f64,
    /// `I(t;s) - (I(t;y) - I(t;y|s))`.
    pub chain_residual: f64,
    /// `I(t;s) - (I(t;y) - H(y|s) + H(y|t,s))`.
    pub entropy_residual: f64,
}

impl IdentityReport {
    pub fn premise_holds(&self, tol: f64) -> bool {
        self.i_ts_given_y.abs() <= tol
    }

    /// The rewrite is trusted only when the premise holds and both residuals vanish.
    pub fn passes(&self, tol: f64) -> bool {
        self.premise_holds(tol)
            && self.chain_residual.abs() <= tol
            && self.entropy_residual.abs() <= tol
    }

    /// Residual is nonzero while the premise is violated.
    pub fn flagged(&self, tol: f64) -> bool {
        !self.premise_holds(tol)
    }
}

/// `E_x KL(p(t|x) || p(t))` against its variational upper bound `E_x KL(p(t|x) || q(t))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub mutual_information: f64,
    pub variational: f64,
    /// `KL(p(t) || q(t))`, which the gap must equal.
    pub marginal_kl: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.mutual_information <= self.variational + 1e-12
    }

    pub fn gap(&self) -> f64 {
        self.variational - self.mutual_information
    }
}

pub fn variational_bound(
    p_x: &[f64],
    t_given_x: &[Vec<f64>],
    q: &[f64],
) -> Result<BoundReport, ObjectiveError> {
    check_distribution(p_x, "p(x)")?;
    check_distribution(q, "q(t)")?;
    if t_given_x.len() != p_x.len() {
        return Err(ObjectiveError::NotNormalized(
            "p(t|x) needs one row per x".into(),
        ));
    }
    for row in t_given_x {
        if row.len() != q.len() {
            return Err(ObjectiveError::NotNormalized(
                "p(t|x) rows and q differ in support".into(),
            ));
        }
        check_distribution(row, "p(t|x)")?;
    }
    let nt = q.len();
    let p_t: Vec<f64> = (0..nt)
        .map(|t| p_x.iter().zip(t_given_x).map(|(px, row)| px * row[t]).sum())
        .collect();
    let kl = |p: &[f64], r: &[f64]| {
        p.iter()
            .zip(r)
            .map(|(&a, &b)| xlogy_ratio(a, a, b))
            .sum::<f64>()
    };
    let mutual_information = p_x
        .iter()
        .zip(t_given_x)
        .map(|(px, row)| px * kl(row, &p_t))
        .sum();
    let variational = p_x
        .iter()
        .zip(t_given_x)
        .map(|(px, row)| px * kl(row, q))
        .sum();
    Ok(BoundReport {
        mutual_information,
        variational,
        marginal_kl: kl(&p_t, q),
    })
}

/// Runs the rewrite identity on planted tables and the bound on random `q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySuite {
    pub tables_checked: usize,
    pub max_chain_residual: f64,
    pub max_entropy_residual: f64,
    pub violation_flagged: bool,
    pub bounds_checked: usize,
    pub bounds_hold: bool,
    pub max_gap_mismatch: f64,
    pub tight_at_marginal: bool,
}

impl IdentitySuite {
    pub fn passes(&self) -> bool {
        self.max_chain_residual < 1e-12
            && self.max_entropy_residual < 1e-12
            && self.violation_flagged
            && self.bounds_hold
            && self.max_gap_mismatch < 1e-12
            && self.tight_at_marginal
    }
}

fn random_simplex(rng: &mut crate::numerics::RngStream, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -rng.uniform().max(1e-300).ln()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Every support size in `2..=4` per variable with random conditionals, plus
/// the deterministic `t = s` table, plus `n_bounds` random variational `q`.
pub fn run_identity_suite(seed: u64, n_bounds: usize) -> Result<IdentitySuite, ObjectiveError> {
    let mut rng = crate::numerics::RngStream::new(seed);
    let mut suite = IdentitySuite {
        tables_checked: 0,
        max_chain_residual: 0.0,
        max_entropy_residual: 0.0,
        violation_flagged: false,
        bounds_checked: 0,
        bounds_hold: true,
        max_gap_mismatch: 0.0,
        tight_at_marginal: true,
    };
    for nt in 2..=4 {
        for ns in 2..=4 {
            for ny in 2..=4 {
                let p_y = random_simplex(&mut rng, ny);
                let tg: Vec<Vec<f64>> = (0..ny).map(|_| random_simplex(&mut rng, nt)).collect();
                let sg: Vec<Vec<f64>> = (0..ny).map(|_| random_simplex(&mut rng, ns)).collect();
                let r = JointTable::conditionally_independent(&p_y, &tg, &sg)?.report();
                suite.tables_checked += 1;
                suite.max_chain_residual = suite.max_chain_residual.max(r.chain_residual.abs());
                suite.max_entropy_residual =
                    suite.max_entropy_residual.max(r.entropy_residual.abs());
            }
        }
    }
    // t = s, y a noisy copy: the premise fails and must be reported.
    let copy = JointTable::new([2, 2, 2], vec![0.4, 0.1, 0.0, 0.0, 0.0, 0.0, 0.1, 0.4])?.report();
    suite.violation_flagged = copy.flagged(1e-12)
        && copy.chain_residual.abs() > 1e-6
        && (copy.i_ts - copy.h_t).abs() < 1e-12;

    for _ in 0..n_bounds {
        let (nx, nt) = (rng.below(2, 6), rng.below(2, 6));
        let p_x = random_simplex(&mut rng, nx);
        let rows: Vec<Vec<f64>> = (0..nx).map(|_| random_simplex(&mut rng, nt)).collect();
        let q = random_simplex(&mut rng, nt);
        let b = variational_bound(&p_x, &rows, &q)?;
        suite.bounds_checked += 1;
        suite.bounds_hold &= b.holds();
        suite.max_gap_mismatch = suite.max_gap_mismatch.max((b.gap() - b.marginal_kl).abs());
        let p_t: Vec<f64> = (0..nt)
            .map(|t| p_x.iter().zip(&rows).map(|(px, r)| px * r[t]).sum())
            .collect();
        let total: f64 = p_t.iter().sum();
        let p_t: Vec<f64> = p_t.into_iter().map(|v| v / total).collect();
        let tight = variational_bound(&p_x, &rows, &p_t)?;
        suite.tight_at_marginal &= tight.gap().abs() < 1e-12;
    }
    Ok(suite)
}
