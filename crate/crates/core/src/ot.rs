//! Discrete entropic optimal transport: a log-domain Sinkhorn solver and an
//! exhaustive permutation search used as its small-instance reference.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "{rows}x{cols} matrix from {} values",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Pairwise squared Euclidean distances between two point sets.
    pub fn sq_euclidean(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Matrix {
        let data = xs
            .iter()
            .flat_map(|x| {
                ys.iter()
                    .map(move |y| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
            })
            .collect();
        Matrix {
            rows: xs.len(),
            cols: ys.len(),
            data,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data
            .chunks(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.data.chunks(self.cols) {
            s.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        }
        s
    }
}

/// A joint distribution with prescribed marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCoupling {
    pub matrix: Matrix,
    pub source_marginal: Vec<f64>,
    pub target_marginal: Vec<f64>,
}

impl DiscreteCoupling {
    pub fn transport_cost(&self, cost: &Matrix) -> f64 {
        self.matrix
            .data
            .iter()
            .zip(&cost.data)
            .map(|(g, c)| g * c)
            .sum()
    }

    /// Max of the L1 row-sum and column-sum errors.
    pub fn marginal_violation(&self) -> f64 {
        let l1 = |a: Vec<f64>, b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        l1(self.matrix.row_sums(), &self.source_marginal)
            .max(l1(self.matrix.col_sums(), &self.target_marginal))
    }

    /// `−Σ γ log γ` with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .matrix
            .data
            .iter()
            .filter(|&&g| g > 0.0)
            .map(|g| g * g.ln())
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

/// Solver output: the coupling plus the marginal violation after every iteration.
#[derive(Debug, Clone)]
pub struct SinkhornRun {
    pub coupling: DiscreteCoupling,
    pub iterations: usize,
    pub violations: Vec<f64>,
}

fn check_simplex(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Contract(format!(
            "{name} has {} entries, expected {len}",
            v.len()
        )));
    }
    if v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Contract(format!("{name} must be strictly positive")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Entropic OT `min ⟨γ, C⟩ − ε H(γ)` by alternating dual updates in the log
/// domain, `γ = exp((f_i + g_j − C_ij)/ε)`.
pub fn sinkhorn(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    opts: SinkhornOptions,
) -> Result<DiscreteCoupling> {
    sinkhorn_traced(cost, a, b, opts).map(|r| r.coupling)
}

pub fn sinkhorn_traced(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    opts: SinkhornOptions,
) -> Result<SinkhornRun> {
    sinkhorn_scaled(cost, a, b, opts, opts.epsilon)
}

/// Sinkhorn with ε-scaling: solves at `start_epsilon`, then repeatedly halves ε
/// down to `opts.epsilon`, warm-starting each stage from the previous
/// potentials. Intermediate stages stop at `opts.tol` or after `opts.max_iter`
/// iterations; only the final stage reports non-convergence.
pub fn sinkhorn_scaled(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    opts: SinkhornOptions,
    start_epsilon: f64,
) -> Result<SinkhornRun> {
    let (m, n) = (cost.rows, cost.cols);
    check_simplex("source marginal", a, m)?;
    check_simplex("target marginal", b, n)?;
    if cost.data.iter().any(|c| !c.is_finite()) {
        return Err(Error::Contract("cost matrix has non-finite entries".into()));
    }
    if !(opts.epsilon > 0.0) || !(start_epsilon >= opts.epsilon) {
        return Err(Error::Contract(format!(
            "need 0 < epsilon <= start epsilon, got {} and {start_epsilon}",
            opts.epsilon
        )));
    }
    let (log_a, log_b): (Vec<f64>, Vec<f64>) = (
        a.iter().map(|v| v.ln()).collect(),
        b.iter().map(|v| v.ln()).collect(),
    );
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let plan = |f: &[f64], g: &[f64], eps: f64| -> DiscreteCoupling {
        let data = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| ((f[i] + g[j] - cost.at(i, j)) / eps).exp())
            .collect();
        DiscreteCoupling {
            matrix: Matrix {
                rows: m,
                cols: n,
                data,
            },
            source_marginal: a.to_vec(),
            target_marginal: b.to_vec(),
        }
    };
    let mut violations = Vec::new();
    let mut eps = start_epsilon;
    loop {
        let last = eps <= opts.epsilon;
        let eps_now = if last { opts.epsilon } else { eps };
        for _ in 0..opts.max_iter {
            for i in 0..m {
                let lse = log_sum_exp((0..n).map(|j| (g[j] - cost.at(i, j)) / eps_now));
                f[i] = eps_now * (log_a[i] - lse);
            }
            for j in 0..n {
                let lse = log_sum_exp((0..m).map(|i| (f[i] - cost.at(i, j)) / eps_now));
                g[j] = eps_now * (log_b[j] - lse);
            }
            let coupling = plan(&f, &g, eps_now);
            let v = coupling.marginal_violation();
            violations.push(v);
            if v < opts.tol {
                if last {
                    return Ok(SinkhornRun {
                        coupling,
                        iterations: violations.len(),
                        violations,
                    });
                }
                break;
            }
        }
        if last {
            let violation = violations.last().copied().unwrap_or(f64::INFINITY);
            return Err(Error::NotConverged {
                iterations: violations.len(),
                violation,
            });
        }
        eps = (eps * 0.5).max(opts.epsilon);
    }
}

/// Largest problem size [`brute_force_ot`] accepts.
pub const BRUTE_FORCE_MAX: usize = 8;

/// Optimal permutation coupling for uniform marginals, by enumerating all `n!` permutations.
pub fn brute_force_ot(cost: &Matrix, a: &[f64], b: &[f64]) -> Result<DiscreteCoupling> {
    let n = cost.rows;
    if cost.cols != n {
        return Err(Error::Contract(format!(
            "brute force needs a square cost, got {}x{}",
            n, cost.cols
        )));
    }
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Size(format!(
            "{n} points exceeds the enumeration limit of {BRUTE_FORCE_MAX}"
        )));
    }
    if n == 0 {
        return Err(Error::Contract("empty problem".into()));
    }
    let u = 1.0 / n as f64;
    for (name, v) in [("source", a), ("target", b)] {
        if v.len() != n || v.iter().any(|x| (x - u).abs() > 1e-12) {
            return Err(Error::Contract(format!(
                "brute force needs uniform {name} marginal"
            )));
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    let mut consider = |p: &[usize]| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(p);
        }
    };
    // Heap's algorithm, iterative form
    let mut stack = vec![0usize; n];
    consider(&perm);
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            consider(&perm);
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    let mut data = vec![0.0; n * n];
    for (i, &j) in best.iter().enumerate() {
        data[i * n + j] = u;
    }
    Ok(DiscreteCoupling {
        matrix: Matrix {
            rows: n,
            cols: n,
            data,
        },
        source_marginal: a.to_vec(),
        target_marginal: b.to_vec(),
    })
}

/// `⟨γ, C⟩ − 2τ H(γ)`.
pub fn entropic_objective(gamma: &DiscreteCoupling, cost: &Matrix, tau: f64) -> f64 {
    gamma.transport_cost(cost) - 2.0 * tau * gamma.entropy()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(epsilon: f64) -> SinkhornOptions {
        SinkhornOptions {
            epsilon,
            max_iter: 10_000,
            tol: 1e-10,
        }
    }

    #[test]
    fn single_point_coupling() {
        let c = Matrix::new(1, 1, vec![3.0]).unwrap();
        let g = sinkhorn(&c, &[1.0], &[1.0], opts(0.1)).unwrap();
        assert!((g.matrix.data[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_cost_gives_independent_coupling() {
        let c = Matrix::new(2, 2, vec![0.7; 4]).unwrap();
        let g = sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], opts(0.05)).unwrap();
        for v in &g.matrix.data {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn non_convergence_reports_violation() {
        let c = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = sinkhorn(
            &c,
            &[0.3, 0.7],
            &[0.6, 0.4],
            SinkhornOptions {
                epsilon: 0.01,
                max_iter: 1,
                tol: 0.0,
            },
        );
        assert!(
            matches!(r, Err(Error::NotConverged { iterations: 1, violation }) if violation > 0.0)
        );
    }

    #[test]
    fn brute_force_examples() {
        let c = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let g = brute_force_ot(&c, &[0.5; 2], &[0.5; 2]).unwrap();
        assert_eq!(g.matrix.data, vec![0.5, 0.0, 0.0, 0.5]);
        assert_eq!(g.transport_cost(&c), 0.0);
        let big = Matrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(
            brute_force_ot(&big, &[1.0 / 9.0; 9], &[1.0 / 9.0; 9]),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn objective_examples() {
        let c = Matrix::new(2, 2, vec![0.0; 4]).unwrap();
        let uniform = DiscreteCoupling {
            matrix: Matrix::new(2, 2, vec![0.25; 4]).unwrap(),
            source_marginal: vec![0.5; 2],
            target_marginal: vec![0.5; 2],
        };
        assert!((entropic_objective(&uniform, &c, 1.0) + 2.0 * 4f64.ln()).abs() < 1e-12);
        let c1 = Matrix::new(1, 1, vec![2.5]).unwrap();
        let point = DiscreteCoupling {
            matrix: Matrix::new(1, 1, vec![1.0]).unwrap(),
            source_marginal: vec![1.0],
            target_marginal: vec![1.0],
        };
        assert_eq!(entropic_objective(&point, &c1, 3.0), 2.5);
    }
}
