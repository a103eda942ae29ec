//! Per-interval DER dispatch.
//!
//! The loss-aware problem picks the regulation vector `z` minimising
//! `Λ̂ᵀΔP + (ρ/2)‖z‖²` subject to the linearised feeder-head balance
//! `(Λ̂ − 1)ᵀΔP = (P^{t0} − r) − P^t_prev` and the DER boxes, where
//! `ΔP = z + c` is affine in `z`. With a single equality constraint and a
//! separable objective, the dual is one-dimensional: for a multiplier `λ`,
//! `zᵢ(λ) = clip((λ aᵢ − Λ̂ᵢ)/ρ, lowerᵢ, upperᵢ)` with `a = Λ̂ − 1`, and
//! `aᵀz(λ)` is nondecreasing in `λ`.
//!
//! The participation-factor allocator ignores losses and serves as the
//! baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RHO: f64 = 1.0;
pub const DEFAULT_TOL: f64 = 1e-10;
const INITIAL_BRACKET: f64 = 1e3;
const MAX_BISECTIONS: usize = 400;

/// Everything known at the start of interval `k`. Vectors have one entry
/// per non-slack bus; powers are per-unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdcpInput {
    /// Loss-factor estimate from the previous interval.
    pub lambda_hat: Vec<f64>,
    pub p_g0_now: Vec<f64>,
    pub p_g0_prev: Vec<f64>,
    pub p_d_now: Vec<f64>,
    pub p_d_prev: Vec<f64>,
    /// Nominal loads for this interval (used only by the baseline).
    pub p_d0_now: Vec<f64>,
    /// Regulation power dispatched in the previous interval.
    pub p_g_prev: Vec<f64>,
    pub p_t_prev: f64,
    pub p_t0_now: f64,
    pub r: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rho: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdcpStatus {
    Optimal,
    /// The balance could not be met inside the boxes; `z` is the closest
    /// achievable point.
    ClampedInfeasible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdcpSolution {
    pub z: Vec<f64>,
    /// Multiplier of the balance constraint.
    pub multiplier: f64,
    pub status: OdcpStatus,
    /// Right-hand side `(P^{t0} − r) − P^t_prev` the balance asked for.
    pub target_rhs: f64,
    /// `(Λ̂ − 1)ᵀΔP` actually attained by `z`.
    pub achieved_rhs: f64,
    pub objective: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdcpError {
    #[error("`{field}` has length {got}, expected {expected}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("`{0}` contains a non-finite value")]
    NonFinite(&'static str),
    #[error("bounds at position {0} do not satisfy lower <= 0 <= upper")]
    BadBounds(usize),
    #[error("rho must be non-negative, got {0}")]
    BadRho(f64),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("participation factors invalid: {0}")]
    BadParticipation(String),
}

impl OdcpInput {
    pub fn n(&self) -> usize {
        self.lambda_hat.len()
    }

    /// Coefficients of the balance constraint, `Λ̂ − 1`.
    pub fn coefficients(&self) -> Vec<f64> {
        self.lambda_hat.iter().map(|l| l - 1.0).collect()
    }

    /// The part of `ΔP` that does not depend on `z`.
    pub fn offset(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                (self.p_g0_now[i] - self.p_d_now[i])
                    - (self.p_g0_prev[i] + self.p_g_prev[i] - self.p_d_prev[i])
            })
            .collect()
    }

    pub fn target_rhs(&self) -> f64 {
        (self.p_t0_now - self.r) - self.p_t_prev
    }

    /// Required value of `aᵀz` once the fixed part of `ΔP` is moved across.
    pub fn required_az(&self) -> f64 {
        let a = self.coefficients();
        self.target_rhs() - dot(&a, &self.offset())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let c = self.offset();
        let lin: f64 = (0..self.n())
            .map(|i| self.lambda_hat[i] * (z[i] + c[i]))
            .sum();
        lin + 0.5 * self.rho * dot(z, z)
    }

    fn validate(&self) -> Result<(), OdcpError> {
        let n = self.n();
        let fields: [(&'static str, &Vec<f64>); 9] = [
            ("lambda_hat", &self.lambda_hat),
            ("p_g0_now", &self.p_g0_now),
            ("p_g0_prev", &self.p_g0_prev),
            ("p_d_now", &self.p_d_now),
            ("p_d_prev", &self.p_d_prev),
            ("p_d0_now", &self.p_d0_now),
            ("p_g_prev", &self.p_g_prev),
            ("lower", &self.lower),
            ("upper", &self.upper),
        ];
        for (field, v) in fields {
            if v.len() != n {
                return Err(OdcpError::DimensionMismatch {
                    field,
                    expected: n,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(OdcpError::NonFinite(field));
            }
        }
        for (field, x) in [
            ("p_t_prev", self.p_t_prev),
            ("p_t0_now", self.p_t0_now),
            ("r", self.r),
            ("rho", self.rho),
        ] {
            if !x.is_finite() {
                return Err(OdcpError::NonFinite(field));
            }
        }
        if self.rho < 0.0 {
            return Err(OdcpError::BadRho(self.rho));
        }
        if let Some(i) = (0..n).find(|&i| !(self.lower[i] <= 0.0 && 0.0 <= self.upper[i])) {
            return Err(OdcpError::BadBounds(i));
        }
        Ok(())
    }

    fn solution(&self, z: Vec<f64>, multiplier: f64, status: OdcpStatus) -> OdcpSolution {
        let a = self.coefficients();
        let c = self.offset();
        let achieved_rhs = (0..self.n()).map(|i| a[i] * (z[i] + c[i])).sum();
        OdcpSolution {
            objective: self.objective(&z),
            target_rhs: self.target_rhs(),
            achieved_rhs,
            multiplier,
            status,
            z,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Interval of `aᵀz` values reachable inside the boxes.
pub fn feasible_range(input: &OdcpInput) -> (f64, f64) {
    let a = input.coefficients();
    range_of(&a, &input.lower, &input.upper)
}

fn range_of(a: &[f64], lower: &[f64], upper: &[f64]) -> (f64, f64) {
    let mut lo = 0.0;
    let mut hi = 0.0;
    for i in 0..a.len() {
        let (x, y) = (a[i] * lower[i], a[i] * upper[i]);
        lo += x.min(y);
        hi += x.max(y);
    }
    (lo, hi)
}

/// Separable box QP `min Σ linᵢ zᵢ + (ρ/2) zᵢ²` s.t. `aᵀz = target`, `ρ > 0`,
/// with `target` inside the reachable range.
struct DualProblem<'a> {
    lin: &'a [f64],
    a: &'a [f64],
    lower: &'a [f64],
    upper: &'a [f64],
    rho: f64,
}

impl DualProblem<'_> {
    fn z_at(&self, lambda: f64) -> Vec<f64> {
        (0..self.a.len())
            .map(|i| ((lambda * self.a[i] - self.lin[i]) / self.rho).clamp(self.lower[i], self.upper[i]))
            .collect()
    }

    fn image(&self, lambda: f64) -> f64 {
        dot(self.a, &self.z_at(lambda))
    }

    /// Multiplier at which the linear piece of `aᵀz(λ)` around `lambda`
    /// meets `target`, if that piece has positive slope.
    fn segment_root(&self, lambda: f64, target: f64) -> Option<f64> {
        let mut clipped = 0.0;
        let mut slope = 0.0;
        let mut shift = 0.0;
        for i in 0..self.a.len() {
            let free = (lambda * self.a[i] - self.lin[i]) / self.rho;
            if free <= self.lower[i] {
                clipped += self.a[i] * self.lower[i];
            } else if free >= self.upper[i] {
                clipped += self.a[i] * self.upper[i];
            } else {
                slope += self.a[i] * self.a[i];
                shift += self.a[i] * self.lin[i];
            }
        }
        (slope > 0.0).then(|| (self.rho * (target - clipped) + shift) / slope)
    }

    /// Bisection on the monotone dual map, finished in closed form once the
    /// bracket sits on a single linear piece.
    fn solve(&self, target: f64, tol: f64) -> (Vec<f64>, f64) {
        let scale = self
            .lin
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max)
            / self.a.iter().map(|x| x.abs()).filter(|x| *x > 0.0).fold(f64::INFINITY, f64::min);
        let b = if scale.is_finite() { INITIAL_BRACKET + scale } else { INITIAL_BRACKET };
        let (mut lo, mut hi) = (-b, b);
        while self.image(lo) > target {
            lo *= 2.0;
        }
        while self.image(hi) < target {
            hi *= 2.0;
        }

        let mut best = (0.5 * (lo + hi), f64::INFINITY);
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if let Some(root) = self.segment_root(mid, target) {
                if root.is_finite() {
                    let resid = (self.image(root) - target).abs();
                    if resid < best.1 {
                        best = (root, resid);
                    }
                    if resid <= tol {
                        break;
                    }
                }
            }
            let g = self.image(mid);
            let resid = (g - target).abs();
            if resid < best.1 {
                best = (mid, resid);
            }
            if resid <= tol * 1e-3 || hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
                break;
            }
            if g < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (self.z_at(best.0), best.0)
    }
}

/// Solves the loss-aware dispatch problem.
///
/// `rho = 0` reduces the problem to a linear program; among its minimisers
/// the one of least Euclidean norm is returned.
pub fn solve_odcp(input: &OdcpInput, tol: f64) -> Result<OdcpSolution, OdcpError> {
    input.validate()?;
    if !(tol > 0.0) {
        return Err(OdcpError::BadTolerance(tol));
    }
    let a = input.coefficients();
    let target = input.required_az();
    let (lo, hi) = range_of(&a, &input.lower, &input.upper);

    if target > hi + tol || target < lo - tol {
        let up = target > hi;
        let z = endpoint(input, &a, up);
        let multiplier = saturation_multiplier(input, &a, up);
        return Ok(input.solution(z, multiplier, OdcpStatus::ClampedInfeasible));
    }
    let target = target.clamp(lo, hi);

    let (z, multiplier) = if input.rho > 0.0 {
        DualProblem {
            lin: &input.lambda_hat,
            a: &a,
            lower: &input.lower,
            upper: &input.upper,
            rho: input.rho,
        }
        .solve(target, tol)
    } else {
        solve_linear_min_norm(input, &a, target, tol)
    };
    Ok(input.solution(z, multiplier, OdcpStatus::Optimal))
}

/// Limit point of `z(λ)` as `λ → ±∞`.
fn endpoint(input: &OdcpInput, a: &[f64], up: bool) -> Vec<f64> {
    (0..a.len())
        .map(|i| {
            let (l, u) = (input.lower[i], input.upper[i]);
            if a[i] > 0.0 {
                if up { u } else { l }
            } else if a[i] < 0.0 {
                if up { l } else { u }
            } else {
                unconstrained_coordinate(input, i)
            }
        })
        .collect()
}

/// Minimiser of `Λ̂ᵢ zᵢ + (ρ/2) zᵢ²` over the box, used where `aᵢ = 0`.
fn unconstrained_coordinate(input: &OdcpInput, i: usize) -> f64 {
    let (l, u, lam) = (input.lower[i], input.upper[i], input.lambda_hat[i]);
    if input.rho > 0.0 {
        (-lam / input.rho).clamp(l, u)
    } else if lam > 0.0 {
        l
    } else if lam < 0.0 {
        u
    } else {
        0.0
    }
}

/// Smallest |λ| beyond which `z(λ)` no longer changes, on the requested side.
fn saturation_multiplier(input: &OdcpInput, a: &[f64], up: bool) -> f64 {
    let mut m: Option<f64> = None;
    for i in 0..a.len() {
        if a[i] == 0.0 {
            continue;
        }
        let edge = if (a[i] > 0.0) == up { input.upper[i] } else { input.lower[i] };
        let lam = (input.rho * edge + input.lambda_hat[i]) / a[i];
        m = Some(match m {
            None => lam,
            Some(x) if up => x.max(lam),
            Some(x) => x.min(lam),
        });
    }
    m.unwrap_or(0.0)
}

/// `rho = 0`: sweep the breakpoints `Λ̂ᵢ/aᵢ` of the piecewise-constant dual
/// map and split the required amount within the tied group by least norm.
fn solve_linear_min_norm(input: &OdcpInput, a: &[f64], target: f64, tol: f64) -> (Vec<f64>, f64) {
    let n = a.len();
    let mut z: Vec<f64> = endpoint(input, a, false);
    let mut order: Vec<usize> = (0..n).filter(|&i| a[i] != 0.0).collect();
    let bp = |i: usize| input.lambda_hat[i] / a[i];
    order.sort_by(|&i, &j| bp(i).total_cmp(&bp(j)));

    let mut current = dot(a, &z);
    let mut k = 0;
    let mut last_bp = order.first().map(|&i| bp(i)).unwrap_or(0.0);
    while k < order.len() {
        let b0 = bp(order[k]);
        let mut end = k;
        while end < order.len() && (bp(order[end]) - b0).abs() <= 1e-12 * b0.abs().max(1.0) {
            end += 1;
        }
        let group = &order[k..end];
        let right = |i: usize| if a[i] > 0.0 { input.upper[i] } else { input.lower[i] };
        let gain: f64 = group.iter().map(|&i| a[i] * (right(i) - z[i])).sum();
        last_bp = b0;
        if current + gain >= target - tol {
            let fixed = current - group.iter().map(|&i| a[i] * z[i]).sum::<f64>();
            let ga: Vec<f64> = group.iter().map(|&i| a[i]).collect();
            let gl: Vec<f64> = group.iter().map(|&i| input.lower[i]).collect();
            let gu: Vec<f64> = group.iter().map(|&i| input.upper[i]).collect();
            let zeros = vec![0.0; group.len()];
            let sub_target = (target - fixed).clamp(
                range_of(&ga, &gl, &gu).0,
                range_of(&ga, &gl, &gu).1,
            );
            let (gz, _) = DualProblem {
                lin: &zeros,
                a: &ga,
                lower: &gl,
                upper: &gu,
                rho: 1.0,
            }
            .solve(sub_target, tol);
            for (pos, &i) in group.iter().enumerate() {
                z[i] = gz[pos];
            }
            return (z, b0);
        }
        for &i in group {
            z[i] = right(i);
        }
        current += gain;
        k = end;
    }
    (z, last_bp)
}

/// Lossless participation-factor allocation: the request plus the load
/// deviation from nominal is split in fixed shares and clipped to the boxes.
pub fn pf_allocate(input: &OdcpInput, pf: &[f64]) -> Result<OdcpSolution, OdcpError> {
    input.validate()?;
    let n = input.n();
    if pf.len() != n {
        return Err(OdcpError::DimensionMismatch {
            field: "pf",
            expected: n,
            got: pf.len(),
        });
    }
    if pf.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(OdcpError::BadParticipation("factors must be finite and non-negative".into()));
    }
    let sum: f64 = pf.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(OdcpError::BadParticipation(format!("factors sum to {sum}, not 1")));
    }
    if let Some(i) = (0..n).find(|&i| pf[i] > 0.0 && input.lower[i] == 0.0 && input.upper[i] == 0.0) {
        return Err(OdcpError::BadParticipation(format!("position {i} has no DER")));
    }
    let load_dev: f64 = (0..n).map(|i| input.p_d_now[i] - input.p_d0_now[i]).sum();
    let total = input.r + load_dev;
    let mut clipped = false;
    let z = (0..n)
        .map(|i| {
            let raw = pf[i] * total;
            let c = raw.clamp(input.lower[i], input.upper[i]);
            clipped |= c != raw;
            c
        })
        .collect();
    let status = if clipped {
        OdcpStatus::ClampedInfeasible
    } else {
        OdcpStatus::Optimal
    };
    Ok(input.solution(z, 0.0, status))
}

/// Participation factors proportional to each DER's upward regulation
/// capacity, spread over `n` positions.
pub fn capacity_participation(upper: &[f64]) -> Vec<f64> {
    let total: f64 = upper.iter().sum();
    if total <= 0.0 {
        return vec![0.0; upper.len()];
    }
    upper.iter().map(|u| u / total).collect()
}
