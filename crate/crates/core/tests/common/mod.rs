//! Independent reference implementations used by the integration and
//! acceptance tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use derflow::network::{parse_network, BusKind, NetworkModel};
use derflow::odcp::{OdcpInput, OdcpSolution};
use derflow::powerflow::InjectionSet;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Slack at 1.0 p.u., branch 0.01 + j0.01 p.u., load 0.1 + j0.05 p.u.
pub fn two_bus() -> NetworkModel {
    parse_network(
        "Sbase_kVA = 1000\nVbase_kV = 10\n[buses]\nid,kind,Pd_kW,Qd_kvar,Vset_pu\n\
         0,slack,0,0,1.0\n1,pq,100,50,\n[branches]\nfrom,to,R_ohm,X_ohm\n0,1,1,1\n[ders]\n",
    )
    .unwrap()
}

pub struct SweepSolution {
    pub v: Vec<Complex64>,
    pub p_t: f64,
    pub losses: f64,
    pub iterations: usize,
}

/// Backward/forward sweep for a radial feeder with PQ buses only.
pub fn backward_forward_sweep(model: &NetworkModel, inj: &InjectionSet) -> SweepSolution {
    assert!(
        model.buses.iter().all(|b| b.kind != BusKind::Pv),
        "sweep oracle handles PQ buses only"
    );
    let nb = model.n() + 1;
    let mut adj: Vec<Vec<(usize, Complex64, usize)>> = vec![Vec::new(); nb];
    for (k, br) in model.branches.iter().enumerate() {
        let z = Complex64::new(br.r, br.x);
        adj[br.from.0].push((br.to.0, z, k));
        adj[br.to.0].push((br.from.0, z, k));
    }
    // Breadth-first order from the slack, with each bus's parent branch.
    let mut order = Vec::with_capacity(nb);
    let mut parent: Vec<Option<(usize, Complex64)>> = vec![None; nb];
    let mut seen = vec![false; nb];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &(w, z, _) in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                parent[w] = Some((u, z));
                queue.push_back(w);
            }
        }
    }
    assert_eq!(order.len(), nb, "feeder must be connected");

    let v0 = Complex64::new(model.slack_voltage(), 0.0);
    let s: Vec<Complex64> = (0..nb)
        .map(|i| {
            if i == 0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(inj.p[i - 1], inj.q[i - 1])
            }
        })
        .collect();
    let mut v = vec![v0; nb];
    let mut branch_i = vec![Complex64::new(0.0, 0.0); nb];
    let mut iterations = 0;
    for it in 0..500 {
        iterations = it + 1;
        // Backward: current drawn below each bus.
        for i in 0..nb {
            branch_i[i] = -(s[i] / v[i]).conj();
        }
        for &u in order.iter().rev() {
            if let Some((p, _)) = parent[u] {
                let c = branch_i[u];
                branch_i[p] += c;
            }
        }
        // Forward: voltages from the slack down.
        let mut delta: f64 = 0.0;
        for &u in &order {
            if let Some((p, z)) = parent[u] {
                let nv = v[p] - z * branch_i[u];
                delta = delta.max((nv - v[u]).norm());
                v[u] = nv;
            }
        }
        if delta < 1e-14 {
            break;
        }
    }
    let mut losses = 0.0;
    for u in 1..nb {
        let (_, z) = parent[u].unwrap();
        losses += z.re * branch_i[u].norm_sqr();
    }
    let p_t = (v[0] * branch_i[0].conj()).re;
    SweepSolution {
        v,
        p_t,
        losses,
        iterations,
    }
}

/// Receiving-end voltage magnitude squared of a single line feeding a
/// constant-power load `p + jq` from a source of magnitude `v0`, the
/// high-voltage root of `V⁴ + (2(pR+qX) − V0²)V² + (p²+q²)|z|² = 0`.
/// Generic over complex arguments so it can be differentiated by complex
/// step.
pub fn two_bus_v2(p: Complex64, q: Complex64, r: f64, x: f64, v0: f64) -> Complex64 {
    let b = Complex64::new(v0 * v0, 0.0) - (p * r + q * x) * 2.0;
    let c = (p * p + q * q) * (r * r + x * x);
    (b + (b * b - c * 4.0).sqrt()) / 2.0
}

/// Line losses `R (p² + q²) / V²` of the same circuit.
pub fn two_bus_losses(p: Complex64, q: Complex64, r: f64, x: f64, v0: f64) -> Complex64 {
    (p * p + q * q) * r / two_bus_v2(p, q, r, x, v0)
}

/// Complex-step derivatives of the 2-bus losses with respect to the net
/// injections (`P = −p_load`, `Q = −q_load`).
pub fn two_bus_loss_factors(p_load: f64, q_load: f64, r: f64, x: f64, v0: f64) -> (f64, f64) {
    let h = 1e-30;
    let dp = two_bus_losses(Complex64::new(p_load, h), q_load.into(), r, x, v0).im / h;
    let dq = two_bus_losses(p_load.into(), Complex64::new(q_load, h), r, x, v0).im / h;
    (-dp, -dq)
}

pub struct KktReport {
    /// Largest `|ρ zᵢ + Λ̂ᵢ − λ aᵢ|` over coordinates strictly inside their box.
    pub stationarity: f64,
    /// Largest wrong-signed residual at an active bound.
    pub sign_violation: f64,
    /// `|aᵀ(z + c) − target|`.
    pub equality: f64,
    /// Largest bound violation.
    pub box_violation: f64,
}

pub fn kkt_report(input: &OdcpInput, sol: &OdcpSolution) -> KktReport {
    let a: Vec<f64> = input.lambda_hat.iter().map(|l| l - 1.0).collect();
    let c = input.offset();
    let lam = sol.multiplier;
    let mut stationarity: f64 = 0.0;
    let mut sign_violation: f64 = 0.0;
    let mut box_violation: f64 = 0.0;
    let mut lhs = 0.0;
    for i in 0..a.len() {
        let (lo, hi, z) = (input.lower[i], input.upper[i], sol.z[i]);
        lhs += a[i] * (z + c[i]);
        box_violation = box_violation.max(lo - z).max(z - hi);
        if lo == hi {
            continue;
        }
        let g = input.rho * z + input.lambda_hat[i] - lam * a[i];
        let at_lo = (z - lo).abs() <= 1e-12;
        let at_hi = (hi - z).abs() <= 1e-12;
        if at_hi {
            sign_violation = sign_violation.max(g);
        } else if at_lo {
            sign_violation = sign_violation.max(-g);
        } else {
            stationarity = stationarity.max(g.abs());
        }
    }
    KktReport {
        stationarity,
        sign_violation,
        equality: (lhs - input.target_rhs()).abs(),
        box_violation,
    }
}

pub struct GridResult {
    pub best: f64,
    /// Upper bound on `best − optimum` implied by the grid spacing.
    pub certified_gap: f64,
    pub feasible_points: usize,
}

/// Exhaustive search over a spacing-`h` grid in two coordinates of a
/// three-variable problem; the third is solved from the equality.
pub fn grid_search_3(input: &OdcpInput, h: f64) -> GridResult {
    assert_eq!(input.n(), 3);
    let a: Vec<f64> = input.coefficients();
    let c = input.offset();
    let lin0: f64 = (0..3).map(|i| input.lambda_hat[i] * c[i]).sum();
    let objective = |z: &[f64; 3]| -> f64 {
        lin0 + (0..3)
            .map(|i| input.lambda_hat[i] * z[i] + 0.5 * input.rho * z[i] * z[i])
            .sum::<f64>()
    };
    let required = input.required_az();
    let j = (0..3)
        .max_by(|&x, &y| a[x].abs().total_cmp(&a[y].abs()))
        .unwrap();
    let free: Vec<usize> = (0..3).filter(|&i| i != j).collect();
    let axis = |i: usize| -> Vec<f64> {
        let (lo, hi) = (input.lower[i], input.upper[i]);
        let n = ((hi - lo) / h).ceil() as usize;
        let mut v: Vec<f64> = (0..=n).map(|k| (lo + k as f64 * h).min(hi)).collect();
        v.dedup();
        v
    };
    let (g0, g1) = (axis(free[0]), axis(free[1]));
    let mut best = f64::INFINITY;
    let mut feasible_points = 0;
    let mut z = [0.0; 3];
    for &u in &g0 {
        for &w in &g1 {
            let zj = (required - a[free[0]] * u - a[free[1]] * w) / a[j];
            if zj < input.lower[j] - 1e-12 || zj > input.upper[j] + 1e-12 {
                continue;
            }
            z[free[0]] = u;
            z[free[1]] = w;
            z[j] = zj.clamp(input.lower[j], input.upper[j]);
            feasible_points += 1;
            best = best.min(objective(&z));
        }
    }
    // Any feasible point has a feasible grid neighbour within h in each free
    // coordinate (unless the feasible polygon is thinner than the grid),
    // with the eliminated coordinate moving by at most the coefficient ratio.
    let mut step = [h; 3];
    step[j] = h * (a[free[0]].abs() + a[free[1]].abs()) / a[j].abs();
    let grad_bound: f64 = (0..3)
        .map(|i| {
            let zmax = input.lower[i].abs().max(input.upper[i].abs());
            (input.lambda_hat[i].abs() + input.rho * zmax) * step[i]
        })
        .sum();
    GridResult {
        best,
        certified_gap: 2.0 * grad_bound,
        feasible_points,
    }
}

/// Weighted least squares through a QR factorisation of `√W A`, newest row
/// weighted 1. Returns `Λ̂ = 1 + θ`.
pub fn wls_qr(rows: &[Vec<f64>], rhs: &[f64], gamma: f64) -> Vec<f64> {
    let k = rows.len();
    let n = rows[0].len();
    let mut a = DMatrix::<f64>::zeros(k, n);
    let mut b = DVector::<f64>::zeros(k);
    for (i, row) in rows.iter().enumerate() {
        let w = gamma.powi((k - 1 - i) as i32).sqrt();
        for (j, x) in row.iter().enumerate() {
            a[(i, j)] = w * x;
        }
        b[i] = w * rhs[i];
    }
    let qr = a.qr();
    let qtb = qr.q().transpose() * b;
    let theta = qr
        .r()
        .solve_upper_triangular(&qtb)
        .expect("full column rank");
    theta.iter().map(|t| 1.0 + t).collect()
}

/// Random `n`-DER instance with a feasible balance target. Loss factors lie
/// in `[0, 0.1]`, box half-widths in `[0.05, 0.25]`, and the fixed part of
/// `ΔP` is small and nonzero.
pub fn random_odcp(n: usize, rng: &mut impl rand::Rng) -> OdcpInput {
    let lambda_hat: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=0.1)).collect();
    let lower: Vec<f64> = (0..n).map(|_| -rng.random_range(0.05..=0.25)).collect();
    let upper: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..=0.25)).collect();
    let p_d_now: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.2)).collect();
    let p_d_prev: Vec<f64> = p_d_now.iter().map(|p| p + rng.random_range(-0.01..0.01)).collect();
    let p_g_prev: Vec<f64> = (0..n)
        .map(|i| rng.random_range(lower[i]..=upper[i]))
        .collect();
    let mut input = OdcpInput {
        lambda_hat,
        p_g0_now: vec![0.0; n],
        p_g0_prev: vec![0.0; n],
        p_d0_now: p_d_now.clone(),
        p_d_now,
        p_d_prev,
        p_g_prev,
        p_t_prev: rng.random_range(1.0..2.0),
        p_t0_now: rng.random_range(1.0..2.0),
        r: 0.0,
        lower,
        upper,
        rho: 1.0,
    };
    // Pick a point strictly inside the boxes and set `r` so it is feasible.
    let inside: Vec<f64> = (0..n)
        .map(|i| 0.9 * rng.random_range(input.lower[i]..=input.upper[i]))
        .collect();
    let a = input.coefficients();
    let c = input.offset();
    let lhs: f64 = (0..n).map(|i| a[i] * (inside[i] + c[i])).sum();
    input.r = input.p_t0_now - input.p_t_prev - lhs;
    input
}
