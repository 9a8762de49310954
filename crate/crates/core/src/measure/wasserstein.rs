use crate::error::{Error, Result};
use crate::measure::ensemble::StoppedEnsemble;

/// Largest ensemble accepted by the exact transport solver.
pub const MAX_EXACT_PARTICLES: usize = 512;

const EPS: f64 = 1e-15;

/// Squared ground distance `|x - x'|^2 + |i - i'|^2`.
pub fn ground_cost(x: &[f64], i: bool, y: &[f64], j: bool) -> f64 {
    let dx: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    dx + if i == j { 0.0 } else { 1.0 }
}

/// Exact 2-Wasserstein distance between two ensembles.
///
/// One-dimensional ensembles whose survival flags all agree use the
/// quantile formula; anything else is solved as a transportation problem.
pub fn wasserstein2(m: &StoppedEnsemble, mp: &StoppedEnsemble) -> Result<f64> {
    if m.dim() != mp.dim() {
        return Err(Error::InvalidEnsemble(
            "ensembles of different dimension".into(),
        ));
    }
    let flag = m.is_alive(0);
    let same_flags = m.flags().iter().chain(mp.flags()).all(|f| *f == flag);
    if m.dim() == 1 && same_flags {
        return Ok(quantile_cost(m, mp).max(0.0).sqrt());
    }
    for e in [m, mp] {
        if e.len() > MAX_EXACT_PARTICLES {
            return Err(Error::Capacity {
                len: e.len(),
                max: MAX_EXACT_PARTICLES,
            });
        }
    }
    let cost: Vec<f64> = (0..m.len())
        .flat_map(|a| {
            (0..mp.len()).map(move |b| {
                ground_cost(m.position(a), m.is_alive(a), mp.position(b), mp.is_alive(b))
            })
        })
        .collect();
    let plan = transport(m.weights(), mp.weights(), &cost)?;
    Ok(plan.cost.max(0.0).sqrt())
}

fn quantile_cost(m: &StoppedEnsemble, mp: &StoppedEnsemble) -> f64 {
    let sorted = |e: &StoppedEnsemble| {
        let mut v: Vec<(f64, f64)> = (0..e.len())
            .map(|k| (e.position(k)[0], e.weight(k)))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (a, b) = (sorted(m), sorted(mp));
    let (mut ia, mut ib) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    loop {
        let step = ra.min(rb);
        cost += step * (a[ia].0 - b[ib].0).powi(2);
        ra -= step;
        rb -= step;
        if ra <= EPS {
            ia += 1;
            if ia == a.len() {
                break;
            }
            ra += a[ia].1;
        }
        if rb <= EPS {
            ib += 1;
            if ib == b.len() {
                break;
            }
            rb += b[ib].1;
        }
    }
    cost
}

/// Optimal transport plan between discrete marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub cost: f64,
    /// `(row, column, mass)` of the basic cells.
    pub flows: Vec<(usize, usize, f64)>,
}

/// Transportation simplex (MODI pricing, Dantzig rule with a Bland
/// fallback once the iteration count grows) on a dense row-major cost.
pub fn transport(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<TransportPlan> {
    let (n, m) = (supply.len(), demand.len());
    if n == 0 || m == 0 || cost.len() != n * m {
        return Err(Error::InvalidEnsemble(
            "transport problem with inconsistent sizes".into(),
        ));
    }
    let mut demand = demand.to_vec();
    // absorb rounding so that both marginals carry the same total mass
    let gap: f64 = supply.iter().sum::<f64>() - demand.iter().sum::<f64>();
    demand[m - 1] = (demand[m - 1] + gap).max(0.0);

    // north-west corner start; always yields n + m - 1 basic cells
    let mut basis: Vec<(usize, usize, f64)> = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0, 0);
    let (mut s, mut d) = (supply[0], demand[0]);
    loop {
        let q = s.min(d);
        basis.push((i, j, q));
        s -= q;
        d -= q;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if (s <= d && i < n - 1) || j == m - 1 {
            i += 1;
            s += supply[i];
        } else {
            j += 1;
            d += demand[j];
        }
    }

    let nodes = n + m;
    let max_iter = 50 * nodes * nodes + 1000;
    let bland_after = 20 * nodes;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    for iter in 0..max_iter {
        for a in adj.iter_mut() {
            a.clear();
        }
        for (k, &(r, c, _)) in basis.iter().enumerate() {
            adj[r].push(k);
            adj[n + c].push(k);
        }
        potentials(&basis, &adj, cost, n, m, &mut u, &mut v);

        let mut entering = None;
        let mut best = -1e-12;
        'price: for r in 0..n {
            for c in 0..m {
                let red = cost[r * m + c] - u[r] - v[c];
                if red < best {
                    entering = Some((r, c));
                    if iter >= bland_after {
                        break 'price;
                    }
                    best = red;
                }
            }
        }
        let Some((r, c)) = entering else {
            let total = basis.iter().map(|&(r, c, q)| q * cost[r * m + c]).sum();
            return Ok(TransportPlan {
                cost: total,
                flows: basis,
            });
        };

        // tree path from column node back to row node, as basis cell indices
        let path = tree_path(&basis, &adj, n, n + c, r);
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (step, &k) in path.iter().enumerate() {
            if step % 2 == 0 && (basis[k].2 < theta || (basis[k].2 == theta && k < leave)) {
                theta = basis[k].2;
                leave = k;
            }
        }
        for (step, &k) in path.iter().enumerate() {
            if step % 2 == 0 {
                basis[k].2 -= theta;
            } else {
                basis[k].2 += theta;
            }
        }
        basis[leave] = (r, c, theta);
    }
    Err(Error::Accuracy {
        achieved: f64::NAN,
        requested: 0.0,
    })
}

fn potentials(
    basis: &[(usize, usize, f64)],
    adj: &[Vec<usize>],
    cost: &[f64],
    n: usize,
    m: usize,
    u: &mut [f64],
    v: &mut [f64],
) {
    let mut seen = vec![false; n + m];
    let mut stack = vec![0usize];
    seen[0] = true;
    u[0] = 0.0;
    while let Some(node) = stack.pop() {
        for &k in &adj[node] {
            let (r, c, _) = basis[k];
            let cij = cost[r * m + c];
            if node < n {
                if !seen[n + c] {
                    v[c] = cij - u[r];
                    seen[n + c] = true;
                    stack.push(n + c);
                }
            } else if !seen[r] {
                u[r] = cij - v[c];
                seen[r] = true;
                stack.push(r);
            }
        }
    }
}

/// Cells on the basis-tree path from node `from` to row `to_row`.
fn tree_path(
    basis: &[(usize, usize, f64)],
    adj: &[Vec<usize>],
    n: usize,
    from: usize,
    to_row: usize,
) -> Vec<usize> {
    let nodes = adj.len();
    let mut via = vec![usize::MAX; nodes];
    let mut seen = vec![false; nodes];
    let mut queue = std::collections::VecDeque::from([from]);
    seen[from] = true;
    while let Some(node) = queue.pop_front() {
        if node == to_row {
            break;
        }
        for &k in &adj[node] {
            let (r, c, _) = basis[k];
            let other = if node < n { n + c } else { r };
            if !seen[other] {
                seen[other] = true;
                via[other] = k;
                queue.push_back(other);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = to_row;
    while node != from {
        let k = via[node];
        path.push(k);
        let (r, c, _) = basis[k];
        node = if node < n { n + c } else { r };
    }
    path.reverse();
    path
}
