//! Exact solver for the discrete transportation problem.
//!
//! Classic transportation simplex on the bipartite supply/demand graph:
//! northwest-corner initial basis, dual potentials by tree traversal,
//! entering arc by most-negative reduced cost with lexicographic tie-break,
//! leaving arc by minimum flow on the cycle's minus positions (lowest index
//! on ties). If the pivot cap is hit (degenerate cycling), the search
//! restarts with Bland's lowest-index entering rule, which cannot cycle.

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Clone, Copy, Debug)]
struct BasicCell {
    i: usize,
    j: usize,
    flow: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum EnteringRule {
    MostNegative,
    LowestIndex,
}

pub(super) struct SimplexSolution {
    pub w: Mat,
    pub cost: f64,
}

/// Northwest-corner staircase: exactly `n + m − 1` cells, possibly with
/// degenerate zero flows.
fn northwest_corner(u: &[f64], v: &[f64]) -> Vec<BasicCell> {
    let (n, m) = (u.len(), v.len());
    let mut ru = u.to_vec();
    let mut rv = v.to_vec();
    let mut cells = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        let f = ru[i].min(rv[j]).max(0.0);
        cells.push(BasicCell { i, j, flow: f });
        ru[i] -= f;
        rv[j] -= f;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if i == n - 1 {
            j += 1;
        } else if j == m - 1 {
            i += 1;
        } else if ru[i] <= rv[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    cells
}

/// Dual potentials α (rows) and β (cols) with α_0 = 0, solving
/// α_i + β_j = c_ij over the basis tree.
fn potentials(
    basis: &[BasicCell],
    n: usize,
    m: usize,
    cost: &Mat,
) -> Result<(Vec<f64>, Vec<f64>)> {
    // node ids: rows 0..n, cols n..n+m
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + m];
    for (k, c) in basis.iter().enumerate() {
        adj[c.i].push((n + c.j, k));
        adj[n + c.j].push((c.i, k));
    }
    let mut alpha = vec![f64::NAN; n];
    let mut beta = vec![f64::NAN; m];
    alpha[0] = 0.0;
    let mut stack = vec![0usize];
    let mut seen = vec![false; n + m];
    seen[0] = true;
    while let Some(node) = stack.pop() {
        for &(next, k) in &adj[node] {
            if seen[next] {
                continue;
            }
            seen[next] = true;
            let cell = basis[k];
            if next >= n {
                beta[next - n] = cost.at(cell.i, cell.j) - alpha[cell.i];
            } else {
                alpha[next] = cost.at(cell.i, cell.j) - beta[cell.j];
            }
            stack.push(next);
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::numeric("transport basis is not a spanning tree"));
    }
    Ok((alpha, beta))
}

/// The unique cycle closed by adding arc (i*, j*) to the basis tree, as basis
/// indices alternating minus/plus starting from the cell adjacent to the
/// entering arc's row side.
fn find_cycle(basis: &[BasicCell], n: usize, m: usize, ei: usize, ej: usize) -> Vec<usize> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + m];
    for (k, c) in basis.iter().enumerate() {
        adj[c.i].push((n + c.j, k));
        adj[n + c.j].push((c.i, k));
    }
    // path from row ei to col ej through the tree
    let start = ei;
    let goal = n + ej;
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + m];
    let mut seen = vec![false; n + m];
    seen[start] = true;
    let mut stack = vec![start];
    while let Some(node) = stack.pop() {
        if node == goal {
            break;
        }
        for &(next, k) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, k));
                stack.push(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut at = goal;
    while at != start {
        let (prev, k) = parent[at].expect("tree connects all nodes");
        path.push(k);
        at = prev;
    }
    path.reverse();
    path
}

pub(super) fn solve(u: &[f64], v: &[f64], cost: &Mat) -> Result<SimplexSolution> {
    let (n, m) = (u.len(), v.len());
    let max_abs_cost =
        cost.data().iter().fold(0.0f64, |a, &c| a.max(c.abs()));
    let tol = 1e-11 * (1.0 + max_abs_cost);

    let mut basis = northwest_corner(u, v);
    let cap_primary = 1000 + 60 * n * m;
    match iterate(&mut basis, n, m, cost, tol, EnteringRule::MostNegative, cap_primary) {
        Ok(()) => {}
        Err(_) => {
            // rare degenerate stall: restart with the anti-cycling rule
            basis = northwest_corner(u, v);
            iterate(
                &mut basis,
                n,
                m,
                cost,
                tol,
                EnteringRule::LowestIndex,
                20 * cap_primary,
            )?;
        }
    }

    let mut w = Mat::zeros(n, m);
    for c in &basis {
        *w.at_mut(c.i, c.j) += c.flow.max(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += w.at(i, j) * cost.at(i, j);
        }
    }
    if !total.is_finite() {
        return Err(Error::numeric("non-finite transport cost"));
    }
    Ok(SimplexSolution { w, cost: total })
}

fn iterate(
    basis: &mut Vec<BasicCell>,
    n: usize,
    m: usize,
    cost: &Mat,
    tol: f64,
    rule: EnteringRule,
    max_pivots: usize,
) -> Result<()> {
    let mut in_basis = vec![false; n * m];
    for c in basis.iter() {
        in_basis[c.i * m + c.j] = true;
    }
    for _pivot in 0..max_pivots {
        let (alpha, beta) = potentials(basis, n, m, cost)?;
        // entering arc
        let mut enter: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for i in 0..n {
            for j in 0..m {
                if in_basis[i * m + j] {
                    continue;
                }
                let r = cost.at(i, j) - alpha[i] - beta[j];
                match rule {
                    EnteringRule::MostNegative => {
                        if r < best {
                            best = r;
                            enter = Some((i, j));
                        }
                    }
                    EnteringRule::LowestIndex => {
                        if r < -tol {
                            enter = Some((i, j));
                            break 'scan;
                        }
                    }
                }
            }
        }
        let Some((ei, ej)) = enter else {
            return Ok(());
        };

        let path = find_cycle(basis, n, m, ei, ej);
        // walking row→col, the first tree cell shares the entering row and
        // takes a minus sign; signs alternate along the path
        let mut theta = f64::INFINITY;
        let mut leave_pos: Option<usize> = None;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let f = basis[k].flow;
                if f < theta - 1e-15 {
                    theta = f;
                    leave_pos = Some(pos);
                } else if (f - theta).abs() <= 1e-15 {
                    // tie: keep the lowest basis cell index
                    if let Some(lp) = leave_pos {
                        if basis[k].i * m + basis[k].j < basis[path[lp]].i * m + basis[path[lp]].j
                        {
                            leave_pos = Some(pos);
                        }
                    } else {
                        leave_pos = Some(pos);
                    }
                }
            }
        }
        let leave_pos = leave_pos.ok_or_else(|| Error::numeric("degenerate transport cycle"))?;
        let theta = theta.max(0.0);
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis[k].flow -= theta;
            } else {
                basis[k].flow += theta;
            }
        }
        let leaving = basis[path[leave_pos]];
        in_basis[leaving.i * m + leaving.j] = false;
        in_basis[ei * m + ej] = true;
        basis[path[leave_pos]] = BasicCell { i: ei, j: ej, flow: theta };
    }
    Err(Error::numeric("transport simplex exceeded pivot cap"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn northwest_corner_covers_supplies() {
        let u = [0.3, 0.7];
        let v = [0.5, 0.5];
        let cells = northwest_corner(&u, &v);
        assert_eq!(cells.len(), 3);
        let total: f64 = cells.iter().map(|c| c.flow).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_by_one_moves_everything() {
        let cost = Mat::from_vec(1, 1, vec![2.5]).unwrap();
        let sol = solve(&[1.0], &[1.0], &cost).unwrap();
        assert_eq!(sol.w.at(0, 0), 1.0);
        assert!((sol.cost - 2.5).abs() < 1e-12);
    }

    #[test]
    fn monotone_matching_on_the_line() {
        // μ at {0, 2}, ν at {1, 3}, cost |x−y|²: optimal sends 0→1, 2→3
        let xs = [0.0, 2.0];
        let ys = [1.0, 3.0];
        let cost = Mat::from_fn(2, 2, |i, j| (xs[i] - ys[j]).powi(2));
        let sol = solve(&[0.5, 0.5], &[0.5, 0.5], &cost).unwrap();
        assert!((sol.cost - 1.0).abs() < 1e-12, "cost = {}", sol.cost);
        assert!((sol.w.at(0, 0) - 0.5).abs() < 1e-12);
        assert!((sol.w.at(1, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rectangular_instance_feasible_and_cheap() {
        let cost = Mat::from_vec(
            2,
            3,
            vec![4.0, 1.0, 9.0, 2.0, 8.0, 3.0],
        )
        .unwrap();
        let u = [0.6, 0.4];
        let v = [0.2, 0.5, 0.3];
        let sol = solve(&u, &v, &cost).unwrap();
        for (i, &ui) in u.iter().enumerate() {
            let s: f64 = (0..3).map(|j| sol.w.at(i, j)).sum();
            assert!((s - ui).abs() < 1e-9);
        }
        for (j, &vj) in v.iter().enumerate() {
            let s: f64 = (0..2).map(|i| sol.w.at(i, j)).sum();
            assert!((s - vj).abs() < 1e-9);
        }
        // hand-solved optimum: x01=0.5, x02=0.1, x10=0.2, x12=0.2
        assert!((sol.cost - (0.5 * 1.0 + 0.1 * 9.0 + 0.2 * 2.0 + 0.2 * 3.0)).abs() < 1e-9);
    }
}
