//! Progressive-edge-growth construction of a regular-column-weight LDPC code.
//!
//! Usage: `peg_code <n> <m> <column_weight> <seed>`; prints the alist on stdout.
//! The fixture `codes/ldpc_49_24.alist` is `peg_code 49 25 3 0`.

use mmpd_core::code::{BitMatrix, ParityCheck};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn peg(n: usize, m: usize, wc: usize, rng: &mut ChaCha8Rng) -> BitMatrix {
    let mut var_checks: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut check_vars: Vec<Vec<usize>> = vec![Vec::new(); m];
    for v in 0..n {
        for _ in 0..wc {
            let reached = reachable_checks(v, &var_checks, &check_vars, m);
            let pool: Vec<usize> = (0..m)
                .filter(|&c| !reached[c] && !var_checks[v].contains(&c))
                .collect();
            let pool = if pool.is_empty() {
                (0..m).filter(|&c| !var_checks[v].contains(&c)).collect()
            } else {
                pool
            };
            let min_deg = pool.iter().map(|&c| check_vars[c].len()).min().expect("m > wc");
            let ties: Vec<usize> = pool.into_iter().filter(|&c| check_vars[c].len() == min_deg).collect();
            let c = *ties.choose(rng).expect("non-empty");
            var_checks[v].push(c);
            check_vars[c].push(v);
        }
    }
    let mut h = BitMatrix::zeros(m, n);
    for (v, cs) in var_checks.iter().enumerate() {
        for &c in cs {
            h.set(c, v, true);
        }
    }
    h
}

/// Checks reachable from `v` at the deepest level before the tree stops
/// growing or covers every check. Returns all-false for an unconnected `v`.
fn reachable_checks(v: usize, var_checks: &[Vec<usize>], check_vars: &[Vec<usize>], m: usize) -> Vec<bool> {
    let mut reached = vec![false; m];
    if var_checks[v].is_empty() {
        return reached;
    }
    let mut seen_vars = vec![false; var_checks.len()];
    seen_vars[v] = true;
    let mut frontier = vec![v];
    let mut count = 0;
    loop {
        let mut next_checks = Vec::new();
        for &u in &frontier {
            for &c in &var_checks[u] {
                if !reached[c] {
                    reached[c] = true;
                    next_checks.push(c);
                }
            }
        }
        let new_count = count + next_checks.len();
        if new_count == m || next_checks.is_empty() {
            if new_count == m && !next_checks.is_empty() {
                // Every check is reachable: fall back to the previous level.
                for &c in &next_checks {
                    reached[c] = false;
                }
            }
            return reached;
        }
        count = new_count;
        frontier.clear();
        for &c in &next_checks {
            for &u in &check_vars[c] {
                if !seen_vars[u] {
                    seen_vars[u] = true;
                    frontier.push(u);
                }
            }
        }
    }
}

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let [n, m, wc, seed] = args[..] else {
        eprintln!("usage: peg_code <n> <m> <column_weight> <seed>");
        std::process::exit(2);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let h = peg(n, m, wc, &mut rng);
    eprintln!("rank {} of {m}", h.rank());
    print!("{}", ParityCheck::new(h).to_alist());
}
