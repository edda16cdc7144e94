//! Shared helpers for integration tests: independent physics and graph
//! oracles plus scenario loading.

#![allow(dead_code)]

use std::path::PathBuf;

use dkernel::dag::CommitDag;
use dkernel::scenario::{self, RunOptions, Scenario};
use dkernel::{RunReport, Trace};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

pub fn load(name: &str) -> Scenario {
    scenario::load_any(&scenario_path(name), None).expect("bundled scenario loads")
}

pub fn run(s: &Scenario, seed: Option<u64>, verbose: bool) -> RunReport {
    s.run(RunOptions {
        seed,
        verbose,
        no_hints: false,
    })
    .expect("run completes")
}

pub fn stamp_labels(trace: &Trace, header: u64) -> Vec<String> {
    trace.stamp_log(header).iter().map(|(_, s)| s.label()).collect()
}

/// Dense real matrix, row-major. Every state and operator used here is real
/// in the computational basis (Y is conjugated as XZ).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub n: usize,
    pub a: Vec<f64>,
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        Self { n, a: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        m
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.a[r * self.n + c]
    }

    pub fn mul(&self, o: &Mat) -> Mat {
        let n = self.n;
        let mut m = Mat::zeros(n);
        for r in 0..n {
            for k in 0..n {
                let x = self.at(r, k);
                if x == 0.0 {
                    continue;
                }
                for c in 0..n {
                    m.a[r * n + c] += x * o.at(k, c);
                }
            }
        }
        m
    }

    pub fn transpose(&self) -> Mat {
        let n = self.n;
        let mut m = Mat::zeros(n);
        for r in 0..n {
            for c in 0..n {
                m.a[c * n + r] = self.at(r, c);
            }
        }
        m
    }

    pub fn kron(&self, o: &Mat) -> Mat {
        let n = self.n * o.n;
        let mut m = Mat::zeros(n);
        for r1 in 0..self.n {
            for c1 in 0..self.n {
                for r2 in 0..o.n {
                    for c2 in 0..o.n {
                        m.a[(r1 * o.n + r2) * n + c1 * o.n + c2] = self.at(r1, c1) * o.at(r2, c2);
                    }
                }
            }
        }
        m
    }

    pub fn scale(&self, k: f64) -> Mat {
        Mat {
            n: self.n,
            a: self.a.iter().map(|x| x * k).collect(),
        }
    }

    pub fn add(&self, o: &Mat) -> Mat {
        Mat {
            n: self.n,
            a: self.a.iter().zip(&o.a).map(|(x, y)| x + y).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    /// `U rho U^T` for real `U`.
    pub fn conj(&self, u: &Mat) -> Mat {
        u.mul(self).mul(&u.transpose())
    }

    pub fn outer(v: &[f64]) -> Mat {
        let n = v.len();
        let mut m = Mat::zeros(n);
        for r in 0..n {
            for c in 0..n {
                m.a[r * n + c] = v[r] * v[c];
            }
        }
        m
    }

    pub fn expect(&self, v: &[f64]) -> f64 {
        let n = self.n;
        (0..n)
            .map(|r| (0..n).map(|c| v[r] * self.at(r, c) * v[c]).sum::<f64>())
            .sum()
    }
}

const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Bell basis on two qubits, basis order |00>,|01>,|10>,|11>:
/// Phi+, Phi-, Psi+, Psi-.
pub fn bell(k: usize) -> [f64; 4] {
    match k {
        0 => [H, 0.0, 0.0, H],
        1 => [H, 0.0, 0.0, -H],
        2 => [0.0, H, H, 0.0],
        _ => [0.0, H, -H, 0.0],
    }
}

/// Werner state: weight `f` on Phi+, the rest spread over the other three.
pub fn werner(f: f64) -> Mat {
    let mut m = Mat::outer(&bell(0)).scale(f);
    for k in 1..4 {
        m = m.add(&Mat::outer(&bell(k)).scale((1.0 - f) / 3.0));
    }
    m
}

fn x() -> Mat {
    Mat {
        n: 2,
        a: vec![0.0, 1.0, 1.0, 0.0],
    }
}

fn z() -> Mat {
    Mat {
        n: 2,
        a: vec![1.0, 0.0, 0.0, -1.0],
    }
}

/// Pauli that maps Phi+ to Bell state `k` when applied to the second qubit.
pub fn pauli_for_bell(k: usize) -> Mat {
    match k {
        0 => Mat::identity(2),
        1 => z(),
        2 => x(),
        _ => x().mul(&z()),
    }
}

/// Permutation matrix of a classical reversible map on `q` qubits; qubit 0 is
/// the most significant bit.
fn permutation(q: usize, f: impl Fn(usize) -> usize) -> Mat {
    let n = 1 << q;
    let mut m = Mat::zeros(n);
    for i in 0..n {
        m.a[f(i) * n + i] = 1.0;
    }
    m
}

fn cnot(q: usize, control: usize, target: usize) -> Mat {
    let bit = |k: usize| 1 << (q - 1 - k);
    permutation(q, |i| if i & bit(control) != 0 { i ^ bit(target) } else { i })
}

/// Traces out qubits 2 and 3 of a four-qubit operator.
fn trace_last_two(rho: &Mat) -> Mat {
    let mut m = Mat::zeros(4);
    for r in 0..4 {
        for c in 0..4 {
            m.a[r * 4 + c] = (0..4).map(|k| rho.at(r * 4 + k, c * 4 + k)).sum();
        }
    }
    m
}

/// Traces out qubits 1 and 2 of a four-qubit operator, keeping 0 and 3.
fn trace_middle(rho: &Mat) -> Mat {
    let idx = |o: usize, m: usize| ((o >> 1) << 3) | (m << 1) | (o & 1);
    let mut out = Mat::zeros(4);
    for r in 0..4 {
        for c in 0..4 {
            out.a[r * 4 + c] = (0..4).map(|k| rho.at(idx(r, k), idx(c, k))).sum();
        }
    }
    out
}

/// Recurrence purification on Werner pairs: bilateral CNOT from pair 1 onto
/// pair 2, measure pair 2 in Z, keep on matching outcomes. Qubit order is
/// a1, b1, a2, b2. Returns (success probability, output fidelity).
pub fn oracle_purify(f1: f64, f2: f64) -> (f64, f64) {
    let rho = werner(f1).kron(&werner(f2));
    let u = cnot(4, 0, 2).mul(&cnot(4, 1, 3));
    let rho = rho.conj(&u);
    let mut keep = Mat::zeros(16);
    for i in 0..16 {
        let (a2, b2) = ((i >> 1) & 1, i & 1);
        if a2 == b2 {
            keep.a[i * 16 + i] = 1.0;
        }
    }
    let kept = trace_last_two(&rho.conj(&keep));
    let p = kept.trace();
    (p, kept.expect(&bell(0)) / p)
}

/// Entanglement swap of pairs (a, y1) and (y2, b): Bell measurement on the
/// middle qubits, Pauli correction on `b`, averaged over outcomes.
pub fn oracle_swap(f1: f64, f2: f64) -> f64 {
    let rho = werner(f1).kron(&werner(f2));
    let mut total = Mat::zeros(4);
    for k in 0..4 {
        let proj = Mat::identity(2).kron(&Mat::outer(&bell(k))).kron(&Mat::identity(2));
        let post = trace_middle(&rho.conj(&proj));
        let fix = Mat::identity(2).kron(&pauli_for_bell(k));
        total = total.add(&post.conj(&fix));
    }
    total.expect(&bell(0)) / total.trace()
}

/// Depolarizing channel on a Werner pair for time `dt` at coherence time `t`.
pub fn oracle_decay(f0: f64, dt: f64, t: f64) -> f64 {
    let keep = (-dt / t).exp();
    let rho = werner(f0).scale(keep).add(&Mat::identity(4).scale((1.0 - keep) / 4.0));
    rho.expect(&bell(0))
}

/// Cycle search by transitive closure, independent of any topological sort.
pub fn brute_force_has_cycle(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut reach = vec![vec![false; n]; n];
    for &(a, b) in edges {
        reach[a][b] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    (0..n).any(|i| reach[i][i])
}

pub fn dag_edges(dag: &CommitDag) -> Vec<(usize, usize)> {
    dag.edges.iter().map(|e| (e.from, e.to)).collect()
}

/// Longest path in vertices, by exhaustive DFS. Only for small acyclic graphs.
pub fn longest_path(n: usize, edges: &[(usize, usize)]) -> usize {
    fn go(v: usize, edges: &[(usize, usize)]) -> usize {
        1 + edges
            .iter()
            .filter(|e| e.0 == v)
            .map(|e| go(e.1, edges))
            .max()
            .unwrap_or(0)
    }
    (0..n).map(|v| go(v, edges)).max().unwrap_or(0)
}
