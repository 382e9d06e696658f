//! Backward/forward sweep for radial islands fed from a stiff source.

use std::collections::{BTreeMap, VecDeque};

use num_complex::Complex64;

use mbbsim::network::{BranchKind, NetworkModel, PhaseMatrix, IDEAL_SWITCH_OHMS};

type V3 = [Complex64; 3];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

pub struct Sweep<'a> {
    pub model: &'a NetworkModel,
    pub closed: BTreeMap<String, bool>,
    pub taps: BTreeMap<String, [i32; 3]>,
    /// Per-phase load in VA by bus.
    pub loads: BTreeMap<String, V3>,
    pub source_bus: String,
    pub source_emf: V3,
}

struct Edge {
    branch: usize,
    parent: usize,
    child: usize,
    /// Parent is the branch's from side.
    forward: bool,
}

/// Series impedance in ohms and per-phase from-side ratio.
fn series_model(model: &NetworkModel, bi: usize, taps: &BTreeMap<String, [i32; 3]>) -> (PhaseMatrix, [f64; 3]) {
    let br = &model.branches[bi];
    match &br.kind {
        BranchKind::Line { .. } => (br.impedance, [1.0; 3]),
        BranchKind::Switch { .. } => {
            let zero = br.impedance.iter().flatten().all(|z| *z == ZERO);
            if zero {
                let mut z = [[ZERO; 3]; 3];
                for p in br.phases.iter() {
                    z[p.index()][p.index()] = Complex64::new(IDEAL_SWITCH_OHMS, 0.0);
                }
                (z, [1.0; 3])
            } else {
                (br.impedance, [1.0; 3])
            }
        }
        BranchKind::Transformer(t) => {
            let zbase = t.secondary_voltage.powi(2) / (t.rating_kva * 1000.0);
            let z = br.impedance.map(|row| row.map(|x| x * zbase));
            (z, [t.secondary_voltage / t.primary_voltage; 3])
        }
        BranchKind::Regulator(s) => {
            let tap = taps.get(&br.id).copied().unwrap_or(s.current_taps);
            let step = s.range / (s.tap_count as f64 / 2.0);
            (br.impedance, tap.map(|k| 1.0 + step * k as f64))
        }
    }
}

impl Sweep<'_> {
    fn is_closed(&self, bi: usize) -> bool {
        let br = &self.model.branches[bi];
        match br.kind {
            BranchKind::Switch { normally_closed } => *self.closed.get(&br.id).unwrap_or(&normally_closed),
            _ => true,
        }
    }

    fn tree(&self) -> (Vec<usize>, Vec<Edge>) {
        let m = self.model;
        let root = m.bus_idx(&self.source_bus).expect("source bus");
        let mut seen = vec![false; m.buses.len()];
        seen[root] = true;
        let mut order = vec![root];
        let mut edges = Vec::new();
        let mut queue = VecDeque::from([root]);
        while let Some(b) = queue.pop_front() {
            let id = &m.buses[b].id;
            for (bi, br) in m.branches.iter().enumerate() {
                if !self.is_closed(bi) {
                    continue;
                }
                let (other, forward) = if &br.from_bus == id {
                    (&br.to_bus, true)
                } else if &br.to_bus == id {
                    (&br.from_bus, false)
                } else {
                    continue;
                };
                let o = m.bus_idx(other).unwrap();
                if seen[o] {
                    assert!(edges.iter().any(|e: &Edge| e.branch == bi), "loop through {}", br.id);
                    continue;
                }
                seen[o] = true;
                order.push(o);
                queue.push_back(o);
                edges.push(Edge { branch: bi, parent: b, child: o, forward });
            }
        }
        (order, edges)
    }

    /// Returns converged bus voltages and the number of sweeps.
    pub fn solve(&self, tol_pu: f64, max_iter: usize) -> (BTreeMap<String, V3>, usize) {
        let m = self.model;
        let (order, edges) = self.tree();
        let parent_edge: BTreeMap<usize, usize> = edges.iter().enumerate().map(|(k, e)| (e.child, k)).collect();
        let series: Vec<_> = edges.iter().map(|e| series_model(m, e.branch, &self.taps)).collect();
        let vln: Vec<f64> = m.buses.iter().map(|b| b.nominal_voltage / 3f64.sqrt()).collect();

        let mut shunt_b = vec![[0.0; 3]; m.buses.len()];
        for c in m.capacitors.iter().filter(|c| c.status) {
            let b = m.bus_idx(&c.bus).unwrap();
            let n = m.buses[b].phases.len() as f64;
            for p in m.buses[b].phases.iter() {
                shunt_b[b][p.index()] += c.rating_kvar * 1000.0 / n / vln[b].powi(2);
            }
        }

        let mut v = vec![[ZERO; 3]; m.buses.len()];
        for &b in &order {
            let angle_shift: V3 = self.source_emf.map(|e| e / e.norm());
            for p in m.buses[b].phases.iter() {
                v[b][p.index()] = angle_shift[p.index()] * vln[b];
            }
        }
        let root = order[0];
        v[root] = self.source_emf;

        for it in 1..=max_iter {
            // Backward: current drawn by each subtree at its bus.
            let mut demand = vec![[ZERO; 3]; m.buses.len()];
            let mut series_i = vec![[ZERO; 3]; edges.len()];
            for &b in order.iter().rev() {
                let s = self.loads.get(&m.buses[b].id).copied().unwrap_or([ZERO; 3]);
                for p in m.buses[b].phases.iter() {
                    let k = p.index();
                    let vk = v[b][k];
                    let low = 0.5 * vln[b];
                    let i_load = if s[k] == ZERO {
                        ZERO
                    } else if vk.norm() < low {
                        s[k].conj() * vk / (low * low)
                    } else {
                        (s[k] / vk).conj()
                    };
                    demand[b][k] += i_load + Complex64::new(0.0, shunt_b[b][k]) * vk;
                }
                if let Some(&k) = parent_edge.get(&b) {
                    let e = &edges[k];
                    let (_, a) = &series[k];
                    let mut upstream = [ZERO; 3];
                    for p in m.branches[e.branch].phases.iter() {
                        let j = p.index();
                        if e.forward {
                            series_i[k][j] = demand[b][j];
                            upstream[j] = demand[b][j] * a[j];
                        } else {
                            upstream[j] = demand[b][j] / a[j];
                            series_i[k][j] = -upstream[j];
                        }
                    }
                    for j in 0..3 {
                        demand[e.parent][j] += upstream[j];
                    }
                }
            }
            // Forward: propagate voltages from the source.
            let mut worst: f64 = 0.0;
            for (k, e) in edges.iter().enumerate() {
                let (z, a) = &series[k];
                let phases: Vec<usize> = m.branches[e.branch].phases.iter().map(|p| p.index()).collect();
                let mut next = v[e.child];
                for &r in &phases {
                    let zi: Complex64 = phases.iter().map(|&c| z[r][c] * series_i[k][c]).sum();
                    next[r] = if e.forward {
                        v[e.parent][r] * a[r] - zi
                    } else {
                        (v[e.parent][r] + zi) / a[r]
                    };
                }
                for r in 0..3 {
                    worst = worst.max((next[r] - v[e.child][r]).norm() / vln[e.child]);
                }
                v[e.child] = next;
            }
            if worst < tol_pu {
                let out = order.iter().map(|&b| (m.buses[b].id.clone(), v[b])).collect();
                return (out, it);
            }
        }
        panic!("sweep did not converge in {max_iter} iterations");
    }
}
