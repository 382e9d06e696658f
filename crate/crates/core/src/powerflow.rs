//! Unbalanced three-phase power flow in phase coordinates.
//!
//! Each island is solved by Newton's method on the nodal current mismatch
//! in rectangular coordinates. The island's grid-forming source is a
//! balanced EMF behind its series impedance (Norton equivalent), or an
//! ideal voltage source when that impedance is zero. Loads are wye-connected
//! constant power; below half of nominal voltage a load continues as the
//! constant impedance that draws its rated power at that voltage.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::network::{
    BranchKind, BusId, Island, NetworkModel, PhaseMatrix, SwitchState, IDEAL_SWITCH_OHMS, S_BASE_VA,
};
use crate::phasor::{Phase, PhaseSet, PhasorSet};

pub const DEFAULT_TOLERANCE_W: f64 = 1.0;
pub const DEFAULT_MAX_ITER: usize = 50;
pub const LOW_VOLTAGE_PU: f64 = 0.5;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerFlowError {
    #[error("island containing bus \"{0}\" has no grid-forming source")]
    NoGridFormingDevice(BusId),
    #[error("island has several grid-forming sources: {0:?}")]
    MultipleGridFormingDevices(Vec<String>),
    #[error("injection at bus \"{0}\" which is not in the island")]
    InjectionOutsideIsland(BusId),
    #[error("grid-forming source \"{0}\" must sit on a three-phase bus")]
    SourceNotThreePhase(String),
    #[error("singular Jacobian at iteration {0}")]
    Singular(usize),
    #[error("no convergence after {} iterations, mismatch {:.3e} W", .0.iterations, .0.mismatch)]
    NonConvergence(Box<PowerFlowSolution>),
}

/// Balanced EMF behind a series impedance, the island's angle reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub device: String,
    pub bus: BusId,
    /// Line-to-neutral EMF phasors in volts.
    pub emf: PhasorSet,
    /// Series impedance per phase in ohms; zero makes the bus a slack bus.
    pub impedance: Complex64,
    pub frequency: f64,
}

/// Per-phase powers in VA. Generation is positive.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InjectionSpec {
    pub generation: BTreeMap<BusId, PhasorSet>,
    pub loads: BTreeMap<BusId, PhasorSet>,
    pub sources: Vec<SourceSpec>,
}

impl InjectionSpec {
    pub fn add_generation(&mut self, bus: &str, s: PhasorSet) {
        let e = self.generation.entry(bus.to_string()).or_default();
        *e = *e + s;
    }

    pub fn add_load(&mut self, bus: &str, s: PhasorSet) {
        let e = self.loads.entry(bus.to_string()).or_default();
        *e = *e + s;
    }

    /// All in-service loads of the model at their rated power.
    pub fn from_model_loads(model: &NetworkModel) -> Self {
        let mut spec = InjectionSpec::default();
        for l in model.loads.iter().filter(|l| l.status) {
            let mut s = PhasorSet::ZERO;
            for (p, pw) in &l.per_phase {
                s[*p] = pw.to_va();
            }
            spec.add_load(&l.bus, s);
        }
        spec
    }
}

/// Switch positions and regulator taps in force for a solve.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OperatingState {
    pub switches: SwitchState,
    pub taps: BTreeMap<String, [i32; 3]>,
}

impl OperatingState {
    pub fn from_model(model: &NetworkModel) -> Self {
        OperatingState {
            switches: model.initial_switches().clone(),
            taps: model.regulators().map(|(b, s)| (b.id.clone(), s.current_taps)).collect(),
        }
    }

    fn is_closed(&self, model: &NetworkModel, branch: &str) -> bool {
        match model.branch(branch).map(|b| &b.kind) {
            Some(BranchKind::Switch { normally_closed }) => self.switches.is_closed(branch).unwrap_or(*normally_closed),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions<'a> {
    pub tolerance: f64,
    pub max_iter: usize,
    pub initial: Option<&'a BTreeMap<BusId, PhasorSet>>,
}

impl Default for SolveOptions<'_> {
    fn default() -> Self {
        SolveOptions { tolerance: DEFAULT_TOLERANCE_W, max_iter: DEFAULT_MAX_ITER, initial: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PowerFlowSolution {
    /// Line-to-neutral voltages in volts.
    pub bus_voltages: BTreeMap<BusId, PhasorSet>,
    /// Current entering each branch at its from-bus, amperes.
    pub branch_currents: BTreeMap<String, PhasorSet>,
    /// Current entering each branch at its to-bus, amperes.
    pub branch_currents_to: BTreeMap<String, PhasorSet>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest nodal power mismatch, VA.
    pub mismatch: f64,
    /// Power delivered by each source at its terminal bus, VA.
    pub source_power: BTreeMap<String, PhasorSet>,
    /// Power consumed by loads at the solved voltages, VA.
    pub load_power: BTreeMap<BusId, PhasorSet>,
    /// Power injected by grid-following generation, VA.
    pub generation_power: BTreeMap<BusId, PhasorSet>,
    /// Power absorbed by shunt capacitors, VA.
    pub shunt_power: BTreeMap<BusId, PhasorSet>,
    /// Buses whose loads switched to constant impedance.
    pub low_voltage_buses: Vec<BusId>,
}

impl PowerFlowSolution {
    /// Sources + generation − loads − shunts − branch losses, VA.
    pub fn power_balance_residual(&self, model: &NetworkModel) -> Complex64 {
        let total = |m: &BTreeMap<String, PhasorSet>| m.values().map(|s| s.sum()).sum::<Complex64>();
        let losses: Complex64 = branch_flows(model, self).values().map(|f| f.loss().sum()).sum();
        total(&self.source_power) + total(&self.generation_power)
            - total(&self.load_power)
            - total(&self.shunt_power)
            - losses
    }
}

/// Sending- and receiving-end complex power of a branch, VA per phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlow {
    pub sending: PhasorSet,
    pub receiving: PhasorSet,
}

impl BranchFlow {
    pub fn loss(&self) -> PhasorSet {
        self.sending - self.receiving
    }
}

/// Per-phase flows of every solved branch.
pub fn branch_flows(_model: &NetworkModel, solution: &PowerFlowSolution) -> BTreeMap<String, BranchFlow> {
    let mut out = BTreeMap::new();
    for (id, i_from) in &solution.branch_currents {
        let Some(br) = _model.branch(id) else { continue };
        let (Some(vf), Some(vt)) = (solution.bus_voltages.get(&br.from_bus), solution.bus_voltages.get(&br.to_bus))
        else {
            continue;
        };
        let i_to = solution.branch_currents_to.get(id).copied().unwrap_or_default();
        out.insert(
            id.clone(),
            BranchFlow { sending: vf.power_with(i_from), receiving: PhasorSet::ZERO - vt.power_with(&i_to) },
        );
    }
    out
}

/// Primitive admittance blocks `[Yff, Yft, Ytf, Ytt]` of a branch.
fn branch_admittance(model: &NetworkModel, branch_idx: usize, state: &OperatingState) -> [PhaseMatrix; 4] {
    let br = &model.branches[branch_idx];
    let phases: Vec<usize> = br.phases.iter().map(Phase::index).collect();
    let zero = [[ZERO; 3]; 3];
    let mut blocks = [zero; 4];
    let series = |z: &PhaseMatrix| -> PhaseMatrix {
        let k = phases.len();
        let sub = DMatrix::from_fn(k, k, |r, c| z[phases[r]][phases[c]]);
        let inv = sub.try_inverse().expect("branch impedance is invertible");
        let mut y = zero;
        for r in 0..k {
            for c in 0..k {
                y[phases[r]][phases[c]] = inv[(r, c)];
            }
        }
        y
    };
    let set_series = |blocks: &mut [PhaseMatrix; 4], y: PhaseMatrix, a_from: [f64; 3]| {
        for r in 0..3 {
            for c in 0..3 {
                blocks[0][r][c] = y[r][c] * a_from[r] * a_from[c];
                blocks[1][r][c] = -y[r][c] * a_from[r];
                blocks[2][r][c] = -y[r][c] * a_from[c];
                blocks[3][r][c] = y[r][c];
            }
        }
    };
    match &br.kind {
        BranchKind::Line { .. } => set_series(&mut blocks, series(&br.impedance), [1.0; 3]),
        BranchKind::Switch { .. } => {
            let z = if crate::network::is_zero_matrix(&br.impedance) {
                crate::network::diagonal_matrix(Complex64::new(IDEAL_SWITCH_OHMS, 0.0), br.phases)
            } else {
                br.impedance
            };
            set_series(&mut blocks, series(&z), [1.0; 3])
        }
        BranchKind::Transformer(t) => {
            let zbase = t.secondary_voltage * t.secondary_voltage / (t.rating_kva * 1e3);
            let n = t.primary_voltage / t.secondary_voltage;
            let y = series(&crate::network::scale_matrix(&br.impedance, zbase));
            set_series(&mut blocks, y, [1.0 / n; 3])
        }
        BranchKind::Regulator(settings) => {
            let mut s = settings.clone();
            if let Some(t) = state.taps.get(&br.id) {
                s.current_taps = *t;
            }
            set_series(&mut blocks, series(&br.impedance), s.ratios())
        }
    }
    blocks
}

struct NodeMap {
    /// (bus position in island, phase) → node index; usize::MAX when absent.
    index: Vec<[usize; 3]>,
    count: usize,
}

/// Solves one island.
pub fn solve_island(
    model: &NetworkModel,
    island: &Island,
    state: &OperatingState,
    injections: &InjectionSpec,
    opts: SolveOptions<'_>,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let head = island.member_buses.iter().next().cloned().unwrap_or_default();
    let sources: Vec<&SourceSpec> = injections.sources.iter().filter(|s| island.contains(&s.bus)).collect();
    match sources.len() {
        0 => return Err(PowerFlowError::NoGridFormingDevice(head)),
        1 => {}
        _ => {
            return Err(PowerFlowError::MultipleGridFormingDevices(
                sources.iter().map(|s| s.device.clone()).collect(),
            ))
        }
    }
    let source = sources[0];
    for bus in injections.generation.keys() {
        if !island.contains(bus) {
            return Err(PowerFlowError::InjectionOutsideIsland(bus.clone()));
        }
    }

    // Node numbering.
    let pos_of: BTreeMap<usize, usize> = island.bus_indices.iter().enumerate().map(|(p, &b)| (b, p)).collect();
    let mut nodes = NodeMap { index: vec![[usize::MAX; 3]; island.bus_indices.len()], count: 0 };
    for (p, &b) in island.bus_indices.iter().enumerate() {
        for ph in model.buses[b].phases.iter() {
            nodes.index[p][ph.index()] = nodes.count;
            nodes.count += 1;
        }
    }
    let n = nodes.count;
    let node_of = |bus: &str, ph: Phase| -> Option<usize> {
        let b = model.bus_idx(bus)?;
        let p = *pos_of.get(&b)?;
        let k = nodes.index[p][ph.index()];
        (k != usize::MAX).then_some(k)
    };
    let mut vnom = vec![0.0; n];
    for (p, &b) in island.bus_indices.iter().enumerate() {
        for ph in Phase::ALL {
            let k = nodes.index[p][ph.index()];
            if k != usize::MAX {
                vnom[k] = model.buses[b].nominal_ln();
            }
        }
    }

    // Admittance matrix.
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    let mut island_branches = Vec::new();
    for (bi, br) in model.branches.iter().enumerate() {
        if !(island.contains(&br.from_bus) && island.contains(&br.to_bus)) || !state.is_closed(model, &br.id) {
            continue;
        }
        let blocks = branch_admittance(model, bi, state);
        let ends = [&br.from_bus, &br.to_bus];
        for (blk, (a, b)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            for r in br.phases.iter() {
                for c in br.phases.iter() {
                    let (i, j) = (node_of(ends[a], r).unwrap(), node_of(ends[b], c).unwrap());
                    y[(i, j)] += blocks[blk][r.index()][c.index()];
                }
            }
        }
        island_branches.push((bi, blocks));
    }
    let mut shunt = vec![ZERO; n];
    for cap in model.capacitors.iter().filter(|c| c.status && island.contains(&c.bus)) {
        let bus = model.bus(&cap.bus).expect("validated");
        let per_phase = cap.rating_kvar * 1e3 / bus.phases.len() as f64;
        for ph in bus.phases.iter() {
            let k = node_of(&cap.bus, ph).unwrap();
            let b = per_phase / (vnom[k] * vnom[k]);
            shunt[k] += Complex64::new(0.0, b);
        }
    }
    for k in 0..n {
        y[(k, k)] += shunt[k];
    }

    // Source.
    let src_bus = model.bus(&source.bus).expect("validated");
    if src_bus.phases != PhaseSet::ABC {
        return Err(PowerFlowError::SourceNotThreePhase(source.device.clone()));
    }
    let src_nodes: [usize; 3] = Phase::ALL.map(|ph| node_of(&source.bus, ph).unwrap());
    let ideal = source.impedance.norm() == 0.0;
    let mut fixed = vec![false; n];
    let mut norton = vec![ZERO; n];
    let ys = if ideal { ZERO } else { source.impedance.inv() };
    for ph in Phase::ALL {
        let k = src_nodes[ph.index()];
        if ideal {
            fixed[k] = true;
        } else {
            y[(k, k)] += ys;
            norton[k] = ys * source.emf[ph];
        }
    }

    // Per-node power specs.
    let mut gen = vec![ZERO; n];
    let mut load = vec![ZERO; n];
    for (bus, s) in &injections.generation {
        for ph in Phase::ALL {
            if s[ph] != ZERO {
                let k = node_of(bus, ph).ok_or_else(|| PowerFlowError::InjectionOutsideIsland(bus.clone()))?;
                gen[k] += s[ph];
            }
        }
    }
    for (bus, s) in injections.loads.iter().filter(|(b, _)| island.contains(b)) {
        for ph in Phase::ALL {
            if s[ph] != ZERO {
                if let Some(k) = node_of(bus, ph) {
                    load[k] += s[ph];
                }
            }
        }
    }

    // Initial voltages.
    let theta = source.emf[Phase::A].arg();
    let mut v = vec![ZERO; n];
    for (p, &b) in island.bus_indices.iter().enumerate() {
        let bus = &model.buses[b];
        let warm = opts.initial.and_then(|m| m.get(&bus.id));
        for ph in bus.phases.iter() {
            let k = nodes.index[p][ph.index()];
            v[k] = match warm {
                Some(w) if w[ph].norm() > 0.0 => w[ph],
                _ => Complex64::from_polar(vnom[k], theta + ph.nominal_angle()),
            };
        }
    }
    if ideal {
        for ph in Phase::ALL {
            v[src_nodes[ph.index()]] = source.emf[ph];
        }
    }

    let unknown: Vec<usize> = (0..n).filter(|&k| !fixed[k]).collect();
    let low_v: Vec<f64> = vnom.iter().map(|vn| LOW_VOLTAGE_PU * vn).collect();

    let mismatch_vec = |v: &[Complex64]| -> (Vec<Complex64>, f64) {
        let mut f = vec![ZERO; unknown.len()];
        let mut worst: f64 = 0.0;
        for (u, &k) in unknown.iter().enumerate() {
            let mut acc = -norton[k];
            for j in 0..n {
                let yk = y[(k, j)];
                if yk != ZERO {
                    acc += yk * v[j];
                }
            }
            acc -= (gen[k] / v[k]).conj();
            acc += load_current(load[k], v[k], low_v[k]);
            f[u] = acc;
            worst = worst.max(acc.norm() * v[k].norm());
        }
        (f, worst)
    };

    let m = unknown.len();
    let (mut f, mut worst) = mismatch_vec(&v);
    let mut iterations = 0;
    while worst > opts.tolerance && iterations < opts.max_iter {
        iterations += 1;
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        let mut rhs = DVector::<f64>::zeros(2 * m);
        for (u, &k) in unknown.iter().enumerate() {
            for (w, &j) in unknown.iter().enumerate() {
                let a = y[(k, j)];
                if a != ZERO {
                    add_linear(&mut jac, u, w, a);
                }
            }
            // d/dconj(V) of −conj(S_gen / V).
            let vk = v[k];
            add_antilinear(&mut jac, u, gen[k].conj() / (vk.conj() * vk.conj()));
            if vk.norm() < low_v[k] {
                add_linear(&mut jac, u, u, load[k].conj() / (low_v[k] * low_v[k]));
            } else {
                add_antilinear(&mut jac, u, -load[k].conj() / (vk.conj() * vk.conj()));
            }
            rhs[2 * u] = -f[u].re;
            rhs[2 * u + 1] = -f[u].im;
        }
        let dx = jac.lu().solve(&rhs).ok_or(PowerFlowError::Singular(iterations))?;
        // Backtrack while the full step increases the mismatch.
        let base = v.clone();
        let mut alpha = 1.0;
        loop {
            for (u, &k) in unknown.iter().enumerate() {
                v[k] = base[k] + alpha * Complex64::new(dx[2 * u], dx[2 * u + 1]);
            }
            let next = mismatch_vec(&v);
            if next.1 < worst || alpha < 1.0 / 64.0 {
                f = next.0;
                worst = next.1;
                break;
            }
            alpha *= 0.5;
        }
        log::trace!("newton iteration {iterations}: step {alpha}, mismatch {worst:.3e}");
    }

    // Assemble solution.
    let mut sol = PowerFlowSolution {
        converged: worst <= opts.tolerance && v.iter().all(|x| x.re.is_finite() && x.im.is_finite()),
        iterations,
        mismatch: worst,
        ..Default::default()
    };
    for (p, &b) in island.bus_indices.iter().enumerate() {
        let bus = &model.buses[b];
        let mut set = PhasorSet::ZERO;
        let mut lp = PhasorSet::ZERO;
        let mut gp = PhasorSet::ZERO;
        let mut sp = PhasorSet::ZERO;
        let mut low = false;
        for ph in bus.phases.iter() {
            let k = nodes.index[p][ph.index()];
            set[ph] = v[k];
            let i_load = load_current(load[k], v[k], low_v[k]);
            lp[ph] = v[k] * i_load.conj();
            gp[ph] = gen[k];
            sp[ph] = v[k] * (shunt[k] * v[k]).conj();
            low |= load[k] != ZERO && v[k].norm() < low_v[k];
        }
        sol.bus_voltages.insert(bus.id.clone(), set);
        if lp.0.iter().any(|s| *s != ZERO) {
            sol.load_power.insert(bus.id.clone(), lp);
        }
        if gp.0.iter().any(|s| *s != ZERO) {
            sol.generation_power.insert(bus.id.clone(), gp);
        }
        if sp.0.iter().any(|s| *s != ZERO) {
            sol.shunt_power.insert(bus.id.clone(), sp);
        }
        if low {
            sol.low_voltage_buses.push(bus.id.clone());
        }
    }
    for (bi, blocks) in &island_branches {
        let br = &model.branches[*bi];
        let vf = sol.bus_voltages[&br.from_bus];
        let vt = sol.bus_voltages[&br.to_bus];
        let mut i_f = PhasorSet::ZERO;
        let mut i_t = PhasorSet::ZERO;
        for r in br.phases.iter() {
            for c in br.phases.iter() {
                let (ri, ci) = (r.index(), c.index());
                i_f[r] += blocks[0][ri][ci] * vf[c] + blocks[1][ri][ci] * vt[c];
                i_t[r] += blocks[2][ri][ci] * vf[c] + blocks[3][ri][ci] * vt[c];
            }
        }
        sol.branch_currents.insert(br.id.clone(), i_f);
        sol.branch_currents_to.insert(br.id.clone(), i_t);
    }
    let mut src_power = PhasorSet::ZERO;
    for ph in Phase::ALL {
        let k = src_nodes[ph.index()];
        let i_src = if ideal {
            // Current the ideal source must supply to satisfy KCL.
            let mut net = ZERO;
            for j in 0..n {
                net += y[(k, j)] * v[j];
            }
            net - (gen[k] / v[k]).conj() + load_current(load[k], v[k], low_v[k])
        } else {
            ys * (source.emf[ph] - v[k])
        };
        src_power[ph] = v[k] * i_src.conj();
    }
    sol.source_power.insert(source.device.clone(), src_power);

    if sol.converged {
        Ok(sol)
    } else {
        Err(PowerFlowError::NonConvergence(Box::new(sol)))
    }
}

fn load_current(s: Complex64, v: Complex64, v_low: f64) -> Complex64 {
    if s == ZERO {
        return ZERO;
    }
    if v.norm() < v_low {
        s.conj() * v / (v_low * v_low)
    } else {
        (s / v).conj()
    }
}

fn add_linear(j: &mut DMatrix<f64>, row: usize, col: usize, a: Complex64) {
    j[(2 * row, 2 * col)] += a.re;
    j[(2 * row, 2 * col + 1)] -= a.im;
    j[(2 * row + 1, 2 * col)] += a.im;
    j[(2 * row + 1, 2 * col + 1)] += a.re;
}

fn add_antilinear(j: &mut DMatrix<f64>, row: usize, b: Complex64) {
    j[(2 * row, 2 * row)] += b.re;
    j[(2 * row, 2 * row + 1)] += b.im;
    j[(2 * row + 1, 2 * row)] += b.im;
    j[(2 * row + 1, 2 * row + 1)] -= b.re;
}

/// Per-unit impedance on the 1 MVA base converted to ohms at `v_ll`.
pub fn pu_to_ohms(z_pu: Complex64, v_ll: f64) -> Complex64 {
    z_pu * (v_ll * v_ll / S_BASE_VA)
}
