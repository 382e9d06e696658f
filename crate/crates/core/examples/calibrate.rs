//! Prints the quantities the built-in case constants were tuned against.
//!
//! ```text
//! cargo run --release --example calibrate [case-a|case-b|case-c]
//! ```
//!
//! Case C droop: the BESS runs at 60 Hz while charging at
//! `CASE_C_P_NOMINAL_KW`. The last EV step raises its output by about
//! 3465 kW, so `m_p = 0.9 Hz / 3465 kW = 2.597e-4 Hz/kW` lands the island
//! on 59.1 Hz before the BTB support adds its share.

use std::collections::BTreeMap;

use mbbsim::dynamics::{run, TimeSeriesRecord};
use mbbsim::scenarios::{builtin, BUILTIN};
use mbbsim::{NetworkModel, SimulationConfig};

fn summarize(records: &[TimeSeriesRecord], t0: f64, t1: f64) {
    let w: Vec<&TimeSeriesRecord> = records.iter().filter(|r| r.t > t0 && r.t < t1).collect();
    if w.is_empty() {
        return;
    }
    let n = w.len() as f64;
    print!("  ({t0:>5.2}, {t1:>5.2})");
    let mut vuf: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for r in &w {
        for (bus, m) in &r.vuf {
            if let Some(m) = m {
                let e = vuf.entry(bus.as_str()).or_default();
                e.0 += m.vuf2 / n;
                e.1 += m.vuf0 / n;
            }
        }
    }
    for (bus, (v2, v0)) in vuf {
        print!(" vuf[{bus}]={v2:.3}/{v0:.3}");
    }
    let last = w.last().unwrap();
    for (id, f) in &last.frequencies {
        print!(" f[{id}]={f:.4}");
    }
    for (id, b) in &last.btb {
        print!(" {id}={:.1}kW@{:.4}pu", b.transferred_kw, b.vdc_pu);
    }
    println!();
}

fn main() {
    let names: Vec<String> = match std::env::args().nth(1) {
        Some(n) => vec![n],
        None => BUILTIN.iter().map(|(n, _)| n.to_string()).collect(),
    };
    let model = NetworkModel::builtin();
    for name in names {
        let Some(s) = builtin(&name) else {
            eprintln!("unknown case {name}");
            std::process::exit(2);
        };
        let records = match run(&model, &s, &SimulationConfig::for_scenario(&s)) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("{name}: {e}");
                e.records
            }
        };
        println!("{name}");
        let mut edges: Vec<f64> = s.events.iter().map(|e| e.time).collect();
        edges.insert(0, 0.0);
        edges.push(s.t_end);
        edges.dedup();
        for w in edges.windows(2) {
            summarize(&records, w[0], w[1]);
        }
        let mut peak: BTreeMap<&str, f64> = BTreeMap::new();
        for r in &records {
            for (id, d) in &r.devices {
                if d.rating_kva.is_finite() {
                    let e = peak.entry(id.as_str()).or_default();
                    *e = e.max(d.p_kw.hypot(d.q_kvar) / d.rating_kva);
                }
            }
        }
        let busy: Vec<String> = peak.iter().filter(|(_, l)| **l > 0.0).map(|(id, l)| format!("{id}={l:.4}")).collect();
        println!("  peak |S|/rating: {}", busy.join(" "));
    }
}
