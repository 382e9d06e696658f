//! Built-in test system: two copies of the IEEE 13-node feeder (MG0 and
//! MG1) and an external grid, tied through switches at a common PCC bus.
//!
//! MG1 bus names append a `1` to the MG0 name (`671` → `6711`). MG1 keeps
//! the feeder's head regulator between `6501` and `6301`; MG0 has none.

use std::collections::BTreeMap;

use num_complex::Complex64;

use super::{
    Bus, BranchKind, BranchSpec, Load, LineImpedance, PhaseMatrix, RegulatorSettings, ShuntCapacitor,
    SystemDescription, TransformerData,
};
use crate::devices::{BtbParams, DeviceKind, DeviceSpec, DieselParams, GridFormingParams, PvParams, V2gParams};
use crate::phasor::{Phase, PhaseSet};

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

const Z0: Complex64 = Complex64::new(0.0, 0.0);

/// Configuration codes with their phase-impedance matrices (Ω/mile).
pub const LINE_CONFIGURATIONS: [&str; 7] = ["601", "602", "603", "604", "605", "606", "607"];

/// Phase-impedance matrix of a standard IEEE 13-node line configuration.
pub fn line_configuration(code: &str) -> Option<PhaseMatrix> {
    let m = match code {
        "601" => [
            [c(0.3465, 1.0179), c(0.1560, 0.5017), c(0.1580, 0.4236)],
            [c(0.1560, 0.5017), c(0.3375, 1.0478), c(0.1535, 0.3849)],
            [c(0.1580, 0.4236), c(0.1535, 0.3849), c(0.3414, 1.0348)],
        ],
        "602" => [
            [c(0.7526, 1.1814), c(0.1580, 0.4236), c(0.1560, 0.5017)],
            [c(0.1580, 0.4236), c(0.7475, 1.1983), c(0.1535, 0.3849)],
            [c(0.1560, 0.5017), c(0.1535, 0.3849), c(0.7436, 1.2112)],
        ],
        "603" => [
            [Z0, Z0, Z0],
            [Z0, c(1.3294, 1.3471), c(0.2066, 0.4591)],
            [Z0, c(0.2066, 0.4591), c(1.3238, 1.3569)],
        ],
        "604" => [
            [c(1.3238, 1.3569), Z0, c(0.2066, 0.4591)],
            [Z0, Z0, Z0],
            [c(0.2066, 0.4591), Z0, c(1.3294, 1.3471)],
        ],
        "605" => [[Z0, Z0, Z0], [Z0, Z0, Z0], [Z0, Z0, c(1.3292, 1.3475)]],
        "606" => [
            [c(0.7982, 0.4463), c(0.3192, 0.0328), c(0.2849, -0.0143)],
            [c(0.3192, 0.0328), c(0.7891, 0.4041), c(0.3192, 0.0328)],
            [c(0.2849, -0.0143), c(0.3192, 0.0328), c(0.7982, 0.4463)],
        ],
        "607" => [[c(1.3425, 0.5124), Z0, Z0], [Z0, Z0, Z0], [Z0, Z0, Z0]],
        _ => return None,
    };
    Some(m)
}

fn phases(s: &str) -> PhaseSet {
    serde_json::from_value(serde_json::Value::String(s.into())).expect("valid phase letters")
}

struct Builder {
    desc: SystemDescription,
}

impl Builder {
    fn bus(&mut self, id: &str, kv: f64, ph: &str) {
        self.desc.buses.push(Bus { id: id.into(), nominal_voltage: kv * 1e3, phases: phases(ph) });
    }

    fn line(&mut self, from: &str, to: &str, config: &str, length_ft: f64, ph: &str) {
        self.desc.branches.push(BranchSpec {
            id: format!("{from}-{to}"),
            from: from.into(),
            to: to.into(),
            phases: phases(ph),
            kind: BranchKind::Line { length_ft },
            line_impedance: Some(LineImpedance::Configuration(config.into())),
            length_ft: None,
            series_impedance: None,
        });
    }

    /// Switch; `section` gives a switched line section `(config, ft)`.
    fn switch(&mut self, from: &str, to: &str, ph: &str, closed: bool, section: Option<(&str, f64)>) {
        self.desc.branches.push(BranchSpec {
            id: format!("{from}-{to}"),
            from: from.into(),
            to: to.into(),
            phases: phases(ph),
            kind: BranchKind::Switch { normally_closed: closed },
            line_impedance: section.map(|(cfg, _)| LineImpedance::Configuration(cfg.into())),
            length_ft: section.map(|(_, ft)| ft),
            series_impedance: None,
        });
    }

    fn transformer(&mut self, from: &str, to: &str) {
        self.desc.branches.push(BranchSpec {
            id: format!("{from}-{to}"),
            from: from.into(),
            to: to.into(),
            phases: PhaseSet::ABC,
            kind: BranchKind::Transformer(TransformerData {
                rating_kva: 1000.0,
                primary_voltage: 4160.0,
                secondary_voltage: 480.0,
            }),
            line_impedance: None,
            length_ft: None,
            series_impedance: Some(c(0.011, 0.02)),
        });
    }

    fn feeder(&mut self, suffix: &str) {
        let n = |base: &str| format!("{base}{suffix}");
        let head = n("650");
        self.bus(&head, 4.16, "ABC");
        let top = if suffix.is_empty() {
            head.clone()
        } else {
            // Regulated head: regulator output bus.
            let out = "6301".to_string();
            self.bus(&out, 4.16, "ABC");
            self.desc.branches.push(BranchSpec {
                id: format!("{head}-{out}"),
                from: head.clone(),
                to: out.clone(),
                phases: PhaseSet::ABC,
                kind: BranchKind::Regulator(RegulatorSettings::standard(&n("680"), 20.0)),
                line_impedance: None,
                length_ft: None,
                series_impedance: Some(c(0.0, 0.01)),
            });
            out
        };
        for (b, kv, ph) in [
            ("632", 4.16, "ABC"),
            ("633", 4.16, "ABC"),
            ("634", 0.48, "ABC"),
            ("645", 4.16, "BC"),
            ("646", 4.16, "BC"),
            ("670", 4.16, "ABC"),
            ("671", 4.16, "ABC"),
            ("680", 4.16, "ABC"),
            ("684", 4.16, "AC"),
            ("611", 4.16, "C"),
            ("652", 4.16, "A"),
            ("692", 4.16, "ABC"),
            ("675", 4.16, "ABC"),
        ] {
            self.bus(&n(b), kv, ph);
        }
        self.line(&top, &n("632"), "601", 2000.0, "ABC");
        self.switch(&n("632"), &n("633"), "ABC", true, Some(("602", 500.0)));
        self.transformer(&n("633"), &n("634"));
        self.switch(&n("632"), &n("645"), "BC", true, Some(("603", 500.0)));
        self.line(&n("645"), &n("646"), "603", 300.0, "BC");
        self.line(&n("632"), &n("670"), "601", 667.0, "ABC");
        self.line(&n("670"), &n("671"), "601", 1333.0, "ABC");
        self.line(&n("671"), &n("680"), "601", 1000.0, "ABC");
        self.line(&n("671"), &n("684"), "604", 300.0, "AC");
        self.line(&n("684"), &n("611"), "605", 300.0, "C");
        self.line(&n("684"), &n("652"), "607", 800.0, "A");
        self.switch(&n("671"), &n("692"), "ABC", true, None);
        self.line(&n("692"), &n("675"), "606", 500.0, "ABC");

        let l = &mut self.desc.loads;
        l.push(Load::balanced(&format!("load_{}", n("634")), &n("634"), 400.0, 290.0));
        l.push(Load::balanced(&format!("load_{}", n("670")), &n("670"), 200.0, 116.0));
        l.push(Load::balanced(&format!("load_{}", n("675")), &n("675"), 843.0, 462.0));
        l.push(Load::balanced(&format!("load_{}", n("680")), &n("680"), 1155.0, 660.0));
        self.desc.capacitors.push(ShuntCapacitor {
            id: format!("cap_{}", n("675")),
            bus: n("675"),
            rating_kvar: 86.52,
            status: true,
        });

        let d = &mut self.desc.devices;
        d.push(DeviceSpec::new(
            &format!("bess_{}", n("680")),
            &n("680"),
            DeviceKind::GridForming(GridFormingParams::battery(3000.0, 4000.0)),
        ));
        d.push(DeviceSpec::new(
            &format!("pv_{}", n("675")),
            &n("675"),
            DeviceKind::Pv(PvParams { rating_kw: 1600.0, schedule: vec![(0.0, 1600.0)], time_constant_s: 0.1 }),
        ));
        d.push(DeviceSpec::new(
            &format!("dg_{}", n("633")),
            &n("633"),
            DeviceKind::Diesel(DieselParams {
                rating_kva: 3000.0,
                p_setpoint_kw: 0.0,
                governor_time_constant_s: 0.5,
            }),
        ));
    }
}

/// Description of the twin-feeder system with grid, PCC and BTB.
pub fn twin_feeder_description() -> SystemDescription {
    let mut b = Builder { desc: SystemDescription::default() };
    b.feeder("");
    b.feeder("1");
    b.bus("pcc", 4.16, "ABC");
    b.bus("grid", 4.16, "ABC");
    b.switch("grid", "pcc", "ABC", true, None);
    b.switch("pcc", "650", "ABC", false, None);
    b.switch("pcc", "6501", "ABC", true, None);

    // Residential single-phase lumps on MG0's 645 lateral.
    b.desc.loads.push(Load::single_phase("load_645", "645", Phase::B, 680.0, 500.0));
    b.desc.loads.push(Load::single_phase("load_646", "646", Phase::B, 690.0, 396.0));
    // MG1 single-phase loads.
    for (id, bus, ph, kw, kvar) in [
        ("load_6451", "6451", Phase::B, 170.0, 125.0),
        ("load_6461", "6461", Phase::B, 230.0, 132.0),
        ("load_6111", "6111", Phase::C, 170.0, 80.0),
        ("load_6521", "6521", Phase::A, 128.0, 86.0),
    ] {
        b.desc.loads.push(Load::single_phase(id, bus, ph, kw, kvar));
    }

    for bus in ["645", "646"] {
        b.desc.devices.push(DeviceSpec::new(
            &format!("v2g_{bus}"),
            bus,
            DeviceKind::V2g(V2gParams {
                rating_kva: 500.0,
                phase: Phase::B,
                p_setpoint_kw: 0.0,
                q_setpoint_kvar: 0.0,
                time_constant_s: 0.1,
            }),
        ));
    }
    b.desc
        .devices
        .push(DeviceSpec::new("btb", "650", DeviceKind::Btb(BtbParams::new("pcc"))));
    b.desc.devices.push(DeviceSpec::new(
        "grid_source",
        "grid",
        DeviceKind::GridForming(GridFormingParams::stiff_grid(c(0.001, 0.01))),
    ));
    b.desc.switches = BTreeMap::new();
    b.desc
}
