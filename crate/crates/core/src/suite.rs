//! Canonical fixtures and the bundled desk suite.
//!
//! TOY3 is the repo-wide 3-bus ring (three AC lines with unit susceptance
//! magnitude, reference bus b3 by convention) used across the sensitivity and
//! OPF examples. The desk suite spans 1–30 buses and horizons {1, 2, 6, 18}
//! with and without contingencies, shunts, DC lines, and energy windows.

use crate::instance::*;

fn ac_line(id: &str, from: usize, to: usize, g: f64, b: f64, s_max: f64, s_max_ctg: f64) -> Branch {
    Branch {
        id: id.to_string(),
        from,
        to,
        kind: BranchKind::Ac(AcBranch {
            g,
            b,
            g_fr: g,
            b_fr: b,
            g_to: g,
            b_to: b,
            tau_min: 1.0,
            tau_max: 1.0,
            phi_min: 0.0,
            phi_max: 0.0,
            s_max,
            s_max_ctg,
        }),
    }
}

fn bus(id: &str) -> Bus {
    Bus { id: id.to_string(), v_min: 0.9, v_max: 1.1 }
}

/// Device with inert defaults: zero costs, wide ramps, no logic windows.
/// Fixtures override what they care about.
fn device(id: &str, kind: DeviceKind, bus: usize, t_count: usize) -> Device {
    Device {
        id: id.to_string(),
        kind,
        bus,
        c_on: vec![0.0; t_count],
        c_su: 0.0,
        c_sd: 0.0,
        c_dd: Vec::new(),
        u_on_init: 1.0,
        p_tot_init: 0.0,
        p_supc: Vec::new(),
        p_sdpc: Vec::new(),
        p_ru: 10.0,
        p_rd: 10.0,
        p_ru_su: 10.0,
        p_rd_sd: 10.0,
        p_max: vec![1.0; t_count],
        p_min: vec![0.0; t_count],
        q_max: vec![1.0; t_count],
        q_min: vec![-1.0; t_count],
        beta_max: 0.0,
        beta_min: 0.0,
        p_res_max: [Vec::new(), Vec::new(), Vec::new()],
        en_min: Vec::new(),
        en_max: Vec::new(),
        must_run: Vec::new(),
        must_out: Vec::new(),
        dn_min: vec![Vec::new(); t_count],
        up_min: vec![Vec::new(); t_count],
        su_max: Vec::new(),
        blocks: vec![(2.0, 0.0)],
    }
}

fn empty_reserves(n_dev: usize, t_count: usize) -> ReserveSpec {
    ReserveSpec {
        products: [Vec::new(), Vec::new(), Vec::new()],
        p_zones: Vec::new(),
        q_zones: Vec::new(),
        c_res_p: (0..n_dev).map(|_| [Vec::new(), Vec::new(), Vec::new()]).collect(),
        c_res_q_up: vec![vec![0.0; t_count]; n_dev],
        c_res_q_dn: vec![vec![0.0; t_count]; n_dev],
    }
}

/// Pads per-device reserve arrays to the dense shape implied by the product
/// lists, matching what the parser produces (keeps round-trips exact).
fn finish(mut inst: Instance) -> Instance {
    let t_count = inst.t_count();
    let counts = [
        inst.reserves.products[0].len(),
        inst.reserves.products[1].len(),
        inst.reserves.products[2].len(),
    ];
    for dev in &mut inst.devices {
        for cat in 0..RES_CATS {
            dev.p_res_max[cat].resize(counts[cat], 0.0);
        }
    }
    for mats in &mut inst.reserves.c_res_p {
        for cat in 0..RES_CATS {
            mats[cat].resize(counts[cat], vec![0.0; t_count]);
        }
    }
    inst
}

/// The canonical 3-bus ring: lines L12 (b1→b2), L23 (b2→b3), L13 (b1→b3),
/// each lossless with series susceptance −1; a 2 p.u. producer at b1
/// ($10/p.u.·h) and an inelastic 1 p.u. load at b3 with zero utility. T = 2.
/// The load carries reactive compensation (q_min < 0): the series-inductive
/// line ends draw reactive at b3 under transfer, and no other device sits
/// there, so without local injection capability the exchange could never
/// balance exactly.
pub fn toy3() -> Instance {
    let t_count = 2;
    let mut gen = device("G1", DeviceKind::Producer, 0, t_count);
    gen.q_max = vec![1.5; t_count];
    gen.q_min = vec![-1.5; t_count];
    gen.p_max = vec![2.0; t_count];
    gen.blocks = vec![(2.0, 10.0)];

    let mut load = device("D1", DeviceKind::Consumer, 2, t_count);
    load.p_max = vec![1.0; t_count];
    load.p_min = vec![1.0; t_count];
    load.p_tot_init = 1.0;
    load.q_max = vec![0.5; t_count];
    load.q_min = vec![-0.5; t_count];
    load.must_run = vec![0, 1];
    load.blocks = vec![(1.0, 0.0)];

    finish(Instance {
        name: "toy3".to_string(),
        s_base_mva: 100.0,
        time: TimeGrid { d: vec![1.0; t_count] },
        buses: vec![bus("b1"), bus("b2"), bus("b3")],
        branches: vec![
            ac_line("L12", 0, 1, 0.0, -1.0, 2.0, 2.0),
            ac_line("L23", 1, 2, 0.0, -1.0, 2.0, 2.0),
            ac_line("L13", 0, 2, 0.0, -1.0, 2.0, 2.0),
        ],
        shunts: Vec::new(),
        devices: vec![gen, load],
        reserves: empty_reserves(2, t_count),
        contingencies: Vec::new(),
        penalties: PenaltyCoeffs { c_p: 1000.0, c_q: 1000.0, c_s: 500.0, c_e: 500.0 },
    })
}

/// TOY3 variant with a contingency on L13 and tight post-contingency limits:
/// outaging L13 reroutes the full bus1→bus3 transfer through L12/L23 and
/// overloads both unless generation moves to the expensive unit at b3.
/// Single period.
pub fn planted_overload() -> Instance {
    let t_count = 1;
    let mut cheap = device("G1", DeviceKind::Producer, 0, t_count);
    cheap.p_max = vec![2.0];
    cheap.q_max = vec![1.5];
    cheap.q_min = vec![-1.5];
    cheap.blocks = vec![(2.0, 10.0)];

    let mut local = device("G3", DeviceKind::Producer, 2, t_count);
    local.p_max = vec![2.0];
    local.q_max = vec![1.5];
    local.q_min = vec![-1.5];
    local.blocks = vec![(2.0, 40.0)];

    let mut load = device("D1", DeviceKind::Consumer, 2, t_count);
    load.p_max = vec![1.0];
    load.p_min = vec![1.0];
    load.p_tot_init = 1.0;
    load.q_max = vec![0.3];
    load.q_min = vec![0.0];
    load.must_run = vec![0];
    load.blocks = vec![(1.0, 100.0)];

    finish(Instance {
        name: "planted_overload".to_string(),
        s_base_mva: 100.0,
        time: TimeGrid { d: vec![1.0] },
        buses: vec![bus("b1"), bus("b2"), bus("b3")],
        branches: vec![
            ac_line("L12", 0, 1, 0.0, -1.0, 2.0, 0.45),
            ac_line("L23", 1, 2, 0.0, -1.0, 2.0, 0.45),
            ac_line("L13", 0, 2, 0.0, -1.0, 2.0, 2.0),
        ],
        shunts: Vec::new(),
        devices: vec![cheap, local, load],
        reserves: empty_reserves(3, t_count),
        contingencies: vec![Contingency { id: "K1".to_string(), branch: 2 }],
        penalties: PenaltyCoeffs { c_p: 1000.0, c_q: 1000.0, c_s: 500.0, c_e: 500.0 },
    })
}

/// Enumerable fixture 1: one bus, producer vs. elastic consumer, T = 1.
/// Small enough that commitments × exact dispatch can be brute-forced.
pub fn enum1() -> Instance {
    let t_count = 1;
    let mut gen = device("G1", DeviceKind::Producer, 0, t_count);
    gen.c_on = vec![1.0];
    gen.c_su = 2.0;
    gen.c_sd = 1.0;
    gen.u_on_init = 0.0;
    gen.blocks = vec![(0.5, 8.0), (0.5, 14.0)];
    gen.q_max = vec![0.0];
    gen.q_min = vec![0.0];

    let mut load = device("D1", DeviceKind::Consumer, 0, t_count);
    load.p_max = vec![0.8];
    load.u_on_init = 0.0;
    load.c_su = 0.5;
    load.blocks = vec![(0.4, 50.0), (0.6, 25.0)];
    load.q_max = vec![0.0];
    load.q_min = vec![0.0];

    finish(Instance {
        name: "enum1".to_string(),
        s_base_mva: 100.0,
        time: TimeGrid { d: vec![1.0] },
        buses: vec![bus("b1")],
        branches: Vec::new(),
        shunts: Vec::new(),
        devices: vec![gen, load],
        reserves: empty_reserves(2, t_count),
        contingencies: Vec::new(),
        penalties: PenaltyCoeffs { c_p: 1000.0, c_q: 1000.0, c_s: 500.0, c_e: 500.0 },
    })
}

/// Enumerable fixture 2: one bus, T = 2, startup rebate, a startup budget,
/// ramping that actually binds, and a shutdown trajectory on the producer.
pub fn enum2() -> Instance {
    let t_count = 2;
    let mut gen = device("G1", DeviceKind::Producer, 0, t_count);
    gen.c_on = vec![2.0, 2.0];
    gen.c_su = 6.0;
    gen.c_sd = 2.0;
    gen.c_dd = vec![SparseTT { t: 1, tp: 0, value: 3.0 }];
    gen.u_on_init = 1.0;
    gen.p_tot_init = 0.4;
    gen.p_ru = 0.3;
    gen.p_rd = 0.3;
    gen.p_ru_su = 0.2;
    gen.p_rd_sd = 0.2;
    gen.p_max = vec![1.2, 1.2];
    gen.p_min = vec![0.2, 0.2];
    gen.p_sdpc = vec![SparseTT { t: 0, tp: 0, value: 0.1 }];
    gen.su_max = vec![SuWindow { periods: vec![0, 1], limit: 1 }];
    gen.blocks = vec![(0.6, 9.0), (0.8, 16.0)];
    gen.q_max = vec![0.0, 0.0];
    gen.q_min = vec![0.0, 0.0];

    let mut load = device("D1", DeviceKind::Consumer, 0, t_count);
    load.p_max = vec![0.7, 0.9];
    load.u_on_init = 1.0;
    load.p_tot_init = 0.3;
    load.blocks = vec![(0.5, 45.0), (0.5, 20.0)];
    load.q_max = vec![0.0, 0.0];
    load.q_min = vec![0.0, 0.0];

    finish(Instance {
        name: "enum2".to_string(),
        s_base_mva: 100.0,
        time: TimeGrid { d: vec![1.0, 1.0] },
        buses: vec![bus("b1")],
        branches: Vec::new(),
        shunts: Vec::new(),
        devices: vec![gen, load],
        reserves: empty_reserves(2, t_count),
        contingencies: Vec::new(),
        penalties: PenaltyCoeffs { c_p: 800.0, c_q: 800.0, c_s: 500.0, c_e: 500.0 },
    })
}

/// Enumerable fixture 3: one bus, T = 2, an energy floor, minimum up/down
/// windows, and a real-reserve zone with a constant requirement.
pub fn enum3() -> Instance {
    let t_count = 2;
    let mut gen = device("G1", DeviceKind::Producer, 0, t_count);
    gen.c_on = vec![1.0, 1.5];
    gen.c_su = 4.0;
    gen.c_sd = 1.0;
    gen.u_on_init = 1.0;
    gen.p_tot_init = 0.5;
    gen.p_max = vec![1.0, 1.0];
    gen.p_min = vec![0.1, 0.1];
    gen.en_min = vec![Window { periods: vec![0, 1], bound: 0.6 }];
    gen.dn_min = vec![Vec::new(), vec![0]];
    gen.up_min = vec![Vec::new(), vec![0]];
    gen.p_res_max = [vec![0.3], Vec::new(), Vec::new()];
    gen.blocks = vec![(0.5, 10.0), (0.5, 18.0)];
    gen.q_max = vec![0.0, 0.0];
    gen.q_min = vec![0.0, 0.0];

    let mut load = device("D1", DeviceKind::Consumer, 0, t_count);
    load.p_max = vec![0.6, 0.6];
    load.u_on_init = 1.0;
    load.blocks = vec![(0.6, 35.0)];
    load.q_max = vec![0.0, 0.0];
    load.q_min = vec![0.0, 0.0];

    let reserves = ReserveSpec {
        products: [vec!["ru".to_string()], Vec::new(), Vec::new()],
        p_zones: vec![PZone {
            id: "PZ1".to_string(),
            devices: vec![0],
            products: vec![(ResCat::OnUp, 0)],
            requirement: Requirement::Constant(0.1),
            penalty: 120.0,
        }],
        q_zones: Vec::new(),
        c_res_p: vec![[vec![vec![1.0; t_count]], Vec::new(), Vec::new()], [
            Vec::new(),
            Vec::new(),
            Vec::new(),
        ]],
        c_res_q_up: vec![vec![0.0; t_count]; 2],
        c_res_q_dn: vec![vec![0.0; t_count]; 2],
    };

    finish(Instance {
        name: "enum3".to_string(),
        s_base_mva: 100.0,
        time: TimeGrid { d: vec![1.0, 1.0] },
        buses: vec![bus("b1")],
        branches: Vec::new(),
        shunts: Vec::new(),
        devices: vec![gen, load],
        reserves,
        contingencies: Vec::new(),
        penalties: PenaltyCoeffs { c_p: 900.0, c_q: 900.0, c_s: 500.0, c_e: 400.0 },
    })
}

/// Ramp-interval fixture: T = 2, unit durations, all four ramp rates equal
/// to 10, flat anchor profile (5, 5) with initial injection 5. The interval
/// LP's optimum is Σδ = 20 with δ = 5 in every coordinate.
pub fn ramp_flat() -> Instance {
    let t_count = 2;
    let mut gen = device("G1", DeviceKind::Producer, 0, t_count);
    gen.p_max = vec![20.0; t_count];
    gen.p_tot_init = 5.0;
    gen.blocks = vec![(20.0, 1.0)];
    finish(Instance {
        name: "ramp_flat".to_string(),
        s_base_mva: 100.0,
        time: TimeGrid { d: vec![1.0, 1.0] },
        buses: vec![bus("b1")],
        branches: Vec::new(),
        shunts: Vec::new(),
        devices: vec![gen],
        reserves: empty_reserves(1, t_count),
        contingencies: Vec::new(),
        penalties: PenaltyCoeffs { c_p: 100.0, c_q: 100.0, c_s: 100.0, c_e: 100.0 },
    })
}

/// The bundled desk suite: every acceptance property is exercised on these.
pub fn desk_suite() -> Vec<Instance> {
    let gen = |n_bus, n_dev, t_count, seed| {
        generate_toy(ToySpec { n_bus, n_dev, t_count, seed })
            .expect("desk-suite specs are valid")
    };
    let mut no_ctg = gen(5, 4, 2, 18);
    no_ctg.contingencies.clear();
    no_ctg.name = format!("{}noctg", no_ctg.name);
    vec![
        toy3(),
        planted_overload(),
        enum1(),
        enum2(),
        enum3(),
        gen(2, 2, 1, 17),
        gen(4, 3, 2, 11),
        gen(6, 4, 6, 12),
        gen(8, 6, 6, 13),
        gen(12, 8, 6, 14),
        gen(20, 12, 6, 15),
        gen(30, 16, 18, 16),
        no_ctg,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{validate, Severity};

    #[test]
    fn all_fixtures_validate_clean() {
        for inst in desk_suite() {
            let vs = validate(&inst);
            let errors: Vec<_> =
                vs.iter().filter(|v| v.severity == Severity::Error).collect();
            assert!(errors.is_empty(), "{}: {errors:?}", inst.name);
            assert!(vs.is_empty(), "{}: warnings present: {vs:?}", inst.name);
        }
    }

    #[test]
    fn desk_suite_covers_the_required_spread() {
        let suite = desk_suite();
        assert!(suite.len() >= 12);
        let buses: Vec<usize> = suite.iter().map(|i| i.buses.len()).collect();
        assert!(buses.iter().any(|&n| n == 1));
        assert!(buses.iter().any(|&n| n >= 30));
        for t in [1usize, 2, 6, 18] {
            assert!(suite.iter().any(|i| i.t_count() == t), "missing T={t}");
        }
        assert!(suite.iter().any(|i| i.contingencies.is_empty()));
        assert!(suite.iter().any(|i| !i.contingencies.is_empty()));
        assert!(suite.iter().any(|i| !i.shunts.is_empty()));
        assert!(suite.iter().any(|i| !i.dc_branches().is_empty()));
        assert!(suite.iter().any(|i| i.devices.iter().any(|d| !d.en_min.is_empty())));
    }

    #[test]
    fn fixtures_round_trip_through_json() {
        for inst in desk_suite() {
            let json = crate::instance::serialize_instance(&inst);
            let back = crate::instance::parse_instance(json.as_bytes()).unwrap();
            assert_eq!(inst, back, "{}", inst.name);
        }
    }
}
