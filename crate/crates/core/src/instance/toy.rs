//! Seed-keyed synthetic instance generator for tests and the desk suite.
//!
//! Generated instances are always connected, pass `validate` with zero
//! violations, and admit the all-on commitment (consumers are sized well
//! below producer capacity, initial states are consistent, and no must-out
//! or conflicting logic windows are emitted).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ToySpec {
    pub n_bus: usize,
    pub n_dev: usize,
    pub t_count: usize,
    pub seed: u64,
}

pub fn generate_toy(spec: ToySpec) -> Result<Instance> {
    if spec.n_bus == 0 || spec.t_count == 0 {
        return Err(Error::BadSpec(format!(
            "need n_bus >= 1 and t_count >= 1, got n_bus={} t_count={}",
            spec.n_bus, spec.t_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_bus;
    let t_count = spec.t_count;

    // Durations follow a fixed pattern so hand checks stay easy; electrical
    // parameters take the randomness.
    let durations: Vec<f64> =
        (0..t_count).map(|t| if t % 3 == 2 { 0.5 } else { 1.0 }).collect();

    let buses: Vec<Bus> = (1..=n)
        .map(|i| Bus { id: format!("b{i}"), v_min: 0.9, v_max: 1.1 })
        .collect();

    // Chain plus a ring-closing edge (n >= 3) plus a mid chord (n >= 6).
    let mut edges: Vec<(usize, usize, String)> = Vec::new();
    for i in 0..n.saturating_sub(1) {
        edges.push((i, i + 1, format!("L{}_{}", i + 1, i + 2)));
    }
    if n >= 3 {
        edges.push((n - 1, 0, format!("L{}_1", n)));
    }
    if n >= 6 {
        edges.push((0, n / 2, format!("C1_{}", n / 2 + 1)));
    }

    let mut branches = Vec::new();
    for (e, (from, to, id)) in edges.iter().enumerate() {
        let g: f64 = rng.gen_range(0.0..0.25);
        let b: f64 = -rng.gen_range(3.0..5.0);
        let b_ch: f64 = rng.gen_range(0.0..0.02);
        // One transformer and one phase shifter for coverage on larger grids.
        let (tau_min, tau_max) = if n >= 5 && e == 1 { (0.98, 1.02) } else { (1.0, 1.0) };
        let (phi_min, phi_max) = if n >= 6 && *id == format!("C1_{}", n / 2 + 1) {
            (-0.1, 0.1)
        } else {
            (0.0, 0.0)
        };
        branches.push(Branch {
            id: id.clone(),
            from: *from,
            to: *to,
            kind: BranchKind::Ac(AcBranch {
                g,
                b,
                g_fr: g,
                b_fr: b + b_ch / 2.0,
                g_to: g,
                b_to: b + b_ch / 2.0,
                tau_min,
                tau_max,
                phi_min,
                phi_max,
                s_max: 0.0,     // sized below once loads are known
                s_max_ctg: 0.0, // likewise
            }),
        });
    }
    if n >= 6 {
        branches.push(Branch {
            id: "DC1".to_string(),
            from: 1,
            to: n - 2,
            kind: BranchKind::Dc(DcBranch {
                p_max: 0.3,
                q_fr_min: -0.2,
                q_fr_max: 0.2,
                q_to_min: -0.2,
                q_to_max: 0.2,
            }),
        });
    }

    let mut shunts = Vec::new();
    if n >= 4 {
        shunts.push(Shunt {
            id: "SH1".to_string(),
            bus: 1,
            g_sh: 0.0,
            b_sh: 0.02,
            step_min: 0.0,
            step_max: 3.0,
        });
    }
    if n >= 10 {
        shunts.push(Shunt {
            id: "SH2".to_string(),
            bus: n / 2,
            g_sh: 0.005,
            b_sh: 0.03,
            step_min: 0.0,
            step_max: 2.0,
        });
    }

    let products = [vec!["ru".to_string()], vec!["rd".to_string()], vec!["ns".to_string()]];

    // Producers first (even positions), consumers after; consumer capacity is
    // scaled so the all-on commitment can always cover the load.
    let mut devices = Vec::new();
    let n_prod = spec.n_dev - spec.n_dev / 2;
    let mut producer_cap = 0.0;
    for k in 0..spec.n_dev {
        let is_producer = k < n_prod;
        let bus = (k * 7 + k / n) % n;
        let cap: f64 = if is_producer {
            rng.gen_range(0.8..1.6)
        } else {
            rng.gen_range(0.3..0.8)
        };
        if is_producer {
            producer_cap += cap;
        }
        let kind = if is_producer { DeviceKind::Producer } else { DeviceKind::Consumer };
        let (blocks, c_on, c_su, c_sd): (Vec<(f64, f64)>, f64, f64, f64) = if is_producer {
            let m1: f64 = rng.gen_range(5.0..15.0);
            let m2: f64 = m1 + rng.gen_range(0.0..10.0);
            (
                vec![(0.6 * cap, m1), (0.6 * cap, m2)],
                rng.gen_range(0.5..2.0),
                rng.gen_range(2.0..8.0),
                rng.gen_range(0.5..2.0),
            )
        } else {
            let u1: f64 = rng.gen_range(30.0..60.0);
            let u2: f64 = u1 - rng.gen_range(5.0..20.0);
            (
                vec![(0.5 * cap, u1), (0.7 * cap, u2)],
                rng.gen_range(0.0..0.5),
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..1.0),
            )
        };
        let p_min_frac = if is_producer { 0.1 } else { 0.0 };
        // Device 1 (when a second producer exists) begins offline and carries
        // a one-period pre-startup trajectory; device 2 a post-shutdown tail
        // guarded by the minimum-downtime windows emitted below.
        let starts_off = is_producer && k == 1 && t_count >= 2;
        let p_supc = if starts_off {
            vec![SparseTT { t: 0, tp: 1, value: 0.1 * cap }]
        } else {
            Vec::new()
        };
        let p_sdpc = if is_producer && k == 2 && t_count >= 3 {
            vec![
                SparseTT { t: 1, tp: 1, value: 0.15 * cap },
                SparseTT { t: 2, tp: 1, value: 0.05 * cap },
            ]
        } else {
            Vec::new()
        };
        let c_dd = if is_producer && k == 0 && t_count >= 3 {
            vec![SparseTT { t: 2, tp: 0, value: (c_su / 4.0).min(1.0) }]
        } else {
            Vec::new()
        };
        // Minimum up/down windows of length one prior period on producers.
        let (dn_min, up_min) = if is_producer && t_count >= 3 {
            let dn: Vec<Vec<usize>> =
                (0..t_count).map(|t| if t >= 1 { vec![t - 1] } else { Vec::new() }).collect();
            (dn.clone(), dn)
        } else {
            (vec![Vec::new(); t_count], vec![Vec::new(); t_count])
        };
        let su_max = if is_producer && k == 0 && t_count >= 2 {
            vec![SuWindow { periods: (0..t_count).collect(), limit: 1 }]
        } else {
            Vec::new()
        };
        let (en_min, en_max) = if is_producer && k == 0 && t_count >= 2 {
            let total_d: f64 = durations.iter().sum();
            (
                vec![Window {
                    periods: (0..t_count).collect(),
                    bound: 0.5 * p_min_frac * cap * total_d,
                }],
                vec![Window { periods: (0..t_count).collect(), bound: 0.9 * cap * total_d }],
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let p_res_max = if is_producer {
            [vec![0.15 * cap], vec![0.15 * cap], vec![0.3 * cap]]
        } else {
            [vec![0.0], vec![0.0], vec![0.0]]
        };
        let u_on_init = if starts_off { 0.0 } else { 1.0 };
        devices.push(Device {
            id: format!("{}{}", if is_producer { "G" } else { "D" }, k + 1),
            kind,
            bus,
            c_on: vec![c_on; t_count],
            c_su,
            c_sd,
            c_dd,
            u_on_init,
            p_tot_init: if starts_off { 0.0 } else { p_min_frac * cap },
            p_supc,
            p_sdpc,
            p_ru: cap,
            p_rd: cap,
            p_ru_su: 0.5 * cap,
            p_rd_sd: 0.5 * cap,
            p_max: vec![cap; t_count],
            p_min: vec![p_min_frac * cap; t_count],
            q_max: vec![if is_producer { 0.6 * cap } else { 0.4 * cap }; t_count],
            q_min: vec![if is_producer { -0.6 * cap } else { -0.1 * cap }; t_count],
            beta_max: 0.0,
            beta_min: 0.0,
            p_res_max,
            en_min,
            en_max,
            must_run: Vec::new(),
            must_out: Vec::new(),
            dn_min,
            up_min,
            su_max,
            blocks,
        });
    }
    // Scale consumers down if they collectively exceed 70% of producer capacity.
    let consumer_cap: f64 =
        devices.iter().filter(|d| !d.is_producer()).map(|d| d.p_max[0]).sum();
    if consumer_cap > 0.7 * producer_cap && consumer_cap > 0.0 {
        let scale = 0.7 * producer_cap / consumer_cap;
        for d in devices.iter_mut().filter(|d| !d.is_producer()) {
            for t in 0..t_count {
                d.p_max[t] *= scale;
                d.q_max[t] *= scale;
                d.q_min[t] *= scale;
            }
            d.p_ru *= scale;
            d.p_rd *= scale;
            d.p_ru_su *= scale;
            d.p_rd_sd *= scale;
            for b in &mut d.blocks {
                b.0 *= scale;
            }
        }
    }

    // Branch limits sized off total producer capacity: loose enough that the
    // base case is rarely binding while still finite.
    let s_cap = (1.2 * producer_cap).max(1.0);
    for br in &mut branches {
        if let BranchKind::Ac(p) = &mut br.kind {
            p.s_max = s_cap;
            p.s_max_ctg = s_cap;
        }
    }

    let producers: Vec<usize> =
        devices.iter().enumerate().filter(|(_, d)| d.is_producer()).map(|(j, _)| j).collect();
    let mut p_zones = Vec::new();
    let mut q_zones = Vec::new();
    if !producers.is_empty() {
        p_zones.push(PZone {
            id: "PZ1".to_string(),
            devices: producers.clone(),
            products: vec![(ResCat::OnUp, 0)],
            requirement: Requirement::FracOfSum(0.1),
            penalty: 200.0,
        });
        if spec.n_dev >= 2 {
            p_zones.push(PZone {
                id: "PZ2".to_string(),
                devices: producers.clone(),
                products: vec![(ResCat::OnDn, 0)],
                requirement: Requirement::Constant(0.05),
                penalty: 150.0,
            });
        }
        if producers.len() >= 3 {
            p_zones.push(PZone {
                id: "PZ3".to_string(),
                devices: producers.clone(),
                products: vec![(ResCat::OnUp, 0), (ResCat::OffUp, 0)],
                requirement: Requirement::FracOfMax(0.5),
                penalty: 100.0,
            });
        }
        if spec.n_dev >= 2 {
            q_zones.push(QZone {
                id: "QZ1".to_string(),
                devices: producers.clone(),
                dir: QDir::Up,
                requirement: Requirement::Constant(0.02),
                penalty: 100.0,
            });
        }
    }
    let c_res_p: Vec<[Vec<Vec<f64>>; RES_CATS]> = devices
        .iter()
        .map(|d| {
            let cost = |c: f64| {
                if d.is_producer() {
                    vec![vec![c; t_count]]
                } else {
                    vec![vec![0.0; t_count]]
                }
            };
            [cost(1.0), cost(0.8), cost(0.5)]
        })
        .collect();
    let c_res_q_up: Vec<Vec<f64>> = devices
        .iter()
        .map(|d| vec![if d.is_producer() { 0.2 } else { 0.0 }; t_count])
        .collect();
    let c_res_q_dn = c_res_q_up.clone();

    // Contingencies only on cycle edges (single outages never island a ring).
    let mut contingencies = Vec::new();
    if n >= 3 {
        contingencies.push(Contingency { id: "K1".to_string(), branch: 0 });
        let ring_close = branches.iter().position(|b| b.id == format!("L{}_1", n)).unwrap();
        contingencies.push(Contingency { id: "K2".to_string(), branch: ring_close });
    }

    let inst = Instance {
        name: format!("toy{}x{}t{}s{}", n, spec.n_dev, t_count, spec.seed),
        s_base_mva: 100.0,
        time: TimeGrid { d: durations },
        buses,
        branches,
        shunts,
        devices,
        reserves: ReserveSpec { products, p_zones, q_zones, c_res_p, c_res_q_up, c_res_q_dn },
        contingencies,
        penalties: PenaltyCoeffs { c_p: 2000.0, c_q: 2000.0, c_s: 1000.0, c_e: 800.0 },
    };
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::validate::{validate, Severity};

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy(ToySpec { n_bus: 1, n_dev: 1, t_count: 1, seed: 0 }).unwrap();
        let b = generate_toy(ToySpec { n_bus: 1, n_dev: 1, t_count: 1, seed: 0 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_instances_validate_clean() {
        for seed in 0..8 {
            let inst =
                generate_toy(ToySpec { n_bus: 3, n_dev: 2, t_count: 2, seed }).unwrap();
            let vs = validate(&inst);
            assert!(
                vs.iter().all(|v| v.severity == Severity::Warning) && vs.is_empty(),
                "seed {seed}: {vs:?}"
            );
        }
    }

    #[test]
    fn big_toy_is_connected_and_clean() {
        let inst = generate_toy(ToySpec { n_bus: 30, n_dev: 20, t_count: 18, seed: 1 }).unwrap();
        assert!(crate::instance::validate::ac_connected(&inst));
        assert_eq!(validate(&inst), Vec::new());
        assert!(!inst.shunts.is_empty());
        assert!(!inst.dc_branches().is_empty());
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(matches!(
            generate_toy(ToySpec { n_bus: 0, n_dev: 1, t_count: 1, seed: 0 }),
            Err(crate::Error::BadSpec(_))
        ));
        assert!(matches!(
            generate_toy(ToySpec { n_bus: 1, n_dev: 1, t_count: 0, seed: 0 }),
            Err(crate::Error::BadSpec(_))
        ));
    }

    #[test]
    fn generated_instances_round_trip() {
        let inst = generate_toy(ToySpec { n_bus: 6, n_dev: 4, t_count: 6, seed: 42 }).unwrap();
        let json = crate::instance::serialize_instance(&inst);
        let back = crate::instance::parse_instance(json.as_bytes()).unwrap();
        assert_eq!(inst, back);
    }
}
