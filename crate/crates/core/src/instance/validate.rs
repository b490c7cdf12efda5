//! Data validation: every cheaply checkable sub-condition of the model's
//! standing data assumption gets a violation code and at least one negative
//! test. Violations are data, not errors; an empty list means the instance is
//! accepted by the solver pipeline.

use super::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub code: &'static str,
    pub location: String,
    pub detail: String,
    pub severity: Severity,
}

fn push(out: &mut Vec<Violation>, code: &'static str, location: String, detail: String) {
    out.push(Violation { code, location, detail, severity: Severity::Error });
}

fn warn(out: &mut Vec<Violation>, code: &'static str, location: String, detail: String) {
    out.push(Violation { code, location, detail, severity: Severity::Warning });
}

fn is_integral(x: f64) -> bool {
    x.fract() == 0.0
}

/// Checks every structural condition the data must satisfy for the solver
/// pipeline to be well-posed: startup-rebate domination (so commitment costs
/// stay nonnegative), nonnegativity of costs and trajectories, bound
/// orderings, integrality of discrete data, piecewise-linear shape, and AC
/// connectivity. Conditions that would require searching over commitments are
/// replaced by necessary structural checks reported at warning grade.
pub fn validate(inst: &Instance) -> Vec<Violation> {
    let mut out = Vec::new();
    let t_count = inst.t_count();

    if t_count == 0 {
        push(&mut out, "A1_TIME", "time.durations".into(), "horizon is empty".into());
    }
    for (t, &d) in inst.time.d.iter().enumerate() {
        if d <= 0.0 {
            push(
                &mut out,
                "A1_TIME",
                format!("time.durations[{t}]"),
                format!("duration {d} must be positive"),
            );
        }
    }
    if inst.s_base_mva <= 0.0 {
        push(
            &mut out,
            "A1_NONNEG",
            "meta.s_base_mva".into(),
            format!("system base {} must be positive", inst.s_base_mva),
        );
    }

    for (i, bus) in inst.buses.iter().enumerate() {
        if !(0.0 < bus.v_min && bus.v_min <= bus.v_max) {
            push(
                &mut out,
                "A1_BOUND_ORDER",
                format!("buses[{i}]"),
                format!("need 0 < v_min <= v_max, found [{}, {}]", bus.v_min, bus.v_max),
            );
        }
    }

    for (j, br) in inst.branches.iter().enumerate() {
        match &br.kind {
            BranchKind::Ac(p) => {
                if !(0.0 < p.tau_min && p.tau_min <= p.tau_max) {
                    push(
                        &mut out,
                        "A1_BOUND_ORDER",
                        format!("branches[{j}]"),
                        format!("need 0 < tau_min <= tau_max, found [{}, {}]", p.tau_min, p.tau_max),
                    );
                }
                if p.phi_min > p.phi_max {
                    push(
                        &mut out,
                        "A1_BOUND_ORDER",
                        format!("branches[{j}]"),
                        format!("phi bounds out of order: [{}, {}]", p.phi_min, p.phi_max),
                    );
                }
                if p.s_max < 0.0 || p.s_max_ctg < 0.0 {
                    push(
                        &mut out,
                        "A1_NONNEG",
                        format!("branches[{j}]"),
                        format!("apparent-power limits must be >= 0 ({}, {})", p.s_max, p.s_max_ctg),
                    );
                }
            }
            BranchKind::Dc(p) => {
                if p.p_max < 0.0 {
                    push(
                        &mut out,
                        "A1_NONNEG",
                        format!("branches[{j}]"),
                        format!("DC p_max must be >= 0, found {}", p.p_max),
                    );
                }
                if p.q_fr_min > p.q_fr_max || p.q_to_min > p.q_to_max {
                    push(
                        &mut out,
                        "A1_BOUND_ORDER",
                        format!("branches[{j}]"),
                        "DC reactive boxes out of order".into(),
                    );
                }
            }
        }
    }

    for (s, sh) in inst.shunts.iter().enumerate() {
        if !is_integral(sh.step_min) || !is_integral(sh.step_max) {
            push(
                &mut out,
                "A1_INTEGRALITY",
                format!("shunts[{s}]"),
                format!("step bounds must be integers, found [{}, {}]", sh.step_min, sh.step_max),
            );
        }
        if !(0.0 <= sh.step_min && sh.step_min <= sh.step_max) {
            push(
                &mut out,
                "A1_BOUND_ORDER",
                format!("shunts[{s}]"),
                format!("need 0 <= step_min <= step_max, found [{}, {}]", sh.step_min, sh.step_max),
            );
        }
    }

    for (n, dev) in inst.devices.iter().enumerate() {
        let loc = |field: &str| format!("devices[{n}].{field}");
        if dev.u_on_init != 0.0 && dev.u_on_init != 1.0 {
            push(
                &mut out,
                "A1_INTEGRALITY",
                loc("init.u_on_0"),
                format!("initial commitment must be 0 or 1, found {}", dev.u_on_init),
            );
        }
        if dev.c_su < 0.0 || dev.c_sd < 0.0 {
            push(
                &mut out,
                "A1_NONNEG",
                loc("uc_cost"),
                format!("startup/shutdown costs must be >= 0 ({}, {})", dev.c_su, dev.c_sd),
            );
        }
        for e in &dev.c_dd {
            if e.value < 0.0 {
                push(
                    &mut out,
                    "A1_NONNEG",
                    loc("uc_cost.c_dd"),
                    format!("rebate at (t={}, tp={}) is negative: {}", e.t + 1, e.tp + 1, e.value),
                );
            }
        }
        // Startup rebates may never exceed the startup cost (keeps the
        // commitment cost nonnegative on feasible schedules).
        for t in 0..t_count {
            let rebate: f64 =
                dev.c_dd.iter().filter(|e| e.t == t).map(|e| e.value.max(0.0)).sum();
            if rebate > dev.c_su + 1e-12 {
                push(
                    &mut out,
                    "A1_SU_DD",
                    loc("uc_cost.c_dd"),
                    format!(
                        "sum of rebates {} at t={} exceeds startup cost {}",
                        rebate,
                        t + 1,
                        dev.c_su
                    ),
                );
            }
        }
        for e in dev.p_supc.iter().chain(dev.p_sdpc.iter()) {
            if e.value < 0.0 {
                push(
                    &mut out,
                    "A1_NONNEG",
                    loc("traj"),
                    format!("trajectory power at (t={}, tp={}) is negative", e.t + 1, e.tp + 1),
                );
            }
        }
        if dev.p_ru < 0.0 || dev.p_rd < 0.0 || dev.p_ru_su < 0.0 || dev.p_rd_sd < 0.0 {
            push(&mut out, "A1_NONNEG", loc("ramp"), "ramp rates must be >= 0".into());
        }
        for t in 0..t_count {
            if dev.p_min[t] > dev.p_max[t] {
                push(
                    &mut out,
                    "A1_BOUND_ORDER",
                    loc("power"),
                    format!("p_min {} > p_max {} at t={}", dev.p_min[t], dev.p_max[t], t + 1),
                );
            }
            if dev.q_min[t] > dev.q_max[t] {
                push(
                    &mut out,
                    "A1_BOUND_ORDER",
                    loc("power"),
                    format!("q_min {} > q_max {} at t={}", dev.q_min[t], dev.q_max[t], t + 1),
                );
            }
        }
        for cat in ResCat::ALL {
            for (r, &cap) in dev.p_res_max[cat as usize].iter().enumerate() {
                if cap < 0.0 {
                    push(
                        &mut out,
                        "A1_NONNEG",
                        loc(&format!("reserves.p_res_max.{}[{r}]", cat.name())),
                        format!("reserve cap {cap} must be >= 0"),
                    );
                }
            }
        }
        for w in dev.en_min.iter().chain(dev.en_max.iter()) {
            if w.periods.is_empty() {
                push(&mut out, "A1_WINDOW", loc("energy_windows"), "empty window".into());
            }
        }
        // Piecewise-linear shape: producer cost convex (marginals
        // nondecreasing), consumer utility concave (marginals nonincreasing).
        for win in dev.blocks.windows(2) {
            let bad = match dev.kind {
                DeviceKind::Producer => win[1].1 < win[0].1 - 1e-12,
                DeviceKind::Consumer => win[1].1 > win[0].1 + 1e-12,
            };
            if bad {
                push(
                    &mut out,
                    "A1_PWL_SHAPE",
                    loc("pow_curve"),
                    format!(
                        "marginals {} -> {} break {}",
                        win[0].1,
                        win[1].1,
                        if dev.is_producer() { "convexity" } else { "concavity" }
                    ),
                );
                break;
            }
        }
        for &(width, _) in &dev.blocks {
            if width < 0.0 {
                push(&mut out, "A1_NONNEG", loc("pow_curve"), "negative block width".into());
            }
        }
        // Contradictory commitment logic.
        for &t in &dev.must_run {
            if dev.must_out.contains(&t) {
                push(
                    &mut out,
                    "A1_LOGIC",
                    loc("commit_logic"),
                    format!("period {} is both must-run and must-out", t + 1),
                );
            }
        }
        // Necessary condition for the no-simultaneous-commitment property:
        // startup/shutdown trajectory windows must not overlap must-run
        // periods (a must-run period forces u_on = 1, so any startup or
        // shutdown injecting power there would double-commit the device).
        for t in 0..t_count {
            if !dev.must_run.contains(&t) {
                continue;
            }
            if !dev.t_supc(t).is_empty() || !dev.t_sdpc(t).is_empty() {
                warn(
                    &mut out,
                    "A1_TRAJ_MUSTRUN_OVERLAP",
                    loc("traj"),
                    format!("trajectory window overlaps must-run period {}", t + 1),
                );
            }
        }
    }

    for (z, zone) in inst.reserves.p_zones.iter().enumerate() {
        if zone.devices.is_empty() {
            push(
                &mut out,
                "A1_ZONE",
                format!("reserves.p_zones[{z}]"),
                "zone device set is empty".into(),
            );
        }
        if zone.penalty < 0.0 {
            push(
                &mut out,
                "A1_NONNEG",
                format!("reserves.p_zones[{z}]"),
                format!("penalty {} must be >= 0", zone.penalty),
            );
        }
    }
    for (z, zone) in inst.reserves.q_zones.iter().enumerate() {
        if zone.devices.is_empty() {
            push(
                &mut out,
                "A1_ZONE",
                format!("reserves.q_zones[{z}]"),
                "zone device set is empty".into(),
            );
        }
        if zone.penalty < 0.0 {
            push(
                &mut out,
                "A1_NONNEG",
                format!("reserves.q_zones[{z}]"),
                format!("penalty {} must be >= 0", zone.penalty),
            );
        }
    }
    for (j, mats) in inst.reserves.c_res_p.iter().enumerate() {
        let neg = mats.iter().flatten().flatten().any(|&c| c < 0.0)
            || inst.reserves.c_res_q_up[j].iter().any(|&c| c < 0.0)
            || inst.reserves.c_res_q_dn[j].iter().any(|&c| c < 0.0);
        if neg {
            push(
                &mut out,
                "A1_NONNEG",
                format!("reserves.var_costs[{j}]"),
                "reserve variable costs must be >= 0".into(),
            );
        }
    }

    let p = &inst.penalties;
    if p.c_p < 0.0 || p.c_q < 0.0 || p.c_s < 0.0 || p.c_e < 0.0 {
        push(&mut out, "A1_NONNEG", "penalties".into(), "penalty coefficients must be >= 0".into());
    }

    // AC subgraph connectivity (breadth-first search over AC branches).
    if !inst.buses.is_empty() && !ac_connected(inst) {
        push(
            &mut out,
            "A1_CONNECTIVITY",
            "branches".into(),
            "AC subgraph does not connect all buses".into(),
        );
    }

    out
}

/// True when every bus is reachable from bus 0 using AC branches only.
pub fn ac_connected(inst: &Instance) -> bool {
    let n = inst.buses.len();
    if n == 0 {
        return true;
    }
    let mut adj = vec![Vec::new(); n];
    for br in &inst.branches {
        if br.is_ac() {
            adj[br.from].push(br.to);
            adj[br.to].push(br.from);
        }
    }
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for &k in &adj[i] {
            if !seen[k] {
                seen[k] = true;
                count += 1;
                queue.push_back(k);
            }
        }
    }
    count == n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::suite;

    fn errors_only(vs: &[Violation]) -> Vec<&Violation> {
        vs.iter().filter(|v| v.severity == Severity::Error).collect()
    }

    #[test]
    fn toy3_is_clean() {
        assert_eq!(validate(&suite::toy3()), Vec::new());
    }

    #[test]
    fn rebates_above_startup_cost_flagged() {
        let mut inst = suite::toy3();
        let dev = &mut inst.devices[0];
        dev.c_su = 4.0;
        dev.c_dd = vec![SparseTT { t: 1, tp: 0, value: 10.0 }];
        let vs = validate(&inst);
        assert!(vs.iter().any(|v| v.code == "A1_SU_DD"), "{vs:?}");
    }

    #[test]
    fn fractional_shunt_steps_flagged() {
        let mut inst = suite::toy3();
        inst.shunts.push(Shunt {
            id: "SH_BAD".into(),
            bus: 0,
            g_sh: 0.0,
            b_sh: 0.1,
            step_min: 0.5,
            step_max: 5.0,
        });
        let vs = validate(&inst);
        assert!(vs.iter().any(|v| v.code == "A1_INTEGRALITY"), "{vs:?}");
    }

    #[test]
    fn each_negative_fixture_triggers_exactly_its_code() {
        // (mutation, expected code) pairs covering every error-grade check.
        let cases: Vec<(&str, Box<dyn Fn(&mut Instance)>, &str)> = vec![
            ("bad duration", Box::new(|i: &mut Instance| i.time.d[0] = 0.0), "A1_TIME"),
            ("bad vmin", Box::new(|i: &mut Instance| i.buses[0].v_min = -0.1), "A1_BOUND_ORDER"),
            (
                "neg startup cost",
                Box::new(|i: &mut Instance| i.devices[0].c_su = -1.0),
                "A1_NONNEG",
            ),
            (
                "neg rebate",
                Box::new(|i: &mut Instance| {
                    i.devices[0].c_dd = vec![SparseTT { t: 1, tp: 0, value: -2.0 }]
                }),
                "A1_NONNEG",
            ),
            (
                "p bounds crossed",
                Box::new(|i: &mut Instance| i.devices[0].p_min[0] = 99.0),
                "A1_BOUND_ORDER",
            ),
            (
                "producer marginals decreasing",
                Box::new(|i: &mut Instance| {
                    i.devices[0].blocks = vec![(1.0, 20.0), (1.0, 10.0)];
                }),
                "A1_PWL_SHAPE",
            ),
            (
                "contradictory logic",
                Box::new(|i: &mut Instance| {
                    i.devices[0].must_run = vec![0];
                    i.devices[0].must_out = vec![0];
                }),
                "A1_LOGIC",
            ),
            (
                "fractional init",
                Box::new(|i: &mut Instance| i.devices[0].u_on_init = 0.5),
                "A1_INTEGRALITY",
            ),
            (
                "disconnected",
                Box::new(|i: &mut Instance| {
                    i.buses.push(Bus { id: "island".into(), v_min: 0.9, v_max: 1.1 })
                }),
                "A1_CONNECTIVITY",
            ),
            (
                "neg penalty",
                Box::new(|i: &mut Instance| i.penalties.c_p = -5.0),
                "A1_NONNEG",
            ),
        ];
        for (what, mutate, code) in cases {
            let mut inst = suite::toy3();
            mutate(&mut inst);
            let vs = validate(&inst);
            let errs = errors_only(&vs);
            assert!(!errs.is_empty(), "{what}: expected a violation");
            assert!(errs.iter().any(|v| v.code == code), "{what}: got {errs:?}, wanted {code}");
        }
    }

    #[test]
    fn mustrun_trajectory_overlap_is_warning_grade() {
        let mut inst = suite::toy3();
        let t_count = inst.t_count();
        assert!(t_count >= 2);
        let dev = &mut inst.devices[0];
        dev.must_run = vec![0];
        dev.p_supc = vec![SparseTT { t: 0, tp: 1, value: 0.1 }];
        let vs = validate(&inst);
        let hit: Vec<_> = vs.iter().filter(|v| v.code == "A1_TRAJ_MUSTRUN_OVERLAP").collect();
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].severity, Severity::Warning);
    }
}
