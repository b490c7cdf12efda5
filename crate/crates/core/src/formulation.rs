//! Residual evaluation, set-membership checks, and brute-force enumeration
//! for the commitment and power-injection constraint sets.
//!
//! Every constraint is reported as a nonnegative residual: inequalities
//! `g(x) <= 0` report `max(g(x), 0)`, equalities report `|g(x)|`. A point is
//! a member of a set iff every residual is at most the tolerance.

use crate::instance::{Instance, ResCat, RES_CATS};
use crate::{Error, Result, FEAS_TOL};

/// Commitment variables for every device over the horizon, indexed `[j][t]`.
/// Binary for the exact sets; fractional values are meaningful only when
/// checking the continuous relaxations.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitmentVars {
    pub u_on: Vec<Vec<f64>>,
    pub u_su: Vec<Vec<f64>>,
    pub u_sd: Vec<Vec<f64>>,
}

impl CommitmentVars {
    pub fn zeros(n_dev: usize, t_count: usize) -> Self {
        let z = vec![vec![0.0; t_count]; n_dev];
        CommitmentVars { u_on: z.clone(), u_su: z.clone(), u_sd: z }
    }

    /// Overwrites device `j`'s row with an on/off pattern, deriving the unique
    /// binary startup/shutdown indicators from the transition identity and the
    /// instance's initial state.
    pub fn set_on_pattern(&mut self, inst: &Instance, j: usize, pattern: &[bool]) {
        let mut prev = inst.devices[j].u_on_init;
        for (t, &on) in pattern.iter().enumerate() {
            let now = if on { 1.0 } else { 0.0 };
            self.u_on[j][t] = now;
            self.u_su[j][t] = (now - prev).max(0.0);
            self.u_sd[j][t] = (prev - now).max(0.0);
            prev = now;
        }
    }
}

/// Injection-side variables, indexed `[j][t]`; reserve quantities are indexed
/// `[j][t][category][product]` with products in list order.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVars {
    pub p_tot: Vec<Vec<f64>>,
    pub p_on: Vec<Vec<f64>>,
    pub p_su: Vec<Vec<f64>>,
    pub p_sd: Vec<Vec<f64>>,
    pub q_tot: Vec<Vec<f64>>,
    pub p_res: Vec<Vec<[Vec<f64>; RES_CATS]>>,
    pub q_res_up: Vec<Vec<f64>>,
    pub q_res_dn: Vec<Vec<f64>>,
}

impl InjectionVars {
    pub fn zeros(inst: &Instance) -> Self {
        let (n, t) = (inst.devices.len(), inst.t_count());
        let z = vec![vec![0.0; t]; n];
        let cell: [Vec<f64>; RES_CATS] = [
            vec![0.0; inst.reserves.product_count(ResCat::OnUp)],
            vec![0.0; inst.reserves.product_count(ResCat::OnDn)],
            vec![0.0; inst.reserves.product_count(ResCat::OffUp)],
        ];
        InjectionVars {
            p_tot: z.clone(),
            p_on: z.clone(),
            p_su: z.clone(),
            p_sd: z.clone(),
            q_tot: z.clone(),
            p_res: vec![vec![cell; t]; n],
            q_res_up: z.clone(),
            q_res_dn: z,
        }
    }
}

/// Aggregated commitment mass carried by startup/shutdown trajectory windows,
/// indexed `[j][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateVars {
    pub chi_su: Vec<Vec<f64>>,
    pub chi_sd: Vec<Vec<f64>>,
}

impl AggregateVars {
    pub fn zeros(n_dev: usize, t_count: usize) -> Self {
        let z = vec![vec![0.0; t_count]; n_dev];
        AggregateVars { chi_su: z.clone(), chi_sd: z }
    }

    /// The aggregation implied by explicit startup/shutdown indicators:
    /// window sums of `u_su`/`u_sd` over each period's trajectory windows.
    pub fn from_commitment(u: &CommitmentVars, inst: &Instance) -> Self {
        let mut chi = AggregateVars::zeros(inst.devices.len(), inst.t_count());
        for (j, dev) in inst.devices.iter().enumerate() {
            for t in 0..inst.t_count() {
                chi.chi_su[j][t] =
                    dev.t_supc(t).iter().map(|&(tp, _)| u.u_su[j][tp]).sum();
                chi.chi_sd[j][t] =
                    dev.t_sdpc(t).iter().map(|&(tp, _)| u.u_sd[j][tp]).sum();
            }
        }
        chi
    }
}

/// One evaluated constraint. `index` is the period for time-indexed
/// constraints, the product ordinal for reserve caps, and the window ordinal
/// for windowed constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub constraint: &'static str,
    pub index: usize,
    pub value: f64,
}

impl Residual {
    fn new(constraint: &'static str, index: usize, value: f64) -> Self {
        Residual { constraint, index, value }
    }
}

pub fn max_violation(residuals: &[Residual]) -> f64 {
    residuals.iter().fold(0.0, |m, r| m.max(r.value))
}

pub fn is_feasible(residuals: &[Residual], tol: f64) -> bool {
    max_violation(residuals) <= tol
}

/// Which injection envelope is being checked: the exact mixed-integer set,
/// its per-period continuous relaxation, or the aggregated rewrite of that
/// relaxation (which requires aggregate variables).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeMode {
    Exact,
    RelaxedY,
    AggregatedYbar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuntMode {
    Exact,
    Relaxed,
}

fn check_row(field: &'static str, rows: &[Vec<f64>], j: usize, t_count: usize) -> Result<()> {
    match rows.get(j) {
        Some(row) if row.len() == t_count => Ok(()),
        Some(row) => Err(Error::Shape(format!(
            "{field}[{j}] has length {}, expected {t_count}",
            row.len()
        ))),
        None => Err(Error::Shape(format!("{field} has no row for device {j}"))),
    }
}

/// Commitment feasibility for device `j`: transition identity, startup and
/// shutdown exclusivity, binariness, must-run/must-out status, minimum
/// downtime/uptime, and windowed startup limits.
pub fn commitment_residuals(
    u: &CommitmentVars,
    j: usize,
    inst: &Instance,
) -> Result<Vec<Residual>> {
    let t_count = inst.t_count();
    check_row("u_on", &u.u_on, j, t_count)?;
    check_row("u_su", &u.u_su, j, t_count)?;
    check_row("u_sd", &u.u_sd, j, t_count)?;
    let dev = &inst.devices[j];
    let mut out = Vec::new();
    for t in 0..t_count {
        let (on, su, sd) = (u.u_on[j][t], u.u_su[j][t], u.u_sd[j][t]);
        let prev = if t == 0 { dev.u_on_init } else { u.u_on[j][t - 1] };
        out.push(Residual::new("transition", t, (on - prev - su + sd).abs()));
        out.push(Residual::new("su_sd_exclusion", t, (su + sd - 1.0).max(0.0)));
        let bin = |v: f64| v.min((v - 1.0).abs()).max(-v);
        out.push(Residual::new("binary_domain", t, bin(on).max(bin(su)).max(bin(sd))));
        if dev.must_run.contains(&t) {
            out.push(Residual::new("must_run", t, (on - 1.0).abs()));
        }
        if dev.must_out.contains(&t) {
            out.push(Residual::new("must_out", t, on.abs()));
        }
        let recent_sd: f64 = dev.dn_min[t].iter().map(|&tp| u.u_sd[j][tp]).sum();
        out.push(Residual::new("min_downtime", t, (su + recent_sd - 1.0).max(0.0)));
        let recent_su: f64 = dev.up_min[t].iter().map(|&tp| u.u_su[j][tp]).sum();
        out.push(Residual::new("min_uptime", t, (sd + recent_su - 1.0).max(0.0)));
    }
    for (w, win) in dev.su_max.iter().enumerate() {
        let total: f64 = win.periods.iter().map(|&t| u.u_su[j][t]).sum();
        out.push(Residual::new("startup_limit", w, (total - win.limit as f64).max(0.0)));
    }
    Ok(out)
}

/// Every feasible binary commitment of device `j`, enumerated by on/off
/// pattern in ascending bitmask order (bit `t` of the mask is the status at
/// period `t`); startup/shutdown indicators are implied by the transitions.
pub fn enumerate_commitments(j: usize, inst: &Instance) -> Result<Vec<CommitmentVars>> {
    let t_count = inst.t_count();
    if t_count > 12 {
        return Err(Error::TooLarge(format!(
            "cannot enumerate 2^{t_count} commitment patterns (limit 2^12)"
        )));
    }
    let n_dev = inst.devices.len();
    let mut feasible = Vec::new();
    for mask in 0u32..(1 << t_count) {
        let pattern: Vec<bool> = (0..t_count).map(|t| mask >> t & 1 == 1).collect();
        let mut u = CommitmentVars::zeros(n_dev, t_count);
        u.set_on_pattern(inst, j, &pattern);
        if is_feasible(&commitment_residuals(&u, j, inst)?, FEAS_TOL) {
            feasible.push(u);
        }
    }
    Ok(feasible)
}

/// Power-injection and reserve envelope for device `j` at period `t`.
///
/// `Exact` checks the mixed-integer set: the total-power split, trajectory
/// power pinned to startup/shutdown indicators, the reserve envelope, and the
/// reactive bounds. `RelaxedY` replaces the trajectory equalities with upper
/// bounds, adds the window-exclusivity cuts, and admits fractional
/// indicators. `AggregatedYbar` states the same relaxation through aggregate
/// window variables and needs `chi`.
pub fn pq_envelope_residuals(
    u: &CommitmentVars,
    x: &InjectionVars,
    j: usize,
    t: usize,
    inst: &Instance,
    mode: EnvelopeMode,
    chi: Option<&AggregateVars>,
) -> Result<Vec<Residual>> {
    let t_count = inst.t_count();
    if t >= t_count {
        return Err(Error::Shape(format!("period {t} out of range (T={t_count})")));
    }
    check_row("u_on", &u.u_on, j, t_count)?;
    check_row("u_su", &u.u_su, j, t_count)?;
    check_row("u_sd", &u.u_sd, j, t_count)?;
    check_row("p_tot", &x.p_tot, j, t_count)?;
    check_row("q_tot", &x.q_tot, j, t_count)?;
    let res = x
        .p_res
        .get(j)
        .and_then(|row| row.get(t))
        .ok_or_else(|| Error::Shape(format!("p_res has no entry for device {j}, period {t}")))?;
    for cat in ResCat::ALL {
        let want = inst.reserves.product_count(cat);
        let got = res[cat as usize].len();
        if got != want {
            return Err(Error::Shape(format!(
                "p_res[{j}][{t}] category {} has {got} products, expected {want}",
                cat.name()
            )));
        }
    }
    let chi = match mode {
        EnvelopeMode::AggregatedYbar => Some(chi.ok_or(Error::MissingChi)?),
        _ => None,
    };

    let dev = &inst.devices[j];
    let producer = dev.is_producer();
    let on = u.u_on[j][t];
    let (p_tot, p_on) = (x.p_tot[j][t], x.p_on[j][t]);
    let (p_su, p_sd) = (x.p_su[j][t], x.p_sd[j][t]);
    let supc = dev.t_supc(t);
    let sdpc = dev.t_sdpc(t);
    let su_mass: f64 = supc.iter().map(|&(tp, _)| u.u_su[j][tp]).sum();
    let sd_mass: f64 = sdpc.iter().map(|&(tp, _)| u.u_sd[j][tp]).sum();

    let mut out = Vec::new();
    out.push(Residual::new("total_power_split", t, (p_tot - p_on - p_su - p_sd).abs()));

    // Trajectory power, per mode.
    match mode {
        EnvelopeMode::Exact => {
            let su_traj: f64 = supc.iter().map(|&(tp, v)| v * u.u_su[j][tp]).sum();
            let sd_traj: f64 = sdpc.iter().map(|&(tp, v)| v * u.u_sd[j][tp]).sum();
            out.push(Residual::new("startup_power_def", t, (p_su - su_traj).abs()));
            out.push(Residual::new("shutdown_power_def", t, (p_sd - sd_traj).abs()));
        }
        EnvelopeMode::RelaxedY => {
            let su_traj: f64 = supc.iter().map(|&(tp, v)| v * u.u_su[j][tp]).sum();
            let sd_traj: f64 = sdpc.iter().map(|&(tp, v)| v * u.u_sd[j][tp]).sum();
            out.push(Residual::new(
                "startup_power_relax",
                t,
                (p_su - su_traj).max(-p_su).max(0.0),
            ));
            out.push(Residual::new(
                "shutdown_power_relax",
                t,
                (p_sd - sd_traj).max(-p_sd).max(0.0),
            ));
            out.push(Residual::new("commit_window_su", t, (on + su_mass - 1.0).max(0.0)));
            out.push(Residual::new("commit_window_sd", t, (on + sd_mass - 1.0).max(0.0)));
            out.push(Residual::new("u_on_nonneg", t, (-on).max(0.0)));
            let dom = |v: f64| (-v).max(v - 1.0).max(0.0);
            let mut worst: f64 = 0.0;
            for &(tp, _) in &supc {
                worst = worst.max(dom(u.u_su[j][tp]));
            }
            for &(tp, _) in &sdpc {
                worst = worst.max(dom(u.u_sd[j][tp]));
            }
            out.push(Residual::new("susd_domain", t, worst));
        }
        EnvelopeMode::AggregatedYbar => {
            let chi = chi.unwrap();
            check_row("chi_su", &chi.chi_su, j, t_count)?;
            check_row("chi_sd", &chi.chi_sd, j, t_count)?;
            let (csu, csd) = (chi.chi_su[j][t], chi.chi_sd[j][t]);
            let su_cap = supc.iter().map(|&(_, v)| v).fold(0.0, f64::max) * csu;
            let sd_cap = sdpc.iter().map(|&(_, v)| v).fold(0.0, f64::max) * csd;
            out.push(Residual::new(
                "startup_power_agg",
                t,
                (p_su - su_cap).max(-p_su).max(0.0),
            ));
            out.push(Residual::new(
                "shutdown_power_agg",
                t,
                (p_sd - sd_cap).max(-p_sd).max(0.0),
            ));
            out.push(Residual::new("chi_su_exclusion", t, (on + csu - 1.0).max(0.0)));
            out.push(Residual::new("chi_sd_exclusion", t, (on + csd - 1.0).max(0.0)));
            let dom = |v: f64| (-v).max(v - 1.0).max(0.0);
            out.push(Residual::new("chi_domain", t, dom(on).max(dom(csu)).max(dom(csd))));
        }
    }

    // Reserve envelope: cumulative caps ("at least as good as" sums run from
    // each product to the end of its category) and headroom limits.
    for (cat, label) in [(ResCat::OnUp, "res_cap_on_up"), (ResCat::OnDn, "res_cap_on_dn")] {
        let vals = &res[cat as usize];
        for r in 0..vals.len() {
            let tail: f64 = vals[r..].iter().sum();
            let cap = dev.p_res_max[cat as usize][r] * on;
            out.push(Residual::new(label, r, (tail - cap).max(0.0)));
        }
    }
    let off = &res[ResCat::OffUp as usize];
    for r in 0..off.len() {
        let tail: f64 = off[r..].iter().sum();
        let cap = dev.p_res_max[ResCat::OffUp as usize][r] * (1.0 - on);
        out.push(Residual::new("res_cap_off_up", r, (tail - cap).max(0.0)));
    }
    let sum_on_up: f64 = res[ResCat::OnUp as usize].iter().sum();
    let sum_on_dn: f64 = res[ResCat::OnDn as usize].iter().sum();
    let sum_off_up: f64 = off.iter().sum();
    let (up_side, dn_side) =
        if producer { (sum_on_up, sum_on_dn) } else { (sum_on_dn, sum_on_up) };
    out.push(Residual::new(
        "headroom_max",
        t,
        (p_on + up_side - dev.p_max[t] * on).max(0.0),
    ));
    out.push(Residual::new(
        "headroom_min",
        t,
        (dev.p_min[t] * on + dn_side - p_on).max(0.0),
    ));
    // Power moving through startup/shutdown trajectories (p_tot - p_on) plus
    // offline reserve shares the envelope released while the device is off.
    out.push(Residual::new(
        "offline_power_max",
        t,
        ((p_tot - p_on) + sum_off_up - dev.p_max[t] * (1.0 - on)).max(0.0),
    ));
    let min_component = p_tot
        .min(p_on)
        .min(res.iter().flat_map(|v| v.iter().copied()).fold(f64::INFINITY, f64::min));
    out.push(Residual::new("power_nonneg", t, (-min_component).max(0.0)));

    // Reactive envelope, driven by the commitment mass active at t.
    let mass = match mode {
        EnvelopeMode::AggregatedYbar => {
            let chi = chi.unwrap();
            on + chi.chi_su[j][t] + chi.chi_sd[j][t]
        }
        _ => on + su_mass + sd_mass,
    };
    let q_tot = x.q_tot[j][t];
    let (q_up, q_dn) = (x.q_res_up[j][t], x.q_res_dn[j][t]);
    let (hi_res, lo_res) = if producer { (q_up, q_dn) } else { (q_dn, q_up) };
    out.push(Residual::new(
        "reactive_max",
        t,
        (q_tot - (dev.q_max[t] * mass + dev.beta_max * p_tot - hi_res)).max(0.0),
    ));
    out.push(Residual::new(
        "reactive_min",
        t,
        ((dev.q_min[t] * mass + dev.beta_min * p_tot + lo_res) - q_tot).max(0.0),
    ));
    out.push(Residual::new("q_res_nonneg", t, (-q_up).max(-q_dn).max(0.0)));
    Ok(out)
}

/// Ramp-rate limits linking consecutive total injections of device `j`.
pub fn ramp_residuals(
    u: &CommitmentVars,
    x: &InjectionVars,
    j: usize,
    inst: &Instance,
) -> Result<Vec<Residual>> {
    let t_count = inst.t_count();
    check_row("u_on", &u.u_on, j, t_count)?;
    check_row("u_su", &u.u_su, j, t_count)?;
    check_row("p_tot", &x.p_tot, j, t_count)?;
    let dev = &inst.devices[j];
    let mut out = Vec::new();
    for t in 0..t_count {
        let prev = if t == 0 { dev.p_tot_init } else { x.p_tot[j][t - 1] };
        let diff = x.p_tot[j][t] - prev;
        let d = inst.time.d[t];
        let (on, su) = (u.u_on[j][t], u.u_su[j][t]);
        let dn_rate = d * (dev.p_rd * on + dev.p_rd_sd * (1.0 - on));
        let up_rate = d * (dev.p_ru * (on - su) + dev.p_ru_su * (su - on + 1.0));
        out.push(Residual::new("ramp_down", t, (-diff - dn_rate).max(0.0)));
        out.push(Residual::new("ramp_up", t, (diff - up_rate).max(0.0)));
    }
    Ok(out)
}

/// Full temporally-coupled feasibility of device `j`: commitment logic, the
/// exact injection envelope at every period, and ramping.
pub fn device_residuals(
    u: &CommitmentVars,
    x: &InjectionVars,
    j: usize,
    inst: &Instance,
) -> Result<Vec<Residual>> {
    let mut out = commitment_residuals(u, j, inst)?;
    for t in 0..inst.t_count() {
        out.extend(pq_envelope_residuals(u, x, j, t, inst, EnvelopeMode::Exact, None)?);
    }
    out.extend(ramp_residuals(u, x, j, inst)?);
    Ok(out)
}

/// Shunt step-domain membership: `Exact` requires an integral step count
/// within bounds, `Relaxed` only the interval.
pub fn shunt_set_check(u_sh: f64, j: usize, inst: &Instance, mode: ShuntMode) -> bool {
    let sh = &inst.shunts[j];
    let in_box = u_sh >= sh.step_min - FEAS_TOL && u_sh <= sh.step_max + FEAS_TOL;
    match mode {
        ShuntMode::Relaxed => in_box,
        ShuntMode::Exact => in_box && (u_sh - u_sh.round()).abs() <= FEAS_TOL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{Device, DeviceKind, Shunt};
    use crate::suite::{ramp_flat, toy3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn named<'a>(rs: &'a [Residual], constraint: &str) -> Vec<&'a Residual> {
        rs.iter().filter(|r| r.constraint == constraint).collect()
    }

    /// Extends toy3's per-period data to a longer horizon so commitment
    /// logic over more periods can be exercised.
    fn stretched_toy3(t_count: usize) -> Instance {
        let mut inst = toy3();
        inst.time.d = vec![1.0; t_count];
        for dev in &mut inst.devices {
            for v in [&mut dev.c_on, &mut dev.p_max, &mut dev.p_min, &mut dev.q_max, &mut dev.q_min]
            {
                let last = *v.last().unwrap();
                v.resize(t_count, last);
            }
            dev.dn_min.resize(t_count, Vec::new());
            dev.up_min.resize(t_count, Vec::new());
            dev.must_run.retain(|&t| t < t_count);
        }
        for mats in &mut inst.reserves.c_res_p {
            for cat in mats.iter_mut() {
                for costs in cat.iter_mut() {
                    costs.resize(t_count, 0.0);
                }
            }
        }
        for v in inst.reserves.c_res_q_up.iter_mut().chain(inst.reserves.c_res_q_dn.iter_mut()) {
            v.resize(t_count, 0.0);
        }
        inst
    }

    #[test]
    fn steady_on_commitment_is_clean() {
        let inst = toy3();
        let mut u = CommitmentVars::zeros(inst.devices.len(), 2);
        u.set_on_pattern(&inst, 0, &[true, true]);
        let rs = commitment_residuals(&u, 0, &inst).unwrap();
        assert_eq!(max_violation(&rs), 0.0);
    }

    #[test]
    fn missing_startup_breaks_transition_identity() {
        let mut inst = toy3();
        inst.devices[0].u_on_init = 0.0;
        let mut u = CommitmentVars::zeros(inst.devices.len(), 2);
        u.u_on[0] = vec![0.0, 1.0];
        let rs = commitment_residuals(&u, 0, &inst).unwrap();
        let tr = named(&rs, "transition");
        assert_eq!(tr[0].value, 0.0);
        assert_eq!((tr[1].index, tr[1].value), (1, 1.0));
    }

    #[test]
    fn min_downtime_window_blocks_restart() {
        let mut inst = toy3();
        inst.devices[0].u_on_init = 1.0;
        inst.devices[0].dn_min = vec![vec![], vec![0]];
        let mut u = CommitmentVars::zeros(inst.devices.len(), 2);
        u.set_on_pattern(&inst, 0, &[false, true]);
        let rs = commitment_residuals(&u, 0, &inst).unwrap();
        assert_eq!(max_violation(&rs), 1.0);
        let dn = named(&rs, "min_downtime");
        assert_eq!((dn[1].index, dn[1].value), (1, 1.0));
    }

    #[test]
    fn enumeration_without_logic_yields_all_patterns() {
        let mut inst = toy3();
        inst.devices[0].u_on_init = 0.0;
        let all = enumerate_commitments(0, &inst).unwrap();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn enumeration_respects_must_run() {
        let mut inst = stretched_toy3(3);
        inst.devices[0].must_run = vec![1];
        let all = enumerate_commitments(0, &inst).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.iter().all(|u| u.u_on[0][1] == 1.0));
    }

    #[test]
    fn contradictory_logic_enumerates_empty() {
        let mut inst = toy3();
        inst.devices[0].must_run = vec![0, 1];
        inst.devices[0].must_out = vec![0];
        assert!(enumerate_commitments(0, &inst).unwrap().is_empty());
    }

    #[test]
    fn long_horizons_are_rejected() {
        let inst = stretched_toy3(13);
        assert!(matches!(enumerate_commitments(0, &inst), Err(Error::TooLarge(_))));
    }

    #[test]
    fn off_device_at_rest_is_feasible_in_every_mode() {
        let inst = toy3();
        let u = CommitmentVars::zeros(inst.devices.len(), 2);
        let x = InjectionVars::zeros(&inst);
        let chi = AggregateVars::zeros(inst.devices.len(), 2);
        for mode in [EnvelopeMode::Exact, EnvelopeMode::RelaxedY] {
            let rs = pq_envelope_residuals(&u, &x, 0, 0, &inst, mode, None).unwrap();
            assert_eq!(max_violation(&rs), 0.0, "{mode:?}");
        }
        let rs = pq_envelope_residuals(
            &u,
            &x,
            0,
            0,
            &inst,
            EnvelopeMode::AggregatedYbar,
            Some(&chi),
        )
        .unwrap();
        assert_eq!(max_violation(&rs), 0.0);
    }

    #[test]
    fn aggregated_mode_requires_chi() {
        let inst = toy3();
        let u = CommitmentVars::zeros(inst.devices.len(), 2);
        let x = InjectionVars::zeros(&inst);
        let err = pq_envelope_residuals(&u, &x, 0, 0, &inst, EnvelopeMode::AggregatedYbar, None);
        assert!(matches!(err, Err(Error::MissingChi)));
    }

    #[test]
    fn dispatch_above_capacity_shows_as_headroom() {
        let inst = toy3();
        let cap = inst.devices[0].p_max[0];
        let mut u = CommitmentVars::zeros(inst.devices.len(), 2);
        u.set_on_pattern(&inst, 0, &[true, true]);
        let mut x = InjectionVars::zeros(&inst);
        x.p_on[0][0] = cap + 0.5;
        x.p_tot[0][0] = cap + 0.5;
        let rs = pq_envelope_residuals(&u, &x, 0, 0, &inst, EnvelopeMode::Exact, None).unwrap();
        let bad: Vec<_> = rs.iter().filter(|r| r.value > 0.0).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].constraint, "headroom_max");
        assert!((bad[0].value - 0.5).abs() < 1e-12);
    }

    /// A committed device dispatching inside its envelope must not trip the
    /// offline-power limit: trajectory power is zero while online, so the
    /// released-envelope constraint is slack at any positive dispatch.
    #[test]
    fn online_dispatch_does_not_trip_offline_limit() {
        let inst = toy3();
        let mut u = CommitmentVars::zeros(inst.devices.len(), 2);
        u.set_on_pattern(&inst, 0, &[true, true]);
        let mut x = InjectionVars::zeros(&inst);
        x.p_on[0][0] = inst.devices[0].p_max[0];
        x.p_tot[0][0] = inst.devices[0].p_max[0];
        let rs = pq_envelope_residuals(&u, &x, 0, 0, &inst, EnvelopeMode::Exact, None).unwrap();
        assert_eq!(max_violation(&rs), 0.0);
    }

    /// Builds an exact-feasible injection for a given commitment by pinning
    /// trajectory power and sampling dispatch/reactive values inside their
    /// boxes (reserves stay zero).
    fn sample_injection(
        u: &CommitmentVars,
        j: usize,
        inst: &Instance,
        rng: &mut StdRng,
    ) -> InjectionVars {
        let dev = &inst.devices[j];
        let mut x = InjectionVars::zeros(inst);
        for t in 0..inst.t_count() {
            let on = u.u_on[j][t];
            x.p_su[j][t] = dev.t_supc(t).iter().map(|&(tp, v)| v * u.u_su[j][tp]).sum();
            x.p_sd[j][t] = dev.t_sdpc(t).iter().map(|&(tp, v)| v * u.u_sd[j][tp]).sum();
            let lo = dev.p_min[t] * on;
            let hi = dev.p_max[t] * on;
            x.p_on[j][t] = lo + (hi - lo) * rng.gen::<f64>();
            x.p_tot[j][t] = x.p_on[j][t] + x.p_su[j][t] + x.p_sd[j][t];
            let mass = on
                + dev.t_supc(t).iter().map(|&(tp, _)| u.u_su[j][tp]).sum::<f64>()
                + dev.t_sdpc(t).iter().map(|&(tp, _)| u.u_sd[j][tp]).sum::<f64>();
            let q_lo = dev.q_min[t] * mass + dev.beta_min * x.p_tot[j][t];
            let q_hi = dev.q_max[t] * mass + dev.beta_max * x.p_tot[j][t];
            x.q_tot[j][t] = q_lo + (q_hi - q_lo) * rng.gen::<f64>();
        }
        x
    }

    #[test]
    fn exact_points_stay_feasible_in_the_relaxation() {
        let mut inst = toy3();
        // Give the producer trajectory windows so the relaxation has content.
        inst.devices[0].u_on_init = 0.0;
        inst.devices[0].p_supc =
            vec![crate::instance::SparseTT { t: 0, tp: 1, value: 0.3 }];
        inst.devices[0].p_sdpc =
            vec![crate::instance::SparseTT { t: 1, tp: 1, value: 0.2 }];
        let mut rng = StdRng::seed_from_u64(7);
        for j in 0..inst.devices.len() {
            for u in enumerate_commitments(j, &inst).unwrap() {
                for _ in 0..3 {
                    let x = sample_injection(&u, j, &inst, &mut rng);
                    for t in 0..inst.t_count() {
                        let exact = pq_envelope_residuals(
                            &u,
                            &x,
                            j,
                            t,
                            &inst,
                            EnvelopeMode::Exact,
                            None,
                        )
                        .unwrap();
                        assert!(is_feasible(&exact, FEAS_TOL), "exact infeasible: {exact:?}");
                        let relaxed = pq_envelope_residuals(
                            &u,
                            &x,
                            j,
                            t,
                            &inst,
                            EnvelopeMode::RelaxedY,
                            None,
                        )
                        .unwrap();
                        assert!(is_feasible(&relaxed, FEAS_TOL), "containment: {relaxed:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn relaxed_set_is_convex_along_segments() {
        let mut inst = toy3();
        inst.devices[0].u_on_init = 0.0;
        inst.devices[0].p_supc =
            vec![crate::instance::SparseTT { t: 0, tp: 1, value: 0.3 }];
        let mut rng = StdRng::seed_from_u64(11);
        let commitments = enumerate_commitments(0, &inst).unwrap();
        for pair in commitments.windows(2) {
            let (ua, ub) = (&pair[0], &pair[1]);
            let xa = sample_injection(ua, 0, &inst, &mut rng);
            let xb = sample_injection(ub, 0, &inst, &mut rng);
            let mix = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                a.iter()
                    .zip(b)
                    .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| 0.5 * (x + y)).collect())
                    .collect()
            };
            let um = CommitmentVars {
                u_on: mix(&ua.u_on, &ub.u_on),
                u_su: mix(&ua.u_su, &ub.u_su),
                u_sd: mix(&ua.u_sd, &ub.u_sd),
            };
            let mut xm = InjectionVars::zeros(&inst);
            xm.p_tot = mix(&xa.p_tot, &xb.p_tot);
            xm.p_on = mix(&xa.p_on, &xb.p_on);
            xm.p_su = mix(&xa.p_su, &xb.p_su);
            xm.p_sd = mix(&xa.p_sd, &xb.p_sd);
            xm.q_tot = mix(&xa.q_tot, &xb.q_tot);
            for t in 0..inst.t_count() {
                let rs =
                    pq_envelope_residuals(&um, &xm, 0, t, &inst, EnvelopeMode::RelaxedY, None)
                        .unwrap();
                assert!(is_feasible(&rs, FEAS_TOL), "midpoint left the relaxation: {rs:?}");
            }
        }
    }

    /// The aggregated envelope and the explicit-indicator relaxation describe
    /// the same projected set: window sums map one into the other, and
    /// concentrating aggregate mass at the largest trajectory entry maps back.
    #[test]
    fn aggregation_matches_relaxation_both_ways() {
        let mut inst = toy3();
        inst.devices[0].u_on_init = 0.0;
        inst.devices[0].p_supc = vec![
            crate::instance::SparseTT { t: 0, tp: 1, value: 0.3 },
        ];
        inst.devices[0].p_sdpc = vec![
            crate::instance::SparseTT { t: 0, tp: 0, value: 0.15 },
            crate::instance::SparseTT { t: 1, tp: 1, value: 0.2 },
        ];
        let dev = inst.devices[0].clone();
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..200 {
            // Forward: a fractional relaxed point induces a feasible
            // aggregated point via window sums.
            let mut u = CommitmentVars::zeros(inst.devices.len(), 2);
            let on = rng.gen::<f64>() * 0.5;
            u.u_on[0] = vec![on, rng.gen::<f64>() * 0.5];
            u.u_su[0] = vec![0.0, rng.gen::<f64>() * (1.0 - on)];
            u.u_sd[0] = vec![rng.gen::<f64>() * (1.0 - on), 0.0];
            let mut x = InjectionVars::zeros(&inst);
            for t in 0..2 {
                let su_traj: f64 =
                    dev.t_supc(t).iter().map(|&(tp, v)| v * u.u_su[0][tp]).sum();
                let sd_traj: f64 =
                    dev.t_sdpc(t).iter().map(|&(tp, v)| v * u.u_sd[0][tp]).sum();
                x.p_su[0][t] = su_traj * rng.gen::<f64>();
                x.p_sd[0][t] = sd_traj * rng.gen::<f64>();
                let on_t = u.u_on[0][t];
                x.p_on[0][t] =
                    dev.p_min[t] * on_t + (dev.p_max[t] - dev.p_min[t]) * on_t * rng.gen::<f64>();
                x.p_tot[0][t] = x.p_on[0][t] + x.p_su[0][t] + x.p_sd[0][t];
            }
            let chi = AggregateVars::from_commitment(&u, &inst);
            for t in 0..2 {
                let relaxed =
                    pq_envelope_residuals(&u, &x, 0, t, &inst, EnvelopeMode::RelaxedY, None)
                        .unwrap();
                assert!(is_feasible(&relaxed, FEAS_TOL), "{relaxed:?}");
                let agg = pq_envelope_residuals(
                    &u,
                    &x,
                    0,
                    t,
                    &inst,
                    EnvelopeMode::AggregatedYbar,
                    Some(&chi),
                )
                .unwrap();
                assert!(is_feasible(&agg, FEAS_TOL), "forward direction: {agg:?}");
            }

            // Backward: any aggregated point maps to explicit indicators by
            // concentrating each window's mass on its largest entry.
            let mut u_back = CommitmentVars::zeros(inst.devices.len(), 2);
            u_back.u_on[0] = u.u_on[0].clone();
            for t in 0..2 {
                if let Some(&(tp, _)) = dev
                    .t_supc(t)
                    .iter()
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                {
                    u_back.u_su[0][tp] = chi.chi_su[0][t];
                }
                if let Some(&(tp, _)) = dev
                    .t_sdpc(t)
                    .iter()
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                {
                    u_back.u_sd[0][tp] = chi.chi_sd[0][t];
                }
            }
            for t in 0..2 {
                let relaxed = pq_envelope_residuals(
                    &u_back,
                    &x,
                    0,
                    t,
                    &inst,
                    EnvelopeMode::RelaxedY,
                    None,
                )
                .unwrap();
                assert!(is_feasible(&relaxed, FEAS_TOL), "backward direction: {relaxed:?}");
            }
        }
    }

    #[test]
    fn ramp_residuals_flag_fast_moves_only() {
        let inst = ramp_flat();
        let mut u = CommitmentVars::zeros(inst.devices.len(), 2);
        u.set_on_pattern(&inst, 0, &[true, true]);
        let mut x = InjectionVars::zeros(&inst);
        x.p_tot[0] = vec![5.0, 5.0];
        assert_eq!(max_violation(&ramp_residuals(&u, &x, 0, &inst).unwrap()), 0.0);
        x.p_tot[0] = vec![20.0, 5.0];
        let rs = ramp_residuals(&u, &x, 0, &inst).unwrap();
        let up = named(&rs, "ramp_up");
        assert_eq!((up[0].index, up[0].value), (0, 5.0));
        let dn = named(&rs, "ramp_down");
        assert_eq!((dn[1].index, dn[1].value), (1, 5.0));
    }

    #[test]
    fn shunt_domain_checks() {
        let mut inst = toy3();
        inst.shunts.push(Shunt {
            id: "SH".into(),
            bus: 0,
            g_sh: 0.0,
            b_sh: 0.1,
            step_min: 0.0,
            step_max: 5.0,
        });
        assert!(shunt_set_check(3.0, 0, &inst, ShuntMode::Exact));
        assert!(!shunt_set_check(2.5, 0, &inst, ShuntMode::Exact));
        assert!(shunt_set_check(2.5, 0, &inst, ShuntMode::Relaxed));
        assert!(!shunt_set_check(-1.0, 0, &inst, ShuntMode::Relaxed));
    }

    #[test]
    fn shape_errors_are_reported() {
        let inst = toy3();
        let u = CommitmentVars::zeros(1, 2);
        let x = InjectionVars::zeros(&inst);
        assert!(matches!(
            pq_envelope_residuals(&u, &x, 1, 0, &inst, EnvelopeMode::Exact, None),
            Err(Error::Shape(_))
        ));
        let u_ok = CommitmentVars::zeros(inst.devices.len(), 2);
        assert!(matches!(
            pq_envelope_residuals(&u_ok, &x, 0, 5, &inst, EnvelopeMode::Exact, None),
            Err(Error::Shape(_))
        ));
    }

    /// Devices with no trajectory windows force zero trajectory power in all
    /// modes (the empty-window maximum is zero).
    #[test]
    fn empty_windows_pin_trajectory_power_to_zero() {
        let inst = toy3();
        let dev: &Device = &inst.devices[1];
        assert_eq!(dev.kind, DeviceKind::Consumer);
        assert!(dev.t_supc(0).is_empty());
        let mut u = CommitmentVars::zeros(inst.devices.len(), 2);
        u.set_on_pattern(&inst, 1, &[true, true]);
        let mut x = InjectionVars::zeros(&inst);
        x.p_su[1][0] = 0.05;
        x.p_tot[1][0] = 0.05;
        let chi = AggregateVars::from_commitment(&u, &inst);
        for (mode, c) in [
            (EnvelopeMode::Exact, None),
            (EnvelopeMode::RelaxedY, None),
            (EnvelopeMode::AggregatedYbar, Some(&chi)),
        ] {
            let rs = pq_envelope_residuals(&u, &x, 1, 0, &inst, mode, c).unwrap();
            assert!(max_violation(&rs) >= 0.05 - 1e-12, "{mode:?}: {rs:?}");
        }
    }
}
