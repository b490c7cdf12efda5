//! Builders and solvers for every subproblem in the pipeline: the per-period
//! temporal SOC programs, per-bus commitment MILPs, closed-form shunt
//! rounding, ramping-interval LPs, final per-period AC NLPs (with or without
//! screened contingencies), and the convex upper-bound program.
//!
//! Every builder reproduces the constraint rows of the `formulation` and
//! `acopf` residual checkers exactly, so extracted slices pass their set
//! memberships at solver tolerance.

use std::sync::Arc;
use std::time::Instant;

use crate::acopf::NetworkFlows;
use crate::backends::{
    solve_conic, solve_lp, solve_milp, solve_nlp, MathProgram, NlTerm, SolveResult, SolveStatus,
};
use crate::formulation::{self, AggregateVars, CommitmentVars, InjectionVars};
use crate::gsf::{CtgRows, GsfSet};
use crate::instance::{AcBranch, Instance, QDir, Requirement, ResCat, RES_CATS};
use crate::objective::{self, CopyState, CtgSubset};
use crate::screening::ScreenSets;
use crate::{Error, Result, FEAS_TOL};

const INF: f64 = f64::INFINITY;
/// Smoothing widths for the nonsmooth network penalties inside NLPs: the
/// first stage flattens the kinks so the line search travels, the second
/// tightens them so the stationary point sits next to the exact one.
const NLP_EPS_STAGES: [f64; 2] = [1e-3, 1e-6];
/// Node budget for branch-and-bound commitment searches.
const MILP_NODE_LIMIT: usize = 50_000;
/// Optimality gap for commitment MILPs.
const MILP_GAP: f64 = 1e-9;
/// Deterministic tie-break pressure toward smaller commitments.
const TIE_EPS: f64 = 1e-9;

/// Which subproblem produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubproblemId {
    Period(usize),
    Bus(usize),
}

/// A solved subproblem: its identity, the raw solver outcome, and the
/// extracted variable slice.
#[derive(Debug, Clone)]
pub struct SubproblemResult<S> {
    pub id: SubproblemId,
    pub solve: SolveResult,
    pub vars: S,
}

/// One period of the temporal SOC program: device copies, aggregated
/// trajectory masses, cone variables, and network flows.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSlice {
    pub t: usize,
    pub p_tot: Vec<f64>,
    pub p_on: Vec<f64>,
    pub p_su: Vec<f64>,
    pub p_sd: Vec<f64>,
    pub q_tot: Vec<f64>,
    pub p_res: Vec<[Vec<f64>; RES_CATS]>,
    pub q_res_up: Vec<f64>,
    pub q_res_dn: Vec<f64>,
    pub u_on: Vec<f64>,
    pub chi_su: Vec<f64>,
    pub chi_sd: Vec<f64>,
    pub p_fr: Vec<f64>,
    pub p_to: Vec<f64>,
    pub q_fr: Vec<f64>,
    pub q_to: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub mu: Vec<f64>,
    pub omega: Vec<f64>,
    pub mu_sh: Vec<f64>,
}

/// All devices of one bus over the full horizon, with integral commitments.
#[derive(Debug, Clone, PartialEq)]
pub struct BusSlice {
    pub bus: usize,
    /// Device indices covered, in declaration order; all other fields are
    /// indexed by position in this list.
    pub devices: Vec<usize>,
    pub u_on: Vec<Vec<f64>>,
    pub u_su: Vec<Vec<f64>>,
    pub u_sd: Vec<Vec<f64>>,
    pub p_tot: Vec<Vec<f64>>,
    pub p_on: Vec<Vec<f64>>,
    pub p_su: Vec<Vec<f64>>,
    pub p_sd: Vec<Vec<f64>>,
    pub q_tot: Vec<Vec<f64>>,
    pub p_res: Vec<Vec<[Vec<f64>; RES_CATS]>>,
    pub q_res_up: Vec<Vec<f64>>,
    pub q_res_dn: Vec<Vec<f64>>,
}

/// One period of an AC NLP solve: physical controls, device injections, and
/// the flows they imply. `objective_exact` re-evaluates the slice with the
/// unsmoothed objective evaluators.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalSlice {
    pub t: usize,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub tau: Vec<f64>,
    pub phi: Vec<f64>,
    pub u_sh: Vec<f64>,
    pub p_tot: Vec<f64>,
    pub p_on: Vec<f64>,
    pub p_su: Vec<f64>,
    pub p_sd: Vec<f64>,
    pub q_tot: Vec<f64>,
    pub p_res: Vec<[Vec<f64>; RES_CATS]>,
    pub q_res_up: Vec<f64>,
    pub q_res_dn: Vec<f64>,
    pub u_on: Vec<f64>,
    pub chi_su: Vec<f64>,
    pub chi_sd: Vec<f64>,
    pub p_fr: Vec<f64>,
    pub p_to: Vec<f64>,
    pub q_fr: Vec<f64>,
    pub q_to: Vec<f64>,
    pub p_sh: Vec<f64>,
    pub q_sh: Vec<f64>,
    pub objective_exact: f64,
}

/// Ramping half-widths per device and period (p.u.). Entries are indexed by
/// horizon period; the pre-horizon interval is identically zero and not
/// stored.
#[derive(Debug, Clone, PartialEq)]
pub struct RampIntervals {
    pub delta_minus: Vec<Vec<f64>>,
    pub delta_plus: Vec<Vec<f64>>,
}

impl RampIntervals {
    pub fn zeros(inst: &Instance) -> Self {
        let z = vec![vec![0.0; inst.t_count()]; inst.devices.len()];
        RampIntervals { delta_minus: z.clone(), delta_plus: z }
    }

    /// Dispatch box at `(j, t)` around the anchor value `p_bar`.
    pub fn bounds(&self, j: usize, t: usize, p_bar: f64) -> (f64, f64) {
        (p_bar - self.delta_minus[j][t], p_bar + self.delta_plus[j][t])
    }
}

// ---------------------------------------------------------------------------
// Shunt rounding
// ---------------------------------------------------------------------------

/// Closed-form optimal integral step for shunt `j`: clamp into the step box,
/// then round half-up.
pub fn shunt_round(u_sh_real: f64, j: usize, inst: &Instance) -> f64 {
    let sh = &inst.shunts[j];
    (0.5 + u_sh_real.clamp(sh.step_min, sh.step_max)).floor()
}

// ---------------------------------------------------------------------------
// Ramping-interval LP
// ---------------------------------------------------------------------------

fn ramp_rates(j: usize, u: &CommitmentVars, inst: &Instance) -> (Vec<f64>, Vec<f64>) {
    let dev = &inst.devices[j];
    let t_count = inst.t_count();
    let mut rd = vec![0.0; t_count];
    let mut ru = vec![0.0; t_count];
    for t in 0..t_count {
        let d = inst.time.d[t];
        let (on, su) = (u.u_on[j][t], u.u_su[j][t]);
        rd[t] = d * (dev.p_rd * on + dev.p_rd_sd * (1.0 - on));
        ru[t] = d * (dev.p_ru * (on - su) + dev.p_ru_su * (su - on + 1.0));
    }
    (rd, ru)
}

/// Maximal ramping half-widths around the anchor dispatch of device `j`:
/// the interval LP with its pairing constraints and heuristic lower bounds.
/// Horizon-edge terms that would index past the last period are dropped
/// from the heuristic minimum.
pub fn ramp_intervals(
    j: usize,
    p_bar: &[f64],
    u: &CommitmentVars,
    inst: &Instance,
    deadline: Option<Instant>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_count = inst.t_count();
    if p_bar.len() != t_count {
        return Err(Error::Shape(format!(
            "anchor dispatch has {} periods, expected {t_count}",
            p_bar.len()
        )));
    }
    // Precondition: the anchor pair must satisfy the commitment logic and
    // the ramp limits it implies.
    let mut probe = InjectionVars::zeros(inst);
    probe.p_tot[j] = p_bar.to_vec();
    let mut residuals = formulation::commitment_residuals(u, j, inst)?;
    residuals.extend(formulation::ramp_residuals(u, &probe, j, inst)?);
    let worst = formulation::max_violation(&residuals);
    if worst > FEAS_TOL {
        return Err(Error::InfeasibleAnchor(format!(
            "device {} anchor violates commitment/ramp constraints by {worst:.3e}",
            inst.devices[j].id
        )));
    }

    let dev = &inst.devices[j];
    let (rd, ru) = ramp_rates(j, u, inst);
    let dbar: Vec<f64> = (0..t_count)
        .map(|t| p_bar[t] - if t == 0 { dev.p_tot_init } else { p_bar[t - 1] })
        .collect();

    // Slot 0 is the fixed pre-horizon interval; slot t+1 is horizon period t.
    let mut prog = MathProgram::new();
    let mut dm = vec![0usize; t_count + 1];
    let mut dp = vec![0usize; t_count + 1];
    dm[0] = prog.add_var(0.0, 0.0);
    dp[0] = prog.add_var(0.0, 0.0);
    for t in 0..t_count {
        let mut lbm = rd[t] + dbar[t];
        let mut lbp = ru[t] - dbar[t];
        if t + 1 < t_count {
            lbm = lbm.min(ru[t + 1] - dbar[t + 1]);
            lbp = lbp.min(rd[t + 1] + dbar[t + 1]);
        }
        dm[t + 1] = prog.add_var((0.5 * lbm).max(0.0), INF);
        dp[t + 1] = prog.add_var((0.5 * lbp).max(0.0), INF);
        prog.add_obj(dm[t + 1], 1.0);
        prog.add_obj(dp[t + 1], 1.0);
    }
    for t in 0..t_count {
        prog.add_le(vec![(dm[t + 1], 1.0), (dp[t], 1.0)], (rd[t] + dbar[t]).max(0.0));
        prog.add_le(vec![(dm[t], 1.0), (dp[t + 1], 1.0)], (ru[t] - dbar[t]).max(0.0));
    }
    let sol = solve_lp(&prog, deadline).map_err(|e| Error::SubproblemFailure {
        context: format!("ramp intervals device {}", dev.id),
        detail: e.to_string(),
    })?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::SubproblemFailure {
            context: format!("ramp intervals device {}", dev.id),
            detail: format!("solver returned {:?}", sol.status),
        });
    }
    // Repair solver-tolerance overshoot so the pairing inequalities hold
    // exactly: shrinking either interval of a violated pair is always valid.
    let mut dm_v: Vec<f64> = dm.iter().map(|&id| sol.x[id].max(0.0)).collect();
    let mut dp_v: Vec<f64> = dp.iter().map(|&id| sol.x[id].max(0.0)).collect();
    dm_v[0] = 0.0;
    dp_v[0] = 0.0;
    for t in 0..t_count {
        let cap = (rd[t] + dbar[t]).max(0.0);
        let excess = dm_v[t + 1] + dp_v[t] - cap;
        if excess > 0.0 {
            let r = excess.min(dm_v[t + 1]);
            dm_v[t + 1] -= r;
            dp_v[t] = (dp_v[t] - (excess - r)).max(0.0);
        }
        let cap = (ru[t] - dbar[t]).max(0.0);
        let excess = dm_v[t] + dp_v[t + 1] - cap;
        if excess > 0.0 {
            let r = excess.min(dp_v[t + 1]);
            dp_v[t + 1] -= r;
            dm_v[t] = (dm_v[t] - (excess - r)).max(0.0);
        }
    }
    Ok((dm_v[1..].to_vec(), dp_v[1..].to_vec()))
}

/// [`ramp_intervals`] for every device, stacked into one container.
pub fn ramp_intervals_all(
    p_bar: &[Vec<f64>],
    u: &CommitmentVars,
    inst: &Instance,
    deadline: Option<Instant>,
) -> Result<RampIntervals> {
    let mut out = RampIntervals::zeros(inst);
    for j in 0..inst.devices.len() {
        let (minus, plus) = ramp_intervals(j, &p_bar[j], u, inst, deadline)?;
        out.delta_minus[j] = minus;
        out.delta_plus[j] = plus;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shared per-period device block
// ---------------------------------------------------------------------------

/// Variable ids of one device at one period inside a math program.
#[derive(Debug, Clone)]
struct DevPeriodVars {
    p_tot: usize,
    p_on: usize,
    p_su: usize,
    p_sd: usize,
    q_tot: usize,
    u_on: usize,
    chi_su: usize,
    chi_sd: usize,
    p_res: [Vec<usize>; RES_CATS],
    q_res_up: usize,
    q_res_dn: usize,
    blocks: Vec<usize>,
}

/// Fixed commitment data pinning a device block in a final solve.
struct DevPins {
    u_on: f64,
    su_mass: f64,
    sd_mass: f64,
    su_traj: f64,
    sd_traj: f64,
    p_lo: f64,
    p_hi: f64,
}

fn su_cap(dev: &crate::instance::Device, t: usize) -> f64 {
    dev.t_supc(t).iter().map(|&(_, v)| v).fold(0.0, f64::max)
}

fn sd_cap(dev: &crate::instance::Device, t: usize) -> f64 {
    dev.t_sdpc(t).iter().map(|&(_, v)| v).fold(0.0, f64::max)
}

/// Adds the per-period device variables and the aggregated envelope rows.
/// Commitment-like variables live in [0,1] (pinned for must-run/must-out
/// periods, or entirely when `pins` fixes the schedule); the rows match
/// `pq_envelope_residuals` in aggregated mode term for term.
fn add_device_period(
    prog: &mut MathProgram,
    j: usize,
    t: usize,
    inst: &Instance,
    with_blocks: bool,
    pins: Option<&DevPins>,
) -> DevPeriodVars {
    let dev = &inst.devices[j];
    let producer = dev.is_producer();

    let (on_lo, on_hi, csu_b, csd_b, psu_b, psd_b, pt_lo, pt_hi) = match pins {
        Some(p) => (
            p.u_on,
            p.u_on,
            (p.su_mass, p.su_mass),
            (p.sd_mass, p.sd_mass),
            (p.su_traj, p.su_traj),
            (p.sd_traj, p.sd_traj),
            p.p_lo.max(0.0),
            p.p_hi,
        ),
        None => {
            let (lo, hi) = if dev.must_run.contains(&t) {
                (1.0, 1.0)
            } else if dev.must_out.contains(&t) {
                (0.0, 0.0)
            } else {
                (0.0, 1.0)
            };
            (lo, hi, (0.0, 1.0), (0.0, 1.0), (0.0, INF), (0.0, INF), 0.0, INF)
        }
    };

    let p_tot = prog.add_var(pt_lo, pt_hi);
    let p_on = prog.add_var(0.0, INF);
    let p_su = prog.add_var(psu_b.0, psu_b.1);
    let p_sd = prog.add_var(psd_b.0, psd_b.1);
    let q_tot = prog.add_var(-INF, INF);
    let u_on = prog.add_var(on_lo, on_hi);
    let chi_su = prog.add_var(csu_b.0, csu_b.1);
    let chi_sd = prog.add_var(csd_b.0, csd_b.1);
    let p_res: [Vec<usize>; RES_CATS] = [
        (0..inst.reserves.product_count(ResCat::OnUp)).map(|_| prog.add_var(0.0, INF)).collect(),
        (0..inst.reserves.product_count(ResCat::OnDn)).map(|_| prog.add_var(0.0, INF)).collect(),
        (0..inst.reserves.product_count(ResCat::OffUp)).map(|_| prog.add_var(0.0, INF)).collect(),
    ];
    let q_res_up = prog.add_var(0.0, INF);
    let q_res_dn = prog.add_var(0.0, INF);
    let blocks: Vec<usize> =
        if with_blocks { dev.blocks.iter().map(|&(w, _)| prog.add_var(0.0, w)).collect() } else { Vec::new() };

    // total_power_split
    prog.add_eq(vec![(p_tot, 1.0), (p_on, -1.0), (p_su, -1.0), (p_sd, -1.0)], 0.0);
    // startup/shutdown power against the aggregated trajectory mass
    prog.add_le(vec![(p_su, 1.0), (chi_su, -su_cap(dev, t))], 0.0);
    prog.add_le(vec![(p_sd, 1.0), (chi_sd, -sd_cap(dev, t))], 0.0);
    // chi exclusion; only meaningful while the masses are free
    if pins.is_none() {
        prog.add_le(vec![(u_on, 1.0), (chi_su, 1.0)], 1.0);
        prog.add_le(vec![(u_on, 1.0), (chi_sd, 1.0)], 1.0);
    }
    // cumulative reserve caps
    for cat in [ResCat::OnUp, ResCat::OnDn] {
        let vals = &p_res[cat as usize];
        for r in 0..vals.len() {
            let mut terms: Vec<(usize, f64)> = vals[r..].iter().map(|&id| (id, 1.0)).collect();
            terms.push((u_on, -dev.p_res_max[cat as usize][r]));
            prog.add_le(terms, 0.0);
        }
    }
    let off = &p_res[ResCat::OffUp as usize];
    for r in 0..off.len() {
        let cap = dev.p_res_max[ResCat::OffUp as usize][r];
        let mut terms: Vec<(usize, f64)> = off[r..].iter().map(|&id| (id, 1.0)).collect();
        terms.push((u_on, cap));
        prog.add_le(terms, cap);
    }
    // headroom against the reserve side sums
    let (up_cat, dn_cat) =
        if producer { (ResCat::OnUp, ResCat::OnDn) } else { (ResCat::OnDn, ResCat::OnUp) };
    let mut terms = vec![(p_on, 1.0), (u_on, -dev.p_max[t])];
    terms.extend(p_res[up_cat as usize].iter().map(|&id| (id, 1.0)));
    prog.add_le(terms, 0.0);
    let mut terms = vec![(p_on, -1.0), (u_on, dev.p_min[t])];
    terms.extend(p_res[dn_cat as usize].iter().map(|&id| (id, 1.0)));
    prog.add_le(terms, 0.0);
    // offline envelope for trajectory power plus offline reserve
    let mut terms = vec![(p_tot, 1.0), (p_on, -1.0), (u_on, dev.p_max[t])];
    terms.extend(off.iter().map(|&id| (id, 1.0)));
    prog.add_le(terms, dev.p_max[t]);
    // reactive envelope against the active commitment mass
    let (hi_res, lo_res) = if producer { (q_res_up, q_res_dn) } else { (q_res_dn, q_res_up) };
    prog.add_le(
        vec![
            (q_tot, 1.0),
            (u_on, -dev.q_max[t]),
            (chi_su, -dev.q_max[t]),
            (chi_sd, -dev.q_max[t]),
            (p_tot, -dev.beta_max),
            (hi_res, 1.0),
        ],
        0.0,
    );
    prog.add_le(
        vec![
            (q_tot, -1.0),
            (u_on, dev.q_min[t]),
            (chi_su, dev.q_min[t]),
            (chi_sd, dev.q_min[t]),
            (p_tot, dev.beta_min),
            (lo_res, 1.0),
        ],
        0.0,
    );
    // power-curve block split
    if with_blocks {
        let mut terms: Vec<(usize, f64)> = blocks.iter().map(|&id| (id, 1.0)).collect();
        terms.push((p_tot, -1.0));
        prog.add_eq(terms, 0.0);
    }

    DevPeriodVars { p_tot, p_on, p_su, p_sd, q_tot, u_on, chi_su, chi_sd, p_res, q_res_up, q_res_dn, blocks }
}

/// Power-curve objective terms: consumers earn, producers pay.
fn add_block_objective(prog: &mut MathProgram, j: usize, t: usize, inst: &Instance, dv: &DevPeriodVars) {
    let dev = &inst.devices[j];
    let sign = if dev.is_producer() { -1.0 } else { 1.0 };
    for (k, &(_, price)) in dev.blocks.iter().enumerate() {
        prog.add_obj(dv.blocks[k], sign * inst.time.d[t] * price);
    }
}

/// Reserve provision costs at period `t` (all scaled by the period length).
fn add_reserve_cost_terms(prog: &mut MathProgram, t: usize, inst: &Instance, devs: &[DevPeriodVars]) {
    let res = &inst.reserves;
    let d = inst.time.d[t];
    for (j, dv) in devs.iter().enumerate() {
        for cat in ResCat::ALL {
            for r in 0..res.product_count(cat) {
                prog.add_obj(dv.p_res[cat as usize][r], -d * res.cost_p(j, cat, r, t));
            }
        }
        prog.add_obj(dv.q_res_up, -d * res.c_res_q_up[j][t]);
        prog.add_obj(dv.q_res_dn, -d * res.c_res_q_dn[j][t]);
    }
}

/// Zonal shortfall slacks and their penalties at period `t`. `devs` must be
/// indexed by device (the full device list).
fn add_zone_rows(prog: &mut MathProgram, t: usize, inst: &Instance, devs: &[DevPeriodVars]) {
    let d = inst.time.d[t];
    for zone in &inst.reserves.p_zones {
        let slack = prog.add_var(0.0, INF);
        prog.add_obj(slack, -d * zone.penalty);
        let provided: Vec<(usize, f64)> = zone
            .devices
            .iter()
            .flat_map(|&j| zone.products.iter().map(move |&(cat, r)| (devs[j].p_res[cat as usize][r], 1.0)))
            .collect();
        match zone.requirement {
            Requirement::Constant(v) => {
                let mut terms = vec![(slack, 1.0)];
                terms.extend(provided.iter().copied());
                prog.add_ge(terms, v);
            }
            Requirement::FracOfSum(alpha) => {
                let mut terms = vec![(slack, 1.0)];
                terms.extend(provided.iter().copied());
                terms.extend(zone.devices.iter().map(|&j| (devs[j].p_tot, -alpha)));
                prog.add_ge(terms, 0.0);
            }
            Requirement::FracOfMax(alpha) => {
                for &jm in &zone.devices {
                    let mut terms = vec![(slack, 1.0)];
                    terms.extend(provided.iter().copied());
                    terms.push((devs[jm].p_tot, -alpha));
                    prog.add_ge(terms, 0.0);
                }
            }
        }
    }
    for zone in &inst.reserves.q_zones {
        let slack = prog.add_var(0.0, INF);
        prog.add_obj(slack, -d * zone.penalty);
        let provided: Vec<(usize, f64)> = zone
            .devices
            .iter()
            .map(|&j| match zone.dir {
                QDir::Up => (devs[j].q_res_up, 1.0),
                QDir::Dn => (devs[j].q_res_dn, 1.0),
            })
            .collect();
        match zone.requirement {
            Requirement::Constant(v) => {
                let mut terms = vec![(slack, 1.0)];
                terms.extend(provided.iter().copied());
                prog.add_ge(terms, v);
            }
            Requirement::FracOfSum(alpha) => {
                let mut terms = vec![(slack, 1.0)];
                terms.extend(provided.iter().copied());
                terms.extend(zone.devices.iter().map(|&j| (devs[j].p_tot, -alpha)));
                prog.add_ge(terms, 0.0);
            }
            Requirement::FracOfMax(alpha) => {
                for &jm in &zone.devices {
                    let mut terms = vec![(slack, 1.0)];
                    terms.extend(provided.iter().copied());
                    terms.push((devs[jm].p_tot, -alpha));
                    prog.add_ge(terms, 0.0);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Temporal SOC program and the upper bound
// ---------------------------------------------------------------------------

struct SocNetVars {
    omega: Vec<usize>,
    p_fr: Vec<usize>,
    p_to: Vec<usize>,
    q_fr: Vec<usize>,
    q_to: Vec<usize>,
    c: Vec<usize>,
    s: Vec<usize>,
    mu: Vec<usize>,
    mu_sh: Vec<usize>,
}

enum SocMode<'a> {
    Temporal { anchor: Option<&'a CopyState>, rho: f64 },
    UpperBound,
}

/// Builds the per-period SOC program shared by the temporal subproblem and
/// the upper bound; the two differ only in the commitment-cost surrogate and
/// the anchor penalties.
fn build_soc_period(
    t: usize,
    mode: &SocMode,
    inst: &Instance,
) -> (MathProgram, Vec<DevPeriodVars>, SocNetVars) {
    let mut prog = MathProgram::new();
    let d = inst.time.d[t];
    let n_br = inst.branches.len();

    // Device blocks.
    let devs: Vec<DevPeriodVars> =
        (0..inst.devices.len()).map(|j| add_device_period(&mut prog, j, t, inst, true, None)).collect();
    for (j, dv) in devs.iter().enumerate() {
        add_block_objective(&mut prog, j, t, inst, dv);
        let dev = &inst.devices[j];
        match mode {
            SocMode::Temporal { .. } => {
                let su_on_max = dev.t_supc(t).iter().map(|&(tp, _)| dev.c_on[tp]).fold(0.0, f64::max);
                let sd_on_max = dev
                    .t_sdpc(t)
                    .iter()
                    .map(|&(tp, _)| if tp == 0 { 0.0 } else { dev.c_on[tp - 1] })
                    .fold(0.0, f64::max);
                prog.add_obj(dv.u_on, -dev.c_on[t]);
                prog.add_obj(dv.chi_su, -(su_on_max + dev.c_su));
                prog.add_obj(dv.chi_sd, -(sd_on_max + dev.c_sd));
            }
            SocMode::UpperBound => prog.add_obj(dv.u_on, -dev.c_on[t]),
        }
    }
    add_reserve_cost_terms(&mut prog, t, inst, &devs);
    add_zone_rows(&mut prog, t, inst, &devs);

    // Network block.
    let omega: Vec<usize> =
        inst.buses.iter().map(|b| prog.add_var(b.v_min * b.v_min, b.v_max * b.v_max)).collect();
    let mut p_fr = vec![0usize; n_br];
    let mut p_to = vec![0usize; n_br];
    let mut q_fr = vec![0usize; n_br];
    let mut q_to = vec![0usize; n_br];
    let mut c = vec![0usize; n_br];
    let mut s = vec![0usize; n_br];
    let mut mu = vec![0usize; n_br];
    for (jb, br) in inst.branches.iter().enumerate() {
        match &br.kind {
            crate::instance::BranchKind::Ac(ac) => {
                p_fr[jb] = prog.add_var(-INF, INF);
                p_to[jb] = prog.add_var(-INF, INF);
                q_fr[jb] = prog.add_var(-INF, INF);
                q_to[jb] = prog.add_var(-INF, INF);
                c[jb] = prog.add_var(-INF, INF);
                s[jb] = prog.add_var(-INF, INF);
                mu[jb] = prog.add_var(0.0, INF);
                // Linear flow definitions.
                prog.add_eq(vec![(p_fr[jb], 1.0), (mu[jb], -ac.g_fr), (c[jb], ac.g), (s[jb], ac.b)], 0.0);
                prog.add_eq(
                    vec![(p_to[jb], 1.0), (omega[br.to], -ac.g_to), (c[jb], ac.g), (s[jb], -ac.b)],
                    0.0,
                );
                prog.add_eq(vec![(q_fr[jb], 1.0), (mu[jb], ac.b_fr), (c[jb], -ac.b), (s[jb], ac.g)], 0.0);
                prog.add_eq(
                    vec![(q_to[jb], 1.0), (omega[br.to], ac.b_to), (c[jb], -ac.b), (s[jb], -ac.g)],
                    0.0,
                );
                // Tap box linking mu to the from-side voltage square.
                prog.add_le(vec![(omega[br.from], 1.0 / (ac.tau_max * ac.tau_max)), (mu[jb], -1.0)], 0.0);
                prog.add_le(vec![(mu[jb], 1.0), (omega[br.from], -1.0 / (ac.tau_min * ac.tau_min))], 0.0);
                // Rotated cone c^2 + s^2 <= mu * omega_to.
                prog.add_cone_rotated(mu[jb], omega[br.to], vec![c[jb], s[jb]]);
                // Apparent power overload.
                let r_f = prog.add_var(0.0, INF);
                let r_t = prog.add_var(0.0, INF);
                prog.add_cone_soc(r_f, vec![p_fr[jb], q_fr[jb]]);
                prog.add_cone_soc(r_t, vec![p_to[jb], q_to[jb]]);
                let sigma = prog.add_var(0.0, INF);
                prog.add_le(vec![(r_f, 1.0), (sigma, -1.0)], ac.s_max);
                prog.add_le(vec![(r_t, 1.0), (sigma, -1.0)], ac.s_max);
                prog.add_obj(sigma, -inst.penalties.c_s * d);
            }
            crate::instance::BranchKind::Dc(dc) => {
                p_fr[jb] = prog.add_var(-dc.p_max, dc.p_max);
                p_to[jb] = prog.add_var(-dc.p_max, dc.p_max);
                q_fr[jb] = prog.add_var(dc.q_fr_min, dc.q_fr_max);
                q_to[jb] = prog.add_var(dc.q_to_min, dc.q_to_max);
                c[jb] = usize::MAX;
                s[jb] = usize::MAX;
                mu[jb] = usize::MAX;
                prog.add_eq(vec![(p_fr[jb], 1.0), (p_to[jb], 1.0)], 0.0);
            }
        }
    }
    let mu_sh: Vec<usize> = inst
        .shunts
        .iter()
        .map(|sh| {
            let id = prog.add_var(-INF, INF);
            prog.add_le(vec![(omega[sh.bus], sh.step_min), (id, -1.0)], 0.0);
            prog.add_le(vec![(id, 1.0), (omega[sh.bus], -sh.step_max)], 0.0);
            id
        })
        .collect();

    // Bus balance with absolute-value slacks.
    for (i, _) in inst.buses.iter().enumerate() {
        let mut terms_p: Vec<(usize, f64)> = Vec::new();
        let mut terms_q: Vec<(usize, f64)> = Vec::new();
        for (j, dev) in inst.devices.iter().enumerate() {
            if dev.bus != i {
                continue;
            }
            let sign = if dev.is_producer() { 1.0 } else { -1.0 };
            terms_p.push((devs[j].p_tot, sign));
            terms_q.push((devs[j].q_tot, sign));
        }
        for (js, sh) in inst.shunts.iter().enumerate() {
            if sh.bus != i {
                continue;
            }
            terms_p.push((mu_sh[js], -sh.g_sh));
            terms_q.push((mu_sh[js], sh.b_sh));
        }
        for (jb, br) in inst.branches.iter().enumerate() {
            if br.from == i {
                terms_p.push((p_fr[jb], -1.0));
                terms_q.push((q_fr[jb], -1.0));
            }
            if br.to == i {
                terms_p.push((p_to[jb], -1.0));
                terms_q.push((q_to[jb], -1.0));
            }
        }
        let pos_p = prog.add_var(0.0, INF);
        let neg_p = prog.add_var(0.0, INF);
        let pos_q = prog.add_var(0.0, INF);
        let neg_q = prog.add_var(0.0, INF);
        prog.add_obj(pos_p, -inst.penalties.c_p * d);
        prog.add_obj(neg_p, -inst.penalties.c_p * d);
        prog.add_obj(pos_q, -inst.penalties.c_q * d);
        prog.add_obj(neg_q, -inst.penalties.c_q * d);
        terms_p.push((pos_p, -1.0));
        terms_p.push((neg_p, 1.0));
        terms_q.push((pos_q, -1.0));
        terms_q.push((neg_q, 1.0));
        prog.add_eq(terms_p, 0.0);
        prog.add_eq(terms_q, 0.0);
    }

    // Anchor adherence.
    if let SocMode::Temporal { anchor: Some(a), rho } = mode {
        if *rho > 0.0 {
            for (j, dv) in devs.iter().enumerate() {
                for (id, val) in [
                    (dv.p_tot, a.p_tot[j][t]),
                    (dv.p_su, a.p_su[j][t]),
                    (dv.p_sd, a.p_sd[j][t]),
                    (dv.q_tot, a.q_tot[j][t]),
                    (dv.q_res_up, a.q_res_up[j][t]),
                    (dv.q_res_dn, a.q_res_dn[j][t]),
                    (dv.u_on, a.u_on[j][t]),
                ] {
                    prog.add_quad_penalty(*rho, vec![(id, 1.0)], -val);
                }
            }
            for (js, sh) in inst.shunts.iter().enumerate() {
                prog.add_quad_penalty(
                    *rho,
                    vec![(mu_sh[js], 1.0), (omega[sh.bus], -a.u_sh[js][t])],
                    0.0,
                );
            }
        }
    }

    let net = SocNetVars { omega, p_fr, p_to, q_fr, q_to, c, s, mu, mu_sh };
    (prog, devs, net)
}

fn extract_temporal_slice(
    t: usize,
    x: &[f64],
    devs: &[DevPeriodVars],
    net: &SocNetVars,
) -> TemporalSlice {
    let dev_field = |f: &dyn Fn(&DevPeriodVars) -> usize| -> Vec<f64> {
        devs.iter().map(|dv| x[f(dv)]).collect()
    };
    let br_field = |ids: &[usize]| -> Vec<f64> {
        ids.iter().map(|&id| if id == usize::MAX { 0.0 } else { x[id] }).collect()
    };
    TemporalSlice {
        t,
        p_tot: dev_field(&|dv| dv.p_tot),
        p_on: dev_field(&|dv| dv.p_on),
        p_su: dev_field(&|dv| dv.p_su),
        p_sd: dev_field(&|dv| dv.p_sd),
        q_tot: dev_field(&|dv| dv.q_tot),
        p_res: devs
            .iter()
            .map(|dv| {
                [
                    dv.p_res[0].iter().map(|&id| x[id]).collect(),
                    dv.p_res[1].iter().map(|&id| x[id]).collect(),
                    dv.p_res[2].iter().map(|&id| x[id]).collect(),
                ]
            })
            .collect(),
        q_res_up: dev_field(&|dv| dv.q_res_up),
        q_res_dn: dev_field(&|dv| dv.q_res_dn),
        u_on: dev_field(&|dv| dv.u_on),
        chi_su: dev_field(&|dv| dv.chi_su),
        chi_sd: dev_field(&|dv| dv.chi_sd),
        p_fr: br_field(&net.p_fr),
        p_to: br_field(&net.p_to),
        q_fr: br_field(&net.q_fr),
        q_to: br_field(&net.q_to),
        c: br_field(&net.c),
        s: br_field(&net.s),
        mu: br_field(&net.mu),
        omega: net.omega.iter().map(|&id| x[id]).collect(),
        mu_sh: net.mu_sh.iter().map(|&id| x[id]).collect(),
    }
}

/// Solves the per-period temporal SOC program: relaxed device envelope and
/// the cone relaxation of the network, penalized toward the anchor copies.
pub fn solve_temporal_soc(
    t: usize,
    anchor: Option<&CopyState>,
    rho: f64,
    inst: &Instance,
    deadline: Option<Instant>,
) -> Result<SubproblemResult<TemporalSlice>> {
    if anchor.is_none() && rho != 0.0 {
        return Err(Error::MalformedProgram(format!(
            "temporal SOC at t={t} needs an anchor when rho={rho} > 0"
        )));
    }
    let (prog, devs, net) = build_soc_period(t, &SocMode::Temporal { anchor, rho }, inst);
    let solve = solve_conic(&prog, deadline).map_err(|e| Error::SubproblemFailure {
        context: format!("temporal SOC t={t}"),
        detail: e.to_string(),
    })?;
    let vars = extract_temporal_slice(t, &solve.x, &devs, &net);
    Ok(SubproblemResult { id: SubproblemId::Period(t), solve, vars })
}

/// Convex upper bound: per-period SOC relaxation with only the plain online
/// cost, summed over the horizon. Dominates the score of every feasible
/// solution.
pub fn dual_bound(inst: &Instance, deadline: Option<Instant>) -> Result<(f64, Vec<f64>)> {
    let mut per_period = Vec::with_capacity(inst.t_count());
    for t in 0..inst.t_count() {
        let (prog, _, _) = build_soc_period(t, &SocMode::UpperBound, inst);
        let solve = solve_conic(&prog, deadline).map_err(|e| Error::SubproblemFailure {
            context: format!("upper bound t={t}"),
            detail: e.to_string(),
        })?;
        if solve.status != SolveStatus::Optimal {
            return Err(Error::SubproblemFailure {
                context: format!("upper bound t={t}"),
                detail: format!("solver returned {:?}", solve.status),
            });
        }
        per_period.push(solve.objective);
    }
    Ok((per_period.iter().sum(), per_period))
}

// ---------------------------------------------------------------------------
// Commitment MILPs
// ---------------------------------------------------------------------------

struct UcDeviceVars {
    u_on: Vec<usize>,
    u_su: Vec<usize>,
    u_sd: Vec<usize>,
    p_tot: Vec<usize>,
    p_on: Vec<usize>,
    p_su: Vec<usize>,
    p_sd: Vec<usize>,
    q_tot: Vec<usize>,
    p_res: Vec<[Vec<usize>; RES_CATS]>,
    q_res_up: Vec<usize>,
    q_res_dn: Vec<usize>,
}

/// Adds one device's full-horizon exact commitment set: binary logic,
/// trajectory-power equalities, the exact envelope, ramps, and the
/// commitment cost terms (including linearized downtime-dependent startup
/// adjustments and energy-bound penalties).
fn add_uc_device(prog: &mut MathProgram, j: usize, inst: &Instance) -> UcDeviceVars {
    let dev = &inst.devices[j];
    let t_count = inst.t_count();
    let producer = dev.is_producer();

    let bin_bounds = |t: usize| -> (f64, f64) {
        if dev.must_run.contains(&t) {
            (1.0, 1.0)
        } else if dev.must_out.contains(&t) {
            (0.0, 0.0)
        } else {
            (0.0, 1.0)
        }
    };
    let u_on: Vec<usize> = (0..t_count)
        .map(|t| {
            let (lo, hi) = bin_bounds(t);
            prog.add_int_var(lo, hi)
        })
        .collect();
    let u_su: Vec<usize> = (0..t_count).map(|_| prog.add_int_var(0.0, 1.0)).collect();
    let u_sd: Vec<usize> = (0..t_count).map(|_| prog.add_int_var(0.0, 1.0)).collect();
    let p_tot: Vec<usize> = (0..t_count).map(|_| prog.add_var(0.0, INF)).collect();
    let p_on: Vec<usize> = (0..t_count).map(|_| prog.add_var(0.0, INF)).collect();
    let p_su: Vec<usize> = (0..t_count).map(|_| prog.add_var(0.0, INF)).collect();
    let p_sd: Vec<usize> = (0..t_count).map(|_| prog.add_var(0.0, INF)).collect();
    let q_tot: Vec<usize> = (0..t_count).map(|_| prog.add_var(-INF, INF)).collect();
    let p_res: Vec<[Vec<usize>; RES_CATS]> = (0..t_count)
        .map(|_| {
            [
                (0..inst.reserves.product_count(ResCat::OnUp)).map(|_| prog.add_var(0.0, INF)).collect(),
                (0..inst.reserves.product_count(ResCat::OnDn)).map(|_| prog.add_var(0.0, INF)).collect(),
                (0..inst.reserves.product_count(ResCat::OffUp)).map(|_| prog.add_var(0.0, INF)).collect(),
            ]
        })
        .collect();
    let q_res_up: Vec<usize> = (0..t_count).map(|_| prog.add_var(0.0, INF)).collect();
    let q_res_dn: Vec<usize> = (0..t_count).map(|_| prog.add_var(0.0, INF)).collect();

    for t in 0..t_count {
        let d = inst.time.d[t];
        // Transition logic.
        if t == 0 {
            prog.add_eq(vec![(u_on[0], 1.0), (u_su[0], -1.0), (u_sd[0], 1.0)], dev.u_on_init);
        } else {
            prog.add_eq(
                vec![(u_on[t], 1.0), (u_on[t - 1], -1.0), (u_su[t], -1.0), (u_sd[t], 1.0)],
                0.0,
            );
        }
        prog.add_le(vec![(u_su[t], 1.0), (u_sd[t], 1.0)], 1.0);
        // Minimum downtime/uptime windows.
        let mut terms = vec![(u_su[t], 1.0)];
        terms.extend(dev.dn_min[t].iter().map(|&tp| (u_sd[tp], 1.0)));
        prog.add_le(terms, 1.0);
        let mut terms = vec![(u_sd[t], 1.0)];
        terms.extend(dev.up_min[t].iter().map(|&tp| (u_su[tp], 1.0)));
        prog.add_le(terms, 1.0);

        // Exact trajectory power.
        let supc = dev.t_supc(t);
        let sdpc = dev.t_sdpc(t);
        let mut terms = vec![(p_su[t], 1.0)];
        terms.extend(supc.iter().map(|&(tp, v)| (u_su[tp], -v)));
        prog.add_eq(terms, 0.0);
        let mut terms = vec![(p_sd[t], 1.0)];
        terms.extend(sdpc.iter().map(|&(tp, v)| (u_sd[tp], -v)));
        prog.add_eq(terms, 0.0);
        // Split.
        prog.add_eq(vec![(p_tot[t], 1.0), (p_on[t], -1.0), (p_su[t], -1.0), (p_sd[t], -1.0)], 0.0);
        // Cumulative reserve caps.
        for cat in [ResCat::OnUp, ResCat::OnDn] {
            let vals = &p_res[t][cat as usize];
            for r in 0..vals.len() {
                let mut terms: Vec<(usize, f64)> = vals[r..].iter().map(|&id| (id, 1.0)).collect();
                terms.push((u_on[t], -dev.p_res_max[cat as usize][r]));
                prog.add_le(terms, 0.0);
            }
        }
        let off = &p_res[t][ResCat::OffUp as usize];
        for r in 0..off.len() {
            let cap = dev.p_res_max[ResCat::OffUp as usize][r];
            let mut terms: Vec<(usize, f64)> = off[r..].iter().map(|&id| (id, 1.0)).collect();
            terms.push((u_on[t], cap));
            prog.add_le(terms, cap);
        }
        // Headroom / offline envelope.
        let (up_cat, dn_cat) =
            if producer { (ResCat::OnUp, ResCat::OnDn) } else { (ResCat::OnDn, ResCat::OnUp) };
        let mut terms = vec![(p_on[t], 1.0), (u_on[t], -dev.p_max[t])];
        terms.extend(p_res[t][up_cat as usize].iter().map(|&id| (id, 1.0)));
        prog.add_le(terms, 0.0);
        let mut terms = vec![(p_on[t], -1.0), (u_on[t], dev.p_min[t])];
        terms.extend(p_res[t][dn_cat as usize].iter().map(|&id| (id, 1.0)));
        prog.add_le(terms, 0.0);
        let mut terms = vec![(p_tot[t], 1.0), (p_on[t], -1.0), (u_on[t], dev.p_max[t])];
        terms.extend(off.iter().map(|&id| (id, 1.0)));
        prog.add_le(terms, dev.p_max[t]);
        // Reactive envelope: commitment mass is u_on plus the trajectory
        // window sums.
        let (hi_res, lo_res) =
            if producer { (q_res_up[t], q_res_dn[t]) } else { (q_res_dn[t], q_res_up[t]) };
        let mut terms = vec![
            (q_tot[t], 1.0),
            (u_on[t], -dev.q_max[t]),
            (p_tot[t], -dev.beta_max),
            (hi_res, 1.0),
        ];
        terms.extend(supc.iter().map(|&(tp, _)| (u_su[tp], -dev.q_max[t])));
        terms.extend(sdpc.iter().map(|&(tp, _)| (u_sd[tp], -dev.q_max[t])));
        prog.add_le(terms, 0.0);
        let mut terms = vec![
            (q_tot[t], -1.0),
            (u_on[t], dev.q_min[t]),
            (p_tot[t], dev.beta_min),
            (lo_res, 1.0),
        ];
        terms.extend(supc.iter().map(|&(tp, _)| (u_su[tp], dev.q_min[t])));
        terms.extend(sdpc.iter().map(|&(tp, _)| (u_sd[tp], dev.q_min[t])));
        prog.add_le(terms, 0.0);
        // Ramps.
        let up_on = d * (dev.p_ru - dev.p_ru_su);
        let up_su = d * (dev.p_ru_su - dev.p_ru);
        let dn_on = d * (dev.p_rd - dev.p_rd_sd);
        if t == 0 {
            prog.add_le(
                vec![(p_tot[0], 1.0), (u_on[0], -up_on), (u_su[0], -up_su)],
                d * dev.p_ru_su + dev.p_tot_init,
            );
            prog.add_le(
                vec![(p_tot[0], -1.0), (u_on[0], -dn_on)],
                d * dev.p_rd_sd - dev.p_tot_init,
            );
        } else {
            prog.add_le(
                vec![(p_tot[t], 1.0), (p_tot[t - 1], -1.0), (u_on[t], -up_on), (u_su[t], -up_su)],
                d * dev.p_ru_su,
            );
            prog.add_le(
                vec![(p_tot[t], -1.0), (p_tot[t - 1], 1.0), (u_on[t], -dn_on)],
                d * dev.p_rd_sd,
            );
        }

        // Power-curve blocks and commitment costs.
        let sign = if producer { -1.0 } else { 1.0 };
        let mut terms = Vec::with_capacity(dev.blocks.len() + 1);
        for &(w, price) in &dev.blocks {
            let b = prog.add_var(0.0, w);
            prog.add_obj(b, sign * d * price);
            terms.push((b, 1.0));
        }
        terms.push((p_tot[t], -1.0));
        prog.add_eq(terms, 0.0);
        prog.add_obj(u_on[t], -dev.c_on[t] - TIE_EPS);
        prog.add_obj(u_su[t], -dev.c_su);
        prog.add_obj(u_sd[t], -dev.c_sd);
    }
    // Startup windows.
    for win in &dev.su_max {
        let terms: Vec<(usize, f64)> = win.periods.iter().map(|&t| (u_su[t], 1.0)).collect();
        prog.add_le(terms, win.limit as f64);
    }
    // Downtime-dependent startup cost adjustments, linearized exactly on
    // binaries: z = [u_su + u_on' - 1]+ boxed from both sides.
    for adj in &dev.c_dd {
        let z = prog.add_var(0.0, 1.0);
        prog.add_le(vec![(z, 1.0), (u_su[adj.t], -1.0)], 0.0);
        prog.add_le(vec![(z, 1.0), (u_on[adj.tp], -1.0)], 0.0);
        prog.add_ge(vec![(z, 1.0), (u_su[adj.t], -1.0), (u_on[adj.tp], -1.0)], -1.0);
        prog.add_obj(z, adj.value);
    }
    // Energy window penalties.
    for w in &dev.en_min {
        let slack = prog.add_var(0.0, INF);
        prog.add_obj(slack, -inst.penalties.c_e);
        let mut terms = vec![(slack, 1.0)];
        terms.extend(w.periods.iter().map(|&t| (p_tot[t], inst.time.d[t])));
        prog.add_ge(terms, w.bound);
    }
    for w in &dev.en_max {
        let slack = prog.add_var(0.0, INF);
        prog.add_obj(slack, -inst.penalties.c_e);
        let mut terms = vec![(slack, 1.0)];
        terms.extend(w.periods.iter().map(|&t| (p_tot[t], -inst.time.d[t])));
        prog.add_ge(terms, -w.bound);
    }

    UcDeviceVars { u_on, u_su, u_sd, p_tot, p_on, p_su, p_sd, q_tot, p_res, q_res_up, q_res_dn }
}

/// Adds the l1 anchor-adherence penalty on the copied variables of one
/// device.
fn add_l1_anchor(
    prog: &mut MathProgram,
    j: usize,
    uc: &UcDeviceVars,
    anchor: &CopyState,
    rho: f64,
    t_count: usize,
) {
    if rho == 0.0 {
        return;
    }
    for t in 0..t_count {
        for (id, val) in [
            (uc.p_tot[t], anchor.p_tot[j][t]),
            (uc.p_su[t], anchor.p_su[j][t]),
            (uc.p_sd[t], anchor.p_sd[j][t]),
            (uc.q_tot[t], anchor.q_tot[j][t]),
            (uc.q_res_up[t], anchor.q_res_up[j][t]),
            (uc.q_res_dn[t], anchor.q_res_dn[j][t]),
            (uc.u_on[t], anchor.u_on[j][t]),
        ] {
            let a = prog.add_var(0.0, INF);
            prog.add_le(vec![(id, 1.0), (a, -1.0)], val);
            prog.add_le(vec![(id, -1.0), (a, -1.0)], -val);
            prog.add_obj(a, -rho);
        }
    }
}

fn build_uc_program(
    js: &[usize],
    anchor: &CopyState,
    rho: f64,
    frozen: Option<(usize, &NetworkFlows)>,
    inst: &Instance,
) -> (MathProgram, Vec<UcDeviceVars>) {
    let mut prog = MathProgram::new();
    let t_count = inst.t_count();
    let ucs: Vec<UcDeviceVars> = js.iter().map(|&j| add_uc_device(&mut prog, j, inst)).collect();
    for (pos, &j) in js.iter().enumerate() {
        add_l1_anchor(&mut prog, j, &ucs[pos], anchor, rho, t_count);
    }
    if let Some((bus, flows)) = frozen {
        let res = &inst.reserves;
        for (pos, &j) in js.iter().enumerate() {
            for t in 0..t_count {
                let d = inst.time.d[t];
                for cat in ResCat::ALL {
                    for r in 0..res.product_count(cat) {
                        prog.add_obj(ucs[pos].p_res[t][cat as usize][r], -d * res.cost_p(j, cat, r, t));
                    }
                }
                prog.add_obj(ucs[pos].q_res_up[t], -d * res.c_res_q_up[j][t]);
                prog.add_obj(ucs[pos].q_res_dn[t], -d * res.c_res_q_dn[j][t]);
            }
        }
        // Frozen-flow imbalance at the bus: branch and shunt draws are
        // constants, device injections are live.
        for t in 0..t_count {
            let d = inst.time.d[t];
            let mut const_p = 0.0;
            let mut const_q = 0.0;
            for (jsh, sh) in inst.shunts.iter().enumerate() {
                if sh.bus == bus {
                    const_p += flows.p_sh[jsh][t];
                    const_q += flows.q_sh[jsh][t];
                }
            }
            for (jb, br) in inst.branches.iter().enumerate() {
                if br.from == bus {
                    const_p += flows.p_fr[jb][t];
                    const_q += flows.q_fr[jb][t];
                }
                if br.to == bus {
                    const_p += flows.p_to[jb][t];
                    const_q += flows.q_to[jb][t];
                }
            }
            let pos_p = prog.add_var(0.0, INF);
            let neg_p = prog.add_var(0.0, INF);
            let pos_q = prog.add_var(0.0, INF);
            let neg_q = prog.add_var(0.0, INF);
            prog.add_obj(pos_p, -inst.penalties.c_p * d);
            prog.add_obj(neg_p, -inst.penalties.c_p * d);
            prog.add_obj(pos_q, -inst.penalties.c_q * d);
            prog.add_obj(neg_q, -inst.penalties.c_q * d);
            let mut terms_p = vec![(pos_p, -1.0), (neg_p, 1.0)];
            let mut terms_q = vec![(pos_q, -1.0), (neg_q, 1.0)];
            for (pos_j, &j) in js.iter().enumerate() {
                let sign = if inst.devices[j].is_producer() { 1.0 } else { -1.0 };
                terms_p.push((ucs[pos_j].p_tot[t], sign));
                terms_q.push((ucs[pos_j].q_tot[t], sign));
            }
            prog.add_eq(terms_p, const_p);
            prog.add_eq(terms_q, const_q);
        }
    }
    (prog, ucs)
}

fn extract_bus_slice(
    bus: usize,
    js: &[usize],
    x: &[f64],
    ucs: &[UcDeviceVars],
    t_count: usize,
) -> BusSlice {
    let row = |ids: &[usize], round: bool| -> Vec<f64> {
        ids.iter().map(|&id| if round { x[id].round() } else { x[id] }).collect()
    };
    // Power components are structurally nonnegative; trim solver-tolerance
    // undershoot so downstream exact evaluation never sees -1e-12 dispatches.
    let pos = |ids: &[usize]| -> Vec<f64> { ids.iter().map(|&id| x[id].max(0.0)).collect() };
    BusSlice {
        bus,
        devices: js.to_vec(),
        u_on: ucs.iter().map(|uc| row(&uc.u_on, true)).collect(),
        u_su: ucs.iter().map(|uc| row(&uc.u_su, true)).collect(),
        u_sd: ucs.iter().map(|uc| row(&uc.u_sd, true)).collect(),
        p_tot: ucs.iter().map(|uc| pos(&uc.p_tot)).collect(),
        p_on: ucs.iter().map(|uc| pos(&uc.p_on)).collect(),
        p_su: ucs.iter().map(|uc| pos(&uc.p_su)).collect(),
        p_sd: ucs.iter().map(|uc| pos(&uc.p_sd)).collect(),
        q_tot: ucs.iter().map(|uc| row(&uc.q_tot, false)).collect(),
        p_res: ucs
            .iter()
            .map(|uc| {
                (0..t_count)
                    .map(|t| {
                        [
                            uc.p_res[t][0].iter().map(|&id| x[id]).collect(),
                            uc.p_res[t][1].iter().map(|&id| x[id]).collect(),
                            uc.p_res[t][2].iter().map(|&id| x[id]).collect(),
                        ]
                    })
                    .collect()
            })
            .collect(),
        q_res_up: ucs.iter().map(|uc| row(&uc.q_res_up, false)).collect(),
        q_res_dn: ucs.iter().map(|uc| row(&uc.q_res_dn, false)).collect(),
    }
}

fn empty_bus_slice(bus: usize) -> SubproblemResult<BusSlice> {
    SubproblemResult {
        id: SubproblemId::Bus(bus),
        solve: SolveResult {
            status: SolveStatus::Optimal,
            x: Vec::new(),
            objective: 0.0,
            max_residual: 0.0,
        },
        vars: BusSlice {
            bus,
            devices: Vec::new(),
            u_on: Vec::new(),
            u_su: Vec::new(),
            u_sd: Vec::new(),
            p_tot: Vec::new(),
            p_on: Vec::new(),
            p_su: Vec::new(),
            p_sd: Vec::new(),
            q_tot: Vec::new(),
            p_res: Vec::new(),
            q_res_up: Vec::new(),
            q_res_dn: Vec::new(),
        },
    }
}

/// Solves the per-bus commitment MILP: all devices co-located at bus `i`
/// over the full horizon, with the l1 anchor penalty and the frozen-flow
/// imbalance term.
pub fn solve_bus_milp(
    i: usize,
    anchor: &CopyState,
    rho: f64,
    frozen: &NetworkFlows,
    inst: &Instance,
    deadline: Option<Instant>,
) -> Result<SubproblemResult<BusSlice>> {
    let js = inst.devices_at_bus(i);
    if js.is_empty() {
        return Ok(empty_bus_slice(i));
    }
    let (prog, ucs) = build_uc_program(&js, anchor, rho, Some((i, frozen)), inst);
    let solve = solve_milp(&prog, MILP_GAP, MILP_NODE_LIMIT, deadline).map_err(|e| {
        Error::SubproblemFailure { context: format!("bus MILP i={i}"), detail: e.to_string() }
    })?;
    let vars = extract_bus_slice(i, &js, &solve.x, &ucs, inst.t_count());
    Ok(SubproblemResult { id: SubproblemId::Bus(i), solve, vars })
}

/// Solves the single-device commitment MILP with only the device revenue
/// and the l1 anchor penalty (the reference decomposition path).
pub fn solve_device_milp(
    j: usize,
    anchor: &CopyState,
    rho: f64,
    inst: &Instance,
    deadline: Option<Instant>,
) -> Result<SubproblemResult<BusSlice>> {
    let js = [j];
    let (prog, ucs) = build_uc_program(&js, anchor, rho, None, inst);
    let solve = solve_milp(&prog, MILP_GAP, MILP_NODE_LIMIT, deadline).map_err(|e| {
        Error::SubproblemFailure { context: format!("device MILP j={j}"), detail: e.to_string() }
    })?;
    let bus = inst.devices[j].bus;
    let vars = extract_bus_slice(bus, &js, &solve.x, &ucs, inst.t_count());
    Ok(SubproblemResult { id: SubproblemId::Bus(bus), solve, vars })
}

// ---------------------------------------------------------------------------
// Per-period AC NLPs
// ---------------------------------------------------------------------------

/// `sqrt(x^2 + eps^2)` and its derivative: smooth absolute value.
fn sabs(x: f64, eps: f64) -> (f64, f64) {
    let r = (x * x + eps * eps).sqrt();
    (r, x / r)
}

/// Smooth positive part `0.5 (x + sqrt(x^2 + eps^2))` and its derivative.
fn splus(x: f64, eps: f64) -> (f64, f64) {
    let (r, dr) = sabs(x, eps);
    (0.5 * (x + r), 0.5 * (1.0 + dr))
}

/// Smooth two-argument max and its partials.
fn smax2(a: f64, b: f64, eps: f64) -> (f64, f64, f64) {
    let (r, dr) = sabs(a - b, eps);
    (0.5 * (a + b + r), 0.5 * (1.0 + dr), 0.5 * (1.0 - dr))
}

/// AC branch data and variable ids captured by the network objective term.
struct AcNl {
    from: usize,
    to: usize,
    tau_id: usize,
    phi_id: usize,
    g: f64,
    b: f64,
    g_fr: f64,
    b_fr: f64,
    g_to: f64,
    b_to: f64,
    s_max: f64,
    s_max_ctg: f64,
}

struct DcNl {
    from: usize,
    to: usize,
    p_id: usize,
    qf_id: usize,
    qt_id: usize,
}

struct ShNl {
    bus: usize,
    u_id: usize,
    g_sh: f64,
    b_sh: f64,
}

struct DevNl {
    bus: usize,
    p_id: usize,
    q_id: usize,
    sign: f64,
}

/// One monitored contingency: shift-factor rows, the monitored branches
/// (position into the AC list plus full branch index), the per-branch bus
/// subsets (None = all buses), and the precomputed row sums over each
/// subset.
struct CtgNl {
    rows: Arc<Vec<Vec<f64>>>,
    monitored: Vec<(usize, usize)>,
    buses: Option<Vec<Vec<usize>>>,
    subsums: Vec<f64>,
}

/// Everything the smoothed network objective needs, self-contained so the
/// closures are `'static`.
struct NetData {
    n_bus: usize,
    d: f64,
    c_p: f64,
    c_q: f64,
    c_s: f64,
    eps: f64,
    v_ids: Vec<usize>,
    th_ids: Vec<usize>,
    ac: Vec<AcNl>,
    dc: Vec<DcNl>,
    sh: Vec<ShNl>,
    dev: Vec<DevNl>,
    ctg: Vec<CtgNl>,
    avg_coef: f64,
}

/// Flow values and the 4x6 Jacobian of one AC branch over
/// `(v_fr, v_to, theta_fr, theta_to, tau, phi)`.
fn flow_jac(br: &AcNl, x: &[f64], data: &NetData) -> ([f64; 4], [[f64; 6]; 4]) {
    let v_fr = x[data.v_ids[br.from]];
    let v_to = x[data.v_ids[br.to]];
    let tau = x[br.tau_id];
    let delta = x[data.th_ids[br.from]] - x[data.th_ids[br.to]] - x[br.phi_id];
    let (sin_d, cos_d) = delta.sin_cos();
    let w = v_fr * v_to / tau;
    // Trigonometric kernels and their delta-derivatives per flow.
    let kernels = [
        (-br.g * cos_d - br.b * sin_d, br.g * sin_d - br.b * cos_d),
        (-br.g * cos_d + br.b * sin_d, br.g * sin_d + br.b * cos_d),
        (br.b * cos_d - br.g * sin_d, -br.b * sin_d - br.g * cos_d),
        (br.b * cos_d + br.g * sin_d, -br.b * sin_d + br.g * cos_d),
    ];
    // Self-admittance terms: (coefficient, lives on from side).
    let selfs = [
        (br.g_fr, true),
        (br.g_to, false),
        (-br.b_fr, true),
        (-br.b_to, false),
    ];
    let mut flows = [0.0; 4];
    let mut jac = [[0.0; 6]; 4];
    for f in 0..4 {
        let (a, da) = kernels[f];
        let (y, on_from) = selfs[f];
        if on_from {
            flows[f] = y * v_fr * v_fr / (tau * tau) + w * a;
            jac[f][0] = 2.0 * y * v_fr / (tau * tau) + (v_to / tau) * a;
            jac[f][1] = (v_fr / tau) * a;
            jac[f][4] = -2.0 * y * v_fr * v_fr / (tau * tau * tau) - (w / tau) * a;
        } else {
            flows[f] = y * v_to * v_to + w * a;
            jac[f][0] = (v_to / tau) * a;
            jac[f][1] = 2.0 * y * v_to + (v_fr / tau) * a;
            jac[f][4] = -(w / tau) * a;
        }
        jac[f][2] = w * da;
        jac[f][3] = -w * da;
        jac[f][5] = -w * da;
    }
    (flows, jac)
}

/// Smoothed network penalty (negated, so it adds to a maximize objective):
/// bus imbalance, branch apparent-power overload, and the contingency
/// overload terms. When `grad` is given, the analytic gradient is
/// accumulated into it.
fn net_compute(data: &NetData, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
    let n_ac = data.ac.len();
    let mut flows = vec![[0.0; 4]; n_ac];
    let mut jacs = Vec::with_capacity(if grad.is_some() { n_ac } else { 0 });
    for (pos, br) in data.ac.iter().enumerate() {
        let (fl, jc) = flow_jac(br, x, data);
        flows[pos] = fl;
        if grad.is_some() {
            jacs.push(jc);
        }
    }
    // Penalty-weight accumulators: per-flow weights for AC branches and
    // direct weights for everything else.
    let mut fw = vec![[0.0; 4]; n_ac];
    let mut dpen = if grad.is_some() { vec![0.0; x.len()] } else { Vec::new() };

    // Bus imbalance.
    let mut b_p = vec![0.0; data.n_bus];
    let mut b_q = vec![0.0; data.n_bus];
    let mut p_sh = vec![0.0; data.sh.len()];
    let mut q_sh = vec![0.0; data.sh.len()];
    for dv in &data.dev {
        b_p[dv.bus] += dv.sign * x[dv.p_id];
        b_q[dv.bus] += dv.sign * x[dv.q_id];
    }
    for (js, sh) in data.sh.iter().enumerate() {
        let v = x[data.v_ids[sh.bus]];
        let u = x[sh.u_id];
        p_sh[js] = sh.g_sh * u * v * v;
        q_sh[js] = -sh.b_sh * u * v * v;
        b_p[sh.bus] -= p_sh[js];
        b_q[sh.bus] -= q_sh[js];
    }
    for dc in &data.dc {
        b_p[dc.from] -= x[dc.p_id];
        b_p[dc.to] += x[dc.p_id];
        b_q[dc.from] -= x[dc.qf_id];
        b_q[dc.to] -= x[dc.qt_id];
    }
    for (pos, br) in data.ac.iter().enumerate() {
        b_p[br.from] -= flows[pos][0];
        b_p[br.to] -= flows[pos][1];
        b_q[br.from] -= flows[pos][2];
        b_q[br.to] -= flows[pos][3];
    }
    let mut pen = 0.0;
    let mut wp = vec![0.0; data.n_bus];
    let mut wq = vec![0.0; data.n_bus];
    for i in 0..data.n_bus {
        let (ap, dap) = sabs(b_p[i], data.eps);
        let (aq, daq) = sabs(b_q[i], data.eps);
        pen += data.d * (data.c_p * ap + data.c_q * aq);
        wp[i] = data.d * data.c_p * dap;
        wq[i] = data.d * data.c_q * daq;
    }
    if grad.is_some() {
        for dv in &data.dev {
            dpen[dv.p_id] += dv.sign * wp[dv.bus];
            dpen[dv.q_id] += dv.sign * wq[dv.bus];
        }
        for dc in &data.dc {
            dpen[dc.p_id] += -wp[dc.from] + wp[dc.to];
            dpen[dc.qf_id] -= wq[dc.from];
            dpen[dc.qt_id] -= wq[dc.to];
        }
        for (pos, br) in data.ac.iter().enumerate() {
            fw[pos][0] -= wp[br.from];
            fw[pos][1] -= wp[br.to];
            fw[pos][2] -= wq[br.from];
            fw[pos][3] -= wq[br.to];
        }
    }

    // Pre-contingency overload.
    for (pos, br) in data.ac.iter().enumerate() {
        let [p_f, p_t, q_f, q_t] = flows[pos];
        let h_f = (p_f * p_f + q_f * q_f + data.eps * data.eps).sqrt();
        let h_t = (p_t * p_t + q_t * q_t + data.eps * data.eps).sqrt();
        let (m, dm_a, dm_b) = smax2(h_f, h_t, data.eps);
        let (over, dover) = splus(m - br.s_max, data.eps);
        pen += data.c_s * data.d * over;
        if grad.is_some() {
            let outer = data.c_s * data.d * dover;
            fw[pos][0] += outer * dm_a * p_f / h_f;
            fw[pos][2] += outer * dm_a * q_f / h_f;
            fw[pos][1] += outer * dm_b * p_t / h_t;
            fw[pos][3] += outer * dm_b * q_t / h_t;
        }
    }

    // Contingency overload: average plus smoothed worst case over the
    // monitored outages.
    if !data.ctg.is_empty() {
        let mut p_inj = vec![0.0; data.n_bus];
        for dv in &data.dev {
            p_inj[dv.bus] += dv.sign * x[dv.p_id];
        }
        for (js, sh) in data.sh.iter().enumerate() {
            p_inj[sh.bus] -= p_sh[js];
        }
        for dc in &data.dc {
            p_inj[dc.from] -= x[dc.p_id];
            p_inj[dc.to] += x[dc.p_id];
        }
        let slack: f64 = p_inj.iter().sum();
        let shift = slack / data.n_bus as f64;

        let ctg_cost = |k: &CtgNl, weight: f64, fw: &mut [[f64; 4]], w_inj: &mut [f64], shift_w: &mut f64| -> f64 {
            let mut cost = 0.0;
            for (pos_m, &(ac_pos, jb)) in k.monitored.iter().enumerate() {
                let br = &data.ac[ac_pos];
                let row = &k.rows[jb];
                let f = match &k.buses {
                    None => row.iter().zip(&p_inj).map(|(&r, &p)| r * p).sum::<f64>() - shift * k.subsums[pos_m],
                    Some(subs) => {
                        subs[pos_m].iter().map(|&i| row[i] * p_inj[i]).sum::<f64>()
                            - shift * k.subsums[pos_m]
                    }
                };
                let [_, _, q_f, q_t] = flows[ac_pos];
                let (a_f, da_f) = sabs(q_f, data.eps);
                let (a_t, da_t) = sabs(q_t, data.eps);
                let (qbar, dq_a, dq_b) = smax2(a_f, a_t, data.eps);
                let hyp = (f * f + qbar * qbar + data.eps * data.eps).sqrt();
                let (over, dover) = splus(hyp - br.s_max_ctg, data.eps);
                cost += data.c_s * data.d * over;
                if weight != 0.0 {
                    let outer = weight * data.c_s * data.d * dover;
                    let wf = outer * f / hyp;
                    let wq_bar = outer * qbar / hyp;
                    fw[ac_pos][2] += wq_bar * dq_a * da_f;
                    fw[ac_pos][3] += wq_bar * dq_b * da_t;
                    match &k.buses {
                        None => {
                            for (i, &r) in row.iter().enumerate() {
                                w_inj[i] += wf * r;
                            }
                        }
                        Some(subs) => {
                            for &i in &subs[pos_m] {
                                w_inj[i] += wf * row[i];
                            }
                        }
                    }
                    *shift_w += wf * k.subsums[pos_m];
                }
            }
            cost
        };

        // Value pass with the worst-case chain bookkeeping.
        let mut dummy_fw = Vec::new();
        let mut dummy_inj = Vec::new();
        let mut dummy_shift = 0.0;
        let costs: Vec<f64> = data
            .ctg
            .iter()
            .map(|k| ctg_cost(k, 0.0, &mut dummy_fw, &mut dummy_inj, &mut dummy_shift))
            .collect();
        let mut worst = 0.0;
        let mut chain = Vec::with_capacity(costs.len());
        for &c in &costs {
            let (m, da, db) = smax2(worst, c, data.eps);
            chain.push((da, db));
            worst = m;
        }
        pen += data.avg_coef * costs.iter().sum::<f64>() + worst;

        if grad.is_some() {
            let mut weights = vec![0.0; costs.len()];
            let mut prod = 1.0;
            for k in (0..costs.len()).rev() {
                weights[k] = chain[k].1 * prod;
                prod *= chain[k].0;
            }
            let mut w_inj = vec![0.0; data.n_bus];
            let mut shift_w = 0.0;
            for (k, ctg) in data.ctg.iter().enumerate() {
                ctg_cost(ctg, data.avg_coef + weights[k], &mut fw, &mut w_inj, &mut shift_w);
            }
            // Distribute injection weights; the slack shift spreads its
            // weight uniformly over every bus.
            let avg_shift = shift_w / data.n_bus as f64;
            let w_bus: Vec<f64> = w_inj.iter().map(|&w| w - avg_shift).collect();
            for dv in &data.dev {
                dpen[dv.p_id] += dv.sign * w_bus[dv.bus];
            }
            for sh in &data.sh {
                let v = x[data.v_ids[sh.bus]];
                let u = x[sh.u_id];
                let w = -w_bus[sh.bus];
                dpen[data.v_ids[sh.bus]] += w * 2.0 * sh.g_sh * u * v;
                dpen[sh.u_id] += w * sh.g_sh * v * v;
            }
            for dc in &data.dc {
                dpen[dc.p_id] += -w_bus[dc.from] + w_bus[dc.to];
            }
        }
    }

    if let Some(g) = grad.as_deref_mut() {
        // Shunt contributions to the balance weights (flows depend on v and
        // the step variable).
        for sh in &data.sh {
            let v = x[data.v_ids[sh.bus]];
            let u = x[sh.u_id];
            let (wp_i, wq_i) = (wp[sh.bus], wq[sh.bus]);
            dpen[data.v_ids[sh.bus]] +=
                -wp_i * 2.0 * sh.g_sh * u * v - wq_i * (-2.0 * sh.b_sh * u * v);
            dpen[sh.u_id] += -wp_i * sh.g_sh * v * v - wq_i * (-sh.b_sh * v * v);
        }
        // Push the accumulated flow weights through the branch Jacobians.
        for (pos, br) in data.ac.iter().enumerate() {
            let ids = [
                data.v_ids[br.from],
                data.v_ids[br.to],
                data.th_ids[br.from],
                data.th_ids[br.to],
                br.tau_id,
                br.phi_id,
            ];
            for f in 0..4 {
                let w = fw[pos][f];
                if w == 0.0 {
                    continue;
                }
                for c in 0..6 {
                    dpen[ids[c]] += w * jacs[pos][f][c];
                }
            }
        }
        for (gi, di) in g.iter_mut().zip(&dpen) {
            *gi -= di;
        }
    }
    -pen
}

/// Variable ids of one per-period NLP.
struct NlpVars {
    v: Vec<usize>,
    theta: Vec<usize>,
    tau: Vec<usize>,
    phi: Vec<usize>,
    u_sh: Vec<usize>,
    dc_pfr: Vec<usize>,
    dc_qfr: Vec<usize>,
    dc_qto: Vec<usize>,
    devs: Vec<DevPeriodVars>,
}

enum NlpMode<'a> {
    Final {
        u: &'a CommitmentVars,
        chi: &'a AggregateVars,
        u_sh: &'a [Vec<f64>],
        p_bar: &'a [Vec<f64>],
        delta: &'a RampIntervals,
        screened: Option<&'a ScreenSets>,
    },
    Temporal {
        anchor: Option<&'a CopyState>,
        rho: f64,
    },
}

fn build_period_nlp(
    t: usize,
    mode: &NlpMode,
    gsf: Option<&GsfSet>,
    eps: f64,
    inst: &Instance,
) -> Result<(MathProgram, NlpVars, Arc<NetData>)> {
    let mut prog = MathProgram::new();
    let d = inst.time.d[t];
    let n_br = inst.branches.len();
    let with_blocks = matches!(mode, NlpMode::Final { .. });

    // Physical controls.
    let v: Vec<usize> = inst.buses.iter().map(|b| prog.add_var(b.v_min, b.v_max)).collect();
    let theta: Vec<usize> = (0..inst.buses.len())
        .map(|i| if i == 0 { prog.add_var(0.0, 0.0) } else { prog.add_var(-1e4, 1e4) })
        .collect();
    let mut tau = vec![usize::MAX; n_br];
    let mut phi = vec![usize::MAX; n_br];
    let mut dc_pfr = vec![usize::MAX; n_br];
    let mut dc_qfr = vec![usize::MAX; n_br];
    let mut dc_qto = vec![usize::MAX; n_br];
    for (jb, br) in inst.branches.iter().enumerate() {
        match &br.kind {
            crate::instance::BranchKind::Ac(ac) => {
                tau[jb] = prog.add_var(ac.tau_min, ac.tau_max);
                phi[jb] = prog.add_var(ac.phi_min, ac.phi_max);
            }
            crate::instance::BranchKind::Dc(dc) => {
                dc_pfr[jb] = prog.add_var(-dc.p_max, dc.p_max);
                dc_qfr[jb] = prog.add_var(dc.q_fr_min, dc.q_fr_max);
                dc_qto[jb] = prog.add_var(dc.q_to_min, dc.q_to_max);
            }
        }
    }
    let u_sh: Vec<usize> = inst
        .shunts
        .iter()
        .enumerate()
        .map(|(js, sh)| match mode {
            NlpMode::Final { u_sh, .. } => prog.add_var(u_sh[js][t], u_sh[js][t]),
            NlpMode::Temporal { .. } => prog.add_var(sh.step_min, sh.step_max),
        })
        .collect();

    // Devices.
    let devs: Vec<DevPeriodVars> = (0..inst.devices.len())
        .map(|j| {
            let pins = match mode {
                NlpMode::Final { u, chi, p_bar, delta, .. } => {
                    let dev = &inst.devices[j];
                    let su_traj: f64 =
                        dev.t_supc(t).iter().map(|&(tp, val)| val * u.u_su[j][tp]).sum();
                    let sd_traj: f64 =
                        dev.t_sdpc(t).iter().map(|&(tp, val)| val * u.u_sd[j][tp]).sum();
                    let (lo, hi) = delta.bounds(j, t, p_bar[j][t]);
                    Some(DevPins {
                        u_on: u.u_on[j][t],
                        su_mass: chi.chi_su[j][t],
                        sd_mass: chi.chi_sd[j][t],
                        su_traj,
                        sd_traj,
                        p_lo: lo,
                        p_hi: hi,
                    })
                }
                NlpMode::Temporal { .. } => None,
            };
            add_device_period(&mut prog, j, t, inst, with_blocks, pins.as_ref())
        })
        .collect();
    for (j, dv) in devs.iter().enumerate() {
        if with_blocks {
            add_block_objective(&mut prog, j, t, inst, dv);
        }
    }
    add_reserve_cost_terms(&mut prog, t, inst, &devs);
    add_zone_rows(&mut prog, t, inst, &devs);

    match mode {
        NlpMode::Final { p_bar, .. } => {
            // Per-period energy restriction around the anchor trajectory.
            for (j, dev) in inst.devices.iter().enumerate() {
                for w in &dev.en_min {
                    if !w.periods.contains(&t) {
                        continue;
                    }
                    let center: f64 =
                        w.periods.iter().map(|&tp| inst.time.d[tp] * p_bar[j][tp]).sum();
                    let duration: f64 = w.periods.iter().map(|&tp| inst.time.d[tp]).sum();
                    let slack = prog.add_var(0.0, INF);
                    prog.add_obj(slack, -inst.penalties.c_e * d);
                    prog.add_ge(
                        vec![(slack, 1.0), (devs[j].p_tot, 1.0)],
                        (w.bound - center) / duration + p_bar[j][t],
                    );
                }
                for w in &dev.en_max {
                    if !w.periods.contains(&t) {
                        continue;
                    }
                    let center: f64 =
                        w.periods.iter().map(|&tp| inst.time.d[tp] * p_bar[j][tp]).sum();
                    let duration: f64 = w.periods.iter().map(|&tp| inst.time.d[tp]).sum();
                    let slack = prog.add_var(0.0, INF);
                    prog.add_obj(slack, -inst.penalties.c_e * d);
                    prog.add_ge(
                        vec![(slack, 1.0), (devs[j].p_tot, -1.0)],
                        (center - w.bound) / duration - p_bar[j][t],
                    );
                }
            }
        }
        NlpMode::Temporal { anchor, rho } => {
            if anchor.is_none() && *rho != 0.0 {
                return Err(Error::MalformedProgram(format!(
                    "temporal NLP at t={t} needs an anchor when rho={rho} > 0"
                )));
            }
            if let Some(a) = anchor {
                if *rho > 0.0 {
                    for (j, dv) in devs.iter().enumerate() {
                        for (id, val) in [
                            (dv.p_tot, a.p_tot[j][t]),
                            (dv.p_su, a.p_su[j][t]),
                            (dv.p_sd, a.p_sd[j][t]),
                            (dv.q_tot, a.q_tot[j][t]),
                            (dv.q_res_up, a.q_res_up[j][t]),
                            (dv.q_res_dn, a.q_res_dn[j][t]),
                            (dv.u_on, a.u_on[j][t]),
                        ] {
                            prog.add_quad_penalty(*rho, vec![(id, 1.0)], -val);
                        }
                    }
                    for (js, _) in inst.shunts.iter().enumerate() {
                        prog.add_quad_penalty(*rho, vec![(u_sh[js], 1.0)], -a.u_sh[js][t]);
                    }
                }
            }
        }
    }

    // Network objective data.
    let ac_list = inst.ac_branches();
    let mut ac_pos = vec![usize::MAX; n_br];
    let mut ac = Vec::with_capacity(ac_list.len());
    for (pos, &jb) in ac_list.iter().enumerate() {
        ac_pos[jb] = pos;
        let br = &inst.branches[jb];
        let p: &AcBranch = br.ac().expect("ac branch");
        ac.push(AcNl {
            from: br.from,
            to: br.to,
            tau_id: tau[jb],
            phi_id: phi[jb],
            g: p.g,
            b: p.b,
            g_fr: p.g_fr,
            b_fr: p.b_fr,
            g_to: p.g_to,
            b_to: p.b_to,
            s_max: p.s_max,
            s_max_ctg: p.s_max_ctg,
        });
    }
    let dc: Vec<DcNl> = inst
        .dc_branches()
        .iter()
        .map(|&jb| {
            let br = &inst.branches[jb];
            DcNl { from: br.from, to: br.to, p_id: dc_pfr[jb], qf_id: dc_qfr[jb], qt_id: dc_qto[jb] }
        })
        .collect();
    let sh: Vec<ShNl> = inst
        .shunts
        .iter()
        .enumerate()
        .map(|(js, s)| ShNl { bus: s.bus, u_id: u_sh[js], g_sh: s.g_sh, b_sh: s.b_sh })
        .collect();
    let dev: Vec<DevNl> = inst
        .devices
        .iter()
        .enumerate()
        .map(|(j, dv)| DevNl {
            bus: dv.bus,
            p_id: devs[j].p_tot,
            q_id: devs[j].q_tot,
            sign: if dv.is_producer() { 1.0 } else { -1.0 },
        })
        .collect();

    let mut ctg = Vec::new();
    let mut avg_coef = 0.0;
    match mode {
        NlpMode::Final { screened: Some(sets), .. } => {
            let gsf_set = gsf.ok_or_else(|| {
                Error::MissingGsf("final solve with screened contingencies".to_string())
            })?;
            avg_coef = sets.coeff[t];
            for (k_pos, &k) in sets.contingencies.iter().enumerate() {
                let rows = match gsf_set.contingency_rows(inst, k)? {
                    CtgRows::Rows(rows) => rows,
                    CtgRows::Islanded => continue,
                };
                let monitored: Vec<(usize, usize)> =
                    sets.branches[k_pos][t].iter().map(|&jb| (ac_pos[jb], jb)).collect();
                let buses: Vec<Vec<usize>> = sets.buses[k_pos][t].clone();
                let subsums: Vec<f64> = monitored
                    .iter()
                    .zip(&buses)
                    .map(|(&(_, jb), sub)| sub.iter().map(|&i| rows[jb][i]).sum())
                    .collect();
                ctg.push(CtgNl { rows, monitored, buses: Some(buses), subsums });
            }
        }
        NlpMode::Temporal { .. } => {
            if let Some(gsf_set) = gsf {
                if !inst.contingencies.is_empty() {
                    avg_coef = 1.0 / inst.contingencies.len() as f64;
                    for k in 0..inst.contingencies.len() {
                        let rows = match gsf_set.contingency_rows(inst, k)? {
                            CtgRows::Rows(rows) => rows,
                            CtgRows::Islanded => continue,
                        };
                        let outaged = inst.contingencies[k].branch;
                        let monitored: Vec<(usize, usize)> = ac_list
                            .iter()
                            .filter(|&&jb| jb != outaged)
                            .map(|&jb| (ac_pos[jb], jb))
                            .collect();
                        let subsums: Vec<f64> =
                            monitored.iter().map(|&(_, jb)| rows[jb].iter().sum()).collect();
                        ctg.push(CtgNl { rows, monitored, buses: None, subsums });
                    }
                }
            }
        }
        NlpMode::Final { screened: None, .. } => {}
    }

    let data = Arc::new(NetData {
        n_bus: inst.buses.len(),
        d,
        c_p: inst.penalties.c_p,
        c_q: inst.penalties.c_q,
        c_s: inst.penalties.c_s,
        eps,
        v_ids: v.clone(),
        th_ids: theta.clone(),
        ac,
        dc,
        sh,
        dev,
        ctg,
        avg_coef,
    });
    let eval_data = Arc::clone(&data);
    let grad_data = Arc::clone(&data);
    prog.add_nl_term(NlTerm {
        eval: Box::new(move |x| net_compute(&eval_data, x, None)),
        grad: Box::new(move |x, g| {
            net_compute(&grad_data, x, Some(g));
        }),
    });

    let vars = NlpVars { v, theta, tau, phi, u_sh, dc_pfr, dc_qfr, dc_qto, devs };
    Ok((prog, vars, data))
}

/// Initial point for a per-period NLP: flat voltage profile unless a warm
/// slice supplies one, device copies from the mode's anchor data, block
/// variables greedily filled. Values may sit outside their boxes; the solver
/// projects.
fn nlp_init(
    prog: &MathProgram,
    vars: &NlpVars,
    t: usize,
    mode: &NlpMode,
    warm: Option<&FinalSlice>,
    soc_warm: Option<&TemporalSlice>,
    inst: &Instance,
) -> Vec<f64> {
    let mut x0 = vec![0.0; prog.vars.len()];
    for (i, _) in inst.buses.iter().enumerate() {
        x0[vars.v[i]] = 1.0;
        x0[vars.theta[i]] = 0.0;
    }
    for jb in inst.ac_branches() {
        x0[vars.tau[jb]] = 1.0;
        x0[vars.phi[jb]] = 0.0;
    }
    if let Some(w) = warm {
        for (i, _) in inst.buses.iter().enumerate() {
            x0[vars.v[i]] = w.v[i];
            x0[vars.theta[i]] = w.theta[i];
        }
        for jb in inst.ac_branches() {
            x0[vars.tau[jb]] = w.tau[jb];
            x0[vars.phi[jb]] = w.phi[jb];
        }
        for jb in inst.dc_branches() {
            x0[vars.dc_pfr[jb]] = w.p_fr[jb];
            x0[vars.dc_qfr[jb]] = w.q_fr[jb];
            x0[vars.dc_qto[jb]] = w.q_to[jb];
        }
        for js in 0..inst.shunts.len() {
            x0[vars.u_sh[js]] = w.u_sh[js];
        }
    } else if let Some(w) = soc_warm {
        for (i, _) in inst.buses.iter().enumerate() {
            x0[vars.v[i]] = w.omega[i].max(0.0).sqrt();
        }
        for jb in inst.ac_branches() {
            if w.mu[jb] > 1e-8 {
                let br = &inst.branches[jb];
                x0[vars.tau[jb]] = (w.omega[br.from].max(0.0) / w.mu[jb]).sqrt();
            }
        }
        for jb in inst.dc_branches() {
            x0[vars.dc_pfr[jb]] = w.p_fr[jb];
            x0[vars.dc_qfr[jb]] = w.q_fr[jb];
            x0[vars.dc_qto[jb]] = w.q_to[jb];
        }
    }
    // Device copies.
    for (j, dv) in vars.devs.iter().enumerate() {
        let (p, q, on, csu, csd, psu, psd) = match mode {
            NlpMode::Final { u, chi, u_sh: _, p_bar, delta, .. } => {
                let dev = &inst.devices[j];
                let su_traj: f64 = dev.t_supc(t).iter().map(|&(tp, val)| val * u.u_su[j][tp]).sum();
                let sd_traj: f64 = dev.t_sdpc(t).iter().map(|&(tp, val)| val * u.u_sd[j][tp]).sum();
                let (lo, hi) = delta.bounds(j, t, p_bar[j][t]);
                (
                    p_bar[j][t].clamp(lo.max(0.0), hi),
                    warm.map_or(0.0, |w| w.q_tot[j]),
                    u.u_on[j][t],
                    chi.chi_su[j][t],
                    chi.chi_sd[j][t],
                    su_traj,
                    sd_traj,
                )
            }
            NlpMode::Temporal { anchor, .. } => match anchor {
                Some(a) => (
                    a.p_tot[j][t],
                    a.q_tot[j][t],
                    a.u_on[j][t].clamp(0.0, 1.0),
                    0.0,
                    0.0,
                    a.p_su[j][t],
                    a.p_sd[j][t],
                ),
                None => (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            },
        };
        x0[dv.p_tot] = p;
        x0[dv.p_on] = (p - psu - psd).max(0.0);
        x0[dv.p_su] = psu;
        x0[dv.p_sd] = psd;
        x0[dv.q_tot] = q;
        x0[dv.u_on] = on;
        x0[dv.chi_su] = csu;
        x0[dv.chi_sd] = csd;
        // Greedy block fill in declaration order; projection rebalances.
        let mut rest = p;
        for (k, &(w, _)) in inst.devices[j].blocks.iter().enumerate() {
            if k < dv.blocks.len() {
                let take = rest.clamp(0.0, w);
                x0[dv.blocks[k]] = take;
                rest -= take;
            }
        }
    }
    if let NlpMode::Temporal { anchor: Some(a), .. } = mode {
        for js in 0..inst.shunts.len() {
            x0[vars.u_sh[js]] = a.u_sh[js][t];
        }
    }
    x0
}

/// One-period full-width views used by the exact objective evaluators.
/// `clamp_support` trims solver-tolerance overshoot of the power-curve
/// support (valid only when the block split bounded the solve).
fn slice_columns(
    slice: &FinalSlice,
    clamp_support: bool,
    inst: &Instance,
) -> (InjectionVars, NetworkFlows) {
    let t = slice.t;
    let mut x = InjectionVars::zeros(inst);
    for j in 0..inst.devices.len() {
        x.p_tot[j][t] = if clamp_support {
            slice.p_tot[j].clamp(0.0, inst.devices[j].curve_support())
        } else {
            slice.p_tot[j]
        };
        x.p_on[j][t] = slice.p_on[j];
        x.p_su[j][t] = slice.p_su[j];
        x.p_sd[j][t] = slice.p_sd[j];
        x.q_tot[j][t] = slice.q_tot[j];
        x.q_res_up[j][t] = slice.q_res_up[j];
        x.q_res_dn[j][t] = slice.q_res_dn[j];
        for cat in 0..RES_CATS {
            x.p_res[j][t][cat] = slice.p_res[j][cat].clone();
        }
    }
    let mut flows = NetworkFlows::zeros(inst);
    for jb in 0..inst.branches.len() {
        flows.p_fr[jb][t] = slice.p_fr[jb];
        flows.p_to[jb][t] = slice.p_to[jb];
        flows.q_fr[jb][t] = slice.q_fr[jb];
        flows.q_to[jb][t] = slice.q_to[jb];
    }
    for js in 0..inst.shunts.len() {
        flows.p_sh[js][t] = slice.p_sh[js];
        flows.q_sh[js][t] = slice.q_sh[js];
    }
    (x, flows)
}

fn extract_final_slice(
    t: usize,
    x: &[f64],
    vars: &NlpVars,
    mode: &NlpMode,
    gsf: Option<&GsfSet>,
    inst: &Instance,
) -> Result<FinalSlice> {
    let n_br = inst.branches.len();
    let mut ctrl = crate::acopf::AcControls {
        v: vec![vec![1.0; inst.t_count()]; inst.buses.len()],
        theta: vec![vec![0.0; inst.t_count()]; inst.buses.len()],
        tau: vec![vec![1.0; inst.t_count()]; n_br],
        phi: vec![vec![0.0; inst.t_count()]; n_br],
        u_sh: vec![vec![0.0; inst.t_count()]; inst.shunts.len()],
    };
    for (i, _) in inst.buses.iter().enumerate() {
        ctrl.v[i][t] = x[vars.v[i]];
        ctrl.theta[i][t] = x[vars.theta[i]];
    }
    for jb in inst.ac_branches() {
        ctrl.tau[jb][t] = x[vars.tau[jb]];
        ctrl.phi[jb][t] = x[vars.phi[jb]];
    }
    for js in 0..inst.shunts.len() {
        ctrl.u_sh[js][t] = x[vars.u_sh[js]];
    }
    let mut p_fr = vec![0.0; n_br];
    let mut p_to = vec![0.0; n_br];
    let mut q_fr = vec![0.0; n_br];
    let mut q_to = vec![0.0; n_br];
    for jb in 0..n_br {
        if inst.branches[jb].is_ac() {
            let (pf, pt, qf, qt) = crate::acopf::ac_branch_flows(&ctrl, jb, t, inst)?;
            p_fr[jb] = pf;
            p_to[jb] = pt;
            q_fr[jb] = qf;
            q_to[jb] = qt;
        } else {
            p_fr[jb] = x[vars.dc_pfr[jb]];
            p_to[jb] = -x[vars.dc_pfr[jb]];
            q_fr[jb] = x[vars.dc_qfr[jb]];
            q_to[jb] = x[vars.dc_qto[jb]];
        }
    }
    let mut p_sh = vec![0.0; inst.shunts.len()];
    let mut q_sh = vec![0.0; inst.shunts.len()];
    for (js, sh) in inst.shunts.iter().enumerate() {
        let (ps, qs) = crate::acopf::shunt_flows(inst, js, ctrl.u_sh[js][t], ctrl.v[sh.bus][t]);
        p_sh[js] = ps;
        q_sh[js] = qs;
    }
    let dev_field = |f: &dyn Fn(&DevPeriodVars) -> usize| -> Vec<f64> {
        vars.devs.iter().map(|dv| x[f(dv)]).collect()
    };
    let mut slice = FinalSlice {
        t,
        v: (0..inst.buses.len()).map(|i| x[vars.v[i]]).collect(),
        theta: (0..inst.buses.len()).map(|i| x[vars.theta[i]]).collect(),
        tau: (0..n_br).map(|jb| ctrl.tau[jb][t]).collect(),
        phi: (0..n_br).map(|jb| ctrl.phi[jb][t]).collect(),
        u_sh: (0..inst.shunts.len()).map(|js| ctrl.u_sh[js][t]).collect(),
        p_tot: dev_field(&|dv| dv.p_tot),
        p_on: dev_field(&|dv| dv.p_on),
        p_su: dev_field(&|dv| dv.p_su),
        p_sd: dev_field(&|dv| dv.p_sd),
        q_tot: dev_field(&|dv| dv.q_tot),
        p_res: vars
            .devs
            .iter()
            .map(|dv| {
                [
                    dv.p_res[0].iter().map(|&id| x[id]).collect(),
                    dv.p_res[1].iter().map(|&id| x[id]).collect(),
                    dv.p_res[2].iter().map(|&id| x[id]).collect(),
                ]
            })
            .collect(),
        q_res_up: dev_field(&|dv| dv.q_res_up),
        q_res_dn: dev_field(&|dv| dv.q_res_dn),
        u_on: dev_field(&|dv| dv.u_on),
        chi_su: dev_field(&|dv| dv.chi_su),
        chi_sd: dev_field(&|dv| dv.chi_sd),
        p_fr,
        p_to,
        q_fr,
        q_to,
        p_sh,
        q_sh,
        objective_exact: 0.0,
    };
    let (xv, flows) = slice_columns(&slice, matches!(mode, NlpMode::Final { .. }), inst);
    let exact = match mode {
        NlpMode::Final { p_bar, screened, .. } => {
            let mut value = objective::eval_pow_net(&xv, t, inst)?;
            value -= objective::eval_reserve_cost(&xv, t, inst);
            for jb in inst.ac_branches() {
                value -= objective::eval_ac_overload(&flows, jb, t, inst);
            }
            for i in 0..inst.buses.len() {
                value -= objective::eval_balance_penalty(&xv, &flows, i, t, inst);
            }
            for j in 0..inst.devices.len() {
                value -= objective::eval_energy_restriction(xv.p_tot[j][t], &p_bar[j], j, t, inst);
            }
            if let Some(sets) = screened {
                let gsf_set = gsf.ok_or_else(|| {
                    Error::MissingGsf("final objective with screened contingencies".to_string())
                })?;
                let (avg, worst) = objective::eval_contingency_cost(
                    &xv,
                    &flows,
                    t,
                    gsf_set,
                    inst,
                    CtgSubset::Screened(sets),
                )?;
                value -= avg + worst;
            }
            value
        }
        NlpMode::Temporal { .. } => objective::eval_rt(&xv, &flows, t, gsf, inst)?,
    };
    slice.objective_exact = exact;
    Ok(slice)
}

/// Runs the two-stage smoothing continuation for one period and mode.
fn solve_period_nlp(
    t: usize,
    mode: &NlpMode,
    gsf: Option<&GsfSet>,
    warm: Option<&FinalSlice>,
    soc_warm: Option<&TemporalSlice>,
    inst: &Instance,
    deadline: Option<Instant>,
) -> Result<(SolveResult, FinalSlice)> {
    let mut solve: Option<SolveResult> = None;
    let mut last_vars: Option<NlpVars> = None;
    for &eps in &NLP_EPS_STAGES {
        let (prog, vars, _) = build_period_nlp(t, mode, gsf, eps, inst)?;
        let x0 = match &solve {
            Some(prev) => prev.x.clone(),
            None => nlp_init(&prog, &vars, t, mode, warm, soc_warm, inst),
        };
        let result = solve_nlp(&prog, &x0, deadline).map_err(|e| Error::SubproblemFailure {
            context: format!("period NLP t={t}"),
            detail: e.to_string(),
        })?;
        let timed_out = result.status == SolveStatus::TimeLimit;
        solve = Some(result);
        last_vars = Some(vars);
        if timed_out {
            break;
        }
    }
    let solve = solve.expect("at least one continuation stage");
    let vars = last_vars.expect("at least one continuation stage");
    let slice = extract_final_slice(t, &solve.x, &vars, mode, gsf, inst)?;
    Ok((solve, slice))
}

/// Final per-period AC restriction: commitments, shunt steps, and trajectory
/// powers pinned to the committed schedule, dispatch boxed inside the
/// ramping intervals, exact AC physics in the objective. Fails if the solver
/// cannot reach the feasibility tolerance.
#[allow(clippy::too_many_arguments)]
pub fn solve_final(
    t: usize,
    u: &CommitmentVars,
    u_sh: &[Vec<f64>],
    p_bar: &[Vec<f64>],
    delta: &RampIntervals,
    screened: Option<&ScreenSets>,
    gsf: Option<&GsfSet>,
    warm: Option<&TemporalSlice>,
    inst: &Instance,
    deadline: Option<Instant>,
) -> Result<SubproblemResult<FinalSlice>> {
    if screened.is_some() && gsf.is_none() {
        return Err(Error::MissingGsf("final solve with screened contingencies".to_string()));
    }
    let chi = AggregateVars::from_commitment(u, inst);
    let mode = NlpMode::Final { u, chi: &chi, u_sh, p_bar, delta, screened };
    let (solve, slice) = solve_period_nlp(t, &mode, gsf, None, warm, inst, deadline)?;
    if solve.max_residual > FEAS_TOL {
        return Err(Error::SubproblemFailure {
            context: format!("final solve t={t}"),
            detail: format!(
                "residual {:.3e} above tolerance with status {:?}",
                solve.max_residual, solve.status
            ),
        });
    }
    Ok(SubproblemResult { id: SubproblemId::Period(t), solve, vars: slice })
}

/// Temporal AC NLP: the per-period network subproblem with exact AC physics
/// and the squared anchor penalty (the nonconvex counterpart of the SOC
/// program, used by the reference alternation).
pub fn solve_temporal_nlp(
    t: usize,
    anchor: Option<&CopyState>,
    rho: f64,
    gsf: Option<&GsfSet>,
    warm: Option<&FinalSlice>,
    inst: &Instance,
    deadline: Option<Instant>,
) -> Result<SubproblemResult<FinalSlice>> {
    let mode = NlpMode::Temporal { anchor, rho };
    let (solve, slice) = solve_period_nlp(t, &mode, gsf, warm, None, inst, deadline)?;
    Ok(SubproblemResult { id: SubproblemId::Period(t), solve, vars: slice })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acopf::{self, AcControls, SocState};
    use crate::formulation::{max_violation, EnvelopeMode};
    use crate::gsf;
    use crate::instance::Shunt;
    use crate::objective::{eval_contingency_cost, eval_rj};
    use crate::suite;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn with_shunt(step_min: f64, step_max: f64) -> Instance {
        let mut inst = suite::toy3();
        inst.shunts.push(Shunt {
            id: "SH1".to_string(),
            bus: 0,
            g_sh: 0.0,
            b_sh: 0.1,
            step_min,
            step_max,
        });
        inst
    }

    /// toy3 with the forced consumer released: nothing must run and the
    /// consumer may draw zero, so doing nothing is optimal everywhere.
    fn cleared_toy3() -> Instance {
        let mut inst = suite::toy3();
        inst.devices[1].must_run.clear();
        inst.devices[1].p_min = vec![0.0; 2];
        inst
    }

    // -- shunt rounding ----------------------------------------------------

    #[test]
    fn shunt_round_clamps_then_rounds_half_up() {
        let inst = with_shunt(0.0, 5.0);
        assert_eq!(shunt_round(2.4, 0, &inst), 2.0);
        assert_eq!(shunt_round(-1.2, 0, &inst), 0.0);
        assert_eq!(shunt_round(7.6, 0, &inst), 5.0);
    }

    #[test]
    fn shunt_round_picks_a_nearest_feasible_integer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (inst, lo, hi) in [(with_shunt(0.0, 5.0), 0i64, 5i64), (with_shunt(-3.0, 4.0), -3, 4)] {
            for _ in 0..1000 {
                let u: f64 = rng.gen_range(-6.0..9.0);
                let r = shunt_round(u, 0, &inst);
                assert_eq!(r, r.round());
                assert!(r >= lo as f64 && r <= hi as f64);
                let best = (lo..=hi).map(|k| (u - k as f64).abs()).fold(f64::INFINITY, f64::min);
                assert!((u - r).abs() <= best + 1e-12, "u={u} r={r} best={best}");
            }
        }
    }

    // -- ramping intervals ---------------------------------------------------

    #[test]
    fn ramp_intervals_flat_profile_recovers_half_rates() {
        let inst = suite::ramp_flat();
        let mut u = CommitmentVars::zeros(1, 2);
        u.set_on_pattern(&inst, 0, &[true, true]);
        let (dm, dp) = ramp_intervals(0, &[5.0, 5.0], &u, &inst, None).unwrap();
        for t in 0..2 {
            assert!((dm[t] - 5.0).abs() <= 1e-6, "dm[{t}]={}", dm[t]);
            assert!((dp[t] - 5.0).abs() <= 1e-6, "dp[{t}]={}", dp[t]);
        }
        let total: f64 = dm.iter().chain(dp.iter()).sum();
        assert!((total - 20.0).abs() <= 1e-6);
    }

    #[test]
    fn ramp_intervals_collapse_when_offline_rates_vanish() {
        let mut inst = suite::ramp_flat();
        inst.devices[0].u_on_init = 0.0;
        inst.devices[0].p_tot_init = 0.0;
        inst.devices[0].p_ru_su = 0.0;
        inst.devices[0].p_rd_sd = 0.0;
        let mut u = CommitmentVars::zeros(1, 2);
        u.set_on_pattern(&inst, 0, &[false, false]);
        let (dm, dp) = ramp_intervals(0, &[0.0, 0.0], &u, &inst, None).unwrap();
        for t in 0..2 {
            assert!(dm[t].abs() <= 1e-9 && dp[t].abs() <= 1e-9);
        }
    }

    #[test]
    fn ramp_intervals_reject_a_ramp_infeasible_anchor() {
        let inst = suite::ramp_flat();
        let mut u = CommitmentVars::zeros(1, 2);
        u.set_on_pattern(&inst, 0, &[true, true]);
        let err = ramp_intervals(0, &[5.0, 50.0], &u, &inst, None).unwrap_err();
        assert!(matches!(err, Error::InfeasibleAnchor(_)), "{err:?}");
    }

    /// Deterministic ramp-feasible candidate anchor for a commitment pattern:
    /// off periods carry the forced trajectory power, on periods greedily
    /// clamp the previous value into the reachable dispatch window.
    fn greedy_anchor(j: usize, u: &CommitmentVars, inst: &Instance) -> Vec<f64> {
        let dev = &inst.devices[j];
        let (rd, ru) = ramp_rates(j, u, inst);
        let mut p_bar = vec![0.0; inst.t_count()];
        let mut prev = dev.p_tot_init;
        for t in 0..inst.t_count() {
            if u.u_on[j][t] > 0.5 {
                let lo = (prev - rd[t]).max(dev.p_min[t]);
                let hi = (prev + ru[t]).min(dev.p_max[t]);
                p_bar[t] = prev.clamp(lo, hi.max(lo));
            } else {
                let su: f64 = dev.t_supc(t).iter().map(|&(tp, v)| v * u.u_su[j][tp]).sum();
                let sd: f64 = dev.t_sdpc(t).iter().map(|&(tp, v)| v * u.u_sd[j][tp]).sum();
                p_bar[t] = su + sd;
            }
            prev = p_bar[t];
        }
        p_bar
    }

    /// Feasible anchors always yield a box (the interval program is
    /// feasible), and every selection from the box keeps the ramp limits:
    /// spot-checked at random interior points and at all corners.
    #[test]
    fn ramp_interval_boxes_stay_ramp_feasible_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut accepted = 0;
        for inst in [suite::enum2(), suite::enum3(), suite::ramp_flat()] {
            for j in 0..inst.devices.len() {
                for u in formulation::enumerate_commitments(j, &inst).unwrap() {
                    let p_bar = greedy_anchor(j, &u, &inst);
                    let mut probe = InjectionVars::zeros(&inst);
                    probe.p_tot[j] = p_bar.clone();
                    let feasible = max_violation(
                        &formulation::ramp_residuals(&u, &probe, j, &inst).unwrap(),
                    ) <= FEAS_TOL;
                    let result = ramp_intervals(j, &p_bar, &u, &inst, None);
                    if !feasible {
                        assert!(matches!(result.unwrap_err(), Error::InfeasibleAnchor(_)));
                        continue;
                    }
                    let (dm, dp) = result.unwrap();
                    accepted += 1;
                    let t_count = inst.t_count();
                    let check = |x: &InjectionVars| {
                        let viol = max_violation(
                            &formulation::ramp_residuals(&u, x, j, &inst).unwrap(),
                        );
                        assert!(viol <= 1e-12, "device {j} of {}: {viol}", inst.name);
                    };
                    for _ in 0..250 {
                        let mut x = InjectionVars::zeros(&inst);
                        for t in 0..t_count {
                            let (lo, hi) = (p_bar[t] - dm[t], p_bar[t] + dp[t]);
                            x.p_tot[j][t] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                        }
                        check(&x);
                    }
                    for mask in 0..(1u32 << t_count) {
                        let mut x = InjectionVars::zeros(&inst);
                        for t in 0..t_count {
                            x.p_tot[j][t] = if mask >> t & 1 == 1 {
                                p_bar[t] + dp[t]
                            } else {
                                p_bar[t] - dm[t]
                            };
                        }
                        check(&x);
                    }
                }
            }
        }
        assert!(accepted >= 6, "expected several feasible anchors, got {accepted}");
    }

    // -- temporal SOC --------------------------------------------------------

    #[test]
    fn temporal_soc_zero_load_is_worthless() {
        let inst = cleared_toy3();
        let res = solve_temporal_soc(0, None, 0.0, &inst, None).unwrap();
        assert_eq!(res.id, SubproblemId::Period(0));
        assert_eq!(res.solve.status, SolveStatus::Optimal);
        assert!(res.solve.objective.abs() <= 1e-6, "objective {}", res.solve.objective);
    }

    #[test]
    fn temporal_soc_prices_the_forced_exchange() {
        let inst = suite::toy3();
        let res = solve_temporal_soc(0, None, 0.0, &inst, None).unwrap();
        assert_eq!(res.solve.status, SolveStatus::Optimal);
        assert!(
            (res.solve.objective + 10.0).abs() <= 1e-4,
            "objective {}",
            res.solve.objective
        );
        let s = &res.vars;
        assert!((s.p_tot[0] - 1.0).abs() <= 1e-3, "G1 {}", s.p_tot[0]);
        assert!((s.p_tot[1] - 1.0).abs() <= 1e-3, "D1 {}", s.p_tot[1]);
        assert!((s.u_on[1] - 1.0).abs() <= 1e-6, "D1 must run");
    }

    #[test]
    fn temporal_soc_slice_satisfies_relaxation_and_envelopes() {
        let inst = suite::toy3();
        let t = 0;
        let res = solve_temporal_soc(t, None, 0.0, &inst, None).unwrap();
        let s = &res.vars;

        let mut state = SocState::zeros(&inst);
        let mut flows = NetworkFlows::zeros(&inst);
        for jb in 0..inst.branches.len() {
            state.c[jb][t] = s.c[jb];
            state.s[jb][t] = s.s[jb];
            state.mu[jb][t] = s.mu[jb];
            flows.p_fr[jb][t] = s.p_fr[jb];
            flows.p_to[jb][t] = s.p_to[jb];
            flows.q_fr[jb][t] = s.q_fr[jb];
            flows.q_to[jb][t] = s.q_to[jb];
        }
        for i in 0..inst.buses.len() {
            state.omega[i][t] = s.omega[i];
        }
        for (js, sh) in inst.shunts.iter().enumerate() {
            state.mu_sh[js][t] = s.mu_sh[js];
            flows.p_sh[js][t] = sh.g_sh * s.mu_sh[js];
            flows.q_sh[js][t] = -sh.b_sh * s.mu_sh[js];
        }
        let viol = max_violation(&acopf::soc_residuals(&state, &flows, t, &inst).unwrap());
        assert!(viol <= 1e-6, "SOC residual {viol}");

        let n_dev = inst.devices.len();
        let mut u = CommitmentVars::zeros(n_dev, inst.t_count());
        let mut chi = AggregateVars::zeros(n_dev, inst.t_count());
        let mut x = InjectionVars::zeros(&inst);
        for j in 0..n_dev {
            u.u_on[j][t] = s.u_on[j];
            chi.chi_su[j][t] = s.chi_su[j];
            chi.chi_sd[j][t] = s.chi_sd[j];
            x.p_tot[j][t] = s.p_tot[j];
            x.p_on[j][t] = s.p_on[j];
            x.p_su[j][t] = s.p_su[j];
            x.p_sd[j][t] = s.p_sd[j];
            x.q_tot[j][t] = s.q_tot[j];
            x.p_res[j][t] = s.p_res[j].clone();
            x.q_res_up[j][t] = s.q_res_up[j];
            x.q_res_dn[j][t] = s.q_res_dn[j];
            let env = formulation::pq_envelope_residuals(
                &u,
                &x,
                j,
                t,
                &inst,
                EnvelopeMode::AggregatedYbar,
                Some(&chi),
            )
            .unwrap();
            assert!(max_violation(&env) <= 1e-6, "device {j} envelope");
        }
    }

    #[test]
    fn temporal_soc_large_rho_pins_the_anchor() {
        let inst = suite::toy3();
        let mut anchor = CopyState::zeros(&inst);
        anchor.p_tot[0][0] = 1.0;
        anchor.q_tot[0][0] = 0.4;
        anchor.u_on[0][0] = 1.0;
        anchor.p_tot[1][0] = 1.0;
        anchor.q_tot[1][0] = 0.2;
        anchor.u_on[1][0] = 1.0;
        let res = solve_temporal_soc(0, Some(&anchor), 1e9, &inst, None).unwrap();
        let s = &res.vars;
        for j in 0..2 {
            assert!((s.p_tot[j] - anchor.p_tot[j][0]).abs() <= 1e-3, "p device {j}");
            assert!((s.q_tot[j] - anchor.q_tot[j][0]).abs() <= 1e-3, "q device {j}");
            assert!((s.u_on[j] - anchor.u_on[j][0]).abs() <= 1e-3, "u device {j}");
        }
    }

    #[test]
    fn temporal_programs_reject_missing_anchor_with_positive_rho() {
        let inst = suite::toy3();
        assert!(matches!(
            solve_temporal_soc(0, None, 1.0, &inst, None).unwrap_err(),
            Error::MalformedProgram(_)
        ));
        assert!(matches!(
            solve_temporal_nlp(0, None, 1.0, None, None, &inst, None).unwrap_err(),
            Error::MalformedProgram(_)
        ));
    }

    // -- dual bound ----------------------------------------------------------

    #[test]
    fn dual_bound_is_zero_without_forced_demand() {
        let inst = cleared_toy3();
        let (total, per) = dual_bound(&inst, None).unwrap();
        assert_eq!(per.len(), 2);
        assert!(total.abs() <= 1e-6, "bound {total}");
    }

    #[test]
    fn dual_bound_upper_bounds_the_forced_exchange() {
        let inst = suite::toy3();
        let (total, per) = dual_bound(&inst, None).unwrap();
        for t in 0..2 {
            assert!((per[t] + 10.0).abs() <= 1e-4, "period {t}: {}", per[t]);
        }
        assert!((total + 20.0).abs() <= 1e-4, "bound {total}");
    }

    #[test]
    fn dual_bound_matches_copper_plate_surplus() {
        let mut inst = suite::toy3();
        inst.devices[1].blocks = vec![(1.0, 50.0)];
        let (total, per) = dual_bound(&inst, None).unwrap();
        for t in 0..2 {
            assert!((per[t] - 40.0).abs() <= 1e-4, "period {t}: {}", per[t]);
        }
        assert!((total - 80.0).abs() <= 1e-4, "bound {total}");
    }

    // -- bus / device MILPs ----------------------------------------------------

    #[test]
    fn bus_milp_empty_bus_is_trivial() {
        let inst = suite::toy3();
        let anchor = CopyState::zeros(&inst);
        let frozen = NetworkFlows::zeros(&inst);
        let res = solve_bus_milp(1, &anchor, 1.0, &frozen, &inst, None).unwrap();
        assert_eq!(res.id, SubproblemId::Bus(1));
        assert!(res.vars.devices.is_empty());
        assert_eq!(res.solve.objective, 0.0);
        assert_eq!(res.solve.status, SolveStatus::Optimal);
    }

    #[test]
    fn bus_milp_honours_must_run() {
        let inst = suite::toy3();
        let anchor = CopyState::zeros(&inst);
        let frozen = NetworkFlows::zeros(&inst);
        let res = solve_bus_milp(2, &anchor, 1.0, &frozen, &inst, None).unwrap();
        assert_eq!(res.vars.devices, vec![1]);
        for t in 0..2 {
            assert_eq!(res.vars.u_on[0][t], 1.0, "period {t}");
        }
    }

    #[test]
    fn bus_milp_reproduces_a_consistent_anchor_under_large_rho() {
        let inst = suite::enum2();
        let mut anchor = CopyState::zeros(&inst);
        anchor.u_on[0] = vec![1.0, 1.0];
        anchor.p_tot[0] = vec![0.5, 0.6];
        anchor.u_on[1] = vec![1.0, 1.0];
        anchor.p_tot[1] = vec![0.3, 0.3];
        let frozen = NetworkFlows::zeros(&inst);
        let res = solve_bus_milp(0, &anchor, 1e6, &frozen, &inst, None).unwrap();
        for (pos, &j) in res.vars.devices.iter().enumerate() {
            for t in 0..2 {
                assert!((res.vars.u_on[pos][t] - 1.0).abs() <= 1e-9, "device {j} on");
                assert!(
                    (res.vars.p_tot[pos][t] - anchor.p_tot[j][t]).abs() <= 1e-5,
                    "device {j} p_tot[{t}] = {}",
                    res.vars.p_tot[pos][t]
                );
                assert!(res.vars.q_tot[pos][t].abs() <= 1e-5);
            }
        }
    }

    /// Reconstructs full-width commitment/injection arrays for the single
    /// device at `pos` of a bus-subproblem slice.
    fn slice_device(
        vars: &BusSlice,
        pos: usize,
        inst: &Instance,
    ) -> (CommitmentVars, InjectionVars) {
        let j = vars.devices[pos];
        let mut u = CommitmentVars::zeros(inst.devices.len(), inst.t_count());
        let mut x = InjectionVars::zeros(inst);
        for t in 0..inst.t_count() {
            u.u_on[j][t] = vars.u_on[pos][t];
            u.u_su[j][t] = vars.u_su[pos][t];
            u.u_sd[j][t] = vars.u_sd[pos][t];
            x.p_tot[j][t] = vars.p_tot[pos][t];
            x.p_on[j][t] = vars.p_on[pos][t];
            x.p_su[j][t] = vars.p_su[pos][t];
            x.p_sd[j][t] = vars.p_sd[pos][t];
            x.q_tot[j][t] = vars.q_tot[pos][t];
            x.p_res[j][t] = vars.p_res[pos][t].clone();
            x.q_res_up[j][t] = vars.q_res_up[pos][t];
            x.q_res_dn[j][t] = vars.q_res_dn[pos][t];
        }
        (u, x)
    }

    /// Pins every on/off pattern combination through must_run/must_out
    /// clones and compares the best pinned objective with the direct solve.
    #[test]
    fn bus_milp_matches_pattern_enumeration() {
        let inst = suite::enum2();
        let anchor = CopyState::zeros(&inst);
        let frozen = NetworkFlows::zeros(&inst);
        let direct = solve_bus_milp(0, &anchor, 0.0, &frozen, &inst, None).unwrap();
        assert_eq!(direct.solve.status, SolveStatus::Optimal);

        let mut best = f64::NEG_INFINITY;
        for mask_a in 0..4u32 {
            for mask_b in 0..4u32 {
                let mut pinned = inst.clone();
                for (j, mask) in [(0usize, mask_a), (1usize, mask_b)] {
                    pinned.devices[j].must_run =
                        (0..2).filter(|&t| mask >> t & 1 == 1).collect();
                    pinned.devices[j].must_out =
                        (0..2).filter(|&t| mask >> t & 1 == 0).collect();
                }
                let leaf = solve_bus_milp(0, &anchor, 0.0, &frozen, &pinned, None).unwrap();
                if leaf.solve.status == SolveStatus::Infeasible {
                    continue;
                }
                assert_eq!(leaf.solve.status, SolveStatus::Optimal);
                best = best.max(leaf.solve.objective);
            }
        }
        assert!(
            (direct.solve.objective - best).abs() <= 1e-5,
            "direct {} vs enumerated {}",
            direct.solve.objective,
            best
        );

        // Independent recomputation: device revenues minus the frozen-flow
        // imbalance penalty must reproduce the solver objective.
        let mut recomputed = 0.0;
        for pos in 0..direct.vars.devices.len() {
            let j = direct.vars.devices[pos];
            let (u, x) = slice_device(&direct.vars, pos, &inst);
            recomputed += eval_rj(&u, &x, j, &inst).unwrap();
        }
        for t in 0..inst.t_count() {
            let (mut bp, mut bq) = (0.0, 0.0);
            for pos in 0..direct.vars.devices.len() {
                let j = direct.vars.devices[pos];
                let sgn = if inst.devices[j].is_producer() { 1.0 } else { -1.0 };
                bp += sgn * direct.vars.p_tot[pos][t];
                bq += sgn * direct.vars.q_tot[pos][t];
            }
            recomputed -= inst.time.d[t]
                * (inst.penalties.c_p * bp.abs() + inst.penalties.c_q * bq.abs());
        }
        assert!(
            (direct.solve.objective - recomputed).abs() <= 1e-5,
            "solver {} vs recomputed {}",
            direct.solve.objective,
            recomputed
        );
    }

    #[test]
    fn device_milp_matches_pattern_enumeration_and_exact_revenue() {
        for inst in [suite::enum1(), suite::enum2(), suite::enum3()] {
            let anchor = CopyState::zeros(&inst);
            let t_count = inst.t_count();
            for j in 0..inst.devices.len() {
                let direct = solve_device_milp(j, &anchor, 0.0, &inst, None).unwrap();
                assert_eq!(direct.solve.status, SolveStatus::Optimal);

                let mut best = f64::NEG_INFINITY;
                for mask in 0..(1u32 << t_count) {
                    let mut pinned = inst.clone();
                    pinned.devices[j].must_run =
                        (0..t_count).filter(|&t| mask >> t & 1 == 1).collect();
                    pinned.devices[j].must_out =
                        (0..t_count).filter(|&t| mask >> t & 1 == 0).collect();
                    let leaf = solve_device_milp(j, &anchor, 0.0, &pinned, None).unwrap();
                    if leaf.solve.status == SolveStatus::Infeasible {
                        continue;
                    }
                    best = best.max(leaf.solve.objective);
                }
                assert!(
                    (direct.solve.objective - best).abs() <= 1e-5,
                    "{} device {j}: direct {} vs enumerated {}",
                    inst.name,
                    direct.solve.objective,
                    best
                );

                let (u, x) = slice_device(&direct.vars, 0, &inst);
                let exact = eval_rj(&u, &x, j, &inst).unwrap();
                assert!(
                    (direct.solve.objective - exact).abs() <= 1e-5,
                    "{} device {j}: solver {} vs exact revenue {}",
                    inst.name,
                    direct.solve.objective,
                    exact
                );
            }
        }
    }

    #[test]
    fn device_milp_enum1_economics() {
        let inst = suite::enum1();
        let anchor = CopyState::zeros(&inst);
        // The producer's cheapest block is above any revenue it could earn,
        // so it stays off; the consumer's value exceeds its startup cost.
        let gen = solve_device_milp(0, &anchor, 0.0, &inst, None).unwrap();
        assert_eq!(gen.vars.u_on[0][0], 0.0);
        assert!(gen.solve.objective.abs() <= 1e-9);
        let load = solve_device_milp(1, &anchor, 0.0, &inst, None).unwrap();
        assert_eq!(load.vars.u_on[0][0], 1.0);
        assert!((load.vars.p_tot[0][0] - 0.8).abs() <= 1e-6);
        assert!((load.solve.objective - 29.5).abs() <= 1e-6);
    }

    // -- final dispatch NLP ----------------------------------------------------

    #[test]
    fn final_nlp_zero_commitment_zero_load_scores_zero() {
        let inst = cleared_toy3();
        let mut u = CommitmentVars::zeros(2, 2);
        u.set_on_pattern(&inst, 0, &[false, false]);
        u.set_on_pattern(&inst, 1, &[false, false]);
        let p_bar = vec![vec![0.0; 2]; 2];
        let delta = RampIntervals::zeros(&inst);
        let res =
            solve_final(0, &u, &[], &p_bar, &delta, None, None, None, &inst, None).unwrap();
        assert!(res.solve.max_residual <= FEAS_TOL);
        assert!(
            res.vars.objective_exact.abs() <= 1e-6,
            "objective {}",
            res.vars.objective_exact
        );
    }

    #[test]
    fn final_nlp_recovers_the_ac_exchange() {
        let inst = suite::toy3();
        let mut u = CommitmentVars::zeros(2, 2);
        u.set_on_pattern(&inst, 0, &[true, true]);
        u.set_on_pattern(&inst, 1, &[true, true]);
        let p_bar = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let delta = ramp_intervals_all(&p_bar, &u, &inst, None).unwrap();
        for t in 0..2 {
            let soc = solve_temporal_soc(t, None, 0.0, &inst, None).unwrap();
            let res = solve_final(
                t,
                &u,
                &[],
                &p_bar,
                &delta,
                None,
                None,
                Some(&soc.vars),
                &inst,
                None,
            )
            .unwrap();
            let s = &res.vars;
            assert!(res.solve.max_residual <= FEAS_TOL);
            for j in 0..2 {
                let (lo, hi) = delta.bounds(j, t, p_bar[j][t]);
                assert!(
                    s.p_tot[j] >= lo - 1e-6 && s.p_tot[j] <= hi + 1e-6,
                    "device {j} outside its box"
                );
            }
            assert!(
                (s.objective_exact + 10.0).abs() <= 1e-3,
                "t={t} objective {}",
                s.objective_exact
            );

            // Hand-computed bus balance from the slice.
            for i in 0..inst.buses.len() {
                let (mut bp, mut bq) = (0.0, 0.0);
                for (j, dev) in inst.devices.iter().enumerate() {
                    if dev.bus == i {
                        let sgn = if dev.is_producer() { 1.0 } else { -1.0 };
                        bp += sgn * s.p_tot[j];
                        bq += sgn * s.q_tot[j];
                    }
                }
                for (jb, br) in inst.branches.iter().enumerate() {
                    if br.from == i {
                        bp -= s.p_fr[jb];
                        bq -= s.q_fr[jb];
                    }
                    if br.to == i {
                        bp -= s.p_to[jb];
                        bq -= s.q_to[jb];
                    }
                }
                assert!(bp.abs() <= 1e-5 && bq.abs() <= 1e-5, "bus {i}: {bp} {bq}");
            }

            // The slice satisfies the exact AC identities.
            let mut ctrl = AcControls::flat(&inst);
            let mut flows = NetworkFlows::zeros(&inst);
            for i in 0..inst.buses.len() {
                ctrl.v[i][t] = s.v[i];
                ctrl.theta[i][t] = s.theta[i];
            }
            for jb in 0..inst.branches.len() {
                ctrl.tau[jb][t] = s.tau[jb];
                ctrl.phi[jb][t] = s.phi[jb];
                flows.p_fr[jb][t] = s.p_fr[jb];
                flows.p_to[jb][t] = s.p_to[jb];
                flows.q_fr[jb][t] = s.q_fr[jb];
                flows.q_to[jb][t] = s.q_to[jb];
            }
            let viol = max_violation(&acopf::ac_residuals(&ctrl, &flows, t, &inst).unwrap());
            assert!(viol <= 1e-8, "t={t} AC residual {viol}");
        }
    }

    fn full_screen_sets() -> ScreenSets {
        ScreenSets {
            contingencies: vec![0],
            branches: vec![vec![vec![0, 1]]],
            buses: vec![vec![vec![vec![0, 1, 2], vec![0, 1, 2]]]],
            coeff: vec![1.0],
            islanded: vec![],
        }
    }

    #[test]
    fn final_nlp_requires_gsf_with_screened_sets() {
        let inst = suite::planted_overload();
        let mut u = CommitmentVars::zeros(3, 1);
        for j in 0..3 {
            u.set_on_pattern(&inst, j, &[true]);
        }
        let p_bar = vec![vec![1.0], vec![0.0], vec![1.0]];
        let delta = RampIntervals::zeros(&inst);
        let sets = full_screen_sets();
        let err = solve_final(0, &u, &[], &p_bar, &delta, Some(&sets), None, None, &inst, None)
            .unwrap_err();
        assert!(matches!(err, Error::MissingGsf(_)), "{err:?}");
    }

    #[test]
    fn final_nlp_redispatches_against_the_screened_contingency() {
        let inst = suite::planted_overload();
        let gsf_set = gsf::build_base(&inst, gsf::choose_ref_bus(&inst)).unwrap();
        let mut u = CommitmentVars::zeros(3, 1);
        for j in 0..3 {
            u.set_on_pattern(&inst, j, &[true]);
        }
        let p_bar = vec![vec![1.0], vec![0.0], vec![1.0]];
        let delta = ramp_intervals_all(&p_bar, &u, &inst, None).unwrap();

        let free =
            solve_final(0, &u, &[], &p_bar, &delta, None, None, None, &inst, None).unwrap();
        let (x, flows) = slice_columns(&free.vars, true, &inst);
        let (avg, worst) =
            eval_contingency_cost(&x, &flows, 0, &gsf_set, &inst, CtgSubset::All).unwrap();
        assert!(avg + worst > 100.0, "planted contingency should hurt: {}", avg + worst);
        let free_with_ctg = free.vars.objective_exact - avg - worst;

        let sets = full_screen_sets();
        let screened = solve_final(
            0,
            &u,
            &[],
            &p_bar,
            &delta,
            Some(&sets),
            Some(&gsf_set),
            None,
            &inst,
            None,
        )
        .unwrap();
        assert!(
            screened.vars.objective_exact >= free_with_ctg + 100.0,
            "screened {} vs contingency-priced free dispatch {}",
            screened.vars.objective_exact,
            free_with_ctg
        );
        assert!(screened.vars.p_tot[1] > 0.3, "local generator at {}", screened.vars.p_tot[1]);

        let (x2, flows2) = slice_columns(&screened.vars, true, &inst);
        let (avg2, worst2) =
            eval_contingency_cost(&x2, &flows2, 0, &gsf_set, &inst, CtgSubset::All).unwrap();
        assert!(avg2 + worst2 < 500.0, "residual contingency cost {}", avg2 + worst2);
    }

    #[test]
    fn temporal_nlp_balances_the_forced_exchange() {
        let inst = suite::toy3();
        let res = solve_temporal_nlp(0, None, 0.0, None, None, &inst, None).unwrap();
        let s = &res.vars;
        assert!(s.objective_exact <= 1e-9, "network revenue is non-positive");
        assert!(s.objective_exact >= -1e-3, "penalties should vanish: {}", s.objective_exact);
        assert!((s.p_tot[0] - 1.0).abs() <= 1e-2, "G1 {}", s.p_tot[0]);
    }

    // -- analytic gradients ------------------------------------------------

    #[test]
    fn period_nlp_gradients_match_finite_differences() {
        let inst = suite::planted_overload();
        let gsf_set = gsf::build_base(&inst, gsf::choose_ref_bus(&inst)).unwrap();
        let mut u = CommitmentVars::zeros(3, 1);
        for j in 0..3 {
            u.set_on_pattern(&inst, j, &[true]);
        }
        let chi = AggregateVars::from_commitment(&u, &inst);
        let p_bar = vec![vec![1.0], vec![0.0], vec![1.0]];
        let delta = ramp_intervals_all(&p_bar, &u, &inst, None).unwrap();
        let sets = full_screen_sets();
        let u_sh: Vec<Vec<f64>> = Vec::new();
        let final_mode = NlpMode::Final {
            u: &u,
            chi: &chi,
            u_sh: &u_sh,
            p_bar: &p_bar,
            delta: &delta,
            screened: Some(&sets),
        };
        let (prog_f, _, _) = build_period_nlp(0, &final_mode, Some(&gsf_set), 1e-2, &inst).unwrap();

        let mut anchor = CopyState::zeros(&inst);
        anchor.p_tot[0][0] = 0.6;
        anchor.q_tot[2][0] = 0.1;
        anchor.u_on[2][0] = 1.0;
        let temporal_mode = NlpMode::Temporal { anchor: Some(&anchor), rho: 10.0 };
        let (prog_t, _, _) =
            build_period_nlp(0, &temporal_mode, Some(&gsf_set), 1e-2, &inst).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (name, prog) in [("final", &prog_f), ("temporal", &prog_t)] {
            for trial in 0..5 {
                let x: Vec<f64> = prog
                    .vars
                    .iter()
                    .map(|v| {
                        let lo = v.lb.max(-2.0);
                        let hi = v.ub.min(2.0);
                        if hi <= lo {
                            v.lb.clamp(-2.0, 2.0)
                        } else {
                            rng.gen_range(lo..hi)
                        }
                    })
                    .collect();
                let err = crate::backends::gradient_error(prog, &x, 1e-6);
                assert!(err <= 1e-5, "{name} trial {trial}: FD mismatch {err}");
            }
        }
    }

}
