//! Every cost and utility term of the model and its decomposition
//! surrogates: commitment, power curves, energy windows, reserves, branch
//! overloads, bus imbalance, contingencies, the copy penalties, and the
//! grouped per-period / per-device / per-bus objectives built from them.

use crate::acopf::NetworkFlows;
use crate::formulation::{AggregateVars, CommitmentVars, InjectionVars};
use crate::gsf::{self, CtgRows, GsfSet};
use crate::instance::{DeviceKind, Instance, QDir, Requirement, ResCat};
use crate::screening::ScreenSets;
use crate::{Error, Result};

/// Per-term objective totals. Penalty components are nonnegative; `pow` is
/// consumer utility minus producer cost; `z` is the signed sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveBreakdown {
    pub pow: f64,
    pub uc: f64,
    pub energy: f64,
    pub reserve: f64,
    pub ac_overload: f64,
    pub balance: f64,
    pub contingency_avg: f64,
    pub contingency_max: f64,
    pub z: f64,
}

/// Commitment cost for device `j`: online, startup, and shutdown charges
/// minus downtime-dependent startup discounts `c_dd[t][t'] [u_su_t + u_on_t' - 1]+`.
pub fn eval_uc_cost(u: &CommitmentVars, j: usize, inst: &Instance) -> f64 {
    let dev = &inst.devices[j];
    let mut cost = 0.0;
    for t in 0..inst.t_count() {
        cost += dev.c_on[t] * u.u_on[j][t]
            + dev.c_su * u.u_su[j][t]
            + dev.c_sd * u.u_sd[j][t];
    }
    for adj in &dev.c_dd {
        cost -= adj.value * (u.u_su[j][adj.t] + u.u_on[j][adj.tp] - 1.0).max(0.0);
    }
    cost
}

/// Power-curve value for device `j` at period `t`, filled block-greedily:
/// cheapest blocks first for producer cost, highest-value blocks first for
/// consumer utility. Returns the magnitude; the caller applies the sign.
pub fn eval_power_cost(p_tot: f64, j: usize, t: usize, inst: &Instance) -> Result<f64> {
    let dev = &inst.devices[j];
    if p_tot < -1e-12 || p_tot > dev.curve_support() + 1e-9 {
        return Err(Error::OutOfSupport(p_tot, dev.id.clone()));
    }
    let mut blocks = dev.blocks.clone();
    if dev.is_producer() {
        blocks.sort_by(|a, b| a.1.total_cmp(&b.1));
    } else {
        blocks.sort_by(|a, b| b.1.total_cmp(&a.1));
    }
    let mut remaining = p_tot.max(0.0);
    let mut value = 0.0;
    for (width, price) in blocks {
        let fill = remaining.min(width);
        value += fill * price;
        remaining -= fill;
        if remaining <= 0.0 {
            break;
        }
    }
    Ok(inst.time.d[t] * value)
}

/// Energy-window violation cost for device `j`:
/// `c_e (sum_{W_min} [e_min - sum_{t in W} d_t p_t]+ + sum_{W_max} [...]+)`.
pub fn eval_energy_penalty(p_tot: &[f64], j: usize, inst: &Instance) -> f64 {
    let dev = &inst.devices[j];
    let c_e = inst.penalties.c_e;
    let mut cost = 0.0;
    for w in &dev.en_min {
        let energy: f64 = w.periods.iter().map(|&t| inst.time.d[t] * p_tot[t]).sum();
        cost += c_e * (w.bound - energy).max(0.0);
    }
    for w in &dev.en_max {
        let energy: f64 = w.periods.iter().map(|&t| inst.time.d[t] * p_tot[t]).sum();
        cost += c_e * (energy - w.bound).max(0.0);
    }
    cost
}

/// Per-period restriction of the energy penalty around a center `p_bar`:
/// each window contributes `[(slack at center)/(window duration) + p_bar_t - p_t]+`
/// (min side; the max side mirrors). Summed over t it upper-bounds
/// [`eval_energy_penalty`], with equality at `p = p_bar`.
pub fn eval_energy_restriction(
    p_t: f64,
    p_bar: &[f64],
    j: usize,
    t: usize,
    inst: &Instance,
) -> f64 {
    let dev = &inst.devices[j];
    let c_e = inst.penalties.c_e;
    let d_t = inst.time.d[t];
    let mut cost = 0.0;
    for w in &dev.en_min {
        if !w.periods.contains(&t) {
            continue;
        }
        let center: f64 = w.periods.iter().map(|&tp| inst.time.d[tp] * p_bar[tp]).sum();
        let duration: f64 = w.periods.iter().map(|&tp| inst.time.d[tp]).sum();
        cost += c_e * d_t * ((w.bound - center) / duration + p_bar[t] - p_t).max(0.0);
    }
    for w in &dev.en_max {
        if !w.periods.contains(&t) {
            continue;
        }
        let center: f64 = w.periods.iter().map(|&tp| inst.time.d[tp] * p_bar[tp]).sum();
        let duration: f64 = w.periods.iter().map(|&tp| inst.time.d[tp]).sum();
        cost += c_e * d_t * ((center - w.bound) / duration + p_t - p_bar[t]).max(0.0);
    }
    cost
}

fn requirement_value(req: Requirement, devices: &[usize], x: &InjectionVars, t: usize) -> f64 {
    match req {
        Requirement::Constant(v) => v,
        Requirement::FracOfSum(alpha) => {
            alpha * devices.iter().map(|&j| x.p_tot[j][t]).sum::<f64>()
        }
        Requirement::FracOfMax(alpha) => {
            alpha * devices.iter().map(|&j| x.p_tot[j][t]).fold(0.0f64, f64::max)
        }
    }
}

/// Reserve provision costs plus zonal shortfall penalties at period `t`.
pub fn eval_reserve_cost(x: &InjectionVars, t: usize, inst: &Instance) -> f64 {
    let res = &inst.reserves;
    let mut cost = 0.0;
    for j in 0..inst.devices.len() {
        for cat in ResCat::ALL {
            for r in 0..res.product_count(cat) {
                cost += res.cost_p(j, cat, r, t) * x.p_res[j][t][cat as usize][r];
            }
        }
        cost += res.c_res_q_up[j][t] * x.q_res_up[j][t];
        cost += res.c_res_q_dn[j][t] * x.q_res_dn[j][t];
    }
    for zone in &res.p_zones {
        let required = requirement_value(zone.requirement, &zone.devices, x, t);
        let provided: f64 = zone
            .devices
            .iter()
            .map(|&j| {
                zone.products
                    .iter()
                    .map(|&(cat, r)| x.p_res[j][t][cat as usize][r])
                    .sum::<f64>()
            })
            .sum();
        cost += zone.penalty * (required - provided).max(0.0);
    }
    for zone in &res.q_zones {
        let required = requirement_value(zone.requirement, &zone.devices, x, t);
        let provided: f64 = zone
            .devices
            .iter()
            .map(|&j| match zone.dir {
                QDir::Up => x.q_res_up[j][t],
                QDir::Dn => x.q_res_dn[j][t],
            })
            .sum();
        cost += zone.penalty * (required - provided).max(0.0);
    }
    inst.time.d[t] * cost
}

/// Apparent-power overload penalty on AC branch `j` at period `t`.
pub fn eval_ac_overload(flows: &NetworkFlows, j: usize, t: usize, inst: &Instance) -> f64 {
    let ac = match inst.branches[j].ac() {
        Some(ac) => ac,
        None => return 0.0,
    };
    let s_fr = flows.p_fr[j][t].hypot(flows.q_fr[j][t]);
    let s_to = flows.p_to[j][t].hypot(flows.q_to[j][t]);
    inst.penalties.c_s * inst.time.d[t] * (s_fr.max(s_to) - ac.s_max).max(0.0)
}

/// Real and reactive power imbalance penalty at bus `i`, period `t`:
/// device injections minus shunt draws minus branch flows leaving the bus.
pub fn eval_balance_penalty(
    x: &InjectionVars,
    flows: &NetworkFlows,
    i: usize,
    t: usize,
    inst: &Instance,
) -> f64 {
    let mut p = 0.0;
    let mut q = 0.0;
    for (j, dev) in inst.devices.iter().enumerate() {
        if dev.bus != i {
            continue;
        }
        match dev.kind {
            DeviceKind::Producer => {
                p += x.p_tot[j][t];
                q += x.q_tot[j][t];
            }
            DeviceKind::Consumer => {
                p -= x.p_tot[j][t];
                q -= x.q_tot[j][t];
            }
        }
    }
    for (j, sh) in inst.shunts.iter().enumerate() {
        if sh.bus == i {
            p -= flows.p_sh[j][t];
            q -= flows.q_sh[j][t];
        }
    }
    for (j, br) in inst.branches.iter().enumerate() {
        if br.from == i {
            p -= flows.p_fr[j][t];
            q -= flows.q_fr[j][t];
        }
        if br.to == i {
            p -= flows.p_to[j][t];
            q -= flows.q_to[j][t];
        }
    }
    inst.time.d[t] * (inst.penalties.c_p * p.abs() + inst.penalties.c_q * q.abs())
}

/// Imbalance penalty with the shunt and branch flow sums frozen at a
/// reference network solution; only the device terms vary.
pub fn eval_balance_approx(
    x: &InjectionVars,
    frozen_flows: &NetworkFlows,
    i: usize,
    t: usize,
    inst: &Instance,
) -> f64 {
    eval_balance_penalty(x, frozen_flows, i, t, inst)
}

/// Which contingencies and network terms enter the contingency cost.
#[derive(Clone, Copy)]
pub enum CtgSubset<'a> {
    /// Every contingency, every surviving AC branch, every bus.
    All,
    /// The screened sets and bias coefficient from a screening pass.
    Screened(&'a ScreenSets),
}

/// Exact overload cost of a single contingency: post-contingency real flows
/// from the shift factors, paired with the worst pre-contingency reactive
/// flow on each surviving branch.
pub fn ctg_cost_exact_one(
    flows: &NetworkFlows,
    p_inj: &[f64],
    rows: &[Vec<f64>],
    outaged: usize,
    t: usize,
    inst: &Instance,
) -> f64 {
    let mut cost = 0.0;
    for j in inst.ac_branches() {
        if j == outaged {
            continue;
        }
        let ac = inst.branches[j].ac().expect("ac branch");
        let f = gsf::post_contingency_flow(rows, p_inj, j);
        let q = flows.q_fr[j][t].abs().max(flows.q_to[j][t].abs());
        cost += (f.hypot(q) - ac.s_max_ctg).max(0.0);
    }
    inst.penalties.c_s * inst.time.d[t] * cost
}

/// Screened overload cost of a single contingency: only the listed branches
/// are monitored and each flow sums only its listed buses.
pub fn ctg_cost_screened_one(
    flows: &NetworkFlows,
    p_inj: &[f64],
    rows: &[Vec<f64>],
    branches: &[usize],
    buses: &[Vec<usize>],
    t: usize,
    inst: &Instance,
) -> f64 {
    let mut cost = 0.0;
    for (pos, &j) in branches.iter().enumerate() {
        let ac = inst.branches[j].ac().expect("ac branch");
        let f = gsf::sparse_flow_approx(rows, p_inj, j, &buses[pos]);
        let q = flows.q_fr[j][t].abs().max(flows.q_to[j][t].abs());
        cost += (f.hypot(q) - ac.s_max_ctg).max(0.0);
    }
    inst.penalties.c_s * inst.time.d[t] * cost
}

/// Contingency cost at period `t` as `(average term, worst-case term)`.
/// Exact mode averages over all contingencies (islanding outages score
/// zero); screened mode evaluates the reduced functions and scales the sum
/// by the stored bias coefficient.
pub fn eval_contingency_cost(
    x: &InjectionVars,
    flows: &NetworkFlows,
    t: usize,
    gsf_set: &GsfSet,
    inst: &Instance,
    subset: CtgSubset,
) -> Result<(f64, f64)> {
    let p_inj = gsf::net_injection(x, flows, t, inst);
    match subset {
        CtgSubset::All => {
            if inst.contingencies.is_empty() {
                return Ok((0.0, 0.0));
            }
            let mut sum = 0.0;
            let mut worst = 0.0f64;
            for k in 0..inst.contingencies.len() {
                let rows = match gsf_set.contingency_rows(inst, k)? {
                    CtgRows::Rows(rows) => rows,
                    CtgRows::Islanded => continue,
                };
                let branch = inst.contingencies[k].branch;
                let cost = ctg_cost_exact_one(flows, &p_inj, &rows, branch, t, inst);
                sum += cost;
                worst = worst.max(cost);
            }
            Ok((sum / inst.contingencies.len() as f64, worst))
        }
        CtgSubset::Screened(sets) => {
            let mut sum = 0.0;
            let mut worst = 0.0f64;
            for (pos, &k) in sets.contingencies.iter().enumerate() {
                let rows = match gsf_set.contingency_rows(inst, k)? {
                    CtgRows::Rows(rows) => rows,
                    CtgRows::Islanded => continue,
                };
                let cost = ctg_cost_screened_one(
                    flows,
                    &p_inj,
                    &rows,
                    &sets.branches[pos][t],
                    &sets.buses[pos][t],
                    t,
                    inst,
                );
                sum += cost;
                worst = worst.max(cost);
            }
            Ok((sets.coeff[t] * sum, worst))
        }
    }
}

/// The copied-variable block: the quantities duplicated between the network
/// and device sides of the decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyState {
    pub p_tot: Vec<Vec<f64>>,
    pub p_su: Vec<Vec<f64>>,
    pub p_sd: Vec<Vec<f64>>,
    pub q_tot: Vec<Vec<f64>>,
    pub q_res_up: Vec<Vec<f64>>,
    pub q_res_dn: Vec<Vec<f64>>,
    pub u_on: Vec<Vec<f64>>,
    pub u_sh: Vec<Vec<f64>>,
}

impl CopyState {
    pub fn from_parts(u: &CommitmentVars, x: &InjectionVars, u_sh: &[Vec<f64>]) -> Self {
        CopyState {
            p_tot: x.p_tot.clone(),
            p_su: x.p_su.clone(),
            p_sd: x.p_sd.clone(),
            q_tot: x.q_tot.clone(),
            q_res_up: x.q_res_up.clone(),
            q_res_dn: x.q_res_dn.clone(),
            u_on: u.u_on.clone(),
            u_sh: u_sh.to_vec(),
        }
    }

    pub fn zeros(inst: &Instance) -> Self {
        let t = inst.t_count();
        let dev = vec![vec![0.0; t]; inst.devices.len()];
        CopyState {
            p_tot: dev.clone(),
            p_su: dev.clone(),
            p_sd: dev.clone(),
            q_tot: dev.clone(),
            q_res_up: dev.clone(),
            q_res_dn: dev.clone(),
            u_on: dev,
            u_sh: vec![vec![0.0; t]; inst.shunts.len()],
        }
    }
}

/// Copy-constraint penalty: the l-norm (to the l-th power) of the
/// difference over the copied variables, optionally including shunt steps.
pub fn eval_gamma(a: &CopyState, b: &CopyState, ell: u32, include_shunt: bool) -> Result<f64> {
    if !(ell == 1 || ell == 2) {
        return Err(Error::Shape(format!("gamma exponent must be 1 or 2, got {ell}")));
    }
    let mut total = 0.0;
    let mut accumulate = |lhs: &[Vec<f64>], rhs: &[Vec<f64>], label: &str| -> Result<()> {
        if lhs.len() != rhs.len() {
            return Err(Error::Shape(format!("gamma {label}: {} vs {}", lhs.len(), rhs.len())));
        }
        for (row_a, row_b) in lhs.iter().zip(rhs) {
            if row_a.len() != row_b.len() {
                return Err(Error::Shape(format!("gamma {label}: ragged rows")));
            }
            for (va, vb) in row_a.iter().zip(row_b) {
                let diff = (va - vb).abs();
                total += if ell == 1 { diff } else { diff * diff };
            }
        }
        Ok(())
    };
    accumulate(&a.p_tot, &b.p_tot, "p_tot")?;
    accumulate(&a.p_su, &b.p_su, "p_su")?;
    accumulate(&a.p_sd, &b.p_sd, "p_sd")?;
    accumulate(&a.q_tot, &b.q_tot, "q_tot")?;
    accumulate(&a.q_res_up, &b.q_res_up, "q_res_up")?;
    accumulate(&a.q_res_dn, &b.q_res_dn, "q_res_dn")?;
    accumulate(&a.u_on, &b.u_on, "u_on")?;
    if include_shunt {
        accumulate(&a.u_sh, &b.u_sh, "u_sh")?;
    }
    Ok(total)
}

/// Relaxed commitment cost at period `t` in the aggregated variables:
/// online cost plus worst-case-online startup/shutdown charges on chi.
pub fn eval_uc_cost_approx(
    u_on: &[Vec<f64>],
    chi: &AggregateVars,
    t: usize,
    inst: &Instance,
) -> f64 {
    let mut cost = 0.0;
    for (j, dev) in inst.devices.iter().enumerate() {
        let su_on_max = dev
            .t_supc(t)
            .iter()
            .map(|&(tp, _)| dev.c_on[tp])
            .fold(0.0f64, f64::max);
        let sd_on_max = dev
            .t_sdpc(t)
            .iter()
            .map(|&(tp, _)| if tp == 0 { 0.0 } else { dev.c_on[tp - 1] })
            .fold(0.0f64, f64::max);
        cost += dev.c_on[t] * u_on[j][t]
            + (su_on_max + dev.c_su) * chi.chi_su[j][t]
            + (sd_on_max + dev.c_sd) * chi.chi_sd[j][t];
    }
    cost
}

/// Signed power-curve total at period `t`: consumer utility minus producer
/// cost.
pub fn eval_pow_net(x: &InjectionVars, t: usize, inst: &Instance) -> Result<f64> {
    let mut value = 0.0;
    for (j, dev) in inst.devices.iter().enumerate() {
        let magnitude = eval_power_cost(x.p_tot[j][t], j, t, inst)?;
        value += if dev.is_producer() { -magnitude } else { magnitude };
    }
    Ok(value)
}

/// Per-period network revenue `R^T_t`: minus reserves, contingencies, branch
/// overloads, and bus imbalance.
pub fn eval_rt(
    x: &InjectionVars,
    flows: &NetworkFlows,
    t: usize,
    gsf_set: Option<&GsfSet>,
    inst: &Instance,
) -> Result<f64> {
    let (avg, worst) = match gsf_set {
        Some(gsf_set) => eval_contingency_cost(x, flows, t, gsf_set, inst, CtgSubset::All)?,
        None if inst.contingencies.is_empty() => (0.0, 0.0),
        None => {
            return Err(Error::MissingGsf(
                "instance has contingencies but no GSF set was supplied".to_string(),
            ))
        }
    };
    let mut value = -eval_reserve_cost(x, t, inst) - avg - worst;
    for j in inst.ac_branches() {
        value -= eval_ac_overload(flows, j, t, inst);
    }
    for i in 0..inst.buses.len() {
        value -= eval_balance_penalty(x, flows, i, t, inst);
    }
    Ok(value)
}

/// Per-device revenue `R^J_j`: power-curve value minus commitment and energy
/// costs.
pub fn eval_rj(u: &CommitmentVars, x: &InjectionVars, j: usize, inst: &Instance) -> Result<f64> {
    let dev = &inst.devices[j];
    let mut pow = 0.0;
    for t in 0..inst.t_count() {
        let magnitude = eval_power_cost(x.p_tot[j][t], j, t, inst)?;
        pow += if dev.is_producer() { -magnitude } else { magnitude };
    }
    Ok(pow - eval_uc_cost(u, j, inst) - eval_energy_penalty(&x.p_tot[j], j, inst))
}

/// Relaxed per-period objective for the network-side subproblems: power
/// value minus overloads, imbalance, relaxed commitment cost, and reserves.
/// Energy and contingency terms are withheld (they return in the final
/// subproblems).
pub fn eval_rt_approx(
    x: &InjectionVars,
    u_on: &[Vec<f64>],
    chi: &AggregateVars,
    flows: &NetworkFlows,
    t: usize,
    inst: &Instance,
) -> Result<f64> {
    let mut value = eval_pow_net(x, t, inst)?;
    for j in inst.ac_branches() {
        value -= eval_ac_overload(flows, j, t, inst);
    }
    for i in 0..inst.buses.len() {
        value -= eval_balance_penalty(x, flows, i, t, inst);
    }
    value -= eval_uc_cost_approx(u_on, chi, t, inst);
    value -= eval_reserve_cost(x, t, inst);
    Ok(value)
}

/// Per-bus objective for the device-side subproblems: device revenues minus
/// their variable reserve costs, minus the frozen-flow imbalance penalty.
/// Zone shortfall penalties are withheld.
pub fn eval_ri_approx(
    u: &CommitmentVars,
    x: &InjectionVars,
    frozen_flows: &NetworkFlows,
    i: usize,
    inst: &Instance,
) -> Result<f64> {
    let res = &inst.reserves;
    let mut value = 0.0;
    for j in inst.devices_at_bus(i) {
        value += eval_rj(u, x, j, inst)?;
        for t in 0..inst.t_count() {
            let d_t = inst.time.d[t];
            for cat in ResCat::ALL {
                for r in 0..res.product_count(cat) {
                    value -= d_t * res.cost_p(j, cat, r, t) * x.p_res[j][t][cat as usize][r];
                }
            }
            value -= d_t * res.c_res_q_up[j][t] * x.q_res_up[j][t];
            value -= d_t * res.c_res_q_dn[j][t] * x.q_res_dn[j][t];
        }
    }
    for t in 0..inst.t_count() {
        value -= eval_balance_approx(x, frozen_flows, i, t, inst);
    }
    Ok(value)
}

/// Per-period upper-bound objective: power value minus overloads, imbalance,
/// plain online costs, and reserves. No startup/shutdown, energy, or
/// contingency terms, so it dominates the per-period share of the true
/// objective.
pub fn eval_ub_objective(
    u: &CommitmentVars,
    x: &InjectionVars,
    flows: &NetworkFlows,
    t: usize,
    inst: &Instance,
) -> Result<f64> {
    let mut value = eval_pow_net(x, t, inst)?;
    for j in inst.ac_branches() {
        value -= eval_ac_overload(flows, j, t, inst);
    }
    for i in 0..inst.buses.len() {
        value -= eval_balance_penalty(x, flows, i, t, inst);
    }
    for (j, dev) in inst.devices.iter().enumerate() {
        value -= dev.c_on[t] * u.u_on[j][t];
    }
    value -= eval_reserve_cost(x, t, inst);
    Ok(value)
}

/// Full objective evaluation. Builds a GSF set on the fly when contingencies
/// exist and none is supplied.
pub fn evaluate_full(
    u: &CommitmentVars,
    x: &InjectionVars,
    flows: &NetworkFlows,
    gsf_set: Option<&GsfSet>,
    inst: &Instance,
) -> Result<ObjectiveBreakdown> {
    let built;
    let gsf_ref = match gsf_set {
        Some(set) => Some(set),
        None if inst.contingencies.is_empty() => None,
        None => {
            built = gsf::build_base(inst, gsf::choose_ref_bus(inst))?;
            Some(&built)
        }
    };
    let mut out = ObjectiveBreakdown::default();
    for t in 0..inst.t_count() {
        out.pow += eval_pow_net(x, t, inst)?;
        out.reserve += eval_reserve_cost(x, t, inst);
        for j in inst.ac_branches() {
            out.ac_overload += eval_ac_overload(flows, j, t, inst);
        }
        for i in 0..inst.buses.len() {
            out.balance += eval_balance_penalty(x, flows, i, t, inst);
        }
        if let Some(set) = gsf_ref {
            let (avg, worst) = eval_contingency_cost(x, flows, t, set, inst, CtgSubset::All)?;
            out.contingency_avg += avg;
            out.contingency_max += worst;
        }
    }
    for j in 0..inst.devices.len() {
        out.uc += eval_uc_cost(u, j, inst);
        out.energy += eval_energy_penalty(&x.p_tot[j], j, inst);
    }
    out.z = out.pow
        - out.uc
        - out.energy
        - out.reserve
        - out.ac_overload
        - out.balance
        - out.contingency_avg
        - out.contingency_max;
    Ok(out)
}
