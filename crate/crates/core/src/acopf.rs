//! AC network physics: branch and shunt power-flow evaluation, the
//! second-order-cone lift of the power-flow equations, and recovery of
//! physical controls from lifted solutions.
//!
//! Conventions: angles in radians, voltages and flows in per-unit. Branch
//! terminal admittances `g_fr`/`b_fr`/`g_to`/`b_to` already include the series
//! part, so a flat start (all voltages 1, angles 0) on a branch without
//! charging produces exactly zero flow.

use crate::formulation::Residual;
use crate::instance::{BranchKind, Instance};
use crate::{Error, Result};

/// Voltage-product floor below which shunt-step recovery is refused.
pub const OMEGA_FLOOR: f64 = 1e-10;

/// Physical network controls. `tau`/`phi` are indexed by the full branch
/// list; entries for DC branches are carried as 1 and 0 and never read.
#[derive(Debug, Clone, PartialEq)]
pub struct AcControls {
    /// Voltage magnitude per bus and period (p.u.).
    pub v: Vec<Vec<f64>>,
    /// Voltage phase angle per bus and period (rad).
    pub theta: Vec<Vec<f64>>,
    /// Transformer tap ratio per branch and period.
    pub tau: Vec<Vec<f64>>,
    /// Phase shift per branch and period (rad).
    pub phi: Vec<Vec<f64>>,
    /// Energized shunt steps per shunt and period.
    pub u_sh: Vec<Vec<f64>>,
}

impl AcControls {
    /// Flat start: unit voltages, zero angles, taps and shifts clamped into
    /// their boxes, shunt steps at the lowest step.
    pub fn flat(inst: &Instance) -> Self {
        let t = inst.t_count();
        let mut tau = vec![vec![1.0; t]; inst.branches.len()];
        let mut phi = vec![vec![0.0; t]; inst.branches.len()];
        for (j, br) in inst.branches.iter().enumerate() {
            if let BranchKind::Ac(ac) = &br.kind {
                tau[j] = vec![1.0f64.clamp(ac.tau_min, ac.tau_max); t];
                phi[j] = vec![0.0f64.clamp(ac.phi_min, ac.phi_max); t];
            }
        }
        let u_sh = inst
            .shunts
            .iter()
            .map(|sh| vec![0.0f64.clamp(sh.step_min, sh.step_max); t])
            .collect();
        AcControls {
            v: vec![vec![1.0; t]; inst.buses.len()],
            theta: vec![vec![0.0; t]; inst.buses.len()],
            tau,
            phi,
            u_sh,
        }
    }
}

/// Branch and shunt flow values, indexed by declaration order. DC branch
/// flows are free variables; [`evaluate_ac`] leaves their rows untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkFlows {
    pub p_fr: Vec<Vec<f64>>,
    pub p_to: Vec<Vec<f64>>,
    pub q_fr: Vec<Vec<f64>>,
    pub q_to: Vec<Vec<f64>>,
    pub p_sh: Vec<Vec<f64>>,
    pub q_sh: Vec<Vec<f64>>,
}

impl NetworkFlows {
    pub fn zeros(inst: &Instance) -> Self {
        let t = inst.t_count();
        NetworkFlows {
            p_fr: vec![vec![0.0; t]; inst.branches.len()],
            p_to: vec![vec![0.0; t]; inst.branches.len()],
            q_fr: vec![vec![0.0; t]; inst.branches.len()],
            q_to: vec![vec![0.0; t]; inst.branches.len()],
            p_sh: vec![vec![0.0; t]; inst.shunts.len()],
            q_sh: vec![vec![0.0; t]; inst.shunts.len()],
        }
    }
}

/// Exact AC flow over branch `j` at period `t`:
/// `p_fr = v_fr (g_fr v_fr / tau^2 + (v_to / tau)(-g cos D - b sin D))` with
/// `D = theta_fr - theta_to - phi`, and the three companion formulas.
pub fn ac_branch_flows(
    ctrl: &AcControls,
    j: usize,
    t: usize,
    inst: &Instance,
) -> Result<(f64, f64, f64, f64)> {
    let br = &inst.branches[j];
    let ac = br.ac().ok_or_else(|| Error::Shape(format!("branch {} is not AC", br.id)))?;
    let v_fr = ctrl.v[br.from][t];
    let v_to = ctrl.v[br.to][t];
    let tau = ctrl.tau[j][t];
    let delta = ctrl.theta[br.from][t] - ctrl.theta[br.to][t] - ctrl.phi[j][t];
    let (sin_d, cos_d) = delta.sin_cos();
    let p_fr = v_fr * (ac.g_fr * v_fr / (tau * tau) + v_to / tau * (-ac.g * cos_d - ac.b * sin_d));
    let p_to = v_to * (ac.g_to * v_to + v_fr / tau * (-ac.g * cos_d + ac.b * sin_d));
    let q_fr = v_fr * (-ac.b_fr * v_fr / (tau * tau) + v_to / tau * (ac.b * cos_d - ac.g * sin_d));
    let q_to = v_to * (-ac.b_to * v_to + v_fr / tau * (ac.b * cos_d + ac.g * sin_d));
    Ok((p_fr, p_to, q_fr, q_to))
}

/// Shunt flow for `j` with `u_sh` energized steps at terminal voltage `v`:
/// `(g_sh u v^2, -b_sh u v^2)`.
pub fn shunt_flows(inst: &Instance, j: usize, u_sh: f64, v: f64) -> (f64, f64) {
    let sh = &inst.shunts[j];
    (sh.g_sh * u_sh * v * v, -sh.b_sh * u_sh * v * v)
}

/// Evaluate all AC branch and shunt flows from controls. DC rows stay zero.
pub fn evaluate_ac(ctrl: &AcControls, inst: &Instance) -> Result<NetworkFlows> {
    let mut flows = NetworkFlows::zeros(inst);
    for t in 0..inst.t_count() {
        for j in inst.ac_branches() {
            let (p_fr, p_to, q_fr, q_to) = ac_branch_flows(ctrl, j, t, inst)?;
            flows.p_fr[j][t] = p_fr;
            flows.p_to[j][t] = p_to;
            flows.q_fr[j][t] = q_fr;
            flows.q_to[j][t] = q_to;
        }
        for (j, sh) in inst.shunts.iter().enumerate() {
            let (p_sh, q_sh) = shunt_flows(inst, j, ctrl.u_sh[j][t], ctrl.v[sh.bus][t]);
            flows.p_sh[j][t] = p_sh;
            flows.q_sh[j][t] = q_sh;
        }
    }
    Ok(flows)
}

/// Lifted network state. `c`/`s`/`mu` are indexed by the full branch list
/// with DC rows zero; `omega` per bus; `mu_sh` per shunt.
#[derive(Debug, Clone, PartialEq)]
pub struct SocState {
    /// c = (1/tau) v_fr v_to cos(D)
    pub c: Vec<Vec<f64>>,
    /// s = (1/tau) v_fr v_to sin(D)
    pub s: Vec<Vec<f64>>,
    /// mu = v_fr^2 / tau^2
    pub mu: Vec<Vec<f64>>,
    /// omega = v^2
    pub omega: Vec<Vec<f64>>,
    /// mu_sh = u_sh v^2
    pub mu_sh: Vec<Vec<f64>>,
}

impl SocState {
    pub fn zeros(inst: &Instance) -> Self {
        let t = inst.t_count();
        SocState {
            c: vec![vec![0.0; t]; inst.branches.len()],
            s: vec![vec![0.0; t]; inst.branches.len()],
            mu: vec![vec![0.0; t]; inst.branches.len()],
            omega: vec![vec![0.0; t]; inst.buses.len()],
            mu_sh: vec![vec![0.0; t]; inst.shunts.len()],
        }
    }
}

/// Lift physical controls into the cone variables. On lifted points the cone
/// constraint holds with equality and the linear flow definitions reproduce
/// [`ac_branch_flows`] exactly.
pub fn soc_lift(ctrl: &AcControls, inst: &Instance) -> SocState {
    let mut state = SocState::zeros(inst);
    for t in 0..inst.t_count() {
        for (i, _) in inst.buses.iter().enumerate() {
            state.omega[i][t] = ctrl.v[i][t] * ctrl.v[i][t];
        }
        for j in inst.ac_branches() {
            let br = &inst.branches[j];
            let v_fr = ctrl.v[br.from][t];
            let v_to = ctrl.v[br.to][t];
            let tau = ctrl.tau[j][t];
            let delta = ctrl.theta[br.from][t] - ctrl.theta[br.to][t] - ctrl.phi[j][t];
            state.c[j][t] = v_fr * v_to * delta.cos() / tau;
            state.s[j][t] = v_fr * v_to * delta.sin() / tau;
            state.mu[j][t] = v_fr * v_fr / (tau * tau);
        }
        for (j, sh) in inst.shunts.iter().enumerate() {
            let v = ctrl.v[sh.bus][t];
            state.mu_sh[j][t] = ctrl.u_sh[j][t] * v * v;
        }
    }
    state
}

/// Recover real-valued shunt steps from the lifted variables.
pub fn recover_shunt_real(mu_sh: f64, omega: f64) -> Result<f64> {
    if omega <= OMEGA_FLOOR {
        return Err(Error::DegenerateVoltage(omega));
    }
    Ok(mu_sh / omega)
}

fn check_shapes(state: &SocState, flows: &NetworkFlows, t: usize, inst: &Instance) -> Result<()> {
    let n_br = inst.branches.len();
    let n_bus = inst.buses.len();
    let n_sh = inst.shunts.len();
    let br_ok = [&state.c, &state.s, &state.mu, &flows.p_fr, &flows.p_to, &flows.q_fr, &flows.q_to]
        .iter()
        .all(|a| a.len() == n_br && a.iter().all(|row| row.len() > t));
    let rest_ok = state.omega.len() == n_bus
        && state.mu_sh.len() == n_sh
        && flows.p_sh.len() == n_sh
        && flows.q_sh.len() == n_sh
        && state.omega.iter().all(|row| row.len() > t)
        && state.mu_sh.iter().all(|row| row.len() > t);
    if br_ok && rest_ok {
        Ok(())
    } else {
        Err(Error::Shape(format!("SOC state/flow arrays do not match instance at t={t}")))
    }
}

/// Residuals of the lifted (relaxed) network constraints at period `t`:
/// linear flow definitions, the rotated cone, tap and shunt interval
/// relations, squared-voltage bounds, and DC branch constraints.
/// Equalities report |g|, inequalities report max(g, 0).
pub fn soc_residuals(
    state: &SocState,
    flows: &NetworkFlows,
    t: usize,
    inst: &Instance,
) -> Result<Vec<Residual>> {
    check_shapes(state, flows, t, inst)?;
    let mut out = Vec::new();
    let mut push = |constraint: &'static str, index: usize, value: f64| {
        out.push(Residual { constraint, index, value });
    };
    for (j, br) in inst.branches.iter().enumerate() {
        match &br.kind {
            BranchKind::Ac(ac) => {
                let c = state.c[j][t];
                let s = state.s[j][t];
                let mu = state.mu[j][t];
                let om_fr = state.omega[br.from][t];
                let om_to = state.omega[br.to][t];
                push("soc_flow_p_fr", j, (flows.p_fr[j][t] - (ac.g_fr * mu - ac.g * c - ac.b * s)).abs());
                push("soc_flow_p_to", j, (flows.p_to[j][t] - (ac.g_to * om_to - ac.g * c + ac.b * s)).abs());
                push("soc_flow_q_fr", j, (flows.q_fr[j][t] - (-ac.b_fr * mu + ac.b * c - ac.g * s)).abs());
                push("soc_flow_q_to", j, (flows.q_to[j][t] - (-ac.b_to * om_to + ac.b * c + ac.g * s)).abs());
                push("soc_cone", j, (c * c + s * s - mu * om_to).max(0.0));
                push("soc_tap_lo", j, (om_fr / (ac.tau_max * ac.tau_max) - mu).max(0.0));
                push("soc_tap_hi", j, (mu - om_fr / (ac.tau_min * ac.tau_min)).max(0.0));
            }
            BranchKind::Dc(dc) => {
                push("dc_balance", j, (flows.p_fr[j][t] + flows.p_to[j][t]).abs());
                push("dc_p_box", j, (flows.p_fr[j][t].abs() - dc.p_max).max(0.0));
                push("dc_p_box_to", j, (flows.p_to[j][t].abs() - dc.p_max).max(0.0));
                let q_fr = flows.q_fr[j][t];
                let q_to = flows.q_to[j][t];
                push("dc_q_fr_box", j, (dc.q_fr_min - q_fr).max(q_fr - dc.q_fr_max).max(0.0));
                push("dc_q_to_box", j, (dc.q_to_min - q_to).max(q_to - dc.q_to_max).max(0.0));
            }
        }
    }
    for (j, sh) in inst.shunts.iter().enumerate() {
        let mu_sh = state.mu_sh[j][t];
        let om = state.omega[sh.bus][t];
        push("soc_shunt_p", j, (flows.p_sh[j][t] - sh.g_sh * mu_sh).abs());
        push("soc_shunt_q", j, (flows.q_sh[j][t] + sh.b_sh * mu_sh).abs());
        push("soc_shunt_lo", j, (sh.step_min * om - mu_sh).max(0.0));
        push("soc_shunt_hi", j, (mu_sh - sh.step_max * om).max(0.0));
    }
    for (i, bus) in inst.buses.iter().enumerate() {
        let om = state.omega[i][t];
        push("omega_lo", i, (bus.v_min * bus.v_min - om).max(0.0));
        push("omega_hi", i, (om - bus.v_max * bus.v_max).max(0.0));
    }
    Ok(out)
}

/// Residuals of the exact (nonconvex) network constraints at period `t`:
/// trigonometric flow definitions, shunt flow definitions, control boxes,
/// shunt-step integrality, and DC branch constraints.
pub fn ac_residuals(
    ctrl: &AcControls,
    flows: &NetworkFlows,
    t: usize,
    inst: &Instance,
) -> Result<Vec<Residual>> {
    let mut out = Vec::new();
    let mut push = |constraint: &'static str, index: usize, value: f64| {
        out.push(Residual { constraint, index, value });
    };
    for (j, br) in inst.branches.iter().enumerate() {
        match &br.kind {
            BranchKind::Ac(ac) => {
                let (p_fr, p_to, q_fr, q_to) = ac_branch_flows(ctrl, j, t, inst)?;
                push("ac_flow_p_fr", j, (flows.p_fr[j][t] - p_fr).abs());
                push("ac_flow_p_to", j, (flows.p_to[j][t] - p_to).abs());
                push("ac_flow_q_fr", j, (flows.q_fr[j][t] - q_fr).abs());
                push("ac_flow_q_to", j, (flows.q_to[j][t] - q_to).abs());
                let tau = ctrl.tau[j][t];
                push("tau_box", j, (ac.tau_min - tau).max(tau - ac.tau_max).max(0.0));
                let phi = ctrl.phi[j][t];
                push("phi_box", j, (ac.phi_min - phi).max(phi - ac.phi_max).max(0.0));
            }
            BranchKind::Dc(dc) => {
                push("dc_balance", j, (flows.p_fr[j][t] + flows.p_to[j][t]).abs());
                push("dc_p_box", j, (flows.p_fr[j][t].abs() - dc.p_max).max(0.0));
                push("dc_p_box_to", j, (flows.p_to[j][t].abs() - dc.p_max).max(0.0));
                let q_fr = flows.q_fr[j][t];
                let q_to = flows.q_to[j][t];
                push("dc_q_fr_box", j, (dc.q_fr_min - q_fr).max(q_fr - dc.q_fr_max).max(0.0));
                push("dc_q_to_box", j, (dc.q_to_min - q_to).max(q_to - dc.q_to_max).max(0.0));
            }
        }
    }
    for (j, sh) in inst.shunts.iter().enumerate() {
        let u = ctrl.u_sh[j][t];
        let v = ctrl.v[sh.bus][t];
        let (p_sh, q_sh) = shunt_flows(inst, j, u, v);
        push("shunt_flow_p", j, (flows.p_sh[j][t] - p_sh).abs());
        push("shunt_flow_q", j, (flows.q_sh[j][t] - q_sh).abs());
        push("shunt_step_box", j, (sh.step_min - u).max(u - sh.step_max).max(0.0));
        push("shunt_step_integral", j, (u - u.round()).abs());
    }
    for (i, bus) in inst.buses.iter().enumerate() {
        let v = ctrl.v[i][t];
        push("voltage_box", i, (bus.v_min - v).max(v - bus.v_max).max(0.0));
    }
    Ok(out)
}
