//! Independent checker and scorer: verifies a complete solution against the
//! hard constraint families (recomputing AC physics from the controls rather
//! than trusting stored flows), computes the exact objective with every
//! contingency priced, and reports optimality gaps against a dual bound.

use serde::{Deserialize, Serialize};

use crate::acopf::{self, AcControls, NetworkFlows};
use crate::formulation::{
    commitment_residuals, pq_envelope_residuals, ramp_residuals, CommitmentVars, EnvelopeMode,
    InjectionVars, Residual,
};
use crate::gsf::GsfSet;
use crate::instance::{Instance, ResCat, RES_CATS};
use crate::objective::{self, ObjectiveBreakdown};
use crate::{Error, Result};

/// A complete decision vector for every period: integral commitments, device
/// injections with reserves, AC controls, and the branch/shunt flows they
/// imply.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub u: CommitmentVars,
    pub x: InjectionVars,
    pub ctrl: AcControls,
    pub flows: NetworkFlows,
}

impl Solution {
    /// Everything offline and de-energized, with flat feasible controls and
    /// the flows they induce. Startup/shutdown indicators follow from each
    /// device's initial state.
    pub fn all_off(inst: &Instance) -> Result<Self> {
        let t_count = inst.t_count();
        let mut u = CommitmentVars::zeros(inst.devices.len(), t_count);
        let off = vec![false; t_count];
        for j in 0..inst.devices.len() {
            u.set_on_pattern(inst, j, &off);
        }
        let ctrl = AcControls::flat(inst);
        let flows = acopf::evaluate_ac(&ctrl, inst)?;
        Ok(Solution { u, x: InjectionVars::zeros(inst), ctrl, flows })
    }

    /// Every stored series has the shape the instance dictates.
    pub fn check_shapes(&self, inst: &Instance) -> Result<()> {
        let t = inst.t_count();
        let n_dev = inst.devices.len();
        let n_bus = inst.buses.len();
        let n_br = inst.branches.len();
        let n_sh = inst.shunts.len();
        grid("u_on", &self.u.u_on, n_dev, t)?;
        grid("u_su", &self.u.u_su, n_dev, t)?;
        grid("u_sd", &self.u.u_sd, n_dev, t)?;
        grid("p_tot", &self.x.p_tot, n_dev, t)?;
        grid("p_on", &self.x.p_on, n_dev, t)?;
        grid("p_su", &self.x.p_su, n_dev, t)?;
        grid("p_sd", &self.x.p_sd, n_dev, t)?;
        grid("q_tot", &self.x.q_tot, n_dev, t)?;
        grid("q_res_up", &self.x.q_res_up, n_dev, t)?;
        grid("q_res_dn", &self.x.q_res_dn, n_dev, t)?;
        if self.x.p_res.len() != n_dev {
            return Err(Error::Shape(format!(
                "p_res: {} devices, expected {n_dev}",
                self.x.p_res.len()
            )));
        }
        for (j, dev) in self.x.p_res.iter().enumerate() {
            if dev.len() != t {
                return Err(Error::Shape(format!(
                    "p_res[{j}]: {} periods, expected {t}",
                    dev.len()
                )));
            }
            for cell in dev {
                for cat in ResCat::ALL {
                    let want = inst.reserves.product_count(cat);
                    let got = cell[cat as usize].len();
                    if got != want {
                        return Err(Error::Shape(format!(
                            "p_res[{j}] {}: {got} products, expected {want}",
                            cat.name()
                        )));
                    }
                }
            }
        }
        grid("v", &self.ctrl.v, n_bus, t)?;
        grid("theta", &self.ctrl.theta, n_bus, t)?;
        grid("tau", &self.ctrl.tau, n_br, t)?;
        grid("phi", &self.ctrl.phi, n_br, t)?;
        grid("u_sh", &self.ctrl.u_sh, n_sh, t)?;
        grid("p_fr", &self.flows.p_fr, n_br, t)?;
        grid("p_to", &self.flows.p_to, n_br, t)?;
        grid("q_fr", &self.flows.q_fr, n_br, t)?;
        grid("q_to", &self.flows.q_to, n_br, t)?;
        grid("p_sh", &self.flows.p_sh, n_sh, t)?;
        grid("q_sh", &self.flows.q_sh, n_sh, t)?;
        Ok(())
    }

    /// Flows recomputed from the stored controls. AC branch and shunt rows
    /// come from the physics; DC rows are genuine decisions and are kept.
    pub fn recomputed_flows(&self, inst: &Instance) -> Result<NetworkFlows> {
        let mut flows = acopf::evaluate_ac(&self.ctrl, inst)?;
        for j in inst.dc_branches() {
            flows.p_fr[j] = self.flows.p_fr[j].clone();
            flows.p_to[j] = self.flows.p_to[j].clone();
            flows.q_fr[j] = self.flows.q_fr[j].clone();
            flows.q_to[j] = self.flows.q_to[j].clone();
        }
        Ok(flows)
    }
}

fn grid(name: &str, rows: &[Vec<f64>], n: usize, t: usize) -> Result<()> {
    if rows.len() != n {
        return Err(Error::Shape(format!("{name}: {} rows, expected {n}", rows.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != t {
            return Err(Error::Shape(format!(
                "{name}[{i}]: {} entries, expected {t}",
                row.len()
            )));
        }
    }
    Ok(())
}

/// One constraint family's worst residual and where it occurs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyCheck {
    pub family: &'static str,
    pub max_residual: f64,
    /// Worst offender: constraint tag plus the scope and index it hit.
    pub worst: String,
}

/// Feasibility report: per-family maxima and the overall verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasReport {
    pub tol: f64,
    pub pass: bool,
    pub families: Vec<FamilyCheck>,
}

impl FeasReport {
    pub fn family(&self, name: &str) -> Option<&FamilyCheck> {
        self.families.iter().find(|f| f.family == name)
    }

    /// Largest residual over all families.
    pub fn max_residual(&self) -> f64 {
        self.families.iter().fold(0.0, |m, f| m.max(f.max_residual))
    }
}

const FAMILIES: [&str; 7] =
    ["commitment", "injection", "ramp", "flow_consistency", "controls", "shunt", "dc"];
const COMMITMENT: usize = 0;
const INJECTION: usize = 1;
const RAMP: usize = 2;
const FLOW: usize = 3;
const CONTROLS: usize = 4;
const SHUNT: usize = 5;
const DC: usize = 6;

/// Route a network-side residual tag to its family.
fn network_family(constraint: &str) -> usize {
    if constraint.starts_with("ac_flow_") || constraint.starts_with("shunt_flow_") {
        FLOW
    } else if constraint.starts_with("dc_") {
        DC
    } else if constraint.starts_with("shunt_step_") {
        SHUNT
    } else {
        CONTROLS
    }
}

/// Full feasibility check of a solution at tolerance `tol`: commitment
/// logic, exact injection envelopes, ramping, and the AC network set, with
/// branch and shunt flows recomputed from the stored controls and compared
/// against the stored values.
pub fn check_feasibility(inst: &Instance, sol: &Solution, tol: f64) -> Result<FeasReport> {
    sol.check_shapes(inst)?;
    let mut families: Vec<FamilyCheck> = FAMILIES
        .iter()
        .map(|&family| FamilyCheck { family, max_residual: 0.0, worst: String::new() })
        .collect();
    let mut absorb = |slot: usize, rs: &[Residual], scope: &str| {
        for r in rs {
            let check = &mut families[slot];
            if r.value > check.max_residual {
                check.max_residual = r.value;
                check.worst = format!("{} at {scope}[{}]", r.constraint, r.index);
            }
        }
    };
    for (j, dev) in inst.devices.iter().enumerate() {
        absorb(COMMITMENT, &commitment_residuals(&sol.u, j, inst)?, &dev.id);
        for t in 0..inst.t_count() {
            let rs =
                pq_envelope_residuals(&sol.u, &sol.x, j, t, inst, EnvelopeMode::Exact, None)?;
            absorb(INJECTION, &rs, &format!("{} t={t}", dev.id));
        }
        absorb(RAMP, &ramp_residuals(&sol.u, &sol.x, j, inst)?, &dev.id);
    }
    for t in 0..inst.t_count() {
        for r in acopf::ac_residuals(&sol.ctrl, &sol.flows, t, inst)? {
            absorb(network_family(r.constraint), &[r], &format!("t={t}"));
        }
    }
    let pass = families.iter().all(|f| f.max_residual <= tol);
    Ok(FeasReport { tol, pass, families })
}

/// Exact objective of a solution: power-curve value net of commitment,
/// energy, reserve, overload, imbalance, and all-contingency costs. Branch
/// and shunt flows are recomputed from the controls; the score is defined
/// for infeasible solutions too.
pub fn score(
    inst: &Instance,
    sol: &Solution,
    gsf_set: Option<&GsfSet>,
) -> Result<ObjectiveBreakdown> {
    sol.check_shapes(inst)?;
    let flows = sol.recomputed_flows(inst)?;
    objective::evaluate_full(&sol.u, &sol.x, &flows, gsf_set, inst)
}

/// Optimality gap in percent against a strictly positive dual bound. An
/// infeasible solution scores the full 100%.
pub fn gap(z: f64, z_ub: f64, feasible: bool) -> Result<f64> {
    if !(z_ub > 0.0) {
        return Err(Error::NonpositiveBound(z_ub));
    }
    if !feasible {
        return Ok(100.0);
    }
    Ok(100.0 * (z_ub - z) / z_ub)
}

/// Reporting-time feasibility: the checker must pass and the exact objective
/// must be nonnegative (negative-objective solutions are treated as
/// infeasible in reports).
pub fn reportable_feasible(report: &FeasReport, breakdown: &ObjectiveBreakdown) -> bool {
    report.pass && breakdown.z >= 0.0
}

// ---------------------------------------------------------------------------
// Solution JSON document
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SolutionDto {
    meta: SolMetaDto,
    devices: Vec<SolDeviceDto>,
    buses: Vec<SolBusDto>,
    #[serde(default)]
    branches: Vec<SolBranchDto>,
    #[serde(default)]
    shunts: Vec<SolShuntDto>,
}

#[derive(Serialize, Deserialize)]
struct SolMetaDto {
    instance: String,
    periods: usize,
}

#[derive(Serialize, Deserialize)]
struct SolDeviceDto {
    id: String,
    u_on: Vec<f64>,
    u_su: Vec<f64>,
    u_sd: Vec<f64>,
    p_tot: Vec<f64>,
    p_on: Vec<f64>,
    p_su: Vec<f64>,
    p_sd: Vec<f64>,
    q_tot: Vec<f64>,
    /// Reserve quantities indexed `[period][category][product]`, categories
    /// ordered on_up, on_dn, off_up.
    #[serde(default)]
    p_res: Vec<Vec<Vec<f64>>>,
    q_res_up: Vec<f64>,
    q_res_dn: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SolBusDto {
    id: String,
    v: Vec<f64>,
    theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SolBranchDto {
    id: String,
    tau: Vec<f64>,
    phi: Vec<f64>,
    p_fr: Vec<f64>,
    p_to: Vec<f64>,
    q_fr: Vec<f64>,
    q_to: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SolShuntDto {
    id: String,
    u_sh: Vec<f64>,
    p_sh: Vec<f64>,
    q_sh: Vec<f64>,
}

/// Render a solution as a JSON document keyed by the instance's string ids.
pub fn serialize_solution(sol: &Solution, inst: &Instance) -> String {
    let t_count = inst.t_count();
    let dto = SolutionDto {
        meta: SolMetaDto { instance: inst.name.clone(), periods: t_count },
        devices: inst
            .devices
            .iter()
            .enumerate()
            .map(|(j, dev)| SolDeviceDto {
                id: dev.id.clone(),
                u_on: sol.u.u_on[j].clone(),
                u_su: sol.u.u_su[j].clone(),
                u_sd: sol.u.u_sd[j].clone(),
                p_tot: sol.x.p_tot[j].clone(),
                p_on: sol.x.p_on[j].clone(),
                p_su: sol.x.p_su[j].clone(),
                p_sd: sol.x.p_sd[j].clone(),
                q_tot: sol.x.q_tot[j].clone(),
                p_res: sol.x.p_res[j].iter().map(|cell| cell.to_vec()).collect(),
                q_res_up: sol.x.q_res_up[j].clone(),
                q_res_dn: sol.x.q_res_dn[j].clone(),
            })
            .collect(),
        buses: inst
            .buses
            .iter()
            .enumerate()
            .map(|(i, bus)| SolBusDto {
                id: bus.id.clone(),
                v: sol.ctrl.v[i].clone(),
                theta: sol.ctrl.theta[i].clone(),
            })
            .collect(),
        branches: inst
            .branches
            .iter()
            .enumerate()
            .map(|(j, br)| SolBranchDto {
                id: br.id.clone(),
                tau: sol.ctrl.tau[j].clone(),
                phi: sol.ctrl.phi[j].clone(),
                p_fr: sol.flows.p_fr[j].clone(),
                p_to: sol.flows.p_to[j].clone(),
                q_fr: sol.flows.q_fr[j].clone(),
                q_to: sol.flows.q_to[j].clone(),
            })
            .collect(),
        shunts: inst
            .shunts
            .iter()
            .enumerate()
            .map(|(j, sh)| SolShuntDto {
                id: sh.id.clone(),
                u_sh: sol.ctrl.u_sh[j].clone(),
                p_sh: sol.flows.p_sh[j].clone(),
                q_sh: sol.flows.q_sh[j].clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&dto).expect("solution serialization cannot fail")
}

/// Parse a solution document against its instance. Entries may appear in any
/// order but every instance entity must appear exactly once; ids that the
/// instance does not know are rejected.
pub fn parse_solution(bytes: &[u8], inst: &Instance) -> Result<Solution> {
    let dto: SolutionDto = serde_json::from_slice(bytes)
        .map_err(|e| Error::schema("solution", e.to_string()))?;
    if dto.meta.instance != inst.name {
        return Err(Error::Reference {
            path: "meta.instance".to_string(),
            detail: format!("solution is for '{}', instance is '{}'", dto.meta.instance, inst.name),
        });
    }
    let t_count = inst.t_count();
    if dto.meta.periods != t_count {
        return Err(Error::schema(
            "meta.periods",
            format!("{} periods, instance has {t_count}", dto.meta.periods),
        ));
    }

    let mut sol = Solution {
        u: CommitmentVars::zeros(inst.devices.len(), t_count),
        x: InjectionVars::zeros(inst),
        ctrl: AcControls::flat(inst),
        flows: NetworkFlows::zeros(inst),
    };

    let series = |path: &str, got: &[f64]| -> Result<Vec<f64>> {
        if got.len() != t_count {
            return Err(Error::schema(
                path,
                format!("{} entries, expected {t_count}", got.len()),
            ));
        }
        Ok(got.to_vec())
    };

    let mut seen_dev = vec![false; inst.devices.len()];
    for d in &dto.devices {
        let j = inst.device_index(&d.id).ok_or_else(|| Error::Reference {
            path: format!("devices[{}]", d.id),
            detail: "unknown device id".to_string(),
        })?;
        if seen_dev[j] {
            return Err(Error::schema(
                format!("devices[{}]", d.id),
                "duplicate device entry",
            ));
        }
        seen_dev[j] = true;
        sol.u.u_on[j] = series("u_on", &d.u_on)?;
        sol.u.u_su[j] = series("u_su", &d.u_su)?;
        sol.u.u_sd[j] = series("u_sd", &d.u_sd)?;
        sol.x.p_tot[j] = series("p_tot", &d.p_tot)?;
        sol.x.p_on[j] = series("p_on", &d.p_on)?;
        sol.x.p_su[j] = series("p_su", &d.p_su)?;
        sol.x.p_sd[j] = series("p_sd", &d.p_sd)?;
        sol.x.q_tot[j] = series("q_tot", &d.q_tot)?;
        sol.x.q_res_up[j] = series("q_res_up", &d.q_res_up)?;
        sol.x.q_res_dn[j] = series("q_res_dn", &d.q_res_dn)?;
        if !d.p_res.is_empty() {
            if d.p_res.len() != t_count {
                return Err(Error::schema(
                    format!("devices[{}].p_res", d.id),
                    format!("{} periods, expected {t_count}", d.p_res.len()),
                ));
            }
            for (t, cell) in d.p_res.iter().enumerate() {
                if cell.len() != RES_CATS {
                    return Err(Error::schema(
                        format!("devices[{}].p_res[{t}]", d.id),
                        format!("{} categories, expected {RES_CATS}", cell.len()),
                    ));
                }
                for cat in ResCat::ALL {
                    let want = inst.reserves.product_count(cat);
                    let got = &cell[cat as usize];
                    if got.len() != want {
                        return Err(Error::schema(
                            format!("devices[{}].p_res[{t}].{}", d.id, cat.name()),
                            format!("{} products, expected {want}", got.len()),
                        ));
                    }
                    sol.x.p_res[j][t][cat as usize] = got.clone();
                }
            }
        }
    }
    if let Some(j) = seen_dev.iter().position(|&s| !s) {
        return Err(Error::schema("devices", format!("missing device '{}'", inst.devices[j].id)));
    }

    let mut seen_bus = vec![false; inst.buses.len()];
    for b in &dto.buses {
        let i = inst.bus_index(&b.id).ok_or_else(|| Error::Reference {
            path: format!("buses[{}]", b.id),
            detail: "unknown bus id".to_string(),
        })?;
        if seen_bus[i] {
            return Err(Error::schema(format!("buses[{}]", b.id), "duplicate bus entry"));
        }
        seen_bus[i] = true;
        sol.ctrl.v[i] = series("v", &b.v)?;
        sol.ctrl.theta[i] = series("theta", &b.theta)?;
    }
    if let Some(i) = seen_bus.iter().position(|&s| !s) {
        return Err(Error::schema("buses", format!("missing bus '{}'", inst.buses[i].id)));
    }

    let mut seen_br = vec![false; inst.branches.len()];
    for br in &dto.branches {
        let j = inst.branch_index(&br.id).ok_or_else(|| Error::Reference {
            path: format!("branches[{}]", br.id),
            detail: "unknown branch id".to_string(),
        })?;
        if seen_br[j] {
            return Err(Error::schema(format!("branches[{}]", br.id), "duplicate branch entry"));
        }
        seen_br[j] = true;
        sol.ctrl.tau[j] = series("tau", &br.tau)?;
        sol.ctrl.phi[j] = series("phi", &br.phi)?;
        sol.flows.p_fr[j] = series("p_fr", &br.p_fr)?;
        sol.flows.p_to[j] = series("p_to", &br.p_to)?;
        sol.flows.q_fr[j] = series("q_fr", &br.q_fr)?;
        sol.flows.q_to[j] = series("q_to", &br.q_to)?;
    }
    if let Some(j) = seen_br.iter().position(|&s| !s) {
        return Err(Error::schema(
            "branches",
            format!("missing branch '{}'", inst.branches[j].id),
        ));
    }

    let mut seen_sh = vec![false; inst.shunts.len()];
    for sh in &dto.shunts {
        let j = inst
            .shunts
            .iter()
            .position(|s| s.id == sh.id)
            .ok_or_else(|| Error::Reference {
                path: format!("shunts[{}]", sh.id),
                detail: "unknown shunt id".to_string(),
            })?;
        if seen_sh[j] {
            return Err(Error::schema(format!("shunts[{}]", sh.id), "duplicate shunt entry"));
        }
        seen_sh[j] = true;
        sol.ctrl.u_sh[j] = series("u_sh", &sh.u_sh)?;
        sol.flows.p_sh[j] = series("p_sh", &sh.p_sh)?;
        sol.flows.q_sh[j] = series("q_sh", &sh.q_sh)?;
    }
    if let Some(j) = seen_sh.iter().position(|&s| !s) {
        return Err(Error::schema("shunts", format!("missing shunt '{}'", inst.shunts[j].id)));
    }

    Ok(sol)
}
