//! Immutable problem data model, JSON ingestion, validation, and a synthetic
//! toy-instance generator.
//!
//! Conventions: power and voltage in per-unit on the declared system base,
//! durations in hours, angles in radians, money in currency units. Period
//! indices are 1-based in the JSON schema and 0-based internally; the initial
//! state (period 0 of the math) is stored in dedicated `*_init` fields.

mod schema;
mod toy;
mod validate;

pub use schema::{parse_instance, serialize_instance};
pub use toy::{generate_toy, ToySpec};
pub use validate::{validate, Severity, Violation};

/// Time discretization: `d[t]` is the duration of period `t` in hours.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub d: Vec<f64>,
}

impl TimeGrid {
    pub fn t_count(&self) -> usize {
        self.d.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub v_min: f64,
    pub v_max: f64,
}

/// AC branch electrical parameters. `g`/`b` are the series admittance of the
/// branch; `g_fr`/`b_fr` (resp. `g_to`/`b_to`) collect the charging and branch
/// shunt admittance seen at the from (resp. to) terminal, already summed with
/// the series part as used by the flow equations.
#[derive(Debug, Clone, PartialEq)]
pub struct AcBranch {
    pub g: f64,
    pub b: f64,
    pub g_fr: f64,
    pub b_fr: f64,
    pub g_to: f64,
    pub b_to: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub s_max: f64,
    pub s_max_ctg: f64,
}

/// DC line: real power is equal and opposite at both ends; reactive support
/// at each terminal is an independent box.
#[derive(Debug, Clone, PartialEq)]
pub struct DcBranch {
    pub p_max: f64,
    pub q_fr_min: f64,
    pub q_fr_max: f64,
    pub q_to_min: f64,
    pub q_to_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BranchKind {
    Ac(AcBranch),
    Dc(DcBranch),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub kind: BranchKind,
}

impl Branch {
    pub fn is_ac(&self) -> bool {
        matches!(self.kind, BranchKind::Ac(_))
    }
    pub fn ac(&self) -> Option<&AcBranch> {
        match &self.kind {
            BranchKind::Ac(p) => Some(p),
            BranchKind::Dc(_) => None,
        }
    }
    pub fn dc(&self) -> Option<&DcBranch> {
        match &self.kind {
            BranchKind::Dc(p) => Some(p),
            BranchKind::Ac(_) => None,
        }
    }
}

/// Switched shunt: `step` copies of the per-step admittance are energized.
/// Step bounds are integers by Assumption; stored as f64 so that validation
/// (rather than deserialization) reports non-integral data.
#[derive(Debug, Clone, PartialEq)]
pub struct Shunt {
    pub id: String,
    pub bus: usize,
    pub g_sh: f64,
    pub b_sh: f64,
    pub step_min: f64,
    pub step_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    Producer,
    Consumer,
}

/// Sparse two-period entry used by downtime-dependent startup cost
/// adjustments and startup/shutdown power trajectories. Indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseTT {
    pub t: usize,
    pub tp: usize,
    pub value: f64,
}

/// Energy window: bound on net energy over the listed periods (p.u.·h).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub periods: Vec<usize>,
    pub bound: f64,
}

/// Maximum-startups window: at most `limit` startups over the listed periods.
#[derive(Debug, Clone, PartialEq)]
pub struct SuWindow {
    pub periods: Vec<usize>,
    pub limit: u32,
}

/// Reserve product categories, in the order used throughout the crate.
pub const RES_CATS: usize = 3;
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResCat {
    OnUp = 0,
    OnDn = 1,
    OffUp = 2,
}

impl ResCat {
    pub const ALL: [ResCat; RES_CATS] = [ResCat::OnUp, ResCat::OnDn, ResCat::OffUp];
    pub fn name(self) -> &'static str {
        match self {
            ResCat::OnUp => "on_up",
            ResCat::OnDn => "on_dn",
            ResCat::OffUp => "off_up",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QDir {
    Up,
    Dn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub id: String,
    pub kind: DeviceKind,
    pub bus: usize,
    // Commitment costs.
    pub c_on: Vec<f64>,
    pub c_su: f64,
    pub c_sd: f64,
    /// Startup-cost rebates: entry (t, tp, c) credits c for a startup at t
    /// when the device was online at the earlier period tp < t.
    pub c_dd: Vec<SparseTT>,
    // Initial state (period 0).
    pub u_on_init: f64,
    pub p_tot_init: f64,
    /// Pre-startup power trajectory: entry (t, tp, p) injects p at period t
    /// when a startup occurs at the later period tp > t.
    pub p_supc: Vec<SparseTT>,
    /// Post-shutdown power trajectory: entry (t, tp, p) injects p at period t
    /// when a shutdown occurred at period tp <= t.
    pub p_sdpc: Vec<SparseTT>,
    // Ramp rates (p.u. per hour).
    pub p_ru: f64,
    pub p_rd: f64,
    pub p_ru_su: f64,
    pub p_rd_sd: f64,
    // Dispatch envelope.
    pub p_max: Vec<f64>,
    pub p_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub q_min: Vec<f64>,
    pub beta_max: f64,
    pub beta_min: f64,
    /// Per-category, per-product absolute reserve caps (shared across periods).
    pub p_res_max: [Vec<f64>; RES_CATS],
    // Energy windows.
    pub en_min: Vec<Window>,
    pub en_max: Vec<Window>,
    // Commitment logic.
    pub must_run: Vec<usize>,
    pub must_out: Vec<usize>,
    /// Per period t: earlier periods whose shutdown forbids a startup at t
    /// (minimum downtime windows).
    pub dn_min: Vec<Vec<usize>>,
    /// Per period t: earlier periods whose startup forbids a shutdown at t
    /// (minimum uptime windows).
    pub up_min: Vec<Vec<usize>>,
    pub su_max: Vec<SuWindow>,
    /// Piecewise-linear power cost (producer) or utility (consumer) as
    /// ordered blocks (width p.u., marginal currency per p.u. per hour).
    pub blocks: Vec<(f64, f64)>,
}

impl Device {
    /// Periods tp > t whose startup would inject pre-startup power at t,
    /// with the injected amount. Sorted by tp.
    pub fn t_supc(&self, t: usize) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .p_supc
            .iter()
            .filter(|e| e.t == t && e.value > 0.0)
            .map(|e| (e.tp, e.value))
            .collect();
        v.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Periods tp <= t whose shutdown would inject post-shutdown power at t.
    pub fn t_sdpc(&self, t: usize) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .p_sdpc
            .iter()
            .filter(|e| e.t == t && e.value > 0.0)
            .map(|e| (e.tp, e.value))
            .collect();
        v.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Total width of the power curve (support of the cost/utility function).
    pub fn curve_support(&self) -> f64 {
        self.blocks.iter().map(|b| b.0).sum()
    }

    pub fn is_producer(&self) -> bool {
        self.kind == DeviceKind::Producer
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Requirement {
    Constant(f64),
    /// alpha times the summed real injection of the zone's devices.
    FracOfSum(f64),
    /// alpha times the maximum real injection among the zone's devices.
    FracOfMax(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PZone {
    pub id: String,
    pub devices: Vec<usize>,
    pub products: Vec<(ResCat, usize)>,
    pub requirement: Requirement,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QZone {
    pub id: String,
    pub devices: Vec<usize>,
    pub dir: QDir,
    pub requirement: Requirement,
    pub penalty: f64,
}

/// Reserve products, zonal requirements, and per-device variable costs.
/// Product order within a category is meaningful: cumulative caps sum from
/// each product to the end of the list ("at least as good as").
#[derive(Debug, Clone, PartialEq)]
pub struct ReserveSpec {
    pub products: [Vec<String>; RES_CATS],
    pub p_zones: Vec<PZone>,
    pub q_zones: Vec<QZone>,
    /// Per device: [category][product][t] variable cost of real reserve.
    pub c_res_p: Vec<[Vec<Vec<f64>>; RES_CATS]>,
    /// Per device: [t] variable cost of reactive reserve, up / down.
    pub c_res_q_up: Vec<Vec<f64>>,
    pub c_res_q_dn: Vec<Vec<f64>>,
}

impl ReserveSpec {
    pub fn product_count(&self, cat: ResCat) -> usize {
        self.products[cat as usize].len()
    }
    pub fn cost_p(&self, j: usize, cat: ResCat, r: usize, t: usize) -> f64 {
        self.c_res_p[j][cat as usize][r][t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contingency {
    pub id: String,
    /// Index of the outaged branch; always an AC branch.
    pub branch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyCoeffs {
    pub c_p: f64,
    pub c_q: f64,
    pub c_s: f64,
    pub c_e: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub name: String,
    pub s_base_mva: f64,
    pub time: TimeGrid,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub shunts: Vec<Shunt>,
    pub devices: Vec<Device>,
    pub reserves: ReserveSpec,
    pub contingencies: Vec<Contingency>,
    pub penalties: PenaltyCoeffs,
}

impl Instance {
    pub fn t_count(&self) -> usize {
        self.time.t_count()
    }

    /// Indices of AC branches, in declaration order.
    pub fn ac_branches(&self) -> Vec<usize> {
        (0..self.branches.len()).filter(|&j| self.branches[j].is_ac()).collect()
    }

    /// Indices of DC branches, in declaration order.
    pub fn dc_branches(&self) -> Vec<usize> {
        (0..self.branches.len()).filter(|&j| !self.branches[j].is_ac()).collect()
    }

    /// Device indices attached to bus `i`, in declaration order.
    pub fn devices_at_bus(&self, i: usize) -> Vec<usize> {
        (0..self.devices.len()).filter(|&j| self.devices[j].bus == i).collect()
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn branch_index(&self, id: &str) -> Option<usize> {
        self.branches.iter().position(|b| b.id == id)
    }

    pub fn device_index(&self, id: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.id == id)
    }
}
