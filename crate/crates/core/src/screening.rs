//! Contingency screening: selects the contingencies, branches, and buses
//! that drive post-contingency overload costs at a candidate solution, so
//! the final subproblems only carry the terms that matter.

use crate::acopf::NetworkFlows;
use crate::formulation::InjectionVars;
use crate::gsf::{self, CtgRows, GsfSet};
use crate::instance::Instance;
use crate::objective::{ctg_cost_exact_one, ctg_cost_screened_one};
use crate::Result;

/// Screened index sets plus the per-period bias coefficient for the average
/// contingency term, all fixed at the candidate solution that produced them.
///
/// Layout: `contingencies` lists the retained contingency indices;
/// `branches[k_pos][t]` lists the monitored branch indices for that
/// contingency and period; `buses[k_pos][t][j_pos]` lists the injection
/// buses kept in the sparse flow approximation for the matching branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenSets {
    pub contingencies: Vec<usize>,
    pub branches: Vec<Vec<Vec<usize>>>,
    pub buses: Vec<Vec<Vec<Vec<usize>>>>,
    /// Per-period scaling of the summed screened cost (bias correction for
    /// the average term), evaluated at the screening candidate.
    pub coeff: Vec<f64>,
    /// Contingencies whose outage islands the network; excluded from the
    /// sets above and reported for diagnostics.
    pub islanded: Vec<usize>,
}

impl ScreenSets {
    /// Selection with no contingencies and zeroed coefficients.
    pub fn empty(t_count: usize) -> Self {
        ScreenSets {
            contingencies: Vec::new(),
            branches: Vec::new(),
            buses: Vec::new(),
            coeff: vec![0.0; t_count],
            islanded: Vec::new(),
        }
    }
}

/// Selection budgets and the violation cutoff for screening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenThresholds {
    /// Contingencies retained by the loading prescreen.
    pub n_ctg: usize,
    /// Monitored branches kept per contingency and period.
    pub n_br: usize,
    /// Injection buses kept per monitored branch.
    pub n_bus: usize,
    /// Minimum post-contingency violation for a branch to be monitored.
    pub s_thr: f64,
}

impl Default for ScreenThresholds {
    /// Tuning for networks up to a few hundred buses.
    fn default() -> Self {
        ScreenThresholds { n_ctg: 30, n_br: 20, n_bus: 50, s_thr: 1e-3 }
    }
}

impl ScreenThresholds {
    /// Tighter bus budget and looser violation cutoff for large networks,
    /// where full-width flow rows become the dominant cost.
    pub fn large_network() -> Self {
        ScreenThresholds { n_ctg: 30, n_br: 20, n_bus: 20, s_thr: 1e-2 }
    }

    /// Preset keyed on network size.
    pub fn for_instance(inst: &Instance) -> Self {
        if inst.buses.len() >= LARGE_NETWORK_BUSES {
            ScreenThresholds::large_network()
        } else {
            ScreenThresholds::default()
        }
    }
}

/// Bus count at which the large-network preset takes over.
pub const LARGE_NETWORK_BUSES: usize = 1576;

/// Indices of the `n` largest scores, ties resolved toward the lower index,
/// returned in ascending index order. Shorter score lists return everything.
fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("comparable score").then(a.cmp(&b))
    });
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Screen contingencies at a candidate dispatch.
///
/// Prescreens the `n_ctg` contingencies whose outaged line carries the most
/// real power in the candidate, then per retained contingency and period
/// keeps the `n_br` surviving branches whose post-contingency apparent-power
/// violation is at least `s_thr`, and per kept branch the `n_bus` buses that
/// contribute most to its flow. Outages that split the network are reported
/// in `islanded` and dropped without backfilling the prescreen list.
///
/// The per-period coefficient rescales the screened average cost so that at
/// the candidate it reproduces the exact cost of the retained contingencies
/// divided by `n_ctg`; when the screened cost at the candidate is zero the
/// coefficient falls back to `1 / n_ctg`.
pub fn screen(
    x: &InjectionVars,
    flows: &NetworkFlows,
    thresholds: &ScreenThresholds,
    inst: &Instance,
    gsf_set: &GsfSet,
) -> Result<ScreenSets> {
    let t_count = inst.t_count();
    let n_ctg = thresholds.n_ctg;
    if n_ctg == 0 || inst.contingencies.is_empty() {
        return Ok(ScreenSets::empty(t_count));
    }

    // Prescreen: candidate loading of the line each contingency removes.
    let loading: Vec<f64> = inst
        .contingencies
        .iter()
        .map(|ctg| {
            let jk = ctg.branch;
            (0..t_count)
                .map(|t| flows.p_fr[jk][t].abs().max(flows.p_to[jk][t].abs()))
                .fold(0.0, f64::max)
        })
        .collect();
    let shortlist = top_n(&loading, n_ctg);

    let p_inj: Vec<Vec<f64>> =
        (0..t_count).map(|t| gsf::net_injection(x, flows, t, inst)).collect();
    let bus_count = inst.buses.len();
    let ac = inst.ac_branches();

    let mut sets = ScreenSets::empty(t_count);
    let mut exact_sum = vec![0.0; t_count];
    let mut screened_sum = vec![0.0; t_count];

    for &k in &shortlist {
        let rows = match gsf_set.contingency_rows(inst, k)? {
            CtgRows::Rows(rows) => rows,
            CtgRows::Islanded => {
                sets.islanded.push(k);
                continue;
            }
        };
        let jk = inst.contingencies[k].branch;
        let mut branches_t = Vec::with_capacity(t_count);
        let mut buses_t = Vec::with_capacity(t_count);
        for t in 0..t_count {
            let shift = gsf::slack(&p_inj[t]) / bus_count as f64;
            // Surviving branches whose violation clears the cutoff.
            let mut cand = Vec::new();
            let mut viol = Vec::new();
            for &j in &ac {
                if j == jk {
                    continue;
                }
                let lim = inst.branches[j].ac().expect("ac branch").s_max_ctg;
                let f = gsf::post_contingency_flow(&rows, &p_inj[t], j);
                let q = flows.q_fr[j][t].abs().max(flows.q_to[j][t].abs());
                let v = f.hypot(q) - lim;
                if v >= thresholds.s_thr {
                    cand.push(j);
                    viol.push(v);
                }
            }
            let picked: Vec<usize> =
                top_n(&viol, thresholds.n_br).into_iter().map(|pos| cand[pos]).collect();
            let bus_lists: Vec<Vec<usize>> = picked
                .iter()
                .map(|&j| {
                    let contrib: Vec<f64> = (0..bus_count)
                        .map(|i| (rows[j][i] * (p_inj[t][i] - shift)).abs())
                        .collect();
                    top_n(&contrib, thresholds.n_bus)
                })
                .collect();
            exact_sum[t] += ctg_cost_exact_one(flows, &p_inj[t], &rows, jk, t, inst);
            screened_sum[t] +=
                ctg_cost_screened_one(flows, &p_inj[t], &rows, &picked, &bus_lists, t, inst);
            branches_t.push(picked);
            buses_t.push(bus_lists);
        }
        sets.contingencies.push(k);
        sets.branches.push(branches_t);
        sets.buses.push(buses_t);
    }

    sets.coeff = (0..t_count)
        .map(|t| {
            if screened_sum[t] > 0.0 {
                exact_sum[t] / (n_ctg as f64 * screened_sum[t])
            } else {
                1.0 / n_ctg as f64
            }
        })
        .collect();
    Ok(sets)
}
