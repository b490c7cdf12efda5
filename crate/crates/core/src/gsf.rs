//! DC sensitivity machinery for contingency evaluation: generalized shift
//! factors (GSFs) from a reduced bus admittance matrix, rank-1
//! Sherman–Morrison updates per branch outage, islanding detection, and the
//! post-contingency flow functions built on them.
//!
//! The base matrix `H` is the DC bus admittance matrix `M B M^T` with the
//! reference row/column replaced by a unit diagonal; shift factors are
//! `F = B M^T S H^{-1}` with `S` zeroing the reference entry. Removing a
//! branch is a rank-1 change to `H`, so per-contingency factors come from a
//! Sherman–Morrison update of the single base inverse instead of a fresh
//! inversion. A vanishing update denominator means the outage disconnects
//! the network (islanding).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::acopf::NetworkFlows;
use crate::formulation::InjectionVars;
use crate::instance::{DeviceKind, Instance};
use crate::{Error, Result};

/// Update denominators smaller than this mark the outage as islanding.
pub const ISLAND_TOL: f64 = 1e-10;

/// Shift-factor rows for one contingency, or the flag that the outage splits
/// the network. Rows are indexed by the full branch list (DC rows zero, the
/// outaged row zero).
#[derive(Debug, Clone)]
pub enum CtgRows {
    Rows(Arc<Vec<Vec<f64>>>),
    Islanded,
}

struct RowCache {
    entries: HashMap<usize, CtgRows>,
    order: Vec<usize>,
    capacity: usize,
}

/// Base shift factors plus the machinery to derive per-contingency rows.
pub struct GsfSet {
    pub ref_bus: usize,
    /// Inverse of the reduced admittance matrix, |I| x |I|.
    h_inv: Vec<Vec<f64>>,
    /// Base shift factors, full-branch-indexed rows x |I| (DC rows zero).
    pub base_f: Vec<Vec<f64>>,
    cache: Mutex<RowCache>,
}

/// Reference bus choice: the lowest-index bus not incident to any
/// contingency branch, falling back to bus 0 when every bus is incident.
pub fn choose_ref_bus(inst: &Instance) -> usize {
    let mut incident = vec![false; inst.buses.len()];
    for k in &inst.contingencies {
        let br = &inst.branches[k.branch];
        incident[br.from] = true;
        incident[br.to] = true;
    }
    incident.iter().position(|&hit| !hit).unwrap_or(0)
}

/// Gauss–Jordan inversion with partial pivoting; `SingularH` when a pivot
/// collapses (the AC subgraph is disconnected).
fn invert(mut a: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(1.0f64, |acc, &v| acc.max(v.abs()));
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
            .expect("non-empty pivot range");
        if a[pivot_row][col].abs() <= 1e-12 * scale {
            return Err(Error::SingularH);
        }
        a.swap(col, pivot_row);
        inv.swap(col, pivot_row);
        let pivot = a[col][col];
        for j in 0..n {
            a[col][j] /= pivot;
            inv[col][j] /= pivot;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = a[row][col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                a[row][j] -= factor * a[col][j];
                inv[row][j] -= factor * inv[col][j];
            }
        }
    }
    Ok(inv)
}

/// Assemble the reduced admittance matrix for the AC subgraph, invert it,
/// and form the base shift-factor rows.
pub fn build_base(inst: &Instance, ref_bus: usize) -> Result<GsfSet> {
    let n = inst.buses.len();
    let mut h = vec![vec![0.0; n]; n];
    for j in inst.ac_branches() {
        let br = &inst.branches[j];
        let w = -br.ac().expect("ac branch").b;
        h[br.from][br.from] += w;
        h[br.to][br.to] += w;
        h[br.from][br.to] -= w;
        h[br.to][br.from] -= w;
    }
    for i in 0..n {
        h[ref_bus][i] = 0.0;
        h[i][ref_bus] = 0.0;
    }
    h[ref_bus][ref_bus] = 1.0;
    let h_inv = invert(h)?;
    let base_f = assemble_rows(inst, ref_bus, &h_inv, None);
    Ok(GsfSet {
        ref_bus,
        h_inv,
        base_f,
        cache: Mutex::new(RowCache { entries: HashMap::new(), order: Vec::new(), capacity: 64 }),
    })
}

/// F rows for the network with `skip` outaged: row j is
/// `-b_j (H^-1[fr] - H^-1[to])` with reference-bus terms dropped.
fn assemble_rows(
    inst: &Instance,
    ref_bus: usize,
    h_inv: &[Vec<f64>],
    skip: Option<usize>,
) -> Vec<Vec<f64>> {
    let n = inst.buses.len();
    let mut rows = vec![vec![0.0; n]; inst.branches.len()];
    for j in inst.ac_branches() {
        if skip == Some(j) {
            continue;
        }
        let br = &inst.branches[j];
        let b = br.ac().expect("ac branch").b;
        for i in 0..n {
            let fr = if br.from == ref_bus { 0.0 } else { h_inv[br.from][i] };
            let to = if br.to == ref_bus { 0.0 } else { h_inv[br.to][i] };
            rows[j][i] = -b * (fr - to);
        }
    }
    rows
}

impl GsfSet {
    pub fn set_cache_capacity(&self, capacity: usize) {
        let mut cache = self.cache.lock().expect("gsf cache poisoned");
        cache.capacity = capacity.max(1);
        while cache.order.len() > cache.capacity {
            let evict = cache.order.remove(0);
            cache.entries.remove(&evict);
        }
    }

    /// Shift-factor rows after outaging contingency `k`'s branch, via a
    /// Sherman–Morrison rank-1 update of the base inverse. Returns
    /// `Islanded` when the update denominator vanishes (the outage
    /// disconnects the network). Results are cached.
    pub fn contingency_rows(&self, inst: &Instance, k: usize) -> Result<CtgRows> {
        {
            let mut cache = self.cache.lock().expect("gsf cache poisoned");
            if let Some(hit) = cache.entries.get(&k).cloned() {
                let pos = cache.order.iter().position(|&key| key == k).expect("cache order");
                cache.order.remove(pos);
                cache.order.push(k);
                return Ok(hit);
            }
        }
        let ctg = inst
            .contingencies
            .get(k)
            .ok_or_else(|| Error::MissingGsf(format!("contingency index {k} out of range")))?;
        let jk = ctg.branch;
        let br = &inst.branches[jk];
        let b = br
            .ac()
            .ok_or_else(|| Error::MissingGsf(format!("contingency {} outages a DC branch", ctg.id)))?
            .b;
        let n = inst.buses.len();
        // Update vector e_from - e_to with the reference component dropped;
        // this covers both the generic update and the reference-incident
        // variant (the reference row/column of H carry no branch terms).
        let mut w = vec![0.0; n];
        if br.from != self.ref_bus {
            w[br.from] = 1.0;
        }
        if br.to != self.ref_bus {
            w[br.to] = -1.0;
        }
        // H_k = H + b * w w^T, so (Sherman–Morrison)
        // H_k^-1 = H^-1 - b (H^-1 w)(w^T H^-1) / (1 + b w^T H^-1 w).
        let h_w: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|ip| self.h_inv[i][ip] * w[ip]).sum())
            .collect();
        let denom = 1.0 + b * w.iter().zip(&h_w).map(|(wi, hwi)| wi * hwi).sum::<f64>();
        let rows = if denom.abs() <= ISLAND_TOL {
            CtgRows::Islanded
        } else {
            let mut h_k = self.h_inv.clone();
            for i in 0..n {
                for ip in 0..n {
                    h_k[i][ip] -= b * h_w[i] * h_w[ip] / denom;
                }
            }
            CtgRows::Rows(Arc::new(assemble_rows(inst, self.ref_bus, &h_k, Some(jk))))
        };
        let mut cache = self.cache.lock().expect("gsf cache poisoned");
        if !cache.entries.contains_key(&k) {
            cache.entries.insert(k, rows.clone());
            cache.order.push(k);
            if cache.order.len() > cache.capacity {
                let evict = cache.order.remove(0);
                cache.entries.remove(&evict);
            }
        }
        Ok(rows)
    }
}

/// Net real power injection per bus: device injections (producers positive,
/// consumers negative) minus shunt draw and DC line terms. AC line flows do
/// not enter; they are what the shift factors reconstruct.
pub fn net_injection(
    x: &InjectionVars,
    flows: &NetworkFlows,
    t: usize,
    inst: &Instance,
) -> Vec<f64> {
    let mut p_inj = vec![0.0; inst.buses.len()];
    for (j, dev) in inst.devices.iter().enumerate() {
        match dev.kind {
            DeviceKind::Producer => p_inj[dev.bus] += x.p_tot[j][t],
            DeviceKind::Consumer => p_inj[dev.bus] -= x.p_tot[j][t],
        }
    }
    for (j, sh) in inst.shunts.iter().enumerate() {
        p_inj[sh.bus] -= flows.p_sh[j][t];
    }
    for j in inst.dc_branches() {
        let br = &inst.branches[j];
        p_inj[br.from] -= flows.p_fr[j][t];
        p_inj[br.to] -= flows.p_to[j][t];
    }
    p_inj
}

/// System slack: the sum of all net injections.
pub fn slack(p_inj: &[f64]) -> f64 {
    p_inj.iter().sum()
}

/// Post-contingency real power flow on branch `j`: the shift-factor row
/// applied to slack-adjusted injections.
pub fn post_contingency_flow(rows: &[Vec<f64>], p_inj: &[f64], j: usize) -> f64 {
    let shift = slack(p_inj) / p_inj.len() as f64;
    rows[j].iter().zip(p_inj).map(|(f, inj)| f * (inj - shift)).sum()
}

/// Same flow with the bus sum restricted to `subset`. The slack term still
/// averages over all buses.
pub fn sparse_flow_approx(rows: &[Vec<f64>], p_inj: &[f64], j: usize, subset: &[usize]) -> f64 {
    let shift = slack(p_inj) / p_inj.len() as f64;
    subset.iter().map(|&i| rows[j][i] * (p_inj[i] - shift)).sum()
}
