//! JSON document schema for instances and the conversions to and from the
//! internal model. Key names are normative and documented in `docs/schema.md`.
//!
//! The document uses 1-based period indices and string ids; the internal
//! model uses 0-based indices everywhere. Unknown JSON keys are ignored.

use serde::{Deserialize, Serialize};

use super::*;
use crate::{Error, Result};

const PI: f64 = std::f64::consts::PI;

#[derive(Serialize, Deserialize)]
struct DocDto {
    meta: MetaDto,
    time: TimeDto,
    buses: Vec<BusDto>,
    #[serde(default)]
    branches: Vec<BranchDto>,
    #[serde(default)]
    shunts: Vec<ShuntDto>,
    devices: Vec<DeviceDto>,
    #[serde(default)]
    reserves: ReservesDto,
    #[serde(default)]
    contingencies: Vec<ContingencyDto>,
    penalties: PenaltiesDto,
}

#[derive(Serialize, Deserialize)]
struct MetaDto {
    name: String,
    s_base_mva: f64,
    #[serde(default = "default_angle_unit", skip_serializing_if = "is_rad")]
    angle_unit: String,
}

fn default_angle_unit() -> String {
    "rad".to_string()
}
fn is_rad(u: &String) -> bool {
    u == "rad"
}

#[derive(Serialize, Deserialize)]
struct TimeDto {
    durations: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BusDto {
    id: String,
    v_min: f64,
    v_max: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum BranchDto {
    Ac {
        id: String,
        from: String,
        to: String,
        g: f64,
        b: f64,
        #[serde(default)]
        g_fr: f64,
        #[serde(default)]
        b_fr: f64,
        #[serde(default)]
        g_to: f64,
        #[serde(default)]
        b_to: f64,
        #[serde(default = "one")]
        tau_min: f64,
        #[serde(default = "one")]
        tau_max: f64,
        #[serde(default)]
        phi_min: f64,
        #[serde(default)]
        phi_max: f64,
        s_max: f64,
        s_max_ctg: f64,
    },
    Dc {
        id: String,
        from: String,
        to: String,
        p_max: f64,
        q_fr_min: f64,
        q_fr_max: f64,
        q_to_min: f64,
        q_to_max: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct ShuntDto {
    id: String,
    bus: String,
    g_sh: f64,
    b_sh: f64,
    step_min: f64,
    step_max: f64,
}

#[derive(Serialize, Deserialize)]
struct TtDto {
    t: usize,
    tp: usize,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct DeviceDto {
    id: String,
    kind: String,
    bus: String,
    uc_cost: UcCostDto,
    init: InitDto,
    #[serde(default, skip_serializing_if = "TrajDto::is_empty")]
    traj: TrajDto,
    ramp: RampDto,
    power: PowerDto,
    #[serde(default, skip_serializing_if = "DevResDto::is_empty")]
    reserves: DevResDto,
    #[serde(default, skip_serializing_if = "EnergyDto::is_empty")]
    energy_windows: EnergyDto,
    #[serde(default, skip_serializing_if = "LogicDto::is_empty")]
    commit_logic: LogicDto,
    pow_curve: CurveDto,
}

#[derive(Serialize, Deserialize)]
struct UcCostDto {
    c_on: Vec<f64>,
    c_su: f64,
    c_sd: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    c_dd: Vec<TtDto>,
}

#[derive(Serialize, Deserialize)]
struct InitDto {
    u_on_0: f64,
    p_tot_0: f64,
}

#[derive(Serialize, Deserialize, Default)]
struct TrajDto {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    p_supc: Vec<TtDto>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    p_sdpc: Vec<TtDto>,
}

impl TrajDto {
    fn is_empty(&self) -> bool {
        self.p_supc.is_empty() && self.p_sdpc.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct RampDto {
    p_ru: f64,
    p_rd: f64,
    p_ru_su: f64,
    p_rd_sd: f64,
}

#[derive(Serialize, Deserialize)]
struct PowerDto {
    p_max: Vec<f64>,
    p_min: Vec<f64>,
    q_max: Vec<f64>,
    q_min: Vec<f64>,
    #[serde(default)]
    beta_max: f64,
    #[serde(default)]
    beta_min: f64,
}

#[derive(Serialize, Deserialize, Default)]
struct DevResDto {
    #[serde(default, skip_serializing_if = "CatVecsDto::is_empty")]
    p_res_max: CatVecsDto,
}

impl DevResDto {
    fn is_empty(&self) -> bool {
        self.p_res_max.is_empty()
    }
}

#[derive(Serialize, Deserialize, Default)]
struct CatVecsDto {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    on_up: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    on_dn: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    off_up: Vec<f64>,
}

impl CatVecsDto {
    fn is_empty(&self) -> bool {
        self.on_up.is_empty() && self.on_dn.is_empty() && self.off_up.is_empty()
    }
}

#[derive(Serialize, Deserialize, Default)]
struct EnergyDto {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    w_min: Vec<WindowDto>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    w_max: Vec<WindowDto>,
}

impl EnergyDto {
    fn is_empty(&self) -> bool {
        self.w_min.is_empty() && self.w_max.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct WindowDto {
    periods: Vec<usize>,
    bound: f64,
}

#[derive(Serialize, Deserialize, Default)]
struct LogicDto {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    must_run: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    must_out: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    dn_min: Vec<PriorDto>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    up_min: Vec<PriorDto>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    su_max: Vec<SuDto>,
}

impl LogicDto {
    fn is_empty(&self) -> bool {
        self.must_run.is_empty()
            && self.must_out.is_empty()
            && self.dn_min.is_empty()
            && self.up_min.is_empty()
            && self.su_max.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct PriorDto {
    t: usize,
    prior: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SuDto {
    periods: Vec<usize>,
    limit: u32,
}

#[derive(Serialize, Deserialize)]
struct CurveDto {
    blocks: Vec<BlockDto>,
}

#[derive(Serialize, Deserialize)]
struct BlockDto {
    width: f64,
    marginal: f64,
}

#[derive(Serialize, Deserialize, Default)]
struct ReservesDto {
    #[serde(default, skip_serializing_if = "CatNamesDto::is_empty")]
    products: CatNamesDto,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    p_zones: Vec<PZoneDto>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    q_zones: Vec<QZoneDto>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    var_costs: Vec<VarCostDto>,
}

#[derive(Serialize, Deserialize, Default)]
struct CatNamesDto {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    on_up: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    on_dn: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    off_up: Vec<String>,
}

impl CatNamesDto {
    fn is_empty(&self) -> bool {
        self.on_up.is_empty() && self.on_dn.is_empty() && self.off_up.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct PZoneDto {
    id: String,
    devices: Vec<String>,
    products: Vec<ProdRefDto>,
    requirement: ReqDto,
    penalty: f64,
}

#[derive(Serialize, Deserialize)]
struct ProdRefDto {
    category: String,
    name: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReqDto {
    Constant { value: f64 },
    FracOfSum { alpha: f64 },
    FracOfMax { alpha: f64 },
}

#[derive(Serialize, Deserialize)]
struct QZoneDto {
    id: String,
    devices: Vec<String>,
    direction: String,
    requirement: ReqDto,
    penalty: f64,
}

#[derive(Serialize, Deserialize)]
struct VarCostDto {
    device: String,
    #[serde(default, skip_serializing_if = "CatMatsDto::is_empty")]
    p: CatMatsDto,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    q_up: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    q_dn: Vec<f64>,
}

#[derive(Serialize, Deserialize, Default)]
struct CatMatsDto {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    on_up: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    on_dn: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    off_up: Vec<Vec<f64>>,
}

impl CatMatsDto {
    fn is_empty(&self) -> bool {
        self.on_up.is_empty() && self.on_dn.is_empty() && self.off_up.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct ContingencyDto {
    id: String,
    branch: String,
}

#[derive(Serialize, Deserialize)]
struct PenaltiesDto {
    c_p: f64,
    c_q: f64,
    c_s: f64,
    c_e: f64,
}

/// Converts a 1-based schema period index into a 0-based internal one.
fn period(path: &str, t: usize, t_count: usize) -> Result<usize> {
    if t >= 1 && t <= t_count {
        Ok(t - 1)
    } else {
        Err(Error::schema(path, format!("period index {t} outside 1..={t_count}")))
    }
}

fn check_len(path: &str, len: usize, want: usize) -> Result<()> {
    if len == want {
        Ok(())
    } else {
        Err(Error::schema(path, format!("expected {want} entries, found {len}")))
    }
}

/// Parses a JSON instance document.
pub fn parse_instance(bytes: &[u8]) -> Result<Instance> {
    let doc: DocDto = serde_json::from_slice(bytes)
        .map_err(|e| Error::schema("(document)", e.to_string()))?;
    let t_count = doc.time.durations.len();
    let angle_scale = match doc.meta.angle_unit.as_str() {
        "rad" => 1.0,
        "deg" => PI / 180.0,
        other => {
            return Err(Error::schema("meta.angle_unit", format!("unknown unit {other:?}")))
        }
    };

    let buses: Vec<Bus> = doc
        .buses
        .iter()
        .map(|b| Bus { id: b.id.clone(), v_min: b.v_min, v_max: b.v_max })
        .collect();
    let bus_idx = |path: String, id: &str| -> Result<usize> {
        buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| Error::reference(path, format!("unknown bus {id:?}")))
    };

    let mut branches = Vec::new();
    for (n, b) in doc.branches.iter().enumerate() {
        let path = format!("branches[{n}]");
        let branch = match b {
            BranchDto::Ac {
                id,
                from,
                to,
                g,
                b,
                g_fr,
                b_fr,
                g_to,
                b_to,
                tau_min,
                tau_max,
                phi_min,
                phi_max,
                s_max,
                s_max_ctg,
            } => Branch {
                id: id.clone(),
                from: bus_idx(format!("{path}.from"), from)?,
                to: bus_idx(format!("{path}.to"), to)?,
                kind: BranchKind::Ac(AcBranch {
                    g: *g,
                    b: *b,
                    g_fr: *g_fr,
                    b_fr: *b_fr,
                    g_to: *g_to,
                    b_to: *b_to,
                    tau_min: *tau_min,
                    tau_max: *tau_max,
                    phi_min: phi_min * angle_scale,
                    phi_max: phi_max * angle_scale,
                    s_max: *s_max,
                    s_max_ctg: *s_max_ctg,
                }),
            },
            BranchDto::Dc { id, from, to, p_max, q_fr_min, q_fr_max, q_to_min, q_to_max } => {
                Branch {
                    id: id.clone(),
                    from: bus_idx(format!("{path}.from"), from)?,
                    to: bus_idx(format!("{path}.to"), to)?,
                    kind: BranchKind::Dc(DcBranch {
                        p_max: *p_max,
                        q_fr_min: *q_fr_min,
                        q_fr_max: *q_fr_max,
                        q_to_min: *q_to_min,
                        q_to_max: *q_to_max,
                    }),
                }
            }
        };
        branches.push(branch);
    }

    let mut shunts = Vec::new();
    for (n, s) in doc.shunts.iter().enumerate() {
        shunts.push(Shunt {
            id: s.id.clone(),
            bus: bus_idx(format!("shunts[{n}].bus"), &s.bus)?,
            g_sh: s.g_sh,
            b_sh: s.b_sh,
            step_min: s.step_min,
            step_max: s.step_max,
        });
    }

    let parse_tt = |path: &str,
                    entries: &[TtDto],
                    check: &dyn Fn(usize, usize) -> bool,
                    rule: &str|
     -> Result<Vec<SparseTT>> {
        let mut out = Vec::new();
        for (n, e) in entries.iter().enumerate() {
            let t = period(&format!("{path}[{n}].t"), e.t, t_count)?;
            let tp = period(&format!("{path}[{n}].tp"), e.tp, t_count)?;
            if !check(t, tp) {
                return Err(Error::schema(
                    format!("{path}[{n}]"),
                    format!("indices (t={}, tp={}) violate {rule}", e.t, e.tp),
                ));
            }
            out.push(SparseTT { t, tp, value: e.value });
        }
        Ok(out)
    };

    let parse_periods = |path: &str, periods: &[usize]| -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (n, &t) in periods.iter().enumerate() {
            out.push(period(&format!("{path}[{n}]"), t, t_count)?);
        }
        Ok(out)
    };

    let mut devices = Vec::new();
    for (n, d) in doc.devices.iter().enumerate() {
        let path = format!("devices[{n}]");
        let kind = match d.kind.as_str() {
            "producer" => DeviceKind::Producer,
            "consumer" => DeviceKind::Consumer,
            other => {
                return Err(Error::schema(
                    format!("{path}.kind"),
                    format!("expected \"producer\" or \"consumer\", found {other:?}"),
                ))
            }
        };
        check_len(&format!("{path}.uc_cost.c_on"), d.uc_cost.c_on.len(), t_count)?;
        check_len(&format!("{path}.power.p_max"), d.power.p_max.len(), t_count)?;
        check_len(&format!("{path}.power.p_min"), d.power.p_min.len(), t_count)?;
        check_len(&format!("{path}.power.q_max"), d.power.q_max.len(), t_count)?;
        check_len(&format!("{path}.power.q_min"), d.power.q_min.len(), t_count)?;

        let mut dn_min = vec![Vec::new(); t_count];
        for (m, w) in d.commit_logic.dn_min.iter().enumerate() {
            let wpath = format!("{path}.commit_logic.dn_min[{m}]");
            let t = period(&format!("{wpath}.t"), w.t, t_count)?;
            let prior = parse_periods(&format!("{wpath}.prior"), &w.prior)?;
            if prior.iter().any(|&tp| tp >= t) {
                return Err(Error::schema(wpath, "prior periods must precede t".to_string()));
            }
            dn_min[t] = prior;
        }
        let mut up_min = vec![Vec::new(); t_count];
        for (m, w) in d.commit_logic.up_min.iter().enumerate() {
            let wpath = format!("{path}.commit_logic.up_min[{m}]");
            let t = period(&format!("{wpath}.t"), w.t, t_count)?;
            let prior = parse_periods(&format!("{wpath}.prior"), &w.prior)?;
            if prior.iter().any(|&tp| tp >= t) {
                return Err(Error::schema(wpath, "prior periods must precede t".to_string()));
            }
            up_min[t] = prior;
        }
        let mut su_max = Vec::new();
        for (m, w) in d.commit_logic.su_max.iter().enumerate() {
            su_max.push(SuWindow {
                periods: parse_periods(&format!("{path}.commit_logic.su_max[{m}].periods"), &w.periods)?,
                limit: w.limit,
            });
        }
        let windows = |path: &str, ws: &[WindowDto]| -> Result<Vec<Window>> {
            ws.iter()
                .enumerate()
                .map(|(m, w)| {
                    Ok(Window {
                        periods: parse_periods(&format!("{path}[{m}].periods"), &w.periods)?,
                        bound: w.bound,
                    })
                })
                .collect()
        };

        devices.push(Device {
            id: d.id.clone(),
            kind,
            bus: bus_idx(format!("{path}.bus"), &d.bus)?,
            c_on: d.uc_cost.c_on.clone(),
            c_su: d.uc_cost.c_su,
            c_sd: d.uc_cost.c_sd,
            c_dd: parse_tt(
                &format!("{path}.uc_cost.c_dd"),
                &d.uc_cost.c_dd,
                &|t, tp| tp < t,
                "tp < t",
            )?,
            u_on_init: d.init.u_on_0,
            p_tot_init: d.init.p_tot_0,
            p_supc: parse_tt(
                &format!("{path}.traj.p_supc"),
                &d.traj.p_supc,
                &|t, tp| tp > t,
                "tp > t",
            )?,
            p_sdpc: parse_tt(
                &format!("{path}.traj.p_sdpc"),
                &d.traj.p_sdpc,
                &|t, tp| tp <= t,
                "tp <= t",
            )?,
            p_ru: d.ramp.p_ru,
            p_rd: d.ramp.p_rd,
            p_ru_su: d.ramp.p_ru_su,
            p_rd_sd: d.ramp.p_rd_sd,
            p_max: d.power.p_max.clone(),
            p_min: d.power.p_min.clone(),
            q_max: d.power.q_max.clone(),
            q_min: d.power.q_min.clone(),
            beta_max: d.power.beta_max,
            beta_min: d.power.beta_min,
            p_res_max: [
                d.reserves.p_res_max.on_up.clone(),
                d.reserves.p_res_max.on_dn.clone(),
                d.reserves.p_res_max.off_up.clone(),
            ],
            en_min: windows(&format!("{path}.energy_windows.w_min"), &d.energy_windows.w_min)?,
            en_max: windows(&format!("{path}.energy_windows.w_max"), &d.energy_windows.w_max)?,
            must_run: parse_periods(&format!("{path}.commit_logic.must_run"), &d.commit_logic.must_run)?,
            must_out: parse_periods(&format!("{path}.commit_logic.must_out"), &d.commit_logic.must_out)?,
            dn_min,
            up_min,
            su_max,
            blocks: d.pow_curve.blocks.iter().map(|b| (b.width, b.marginal)).collect(),
        });
    }
    let products = [
        doc.reserves.products.on_up.clone(),
        doc.reserves.products.on_dn.clone(),
        doc.reserves.products.off_up.clone(),
    ];
    // Per-device reserve caps must match the product counts (or be empty).
    for (n, d) in devices.iter_mut().enumerate() {
        for cat in ResCat::ALL {
            let caps = &mut d.p_res_max[cat as usize];
            if caps.is_empty() {
                *caps = vec![0.0; products[cat as usize].len()];
            } else {
                check_len(
                    &format!("devices[{n}].reserves.p_res_max.{}", cat.name()),
                    caps.len(),
                    products[cat as usize].len(),
                )?;
            }
        }
    }

    let dev_idx = |path: String, id: &str| -> Result<usize> {
        devices
            .iter()
            .position(|d| d.id == id)
            .ok_or_else(|| Error::reference(path, format!("unknown device {id:?}")))
    };

    let req = |r: &ReqDto| match r {
        ReqDto::Constant { value } => Requirement::Constant(*value),
        ReqDto::FracOfSum { alpha } => Requirement::FracOfSum(*alpha),
        ReqDto::FracOfMax { alpha } => Requirement::FracOfMax(*alpha),
    };

    let mut p_zones = Vec::new();
    for (n, z) in doc.reserves.p_zones.iter().enumerate() {
        let path = format!("reserves.p_zones[{n}]");
        let mut zone_devices = Vec::new();
        for (m, id) in z.devices.iter().enumerate() {
            zone_devices.push(dev_idx(format!("{path}.devices[{m}]"), id)?);
        }
        let mut prods = Vec::new();
        for (m, p) in z.products.iter().enumerate() {
            let ppath = format!("{path}.products[{m}]");
            let cat = match p.category.as_str() {
                "on_up" => ResCat::OnUp,
                "on_dn" => ResCat::OnDn,
                "off_up" => ResCat::OffUp,
                other => {
                    return Err(Error::schema(
                        format!("{ppath}.category"),
                        format!("unknown category {other:?}"),
                    ))
                }
            };
            let r = products[cat as usize]
                .iter()
                .position(|name| name == &p.name)
                .ok_or_else(|| {
                    Error::reference(
                        format!("{ppath}.name"),
                        format!("unknown product {:?} in category {}", p.name, cat.name()),
                    )
                })?;
            prods.push((cat, r));
        }
        p_zones.push(PZone {
            id: z.id.clone(),
            devices: zone_devices,
            products: prods,
            requirement: req(&z.requirement),
            penalty: z.penalty,
        });
    }

    let mut q_zones = Vec::new();
    for (n, z) in doc.reserves.q_zones.iter().enumerate() {
        let path = format!("reserves.q_zones[{n}]");
        let mut zone_devices = Vec::new();
        for (m, id) in z.devices.iter().enumerate() {
            zone_devices.push(dev_idx(format!("{path}.devices[{m}]"), id)?);
        }
        let dir = match z.direction.as_str() {
            "up" => QDir::Up,
            "dn" => QDir::Dn,
            other => {
                return Err(Error::schema(
                    format!("{path}.direction"),
                    format!("expected \"up\" or \"dn\", found {other:?}"),
                ))
            }
        };
        q_zones.push(QZone {
            id: z.id.clone(),
            devices: zone_devices,
            dir,
            requirement: req(&z.requirement),
            penalty: z.penalty,
        });
    }

    let mut c_res_p: Vec<[Vec<Vec<f64>>; RES_CATS]> = devices
        .iter()
        .map(|_| {
            [
                vec![vec![0.0; t_count]; products[0].len()],
                vec![vec![0.0; t_count]; products[1].len()],
                vec![vec![0.0; t_count]; products[2].len()],
            ]
        })
        .collect();
    let mut c_res_q_up = vec![vec![0.0; t_count]; devices.len()];
    let mut c_res_q_dn = vec![vec![0.0; t_count]; devices.len()];
    for (n, vc) in doc.reserves.var_costs.iter().enumerate() {
        let path = format!("reserves.var_costs[{n}]");
        let j = dev_idx(format!("{path}.device"), &vc.device)?;
        let mats = [&vc.p.on_up, &vc.p.on_dn, &vc.p.off_up];
        for cat in ResCat::ALL {
            let mat = mats[cat as usize];
            if mat.is_empty() {
                continue;
            }
            let mpath = format!("{path}.p.{}", cat.name());
            check_len(&mpath, mat.len(), products[cat as usize].len())?;
            for (r, row) in mat.iter().enumerate() {
                check_len(&format!("{mpath}[{r}]"), row.len(), t_count)?;
                c_res_p[j][cat as usize][r] = row.clone();
            }
        }
        if !vc.q_up.is_empty() {
            check_len(&format!("{path}.q_up"), vc.q_up.len(), t_count)?;
            c_res_q_up[j] = vc.q_up.clone();
        }
        if !vc.q_dn.is_empty() {
            check_len(&format!("{path}.q_dn"), vc.q_dn.len(), t_count)?;
            c_res_q_dn[j] = vc.q_dn.clone();
        }
    }

    let mut contingencies = Vec::new();
    for (n, c) in doc.contingencies.iter().enumerate() {
        let path = format!("contingencies[{n}].branch");
        let j = branches
            .iter()
            .position(|b| b.id == c.branch)
            .ok_or_else(|| Error::reference(path.clone(), format!("unknown branch {:?}", c.branch)))?;
        if !branches[j].is_ac() {
            return Err(Error::reference(path, format!("branch {:?} is not AC", c.branch)));
        }
        contingencies.push(Contingency { id: c.id.clone(), branch: j });
    }

    Ok(Instance {
        name: doc.meta.name,
        s_base_mva: doc.meta.s_base_mva,
        time: TimeGrid { d: doc.time.durations },
        buses,
        branches,
        shunts,
        devices,
        reserves: ReserveSpec { products, p_zones, q_zones, c_res_p, c_res_q_up, c_res_q_dn },
        contingencies,
        penalties: PenaltyCoeffs {
            c_p: doc.penalties.c_p,
            c_q: doc.penalties.c_q,
            c_s: doc.penalties.c_s,
            c_e: doc.penalties.c_e,
        },
    })
}

/// Serializes an instance to a pretty-printed JSON document in the same
/// schema accepted by [`parse_instance`]; `parse(serialize(x)) == x`.
pub fn serialize_instance(inst: &Instance) -> String {
    let tt = |entries: &[SparseTT]| -> Vec<TtDto> {
        entries.iter().map(|e| TtDto { t: e.t + 1, tp: e.tp + 1, value: e.value }).collect()
    };
    let periods = |ps: &[usize]| -> Vec<usize> { ps.iter().map(|&t| t + 1).collect() };
    let windows = |ws: &[Window]| -> Vec<WindowDto> {
        ws.iter().map(|w| WindowDto { periods: periods(&w.periods), bound: w.bound }).collect()
    };

    let doc = DocDto {
        meta: MetaDto {
            name: inst.name.clone(),
            s_base_mva: inst.s_base_mva,
            angle_unit: "rad".to_string(),
        },
        time: TimeDto { durations: inst.time.d.clone() },
        buses: inst
            .buses
            .iter()
            .map(|b| BusDto { id: b.id.clone(), v_min: b.v_min, v_max: b.v_max })
            .collect(),
        branches: inst
            .branches
            .iter()
            .map(|b| match &b.kind {
                BranchKind::Ac(p) => BranchDto::Ac {
                    id: b.id.clone(),
                    from: inst.buses[b.from].id.clone(),
                    to: inst.buses[b.to].id.clone(),
                    g: p.g,
                    b: p.b,
                    g_fr: p.g_fr,
                    b_fr: p.b_fr,
                    g_to: p.g_to,
                    b_to: p.b_to,
                    tau_min: p.tau_min,
                    tau_max: p.tau_max,
                    phi_min: p.phi_min,
                    phi_max: p.phi_max,
                    s_max: p.s_max,
                    s_max_ctg: p.s_max_ctg,
                },
                BranchKind::Dc(p) => BranchDto::Dc {
                    id: b.id.clone(),
                    from: inst.buses[b.from].id.clone(),
                    to: inst.buses[b.to].id.clone(),
                    p_max: p.p_max,
                    q_fr_min: p.q_fr_min,
                    q_fr_max: p.q_fr_max,
                    q_to_min: p.q_to_min,
                    q_to_max: p.q_to_max,
                },
            })
            .collect(),
        shunts: inst
            .shunts
            .iter()
            .map(|s| ShuntDto {
                id: s.id.clone(),
                bus: inst.buses[s.bus].id.clone(),
                g_sh: s.g_sh,
                b_sh: s.b_sh,
                step_min: s.step_min,
                step_max: s.step_max,
            })
            .collect(),
        devices: inst
            .devices
            .iter()
            .map(|d| DeviceDto {
                id: d.id.clone(),
                kind: match d.kind {
                    DeviceKind::Producer => "producer".to_string(),
                    DeviceKind::Consumer => "consumer".to_string(),
                },
                bus: inst.buses[d.bus].id.clone(),
                uc_cost: UcCostDto {
                    c_on: d.c_on.clone(),
                    c_su: d.c_su,
                    c_sd: d.c_sd,
                    c_dd: tt(&d.c_dd),
                },
                init: InitDto { u_on_0: d.u_on_init, p_tot_0: d.p_tot_init },
                traj: TrajDto { p_supc: tt(&d.p_supc), p_sdpc: tt(&d.p_sdpc) },
                ramp: RampDto {
                    p_ru: d.p_ru,
                    p_rd: d.p_rd,
                    p_ru_su: d.p_ru_su,
                    p_rd_sd: d.p_rd_sd,
                },
                power: PowerDto {
                    p_max: d.p_max.clone(),
                    p_min: d.p_min.clone(),
                    q_max: d.q_max.clone(),
                    q_min: d.q_min.clone(),
                    beta_max: d.beta_max,
                    beta_min: d.beta_min,
                },
                reserves: DevResDto {
                    p_res_max: CatVecsDto {
                        on_up: if d.p_res_max[0].iter().all(|&c| c == 0.0) {
                            Vec::new()
                        } else {
                            d.p_res_max[0].clone()
                        },
                        on_dn: if d.p_res_max[1].iter().all(|&c| c == 0.0) {
                            Vec::new()
                        } else {
                            d.p_res_max[1].clone()
                        },
                        off_up: if d.p_res_max[2].iter().all(|&c| c == 0.0) {
                            Vec::new()
                        } else {
                            d.p_res_max[2].clone()
                        },
                    },
                },
                energy_windows: EnergyDto { w_min: windows(&d.en_min), w_max: windows(&d.en_max) },
                commit_logic: LogicDto {
                    must_run: periods(&d.must_run),
                    must_out: periods(&d.must_out),
                    dn_min: d
                        .dn_min
                        .iter()
                        .enumerate()
                        .filter(|(_, prior)| !prior.is_empty())
                        .map(|(t, prior)| PriorDto { t: t + 1, prior: periods(prior) })
                        .collect(),
                    up_min: d
                        .up_min
                        .iter()
                        .enumerate()
                        .filter(|(_, prior)| !prior.is_empty())
                        .map(|(t, prior)| PriorDto { t: t + 1, prior: periods(prior) })
                        .collect(),
                    su_max: d
                        .su_max
                        .iter()
                        .map(|w| SuDto { periods: periods(&w.periods), limit: w.limit })
                        .collect(),
                },
                pow_curve: CurveDto {
                    blocks: d
                        .blocks
                        .iter()
                        .map(|&(width, marginal)| BlockDto { width, marginal })
                        .collect(),
                },
            })
            .collect(),
        reserves: ReservesDto {
            products: CatNamesDto {
                on_up: inst.reserves.products[0].clone(),
                on_dn: inst.reserves.products[1].clone(),
                off_up: inst.reserves.products[2].clone(),
            },
            p_zones: inst
                .reserves
                .p_zones
                .iter()
                .map(|z| PZoneDto {
                    id: z.id.clone(),
                    devices: z.devices.iter().map(|&j| inst.devices[j].id.clone()).collect(),
                    products: z
                        .products
                        .iter()
                        .map(|&(cat, r)| ProdRefDto {
                            category: cat.name().to_string(),
                            name: inst.reserves.products[cat as usize][r].clone(),
                        })
                        .collect(),
                    requirement: req_dto(&z.requirement),
                    penalty: z.penalty,
                })
                .collect(),
            q_zones: inst
                .reserves
                .q_zones
                .iter()
                .map(|z| QZoneDto {
                    id: z.id.clone(),
                    devices: z.devices.iter().map(|&j| inst.devices[j].id.clone()).collect(),
                    direction: match z.dir {
                        QDir::Up => "up".to_string(),
                        QDir::Dn => "dn".to_string(),
                    },
                    requirement: req_dto(&z.requirement),
                    penalty: z.penalty,
                })
                .collect(),
            var_costs: inst
                .devices
                .iter()
                .enumerate()
                .filter_map(|(j, d)| {
                    let p = &inst.reserves.c_res_p[j];
                    let qu = &inst.reserves.c_res_q_up[j];
                    let qd = &inst.reserves.c_res_q_dn[j];
                    let zero_mat =
                        |m: &Vec<Vec<f64>>| m.iter().all(|row| row.iter().all(|&c| c == 0.0));
                    let all_zero = p.iter().all(zero_mat)
                        && qu.iter().all(|&c| c == 0.0)
                        && qd.iter().all(|&c| c == 0.0);
                    if all_zero {
                        return None;
                    }
                    Some(VarCostDto {
                        device: d.id.clone(),
                        p: CatMatsDto {
                            on_up: if zero_mat(&p[0]) { Vec::new() } else { p[0].clone() },
                            on_dn: if zero_mat(&p[1]) { Vec::new() } else { p[1].clone() },
                            off_up: if zero_mat(&p[2]) { Vec::new() } else { p[2].clone() },
                        },
                        q_up: if qu.iter().all(|&c| c == 0.0) { Vec::new() } else { qu.clone() },
                        q_dn: if qd.iter().all(|&c| c == 0.0) { Vec::new() } else { qd.clone() },
                    })
                })
                .collect(),
        },
        contingencies: inst
            .contingencies
            .iter()
            .map(|k| ContingencyDto { id: k.id.clone(), branch: inst.branches[k.branch].id.clone() })
            .collect(),
        penalties: PenaltiesDto {
            c_p: inst.penalties.c_p,
            c_q: inst.penalties.c_q,
            c_s: inst.penalties.c_s,
            c_e: inst.penalties.c_e,
        },
    };
    serde_json::to_string_pretty(&doc).expect("instance serialization cannot fail")
}

fn req_dto(r: &Requirement) -> ReqDto {
    match *r {
        Requirement::Constant(value) => ReqDto::Constant { value },
        Requirement::FracOfSum(alpha) => ReqDto::FracOfSum { alpha },
        Requirement::FracOfMax(alpha) => ReqDto::FracOfMax { alpha },
    }
}
