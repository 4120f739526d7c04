//! Scenario files (versioned JSON), per-slot feeder construction and the
//! synthetic irradiance/load generators.

use std::fmt::Write as _;
use std::path::Path;

use oid_conic::C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::central::{CostSpec, VoltageLimits};
use crate::error::{model, OidError, Result};
use crate::feeder::{FeederModel, HouseLoad, HousePayload, InverterSpec, Line, Node, PerUnitBase, Role};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub base: PerUnitBase,
    /// Role of node `k` at position `k`.
    pub roles: Vec<Role>,
    pub lines: Vec<LineSpec>,
    /// One entry per house node, in increasing node order.
    pub houses: Vec<HouseSpec>,
    pub inverter: InverterRules,
    pub load_pf: f64,
    pub voltage_limits: VoltageLimits,
    pub cost: CostConfig,
    pub admm: AdmmSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Vec<Vec<usize>>>,
    pub profiles: Profiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from: usize,
    pub to: usize,
    pub length_m: f64,
    pub r_ohm_per_km: f64,
    pub x_ohm_per_km: f64,
    /// Total shunt susceptance per km, split evenly between the two ends.
    #[serde(default)]
    pub b_us_per_km: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseSpec {
    pub node: usize,
    pub dc_kw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverterRules {
    /// dc-to-ac derating in (0, 1].
    pub derating: f64,
    /// Oversizing of the ac rating, e.g. 0.1 for 10%.
    pub oversize: f64,
    pub min_pf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub loss_weight: f64,
    pub lambda: f64,
    /// Either one value for all houses or one per house.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmSettings {
    pub kappa: f64,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self { kappa: 1.0, epsilon: 1e-6, max_iters: 500 }
    }
}

/// Hourly series. `irradiance[t]` is the fraction of derated dc output
/// available in slot `t`; `load_kw[k][t]` the demand of house `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profiles {
    pub slot_hours: Vec<f64>,
    pub irradiance: Vec<f64>,
    pub load_kw: Vec<Vec<f64>>,
}

/// Per-house inputs of one slot, in pu.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlice {
    pub slot: usize,
    pub hour: f64,
    pub p_av: Vec<f64>,
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
}

fn format_err(path: &str, msg: impl Into<String>) -> OidError {
    OidError::Format { path: path.to_string(), msg: msg.into() }
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        format_err(&path, e.inner().to_string())
    })?;
    if s.version != SCHEMA_VERSION {
        return Err(format_err("version", format!("unsupported schema version {} (expected {SCHEMA_VERSION})", s.version)));
    }
    s.validate()?;
    Ok(s)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_scenario(&text)
}

pub fn write_scenario(s: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, s.to_json())?;
    Ok(())
}

impl Scenario {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("scenario serializes");
        text.push('\n');
        text
    }

    pub fn n_slots(&self) -> usize {
        self.profiles.slot_hours.len()
    }

    pub fn n_houses(&self) -> usize {
        self.houses.len()
    }

    pub fn house_nodes(&self) -> Vec<usize> {
        self.houses.iter().map(|h| h.node).collect()
    }

    /// Checks every invariant that is not enforced by the schema itself.
    pub fn validate(&self) -> Result<()> {
        let n = self.roles.len();
        let houses: Vec<usize> = (0..n).filter(|&k| self.roles[k] == Role::House).collect();
        if self.house_nodes() != houses {
            return model(format!("houses must list the House nodes {houses:?} in order"));
        }
        let inv = &self.inverter;
        if !(inv.derating > 0.0 && inv.derating <= 1.0) {
            return model(format!("derating must lie in (0, 1], got {}", inv.derating));
        }
        if !(inv.oversize >= 0.0) || !(inv.min_pf > 0.0 && inv.min_pf <= 1.0) || !(self.load_pf > 0.0 && self.load_pf <= 1.0) {
            return model("oversize must be ≥ 0 and power factors in (0, 1]");
        }
        self.voltage_limits.check()?;
        if !(self.base.v_base > 0.0 && self.base.s_base > 0.0) {
            return model("per-unit bases must be positive");
        }
        for (k, h) in self.houses.iter().enumerate() {
            if !(h.dc_kw >= 0.0) {
                return model(format!("house {k}: dc rating must be nonnegative"));
            }
        }
        for l in &self.lines {
            if !(l.length_m > 0.0) || !l.r_ohm_per_km.is_finite() || !l.x_ohm_per_km.is_finite() {
                return model(format!("line ({}, {}): invalid length or impedance", l.from, l.to));
            }
        }
        let t = self.n_slots();
        let p = &self.profiles;
        if p.irradiance.len() != t || p.load_kw.len() != self.n_houses() || p.load_kw.iter().any(|s| s.len() != t) {
            return model("load and irradiance series must share the slot index");
        }
        if p.irradiance.iter().any(|&g| !(0.0..=1.0).contains(&g)) || p.load_kw.iter().flatten().any(|&w| !(w >= 0.0)) {
            return model("irradiance must lie in [0, 1] and loads must be nonnegative");
        }
        self.cost_spec()?;
        let a = &self.admm;
        if !(a.kappa > 0.0 && a.epsilon > 0.0 && a.max_iters > 0) {
            return model("admm needs kappa > 0, epsilon > 0, max_iters > 0");
        }
        // builds and checks connectivity, radiality and roles
        self.feeder_at(0)?;
        Ok(())
    }

    pub fn limits(&self) -> VoltageLimits {
        self.voltage_limits
    }

    pub fn cost_spec(&self) -> Result<CostSpec> {
        let n = self.n_houses();
        let expand = |v: &[f64], name: &str| -> Result<Vec<f64>> {
            match v.len() {
                1 => Ok(vec![v[0]; n]),
                m if m == n => Ok(v.to_vec()),
                m => model(format!("cost.{name} has {m} entries; expected 1 or {n}")),
            }
        };
        let spec = CostSpec {
            loss_weight: self.cost.loss_weight,
            lambda: self.cost.lambda,
            a: expand(&self.cost.a, "a")?,
            b: expand(&self.cost.b, "b")?,
        };
        spec.check(n)?;
        Ok(spec)
    }

    /// Inverter rating `S = (1 + oversize)·dc·derating / S_base`.
    pub fn rating_pu(&self, k: usize) -> f64 {
        (1.0 + self.inverter.oversize) * self.houses[k].dc_kw * 1e3 * self.inverter.derating / self.base.s_base
    }

    pub fn time_slice(&self, slot: usize) -> Result<TimeSlice> {
        if slot >= self.n_slots() {
            return model(format!("slot {slot} out of range (scenario has {} slots)", self.n_slots()));
        }
        let g = self.profiles.irradiance[slot];
        let tan_load = self.load_pf.acos().tan();
        let p_av = self
            .houses
            .iter()
            .map(|h| self.base.watts_to_pu(h.dc_kw * 1e3 * self.inverter.derating * g))
            .collect();
        let p_load: Vec<f64> = self.profiles.load_kw.iter().map(|s| self.base.watts_to_pu(s[slot] * 1e3)).collect();
        let q_load = p_load.iter().map(|p| p * tan_load).collect();
        Ok(TimeSlice { slot, hour: self.profiles.slot_hours[slot], p_av, p_load, q_load })
    }

    pub fn lines_pu(&self) -> Vec<Line> {
        self.lines
            .iter()
            .map(|l| {
                let km = l.length_m / 1e3;
                let z = self.base.ohm_to_pu(C64::new(l.r_ohm_per_km * km, l.x_ohm_per_km * km));
                let b_half = l.b_us_per_km * 1e-6 * km * self.base.z_base() / 2.0;
                Line { m: l.from, n: l.to, y_series: C64::new(1.0, 0.0) / z, y_shunt: C64::new(0.0, b_half) }
            })
            .collect()
    }

    /// The feeder with inverter and load data of slot `slot`.
    pub fn feeder_at(&self, slot: usize) -> Result<FeederModel> {
        let ts = self.time_slice(slot)?;
        let theta = self.inverter.min_pf.acos();
        let mut k = 0;
        let nodes = self
            .roles
            .iter()
            .enumerate()
            .map(|(id, &role)| {
                let house = (role == Role::House).then(|| {
                    let payload = HousePayload {
                        inverter: InverterSpec { s: self.rating_pu(k), p_av: ts.p_av[k], theta },
                        load: HouseLoad { p_load: ts.p_load[k], q_load: ts.q_load[k] },
                    };
                    k += 1;
                    payload
                });
                Node { id, role, house }
            })
            .collect();
        FeederModel::new(nodes, self.lines_pu())
    }

    /// Slot whose hour is closest to `hour`.
    pub fn slot_at_hour(&self, hour: f64) -> usize {
        let h = &self.profiles.slot_hours;
        (0..h.len()).min_by(|&a, &b| (h[a] - hour).abs().total_cmp(&(h[b] - hour).abs())).unwrap_or(0)
    }

    /// Profile table `slot,house,p_av_kw,p_load_kw,q_load_kvar` (house = node id).
    pub fn profile_csv(&self) -> Result<String> {
        let mut out = String::from("slot,house,p_av_kw,p_load_kw,q_load_kvar\n");
        let kw = self.base.s_base / 1e3;
        for slot in 0..self.n_slots() {
            let ts = self.time_slice(slot)?;
            for (k, h) in self.houses.iter().enumerate() {
                writeln!(
                    out,
                    "{slot},{},{},{},{}",
                    h.node,
                    fmt_float(ts.p_av[k] * kw),
                    fmt_float(ts.p_load[k] * kw),
                    fmt_float(ts.q_load[k] * kw)
                )
                .expect("writing to a String");
            }
        }
        Ok(out)
    }
}

/// Nine significant digits, scientific notation.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

/// Raised-cosine clear-sky day: zero outside `[sunrise, sunset]`, `peak` at the midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearSky {
    pub sunrise: f64,
    pub sunset: f64,
    pub peak: f64,
}

impl Default for ClearSky {
    fn default() -> Self {
        Self { sunrise: 6.0, sunset: 20.0, peak: 1.0 }
    }
}

impl ClearSky {
    pub fn shape(&self, hour: f64) -> f64 {
        if hour <= self.sunrise || hour >= self.sunset {
            return 0.0;
        }
        let phase = (hour - self.sunrise) / (self.sunset - self.sunrise);
        self.peak * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * phase).cos())
    }
}

/// Smooth evening-peaking residential demand in kW: 1 kW at 07:00, 2 kW at 19:00.
pub fn base_load_kw(hour: f64) -> f64 {
    1.5 + 0.5 * (2.0 * std::f64::consts::PI * (hour - 19.0) / 24.0).cos()
}

/// Synthetic load and irradiance series for hourly slots `0..24`.
pub fn generate_profiles(seed: u64, n_houses: usize, base_load: &[f64], sigma_w: f64, sky: &ClearSky) -> Profiles {
    assert!(sigma_w >= 0.0, "sigma must be nonnegative");
    let slot_hours: Vec<f64> = (0..base_load.len()).map(|t| t as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma_w / 1e3).expect("finite sigma");
    let load_kw = (0..n_houses)
        .map(|_| {
            base_load
                .iter()
                .map(|&b| if sigma_w == 0.0 { b } else { (b + noise.sample(&mut rng)).max(0.0) })
                .collect()
        })
        .collect();
    let irradiance = slot_hours.iter().map(|&h| sky.shape(h)).collect();
    Profiles { slot_hours, irradiance, load_kw }
}

/// The 19-node residential feeder: poles 2, 5, …, 17 on a 50 m chain from the
/// transformer, each pole feeding the two neighbouring house nodes over 20 m drops.
pub fn fig1_scenario(seed: u64, lambda: f64) -> Scenario {
    let n = 19;
    let poles = [2usize, 5, 8, 11, 14, 17];
    let roles: Vec<Role> = (0..n)
        .map(|k| if k == 0 { Role::Slack } else if poles.contains(&k) { Role::Pole } else { Role::House })
        .collect();
    let conductor = |from, to, length_m| LineSpec { from, to, length_m, r_ohm_per_km: 0.55, x_ohm_per_km: 0.35, b_us_per_km: 0.0 };
    let mut lines = Vec::new();
    let mut prev = 0;
    for &p in &poles {
        lines.push(conductor(prev, p, 50.0));
        lines.push(conductor(p, p - 1, 20.0));
        lines.push(conductor(p, p + 1, 20.0));
        prev = p;
    }
    // H1..H12 in node order
    let dc = [5.52, 5.70, 8.0, 8.0, 8.0, 5.70, 8.0, 5.70, 5.52, 5.52, 5.70, 8.0];
    let houses: Vec<HouseSpec> = (0..n)
        .filter(|&k| roles[k] == Role::House)
        .zip(dc)
        .map(|(node, dc_kw)| HouseSpec { node, dc_kw })
        .collect();
    let base: Vec<f64> = (0..24).map(|t| base_load_kw(t as f64)).collect();
    let profiles = generate_profiles(seed, houses.len(), &base, 200.0, &ClearSky::default());
    Scenario {
        version: SCHEMA_VERSION,
        name: "fig1".into(),
        description: "19-node residential LV feeder with 12 rooftop PV systems; 0.55+j0.35 ohm/km conductor, \
                      50 m pole spans, 20 m drops, zero shunt; synthetic clear-sky irradiance and loads"
            .into(),
        base: PerUnitBase { v_base: 240.0, s_base: 10_000.0 },
        roles,
        lines,
        houses,
        inverter: InverterRules { derating: 0.77, oversize: 0.1, min_pf: 0.85 },
        load_pf: 0.9,
        voltage_limits: VoltageLimits { vmin: 0.917, vmax: 1.042 },
        cost: CostConfig { loss_weight: 1.0, lambda, a: vec![0.0], b: vec![0.1] },
        admm: AdmmSettings::default(),
        partition: Some(vec![(1..=9).collect(), (10..=18).collect()]),
        profiles,
    }
}
