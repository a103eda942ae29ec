//! Feeder data model: buses, branches, DER fleet and the sectioned text format
//! used to store them.
//!
//! All quantities inside a [`NetworkModel`] are per-unit on `s_base_kva` and the
//! impedance base derived from `v_base_kv`. The file format carries physical
//! units (kW, kvar, ohm) and is converted on load.

use std::collections::VecDeque;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUNDLED_MODIFIED: &str = include_str!("../data/case33_modified.feeder");
const BUNDLED_BASE: &str = include_str!("../data/case33_base.feeder");

/// Index of a bus; bus 0 is the substation (slack) bus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BusId(pub usize);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bus {}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pq,
    Pv,
}

impl BusKind {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "slack" | "ref" => Some(BusKind::Slack),
            "pq" => Some(BusKind::Pq),
            "pv" => Some(BusKind::Pv),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            BusKind::Slack => "slack",
            BusKind::Pq => "pq",
            BusKind::Pv => "pv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    /// Nominal active load (p.u.).
    pub load_p: f64,
    /// Nominal reactive load (p.u.); may be negative for shunt support.
    pub load_q: f64,
    /// Voltage magnitude setpoint (p.u.), required for slack and PV buses.
    pub v_setpoint: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    /// Series resistance (p.u.).
    pub r: f64,
    /// Series reactance (p.u.).
    pub x: f64,
}

/// A DER and its regulation band. Powers are per-unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerSpec {
    pub bus: BusId,
    pub capacity: f64,
    /// Upper regulation bound (≥ 0).
    pub reg_up: f64,
    /// Lower regulation bound, stored signed (≤ 0).
    pub reg_down: f64,
    /// Nominal output `P^{g0}`.
    pub nominal_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub ders: Vec<DerSpec>,
    pub s_base_kva: f64,
    pub v_base_kv: f64,
}

/// One broken invariant, naming the entity at fault.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.message)
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cannot read feeder file {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid feeder: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl NetworkModel {
    /// Baran-Wu 33-bus feeder with the DER fleet and voltage control used
    /// for the regulation studies.
    pub fn baran_wu_33() -> Self {
        parse_network(BUNDLED_MODIFIED).expect("bundled feeder is valid")
    }

    /// Baran-Wu 33-bus feeder as published: no DERs, no PV buses.
    pub fn baran_wu_33_base() -> Self {
        parse_network(BUNDLED_BASE).expect("bundled feeder is valid")
    }

    /// Number of non-slack buses.
    pub fn n(&self) -> usize {
        self.buses.len().saturating_sub(1)
    }

    pub fn z_base_ohm(&self) -> f64 {
        self.v_base_kv * self.v_base_kv * 1000.0 / self.s_base_kva
    }

    pub fn slack_voltage(&self) -> f64 {
        self.buses
            .first()
            .and_then(|b| b.v_setpoint)
            .unwrap_or(1.0)
    }

    pub fn pv_buses(&self) -> impl Iterator<Item = &Bus> {
        self.buses.iter().filter(|b| b.kind == BusKind::Pv)
    }

    /// Nominal active loads of the non-slack buses, in bus order 1..=N.
    pub fn nominal_load_p(&self) -> Vec<f64> {
        self.buses.iter().skip(1).map(|b| b.load_p).collect()
    }

    pub fn nominal_load_q(&self) -> Vec<f64> {
        self.buses.iter().skip(1).map(|b| b.load_q).collect()
    }

    /// Nominal DER outputs spread over the N non-slack positions.
    pub fn nominal_generation(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.n()];
        for d in &self.ders {
            g[d.bus.0 - 1] += d.nominal_p;
        }
        g
    }

    /// Lower and upper regulation bounds over the N non-slack positions;
    /// zero where no DER is connected.
    pub fn regulation_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![0.0; self.n()];
        let mut hi = vec![0.0; self.n()];
        for d in &self.ders {
            lo[d.bus.0 - 1] += d.reg_down;
            hi[d.bus.0 - 1] += d.reg_up;
        }
        (lo, hi)
    }

    /// Sum of upward regulation capacity over the fleet (p.u.).
    pub fn fleet_regulation_capacity(&self) -> f64 {
        self.ders.iter().map(|d| d.reg_up).sum()
    }

    /// Copy of the model with every PV bus demoted to PQ.
    pub fn without_voltage_control(&self) -> Self {
        let mut m = self.clone();
        for b in &mut m.buses {
            if b.kind == BusKind::Pv {
                b.kind = BusKind::Pq;
                b.v_setpoint = None;
            }
        }
        m
    }

    /// Writes the model back to the feeder text format, in physical units.
    pub fn to_feeder_string(&self) -> String {
        let s = self.s_base_kva;
        let z = self.z_base_ohm();
        let mut out = String::new();
        let _ = writeln!(out, "Sbase_kVA = {}", self.s_base_kva);
        let _ = writeln!(out, "Vbase_kV = {}", self.v_base_kv);
        let _ = writeln!(out, "\n[buses]\nid,kind,Pd_kW,Qd_kvar,Vset_pu");
        for b in &self.buses {
            let v = b.v_setpoint.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                b.id.0,
                b.kind.as_str(),
                b.load_p * s,
                b.load_q * s,
                v
            );
        }
        let _ = writeln!(out, "\n[branches]\nfrom,to,R_ohm,X_ohm");
        for br in &self.branches {
            let _ = writeln!(out, "{},{},{},{}", br.from.0, br.to.0, br.r * z, br.x * z);
        }
        let _ = writeln!(out, "\n[ders]\nbus,capacity_kW,reg_up_kW,reg_down_kW,Pg0_kW");
        for d in &self.ders {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                d.bus.0,
                d.capacity * s,
                d.reg_up * s,
                d.reg_down * s,
                d.nominal_p * s
            );
        }
        out
    }
}

/// Reads and validates a feeder file.
pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkModel, NetworkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_network(&text)
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Header,
    Buses,
    Branches,
    Ders,
}

/// Parses feeder text, converts to per-unit and validates.
pub fn parse_network(text: &str) -> Result<NetworkModel, NetworkError> {
    let mut section = Section::Header;
    let mut expect_columns = false;
    let mut s_base = None;
    let mut v_base = None;
    // Raw rows in physical units, converted once the bases are known.
    let mut buses: Vec<(usize, BusKind, f64, f64, Option<f64>)> = Vec::new();
    let mut branches: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut ders: Vec<(usize, f64, f64, f64, f64)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |message: String| NetworkError::Parse {
            line: line_no,
            message,
        };
        if line.starts_with('[') {
            section = match line.to_ascii_lowercase().as_str() {
                "[buses]" => Section::Buses,
                "[branches]" => Section::Branches,
                "[ders]" => Section::Ders,
                other => return Err(perr(format!("unknown section {other}"))),
            };
            expect_columns = true;
            continue;
        }
        if section == Section::Header {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected `key = value`, got `{line}`")))?;
            let value: f64 = parse_num(value).map_err(perr)?;
            match key.trim() {
                "Sbase_kVA" => s_base = Some(value),
                "Vbase_kV" => v_base = Some(value),
                other => return Err(perr(format!("unknown header key `{other}`"))),
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if expect_columns {
            expect_columns = false;
            // Column header row.
            if cols.first().is_some_and(|c| c.parse::<f64>().is_err()) {
                continue;
            }
        }
        match section {
            Section::Buses => {
                if cols.len() != 5 && cols.len() != 4 {
                    return Err(perr(format!("bus row needs 5 columns, got {}", cols.len())));
                }
                let id = parse_index(cols[0]).map_err(perr)?;
                let kind = BusKind::parse(cols[1])
                    .ok_or_else(|| perr(format!("unknown bus kind `{}`", cols[1])))?;
                let pd = parse_num(cols[2]).map_err(perr)?;
                let qd = parse_num(cols[3]).map_err(perr)?;
                let vset = match cols.get(4) {
                    Some(v) if !v.is_empty() => Some(parse_num(v).map_err(perr)?),
                    _ => None,
                };
                buses.push((id, kind, pd, qd, vset));
            }
            Section::Branches => {
                if cols.len() != 4 {
                    return Err(perr(format!("branch row needs 4 columns, got {}", cols.len())));
                }
                branches.push((
                    parse_index(cols[0]).map_err(perr)?,
                    parse_index(cols[1]).map_err(perr)?,
                    parse_num(cols[2]).map_err(perr)?,
                    parse_num(cols[3]).map_err(perr)?,
                ));
            }
            Section::Ders => {
                if cols.len() != 5 {
                    return Err(perr(format!("der row needs 5 columns, got {}", cols.len())));
                }
                ders.push((
                    parse_index(cols[0]).map_err(perr)?,
                    parse_num(cols[1]).map_err(perr)?,
                    parse_num(cols[2]).map_err(perr)?,
                    parse_num(cols[3]).map_err(perr)?,
                    parse_num(cols[4]).map_err(perr)?,
                ));
            }
            Section::Header => unreachable!(),
        }
    }

    let missing = |key: &str| NetworkError::Parse {
        line: 0,
        message: format!("missing header key `{key}`"),
    };
    let s_base = s_base.ok_or_else(|| missing("Sbase_kVA"))?;
    let v_base = v_base.ok_or_else(|| missing("Vbase_kV"))?;
    if !(s_base > 0.0 && v_base > 0.0) {
        return Err(NetworkError::Parse {
            line: 0,
            message: "bases must be positive".into(),
        });
    }
    let z_base = v_base * v_base * 1000.0 / s_base;

    buses.sort_by_key(|b| b.0);
    let model = NetworkModel {
        buses: buses
            .into_iter()
            .map(|(id, kind, pd, qd, v)| Bus {
                id: BusId(id),
                kind,
                load_p: pd / s_base,
                load_q: qd / s_base,
                v_setpoint: v,
            })
            .collect(),
        branches: branches
            .into_iter()
            .map(|(f, t, r, x)| Branch {
                from: BusId(f),
                to: BusId(t),
                r: r / z_base,
                x: x / z_base,
            })
            .collect(),
        ders: ders
            .into_iter()
            .map(|(bus, cap, up, down, pg0)| DerSpec {
                bus: BusId(bus),
                capacity: cap / s_base,
                reg_up: up / s_base,
                reg_down: down / s_base,
                nominal_p: pg0 / s_base,
            })
            .collect(),
        s_base_kva: s_base,
        v_base_kv: v_base,
    };

    let violations = validate(&model);
    if violations.is_empty() {
        Ok(model)
    } else {
        Err(NetworkError::Invalid(violations))
    }
}

fn parse_num(s: &str) -> Result<f64, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("`{}` is not a number", s.trim()))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{}` is not finite", s.trim()))
    }
}

fn parse_index(s: &str) -> Result<usize, String> {
    s.trim()
        .parse()
        .map_err(|_| format!("`{}` is not a bus index", s.trim()))
}

/// Checks every model invariant. An empty list means the model is valid.
pub fn validate(model: &NetworkModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |entity: String, message: &str| {
        out.push(Violation {
            entity,
            message: message.to_string(),
        })
    };
    let nb = model.buses.len();

    if nb == 0 {
        push("network".into(), "no buses");
        return out;
    }
    for (pos, b) in model.buses.iter().enumerate() {
        if b.id.0 != pos {
            push(b.id.to_string(), "bus ids must be unique and contiguous from 0");
        }
    }
    let mut seen_slack = false;
    for b in &model.buses {
        match b.kind {
            BusKind::Slack => {
                if seen_slack {
                    push(b.id.to_string(), "second slack bus");
                } else if b.id.0 != 0 {
                    push(b.id.to_string(), "slack bus must be bus 0");
                }
                seen_slack = true;
            }
            BusKind::Pv => {
                if !b.v_setpoint.is_some_and(|v| v > 0.0) {
                    push(b.id.to_string(), "PV bus needs a positive voltage setpoint");
                }
            }
            BusKind::Pq => {}
        }
        if b.kind == BusKind::Slack && b.v_setpoint.is_some_and(|v| v <= 0.0) {
            push(b.id.to_string(), "slack voltage setpoint must be positive");
        }
        if !(b.load_p >= 0.0) {
            push(b.id.to_string(), "active load must be non-negative");
        }
        if !b.load_q.is_finite() {
            push(b.id.to_string(), "reactive load must be finite");
        }
    }
    if model.buses[0].kind != BusKind::Slack {
        push(BusId(0).to_string(), "bus 0 must be the slack bus");
    }

    let mut adjacency = vec![Vec::new(); nb];
    for (k, br) in model.branches.iter().enumerate() {
        let name = format!("branch {k} ({}-{})", br.from.0, br.to.0);
        if br.from.0 >= nb || br.to.0 >= nb {
            push(name, "references a nonexistent bus");
            continue;
        }
        if br.from == br.to {
            push(name, "connects a bus to itself");
            continue;
        }
        if !(br.r >= 0.0) || !br.x.is_finite() {
            push(name.clone(), "resistance must be non-negative and reactance finite");
        }
        if br.r == 0.0 && br.x == 0.0 {
            push(name, "zero impedance");
        }
        adjacency[br.from.0].push(br.to.0);
        adjacency[br.to.0].push(br.from.0);
    }
    let mut reached = vec![false; nb];
    let mut queue = VecDeque::from([0usize]);
    reached[0] = true;
    while let Some(u) = queue.pop_front() {
        for &w in &adjacency[u] {
            if !reached[w] {
                reached[w] = true;
                queue.push_back(w);
            }
        }
    }
    for (i, r) in reached.iter().enumerate() {
        if !r {
            push(BusId(i).to_string(), "not connected to the substation");
        }
    }

    let mut der_buses = Vec::new();
    for (k, d) in model.ders.iter().enumerate() {
        let name = format!("DER {k} at {}", d.bus);
        if d.bus.0 >= nb {
            push(name, "on a nonexistent bus");
            continue;
        }
        if d.bus.0 == 0 {
            push(name.clone(), "DER on the slack bus");
        }
        if der_buses.contains(&d.bus) {
            push(name.clone(), "more than one DER on the bus");
        }
        der_buses.push(d.bus);
        if !(d.reg_down <= 0.0) {
            push(name.clone(), "reg_down must be <= 0");
        }
        if !(d.reg_up >= 0.0) {
            push(name.clone(), "reg_up must be >= 0");
        }
        if !(d.reg_up <= d.capacity) {
            push(name.clone(), "reg_up exceeds capacity");
        }
        if !d.nominal_p.is_finite() {
            push(name, "nominal output must be finite");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = "Sbase_kVA = 1000\nVbase_kV = 10\n[buses]\nid,kind,Pd_kW,Qd_kvar,Vset_pu\n\
        0,slack,0,0,1.0\n1,pq,100,50,\n[branches]\nfrom,to,R_ohm,X_ohm\n0,1,1,1\n[ders]\n\
        bus,capacity_kW,reg_up_kW,reg_down_kW,Pg0_kW\n";

    #[test]
    fn bundled_feeder_matches_fleet() {
        let m = NetworkModel::baran_wu_33();
        assert_eq!(m.n(), 32);
        assert!(validate(&m).is_empty());
        let caps: Vec<f64> = m.ders.iter().map(|d| d.capacity * m.s_base_kva).collect();
        assert_eq!(caps, vec![2300.0, 1500.0, 1200.0]);
        let buses: Vec<usize> = m.ders.iter().map(|d| d.bus.0).collect();
        assert_eq!(buses, vec![11, 24, 32]);
        for d in &m.ders {
            assert!((d.reg_up - 0.1 * d.capacity).abs() < 1e-12);
            assert!((d.reg_down + 0.1 * d.capacity).abs() < 1e-12);
            assert_eq!(d.nominal_p, 0.0);
        }
        let pv: Vec<usize> = m.pv_buses().map(|b| b.id.0).collect();
        assert_eq!(pv, vec![11]);
        assert_eq!(m.buses[11].v_setpoint, Some(1.0));
        assert_eq!(m.slack_voltage(), 1.0);
    }

    #[test]
    fn base_feeder_has_no_control() {
        let m = NetworkModel::baran_wu_33_base();
        assert_eq!(m.n(), 32);
        assert!(m.ders.is_empty());
        assert_eq!(m.pv_buses().count(), 0);
        let total: f64 = m.nominal_load_p().iter().sum::<f64>() * m.s_base_kva;
        assert!((total - 3715.0).abs() < 1e-9);
    }

    #[test]
    fn two_bus_file() {
        let m = parse_network(TWO_BUS).unwrap();
        assert_eq!(m.n(), 1);
        assert!((m.branches[0].r - 1.0 / 100.0).abs() < 1e-15);
        assert!((m.buses[1].load_p - 0.1).abs() < 1e-15);
    }

    #[test]
    fn dangling_branch_is_rejected() {
        let mut text = NetworkModel::baran_wu_33().to_feeder_string();
        text = text.replace("[ders]", "31,99,0.1,0.1\n[ders]");
        // the new row lands at the end of the branch section
        match parse_network(&text) {
            Err(NetworkError::Invalid(v)) => {
                assert!(v.iter().any(|x| x.entity.contains("31-99")), "{v:?}")
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_is_a_parse_error() {
        let text = TWO_BUS.replace("1,pq,100,50,", "1,pq,abc,50,");
        assert!(matches!(
            parse_network(&text),
            Err(NetworkError::Parse { line: 6, .. })
        ));
    }

    #[test]
    fn second_slack_is_named() {
        let mut m = NetworkModel::baran_wu_33();
        m.buses[7].kind = BusKind::Slack;
        let v = validate(&m);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].entity, "bus 7");
    }

    #[test]
    fn positive_reg_down_is_named() {
        let mut m = NetworkModel::baran_wu_33();
        m.ders[1].reg_down = 0.01;
        let v = validate(&m);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].entity.starts_with("DER 1"));
    }

    #[test]
    fn disconnected_and_missing_der_bus() {
        let mut m = NetworkModel::baran_wu_33();
        m.branches.pop();
        m.ders.push(DerSpec {
            bus: BusId(40),
            capacity: 1.0,
            reg_up: 0.1,
            reg_down: -0.1,
            nominal_p: 0.0,
        });
        let v = validate(&m);
        assert!(v.iter().any(|x| x.entity == "bus 32"));
        assert!(v.iter().any(|x| x.entity.contains("bus 40")));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_network("/nonexistent/feeder.txt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/feeder.txt"));
    }

    #[test]
    fn per_unit_consistency() {
        let m = NetworkModel::baran_wu_33();
        // label 25 = index 24 carries 420 kW
        let kw = m.buses[24].load_p * m.s_base_kva;
        assert!((kw - 420.0).abs() <= 1e-9 * 420.0);
    }
}
