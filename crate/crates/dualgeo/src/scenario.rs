//! Scenario files: the JSON schema the CLI consumes, semantic validation with
//! JSON-pointer error locations, the check orchestrator, and the built-in
//! example library.

use crate::algebroid::{check_algebroid, AlgebroidSpec, Morphism};
use crate::connection::{check_dlc_law, check_nlc_law, ChartTransition, Dlc, NonlinearConnection};
use crate::expr::{parse_expr, Dims, Expr};
use crate::field::{const_field, Field};
use crate::hamilton::{
    check_homogeneity, check_regularity, levi_civita_normal, torsion_family, torsion_recover,
    FundamentalKind, HamiltonFunction, TorsionPrescription,
};
use crate::jet::Point;
use crate::metric::{
    check_compatibility, classify, metrizable_berwald, metrizable_berwald_riemannian,
    metrizable_deformation, metrizable_family, metrizable_from, obata, BlockClass,
    DeformationTensors, ObataOperators, PseudoMetric, COND_WARN, DET_FLOOR,
};
use crate::report::{CheckReport, ResidualTracker};
use crate::sample::Sampler;
use crate::tangent::check_tangent_jacobi;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at `{path}`: {msg}")]
    Json { path: String, msg: String },
    #[error("schema error at {pointer}: {msg}")]
    Schema { pointer: String, msg: String },
    #[error("expression error at {pointer}: {source}")]
    Expr {
        pointer: String,
        #[source]
        source: crate::expr::ExprError,
    },
    #[error("unknown example `{0}`")]
    UnknownExample(String),
}

/// The exact check vocabulary accepted in scenario files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckName {
    AlgebroidAxioms,
    TangentJacobi,
    NlcLaw,
    DlcLaw,
    Compatibility,
    Classify,
    BuildMetrizableFrom,
    BuildMetrizableBerwald,
    BuildObataFamily,
    BuildDeformation,
    Regularity,
    Homogeneity,
    BuildLeviCivita,
    TorsionRoundtrip,
}

impl CheckName {
    pub const ALL: [(&'static str, CheckName); 14] = [
        ("algebroid-axioms", CheckName::AlgebroidAxioms),
        ("tangent-jacobi", CheckName::TangentJacobi),
        ("nlc-law", CheckName::NlcLaw),
        ("dlc-law", CheckName::DlcLaw),
        ("compatibility", CheckName::Compatibility),
        ("classify", CheckName::Classify),
        ("build:metrizable-from", CheckName::BuildMetrizableFrom),
        ("build:metrizable-berwald", CheckName::BuildMetrizableBerwald),
        ("build:obata-family", CheckName::BuildObataFamily),
        ("build:deformation", CheckName::BuildDeformation),
        ("regularity", CheckName::Regularity),
        ("homogeneity", CheckName::Homogeneity),
        ("build:levi-civita", CheckName::BuildLeviCivita),
        ("torsion-roundtrip", CheckName::TorsionRoundtrip),
    ];

    pub fn parse(s: &str) -> Option<CheckName> {
        Self::ALL.iter().find(|(n, _)| *n == s).map(|(_, c)| *c)
    }

    pub fn as_str(&self) -> &'static str {
        Self::ALL.iter().find(|(_, c)| c == self).unwrap().0
    }

    fn needs_metric(&self) -> bool {
        matches!(
            self,
            CheckName::Compatibility
                | CheckName::Classify
                | CheckName::BuildMetrizableFrom
                | CheckName::BuildMetrizableBerwald
                | CheckName::BuildObataFamily
                | CheckName::BuildDeformation
                | CheckName::BuildLeviCivita
                | CheckName::TorsionRoundtrip
        )
    }

    fn needs_equal_ranks(&self) -> bool {
        matches!(self, CheckName::BuildLeviCivita | CheckName::TorsionRoundtrip)
    }
}

/// The metric-generating block of a scenario.
#[derive(Clone)]
pub enum MetricSource {
    Metric(PseudoMetric),
    Fundamental(HamiltonFunction),
}

/// A fully validated scenario, ready to run.
pub struct Scenario {
    pub origin: String,
    pub spec: AlgebroidSpec,
    pub conn: NonlinearConnection,
    pub dlc0: Option<Dlc>,
    pub metric: Option<MetricSource>,
    pub transitions: Vec<ChartTransition>,
    pub checks: Vec<CheckName>,
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
    pub hessian_half: bool,
}

fn default_samples() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-9
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    dims: RawDims,
    algebroid: RawAlgebroid,
    #[serde(default)]
    connection: Option<Vec<Vec<String>>>,
    #[serde(default)]
    dlc0: Option<RawDlc>,
    #[serde(default)]
    metric: Option<RawMetric>,
    #[serde(default)]
    hamiltonian: Option<String>,
    #[serde(default)]
    cartan: Option<String>,
    #[serde(default)]
    transitions: Vec<RawTransition>,
    checks: Vec<String>,
    #[serde(default = "default_samples")]
    samples: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_tol")]
    tol: f64,
    #[serde(default)]
    hessian_half: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDims {
    m: usize,
    p_rank: usize,
    r_rank: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgebroid {
    rho: Vec<Vec<String>>,
    l: Vec<Vec<Vec<String>>>,
    #[serde(default)]
    h_map: Option<RawMorphism>,
    #[serde(default)]
    eta_map: Option<RawMorphism>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawMorphism {
    Name(String),
    Components(Vec<String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetric {
    g_h: Vec<Vec<String>>,
    g_v: Vec<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDlc {
    hh: Vec<Vec<Vec<String>>>,
    hv: Vec<Vec<Vec<String>>>,
    vh: Vec<Vec<Vec<String>>>,
    vv: Vec<Vec<Vec<String>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransition {
    lambda: Vec<Vec<String>>,
    m_mat: Vec<Vec<String>>,
    base_jacobian: Vec<Vec<String>>,
}

fn schema_err(pointer: impl Into<String>, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema {
        pointer: pointer.into(),
        msg: msg.into(),
    }
}

fn parse_one(s: &str, dims: Dims, pointer: String) -> Result<Expr, ScenarioError> {
    parse_expr(s, dims).map_err(|source| ScenarioError::Expr { pointer, source })
}

fn parse_grid(
    grid: &[Vec<String>],
    rows: usize,
    cols: usize,
    dims: Dims,
    pointer: &str,
) -> Result<Vec<Expr>, ScenarioError> {
    if grid.len() != rows {
        return Err(schema_err(pointer, format!("expected {rows} rows, found {}", grid.len())));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for (i, row) in grid.iter().enumerate() {
        if row.len() != cols {
            return Err(schema_err(
                format!("{pointer}/{i}"),
                format!("expected {cols} entries, found {}", row.len()),
            ));
        }
        for (j, s) in row.iter().enumerate() {
            out.push(parse_one(s, dims, format!("{pointer}/{i}/{j}"))?);
        }
    }
    Ok(out)
}

fn parse_cube(
    cube: &[Vec<Vec<String>>],
    d0: usize,
    d1: usize,
    d2: usize,
    dims: Dims,
    pointer: &str,
) -> Result<Vec<Expr>, ScenarioError> {
    if cube.len() != d0 {
        return Err(schema_err(pointer, format!("expected {d0} blocks, found {}", cube.len())));
    }
    let mut out = Vec::with_capacity(d0 * d1 * d2);
    for (i, block) in cube.iter().enumerate() {
        if block.len() != d1 {
            return Err(schema_err(
                format!("{pointer}/{i}"),
                format!("expected {d1} rows, found {}", block.len()),
            ));
        }
        for (j, row) in block.iter().enumerate() {
            if row.len() != d2 {
                return Err(schema_err(
                    format!("{pointer}/{i}/{j}"),
                    format!("expected {d2} entries, found {}", row.len()),
                ));
            }
            for (k, s) in row.iter().enumerate() {
                out.push(parse_one(s, dims, format!("{pointer}/{i}/{j}/{k}"))?);
            }
        }
    }
    Ok(out)
}

fn parse_morphism(
    raw: &Option<RawMorphism>,
    m: usize,
    dims: Dims,
    pointer: &str,
) -> Result<Morphism, ScenarioError> {
    match raw {
        None => Ok(Morphism::Identity),
        Some(RawMorphism::Name(s)) if s == "identity" => Ok(Morphism::Identity),
        Some(RawMorphism::Name(s)) => Err(schema_err(
            pointer,
            format!("expected \"identity\" or an array of {m} expressions, found `{s}`"),
        )),
        Some(RawMorphism::Components(comps)) => {
            if comps.len() != m {
                return Err(schema_err(
                    pointer,
                    format!("expected {m} components, found {}", comps.len()),
                ));
            }
            let mut exprs = Vec::with_capacity(m);
            for (i, s) in comps.iter().enumerate() {
                let e = parse_one(s, dims, format!("{pointer}/{i}"))?;
                if !e.is_base_only() {
                    return Err(schema_err(
                        format!("{pointer}/{i}"),
                        "base morphism components must not reference momenta",
                    ));
                }
                exprs.push(e);
            }
            Ok(Morphism::Components(exprs))
        }
    }
}

/// Parse and validate a scenario from JSON text.
pub fn load_scenario_str(text: &str, origin: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawScenario =
        serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Json {
            path: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
    let (m, p, r) = (raw.dims.m, raw.dims.p_rank, raw.dims.r_rank);
    if m == 0 || p == 0 || r == 0 {
        return Err(schema_err("/dims", "dimensions must be positive"));
    }
    if m > 16 || p > 16 || r > 16 {
        return Err(schema_err("/dims", "dimensions above the engine bound of 16"));
    }
    if raw.samples == 0 {
        return Err(schema_err("/samples", "sample count must be positive"));
    }
    if raw.tol.is_nan() || raw.tol <= 0.0 {
        return Err(schema_err("/tol", "tolerance must be positive"));
    }
    let dims = Dims::new(m, r);
    let rho = parse_grid(&raw.algebroid.rho, p, m, dims, "/algebroid/rho")?;
    let l = parse_cube(&raw.algebroid.l, p, p, p, dims, "/algebroid/l")?;
    let h = parse_morphism(&raw.algebroid.h_map, m, dims, "/algebroid/h_map")?;
    let eta = parse_morphism(&raw.algebroid.eta_map, m, dims, "/algebroid/eta_map")?;
    let spec = AlgebroidSpec::new(m, p, r, rho, l, h, eta)
        .map_err(|e| schema_err("/algebroid", e.to_string()))?;

    let conn = match &raw.connection {
        None => NonlinearConnection::zero(r, p),
        Some(grid) => {
            let exprs = parse_grid(grid, r, p, dims, "/connection")?;
            NonlinearConnection::from_exprs(r, p, exprs)
        }
    };

    let dlc0 = match &raw.dlc0 {
        None => None,
        Some(rawd) => {
            let hh = parse_cube(&rawd.hh, p, p, p, dims, "/dlc0/hh")?;
            let hv = parse_cube(&rawd.hv, r, r, p, dims, "/dlc0/hv")?;
            let vh = parse_cube(&rawd.vh, p, p, r, dims, "/dlc0/vh")?;
            let vv = parse_cube(&rawd.vv, r, r, r, dims, "/dlc0/vv")?;
            Some(Dlc::from_exprs(p, r, hh, hv, vh, vv))
        }
    };

    let mut metric: Option<MetricSource> = None;
    let mut metric_count = 0;
    if let Some(rawm) = &raw.metric {
        metric_count += 1;
        let g_h = parse_grid(&rawm.g_h, p, p, dims, "/metric/g_h")?;
        let g_v = parse_grid(&rawm.g_v, r, r, dims, "/metric/g_v")?;
        let pm = PseudoMetric::from_exprs(p, r, g_h, g_v)
            .map_err(|e| schema_err("/metric", e.to_string()))?;
        metric = Some(MetricSource::Metric(pm));
    }
    if let Some(hs) = &raw.hamiltonian {
        metric_count += 1;
        let expr = parse_one(hs, dims, "/hamiltonian".into())?;
        let mut f = HamiltonFunction::hamilton(expr);
        f.hessian_half = raw.hessian_half;
        metric = Some(MetricSource::Fundamental(f));
    }
    if let Some(ks) = &raw.cartan {
        metric_count += 1;
        let expr = parse_one(ks, dims, "/cartan".into())?;
        let mut f = HamiltonFunction::cartan(expr);
        f.hessian_half = raw.hessian_half;
        metric = Some(MetricSource::Fundamental(f));
    }
    if metric_count > 1 {
        return Err(schema_err(
            "/metric",
            "at most one of metric, hamiltonian, cartan may be present",
        ));
    }

    let mut transitions = Vec::with_capacity(raw.transitions.len());
    for (i, t) in raw.transitions.iter().enumerate() {
        let base = format!("/transitions/{i}");
        let lambda = parse_grid(&t.lambda, p, p, dims, &format!("{base}/lambda"))?;
        let m_mat = parse_grid(&t.m_mat, r, r, dims, &format!("{base}/m_mat"))?;
        let base_jac = parse_grid(&t.base_jacobian, m, m, dims, &format!("{base}/base_jacobian"))?;
        let trans = ChartTransition::new(p, r, m, lambda, m_mat, base_jac)
            .map_err(|e| schema_err(base.clone(), e.to_string()))?;
        transitions.push(trans);
    }

    let mut checks = Vec::with_capacity(raw.checks.len());
    for (i, name) in raw.checks.iter().enumerate() {
        let check = CheckName::parse(name)
            .ok_or_else(|| schema_err(format!("/checks/{i}"), format!("unknown check `{name}`")))?;
        if check.needs_metric() && metric.is_none() {
            return Err(schema_err(
                format!("/checks/{i}"),
                format!("check `{name}` requires one of metric, hamiltonian, cartan"),
            ));
        }
        if check.needs_equal_ranks() && p != r {
            return Err(schema_err(
                format!("/checks/{i}"),
                format!("check `{name}` requires p_rank = r_rank"),
            ));
        }
        if matches!(check, CheckName::Regularity | CheckName::Homogeneity)
            && !matches!(metric, Some(MetricSource::Fundamental(_)))
        {
            return Err(schema_err(
                format!("/checks/{i}"),
                format!("check `{name}` requires a hamiltonian or cartan function"),
            ));
        }
        if matches!(check, CheckName::Homogeneity) {
            if let Some(MetricSource::Fundamental(f)) = &metric {
                if f.kind != FundamentalKind::Cartan {
                    return Err(schema_err(
                        format!("/checks/{i}"),
                        "homogeneity applies to cartan functions only",
                    ));
                }
            }
        }
        if matches!(check, CheckName::NlcLaw | CheckName::DlcLaw) && transitions.is_empty() {
            return Err(schema_err(
                format!("/checks/{i}"),
                format!("check `{name}` requires at least one transition"),
            ));
        }
        checks.push(check);
    }

    Ok(Scenario {
        origin: origin.to_string(),
        spec,
        conn,
        dlc0,
        metric,
        transitions,
        checks,
        samples: raw.samples,
        seed: raw.seed,
        tol: raw.tol,
        hessian_half: raw.hessian_half,
    })
}

/// Load a scenario from a file path.
pub fn load_scenario(path: &str) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_string(),
        source,
    })?;
    load_scenario_str(&text, path)
}

/// Sampled values of a constructed connection, for the dump file.
pub struct ConnectionDump {
    pub points: Vec<Point>,
    pub hh: Vec<Vec<f64>>,
    pub hv: Vec<Vec<f64>>,
    pub vh: Vec<Vec<f64>>,
    pub vv: Vec<Vec<f64>>,
}

pub struct RunOutcome {
    pub reports: Vec<CheckReport>,
    pub all_pass: bool,
    pub dumps: Vec<(String, ConnectionDump)>,
}

impl Scenario {
    /// The block metric the metric checks run against: either the declared
    /// one or the one induced by the fundamental function.
    pub fn effective_metric(&self) -> Option<PseudoMetric> {
        match &self.metric {
            None => None,
            Some(MetricSource::Metric(g)) => Some(g.clone()),
            Some(MetricSource::Fundamental(f)) => {
                Some(f.induced_metric(self.spec.m, self.spec.r_rank))
            }
        }
    }

    /// Fiber block fields used by the normal-connection checks.
    pub fn vertical_block(&self) -> Option<Vec<Field>> {
        match &self.metric {
            None => None,
            Some(MetricSource::Metric(g)) => Some(g.v_fields().to_vec()),
            Some(MetricSource::Fundamental(f)) => {
                Some(f.hessian_fields(self.spec.m, self.spec.r_rank))
            }
        }
    }
}

fn dump_connection(scenario: &Scenario, dlc: &Dlc) -> ConnectionDump {
    let mut sampler = Sampler::stream(scenario.spec.m, scenario.spec.r_rank, scenario.seed, "dump");
    let points = sampler.points(5);
    let mut dump = ConnectionDump {
        points: points.clone(),
        hh: Vec::new(),
        hv: Vec::new(),
        vh: Vec::new(),
        vv: Vec::new(),
    };
    for pt in &points {
        match dlc.values_at(pt) {
            Ok(v) => {
                dump.hh.push(v.hh);
                dump.hv.push(v.hv);
                dump.vh.push(v.vh);
                dump.vv.push(v.vv);
            }
            Err(_) => {
                dump.hh.push(Vec::new());
                dump.hv.push(Vec::new());
                dump.vh.push(Vec::new());
                dump.vv.push(Vec::new());
            }
        }
    }
    dump
}

/// Random constant deformation tensors drawn from a named sampler stream.
fn random_deformation(scenario: &Scenario) -> DeformationTensors {
    let (p, r) = (scenario.spec.p_rank, scenario.spec.r_rank);
    let mut s = Sampler::stream(
        scenario.spec.m,
        scenario.spec.r_rank,
        scenario.seed,
        "deformation-tensors",
    );
    let mut draw = |count: usize| -> Vec<Field> {
        (0..count).map(|_| const_field(s.uniform(-1.0, 1.0))).collect()
    };
    DeformationTensors {
        x_h: draw(p * p * p),
        x_v: draw(p * p * r),
        y_h: draw(r * r * p),
        y_v: draw(r * r * r),
    }
}

/// Random antisymmetric torsion prescription from a named sampler stream.
fn random_prescription(scenario: &Scenario) -> TorsionPrescription {
    let r = scenario.spec.r_rank;
    let mut s = Sampler::stream(
        scenario.spec.m,
        scenario.spec.r_rank,
        scenario.seed,
        "torsion-prescription",
    );
    let mut t = vec![0.0; r * r * r];
    let mut sk = vec![0.0; r * r * r];
    for a in 0..r {
        for b in 0..r {
            for c in b + 1..r {
                let v = s.uniform(-1.0, 1.0);
                t[(a * r + b) * r + c] = v;
                t[(a * r + c) * r + b] = -v;
            }
        }
    }
    for b in 0..r {
        for a in 0..r {
            for c in a + 1..r {
                let v = s.uniform(-1.0, 1.0);
                sk[(a * r + c) * r + b] = v;
                sk[(c * r + a) * r + b] = -v;
            }
        }
    }
    TorsionPrescription::from_fields(
        r,
        t.into_iter().map(const_field).collect(),
        sk.into_iter().map(const_field).collect(),
    )
}

fn build_check(
    scenario: &Scenario,
    name: CheckName,
    dlc: Dlc,
    g: &PseudoMetric,
    extra_notes: String,
) -> (CheckReport, Dlc) {
    let mut rep = check_compatibility(
        &scenario.spec,
        &scenario.conn,
        &dlc,
        g,
        scenario.samples,
        scenario.seed,
        scenario.tol,
    );
    rep.name = name.as_str().to_string();
    if !extra_notes.is_empty() {
        rep.notes = format!("{}; {}", rep.notes, extra_notes);
    }
    (rep, dlc)
}

fn run_check(scenario: &Scenario, check: CheckName, dumps: &mut Vec<(String, ConnectionDump)>) -> CheckReport {
    let spec = &scenario.spec;
    let (samples, seed, tol) = (scenario.samples, scenario.seed, scenario.tol);
    match check {
        CheckName::AlgebroidAxioms => check_algebroid(spec, samples, seed, tol),
        CheckName::TangentJacobi => check_tangent_jacobi(spec, samples, seed, tol),
        CheckName::NlcLaw => {
            let mut tracker = ResidualTracker::new();
            let mut notes = Vec::new();
            let mut used = 0;
            let mut pass = true;
            for (i, trans) in scenario.transitions.iter().enumerate() {
                let rep = check_nlc_law(spec, &scenario.conn, trans, samples, seed.wrapping_add(i as u64), tol);
                notes.push(format!("transition {i}: {:.3e}", rep.max_residual));
                let mut t = ResidualTracker::new();
                t.update(rep.max_residual, &rep.worst_point);
                tracker.merge(&t);
                used += rep.samples_used;
                pass &= rep.pass;
            }
            let mut rep = tracker.into_report("nlc-law", tol, used, notes.join("; "));
            rep.pass &= pass;
            rep
        }
        CheckName::DlcLaw => {
            let mut tracker = ResidualTracker::new();
            let mut notes = Vec::new();
            let mut used = 0;
            let mut pass = true;
            for (i, trans) in scenario.transitions.iter().enumerate() {
                let rep = check_dlc_law(spec, &scenario.conn, trans, samples, seed.wrapping_add(i as u64), tol);
                notes.push(format!("transition {i}: {:.3e}", rep.max_residual));
                let mut t = ResidualTracker::new();
                t.update(rep.max_residual, &rep.worst_point);
                tracker.merge(&t);
                used += rep.samples_used;
                pass &= rep.pass;
            }
            let mut rep = tracker.into_report("dlc-law", tol, used, notes.join("; "));
            rep.pass &= pass;
            rep
        }
        CheckName::Compatibility => {
            let g = scenario.effective_metric().expect("validated");
            let dlc = metrizable_berwald(spec, &scenario.conn, &g);
            let mut rep = check_compatibility(spec, &scenario.conn, &dlc, &g, samples, seed, tol);
            rep.notes = format!("Berwald-started canonical connection; {}", rep.notes);
            rep
        }
        CheckName::Classify => {
            let g = scenario.effective_metric().expect("validated");
            match classify(&g, spec.m, samples, seed, tol) {
                Err(e) => CheckReport::failed("classify", format!("evaluation failed: {e}")),
                Ok(c) => {
                    let sig = |s: Option<(usize, usize)>| match s {
                        Some((neg, pos)) => format!("({neg}-,{pos}+) constant over samples"),
                        None => "varies across samples".to_string(),
                    };
                    let mut notes = format!(
                        "frame block {} (|d/dp|={:.3e}, |d/dx|={:.3e}, signature {}); fiber block {} (|d/dp|={:.3e}, |d/dx|={:.3e}, signature {}); min |det| = {:.3e}",
                        c.h_block, c.p_deriv.0, c.x_deriv.0, sig(c.h_signature),
                        c.v_block, c.p_deriv.1, c.x_deriv.1, sig(c.v_signature),
                        c.min_abs_det,
                    );
                    if c.max_cond > COND_WARN {
                        notes.push_str(&format!("; warning: condition estimate {:.3e}", c.max_cond));
                    }
                    CheckReport {
                        name: "classify".into(),
                        pass: c.min_abs_det >= DET_FLOOR,
                        max_residual: 0.0,
                        worst_point: Point::new(Vec::new(), Vec::new()),
                        samples_used: samples,
                        notes,
                    }
                }
            }
        }
        CheckName::BuildMetrizableFrom => {
            let g = scenario.effective_metric().expect("validated");
            let dlc0 = scenario
                .dlc0
                .clone()
                .unwrap_or_else(|| Dlc::zero(spec.p_rank, spec.r_rank));
            let built = metrizable_from(spec, &scenario.conn, &dlc0, &g);
            let (rep, built) = build_check(scenario, check, built, &g, String::new());
            dumps.push((check.as_str().to_string(), dump_connection(scenario, &built)));
            rep
        }
        CheckName::BuildMetrizableBerwald => {
            let g = scenario.effective_metric().expect("validated");
            let built = metrizable_berwald(spec, &scenario.conn, &g);
            let mut extra = String::new();
            if let Ok(c) = classify(&g, spec.m, samples.min(25), seed, tol) {
                if c.h_block == BlockClass::Riemannian && c.v_block == BlockClass::Riemannian {
                    let closed = metrizable_berwald_riemannian(spec, &scenario.conn, &g);
                    let mut sampler = Sampler::stream(spec.m, spec.r_rank, seed, "berwald-riemannian");
                    let mut agree = 0.0f64;
                    for _ in 0..samples.min(50) {
                        let pt = sampler.next_point();
                        if let (Ok(a), Ok(b)) = (built.values_at(&pt), closed.values_at(&pt)) {
                            agree = agree.max(a.max_abs_diff(&b));
                        }
                    }
                    extra = format!("base-only blocks: closed form agreement {agree:.3e}");
                }
            }
            let (rep, built) = build_check(scenario, check, built, &g, extra);
            dumps.push((check.as_str().to_string(), dump_connection(scenario, &built)));
            rep
        }
        CheckName::BuildObataFamily => {
            let g = scenario.effective_metric().expect("validated");
            let d = random_deformation(scenario);
            let built = metrizable_family(spec, &scenario.conn, &g, &d);
            // Projector identities at a few points, reported alongside.
            let ops = obata(&g);
            let mut sampler = Sampler::stream(spec.m, spec.r_rank, seed, "obata-identities");
            let mut proj_res = 0.0f64;
            for _ in 0..3 {
                let pt = sampler.next_point();
                for (grid, star, n) in [
                    (&ops.o_h, &ops.o_star_h, spec.p_rank),
                    (&ops.o_v, &ops.o_star_v, spec.r_rank),
                ] {
                    let value = |fields: &Vec<Field>| -> Option<Vec<f64>> {
                        crate::field::values(fields, &pt).ok()
                    };
                    let (Some(o), Some(os)) = (value(grid), value(star)) else {
                        proj_res = f64::MAX;
                        continue;
                    };
                    let oo = ObataOperators::compose(&o, &o, n);
                    let oos = ObataOperators::compose(&o, &os, n);
                    for i in 0..o.len() {
                        proj_res = proj_res.max((oo[i] - o[i]).abs());
                        proj_res = proj_res.max(oos[i].abs());
                        let idx = (
                            i / (n * n * n),
                            (i / (n * n)) % n,
                            (i / n) % n,
                            i % n,
                        );
                        let ident = if idx.0 == idx.2 && idx.1 == idx.3 { 1.0 } else { 0.0 };
                        proj_res = proj_res.max((o[i] + os[i] - ident).abs());
                    }
                }
            }
            let extra = format!("random deformation tensors; projector identity residual {proj_res:.3e}");
            let (mut rep, built) = build_check(scenario, check, built, &g, extra);
            rep.pass &= proj_res < tol.max(1e-10);
            dumps.push((check.as_str().to_string(), dump_connection(scenario, &built)));
            rep
        }
        CheckName::BuildDeformation => {
            let g = scenario.effective_metric().expect("validated");
            let dlc0 = scenario
                .dlc0
                .clone()
                .unwrap_or_else(|| Dlc::zero(spec.p_rank, spec.r_rank));
            let built = metrizable_deformation(spec, &scenario.conn, &dlc0, &g);
            let (rep, built) = build_check(scenario, check, built, &g, String::new());
            dumps.push((check.as_str().to_string(), dump_connection(scenario, &built)));
            rep
        }
        CheckName::Regularity => {
            let Some(MetricSource::Fundamental(f)) = &scenario.metric else {
                return CheckReport::failed("regularity", "requires a fundamental function".into());
            };
            check_regularity(f, spec.m, spec.r_rank, samples, seed, tol)
        }
        CheckName::Homogeneity => {
            let Some(MetricSource::Fundamental(f)) = &scenario.metric else {
                return CheckReport::failed("homogeneity", "requires a cartan function".into());
            };
            check_homogeneity(f, spec.m, spec.r_rank, samples, seed, tol)
        }
        CheckName::BuildLeviCivita => {
            let g_v = scenario.vertical_block().expect("validated");
            let built = levi_civita_normal(spec, &scenario.conn, &g_v);
            let rec = torsion_recover(spec, &built);
            let mut sampler = Sampler::stream(spec.m, spec.r_rank, seed, "levi-civita");
            let mut tracker = ResidualTracker::new();
            let mut used = 0;
            let mut errors = 0;
            for _ in 0..samples {
                let pt = sampler.next_point();
                match rec.values_at(&pt) {
                    Ok((t, s)) => {
                        for v in t.iter().chain(&s) {
                            tracker.update(v.abs(), &pt);
                        }
                        used += 1;
                    }
                    Err(_) => errors += 1,
                }
            }
            let notes = format!(
                "normal connection built; recovered torsion residual (torsion-freeness){}",
                if errors > 0 {
                    format!("; {errors} point(s) failed to evaluate")
                } else {
                    String::new()
                }
            );
            let mut rep = tracker.into_report("build:levi-civita", tol, used, notes);
            rep.pass &= errors == 0;
            dumps.push((check.as_str().to_string(), dump_connection(scenario, &built)));
            rep
        }
        CheckName::TorsionRoundtrip => {
            let g_v = scenario.vertical_block().expect("validated");
            let base = levi_civita_normal(spec, &scenario.conn, &g_v);
            let p = random_prescription(scenario);
            let deformed = torsion_family(spec, &base, &g_v, &p);
            let rec = torsion_recover(spec, &deformed);
            let base_rec = torsion_recover(spec, &base);
            let mut sampler = Sampler::stream(spec.m, spec.r_rank, seed, "torsion-roundtrip");
            let mut tracker = ResidualTracker::new();
            let mut used = 0;
            let mut errors = 0;
            for _ in 0..samples {
                let pt = sampler.next_point();
                let mut step = || -> Result<(), crate::expr::EvalError> {
                    let (t, s) = rec.values_at(&pt)?;
                    let (wt, ws) = p.values_at(&pt)?;
                    for (a, b) in t.iter().zip(&wt).chain(s.iter().zip(&ws)) {
                        tracker.update((a - b).abs(), &pt);
                    }
                    let (bt, bs) = base_rec.values_at(&pt)?;
                    for v in bt.iter().chain(&bs) {
                        tracker.update(v.abs(), &pt);
                    }
                    Ok(())
                };
                match step() {
                    Ok(()) => used += 1,
                    Err(_) => errors += 1,
                }
            }
            let notes = format!(
                "random skew prescription recovered through the deformed connection; base connection recovers zero{}",
                if errors > 0 {
                    format!("; {errors} point(s) failed to evaluate")
                } else {
                    String::new()
                }
            );
            let mut rep = tracker.into_report("torsion-roundtrip", tol, used, notes);
            rep.pass &= errors == 0;
            rep
        }
    }
}

/// Execute every requested check in declaration order. Evaluation failures
/// become failing reports; the run itself never aborts.
pub fn run(scenario: &Scenario) -> RunOutcome {
    let mut reports = Vec::with_capacity(scenario.checks.len());
    let mut dumps = Vec::new();
    for check in &scenario.checks {
        reports.push(run_check(scenario, *check, &mut dumps));
    }
    let all_pass = reports.iter().all(|r| r.pass);
    RunOutcome {
        reports,
        all_pass,
        dumps,
    }
}

/// Built-in example scenarios, embedded from the `scenarios/` directory.
pub const EXAMPLES: [(&str, &str); 8] = [
    ("classical-flat", include_str!("../../../scenarios/classical-flat.json")),
    ("so3-bundle", include_str!("../../../scenarios/so3-bundle.json")),
    ("exp-metric", include_str!("../../../scenarios/exp-metric.json")),
    ("hamilton-exp", include_str!("../../../scenarios/hamilton-exp.json")),
    ("cartan-finsler", include_str!("../../../scenarios/cartan-finsler.json")),
    ("chart-change-diag", include_str!("../../../scenarios/chart-change-diag.json")),
    ("obata-family", include_str!("../../../scenarios/obata-family.json")),
    ("deform-family", include_str!("../../../scenarios/deform-family.json")),
];

pub fn list_examples() -> Vec<&'static str> {
    EXAMPLES.iter().map(|(n, _)| *n).collect()
}

pub fn example_source(name: &str) -> Result<&'static str, ScenarioError> {
    EXAMPLES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| ScenarioError::UnknownExample(name.to_string()))
}

pub fn load_example(name: &str) -> Result<Scenario, ScenarioError> {
    load_scenario_str(example_source(name)?, &format!("builtin:{name}"))
}

pub fn run_example(name: &str) -> Result<RunOutcome, ScenarioError> {
    Ok(run(&load_example(name)?))
}

fn sig17(v: f64) -> String {
    if v.is_finite() {
        format!("{:.16e}", v)
    } else {
        // JSON has no non-finite numbers; clamp and let the notes explain.
        format!("{:.16e}", if v > 0.0 { f64::MAX } else { f64::MIN })
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn point_json(pt: &Point) -> String {
    let xs: Vec<String> = pt.x.iter().map(|v| sig17(*v)).collect();
    let ps: Vec<String> = pt.p.iter().map(|v| sig17(*v)).collect();
    format!("{{\"x\":[{}],\"p\":[{}]}}", xs.join(","), ps.join(","))
}

/// Render the machine-readable report. Float fields carry 17 significant
/// digits so regression comparisons are bit-faithful.
pub fn report_json(scenario: &Scenario, outcome: &RunOutcome, timestamp: u64) -> String {
    let mut out = String::from("{\n");
    out.push_str(&format!("  \"scenario\": {},\n", json_string(&scenario.origin)));
    out.push_str(&format!("  \"seed\": {},\n", scenario.seed));
    out.push_str(&format!("  \"timestamp\": {timestamp},\n"));
    out.push_str("  \"reports\": [\n");
    for (i, rep) in outcome.reports.iter().enumerate() {
        out.push_str(&format!(
            "    {{\"name\":{},\"pass\":{},\"max_residual\":{},\"worst_point\":{},\"samples_used\":{},\"notes\":{}}}{}\n",
            json_string(&rep.name),
            rep.pass,
            sig17(rep.max_residual),
            point_json(&rep.worst_point),
            rep.samples_used,
            json_string(&rep.notes),
            if i + 1 < outcome.reports.len() { "," } else { "" },
        ));
    }
    out.push_str("  ],\n");
    out.push_str(&format!("  \"all_pass\": {}\n", outcome.all_pass));
    out.push_str("}\n");
    out
}

/// Render the sampled-value tables for every connection a run constructed.
pub fn dump_json(outcome: &RunOutcome) -> String {
    let mut out = String::from("{\n");
    for (k, (name, dump)) in outcome.dumps.iter().enumerate() {
        out.push_str(&format!("  {}: {{\n    \"points\": [", json_string(name)));
        let pts: Vec<String> = dump.points.iter().map(point_json).collect();
        out.push_str(&pts.join(","));
        out.push_str("],\n    \"values\": {");
        let grid = |rows: &Vec<Vec<f64>>| -> String {
            let rs: Vec<String> = rows
                .iter()
                .map(|row| {
                    let vs: Vec<String> = row.iter().map(|v| sig17(*v)).collect();
                    format!("[{}]", vs.join(","))
                })
                .collect();
            format!("[{}]", rs.join(","))
        };
        out.push_str(&format!(
            "\"hh\":{},\"hv\":{},\"vh\":{},\"vv\":{}",
            grid(&dump.hh),
            grid(&dump.hv),
            grid(&dump.vh),
            grid(&dump.vv)
        ));
        out.push_str("}\n  }");
        out.push_str(if k + 1 < outcome.dumps.len() { ",\n" } else { "\n" });
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scenarios_load_with_expected_shapes() {
        let s = load_example("classical-flat").unwrap();
        assert_eq!((s.spec.m, s.spec.p_rank, s.spec.r_rank), (2, 2, 2));
        assert_eq!(s.checks.len(), 8);
        assert_eq!(s.tol, 1e-12);
        let s = load_example("chart-change-diag").unwrap();
        assert_eq!(s.transitions.len(), 3);
    }

    #[test]
    fn fundamental_expression_round_trips_through_print() {
        let s = load_example("hamilton-exp").unwrap();
        let Some(MetricSource::Fundamental(f)) = &s.metric else {
            panic!("expected a fundamental function");
        };
        let printed = f.expr.print();
        let reparsed = crate::expr::parse_expr(&printed, s.spec.dims()).unwrap();
        assert_eq!(f.expr, reparsed);
        assert_eq!(
            printed,
            "(+ (* 0.5 (* (exp x1) (pow p1 2))) (* 0.5 (* (exp x2) (pow p2 2))))"
        );
    }

    #[test]
    fn out_of_range_atom_reports_its_pointer() {
        let text = r#"{
            "dims": {"m": 2, "p_rank": 2, "r_rank": 2},
            "algebroid": {"rho": [["1","0"],["0","1"]],
                          "l": [[["0","0"],["0","0"]],[["0","0"],["0","p3"]]]},
            "checks": []
        }"#;
        let err = load_scenario_str(text, "test").err().expect("must be rejected");
        match err {
            ScenarioError::Expr { pointer, .. } => assert_eq!(pointer, "/algebroid/l/1/1/1"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn metric_sources_are_mutually_exclusive() {
        let text = r#"{
            "dims": {"m": 2, "p_rank": 2, "r_rank": 2},
            "algebroid": {"rho": [["1","0"],["0","1"]],
                          "l": [[["0","0"],["0","0"]],[["0","0"],["0","0"]]]},
            "metric": {"g_h": [["1","0"],["0","1"]], "g_v": [["1","0"],["0","1"]]},
            "cartan": "(sqrt (+ (pow p1 2) (pow p2 2)))",
            "checks": []
        }"#;
        let err = load_scenario_str(text, "test").err().expect("must be rejected");
        assert!(matches!(err, ScenarioError::Schema { .. }));
    }

    #[test]
    fn unknown_check_and_rank_requirements() {
        let base = |checks: &str, dims: &str| {
            format!(
                r#"{{
                    "dims": {dims},
                    "algebroid": {{"rho": [["1","0"],["0","1"],["0","0"]],
                                  "l": [[["0","0","0"],["0","0","0"],["0","0","0"]],
                                        [["0","0","0"],["0","0","0"],["0","0","0"]],
                                        [["0","0","0"],["0","0","0"],["0","0","0"]]]}},
                    "metric": {{"g_h": [["1","0","0"],["0","1","0"],["0","0","1"]],
                               "g_v": [["1","0"],["0","1"]]}},
                    "checks": [{checks}]
                }}"#
            )
        };
        // p_rank = 3, r_rank = 2: normal-connection checks must be refused.
        let text = base(
            "\"build:levi-civita\"",
            r#"{"m": 2, "p_rank": 3, "r_rank": 2}"#,
        );
        let err = load_scenario_str(&text, "test").err().expect("must be rejected");
        assert!(err.to_string().contains("p_rank = r_rank"), "{err}");
    }

    #[test]
    fn report_numbers_carry_seventeen_significant_digits() {
        let scenario = load_example("cartan-finsler").unwrap();
        let outcome = run(&scenario);
        let text = report_json(&scenario, &outcome, 0);
        assert!(text.contains("e-"), "expected scientific notation:\n{text}");
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["all_pass"], serde_json::Value::Bool(true));
        // Every float in the mantissa has 16 fractional digits (17 total).
        for line in text.lines().filter(|l| l.contains("max_residual")) {
            let at = line.find("\"max_residual\":").unwrap() + "\"max_residual\":".len();
            let frac = line[at..].split('.').nth(1).unwrap();
            let digits = frac.chars().take_while(|c| c.is_ascii_digit()).count();
            assert_eq!(digits, 16, "line: {line}");
        }
    }
}
