//! File formats: the dataset CSV, report tables (CSV or JSON lines),
//! simulation configs (TOML) and simulation output directories.
//!
//! # Dataset CSV
//!
//! Columns, in this order when written:
//!
//! | column | content |
//! |---|---|
//! | `area_id` | integer area identifier |
//! | `unit_id` | integer unit identifier, unique within the area |
//! | `y` | response; empty for non-sampled population rows |
//! | `x_1` .. `x_p` | covariates without the intercept (added on ingest) |
//! | `w_unit` | optional unit survey weight, positive |
//! | `w_area` | optional area survey weight, positive, constant within an area |
//! | `v_scale` | optional divisor of the unit error variance, default 1 |
//! | `is_sampled` | `1` sampled frame unit, `0` non-sampled frame unit, empty for a sample record without frame |
//!
//! An area either lists its whole frame (every row flagged `0` or `1`) or
//! only its sample (flag empty or column absent). Non-finite numbers are
//! written as `Inf`, `-Inf` and `NaN`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::data::{AreaData, PopulationUnit, SampleDataset, UnitRecord};
use crate::ebp::EbpDraws;
use crate::error::{Error, Result};
use crate::intervals::IntervalReport;
use crate::mse::{MseReport, MseVariant};
use crate::sim::{SimConfig, SimRecord, SimResult};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Formats a float so that parsing it back gives the same value; infinities
/// become `Inf` / `-Inf`.
pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "Inf".into() } else { "-Inf".into() }
    } else if v != 0.0 && (v.abs() >= 1e16 || v.abs() < 1e-5) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

/// Output format of report tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    JsonLines,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "jsonl" | "json-lines" | "jsonlines" => Ok(Self::JsonLines),
            _ => Err(Error::Validation(format!("unknown format '{s}' (csv or json-lines)"))),
        }
    }
}

/// A cell of an output table.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_f64(*v),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => (if *b { "1" } else { "0" }).into(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => Value::from(*v),
            Cell::Float(v) if v.is_finite() => Value::from(*v),
            Cell::Float(v) => Value::from(format_f64(*v)),
            Cell::Text(s) => Value::from(s.clone()),
            Cell::Bool(b) => Value::from(*b),
            Cell::Empty => Value::Null,
        }
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Float)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn write<W: Write>(&self, w: W, format: Format) -> Result<()> {
        match format {
            Format::Csv => {
                let mut out = csv::Writer::from_writer(w);
                out.write_record(&self.header)?;
                for row in &self.rows {
                    out.write_record(row.iter().map(Cell::csv))?;
                }
                out.flush().map_err(csv::Error::from)?;
            }
            Format::JsonLines => {
                let mut w = BufWriter::new(w);
                for row in &self.rows {
                    let obj: Map<String, Value> = self.header.iter().cloned().zip(row.iter().map(Cell::json)).collect();
                    let line = serde_json::to_string(&obj).expect("plain values serialize");
                    writeln!(w, "{line}").map_err(|e| Error::Io { path: PathBuf::from("<output>"), source: e })?;
                }
                w.flush().map_err(|e| Error::Io { path: PathBuf::from("<output>"), source: e })?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, format: Format) -> Result<()> {
        let f = File::create(path).map_err(io_err(path))?;
        self.write(f, format)
    }
}

struct Row {
    line: usize,
    area_id: i64,
    unit_id: i64,
    y: Option<f64>,
    x: Vec<f64>,
    w_unit: Option<f64>,
    w_area: Option<f64>,
    v_scale: f64,
    is_sampled: Option<bool>,
}

/// Parses a dataset CSV (see the module docs).
pub fn read_dataset<R: Read>(reader: R) -> Result<SampleDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let schema = |message: String| Error::Schema { row: 1, message };
    let col = |name: &str| header.iter().position(|h| h == name);
    let area_col = col("area_id").ok_or_else(|| schema("missing column area_id".into()))?;
    let unit_col = col("unit_id").ok_or_else(|| schema("missing column unit_id".into()))?;
    let y_col = col("y").ok_or_else(|| schema("missing column y".into()))?;
    let (w_unit_col, w_area_col, v_col, s_col) = (col("w_unit"), col("w_area"), col("v_scale"), col("is_sampled"));
    let mut x_cols = Vec::new();
    while let Some(c) = col(&format!("x_{}", x_cols.len() + 1)) {
        x_cols.push(c);
    }
    let known = 3 + x_cols.len() + [w_unit_col, w_area_col, v_col, s_col].iter().flatten().count();
    if known != header.len() {
        let extra: Vec<&String> = header
            .iter()
            .filter(|h| {
                !["area_id", "unit_id", "y", "w_unit", "w_area", "v_scale", "is_sampled"].contains(&h.as_str())
                    && !(h.starts_with("x_") && h[2..].parse::<usize>().is_ok_and(|k| k >= 1 && k <= x_cols.len()))
            })
            .collect();
        return Err(schema(format!("unexpected or duplicate columns {extra:?} (covariates must be x_1..x_p)")));
    }

    let mut rows = Vec::new();
    let mut seen: HashMap<(i64, i64), usize> = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        let bad = |message: String| Error::Schema { row: line, message };
        let field = |c: usize| rec.get(c).unwrap_or("");
        let int = |c: usize, name: &str| -> Result<i64> {
            field(c).parse::<i64>().map_err(|_| bad(format!("{name} '{}' is not an integer", field(c))))
        };
        let opt_num = |c: Option<usize>, name: &str| -> Result<Option<f64>> {
            match c.map(field) {
                None | Some("") => Ok(None),
                Some(s) => parse_f64(s).map(Some).ok_or_else(|| bad(format!("{name} '{s}' is not a number"))),
            }
        };
        let area_id = int(area_col, "area_id")?;
        let unit_id = int(unit_col, "unit_id")?;
        let y = opt_num(Some(y_col), "y")?;
        let x = x_cols
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                opt_num(Some(c), &format!("x_{}", j + 1))?
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("x_{} must be a finite number", j + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let w_unit = opt_num(w_unit_col, "w_unit")?;
        let w_area = opt_num(w_area_col, "w_area")?;
        for (name, w) in [("w_unit", w_unit), ("w_area", w_area)] {
            if let Some(w) = w {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(bad(format!("{name} must be positive and finite, got {w}")));
                }
            }
        }
        let v_scale = opt_num(v_col, "v_scale")?.unwrap_or(1.0);
        if !(v_scale > 0.0 && v_scale.is_finite()) {
            return Err(bad(format!("v_scale must be positive, got {v_scale}")));
        }
        let is_sampled = match s_col.map(field) {
            None | Some("") => None,
            Some("1") | Some("true") => Some(true),
            Some("0") | Some("false") => Some(false),
            Some(s) => return Err(bad(format!("is_sampled '{s}' must be 1, 0 or empty"))),
        };
        if is_sampled != Some(false) {
            match y {
                None => return Err(bad("sampled unit without a response".into())),
                Some(v) if !v.is_finite() => return Err(bad("response must be finite".into())),
                _ => {}
            }
        } else if w_unit.is_some() {
            return Err(bad("unit weight given for a non-sampled unit".into()));
        }
        if let Some(first) = seen.insert((area_id, unit_id), line) {
            return Err(bad(format!("duplicate unit ({area_id}, {unit_id}), first seen on row {first}")));
        }
        rows.push(Row { line, area_id, unit_id, y, x, w_unit, w_area, v_scale, is_sampled });
    }
    if rows.is_empty() {
        return Err(Error::Schema { row: 1, message: "no data rows".into() });
    }

    let mut by_area: BTreeMap<i64, Vec<Row>> = BTreeMap::new();
    for r in rows {
        by_area.entry(r.area_id).or_default().push(r);
    }
    let mut areas = Vec::with_capacity(by_area.len());
    for (id, rows) in by_area {
        let mut area = AreaData::new(id);
        let framed = rows[0].is_sampled.is_some();
        let mut pop = Vec::new();
        for r in &rows {
            let bad = |message: String| Error::Schema { row: r.line, message };
            if r.is_sampled.is_some() != framed {
                return Err(bad(format!("area {id} mixes frame rows and sample-only rows")));
            }
            match (area.area_weight, r.w_area) {
                (Some(a), Some(b)) if a != b => return Err(bad(format!("area {id} has conflicting w_area values"))),
                (None, Some(b)) => area.area_weight = Some(b),
                _ => {}
            }
            let mut x = Vec::with_capacity(r.x.len() + 1);
            x.push(1.0);
            x.extend_from_slice(&r.x);
            let sampled = r.is_sampled != Some(false);
            if sampled {
                area.sample.push(UnitRecord {
                    area_id: id,
                    unit_id: r.unit_id,
                    y: r.y.expect("checked"),
                    x: x.clone(),
                    unit_weight: r.w_unit,
                    variance_scale: r.v_scale,
                });
            }
            if framed {
                pop.push(PopulationUnit { unit_id: r.unit_id, x, variance_scale: r.v_scale, sampled });
            }
        }
        if framed {
            area.population = Some(pop);
        }
        areas.push(area);
    }
    SampleDataset::new(areas)
}

/// Reads and validates a dataset file.
pub fn ingest(path: &Path) -> Result<SampleDataset> {
    let f = File::open(path).map_err(io_err(path))?;
    read_dataset(f)
}

/// Writes a dataset in the CSV schema; `read_dataset` gives it back unchanged.
pub fn write_dataset<W: Write>(data: &SampleDataset, w: W) -> Result<()> {
    let p = data.n_covariates().saturating_sub(1);
    let mut header = vec!["area_id".to_string(), "unit_id".into(), "y".into()];
    header.extend((1..=p).map(|k| format!("x_{k}")));
    header.extend(["w_unit", "w_area", "v_scale", "is_sampled"].map(String::from));
    let mut table = Table { header, rows: Vec::new() };
    for area in data.areas() {
        let w_area = Cell::from(area.area_weight);
        let row = |unit_id: i64, y: Option<f64>, x: &[f64], w: Option<f64>, v: f64, flag: Cell| {
            let mut r = vec![Cell::Int(area.area_id), Cell::Int(unit_id), Cell::from(y)];
            r.extend(x[1..].iter().map(|&v| Cell::Float(v)));
            r.extend([Cell::from(w), w_area.clone(), Cell::Float(v), flag]);
            r
        };
        match &area.population {
            None => {
                for r in &area.sample {
                    table.rows.push(row(r.unit_id, Some(r.y), &r.x, r.unit_weight, r.variance_scale, Cell::Empty));
                }
            }
            Some(pop) => {
                let recs: BTreeMap<i64, &UnitRecord> = area.sample.iter().map(|r| (r.unit_id, r)).collect();
                for u in pop {
                    let rec = recs.get(&u.unit_id);
                    table.rows.push(row(
                        u.unit_id,
                        rec.map(|r| r.y),
                        &u.x,
                        rec.and_then(|r| r.unit_weight),
                        u.variance_scale,
                        Cell::Bool(u.sampled),
                    ));
                }
            }
        }
    }
    table.write(w, Format::Csv)
}

pub fn emit_dataset(data: &SampleDataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    write_dataset(data, f)
}

/// Columns of [`report_table`], one row per area, functional and MSE method.
pub const REPORT_COLUMNS: [&str; 9] =
    ["area_id", "parameter", "method", "theta_hat", "mse", "m1", "m2", "m1_bar_star", "b_effective"];

/// MSE reports in long form. The `S` row appears only when computed.
pub fn report_table(reports: &[MseReport]) -> Table {
    let mut t = Table::new(&REPORT_COLUMNS);
    for r in reports {
        for v in MseVariant::ALL {
            let Some(mse) = r.value(v) else { continue };
            t.rows.push(vec![
                Cell::Int(r.area_id),
                Cell::Text(r.parameter.clone()),
                Cell::Text(v.label().into()),
                Cell::Float(r.theta_hat),
                Cell::Float(mse),
                Cell::Float(r.m1),
                Cell::Float(r.m2),
                Cell::Float(r.m1_bar_star),
                Cell::Int(r.b_effective as i64),
            ]);
        }
    }
    t
}

/// Writes MSE reports; an infinite MSE is written as `Inf`.
pub fn emit_report(reports: &[MseReport], path: &Path, format: Format) -> Result<()> {
    report_table(reports).save(path, format)
}

pub fn prediction_table(draws: &[EbpDraws]) -> Table {
    let mut t = Table::new(&["area_id", "parameter", "theta_hat", "l", "mc_se"]);
    for d in draws {
        let p = d.prediction();
        t.rows.push(vec![
            Cell::Int(d.area_id),
            Cell::Text(d.parameter.clone()),
            Cell::Float(p.theta_hat),
            Cell::Int(p.l as i64),
            Cell::Float(p.mc_se),
        ]);
    }
    t
}

pub fn interval_table(cis: &[IntervalReport]) -> Table {
    let mut t =
        Table::new(&["area_id", "parameter", "interval", "nominal", "lower", "upper", "alpha_prime", "unattained"]);
    for c in cis {
        t.rows.push(vec![
            Cell::Int(c.area_id),
            Cell::Text(c.parameter.clone()),
            Cell::Text(c.kind.label()),
            Cell::Float(c.nominal),
            Cell::Float(c.lower),
            Cell::Float(c.upper),
            Cell::from(c.alpha_prime),
            Cell::Bool(c.unattained),
        ]);
    }
    t
}

pub fn load_sim_config(path: &Path) -> Result<SimConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_sim_config(&text)
}

pub fn parse_sim_config(text: &str) -> Result<SimConfig> {
    let c: SimConfig = toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
    c.validate()?;
    Ok(c)
}

pub fn sim_config_toml(c: &SimConfig) -> String {
    toml::to_string(c).expect("config serializes")
}

const RECORD_FIXED: [&str; 17] = [
    "replicate",
    "area_id",
    "stratum",
    "sampled",
    "parameter",
    "truth",
    "theta_hat",
    "m1",
    "m2",
    "m1_bar_star",
    "mse_nobc",
    "mse_add",
    "mse_mult",
    "mse_comp",
    "mse_hm",
    "mse_s",
    "b_effective",
];

/// Every simulation record with one column per interval hit (`1`, `0`, or
/// empty when undefined).
pub fn records_table(result: &SimResult) -> Table {
    let mut t = Table::new(&RECORD_FIXED);
    t.header.extend(result.config.interval_columns().iter().map(|c| c.label()));
    for r in &result.records {
        let m = &r.report;
        let mut row = vec![
            Cell::Int(r.replicate as i64),
            Cell::Int(m.area_id),
            Cell::Int(r.stratum as i64),
            Cell::Bool(r.sampled),
            Cell::Text(m.parameter.clone()),
            Cell::Float(r.truth),
            Cell::Float(m.theta_hat),
            Cell::Float(m.m1),
            Cell::Float(m.m2),
            Cell::Float(m.m1_bar_star),
            Cell::Float(m.mse_nobc),
            Cell::Float(m.mse_add),
            Cell::Float(m.mse_mult),
            Cell::Float(m.mse_comp),
            Cell::Float(m.mse_hm),
            Cell::from(m.mse_standard),
            Cell::Int(m.b_effective as i64),
        ];
        row.extend(r.hits.iter().map(|h| h.map_or(Cell::Empty, Cell::Bool)));
        t.rows.push(row);
    }
    t
}

/// Parses a records table written by [`records_table`].
pub fn read_records<R: Read>(reader: R, config: &SimConfig) -> Result<Vec<SimRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut want: Vec<String> = RECORD_FIXED.iter().map(|s| s.to_string()).collect();
    want.extend(config.interval_columns().iter().map(|c| c.label()));
    if header != want {
        return Err(Error::Schema { row: 1, message: "records header does not match the configuration".into() });
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        let bad = |c: usize| Error::Schema { row: line, message: format!("bad value in column {}", want[c]) };
        let f = |c: usize| -> Result<f64> { parse_f64(&rec[c]).ok_or_else(|| bad(c)) };
        let int = |c: usize| -> Result<i64> { rec[c].parse::<i64>().map_err(|_| bad(c)) };
        let flag = |c: usize| -> Result<Option<bool>> {
            match &rec[c] {
                "" => Ok(None),
                "1" => Ok(Some(true)),
                "0" => Ok(Some(false)),
                _ => Err(bad(c)),
            }
        };
        let (m1, m1_bar_star, mse_add, mse_mult) = (f(7)?, f(9)?, f(11)?, f(13)?);
        let report = MseReport {
            area_id: int(1)?,
            parameter: rec[4].to_string(),
            theta_hat: f(6)?,
            m1,
            m2: f(8)?,
            m1_bar_star,
            bias_add: m1_bar_star - m1,
            mse_nobc: f(10)?,
            mse_add,
            mse_mult: f(12)?,
            mse_comp: mse_mult,
            mse_hm: f(14)?,
            mse_standard: if rec[15].is_empty() { None } else { Some(f(15)?) },
            b_effective: int(16)? as usize,
            negative_add: mse_add < 0.0,
            infinite_mult: f(12)?.is_infinite(),
        };
        let report = MseReport { mse_comp: f(13)?, ..report };
        let hits = (RECORD_FIXED.len()..want.len()).map(flag).collect::<Result<Vec<_>>>()?;
        out.push(SimRecord {
            replicate: int(0)? as usize,
            stratum: int(2)? as usize,
            sampled: flag(3)?.ok_or_else(|| bad(3))?,
            truth: f(5)?,
            report,
            hits,
        });
    }
    Ok(out)
}

/// Relative-bias table: one row per functional and scenario, one column per
/// MSE method (`S` empty when not computed).
pub fn rb_table(result: &SimResult) -> Result<Table> {
    let mut t = Table::new(&["parameter", "scenario"]);
    t.header.extend(MseVariant::ALL.iter().map(|v| v.label().to_string()));
    let rows = result.rb_table()?;
    let mut keyed: BTreeMap<(usize, usize), Vec<Cell>> = BTreeMap::new();
    let params = result.parameters();
    let scenarios = result.scenarios();
    for r in rows {
        let pi = params.iter().position(|p| *p == r.parameter).expect("known parameter");
        let si = scenarios.iter().position(|s| *s == r.scenario).expect("known scenario");
        let row = keyed.entry((pi, si)).or_insert_with(|| {
            let mut v = vec![Cell::Text(r.parameter.clone()), Cell::Text(r.scenario.label().into())];
            v.extend(MseVariant::ALL.iter().map(|_| Cell::Empty));
            v
        });
        let vi = MseVariant::ALL.iter().position(|v| *v == r.method).expect("variant");
        row[2 + vi] = Cell::Float(r.rb);
    }
    t.rows = keyed.into_values().collect();
    Ok(t)
}

/// Coverage table: one row per functional, scenario and level, one column
/// per interval method.
pub fn ecp_table(result: &SimResult) -> Result<Table> {
    let columns = result.config.interval_columns();
    let mut kinds: Vec<String> = Vec::new();
    for c in &columns {
        if !kinds.contains(&c.kind.label()) {
            kinds.push(c.kind.label());
        }
    }
    let mut t = Table::new(&["parameter", "scenario", "level"]);
    t.header.extend(kinds.iter().cloned());
    let mut keyed: BTreeMap<(usize, usize, usize), Vec<Cell>> = BTreeMap::new();
    let params = result.parameters();
    let scenarios = result.scenarios();
    for r in result.ecp_table()? {
        let pi = params.iter().position(|p| *p == r.parameter).expect("known parameter");
        let si = scenarios.iter().position(|s| *s == r.scenario).expect("known scenario");
        let li = result.config.levels.iter().position(|l| *l == r.level).expect("known level");
        let row = keyed.entry((pi, si, li)).or_insert_with(|| {
            let mut v = vec![Cell::Text(r.parameter.clone()), Cell::Text(r.scenario.label().into()), Cell::Float(r.level)];
            v.extend(kinds.iter().map(|_| Cell::Empty));
            v
        });
        let ki = kinds.iter().position(|k| *k == r.interval).expect("known interval");
        row[3 + ki] = Cell::from(r.ecp);
    }
    t.rows = keyed.into_values().collect();
    Ok(t)
}

pub fn area_ecp_table(result: &SimResult) -> Result<Table> {
    let mut t = Table::new(&["parameter", "scenario", "interval", "level", "area_id", "ecp"]);
    for e in result.per_area_ecp()? {
        for (id, v) in &e.values {
            t.rows.push(vec![
                Cell::Text(e.parameter.clone()),
                Cell::Text(e.scenario.label().into()),
                Cell::Text(e.column.kind.label()),
                Cell::Float(e.column.level),
                Cell::Int(*id),
                Cell::Float(*v),
            ]);
        }
    }
    Ok(t)
}

pub fn t_table(result: &SimResult) -> Table {
    let mut t = Table::new(&["replicate", "area_id", "parameter", "sampled", "t"]);
    for r in result.t_statistics() {
        t.rows.push(vec![
            Cell::Int(r.replicate as i64),
            Cell::Int(r.area_id),
            Cell::Text(r.parameter),
            Cell::Bool(r.sampled),
            Cell::Float(r.t),
        ]);
    }
    t
}

fn dropped_table(result: &SimResult) -> Table {
    let mut t = Table::new(&["replicate", "error"]);
    for (m, e) in &result.dropped {
        t.rows.push(vec![Cell::Int(*m as i64), Cell::Text(e.clone())]);
    }
    t
}

/// Writes the raw study (config, records, dropped replicates).
pub fn write_sim_records(result: &SimResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cfg = dir.join("config.toml");
    fs::write(&cfg, sim_config_toml(&result.config)).map_err(io_err(&cfg))?;
    records_table(result).save(&dir.join("records.csv"), Format::Csv)?;
    dropped_table(result).save(&dir.join("dropped.csv"), Format::Csv)
}

/// Writes the summaries: `rb.csv`, `ecp.csv`, `ecp_by_area.csv`,
/// `tstat.csv` and one SVG boxplot per functional, scenario and level.
pub fn write_sim_summaries(result: &SimResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    rb_table(result)?.save(&dir.join("rb.csv"), Format::Csv)?;
    ecp_table(result)?.save(&dir.join("ecp.csv"), Format::Csv)?;
    area_ecp_table(result)?.save(&dir.join("ecp_by_area.csv"), Format::Csv)?;
    t_table(result).save(&dir.join("tstat.csv"), Format::Csv)?;
    for (stem, svg) in result.ecp_boxplots()? {
        let p = dir.join(format!("{stem}.svg"));
        fs::write(&p, svg).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Reads a study written by [`write_sim_records`].
pub fn read_sim_records(dir: &Path) -> Result<SimResult> {
    let config = load_sim_config(&dir.join("config.toml"))?;
    let path = dir.join("records.csv");
    let records = read_records(File::open(&path).map_err(io_err(&path))?, &config)?;
    let path = dir.join("dropped.csv");
    let mut dropped = Vec::new();
    if path.exists() {
        let mut rdr = csv::Reader::from_reader(File::open(&path).map_err(io_err(&path))?);
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let m = rec[0].parse::<usize>().map_err(|_| Error::Schema { row: k + 2, message: "bad replicate".into() })?;
            dropped.push((m, rec[1].to_string()));
        }
    }
    Ok(SimResult { config, records, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::informative::ModelParams;
    use crate::model::NerParams;
    use crate::mse::{mse_report, BootstrapReplicate};
    use crate::sim::Design;

    const MINIMAL: &str = "\
area_id,unit_id,y,x_1,w_unit,w_area,v_scale,is_sampled
1,1,2.5,0.1,,,1,
1,2,3,0.2,,,1,
2,1,1.25,0.3,,,1,
2,2,-0.5,0.4,,,1,
";

    #[test]
    fn minimal_file_round_trips() {
        let d = read_dataset(MINIMAL.as_bytes()).unwrap();
        assert_eq!(d.n_covariates(), 2);
        assert_eq!(d.area(1).unwrap().n(), 2);
        let mut out = Vec::new();
        write_dataset(&d, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), MINIMAL);
    }

    #[test]
    fn frame_round_trip() {
        let text = "\
area_id,unit_id,y,x_1,x_2,w_unit,w_area,v_scale,is_sampled
1,1,2.5,0.1,3,1.5,4,1,1
1,2,,0.2,-1,,4,2,0
2,7,,0.3,0,,,1,0
3,1,0.1,0.3,0,,,1,
";
        let d = read_dataset(text.as_bytes()).unwrap();
        let a = d.area(1).unwrap();
        assert_eq!(a.population_size(), Some(2));
        assert_eq!(a.area_weight, Some(4.0));
        assert_eq!(a.sample[0].x, vec![1.0, 0.1, 3.0]);
        assert!(!d.area(2).unwrap().is_sampled());
        assert!(d.area(3).unwrap().population.is_none());
        let mut out = Vec::new();
        write_dataset(&d, &mut out).unwrap();
        assert_eq!(String::from_utf8(out.clone()).unwrap(), text);
        assert_eq!(read_dataset(out.as_slice()).unwrap(), d);
    }

    #[test]
    fn schema_errors_carry_rows() {
        let cases = [
            ("area_id,unit_id,y,x_1\n1,1,2,0.5\n1,1,3,0.5\n", 3),
            ("area_id,unit_id,y,x_1,w_unit\n1,1,2,0.5,1\n1,2,3,0.5,-2\n", 3),
            ("area_id,unit_id,y,x_1\n1,1,abc,0.5\n", 2),
            ("area_id,unit_id,y,x_2\n1,1,2,0.5\n", 1),
            ("area_id,unit_id,y,x_1,is_sampled\n1,1,,0.5,1\n", 2),
            ("area_id,unit_id,y,x_1,is_sampled\n1,1,2,0.5,1\n1,2,2,0.5,\n", 3),
            ("area_id,y,x_1\n1,2,0.5\n", 1),
        ];
        for (text, row) in cases {
            match read_dataset(text.as_bytes()) {
                Err(Error::Schema { row: r, .. }) => assert_eq!(r, row, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    fn constructed_report(mult_inf: bool) -> MseReport {
        let base = EbpDraws {
            area_id: 3,
            parameter: "pg:155".into(),
            draws: vec![0.1, 0.2, 0.3, 0.4],
            params_used: ModelParams::noninformative(NerParams { beta: vec![0.0], sigma2_u: 1.0, sigma2_e: 1.0 }),
            seed: 0,
        };
        let rep = |b: usize, v: f64| BootstrapReplicate {
            b,
            psi_hat_b: base.params_used.clone(),
            theta_hat_b: v,
            m1_b: if mult_inf { 0.0 } else { 0.01 },
            draws: vec![v; 4],
        };
        mse_report(&base, &[rep(0, 0.25), rep(1, 0.25)], None)
    }

    #[test]
    fn report_golden_csv() {
        let r = constructed_report(true);
        assert!(r.infinite_mult);
        let mut out = Vec::new();
        report_table(&[r]).write(&mut out, Format::Csv).unwrap();
        let want = "\
area_id,parameter,method,theta_hat,mse,m1,m2,m1_bar_star,b_effective
3,pg:155,noBC,0.25,0.016666666666666666,0.016666666666666666,0,0,2
3,pg:155,Add,0.25,0.03333333333333333,0.016666666666666666,0,0,2
3,pg:155,Mult,0.25,Inf,0.016666666666666666,0,0,2
3,pg:155,Comp,0.25,0.03333333333333333,0.016666666666666666,0,0,2
3,pg:155,HM,0.25,0.03333333333333333,0.016666666666666666,0,0,2
";
        assert_eq!(String::from_utf8(out).unwrap(), want);
    }

    #[test]
    fn report_json_lines_and_empty() {
        let mut out = Vec::new();
        report_table(&[constructed_report(true)]).write(&mut out, Format::JsonLines).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 5);
        let mult: Value = serde_json::from_str(text.lines().nth(2).unwrap()).unwrap();
        assert_eq!(mult["mse"], Value::from("Inf"));
        assert_eq!(mult["method"], Value::from("Mult"));

        let mut out = Vec::new();
        report_table(&[]).write(&mut out, Format::Csv).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), REPORT_COLUMNS.join(",") + "\n");
        let mut out = Vec::new();
        report_table(&[]).write(&mut out, Format::JsonLines).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -2.5e-9, 1e300, 123456.789, f64::MIN_POSITIVE, 5.0, 1.0 / 3.0] {
            assert_eq!(parse_f64(&format_f64(v)).unwrap(), v);
        }
        assert_eq!(format_f64(f64::INFINITY), "Inf");
        assert_eq!(parse_f64("Inf").unwrap(), f64::INFINITY);
    }

    #[test]
    fn config_toml_round_trip() {
        let text = "\
replicates = 3
l = 20
b = 10
seed = 42
parameters = [\"mean\", \"pg:155\"]

[design]
kind = \"informative\"
r_sigma = 3.0

[tilt]
kind = \"exact\"
";
        let c = parse_sim_config(text).unwrap();
        assert_eq!(c.design, Design::Informative { r_sigma: 3.0 });
        assert_eq!(c.population_size, 200);
        assert_eq!(c.levels, vec![0.90, 0.95, 0.99]);
        assert_eq!(parse_sim_config(&sim_config_toml(&c)).unwrap(), c);
        assert!(parse_sim_config("replicates = 3\n").is_err());
        assert!(parse_sim_config("bogus = 1\n[design]\nkind = \"informative\"\nr_sigma = 1.0\n").is_err());
    }

    #[test]
    fn sim_records_round_trip() {
        let mut c = SimConfig::new(Design::Noninformative { areas: 4, r_sigma: 1.0 });
        c.replicates = 2;
        c.l = 10;
        c.b = 10;
        c.population_size = 20;
        c.parameters = vec!["mean".into(), "gini".into()];
        let res = crate::sim::run_study(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sim_records(&res, dir.path()).unwrap();
        let back = read_sim_records(dir.path()).unwrap();
        assert_eq!(back, res);
        write_sim_summaries(&back, dir.path()).unwrap();
        let rb = fs::read_to_string(dir.path().join("rb.csv")).unwrap();
        assert!(rb.starts_with("parameter,scenario,noBC,Add,Mult,Comp,HM,S\nmean,all,"));
    }
}
