//! Event-table parsing, counting-format construction, and the student-level
//! prediction dataset.
//!
//! Times are stored internally on the rescaled window `[0, 1]`; the original
//! window is kept alongside for reporting. Event-history rows follow the
//! start/stop counting format: a unit is at risk exactly on its rows, events
//! sit at row stops with `status = 1`, and `enum` counts prior event days.

use crate::error::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufReader, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

/// Observation window `[t0, t1]` in original time units (days or unitless).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    t0: f64,
    t1: f64,
}

impl ObservationWindow {
    pub fn new(t0: f64, t1: f64) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite() && t0 < t1) {
            return Err(Error::InvalidValue {
                context: "ObservationWindow".into(),
                detail: format!("need t0 < t1, got [{t0}, {t1}]"),
            });
        }
        Ok(Self { t0, t1 })
    }

    /// The unit window `[0, 1]`.
    pub fn unit() -> Self {
        Self { t0: 0.0, t1: 1.0 }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn span(&self) -> f64 {
        self.t1 - self.t0
    }

    /// Original-unit time -> rescaled time in [0, 1].
    pub fn rescale(&self, t: f64) -> f64 {
        (t - self.t0) / self.span()
    }

    /// Rescaled time -> original units.
    pub fn to_original(&self, u: f64) -> f64 {
        self.t0 + u * self.span()
    }
}

/// A boundary of the observation window: plain real or calendar date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimePoint {
    Real(f64),
    Date(NaiveDate),
}

impl FromStr for TimePoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(v) = s.parse::<f64>() {
            return Ok(TimePoint::Real(v));
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(TimePoint::Date)
            .map_err(|_| Error::Parse {
                context: "time point".into(),
                value: s.to_string(),
            })
    }
}

/// Window given as two time points; dates are converted to day counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub t0: TimePoint,
    pub t1: TimePoint,
}

impl WindowSpec {
    pub fn real(t0: f64, t1: f64) -> Self {
        Self {
            t0: TimePoint::Real(t0),
            t1: TimePoint::Real(t1),
        }
    }

    /// The window in original units. For date boundaries, `t0 = 0` and
    /// `t1` = days from the start date.
    pub fn to_window(&self) -> Result<ObservationWindow> {
        match (self.t0, self.t1) {
            (TimePoint::Real(a), TimePoint::Real(b)) => ObservationWindow::new(a, b),
            (TimePoint::Date(a), TimePoint::Date(b)) => {
                ObservationWindow::new(0.0, (b - a).num_days() as f64)
            }
            _ => Err(Error::InvalidValue {
                context: "WindowSpec".into(),
                detail: "window boundaries must both be reals or both be dates".into(),
            }),
        }
    }

    /// Parse a raw time cell into original units (reals pass through; dates
    /// become days since the window start; plain reals against a date window
    /// are read as day offsets).
    pub fn convert(&self, raw: &str) -> Result<f64> {
        let raw = raw.trim();
        if let Ok(v) = raw.parse::<f64>() {
            return Ok(v);
        }
        let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| Error::Parse {
            context: "event time".into(),
            value: raw.to_string(),
        })?;
        match self.t0 {
            TimePoint::Date(origin) => Ok((date - origin).num_days() as f64),
            TimePoint::Real(_) => Err(Error::InvalidValue {
                context: "event time".into(),
                detail: format!("date `{raw}` given against a non-date window"),
            }),
        }
    }
}

/// One start/stop interval of a unit's event history (rescaled time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentEventRow {
    pub cluster_id: String,
    pub unit_id: String,
    pub start: f64,
    pub stop: f64,
    /// 1 = event at `stop`.
    pub status: bool,
    /// Cumulative count of prior distinct event days for this unit.
    pub enum_count: u32,
    pub marks: Vec<f64>,
    pub covariates: Vec<f64>,
}

/// Row range of one unit inside the sorted row store.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSpan {
    pub cluster_id: String,
    pub unit_id: String,
    pub rows: Range<usize>,
}

/// Reference to a model column of the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRef {
    /// The `enum` event counter.
    EnumCount,
    Mark(usize),
    Covariate(usize),
}

/// Validated collection of counting-format rows over a shared window.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentEventDataset {
    rows: Vec<RecurrentEventRow>,
    window: ObservationWindow,
    mark_names: Vec<String>,
    covariate_names: Vec<String>,
    units: Vec<UnitSpan>,
}

impl RecurrentEventDataset {
    /// Validate and index rows. Rows are sorted by (cluster, unit, start);
    /// within a unit the intervals must be ordered and non-overlapping with
    /// `start < stop` (gaps are allowed: the unit is simply not at risk
    /// there), and `enum` must step by exactly 1 after each event row.
    pub fn new(
        mut rows: Vec<RecurrentEventRow>,
        window: ObservationWindow,
        mark_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        rows.sort_by(|a, b| {
            (a.cluster_id.as_str(), a.unit_id.as_str())
                .cmp(&(b.cluster_id.as_str(), b.unit_id.as_str()))
                .then(a.start.partial_cmp(&b.start).expect("finite start times"))
        });
        for row in &rows {
            if row.marks.len() != mark_names.len() || row.covariates.len() != covariate_names.len()
            {
                return Err(Error::InvalidValue {
                    context: "RecurrentEventDataset".into(),
                    detail: format!(
                        "unit {}: row mark/covariate arity does not match declared names",
                        row.unit_id
                    ),
                });
            }
            if !(row.start.is_finite() && row.stop.is_finite()) || row.start >= row.stop {
                return Err(Error::NonChronologicalRows {
                    unit: row.unit_id.clone(),
                    at: row.start,
                });
            }
            if row.start < -1e-12 || row.stop > 1.0 + 1e-12 {
                return Err(Error::OutOfWindow {
                    unit: row.unit_id.clone(),
                    time: row.stop,
                });
            }
        }

        let mut units: Vec<UnitSpan> = Vec::new();
        let mut unit_cluster: BTreeMap<&str, &str> = BTreeMap::new();
        let mut lo = 0;
        while lo < rows.len() {
            let hi = rows[lo..]
                .iter()
                .position(|r| r.unit_id != rows[lo].unit_id || r.cluster_id != rows[lo].cluster_id)
                .map_or(rows.len(), |p| lo + p);
            let unit = &rows[lo];
            if let Some(prev) = unit_cluster.insert(&unit.unit_id, &unit.cluster_id) {
                if prev != unit.cluster_id {
                    return Err(Error::InvalidValue {
                        context: "RecurrentEventDataset".into(),
                        detail: format!(
                            "unit {} appears in clusters {} and {}",
                            unit.unit_id, prev, unit.cluster_id
                        ),
                    });
                }
            }
            let mut expected_enum = rows[lo].enum_count;
            for k in lo..hi {
                if k > lo && rows[k].start < rows[k - 1].stop - 1e-12 {
                    return Err(Error::NonChronologicalRows {
                        unit: rows[k].unit_id.clone(),
                        at: rows[k].start,
                    });
                }
                if rows[k].enum_count != expected_enum {
                    return Err(Error::InvalidValue {
                        context: "RecurrentEventDataset".into(),
                        detail: format!(
                            "unit {}: enum must increment by 1 exactly after event rows",
                            rows[k].unit_id
                        ),
                    });
                }
                if rows[k].status {
                    expected_enum += 1;
                }
            }
            units.push(UnitSpan {
                cluster_id: unit.cluster_id.clone(),
                unit_id: unit.unit_id.clone(),
                rows: lo..hi,
            });
            lo = hi;
        }

        Ok(Self {
            rows,
            window,
            mark_names,
            covariate_names,
            units,
        })
    }

    pub fn rows(&self) -> &[RecurrentEventRow] {
        &self.rows
    }

    pub fn units(&self) -> &[UnitSpan] {
        &self.units
    }

    pub fn unit_rows(&self, unit: &UnitSpan) -> &[RecurrentEventRow] {
        &self.rows[unit.rows.clone()]
    }

    pub fn window(&self) -> ObservationWindow {
        self.window
    }

    pub fn mark_names(&self) -> &[String] {
        &self.mark_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn total_events(&self) -> usize {
        self.rows.iter().filter(|r| r.status).count()
    }

    /// Resolve a model column by name; `enum` refers to the event counter.
    pub fn column(&self, name: &str) -> Option<ColumnRef> {
        if name == "enum" {
            return Some(ColumnRef::EnumCount);
        }
        if let Some(i) = self.mark_names.iter().position(|m| m == name) {
            return Some(ColumnRef::Mark(i));
        }
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .map(ColumnRef::Covariate)
    }

    pub fn row_value(&self, row: &RecurrentEventRow, col: ColumnRef) -> f64 {
        match col {
            ColumnRef::EnumCount => row.enum_count as f64,
            ColumnRef::Mark(i) => row.marks[i],
            ColumnRef::Covariate(i) => row.covariates[i],
        }
    }

    /// Number of events of one unit.
    pub fn unit_event_count(&self, unit: &UnitSpan) -> usize {
        self.unit_rows(unit).iter().filter(|r| r.status).count()
    }
}

/// Per-unit raw event history used to build the counting format.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEvents {
    pub cluster_id: String,
    pub unit_id: String,
    /// Event times in original units, strictly increasing, strictly inside the window.
    pub times: Vec<f64>,
    /// Event-day multiplicities (same length as `times`); `None` means one event per day.
    pub multiplicities: Option<Vec<f64>>,
    /// Enrollment count used to standardize the `dropout_count` mark.
    pub enrollment: Option<f64>,
}

impl UnitEvents {
    pub fn bare(cluster_id: &str, unit_id: &str, times: Vec<f64>) -> Self {
        Self {
            cluster_id: cluster_id.into(),
            unit_id: unit_id.into(),
            times,
            multiplicities: None,
            enrollment: None,
        }
    }
}

/// Build start/stop rows from per-unit event-time lists.
///
/// Each unit tiles `[0, 1]` (rescaled): rows end at event times with
/// `status = 1` and the final censored row ends at the window end. When any
/// unit carries multiplicities, a `dropout_count` mark column is emitted,
/// standardized by the unit's enrollment when supplied; the mark of a row is
/// the multiplicity of the event at its start (0 for the first row).
pub fn build_counting_format(
    units: &[UnitEvents],
    window: &ObservationWindow,
) -> Result<RecurrentEventDataset> {
    if units.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let with_marks = units.iter().any(|u| u.multiplicities.is_some());
    let mut missing_enrollment = false;
    let mut rows = Vec::new();

    for unit in units {
        if let Some(mult) = &unit.multiplicities {
            if mult.len() != unit.times.len() {
                return Err(Error::InvalidValue {
                    context: "build_counting_format".into(),
                    detail: format!("unit {}: multiplicity arity mismatch", unit.unit_id),
                });
            }
        }
        let mut times = Vec::with_capacity(unit.times.len());
        for (k, &t) in unit.times.iter().enumerate() {
            if !(t > window.t0() && t < window.t1()) {
                return Err(Error::OutOfWindow {
                    unit: unit.unit_id.clone(),
                    time: t,
                });
            }
            let u = window.rescale(t);
            if k > 0 && u <= *times.last().unwrap() {
                return Err(Error::DuplicateEventTime {
                    unit: unit.unit_id.clone(),
                    time: t,
                });
            }
            times.push(u);
        }

        let mut mark_at = |event_idx: Option<usize>| -> Vec<f64> {
            if !with_marks {
                return Vec::new();
            }
            let raw = match (event_idx, &unit.multiplicities) {
                (None, _) => 0.0,
                (Some(_), None) => 1.0,
                (Some(k), Some(m)) => m[k],
            };
            let value = match unit.enrollment {
                Some(e) if e > 0.0 => raw / e,
                _ => {
                    if event_idx.is_some() && unit.multiplicities.is_some() {
                        missing_enrollment = true;
                    }
                    raw
                }
            };
            vec![value]
        };

        // boundaries 0 = t_0 < t_1 < ... < t_N < t_{N+1} = 1; row k covers
        // (t_k, t_{k+1}] and ends with an event except for the censored tail
        let mut boundaries = vec![0.0];
        boundaries.extend_from_slice(&times);
        boundaries.push(1.0);
        for k in 0..boundaries.len() - 1 {
            rows.push(RecurrentEventRow {
                cluster_id: unit.cluster_id.clone(),
                unit_id: unit.unit_id.clone(),
                start: boundaries[k],
                stop: boundaries[k + 1],
                status: k < times.len(),
                enum_count: k as u32,
                marks: mark_at(if k == 0 { None } else { Some(k - 1) }),
                covariates: Vec::new(),
            });
        }
    }

    if missing_enrollment {
        log::warn!("enrollment missing for some units; dropout_count mark left unstandardized");
    }
    let mark_names = if with_marks {
        vec!["dropout_count".to_string()]
    } else {
        Vec::new()
    };
    RecurrentEventDataset::new(rows, *window, mark_names, Vec::new())
}

/// Column-name mapping for [`parse_event_table`]: canonical name -> header name.
/// Unmapped canonical names default to themselves.
#[derive(Debug, Clone, Default)]
pub struct EventTableSchema {
    pub columns: BTreeMap<String, String>,
}

impl EventTableSchema {
    fn resolve<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.columns.get(canonical).map_or(canonical, |s| s.as_str())
    }
}

/// Parse an events CSV in either the raw format
/// (`cluster_id,unit_id,time,multiplicity[,enrollment]`) or the counting
/// format (`cluster_id,unit_id,start,stop,status,enum,...`).
///
/// Raw rows with coincident (unit, time) pairs are collapsed into a single
/// jump with summed multiplicity; times may be ISO dates (against a date
/// window) or plain reals. A raw row with multiplicity 0 declares a unit at
/// risk with no event at that time.
pub fn parse_event_table(
    path: &Path,
    schema: &EventTableSchema,
    window: &WindowSpec,
) -> Result<RecurrentEventDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == schema.resolve(name));

    let col_cluster = find("cluster_id").ok_or_else(|| Error::MissingColumn("cluster_id".into()))?;
    let col_unit = find("unit_id").ok_or_else(|| Error::MissingColumn("unit_id".into()))?;

    if let (Some(col_start), Some(col_stop)) = (find("start"), find("stop")) {
        parse_counting_rows(
            reader,
            &headers,
            schema,
            window,
            col_cluster,
            col_unit,
            col_start,
            col_stop,
        )
    } else if let Some(col_time) = find("time") {
        parse_raw_rows(
            reader,
            window,
            col_cluster,
            col_unit,
            col_time,
            find("multiplicity"),
            find("enrollment"),
        )
    } else {
        Err(Error::MissingColumn("time (or start/stop)".into()))
    }
}

fn parse_raw_rows(
    mut reader: csv::Reader<std::fs::File>,
    window: &WindowSpec,
    col_cluster: usize,
    col_unit: usize,
    col_time: usize,
    col_mult: Option<usize>,
    col_enroll: Option<usize>,
) -> Result<RecurrentEventDataset> {
    let win = window.to_window()?;
    // (cluster, unit) -> time -> multiplicity, insertion-ordered units
    let mut order: Vec<(String, String)> = Vec::new();
    let mut events: BTreeMap<(String, String), BTreeMap<OrderedF64, f64>> = BTreeMap::new();
    let mut enrollments: BTreeMap<(String, String), f64> = BTreeMap::new();
    let has_mult = col_mult.is_some();

    for record in reader.records() {
        let record = record?;
        let key = (
            record
                .get(col_cluster)
                .unwrap_or_default()
                .trim()
                .to_string(),
            record.get(col_unit).unwrap_or_default().trim().to_string(),
        );
        let t = window.convert(record.get(col_time).unwrap_or_default())?;
        let mult = match col_mult {
            Some(c) => parse_f64(record.get(c).unwrap_or_default(), "multiplicity")?,
            None => 1.0,
        };
        if let Some(c) = col_enroll {
            let cell = record.get(c).unwrap_or_default().trim();
            if !cell.is_empty() {
                enrollments.insert(key.clone(), parse_f64(cell, "enrollment")?);
            }
        }
        if !events.contains_key(&key) {
            order.push(key.clone());
        }
        let unit_events = events.entry(key).or_default();
        if mult > 0.0 {
            *unit_events.entry(OrderedF64(t)).or_insert(0.0) += mult;
        } else {
            // declares the unit without contributing a jump
            unit_events.entry(OrderedF64(t)).or_insert(0.0);
        }
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let units: Vec<UnitEvents> = order
        .iter()
        .map(|key| {
            let evs = &events[key];
            let mut times = Vec::new();
            let mut mults = Vec::new();
            for (t, m) in evs {
                if *m > 0.0 {
                    times.push(t.0);
                    mults.push(*m);
                }
            }
            UnitEvents {
                cluster_id: key.0.clone(),
                unit_id: key.1.clone(),
                times,
                multiplicities: has_mult.then_some(mults),
                enrollment: enrollments.get(key).copied(),
            }
        })
        .collect();
    build_counting_format(&units, &win)
}

#[allow(clippy::too_many_arguments)]
fn parse_counting_rows(
    mut reader: csv::Reader<std::fs::File>,
    headers: &csv::StringRecord,
    schema: &EventTableSchema,
    window: &WindowSpec,
    col_cluster: usize,
    col_unit: usize,
    col_start: usize,
    col_stop: usize,
) -> Result<RecurrentEventDataset> {
    let win = window.to_window()?;
    let find = |name: &str| headers.iter().position(|h| h == schema.resolve(name));
    let col_status = find("status").ok_or_else(|| Error::MissingColumn("status".into()))?;
    let col_enum = find("enum").ok_or_else(|| Error::MissingColumn("enum".into()))?;

    let reserved = [col_cluster, col_unit, col_start, col_stop, col_status, col_enum];
    // extras keep header order; `dropout_count` is the known mark column
    let mut mark_cols = Vec::new();
    let mut cov_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if reserved.contains(&i) {
            continue;
        }
        if h == "dropout_count" {
            mark_cols.push((i, h.to_string()));
        } else {
            cov_cols.push((i, h.to_string()));
        }
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or_default().trim();
        let status_raw = parse_f64(get(col_status), "status")?;
        rows.push(RecurrentEventRow {
            cluster_id: get(col_cluster).to_string(),
            unit_id: get(col_unit).to_string(),
            start: win.rescale(window.convert(get(col_start))?),
            stop: win.rescale(window.convert(get(col_stop))?),
            status: status_raw != 0.0,
            enum_count: parse_f64(get(col_enum), "enum")? as u32,
            marks: mark_cols
                .iter()
                .map(|(i, _)| parse_f64(get(*i), "mark"))
                .collect::<Result<_>>()?,
            covariates: cov_cols
                .iter()
                .map(|(i, _)| parse_f64(get(*i), "covariate"))
                .collect::<Result<_>>()?,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    RecurrentEventDataset::new(
        rows,
        win,
        mark_cols.into_iter().map(|(_, n)| n).collect(),
        cov_cols.into_iter().map(|(_, n)| n).collect(),
    )
}

/// Write a dataset in the counting format. Times are written in the internal
/// rescaled units, so re-parsing against the unit window is the identity.
pub fn write_counting_csv<W: Write>(dataset: &RecurrentEventDataset, mut out: W) -> Result<()> {
    write!(out, "cluster_id,unit_id,start,stop,status,enum")?;
    for m in dataset.mark_names() {
        write!(out, ",{m}")?;
    }
    for c in dataset.covariate_names() {
        write!(out, ",{c}")?;
    }
    writeln!(out)?;
    for row in dataset.rows() {
        write!(
            out,
            "{},{},{},{},{},{}",
            row.cluster_id,
            row.unit_id,
            row.start,
            row.stop,
            u8::from(row.status),
            row.enum_count
        )?;
        for v in row.marks.iter().chain(&row.covariates) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Write per-unit raw events (`cluster_id,unit_id,time,multiplicity`) in
/// original time units. Units without events are declared with a single
/// multiplicity-0 row at the window midpoint.
pub fn write_raw_events_csv<W: Write>(
    units: &[UnitEvents],
    window: &ObservationWindow,
    mut out: W,
) -> Result<()> {
    let any_enrollment = units.iter().any(|u| u.enrollment.is_some());
    write!(out, "cluster_id,unit_id,time,multiplicity")?;
    if any_enrollment {
        write!(out, ",enrollment")?;
    }
    writeln!(out)?;
    let midpoint = 0.5 * (window.t0() + window.t1());
    for unit in units {
        let enroll = |out: &mut W| -> Result<()> {
            if any_enrollment {
                match unit.enrollment {
                    Some(e) => write!(out, ",{e}")?,
                    None => write!(out, ",")?,
                }
            }
            Ok(())
        };
        if unit.times.is_empty() {
            write!(out, "{},{},{},0", unit.cluster_id, unit.unit_id, midpoint)?;
            enroll(&mut out)?;
            writeln!(out)?;
            continue;
        }
        for (k, t) in unit.times.iter().enumerate() {
            let m = unit
                .multiplicities
                .as_ref()
                .map_or(1.0, |ms| ms[k]);
            write!(out, "{},{},{},{}", unit.cluster_id, unit.unit_id, t, m)?;
            enroll(&mut out)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn parse_f64(s: &str, context: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        context: context.into(),
        value: s.to_string(),
    })
}

/// Total order wrapper for finite f64 keys.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedF64(f64);

impl Eq for OrderedF64 {}

impl PartialOrd for OrderedF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.partial_cmp(&other.0).expect("finite time keys")
    }
}

// ---------------------------------------------------------------------------
// Student-level prediction data
// ---------------------------------------------------------------------------

macro_rules! categorical {
    ($name:ident { $($variant:ident => $label:literal),+ $(,)? }, $field:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const LEVELS: &'static [&'static str] = &[$($label),+];

            /// The reference category (first level).
            pub fn reference() -> &'static str {
                Self::LEVELS[0]
            }

            pub fn label(&self) -> &'static str {
                match self {
                    $(Self::$variant => $label),+
                }
            }

            pub fn field_name() -> &'static str {
                $field
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($label => Ok(Self::$variant),)+
                    _ => Err(Error::UnknownCategoryLevel {
                        field: $field.into(),
                        level: s.into(),
                    }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

categorical!(Origins { OnSite => "OnSite", Commuter => "Commuter", Offsite => "Offsite" }, "origins");
categorical!(Gender { Male => "Male", Female => "Female" }, "gender");
categorical!(HighschoolType {
    Scientific => "Scientific",
    Classical => "Classical",
    Others => "Others",
    Technical => "Technical",
}, "highschool_type");
categorical!(Income { Medium => "Medium", Grant => "Grant", High => "High", Low => "Low" }, "income");

/// A student with derived covariates, ready for the predictive model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub student_id: String,
    pub origins: Origins,
    pub gender: Gender,
    pub highschool_type: HighschoolType,
    pub income: Income,
    /// 1 iff age at enrollment > 19.
    pub age19: bool,
    pub admission_score: f64,
    pub ects1sem: u32,
    pub course_id: String,
    pub school_id: String,
    pub dropout3y: bool,
}

impl StudentRecord {
    fn validate(&self) -> Result<()> {
        if !(60.0..=100.0).contains(&self.admission_score) {
            return Err(Error::InvalidValue {
                context: format!("student {}", self.student_id),
                detail: format!("admission_score {} outside [60, 100]", self.admission_score),
            });
        }
        Ok(())
    }
}

/// Student records plus the reference category of each categorical field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDataset {
    pub records: Vec<StudentRecord>,
    pub reference_levels: BTreeMap<String, String>,
}

impl PredictionDataset {
    pub fn new(records: Vec<StudentRecord>) -> Result<Self> {
        for r in &records {
            r.validate()?;
        }
        let mut reference_levels = BTreeMap::new();
        reference_levels.insert("origins".to_string(), Origins::reference().to_string());
        reference_levels.insert("gender".to_string(), Gender::reference().to_string());
        reference_levels.insert(
            "highschool_type".to_string(),
            HighschoolType::reference().to_string(),
        );
        reference_levels.insert("income".to_string(), Income::reference().to_string());
        reference_levels.insert("age19".to_string(), "0".to_string());
        Ok(Self {
            records,
            reference_levels,
        })
    }
}

/// A raw administrative record before covariate derivation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStudentRecord {
    pub student_id: String,
    pub origins: String,
    pub gender: String,
    pub highschool_type: String,
    pub income: String,
    pub age_at_enrollment: f64,
    pub admission_score: f64,
    /// Credits of exams passed within the first semester.
    pub semester1_credits: Vec<u32>,
    pub course_id: String,
    pub school_id: String,
    pub dropout3y: bool,
}

/// Derive the dichotomic `age19` flag and the first-semester credit total,
/// mapping categorical fields onto their declared levels.
pub fn derive_student_covariates(raw: &[RawStudentRecord]) -> Result<PredictionDataset> {
    let records = raw
        .iter()
        .map(|r| {
            Ok(StudentRecord {
                student_id: r.student_id.clone(),
                origins: r.origins.parse()?,
                gender: r.gender.parse()?,
                highschool_type: r.highschool_type.parse()?,
                income: r.income.parse()?,
                age19: r.age_at_enrollment > 19.0,
                admission_score: r.admission_score,
                ects1sem: r.semester1_credits.iter().sum(),
                course_id: r.course_id.clone(),
                school_id: r.school_id.clone(),
                dropout3y: r.dropout3y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionDataset::new(records)
}

const STUDENT_HEADER: &str = "student_id,origins,gender,highschool_type,income,age19,admission_score,career_start_ay,ects1sem,course,school,dropout3y";

/// Write students in the Table-style CSV layout.
pub fn write_students_csv<W: Write>(dataset: &PredictionDataset, mut out: W) -> Result<()> {
    writeln!(out, "{STUDENT_HEADER}")?;
    for r in &dataset.records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},2017,{},{},{},{}",
            r.student_id,
            r.origins,
            r.gender,
            r.highschool_type,
            r.income,
            u8::from(r.age19),
            r.admission_score,
            r.ects1sem,
            r.course_id,
            r.school_id,
            u8::from(r.dropout3y)
        )?;
    }
    Ok(())
}

/// Read a students CSV with derived covariates.
pub fn read_students_csv(path: &Path) -> Result<PredictionDataset> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    let idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.into()))
    };
    let (c_id, c_or, c_ge, c_hs, c_in) = (
        idx("student_id")?,
        idx("origins")?,
        idx("gender")?,
        idx("highschool_type")?,
        idx("income")?,
    );
    let (c_age, c_adm, c_ects, c_course, c_school, c_drop) = (
        idx("age19")?,
        idx("admission_score")?,
        idx("ects1sem")?,
        idx("course")?,
        idx("school")?,
        idx("dropout3y")?,
    );
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or_default().trim();
        records.push(StudentRecord {
            student_id: get(c_id).to_string(),
            origins: get(c_or).parse()?,
            gender: get(c_ge).parse()?,
            highschool_type: get(c_hs).parse()?,
            income: get(c_in).parse()?,
            age19: parse_f64(get(c_age), "age19")? != 0.0,
            admission_score: parse_f64(get(c_adm), "admission_score")?,
            ects1sem: parse_f64(get(c_ects), "ects1sem")? as u32,
            course_id: get(c_course).to_string(),
            school_id: get(c_school).to_string(),
            dropout3y: parse_f64(get(c_drop), "dropout3y")? != 0.0,
        });
    }
    PredictionDataset::new(records)
}

// ---------------------------------------------------------------------------
// Descriptive statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NumericSummary {
    pub name: String,
    /// Index 0: dropout3y = 0, index 1: dropout3y = 1.
    pub groups: [GroupStats; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelCount {
    pub level: String,
    pub counts: [usize; 2],
    pub percents: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoricalSummary {
    pub name: String,
    pub levels: Vec<LevelCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryTable {
    pub group_sizes: [usize; 2],
    pub numeric: Vec<NumericSummary>,
    pub categorical: Vec<CategoricalSummary>,
}

/// Descriptive statistics by dropout status: mean/sd for numeric covariates,
/// counts and within-group percentages for categorical ones.
pub fn summarize(dataset: &PredictionDataset) -> Result<SummaryTable> {
    if dataset.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let group_of = |r: &StudentRecord| usize::from(r.dropout3y);
    let mut group_sizes = [0usize; 2];
    for r in &dataset.records {
        group_sizes[group_of(r)] += 1;
    }

    let numeric_stats = |extract: &dyn Fn(&StudentRecord) -> f64| -> [GroupStats; 2] {
        let mut out = [
            GroupStats { n: 0, mean: 0.0, sd: 0.0 },
            GroupStats { n: 0, mean: 0.0, sd: 0.0 },
        ];
        for g in 0..2 {
            let values: Vec<f64> = dataset
                .records
                .iter()
                .filter(|r| group_of(r) == g)
                .map(extract)
                .collect();
            let n = values.len();
            let mean = if n == 0 {
                0.0
            } else {
                values.iter().sum::<f64>() / n as f64
            };
            let sd = if n <= 1 {
                0.0
            } else {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
            };
            out[g] = GroupStats { n, mean, sd };
        }
        out
    };

    let categorical_counts =
        |name: &str, levels: &[&str], extract: &dyn Fn(&StudentRecord) -> String| {
            let mut out = Vec::new();
            for level in levels {
                let mut counts = [0usize; 2];
                for r in &dataset.records {
                    if extract(r) == *level {
                        counts[group_of(r)] += 1;
                    }
                }
                let percents = [0, 1].map(|g| {
                    if group_sizes[g] == 0 {
                        0.0
                    } else {
                        100.0 * counts[g] as f64 / group_sizes[g] as f64
                    }
                });
                out.push(LevelCount {
                    level: level.to_string(),
                    counts,
                    percents,
                });
            }
            CategoricalSummary {
                name: name.to_string(),
                levels: out,
            }
        };

    Ok(SummaryTable {
        group_sizes,
        numeric: vec![
            NumericSummary {
                name: "admission_score".into(),
                groups: numeric_stats(&|r| r.admission_score),
            },
            NumericSummary {
                name: "ects1sem".into(),
                groups: numeric_stats(&|r| r.ects1sem as f64),
            },
        ],
        categorical: vec![
            categorical_counts("origins", Origins::LEVELS, &|r| r.origins.to_string()),
            categorical_counts("gender", Gender::LEVELS, &|r| r.gender.to_string()),
            categorical_counts("highschool_type", HighschoolType::LEVELS, &|r| {
                r.highschool_type.to_string()
            }),
            categorical_counts("income", Income::LEVELS, &|r| r.income.to_string()),
            categorical_counts("age19", &["0", "1"], &|r| {
                u8::from(r.age19).to_string()
            }),
        ],
    })
}
