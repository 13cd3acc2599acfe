//! Failure-count panels: ingestion, standardization, tertile classification
//! into deterioration states, and synthetic panel generation.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::ctmc::RateParams;
use crate::error::{Error, Result};
use crate::hmm;
use crate::stats;

/// Deterioration state, labelled 1..=3 in files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum State {
    Normal,
    NearFailure,
    Failure,
}

impl State {
    pub const ALL: [State; 3] = [State::Normal, State::NearFailure, State::Failure];

    /// Zero-based index into state vectors.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_index(i: usize) -> Option<State> {
        Self::ALL.get(i).copied()
    }

    pub fn from_label(label: u8) -> Option<State> {
        label
            .checked_sub(1)
            .and_then(|i| Self::from_index(i as usize))
    }
}

impl From<State> for u8 {
    fn from(s: State) -> u8 {
        s.label()
    }
}

impl TryFrom<u8> for State {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        State::from_label(v).ok_or_else(|| format!("state must be 1, 2 or 3, got {v}"))
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShipRecord {
    pub ship_id: String,
    /// 1-based engine type index.
    pub engine_type: usize,
    /// Failure count at ages `1..=max_age`; `counts[t - 1]` is age `t`.
    pub counts: Vec<Option<f64>>,
}

/// Ship × age grid of failure counts.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetPanel {
    ships: Vec<ShipRecord>,
    max_age: usize,
    n_engine_types: usize,
}

impl FleetPanel {
    pub fn new(ships: Vec<ShipRecord>, max_age: usize, n_engine_types: usize) -> Result<Self> {
        check_ships(
            ships
                .iter()
                .map(|s| (&s.ship_id, s.engine_type, s.counts.len())),
            max_age,
            n_engine_types,
        )?;
        for s in &ships {
            if let Some(v) = s.counts.iter().flatten().find(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "ship {}: non-finite count {v}",
                    s.ship_id
                )));
            }
        }
        Ok(FleetPanel {
            ships,
            max_age,
            n_engine_types,
        })
    }

    pub fn ships(&self) -> &[ShipRecord] {
        &self.ships
    }

    pub fn max_age(&self) -> usize {
        self.max_age
    }

    pub fn n_engine_types(&self) -> usize {
        self.n_engine_types
    }

    pub fn n_observed(&self) -> usize {
        self.ships
            .iter()
            .map(|s| s.counts.iter().flatten().count())
            .sum()
    }

    pub fn n_missing(&self) -> usize {
        self.ships.len() * self.max_age - self.n_observed()
    }

    pub fn observed_values(&self) -> Vec<f64> {
        self.ships
            .iter()
            .flat_map(|s| s.counts.iter().flatten().copied())
            .collect()
    }

    /// Returns a copy with every count transformed by `f(engine_type, value)`.
    pub fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> FleetPanel {
        let ships = self
            .ships
            .iter()
            .map(|s| ShipRecord {
                ship_id: s.ship_id.clone(),
                engine_type: s.engine_type,
                counts: s
                    .counts
                    .iter()
                    .map(|c| c.map(|v| f(s.engine_type, v)))
                    .collect(),
            })
            .collect();
        FleetPanel {
            ships,
            max_age: self.max_age,
            n_engine_types: self.n_engine_types,
        }
    }
}

fn check_ships<'a>(
    ships: impl Iterator<Item = (&'a String, usize, usize)>,
    max_age: usize,
    n_engine_types: usize,
) -> Result<()> {
    if max_age == 0 {
        return Err(Error::InvalidInput("max_age must be at least 1".into()));
    }
    let mut seen = HashMap::new();
    for (id, engine, len) in ships {
        if len != max_age {
            return Err(Error::InvalidInput(format!(
                "ship {id} has {len} ages, expected {max_age}"
            )));
        }
        if engine == 0 || engine > n_engine_types {
            return Err(Error::InvalidInput(format!(
                "ship {id}: engine type {engine} outside 1..={n_engine_types}"
            )));
        }
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::InvalidInput(format!("duplicate ship id {id}")));
        }
    }
    Ok(())
}

/// One parsed CSV row: ship id, engine type, age, optional value.
struct CellRow<T> {
    line: u64,
    ship_id: String,
    engine_type: usize,
    age: usize,
    value: Option<T>,
}

/// Reads `ship_id,engine_type,<age>,<value>` rows, enforcing unique
/// (ship, age) cells and a consistent engine type per ship. Returns ships
/// in order of first appearance together with the inferred (or checked)
/// max age and engine-type count.
#[allow(clippy::type_complexity)]
fn read_cells<R: Read, T>(
    reader: R,
    source: &Path,
    value_column: &str,
    max_age: Option<usize>,
    parse: impl Fn(&str) -> std::result::Result<Option<T>, String>,
) -> Result<(Vec<(String, usize, Vec<Option<T>>)>, usize, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::schema(source, e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(Error::schema(source, "no records"));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::schema(source, format!("missing column `{name}`")))
    };
    let (c_id, c_engine, c_age, c_value) = (
        col("ship_id")?,
        col("engine_type")?,
        col("age")?,
        col(value_column)?,
    );

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::schema(source, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |msg: String| Error::schema(source, format!("line {line}: {msg}"));
        let ship_id = field(c_id).to_string();
        if ship_id.is_empty() {
            return Err(bad("empty ship_id".into()));
        }
        let engine_type: usize = field(c_engine).parse().map_err(|_| {
            bad(format!(
                "engine_type `{}` is not a positive integer",
                field(c_engine)
            ))
        })?;
        if engine_type == 0 {
            return Err(bad("engine_type must be at least 1".into()));
        }
        let age: usize = field(c_age)
            .parse()
            .map_err(|_| bad(format!("age `{}` is not a positive integer", field(c_age))))?;
        if age == 0 || max_age.is_some_and(|m| age > m) {
            return Err(bad(format!(
                "age {age} outside 1..={}",
                max_age.map_or("max_age".to_string(), |m| m.to_string())
            )));
        }
        let value = parse(field(c_value)).map_err(bad)?;
        rows.push(CellRow {
            line,
            ship_id,
            engine_type,
            age,
            value,
        });
    }
    if rows.is_empty() {
        return Err(Error::schema(source, "no records"));
    }

    let max_age = max_age.unwrap_or_else(|| rows.iter().map(|r| r.age).max().unwrap_or(1));
    let n_engine_types = rows.iter().map(|r| r.engine_type).max().unwrap_or(1);
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut ships: Vec<(String, usize, Vec<Option<T>>)> = Vec::new();
    let mut first_line: HashMap<(usize, usize), u64> = HashMap::new();
    for row in rows {
        let idx = *index.entry(row.ship_id.clone()).or_insert_with(|| {
            ships.push((
                row.ship_id.clone(),
                row.engine_type,
                (0..max_age).map(|_| None).collect(),
            ));
            ships.len() - 1
        });
        let ship = &mut ships[idx];
        if ship.1 != row.engine_type {
            return Err(Error::schema(
                source,
                format!(
                    "line {}: ship {} has engine type {} but earlier rows say {}",
                    row.line, row.ship_id, row.engine_type, ship.1
                ),
            ));
        }
        if let Some(prev) = first_line.insert((idx, row.age), row.line) {
            return Err(Error::schema(
                source,
                format!(
                    "duplicate cell (ship {}, age {}) on lines {} and {}",
                    row.ship_id, row.age, prev, row.line
                ),
            ));
        }
        ship.2[row.age - 1] = row.value;
    }
    Ok((ships, max_age, n_engine_types))
}

fn parse_count(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| format!("count `{s}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("count `{s}` is not finite"));
    }
    Ok(Some(v))
}

/// Reads a count panel from CSV with header `ship_id,engine_type,age,count`.
/// Absent (ship, age) rows and empty `count` fields become missing cells.
/// When `max_age` is `None` it is taken as the largest age present.
pub fn read_panel<R: Read>(reader: R, source: &Path, max_age: Option<usize>) -> Result<FleetPanel> {
    let (ships, max_age, n_types) = read_cells(reader, source, "count", max_age, parse_count)?;
    let ships = ships
        .into_iter()
        .map(|(ship_id, engine_type, counts)| ShipRecord {
            ship_id,
            engine_type,
            counts,
        })
        .collect();
    FleetPanel::new(ships, max_age, n_types)
}

pub fn load_panel(path: impl AsRef<Path>, max_age: Option<usize>) -> Result<FleetPanel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file, path, max_age)
}

/// Writes one row per (ship, age) cell; missing counts are left empty.
pub fn write_panel<W: Write>(panel: &FleetPanel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
    w.write_record(["ship_id", "engine_type", "age", "count"])
        .map_err(wrap)?;
    for s in panel.ships() {
        for (t, c) in s.counts.iter().enumerate() {
            let count = c.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                s.ship_id.as_str(),
                &s.engine_type.to_string(),
                &(t + 1).to_string(),
                &count,
            ])
            .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

/// Divisor convention for the standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdConvention {
    /// `n - 1` divisor.
    #[default]
    Sample,
    /// `n` divisor.
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: f64,
    pub sd: f64,
}

impl Affine {
    fn fit(values: &[f64], convention: SdConvention, what: &str) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "standardizing {what} needs at least 2 observed cells, found {}",
                values.len()
            )));
        }
        let ddof = match convention {
            SdConvention::Sample => 1,
            SdConvention::Population => 0,
        };
        let mean = stats::mean(values);
        let sd = stats::variance(values, ddof).sqrt();
        if !(sd > 0.0) {
            return Err(Error::InvalidInput(format!(
                "{what} has zero variance; cannot standardize"
            )));
        }
        Ok(Affine { mean, sd })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Fitted standardization transform. `mean`/`sd` are the fleet-wide pooled
/// values; `by_engine`, when present, overrides them per engine type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_engine: Option<Vec<Affine>>,
}

impl Standardization {
    fn affine_for(&self, engine_type: usize) -> Affine {
        match &self.by_engine {
            Some(per) => per[engine_type - 1],
            None => Affine {
                mean: self.mean,
                sd: self.sd,
            },
        }
    }

    /// Applies the stored transform, e.g. to held-out data.
    pub fn apply(&self, panel: &FleetPanel) -> Result<FleetPanel> {
        if let Some(per) = &self.by_engine {
            if per.len() < panel.n_engine_types() {
                return Err(Error::InvalidInput(format!(
                    "transform covers {} engine types, panel has {}",
                    per.len(),
                    panel.n_engine_types()
                )));
            }
        }
        Ok(panel.map_values(|k, v| self.affine_for(k).apply(v)))
    }

    pub fn invert(&self, panel: &FleetPanel) -> FleetPanel {
        panel.map_values(|k, v| self.affine_for(k).invert(v))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StandardizeOptions {
    pub by_engine: bool,
    pub convention: SdConvention,
}

/// Centers and scales every observed cell with mean and sd pooled over the
/// whole fleet (or per engine type with `by_engine`).
pub fn standardize(
    panel: &FleetPanel,
    options: StandardizeOptions,
) -> Result<(FleetPanel, Standardization)> {
    let pooled = Affine::fit(&panel.observed_values(), options.convention, "panel")?;
    let by_engine = if options.by_engine {
        let per = (1..=panel.n_engine_types())
            .map(|k| {
                let vals: Vec<f64> = panel
                    .ships()
                    .iter()
                    .filter(|s| s.engine_type == k)
                    .flat_map(|s| s.counts.iter().flatten().copied())
                    .collect();
                Affine::fit(&vals, options.convention, &format!("engine type {k}"))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(per)
    } else {
        None
    };
    let transform = Standardization {
        mean: pooled.mean,
        sd: pooled.sd,
        by_engine,
    };
    Ok((transform.apply(panel)?, transform))
}

/// Boundaries between the three states on the standardized scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateThresholds {
    pub b1: f64,
    pub b2: f64,
    pub lo: f64,
    pub hi: f64,
}

impl StateThresholds {
    pub fn new(b1: f64, b2: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < b1 && b1 < b2 && b2 < hi) {
            return Err(Error::InvalidInput(format!(
                "thresholds must satisfy lo < b1 < b2 < hi, got {lo}, {b1}, {b2}, {hi}"
            )));
        }
        Ok(StateThresholds { b1, b2, lo, hi })
    }

    /// `[lo, b1)` → 1, `[b1, b2)` → 2, `[b2, hi]` → 3. Values outside
    /// `[lo, hi]` are classified by the two inner boundaries alone.
    pub fn classify_value(&self, v: f64) -> State {
        if v < self.b1 {
            State::Normal
        } else if v < self.b2 {
            State::NearFailure
        } else {
            State::Failure
        }
    }
}

/// Tertile boundaries of the observed (standardized) values.
pub fn fit_thresholds(panel: &FleetPanel) -> Result<StateThresholds> {
    let values = panel.observed_values();
    if values.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "threshold fitting needs at least 3 observed cells, found {}",
            values.len()
        )));
    }
    let sorted = stats::sorted(&values);
    let b1 = stats::quantile_sorted(&sorted, 1.0 / 3.0);
    let b2 = stats::quantile_sorted(&sorted, 2.0 / 3.0);
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    if lo == hi {
        return Err(Error::InvalidInput(
            "all observed values are equal; tertile thresholds undefined".into(),
        ));
    }
    if !(lo < b1 && b1 < b2 && b2 < hi) {
        return Err(Error::InvalidInput(format!(
            "ties collapse the tertile thresholds (lo {lo}, b1 {b1}, b2 {b2}, hi {hi})"
        )));
    }
    Ok(StateThresholds { b1, b2, lo, hi })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateRecord {
    pub ship_id: String,
    pub engine_type: usize,
    /// `states[t - 1]` is the state at age `t`.
    pub states: Vec<Option<State>>,
}

/// Ship × age grid of (possibly missing) deterioration states.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePanel {
    ships: Vec<StateRecord>,
    max_age: usize,
    n_engine_types: usize,
}

impl StatePanel {
    pub fn new(ships: Vec<StateRecord>, max_age: usize, n_engine_types: usize) -> Result<Self> {
        check_ships(
            ships
                .iter()
                .map(|s| (&s.ship_id, s.engine_type, s.states.len())),
            max_age,
            n_engine_types,
        )?;
        Ok(StatePanel {
            ships,
            max_age,
            n_engine_types,
        })
    }

    pub fn ships(&self) -> &[StateRecord] {
        &self.ships
    }

    pub fn max_age(&self) -> usize {
        self.max_age
    }

    pub fn n_engine_types(&self) -> usize {
        self.n_engine_types
    }

    pub fn n_ships(&self) -> usize {
        self.ships.len()
    }

    pub fn n_observed(&self) -> usize {
        self.ships
            .iter()
            .map(|s| s.states.iter().flatten().count())
            .sum()
    }

    /// Panel restricted to the ships at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> StatePanel {
        StatePanel {
            ships: indices.iter().map(|&i| self.ships[i].clone()).collect(),
            max_age: self.max_age,
            n_engine_types: self.n_engine_types,
        }
    }

    /// `counts[t - 1][s]`: number of ships observed in state `s` at age `t`.
    pub fn state_counts(&self) -> Vec<[u64; 3]> {
        let mut counts = vec![[0u64; 3]; self.max_age];
        for s in &self.ships {
            for (t, st) in s.states.iter().enumerate() {
                if let Some(st) = st {
                    counts[t][st.index()] += 1;
                }
            }
        }
        counts
    }
}

/// Maps each standardized value to its state; missing stays missing.
pub fn classify(panel: &FleetPanel, thresholds: &StateThresholds) -> StatePanel {
    let ships = panel
        .ships()
        .iter()
        .map(|s| StateRecord {
            ship_id: s.ship_id.clone(),
            engine_type: s.engine_type,
            states: s
                .counts
                .iter()
                .map(|c| c.map(|v| thresholds.classify_value(v)))
                .collect(),
        })
        .collect();
    StatePanel {
        ships,
        max_age: panel.max_age(),
        n_engine_types: panel.n_engine_types(),
    }
}

fn parse_state(s: &str) -> std::result::Result<Option<State>, String> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<u8>()
        .ok()
        .and_then(State::from_label)
        .map(Some)
        .ok_or_else(|| format!("state `{s}` is not 1, 2 or 3"))
}

/// Reads `ship_id,engine_type,age,state`; empty `state` means unobserved.
pub fn read_states<R: Read>(
    reader: R,
    source: &Path,
    max_age: Option<usize>,
) -> Result<StatePanel> {
    let (ships, max_age, n_types) = read_cells(reader, source, "state", max_age, parse_state)?;
    let ships = ships
        .into_iter()
        .map(|(ship_id, engine_type, states)| StateRecord {
            ship_id,
            engine_type,
            states,
        })
        .collect();
    StatePanel::new(ships, max_age, n_types)
}

pub fn load_states(path: impl AsRef<Path>, max_age: Option<usize>) -> Result<StatePanel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_states(file, path, max_age)
}

pub fn write_states<W: Write>(panel: &StatePanel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
    w.write_record(["ship_id", "engine_type", "age", "state"])
        .map_err(wrap)?;
    for s in panel.ships() {
        for (t, st) in s.states.iter().enumerate() {
            let state = st.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                s.ship_id.as_str(),
                &s.engine_type.to_string(),
                &(t + 1).to_string(),
                &state,
            ])
            .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

/// Fleet dimensions for synthetic panels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelShape {
    pub n_ships: usize,
    pub max_age: usize,
    pub n_engine_types: usize,
}

fn ship_label(j: usize, n: usize) -> String {
    let width = n.to_string().len().max(3);
    format!("ship{:0width$}", j + 1)
}

/// Draws each cell independently from the shared state distribution `d(t)`
/// and masks cells i.i.d. with probability `missingness`. Engine types are
/// assigned round-robin.
pub fn simulate_panel(
    params: &RateParams,
    shape: PanelShape,
    missingness: f64,
    seed: u64,
) -> Result<StatePanel> {
    if !(0.0..1.0).contains(&missingness) {
        return Err(Error::InvalidParameter(format!(
            "missingness must lie in [0, 1), got {missingness}"
        )));
    }
    if shape.n_ships == 0 || shape.n_engine_types == 0 {
        return Err(Error::InvalidParameter(
            "fleet shape needs at least one ship and one engine type".into(),
        ));
    }
    let traj = hmm::evolve(params, shape.max_age)?;
    let mut rng = crate::seeded_rng(seed, 0);
    let ships = (0..shape.n_ships)
        .map(|j| {
            let states = traj
                .dists()
                .iter()
                .map(|d| {
                    let state = d.sample(&mut rng);
                    let masked = missingness > 0.0 && rng.random::<f64>() < missingness;
                    (!masked).then_some(state)
                })
                .collect();
            StateRecord {
                ship_id: ship_label(j, shape.n_ships),
                engine_type: j % shape.n_engine_types + 1,
                states,
            }
        })
        .collect();
    StatePanel::new(ships, shape.max_age, shape.n_engine_types)
}

/// Poisson failure-count levels per state, used to turn a synthetic state
/// panel into a raw count panel.
pub const DEFAULT_COUNT_LEVELS: [f64; 3] = [1.5, 4.0, 8.0];

/// Draws a raw failure count for every observed cell from a Poisson with
/// the state's mean level; unobserved cells stay missing.
pub fn simulate_counts(states: &StatePanel, levels: [f64; 3], seed: u64) -> Result<FleetPanel> {
    let dists = levels
        .iter()
        .map(|&m| {
            Poisson::new(m).map_err(|e| Error::InvalidParameter(format!("count level {m}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = crate::seeded_rng(seed, 1);
    let ships = states
        .ships()
        .iter()
        .map(|s| ShipRecord {
            ship_id: s.ship_id.clone(),
            engine_type: s.engine_type,
            counts: s
                .states
                .iter()
                .map(|st| st.map(|st| dists[st.index()].sample(&mut rng)))
                .collect(),
        })
        .collect();
    FleetPanel::new(ships, states.max_age(), states.n_engine_types())
}
