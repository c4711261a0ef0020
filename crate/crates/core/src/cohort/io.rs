use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Admission, CohortError, InterventionCategory, InterventionEvent, Lab, ObservationEvent,
    OrderEvent, TraitId,
};

pub const EVENT_HEADER: [&str; 5] = [
    "admission_id",
    "kind",
    "trait_or_category",
    "timestamp_hours",
    "value",
];

/// Writes admissions in the event CSV format.
pub fn write_events<W: Write>(writer: W, admissions: &[Admission]) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVENT_HEADER)?;
    for adm in admissions {
        let id = adm.admission_id.as_str();
        for e in &adm.events {
            w.write_record([
                id,
                "obs",
                e.trait_id.name(),
                &e.timestamp.to_string(),
                &e.value.to_string(),
            ])?;
        }
        for o in &adm.orders {
            w.write_record([id, "order", o.lab.name(), &o.timestamp.to_string(), ""])?;
        }
        for iv in &adm.interventions {
            w.write_record([
                id,
                "intervention",
                iv.category.name(),
                &iv.onset.to_string(),
                &iv.duration.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_events(path: &Path, admissions: &[Admission]) -> Result<(), CohortError> {
    let file = std::fs::File::create(path)?;
    write_events(std::io::BufWriter::new(file), admissions)
}

/// Admissions removed by the cohort filters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub length_of_stay: usize,
    pub missing_trait: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub admissions_read: usize,
    pub retained: usize,
    pub dropped: DropCounts,
    /// Lab observations that arrived without an order and were given one.
    pub implied_orders: usize,
    /// Drop reason per removed admission id.
    pub drop_reasons: BTreeMap<String, String>,
}

fn parse_err(line: u64, message: impl Into<String>) -> CohortError {
    CohortError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(field: &str, line: u64, what: &str) -> Result<f64, CohortError> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("invalid {what} '{field}'")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite {what}")));
    }
    Ok(v)
}

/// Parses an event CSV, applies the length-of-stay and required-trait
/// filters and returns the retained admissions with a drop report.
pub fn read_events<R: Read>(reader: R) -> Result<(Vec<Admission>, IngestReport), CohortError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(CohortError::EmptyCohort),
        Some(h) => h?,
    };
    let header: Vec<&str> = header.iter().map(str::trim).collect();
    if header != EVENT_HEADER {
        return Err(parse_err(1, format!("unexpected header {:?}", header)));
    }

    let mut index: HashMap<String, usize> = HashMap::new();
    let mut raw: Vec<Admission> = Vec::new();
    let mut rows = 0;
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 5 {
            return Err(parse_err(line, format!("expected 5 fields, found {}", record.len())));
        }
        rows += 1;
        let id = record[0].trim();
        if id.is_empty() {
            return Err(parse_err(line, "empty admission_id"));
        }
        let name = record[2].trim();
        let timestamp = parse_f64(&record[3], line, "timestamp")?;
        if timestamp < 0.0 {
            return Err(parse_err(line, "negative timestamp"));
        }
        let slot = *index.entry(id.to_string()).or_insert_with(|| {
            raw.push(Admission {
                admission_id: id.to_string(),
                length_of_stay: 0,
                events: Vec::new(),
                orders: Vec::new(),
                interventions: Vec::new(),
            });
            raw.len() - 1
        });
        let adm = &mut raw[slot];
        match record[1].trim() {
            "obs" => {
                let trait_id = TraitId::parse(name)
                    .ok_or_else(|| parse_err(line, format!("unknown trait '{name}'")))?;
                let value = parse_f64(&record[4], line, "value")?;
                adm.events.push(ObservationEvent {
                    trait_id,
                    timestamp,
                    value,
                });
            }
            "order" => {
                let lab = TraitId::parse(name)
                    .and_then(TraitId::as_lab)
                    .ok_or_else(|| parse_err(line, format!("'{name}' is not an orderable lab")))?;
                adm.orders.push(OrderEvent { lab, timestamp });
            }
            "intervention" => {
                let category = InterventionCategory::parse(name)
                    .ok_or_else(|| parse_err(line, format!("unknown intervention '{name}'")))?;
                let duration = parse_f64(&record[4], line, "duration")?;
                if duration <= 0.0 {
                    return Err(parse_err(line, "intervention duration must be positive"));
                }
                adm.interventions.push(InterventionEvent {
                    category,
                    onset: timestamp,
                    duration,
                });
            }
            other => return Err(parse_err(line, format!("unknown kind '{other}'"))),
        }
    }
    if raw.is_empty() {
        return Err(CohortError::EmptyCohort);
    }

    let mut report = IngestReport {
        rows,
        admissions_read: raw.len(),
        retained: 0,
        dropped: DropCounts::default(),
        implied_orders: 0,
        drop_reasons: BTreeMap::new(),
    };
    let mut kept = Vec::new();
    for mut adm in raw {
        let last = adm
            .events
            .iter()
            .map(|e| e.timestamp)
            .chain(adm.orders.iter().map(|o| o.timestamp))
            .chain(adm.interventions.iter().map(|i| i.onset))
            .fold(0.0f64, f64::max);
        adm.length_of_stay = last.ceil().max(1.0) as u32;
        if !adm.los_in_range() {
            report.dropped.length_of_stay += 1;
            report
                .drop_reasons
                .insert(adm.admission_id.clone(), "length_of_stay".into());
            continue;
        }
        if TraitId::REQUIRED
            .iter()
            .any(|&t| adm.observations_of(t).next().is_none())
        {
            report.dropped.missing_trait += 1;
            report
                .drop_reasons
                .insert(adm.admission_id.clone(), "missing trait".into());
            continue;
        }
        if adm.observations_of(TraitId::Dopamine).next().is_none() {
            adm.events.push(ObservationEvent {
                trait_id: TraitId::Dopamine,
                timestamp: 0.0,
                value: 0.0,
            });
        }
        for lab in Lab::ALL {
            let missing: Vec<f64> = adm
                .observations_of(lab.trait_id())
                .map(|e| e.timestamp)
                .filter(|t| !adm.orders.iter().any(|o| o.lab == lab && o.timestamp == *t))
                .collect();
            report.implied_orders += missing.len();
            adm.orders
                .extend(missing.into_iter().map(|timestamp| OrderEvent { lab, timestamp }));
        }
        adm.canonicalize();
        kept.push(adm);
    }
    report.retained = kept.len();
    Ok((kept, report))
}

pub fn ingest_events(path: &Path) -> Result<(Vec<Admission>, IngestReport), CohortError> {
    let file = std::fs::File::open(path)?;
    read_events(std::io::BufReader::new(file))
}
