//! Irregularly sampled multivariate longitudinal datasets and their CSV form.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LgpError, Result};

/// Offset applied to the later of two equal timestamps within one person.
pub const TIE_OFFSET: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResponseValue {
    Continuous(f64),
    Ordinal(u32),
    Missing,
}

impl ResponseValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, ResponseValue::Missing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ItemType {
    Continuous,
    /// Levels 0..=max_level.
    Ordinal { max_level: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub individual_id: String,
    pub time: f64,
    pub values: Vec<ResponseValue>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateProfile {
    pub group: Option<String>,
    pub extras: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndividualSeries {
    pub id: String,
    pub times: Vec<f64>,
    /// One row of J responses per time point.
    pub responses: Vec<Vec<ResponseValue>>,
    pub covariates: CovariateProfile,
}

impl IndividualSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub individuals: Vec<IndividualSeries>,
    pub item_names: Vec<String>,
    pub item_types: Vec<ItemType>,
    /// Declared group labels; empty for an ungrouped dataset.
    pub groups: Vec<String>,
    pub time_horizon: f64,
}

impl Dataset {
    pub fn new(
        individuals: Vec<IndividualSeries>,
        item_names: Vec<String>,
        item_types: Vec<ItemType>,
        groups: Vec<String>,
        time_horizon: f64,
    ) -> Result<Self> {
        let d = Dataset {
            individuals,
            item_names,
            item_types,
            groups,
            time_horizon,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n_items(&self) -> usize {
        self.item_types.len()
    }

    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    pub fn n_observations(&self) -> usize {
        self.individuals.iter().map(|s| s.len()).sum()
    }

    pub fn is_grouped(&self) -> bool {
        !self.groups.is_empty()
    }

    /// Index of an individual's group in `groups`, or 0 when ungrouped.
    pub fn group_index(&self, i: usize) -> usize {
        match &self.individuals[i].covariates.group {
            Some(g) => self.groups.iter().position(|x| x == g).unwrap_or(0),
            None => 0,
        }
    }

    /// New dataset made of the given individuals (repeats allowed). Repeated
    /// individuals get a `#k` suffix on their id.
    pub fn resample(&self, indices: &[usize]) -> Dataset {
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let individuals = indices
            .iter()
            .map(|&i| {
                let k = seen.entry(i).or_insert(0);
                let mut s = self.individuals[i].clone();
                if *k > 0 {
                    s.id = format!("{}#{}", s.id, k);
                }
                *k += 1;
                s
            })
            .collect();
        Dataset {
            individuals,
            ..self.clone_shell()
        }
    }

    fn clone_shell(&self) -> Dataset {
        Dataset {
            individuals: Vec::new(),
            item_names: self.item_names.clone(),
            item_types: self.item_types.clone(),
            groups: self.groups.clone(),
            time_horizon: self.time_horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LgpError::InvalidDataset(m));
        if self.individuals.is_empty() {
            return bad("dataset has no individuals".into());
        }
        if self.item_types.is_empty() {
            return bad("dataset has no items".into());
        }
        if self.item_names.len() != self.item_types.len() {
            return bad("item names and item types differ in length".into());
        }
        if !(self.time_horizon > 0.0) {
            return bad(format!("time horizon must be positive, got {}", self.time_horizon));
        }
        let j = self.item_types.len();
        for s in &self.individuals {
            if s.times.is_empty() {
                return bad(format!("individual {} has no observations", s.id));
            }
            if s.responses.len() != s.times.len() {
                return bad(format!("individual {}: times and responses differ", s.id));
            }
            if s.times.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("individual {}: times not strictly increasing", s.id));
            }
            if s.times.iter().any(|&t| !(0.0..=self.time_horizon).contains(&t)) {
                return bad(format!(
                    "individual {}: time outside [0, {}]",
                    s.id, self.time_horizon
                ));
            }
            match (&s.covariates.group, self.groups.is_empty()) {
                (Some(g), false) if !self.groups.contains(g) => {
                    return bad(format!("individual {}: unknown group {g}", s.id));
                }
                (None, false) => return bad(format!("individual {} has no group", s.id)),
                _ => {}
            }
            for row in &s.responses {
                if row.len() != j {
                    return bad(format!("individual {}: expected {j} responses", s.id));
                }
                for (k, (v, ty)) in row.iter().zip(&self.item_types).enumerate() {
                    match (v, ty) {
                        (ResponseValue::Missing, _) => {}
                        (ResponseValue::Continuous(x), ItemType::Continuous) if x.is_finite() => {}
                        (ResponseValue::Ordinal(l), ItemType::Ordinal { max_level }) => {
                            if l > max_level {
                                return Err(LgpError::LevelOutOfRange {
                                    item: k,
                                    level: *l,
                                    max: *max_level,
                                });
                            }
                        }
                        _ => {
                            return Err(LgpError::ResponseMismatch {
                                item: k,
                                message: format!("individual {}: {v:?} vs {ty:?}", s.id),
                            })
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CsvLayout {
    /// `id,time,<y1..yJ>[,group]`
    #[default]
    Wide,
    /// `id,time,item,value[,group]`
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemColumn {
    pub name: String,
    #[serde(flatten)]
    pub item_type: ItemType,
}

/// How CSV columns map onto a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default)]
    pub layout: CsvLayout,
    #[serde(default = "default_id")]
    pub id_column: String,
    #[serde(default = "default_time")]
    pub time_column: String,
    /// Wide layout: response column names. Long layout: values of the item column.
    pub items: Vec<ItemColumn>,
    #[serde(default = "default_item")]
    pub item_column: String,
    #[serde(default = "default_value")]
    pub value_column: String,
    #[serde(default)]
    pub group_column: Option<String>,
    /// Allowed group labels; inferred (sorted) when absent.
    #[serde(default)]
    pub groups: Option<Vec<String>>,
    /// Study horizon T; the largest observed time when absent.
    #[serde(default)]
    pub horizon: Option<f64>,
}

fn default_id() -> String {
    "id".into()
}
fn default_time() -> String {
    "time".into()
}
fn default_item() -> String {
    "item".into()
}
fn default_value() -> String {
    "value".into()
}

impl CsvSchema {
    /// Wide schema with default column names.
    pub fn wide(items: Vec<(String, ItemType)>) -> Self {
        CsvSchema {
            layout: CsvLayout::Wide,
            id_column: default_id(),
            time_column: default_time(),
            items: items
                .into_iter()
                .map(|(name, item_type)| ItemColumn { name, item_type })
                .collect(),
            item_column: default_item(),
            value_column: default_value(),
            group_column: None,
            groups: None,
            horizon: None,
        }
    }

    /// The schema `write_csv` uses for this dataset.
    pub fn for_dataset(d: &Dataset) -> Self {
        let mut s = CsvSchema::wide(
            d.item_names
                .iter()
                .cloned()
                .zip(d.item_types.iter().copied())
                .collect(),
        );
        if d.is_grouped() {
            s.group_column = Some("group".into());
            s.groups = Some(d.groups.clone());
        }
        s.horizon = Some(d.time_horizon);
        s
    }
}

struct RawRow {
    row: usize,
    id: String,
    time: f64,
    values: Vec<ResponseValue>,
    group: Option<String>,
}

fn parse_value(
    text: &str,
    ty: ItemType,
    path: &Path,
    row: usize,
    item: usize,
) -> Result<ResponseValue> {
    let t = text.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Ok(ResponseValue::Missing);
    }
    let malformed = |m: String| LgpError::MalformedRow {
        path: path.to_path_buf(),
        row,
        message: m,
    };
    match ty {
        ItemType::Continuous => t
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .map(ResponseValue::Continuous)
            .ok_or_else(|| malformed(format!("non-numeric response `{t}`"))),
        ItemType::Ordinal { max_level } => {
            let l: u32 = t
                .parse()
                .map_err(|_| malformed(format!("ordinal response `{t}` is not a level")))?;
            if l > max_level {
                return Err(malformed(format!(
                    "ordinal level {l} out of range for item {item} (max {max_level})"
                )));
            }
            Ok(ResponseValue::Ordinal(l))
        }
    }
}

/// Read a dataset from CSV. Rows may come in any order; rows of one person are
/// sorted by time, and repeated timestamps are kept with the later copy moved
/// forward by [`TIE_OFFSET`]. Columns not named by the schema are ignored.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LgpError::MalformedRow {
                path: path.to_path_buf(),
                row: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let id_col = col(&schema.id_column)?;
    let time_col = col(&schema.time_column)?;
    let group_col = schema.group_column.as_deref().map(col).transpose()?;
    let n_items = schema.items.len();
    if n_items == 0 {
        return Err(LgpError::InvalidDataset("schema lists no items".into()));
    }
    let types: Vec<ItemType> = schema.items.iter().map(|c| c.item_type).collect();

    let mut raw: Vec<RawRow> = Vec::new();
    match schema.layout {
        CsvLayout::Wide => {
            let item_cols = schema
                .items
                .iter()
                .map(|c| col(&c.name))
                .collect::<Result<Vec<_>>>()?;
            for (k, rec) in rdr.records().enumerate() {
                let row = k + 2;
                let rec = rec?;
                let (id, time, group) = row_key(&rec, id_col, time_col, group_col, path, row)?;
                let values = item_cols
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| parse_value(&rec[c], types[j], path, row, j))
                    .collect::<Result<Vec<_>>>()?;
                raw.push(RawRow {
                    row,
                    id,
                    time,
                    values,
                    group,
                });
            }
        }
        CsvLayout::Long => {
            let item_col = col(&schema.item_column)?;
            let value_col = col(&schema.value_column)?;
            // (id, time bits) -> indices of open rows in `raw`
            let mut open: HashMap<(String, u64), Vec<usize>> = HashMap::new();
            for (k, rec) in rdr.records().enumerate() {
                let row = k + 2;
                let rec = rec?;
                let (id, time, group) = row_key(&rec, id_col, time_col, group_col, path, row)?;
                let name = &rec[item_col];
                let j = schema
                    .items
                    .iter()
                    .position(|c| c.name == name)
                    .ok_or_else(|| LgpError::MalformedRow {
                        path: path.to_path_buf(),
                        row,
                        message: format!("unknown item `{name}`"),
                    })?;
                let v = parse_value(&rec[value_col], types[j], path, row, j)?;
                let slots = open.entry((id.clone(), time.to_bits())).or_default();
                let target = slots.iter().copied().find(|&r| raw[r].values[j].is_missing());
                let r = match target {
                    Some(r) => r,
                    None => {
                        raw.push(RawRow {
                            row,
                            id,
                            time,
                            values: vec![ResponseValue::Missing; n_items],
                            group: group.clone(),
                        });
                        slots.push(raw.len() - 1);
                        raw.len() - 1
                    }
                };
                if raw[r].group != group {
                    return Err(LgpError::MalformedRow {
                        path: path.to_path_buf(),
                        row,
                        message: "group differs between rows of one observation".into(),
                    });
                }
                raw[r].values[j] = v;
            }
        }
    }
    if raw.is_empty() {
        return Err(LgpError::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    assemble(raw, schema, types, path)
}

fn row_key(
    rec: &csv::StringRecord,
    id_col: usize,
    time_col: usize,
    group_col: Option<usize>,
    path: &Path,
    row: usize,
) -> Result<(String, f64, Option<String>)> {
    let malformed = |m: String| LgpError::MalformedRow {
        path: path.to_path_buf(),
        row,
        message: m,
    };
    let id = rec[id_col].to_string();
    if id.is_empty() {
        return Err(malformed("empty id".into()));
    }
    let ts = &rec[time_col];
    let time: f64 = ts
        .parse()
        .ok()
        .filter(|t: &f64| t.is_finite())
        .ok_or_else(|| malformed(format!("non-numeric time `{ts}`")))?;
    if time < 0.0 {
        return Err(malformed(format!("negative time {time}")));
    }
    let group = group_col.map(|c| rec[c].to_string());
    Ok((id, time, group))
}

fn assemble(raw: Vec<RawRow>, schema: &CsvSchema, types: Vec<ItemType>, path: &Path) -> Result<Dataset> {
    let groups: Vec<String> = match (&schema.group_column, &schema.groups) {
        (None, _) => Vec::new(),
        (Some(_), Some(declared)) => {
            if let Some(r) = raw.iter().find(|r| !declared.contains(r.group.as_ref().unwrap())) {
                return Err(LgpError::MalformedRow {
                    path: path.to_path_buf(),
                    row: r.row,
                    message: format!("unknown group label `{}`", r.group.as_ref().unwrap()),
                });
            }
            declared.clone()
        }
        (Some(_), None) => raw
            .iter()
            .filter_map(|r| r.group.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };

    // individuals in order of first appearance
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Vec<RawRow>> = HashMap::new();
    for r in raw {
        if !by_id.contains_key(&r.id) {
            order.push(r.id.clone());
        }
        by_id.entry(r.id.clone()).or_default().push(r);
    }
    let mut individuals = Vec::with_capacity(order.len());
    let mut max_time: f64 = 0.0;
    for id in order {
        let mut rows = by_id.remove(&id).unwrap();
        rows.sort_by(|a, b| a.time.total_cmp(&b.time));
        let group = rows[0].group.clone();
        if let Some(r) = rows.iter().find(|r| r.group != group) {
            return Err(LgpError::MalformedRow {
                path: path.to_path_buf(),
                row: r.row,
                message: format!("individual {id} changes group"),
            });
        }
        let mut times = Vec::with_capacity(rows.len());
        let mut responses = Vec::with_capacity(rows.len());
        for r in rows {
            let mut t = r.time;
            if let Some(&prev) = times.last() {
                if t <= prev {
                    log::warn!(
                        "individual {id}: repeated time {} at row {}, shifted by {TIE_OFFSET:e}",
                        r.time,
                        r.row
                    );
                    t = prev + TIE_OFFSET;
                }
            }
            max_time = max_time.max(t);
            times.push(t);
            responses.push(r.values);
        }
        individuals.push(IndividualSeries {
            id,
            times,
            responses,
            covariates: CovariateProfile {
                group,
                extras: BTreeMap::new(),
            },
        });
    }
    let horizon = schema.horizon.unwrap_or(max_time).max(max_time);
    let horizon = if horizon > 0.0 { horizon } else { 1.0 };
    let names = schema.items.iter().map(|c| c.name.clone()).collect();
    Dataset::new(individuals, names, types, groups, horizon)
}

/// Write a dataset in wide layout (`id,time,<items>[,group]`). Numbers are
/// written in shortest round-trip form, so re-ingesting with
/// [`CsvSchema::for_dataset`] reproduces the dataset exactly.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let mut w = csv::Writer::from_path(path.as_ref())?;
    write_records(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_records<W: std::io::Write>(dataset: &Dataset, w: &mut csv::Writer<W>) -> Result<()> {
    let mut header = vec!["id".to_string(), "time".to_string()];
    header.extend(dataset.item_names.iter().cloned());
    if dataset.is_grouped() {
        header.push("group".into());
    }
    w.write_record(&header)?;
    for s in &dataset.individuals {
        for (t, row) in s.times.iter().zip(&s.responses) {
            let mut rec = vec![s.id.clone(), format!("{t:?}")];
            rec.extend(row.iter().map(|v| match v {
                ResponseValue::Continuous(x) => format!("{x:?}"),
                ResponseValue::Ordinal(l) => l.to_string(),
                ResponseValue::Missing => String::new(),
            }));
            if dataset.is_grouped() {
                rec.push(s.covariates.group.clone().unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn score_schema() -> CsvSchema {
        let mut s = CsvSchema::wide(vec![("Score".into(), ItemType::Continuous)]);
        s.id_column = "ID".into();
        s.time_column = "StudyTime".into();
        s.group_column = Some("Group".into());
        s
    }

    #[test]
    fn ema_row_with_calendar_column() {
        let f = write_tmp("ID,Score,Group,StudyTime,CalendarTime\n1, 1.19, 0, 0.74, 2019-03-01 17:45\n");
        let d = ingest_csv(f.path(), &score_schema()).unwrap();
        assert_eq!(d.n_individuals(), 1);
        let s = &d.individuals[0];
        assert_eq!(s.id, "1");
        assert_eq!(s.times, vec![0.74]);
        assert_eq!(s.responses[0], vec![ResponseValue::Continuous(1.19)]);
        assert_eq!(s.covariates.group.as_deref(), Some("0"));
        assert_eq!(d.groups, vec!["0".to_string()]);
    }

    #[test]
    fn minimal_dataset() {
        let f = write_tmp("id,time,y\na,0,2.5\n");
        let schema = CsvSchema::wide(vec![("y".into(), ItemType::Continuous)]);
        let d = ingest_csv(f.path(), &schema).unwrap();
        assert_eq!(d.n_individuals(), 1);
        assert_eq!(d.individuals[0].len(), 1);
    }

    #[test]
    fn rows_sorted_by_time() {
        let f = write_tmp("id,time,y\n7,1.52,0.1\n7,0.74,0.2\n");
        let schema = CsvSchema::wide(vec![("y".into(), ItemType::Continuous)]);
        let d = ingest_csv(f.path(), &schema).unwrap();
        assert_eq!(d.individuals[0].times, vec![0.74, 1.52]);
        assert_eq!(d.individuals[0].responses[0], vec![ResponseValue::Continuous(0.2)]);
    }

    #[test]
    fn ties_are_kept_and_separated() {
        let f = write_tmp("id,time,y\n1,2.0,0.1\n1,2.0,0.3\n1,1.0,0.0\n");
        let schema = CsvSchema::wide(vec![("y".into(), ItemType::Continuous)]);
        let d = ingest_csv(f.path(), &schema).unwrap();
        let s = &d.individuals[0];
        assert_eq!(s.len(), 3);
        assert_eq!(s.times[1], 2.0);
        assert_eq!(s.times[2], 2.0 + TIE_OFFSET);
        assert_eq!(s.responses[2], vec![ResponseValue::Continuous(0.3)]);
    }

    #[test]
    fn errors_carry_row_numbers() {
        let schema = CsvSchema::wide(vec![("y".into(), ItemType::Ordinal { max_level: 2 })]);
        let f = write_tmp("id,time,y\n1,0.5,1\n1,abc,1\n");
        match ingest_csv(f.path(), &schema) {
            Err(LgpError::MalformedRow { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let f = write_tmp("id,time,y\n1,0.5,1\n2,0.5,3\n");
        match ingest_csv(f.path(), &schema) {
            Err(LgpError::MalformedRow { row, message, .. }) => {
                assert_eq!(row, 3);
                assert!(message.contains("out of range"));
            }
            other => panic!("{other:?}"),
        }
        let f = write_tmp("id,time,y\n");
        assert!(matches!(ingest_csv(f.path(), &schema), Err(LgpError::EmptyFile { .. })));
        let mut grouped = score_schema();
        grouped.groups = Some(vec!["0".into(), "1".into()]);
        let f = write_tmp("ID,Score,Group,StudyTime\n1,0.2,0,0.1\n2,0.3,5,0.2\n");
        match ingest_csv(f.path(), &grouped) {
            Err(LgpError::MalformedRow { row, message, .. }) => {
                assert_eq!(row, 3);
                assert!(message.contains("unknown group"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn long_layout_with_missing_items() {
        let mut schema = CsvSchema::wide(vec![
            ("q1".into(), ItemType::Ordinal { max_level: 2 }),
            ("q2".into(), ItemType::Ordinal { max_level: 3 }),
        ]);
        schema.layout = CsvLayout::Long;
        let f = write_tmp("id,time,item,value\n1,0.5,q1,2\n1,0.5,q2,0\n1,0.2,q2,3\n");
        let d = ingest_csv(f.path(), &schema).unwrap();
        let s = &d.individuals[0];
        assert_eq!(s.times, vec![0.2, 0.5]);
        assert_eq!(s.responses[0], vec![ResponseValue::Missing, ResponseValue::Ordinal(3)]);
        assert_eq!(s.responses[1], vec![ResponseValue::Ordinal(2), ResponseValue::Ordinal(0)]);
    }

    #[test]
    fn empty_dataset_cannot_be_written() {
        let d = Dataset {
            individuals: vec![],
            item_names: vec!["y".into()],
            item_types: vec![ItemType::Continuous],
            groups: vec![],
            time_horizon: 1.0,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(write_csv(&d, f.path()), Err(LgpError::InvalidDataset(_))));
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let series = (
            proptest::collection::vec((0.0f64..10.0, -5.0f64..5.0, 0u32..3, any::<bool>()), 1..6),
            any::<bool>(),
        );
        proptest::collection::vec(series, 1..5).prop_map(|people| {
            let individuals = people
                .into_iter()
                .enumerate()
                .map(|(i, (mut rows, g))| {
                    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
                    rows.dedup_by(|a, b| a.0 == b.0);
                    IndividualSeries {
                        id: format!("p{i}"),
                        times: rows.iter().map(|r| r.0).collect(),
                        responses: rows
                            .iter()
                            .map(|r| {
                                let y = if r.3 {
                                    ResponseValue::Missing
                                } else {
                                    ResponseValue::Continuous(r.1)
                                };
                                vec![y, ResponseValue::Ordinal(r.2)]
                            })
                            .collect(),
                        covariates: CovariateProfile {
                            group: Some(if g { "b" } else { "a" }.into()),
                            extras: BTreeMap::new(),
                        },
                    }
                })
                .collect();
            Dataset {
                individuals,
                item_names: vec!["y".into(), "q".into()],
                item_types: vec![ItemType::Continuous, ItemType::Ordinal { max_level: 2 }],
                groups: vec!["a".into(), "b".into()],
                time_horizon: 10.0,
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn csv_round_trip(d in arb_dataset()) {
            let f = tempfile::NamedTempFile::new().unwrap();
            write_csv(&d, f.path()).unwrap();
            let back = ingest_csv(f.path(), &CsvSchema::for_dataset(&d)).unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn ingestion_sorts_and_counts(rows in proptest::collection::vec((0u8..4, 0.0f64..5.0, -1.0f64..1.0), 1..40)) {
            let mut text = String::from("id,time,y\n");
            for (id, t, y) in &rows {
                text.push_str(&format!("{id},{t:?},{y:?}\n"));
            }
            let f = write_tmp(&text);
            let schema = CsvSchema::wide(vec![("y".into(), ItemType::Continuous)]);
            let d = ingest_csv(f.path(), &schema).unwrap();
            for s in &d.individuals {
                prop_assert!(s.times.windows(2).all(|w| w[0] < w[1]));
                let n = rows.iter().filter(|r| r.0.to_string() == s.id).count();
                prop_assert_eq!(s.len(), n);
            }
        }
    }
}
