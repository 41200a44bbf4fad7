//! Long-format CSV ingestion, result writers and the persisted engine state.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{ModelSpec, QMode, StreamEngine};
use crate::error::{Error, Result};
use crate::inference::FitReport;
use crate::model::{Batch, Family};
use crate::sim::MetricsRow;
use crate::solver::SolverConfig;

pub const STATE_FORMAT_VERSION: u32 = 1;
const KEY_COLUMNS: [&str; 5] = ["subject_id", "batch_index", "t", "obs_index", "y"];
/// Offending rows listed in a validation error before truncating.
const MAX_LISTED: usize = 20;

/// One row of the long-format input.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRecord {
    /// 1-based line number in the file, header included.
    pub line: usize,
    pub subject_id: String,
    pub batch_index: usize,
    pub t: f64,
    pub obs_index: usize,
    pub y: f64,
    pub x: Vec<f64>,
}

fn problems(what: &str, list: Vec<String>) -> Error {
    let extra = list.len().saturating_sub(MAX_LISTED);
    let mut msg = format!("{what}:\n  {}", list[..list.len().min(MAX_LISTED)].join("\n  "));
    if extra > 0 {
        msg.push_str(&format!("\n  ... and {extra} more"));
    }
    Error::Validation(msg)
}

/// Reads and type-checks every record. Returns the records and `p`.
pub fn read_records<R: Read>(reader: R) -> Result<(Vec<LongRecord>, usize)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let p = header.len().saturating_sub(KEY_COLUMNS.len());
    let header_ok = header.len() > KEY_COLUMNS.len()
        && header.iter().zip(KEY_COLUMNS).all(|(h, k)| h == k)
        && header.iter().skip(KEY_COLUMNS.len()).enumerate().all(|(k, h)| h == format!("x{}", k + 1));
    if !header_ok {
        return Err(Error::Validation(format!(
            "header must be subject_id,batch_index,t,obs_index,y,x1,...,xp; got {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                bad.push(format!("row {line}: {e}"));
                continue;
            }
        };
        let field = |c: usize| rec.get(c).unwrap_or("");
        let mut row_bad = Vec::new();
        let mut int = |c: usize| match field(c).parse::<usize>() {
            Ok(v) => v,
            Err(_) => {
                row_bad.push(format!("{} = '{}' is not a non-negative integer", KEY_COLUMNS[c], field(c)));
                0
            }
        };
        let batch_index = int(1);
        let obs_index = int(3);
        let mut num = |c: usize, name: String| match field(c).parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                row_bad.push(format!("{name} = '{}' is not a finite number", field(c)));
                f64::NAN
            }
        };
        let t = num(2, "t".into());
        let y = num(4, "y".into());
        let x: Vec<f64> = (0..p).map(|j| num(5 + j, format!("x{}", j + 1))).collect();
        if field(0).is_empty() {
            row_bad.push("empty subject_id".into());
        }
        if batch_index == 0 {
            row_bad.push("batch_index starts at 1".into());
        }
        if obs_index == 0 {
            row_bad.push("obs_index starts at 1".into());
        }
        if row_bad.is_empty() {
            out.push(LongRecord {
                line,
                subject_id: field(0).to_string(),
                batch_index,
                t,
                obs_index,
                y,
                x,
            });
        } else {
            bad.push(format!("row {line}: {}", row_bad.join("; ")));
        }
    }
    if !bad.is_empty() {
        return Err(problems("malformed records", bad));
    }
    if out.is_empty() {
        return Err(Error::Validation("no records".into()));
    }
    Ok((out, p))
}

/// Groups validated records into `by_time[j][i]`, subjects sorted by id.
pub fn group_records(records: &[LongRecord], p: usize, family: Family) -> Result<Vec<Vec<Batch>>> {
    let domain: Vec<String> = records
        .iter()
        .filter(|r| !family.check_outcome(r.y))
        .map(|r| format!("row {}: y = {} outside the {} support", r.line, r.y, family.name()))
        .collect();
    if !domain.is_empty() {
        let msg = match problems("outcome domain", domain) {
            Error::Validation(m) => m,
            e => e.to_string(),
        };
        return Err(Error::Domain(msg));
    }

    // batch -> subject -> rows
    let mut tree: BTreeMap<usize, BTreeMap<&str, Vec<&LongRecord>>> = BTreeMap::new();
    for r in records {
        tree.entry(r.batch_index)
            .or_default()
            .entry(r.subject_id.as_str())
            .or_default()
            .push(r);
    }
    let all_subjects: Vec<&str> = {
        let mut s: Vec<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
        s.sort_unstable();
        s.dedup();
        s
    };

    let mut bad = Vec::new();
    let mut by_time = Vec::with_capacity(tree.len());
    for (&j, subjects) in &tree {
        let t = subjects.values().next().expect("non-empty")[0].t;
        for id in &all_subjects {
            if !subjects.contains_key(id) {
                bad.push(format!("batch {j}: subject '{id}' missing"));
            }
        }
        let mut group = Vec::with_capacity(subjects.len());
        for (id, rows) in subjects {
            let mut rows = rows.clone();
            rows.sort_by_key(|r| r.obs_index);
            let mut dup = false;
            for w in rows.windows(2) {
                if w[0].obs_index == w[1].obs_index {
                    dup = true;
                    bad.push(format!(
                        "row {}: duplicate key ({id}, {j}, {}) also on row {}",
                        w[1].line, w[1].obs_index, w[0].line
                    ));
                }
            }
            if !dup {
                if let Some((k, r)) = rows.iter().enumerate().find(|(k, r)| r.obs_index != k + 1) {
                    bad.push(format!(
                        "row {}: obs_index {} breaks the contiguous sequence for ({id}, {j}), expected {}",
                        r.line,
                        r.obs_index,
                        k + 1
                    ));
                }
            }
            for r in &rows {
                if r.t != t {
                    bad.push(format!("row {}: t = {} differs from t = {t} elsewhere in batch {j}", r.line, r.t));
                }
            }
            let n = rows.len();
            let x = DMatrix::from_fn(n, p, |k, c| rows[k].x[c]);
            let y = DVector::from_fn(n, |k, _| rows[k].y);
            group.push(Batch::new(*id, j, t, x, y)?);
        }
        by_time.push(group);
    }
    if !bad.is_empty() {
        return Err(problems("invalid panel layout", bad));
    }
    Ok(by_time)
}

/// All batches in a long-format file.
pub fn ingest_cumulative(path: &Path, family: Family) -> Result<Vec<Vec<Batch>>> {
    let (records, p) = read_records(File::open(path)?)?;
    group_records(&records, p, family)
}

/// A file holding exactly one batch index.
pub fn ingest(path: &Path, family: Family) -> Result<Vec<Batch>> {
    let mut by_time = ingest_cumulative(path, family)?;
    if by_time.len() != 1 {
        let idx: Vec<usize> = by_time.iter().map(|g| g[0].batch_index).collect();
        return Err(Error::Validation(format!(
            "expected a single batch, found batch indices {idx:?}"
        )));
    }
    Ok(by_time.pop().expect("one batch"))
}

/// Writes `by_time` in the long format.
pub fn write_long_csv<W: Write>(out: W, by_time: &[Vec<Batch>]) -> Result<()> {
    let p = by_time.first().and_then(|g| g.first()).map_or(0, Batch::p);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=p).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for group in by_time {
        for b in group {
            for k in 0..b.n() {
                let mut rec = vec![
                    b.subject_id.clone(),
                    b.batch_index.to_string(),
                    b.t.to_string(),
                    (k + 1).to_string(),
                    b.y[k].to_string(),
                ];
                rec.extend(b.x.row(k).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    batch_index: usize,
    t: f64,
    coefficient: &'a str,
    estimate: f64,
    std_err: f64,
    ci_lower: f64,
    ci_upper: f64,
    z: f64,
    p_value: f64,
    q_used: Option<f64>,
}

/// One row per coefficient. The header is written only when `header` is set,
/// so successive invocations can append to a trace file.
pub fn write_report<W: Write>(out: W, report: &FitReport, names: &[String], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for k in 0..report.p() {
        w.serialize(ReportRow {
            batch_index: report.batch_index,
            t: report.t_b,
            coefficient: &names[k],
            estimate: report.beta[k],
            std_err: report.std_err[k],
            ci_lower: report.ci_lower[k],
            ci_upper: report.ci_upper[k],
            z: report.wald_z[k],
            p_value: report.p_values[k],
            q_used: report.q_used,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Appends to `path`, writing the header only if the file is new or empty.
pub fn append_report(path: &Path, report: &FitReport, names: &[String]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    write_report(f, report, names, fresh)
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Covariate names `x1..xp`, matching the input header.
pub fn covariate_names(p: usize) -> Vec<String> {
    (1..=p).map(|k| format!("x{k}")).collect()
}

/// Hash of everything the caller must repeat on every invocation.
pub fn config_hash(model: &ModelSpec, q_mode: &QMode, config: &SolverConfig) -> Result<String> {
    let blob = serde_json::to_vec(&(model, q_mode, config))?;
    let digest = Sha256::digest(&blob);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Versioned, self-describing engine state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub format_version: u32,
    pub config_hash: String,
    pub engine: StreamEngine,
}

impl StateFile {
    pub fn new(engine: StreamEngine) -> Result<Self> {
        Ok(StateFile {
            format_version: STATE_FORMAT_VERSION,
            config_hash: config_hash(&engine.model, &engine.q_mode, &engine.config)?,
            engine,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe =
            serde_json::from_slice(bytes).map_err(|e| Error::State(format!("unreadable state file: {e}")))?;
        if probe.format_version != STATE_FORMAT_VERSION {
            return Err(Error::State(format!(
                "state format version {} is not supported (expected {STATE_FORMAT_VERSION})",
                probe.format_version
            )));
        }
        let state: StateFile =
            serde_json::from_slice(bytes).map_err(|e| Error::State(format!("corrupt state file: {e}")))?;
        let expect = config_hash(&state.engine.model, &state.engine.q_mode, &state.engine.config)?;
        if expect != state.config_hash {
            return Err(Error::State("stored config hash does not match the stored engine".into()));
        }
        Ok(state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Writes through a temporary file and renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = sibling(path, "tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Exclusive advisory lock on `<state>.lock`, released on drop.
#[derive(Debug)]
pub struct StateLock {
    _file: File,
}

impl StateLock {
    pub fn acquire(state: &Path) -> Result<Self> {
        let path = sibling(state, "lock");
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path)?;
        match file.try_lock() {
            Ok(()) => Ok(StateLock { _file: file }),
            Err(fs::TryLockError::WouldBlock) => Err(Error::State(format!(
                "{} is held by another process",
                path.display()
            ))),
            Err(fs::TryLockError::Error(e)) => Err(e.into()),
        }
    }
}
