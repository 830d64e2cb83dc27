//! Line-oriented text format for datasets.
//!
//! Header (key: value, one per line), then `---`, then one record per line:
//! d comma-separated reals followed by t label fields, missing = `_`.
//! Reals are written in shortest round-trip form, so integer labels are
//! bit-exact and features survive save/load unchanged.
//!
//! Distilled datasets append t provenance fields per record:
//! `g` ground truth, `d:<confidence>` distilled, `_` still missing.

use std::fmt::Write as _;
use std::path::Path;

use crate::distill::{DistilledDataset, SlotProvenance};
use crate::error::{Error, Result};
use crate::write_atomic;

use super::{DatasetSpec, SampleRecord, TaskSpec};

#[derive(Debug)]
pub struct LoadedDataset {
    pub spec: DatasetSpec,
    /// Class counts per task as declared in the header.
    pub classes: Vec<usize>,
    /// Provenance per sample per task; `None` for plain dataset files.
    pub provenance: Option<Vec<Vec<SlotProvenance>>>,
}

fn header_string(spec: &DatasetSpec, tasks: &[TaskSpec], provenance: bool) -> String {
    let mut out = String::new();
    let classes: Vec<String> = tasks.iter().map(|t| t.classes.to_string()).collect();
    let mut bitmask: u64 = 0;
    for &j in &spec.labeled_tasks {
        bitmask |= 1 << j;
    }
    let test: Vec<String> = spec.test_idx.iter().map(|i| i.to_string()).collect();
    writeln!(out, "tasks: {}", tasks.len()).unwrap();
    writeln!(out, "classes: {}", classes.join(",")).unwrap();
    writeln!(out, "dim: {}", spec.feature_dim()).unwrap();
    writeln!(out, "dataset: {}", spec.dataset_id).unwrap();
    writeln!(out, "domain: {}", spec.domain_id).unwrap();
    writeln!(out, "labeled: {bitmask}").unwrap();
    writeln!(out, "count: {}", spec.samples.len()).unwrap();
    writeln!(out, "test: {}", test.join(",")).unwrap();
    if provenance {
        writeln!(out, "provenance: 1").unwrap();
    }
    out.push_str("---\n");
    out
}

fn record_string(sample: &SampleRecord, prov: Option<&[SlotProvenance]>) -> String {
    let mut fields: Vec<String> = sample.features.iter().map(|v| format!("{v}")).collect();
    for slot in &sample.labels {
        fields.push(match slot {
            Some(c) => c.to_string(),
            None => "_".to_string(),
        });
    }
    if let Some(prov) = prov {
        for p in prov {
            fields.push(match p {
                SlotProvenance::Ground => "g".to_string(),
                SlotProvenance::Distilled(conf) => format!("d:{conf}"),
                SlotProvenance::Missing => "_".to_string(),
            });
        }
    }
    fields.join(",")
}

pub fn save_dataset(spec: &DatasetSpec, tasks: &[TaskSpec], path: &Path) -> Result<()> {
    let mut out = header_string(spec, tasks, false);
    for sample in &spec.samples {
        out.push_str(&record_string(sample, None));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn save_distilled(ds: &DistilledDataset, tasks: &[TaskSpec], path: &Path) -> Result<()> {
    let mut out = header_string(&ds.dataset, tasks, true);
    for (sample, prov) in ds.dataset.samples.iter().zip(&ds.provenance) {
        out.push_str(&record_string(sample, Some(prov)));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

struct HeaderBuilder {
    tasks: Option<usize>,
    classes: Option<Vec<usize>>,
    dim: Option<usize>,
    dataset: Option<usize>,
    domain: Option<usize>,
    labeled: Option<u64>,
    count: Option<usize>,
    test: Option<Vec<usize>>,
    provenance: bool,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_usize(s: &str, line: usize, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("bad {what}: {s:?}")))
}

fn parse_usize_list(s: &str, line: usize, what: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|f| parse_usize(f, line, what)).collect()
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Loads a distilled dataset file (provenance columns required).
pub fn load_distilled(path: &Path) -> Result<(DistilledDataset, Vec<usize>)> {
    let loaded = load_dataset(path)?;
    let provenance = loaded.provenance.ok_or_else(|| parse_err(
        1,
        "file has no provenance columns; not a distilled dataset",
    ))?;
    Ok((
        DistilledDataset {
            dataset: loaded.spec,
            provenance,
        },
        loaded.classes,
    ))
}

fn parse_dataset(text: &str) -> Result<LoadedDataset> {
    let mut header = HeaderBuilder {
        tasks: None,
        classes: None,
        dim: None,
        dataset: None,
        domain: None,
        labeled: None,
        count: None,
        test: None,
        provenance: false,
    };

    let mut lines = text.lines().enumerate();
    let mut body_start = None;
    for (i, line) in lines.by_ref() {
        let lineno = i + 1;
        let line = line.trim();
        if line == "---" {
            body_start = Some(lineno);
            break;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| parse_err(lineno, format!("expected `key: value`, got {line:?}")))?;
        match key.trim() {
            "tasks" => header.tasks = Some(parse_usize(value, lineno, "task count")?),
            "classes" => header.classes = Some(parse_usize_list(value, lineno, "class count")?),
            "dim" => header.dim = Some(parse_usize(value, lineno, "feature dim")?),
            "dataset" => header.dataset = Some(parse_usize(value, lineno, "dataset id")?),
            "domain" => header.domain = Some(parse_usize(value, lineno, "domain id")?),
            "labeled" => {
                header.labeled = Some(
                    value
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad bitmask: {value:?}")))?,
                )
            }
            "count" => header.count = Some(parse_usize(value, lineno, "sample count")?),
            "test" => header.test = Some(parse_usize_list(value, lineno, "test index")?),
            "provenance" => header.provenance = value.trim() == "1",
            other => return Err(parse_err(lineno, format!("unknown header key {other:?}"))),
        }
    }
    body_start.ok_or_else(|| parse_err(text.lines().count().max(1), "missing `---`"))?;

    let t = header.tasks.ok_or_else(|| parse_err(1, "missing tasks"))?;
    let classes = header.classes.ok_or_else(|| parse_err(1, "missing classes"))?;
    if classes.len() != t {
        return Err(parse_err(1, format!("{t} tasks but {} class counts", classes.len())));
    }
    let dim = header.dim.ok_or_else(|| parse_err(1, "missing dim"))?;
    let dataset_id = header.dataset.ok_or_else(|| parse_err(1, "missing dataset"))?;
    let domain_id = header.domain.ok_or_else(|| parse_err(1, "missing domain"))?;
    let bitmask = header.labeled.ok_or_else(|| parse_err(1, "missing labeled"))?;
    let count = header.count.ok_or_else(|| parse_err(1, "missing count"))?;
    let test_idx = header.test.ok_or_else(|| parse_err(1, "missing test"))?;

    let labeled_tasks: Vec<usize> = (0..t).filter(|j| bitmask & (1 << j) != 0).collect();
    if labeled_tasks.is_empty() {
        return Err(parse_err(1, "labeled bitmask selects no tasks"));
    }

    let expected_fields = dim + t + if header.provenance { t } else { 0 };
    let mut samples = Vec::with_capacity(count);
    let mut provenance = if header.provenance {
        Some(Vec::with_capacity(count))
    } else {
        None
    };
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if samples.len() == count {
            return Err(parse_err(
                lineno,
                format!("more than the declared {count} records"),
            ));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_fields {
            return Err(parse_err(
                lineno,
                format!("expected {expected_fields} fields, got {}", fields.len()),
            ));
        }
        let mut features = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad feature value {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite feature {f:?}")));
            }
            features.push(v);
        }
        let mut labels = Vec::with_capacity(t);
        for (j, f) in fields[dim..dim + t].iter().enumerate() {
            let f = f.trim();
            if f == "_" {
                labels.push(None);
            } else {
                let c: u32 = f
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad label {f:?}")))?;
                if c as usize >= classes[j] {
                    return Err(parse_err(
                        lineno,
                        format!("label {c} out of range for task {j} ({} classes)", classes[j]),
                    ));
                }
                labels.push(Some(c));
            }
        }
        if let Some(prov) = provenance.as_mut() {
            let mut row = Vec::with_capacity(t);
            for f in &fields[dim + t..] {
                let f = f.trim();
                row.push(if f == "g" {
                    SlotProvenance::Ground
                } else if f == "_" {
                    SlotProvenance::Missing
                } else if let Some(conf) = f.strip_prefix("d:") {
                    let c: f64 = conf
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad confidence {conf:?}")))?;
                    SlotProvenance::Distilled(c)
                } else {
                    return Err(parse_err(lineno, format!("bad provenance field {f:?}")));
                });
            }
            prov.push(row);
        }
        samples.push(SampleRecord {
            features,
            labels,
            dataset_id,
            domain_id,
        });
    }
    if samples.len() != count {
        return Err(parse_err(
            text.lines().count(),
            format!("declared {count} records, found {}", samples.len()),
        ));
    }

    let total = samples.len();
    let train_idx: Vec<usize> = {
        let test: std::collections::HashSet<usize> = test_idx.iter().cloned().collect();
        (0..total).filter(|i| !test.contains(i)).collect()
    };
    for &i in &test_idx {
        if i >= total {
            return Err(parse_err(
                1,
                format!("test index {i} out of range for {total} records"),
            ));
        }
    }

    let spec = DatasetSpec {
        dataset_id,
        domain_id,
        labeled_tasks,
        samples,
        train_idx,
        test_idx,
    };
    Ok(LoadedDataset {
        spec,
        classes,
        provenance,
    })
}
