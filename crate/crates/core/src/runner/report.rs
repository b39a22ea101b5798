//! CSV outputs: per-trial results, aggregates and CDFs.
//!
//! Every file starts with a `# config_hash=<hex>` comment line.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::manifest::LoggedTrial;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, cdf, fmt_fraction, summarize, EvalRecord, Group, GroupField, Method, Outcome, RESULTS_COLUMNS,
};

pub const RESULTS_FILE: &str = "results.csv";
pub const EXTRA_FILE: &str = "results_extra.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const CDF_DIR: &str = "cdf";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_text(config_hash: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut out = Vec::new();
    writeln!(out, "# config_hash={config_hash}").expect("write to vec");
    {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Validation(e.to_string()))?;
    }
    Ok(String::from_utf8(out).expect("csv output is utf-8"))
}

/// Renders records as `results.csv` text. Metric values use the shortest
/// round-trip decimal form; latency is fixed at three decimals.
pub fn write_results_csv(config_hash: &str, records: &[EvalRecord]) -> Result<String> {
    csv_text(
        config_hash,
        &RESULTS_COLUMNS,
        records.iter().map(|r| {
            vec![
                r.user.to_string(),
                r.group.to_string(),
                r.method.to_string(),
                r.k.to_string(),
                fmt_fraction(r.fraction),
                fmt_opt(r.ndcg),
                fmt_opt(r.hit_score),
                fmt_opt(r.hit_any),
                format!("{:.3}", r.latency_ms),
                r.prompt_tokens.to_string(),
                r.outcome.as_str().to_string(),
            ]
        }),
    )
}

pub(crate) fn write_results(
    dir: &Path,
    config_hash: &str,
    records: &[EvalRecord],
    extras: &[&LoggedTrial],
) -> Result<()> {
    write_file(&dir.join(RESULTS_FILE), &write_results_csv(config_hash, records)?)?;
    let mut extras: Vec<&LoggedTrial> = extras.to_vec();
    extras.sort_by(|a, b| a.record.sort_key().cmp(&b.record.sort_key()));
    let text = csv_text(
        config_hash,
        &["user", "method", "k", "fraction", "hit_flat", "masked_count"],
        extras.iter().map(|t| {
            vec![
                t.record.user.to_string(),
                t.record.method.to_string(),
                t.record.k.to_string(),
                fmt_fraction(t.record.fraction),
                fmt_opt(t.hit_flat),
                t.masked_count.to_string(),
            ]
        }),
    )?;
    write_file(&dir.join(EXTRA_FILE), &text)
}

/// Parsed `results.csv`.
#[derive(Debug, Clone)]
pub struct ResultsTable {
    pub config_hash: String,
    pub records: Vec<EvalRecord>,
}

fn split_comment(text: &str) -> (String, &str) {
    match text.strip_prefix("# config_hash=") {
        Some(rest) => {
            let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
            (line.trim().to_string(), body)
        }
        None => (String::new(), text),
    }
}

fn parse_field<T: std::str::FromStr>(value: &str, column: &str, row: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line: row,
        message: format!("bad value `{value}` in column `{column}`"),
    })
}

fn parse_opt(value: &str, column: &str, row: usize) -> Result<Option<f64>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse_field(value, column, row).map(Some)
    }
}

pub fn read_results(path: &Path) -> Result<ResultsTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (config_hash, body) = split_comment(&text);
    let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    for col in RESULTS_COLUMNS {
        if !index.contains_key(col) {
            return Err(Error::Schema(col.to_string()));
        }
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 3;
        let get = |c: &str| row.get(index[c]).unwrap_or("");
        let method: Method = get("method").parse()?;
        records.push(EvalRecord {
            user: parse_field(get("user"), "user", line)?,
            group: get("group").parse::<Group>()?,
            method,
            k: parse_field(get("k"), "k", line)?,
            fraction: parse_field(get("fraction"), "fraction", line)?,
            ndcg: parse_opt(get("ndcg"), "ndcg", line)?,
            hit_score: parse_opt(get("hit_score"), "hit_score", line)?,
            hit_any: parse_opt(get("hit_any"), "hit_any", line)?,
            latency_ms: parse_field(get("latency_ms"), "latency_ms", line)?,
            prompt_tokens: parse_field(get("prompt_tokens"), "prompt_tokens", line)?,
            outcome: get("outcome").parse::<Outcome>()?,
        });
    }
    Ok(ResultsTable { config_hash, records })
}

fn read_hit_flat(path: &Path) -> Result<HashMap<(u32, String, usize, String), f64>> {
    let mut out = HashMap::new();
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(out);
    };
    let (_, body) = split_comment(&text);
    let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    for row in reader.records() {
        let row = row?;
        let (Some(user), Some(method), Some(k), Some(f), Some(flat)) =
            (row.get(0), row.get(1), row.get(2), row.get(3), row.get(4))
        else {
            continue;
        };
        if let (Ok(user), Ok(k), Ok(flat)) = (user.parse(), k.parse(), flat.parse()) {
            out.insert((user, method.to_string(), k, f.to_string()), flat);
        }
    }
    Ok(out)
}

/// Files written by [`report`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportFiles {
    pub aggregate: PathBuf,
    pub cdfs: Vec<PathBuf>,
}

fn cdf_text(config_hash: &str, values: &[f64]) -> Result<String> {
    let series = cdf(values)?;
    csv_text(
        config_hash,
        &["value", "cum_fraction"],
        series.points.iter().map(|(v, c)| vec![v.to_string(), c.to_string()]),
    )
}

/// Rebuilds `aggregate.csv` and the `cdf/` directory from `results.csv`.
///
/// Aggregates are grouped by (group, method, k, fraction). Latency and
/// prompt-token CDFs are written for every LLM (group, method, k, fraction)
/// cell and pooled over LLM methods per (group, fraction). Failed trials are
/// left out of the CDFs.
pub fn report(dir: &Path) -> Result<ReportFiles> {
    let table = read_results(&dir.join(RESULTS_FILE))?;
    let hash = &table.config_hash;
    let flat = read_hit_flat(&dir.join(EXTRA_FILE))?;

    let fields = [GroupField::Group, GroupField::Method, GroupField::K, GroupField::Fraction];
    let rows = aggregate(&table.records, &fields);
    let mut flat_by_cell: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for r in &table.records {
        let key = (r.user, r.method.to_string(), r.k, fmt_fraction(r.fraction));
        if let Some(&v) = flat.get(&key) {
            flat_by_cell
                .entry(vec![r.group.to_string(), key.1.clone(), r.k.to_string(), key.3.clone()])
                .or_default()
                .push(v);
        }
    }
    let header = [
        "group",
        "method",
        "k",
        "fraction",
        "trials",
        "failed",
        "failure_rate",
        "ndcg_mean",
        "ndcg_std",
        "hit_score_mean",
        "hit_score_std",
        "hit_any_mean",
        "hit_flat_mean",
        "latency_ms_mean",
        "prompt_tokens_mean",
    ];
    let text = csv_text(
        hash,
        &header,
        rows.iter().map(|row| {
            let flat_mean = flat_by_cell
                .get(&row.key)
                .map(|v| summarize(v).mean.to_string())
                .unwrap_or_default();
            let mut out = row.key.clone();
            out.extend([
                row.trials.to_string(),
                row.failed.to_string(),
                row.failure_rate().to_string(),
                row.ndcg.mean.to_string(),
                row.ndcg.stddev.to_string(),
                row.hit_score.mean.to_string(),
                row.hit_score.stddev.to_string(),
                row.hit_any.mean.to_string(),
                flat_mean,
                row.latency_ms.mean.to_string(),
                row.prompt_tokens.mean.to_string(),
            ]);
            out
        }),
    )?;
    let aggregate_path = dir.join(AGGREGATE_FILE);
    write_file(&aggregate_path, &text)?;

    let cdf_dir = dir.join(CDF_DIR);
    if cdf_dir.exists() {
        fs::remove_dir_all(&cdf_dir).map_err(|e| Error::io(&cdf_dir, e))?;
    }
    fs::create_dir_all(&cdf_dir).map_err(|e| Error::io(&cdf_dir, e))?;

    type Cells = BTreeMap<String, (Vec<f64>, Vec<f64>)>;
    let mut cells: Cells = BTreeMap::new();
    for r in &table.records {
        if r.outcome == Outcome::Failed || r.method == Method::Mf {
            continue;
        }
        let f = fmt_fraction(r.fraction);
        for name in [
            format!("{}_{}_k{}_f{}", r.group, r.method, r.k, f),
            format!("{}_f{}", r.group, f),
        ] {
            let cell = cells.entry(name).or_default();
            cell.0.push(r.latency_ms);
            cell.1.push(r.prompt_tokens as f64);
        }
    }
    let mut cdfs = Vec::new();
    for (name, (latency, tokens)) in &cells {
        for (metric, values) in [("latency", latency), ("tokens", tokens)] {
            let path = cdf_dir.join(format!("{metric}_{name}.csv"));
            write_file(&path, &cdf_text(hash, values)?)?;
            cdfs.push(path);
        }
    }
    Ok(ReportFiles {
        aggregate: aggregate_path,
        cdfs,
    })
}
