//! Ternary-code retrieval: gallery index, Hamming queries, and the standard
//! retrieval metrics (MAP, Precision@k, Recall@k, PR curves).
//!
//! Distances use a generalized Hamming distance on {-1, 0, +1} codes:
//! `d(a, b) = sum |a_k - b_k| / 2`, so a +/-1 disagreement costs 1 and a
//! zero-vs-nonzero disagreement costs 1/2. This prices the third symbol that
//! sign quantization can emit while staying a true metric and reducing to
//! the binary Hamming distance on +/-1 codes.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hash::{read_codes_file, write_codes_file, TernaryCodes};

/// Immutable gallery index: codes, labels, and stable item ids.
pub struct RetrievalIndex {
    pub codes: TernaryCodes,
    pub labels: Vec<usize>,
    pub item_ids: Vec<u64>,
    /// Optional item paths carried for human-readable output.
    pub paths: Vec<String>,
}

/// Query result: item ids with distances, ascending by distance with ties
/// broken by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub entries: Vec<(u64, f64)>,
}

/// Generalized Hamming distance between two ternary codes.
pub fn hamming_distance(a: &[i8], b: &[i8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("code lengths {} vs {}", a.len(), b.len())));
    }
    let twice: i32 = a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).abs() as i32).sum();
    Ok(twice as f64 / 2.0)
}

/// Build an index over aligned codes, labels, and ids.
pub fn build_index(
    codes: TernaryCodes,
    labels: Vec<usize>,
    item_ids: Vec<u64>,
    paths: Vec<String>,
) -> Result<RetrievalIndex> {
    let n = codes.len();
    if labels.len() != n || item_ids.len() != n || (!paths.is_empty() && paths.len() != n) {
        return Err(Error::shape(format!(
            "misaligned index inputs: {n} codes, {} labels, {} ids, {} paths",
            labels.len(),
            item_ids.len(),
            paths.len()
        )));
    }
    if codes.values.iter().any(|&v| !(-1..=1).contains(&v)) {
        return Err(Error::Numeric("index codes must be ternary".into()));
    }
    Ok(RetrievalIndex { codes, labels, item_ids, paths })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Gallery positions sorted by (distance to `code`, item id).
    fn ranking(&self, code: &[i8]) -> Result<Vec<(usize, f64)>> {
        let mut order: Vec<(usize, f64)> = (0..self.len())
            .map(|i| Ok((i, hamming_distance(&self.codes.row(i), code)?)))
            .collect::<Result<_>>()?;
        order.sort_by(|&(i, di), &(j, dj)| {
            di.partial_cmp(&dj)
                .expect("finite distances")
                .then(self.item_ids[i].cmp(&self.item_ids[j]))
        });
        Ok(order)
    }
}

/// Top-k query. Asking for more items than the gallery holds returns the
/// whole gallery with a logged note.
pub fn query(index: &RetrievalIndex, code: &[i8], k: usize) -> Result<RankedResult> {
    if k == 0 {
        return Err(Error::config("query k must be at least 1"));
    }
    let mut k = k;
    if k > index.len() {
        log::info!("query k={k} exceeds gallery size {}; returning all items", index.len());
        k = index.len();
    }
    let entries = index
        .ranking(code)?
        .into_iter()
        .take(k)
        .map(|(i, d)| (index.item_ids[i], d))
        .collect();
    Ok(RankedResult { entries })
}

fn relevant_total(index: &RetrievalIndex, label: usize) -> usize {
    index.labels.iter().filter(|&&l| l == label).count()
}

/// Average precision of one query over the (optionally cut) ranking.
fn average_precision(
    index: &RetrievalIndex,
    code: &[i8],
    label: usize,
    cutoff: Option<usize>,
) -> Result<f64> {
    let total_relevant = relevant_total(index, label);
    if total_relevant == 0 {
        log::warn!("query label {label} absent from gallery; average precision set to 0");
        return Ok(0.0);
    }
    let depth = cutoff.unwrap_or(index.len()).min(index.len());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, (pos, _)) in index.ranking(code)?.into_iter().take(depth).enumerate() {
        if index.labels[pos] == label {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total_relevant.min(depth) as f64)
}

/// Mean average precision over a query set. `cutoff = None` ranks the full
/// gallery.
pub fn mean_average_precision(
    index: &RetrievalIndex,
    query_codes: &TernaryCodes,
    query_labels: &[usize],
    cutoff: Option<usize>,
) -> Result<f64> {
    if query_codes.is_empty() {
        return Err(Error::Data("empty query set".into()));
    }
    if query_labels.len() != query_codes.len() {
        return Err(Error::shape(format!(
            "{} labels for {} queries",
            query_labels.len(),
            query_codes.len()
        )));
    }
    let mut sum = 0.0;
    for (qi, &label) in query_labels.iter().enumerate() {
        sum += average_precision(index, &query_codes.row(qi), label, cutoff)?;
    }
    Ok(sum / query_codes.len() as f64)
}

fn hits_at_depths(index: &RetrievalIndex, code: &[i8], label: usize) -> Result<Vec<usize>> {
    let mut hits = Vec::with_capacity(index.len());
    let mut acc = 0usize;
    for (pos, _) in index.ranking(code)? {
        if index.labels[pos] == label {
            acc += 1;
        }
        hits.push(acc);
    }
    Ok(hits)
}

/// Mean fraction of relevant items in the top-k, over queries.
pub fn precision_at_k(
    index: &RetrievalIndex,
    query_codes: &TernaryCodes,
    query_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if query_codes.is_empty() {
        return Err(Error::Data("empty query set".into()));
    }
    let depth = k.min(index.len());
    let mut sum = 0.0;
    for (qi, &label) in query_labels.iter().enumerate() {
        let hits = hits_at_depths(index, &query_codes.row(qi), label)?;
        sum += hits[depth - 1] as f64 / k as f64;
    }
    Ok(sum / query_codes.len() as f64)
}

/// Mean fraction of each query's relevant items found in the top-k.
pub fn recall_at_k(
    index: &RetrievalIndex,
    query_codes: &TernaryCodes,
    query_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if query_codes.is_empty() {
        return Err(Error::Data("empty query set".into()));
    }
    let depth = k.min(index.len());
    let mut sum = 0.0;
    for (qi, &label) in query_labels.iter().enumerate() {
        let total = relevant_total(index, label);
        if total == 0 {
            log::warn!("query label {label} absent from gallery; recall set to 0");
            continue;
        }
        let hits = hits_at_depths(index, &query_codes.row(qi), label)?;
        sum += hits[depth - 1] as f64 / total as f64;
    }
    Ok(sum / query_codes.len() as f64)
}

/// Precision-recall pairs swept over ranking depth 1..=G, averaged over
/// queries.
pub fn pr_curve(
    index: &RetrievalIndex,
    query_codes: &TernaryCodes,
    query_labels: &[usize],
) -> Result<Vec<(f64, f64)>> {
    if query_codes.is_empty() {
        return Err(Error::Data("empty query set".into()));
    }
    let g = index.len();
    let q = query_codes.len();
    let mut precision = vec![0.0; g];
    let mut recall = vec![0.0; g];
    for (qi, &label) in query_labels.iter().enumerate() {
        let total = relevant_total(index, label);
        let hits = hits_at_depths(index, &query_codes.row(qi), label)?;
        for d in 1..=g {
            precision[d - 1] += hits[d - 1] as f64 / d as f64;
            if total > 0 {
                recall[d - 1] += hits[d - 1] as f64 / total as f64;
            }
        }
    }
    Ok((0..g).map(|d| (recall[d] / q as f64, precision[d] / q as f64)).collect())
}

/// Metrics produced by one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub map: f64,
    pub precision_at: Vec<(usize, f64)>,
    pub recall_at: Vec<(usize, f64)>,
    pub pr: Vec<(f64, f64)>,
}

/// Compute MAP, P@k / R@k over a grid, and the PR curve in one pass.
pub fn evaluate_retrieval(
    index: &RetrievalIndex,
    query_codes: &TernaryCodes,
    query_labels: &[usize],
    k_grid: &[usize],
    map_cutoff: Option<usize>,
) -> Result<MetricsReport> {
    let map = mean_average_precision(index, query_codes, query_labels, map_cutoff)?;
    let mut precision_at = Vec::with_capacity(k_grid.len());
    let mut recall_at = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        precision_at.push((k, precision_at_k(index, query_codes, query_labels, k)?));
        recall_at.push((k, recall_at_k(index, query_codes, query_labels, k)?));
    }
    let pr = pr_curve(index, query_codes, query_labels)?;
    Ok(MetricsReport { map, precision_at, recall_at, pr })
}

/// Write `metric,k,value` rows: one `map` row, then `precision`/`recall`
/// rows per grid point.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "metric,k,value")?;
    writeln!(w, "map,,{:.9}", report.map)?;
    for &(k, v) in &report.precision_at {
        writeln!(w, "precision,{k},{v:.9}")?;
    }
    for &(k, v) in &report.recall_at {
        writeln!(w, "recall,{k},{v:.9}")?;
    }
    w.flush()?;
    Ok(())
}

/// Write `recall,precision` rows for external plotting.
pub fn write_pr_csv(path: &Path, pr: &[(f64, f64)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "recall,precision")?;
    for &(r, p) in pr {
        writeln!(w, "{r:.9},{p:.9}")?;
    }
    w.flush()?;
    Ok(())
}

/// Persist an index as a code file plus a `id,label,path` sidecar CSV.
pub fn save_index(base: &Path, index: &RetrievalIndex) -> Result<()> {
    if let Some(parent) = base.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_codes_file(&base.with_extension("tern"), &index.codes, &index.item_ids)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(base.with_extension("meta.csv"))?);
    writeln!(w, "id,label,path")?;
    for i in 0..index.len() {
        let path = index.paths.get(i).map(String::as_str).unwrap_or("");
        writeln!(w, "{},{},{}", index.item_ids[i], index.labels[i], path)?;
    }
    w.flush()?;
    Ok(())
}

/// Load an index saved by [`save_index`].
pub fn load_index(base: &Path) -> Result<RetrievalIndex> {
    let (codes, ids) = read_codes_file(&base.with_extension("tern"))?;
    let meta = std::fs::read_to_string(base.with_extension("meta.csv"))?;
    let mut labels = Vec::new();
    let mut meta_ids = Vec::new();
    let mut paths = Vec::new();
    for (lineno, line) in meta.lines().enumerate() {
        if lineno == 0 {
            continue; // header
        }
        let mut parts = line.splitn(3, ',');
        let id: u64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad id on line {}", lineno + 1)))?;
        let label: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad label on line {}", lineno + 1)))?;
        meta_ids.push(id);
        labels.push(label);
        paths.push(parts.next().unwrap_or("").to_string());
    }
    if meta_ids != ids {
        return Err(Error::Data("sidecar ids do not match code file ids".into()));
    }
    build_index(codes, labels, ids, paths)
}
