//! Streaming run artifacts: the per-step metrics CSV, the routing-records
//! CSV, and the per-router entropy table built from those records.
//!
//! Both sinks are append-only, write their header exactly once, and flush
//! after every row, so a run killed at any point loses at most the row
//! being written. Readers tolerate exactly one trailing partial line for
//! the same reason.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::routing;

/// First line of every metrics file; bump when columns change meaning.
pub const METRICS_VERSION: &str = "# competesmoe-metrics v1";
/// First line of every routing-records file.
pub const RECORDS_VERSION: &str = "# competesmoe-routing-records v1";

/// One metrics row. Per-layer vectors carry one entry per SMoE block in
/// block order; `None` renders as an empty CSV cell (e.g. router loss on a
/// step where none was computed).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: Split,
    pub nll: f64,
    pub bpc: f64,
    pub router_loss: Vec<Option<f64>>,
    pub entropy: Vec<Option<f64>>,
    pub expert_calls: u64,
    pub wall_ms: f64,
}

/// Append-only CSV writer for per-step metrics.
pub struct MetricsSink {
    writer: BufWriter<File>,
    path: PathBuf,
    smoe_blocks: Vec<usize>,
}

impl MetricsSink {
    /// Create (truncating) the metrics file and write version + header.
    pub fn create(path: &Path, smoe_blocks: &[usize]) -> Result<MetricsSink> {
        let file = File::create(path)
            .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        let mut sink = MetricsSink {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
            smoe_blocks: smoe_blocks.to_vec(),
        };
        let mut header = String::from("step,split,nll,bpc");
        for b in smoe_blocks {
            write!(header, ",router_loss_b{b}").unwrap();
        }
        for b in smoe_blocks {
            write!(header, ",entropy_b{b}").unwrap();
        }
        header.push_str(",expert_calls,wall_ms");
        writeln!(sink.writer, "{METRICS_VERSION}").map_err(sink.io_err())?;
        writeln!(sink.writer, "{header}").map_err(sink.io_err())?;
        sink.writer.flush().map_err(sink.io_err())?;
        Ok(sink)
    }

    fn io_err(&self) -> impl Fn(std::io::Error) -> Error + '_ {
        |e| Error::Corpus(format!("{}: {e}", self.path.display()))
    }

    /// Append one row and flush it to disk.
    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        assert_eq!(row.router_loss.len(), self.smoe_blocks.len(), "router_loss arity");
        assert_eq!(row.entropy.len(), self.smoe_blocks.len(), "entropy arity");
        let mut line = format!("{},{},{},{}", row.step, row.split.name(), row.nll, row.bpc);
        for cell in row.router_loss.iter().chain(&row.entropy) {
            match cell {
                Some(v) => write!(line, ",{v}").unwrap(),
                None => line.push(','),
            }
        }
        write!(line, ",{},{}", row.expert_calls, row.wall_ms).unwrap();
        writeln!(self.writer, "{line}").map_err(self.io_err())?;
        self.writer.flush().map_err(self.io_err())?;
        Ok(())
    }
}

/// Parsed metrics file: the header columns and all complete rows as raw
/// cells. A single trailing partial line (abrupt termination mid-write) is
/// dropped; a malformed line anywhere else is an error.
pub fn read_csv(path: &Path, expected_version: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    if lines.first().map(|l| l.trim()) != Some(expected_version) {
        return Err(Error::Corpus(format!(
            "{}: expected version line {expected_version:?}",
            path.display()
        )));
    }
    let header: Vec<String> = match lines.get(1) {
        Some(h) => h.split(',').map(str::to_string).collect(),
        None => return Err(Error::Corpus(format!("{}: missing header", path.display()))),
    };
    let mut rows = Vec::new();
    let body = &lines[2..];
    for (i, line) in body.iter().enumerate() {
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != header.len() {
            if i + 1 == body.len() {
                break; // tolerated: partial final line from an interrupted write
            }
            return Err(Error::Corpus(format!(
                "{}: row {} has {} cells, header has {}",
                path.display(),
                i,
                cells.len(),
                header.len()
            )));
        }
        rows.push(cells);
    }
    Ok((header, rows))
}

/// Parsed metrics rows with typed fields.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<MetricsRow>)> {
    let (header, raw) = read_csv(path, METRICS_VERSION)?;
    let loss_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("router_loss_b"))
        .map(|(i, _)| i)
        .collect();
    let ent_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("entropy_b"))
        .map(|(i, _)| i)
        .collect();
    let idx = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Corpus(format!("{}: missing column {name}", path.display())))
    };
    let (i_step, i_split, i_nll, i_bpc) = (idx("step")?, idx("split")?, idx("nll")?, idx("bpc")?);
    let (i_calls, i_wall) = (idx("expert_calls")?, idx("wall_ms")?);
    let cell_f64 = |s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Corpus(format!("bad numeric cell {s:?}")))
    };
    let opt_f64 = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() { Ok(None) } else { cell_f64(s).map(Some) }
    };
    let mut rows = Vec::new();
    for cells in raw {
        let split = match cells[i_split].as_str() {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            other => return Err(Error::Corpus(format!("unknown split {other:?}"))),
        };
        rows.push(MetricsRow {
            step: cells[i_step].parse().map_err(|_| Error::Corpus("bad step".to_string()))?,
            split,
            nll: cell_f64(&cells[i_nll])?,
            bpc: cell_f64(&cells[i_bpc])?,
            router_loss: loss_cols.iter().map(|&i| opt_f64(&cells[i])).collect::<Result<_>>()?,
            entropy: ent_cols.iter().map(|&i| opt_f64(&cells[i])).collect::<Result<_>>()?,
            expert_calls: cells[i_calls].parse().map_err(|_| Error::Corpus("bad calls".to_string()))?,
            wall_ms: cell_f64(&cells[i_wall])?,
        });
    }
    Ok((header, rows))
}

/// Append-only CSV writer for per-token routing records: which experts a
/// router chose and with what weights.
pub struct RoutingRecordWriter {
    writer: BufWriter<File>,
    path: PathBuf,
    method: String,
}

impl RoutingRecordWriter {
    pub fn create(path: &Path, method: &str) -> Result<RoutingRecordWriter> {
        let file = File::create(path)
            .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        let mut w = RoutingRecordWriter {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
            method: method.to_string(),
        };
        writeln!(w.writer, "{RECORDS_VERSION}").map_err(w.io_err())?;
        writeln!(w.writer, "method,step,block,token,selected,weights,entropy").map_err(w.io_err())?;
        w.writer.flush().map_err(w.io_err())?;
        Ok(w)
    }

    fn io_err(&self) -> impl Fn(std::io::Error) -> Error + '_ {
        |e| Error::Corpus(format!("{}: {e}", self.path.display()))
    }

    /// Append every token of one layer's gate output. `weights` is the
    /// flat `[tokens, n]` gate matrix; `selected[t]` the chosen expert
    /// indices in rank order. Multi-valued cells join with `|`.
    pub fn append_layer(
        &mut self,
        step: u64,
        block: usize,
        weights: &[f64],
        n: usize,
        selected: &[Vec<usize>],
    ) -> Result<()> {
        assert!(n > 0 && weights.len() == n * selected.len(), "weights/selected arity");
        for (t, sel) in selected.iter().enumerate() {
            let row = &weights[t * n..(t + 1) * n];
            let sel_cell =
                sel.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("|");
            let w_cell = row.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("|");
            let h = routing::routing_entropy(row, n);
            writeln!(self.writer, "{},{step},{block},{t},{sel_cell},{w_cell},{h}", self.method)
                .map_err(self.io_err())?;
        }
        self.writer.flush().map_err(self.io_err())?;
        Ok(())
    }
}

/// Mean routing entropy per (method, block), recomputed from the recorded
/// gate weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTable {
    /// Block ids in ascending order — the table's router columns.
    pub blocks: Vec<usize>,
    /// One row per method: (method, per-block mean entropy, average).
    pub rows: Vec<(String, Vec<f64>, f64)>,
}

/// Read one or more routing-record files and build the entropy table.
/// Methods appear in first-seen order across the files.
pub fn entropy_table(paths: &[PathBuf]) -> Result<EntropyTable> {
    // (method → block → (sum, count)); method order preserved separately.
    let mut sums: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    let mut method_order: Vec<String> = Vec::new();
    for path in paths {
        let (header, rows) = read_csv(path, RECORDS_VERSION)?;
        let idx = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Corpus(format!("{}: missing column {name}", path.display())))
        };
        let (i_method, i_block, i_weights) = (idx("method")?, idx("block")?, idx("weights")?);
        for cells in rows {
            let method = cells[i_method].clone();
            let block: usize = cells[i_block]
                .parse()
                .map_err(|_| Error::Corpus(format!("bad block cell {:?}", cells[i_block])))?;
            let weights: Vec<f64> = cells[i_weights]
                .split('|')
                .map(|w| {
                    w.parse::<f64>()
                        .map_err(|_| Error::Corpus(format!("bad weight cell {w:?}")))
                })
                .collect::<Result<_>>()?;
            let h = routing::routing_entropy(&weights, weights.len());
            if !sums.contains_key(&method) {
                method_order.push(method.clone());
            }
            let slot = sums.entry(method).or_default().entry(block).or_insert((0.0, 0));
            slot.0 += h;
            slot.1 += 1;
        }
    }
    let mut blocks: Vec<usize> =
        sums.values().flat_map(|m| m.keys().copied()).collect();
    blocks.sort_unstable();
    blocks.dedup();
    let mut rows = Vec::new();
    for method in method_order {
        let per_block = &sums[&method];
        let cells: Vec<f64> = blocks
            .iter()
            .map(|b| per_block.get(b).map_or(f64::NAN, |&(s, c)| s / c as f64))
            .collect();
        let finite: Vec<f64> = cells.iter().copied().filter(|v| v.is_finite()).collect();
        let avg = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
        rows.push((method, cells, avg));
    }
    Ok(EntropyTable { blocks, rows })
}

impl std::fmt::Display for EntropyTable {
    /// One row per method, one column per router, plus the average —
    /// entropies printed with four decimals.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name_w = self
            .rows
            .iter()
            .map(|(m, _, _)| m.len())
            .chain(std::iter::once("method".len()))
            .max()
            .unwrap_or(6);
        write!(f, "{:<name_w$}", "method")?;
        for b in &self.blocks {
            write!(f, "  {:>8}", format!("router{b}"))?;
        }
        writeln!(f, "  {:>8}", "average")?;
        for (method, cells, avg) in &self.rows {
            write!(f, "{method:<name_w$}")?;
            for c in cells {
                if c.is_finite() {
                    write!(f, "  {c:>8.4}")?;
                } else {
                    write!(f, "  {:>8}", "-")?;
                }
            }
            writeln!(f, "  {avg:>8.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, split: Split, nll: f64) -> MetricsRow {
        MetricsRow {
            step,
            split,
            nll,
            bpc: nll / std::f64::consts::LN_2,
            router_loss: vec![Some(0.5), None],
            entropy: vec![Some(0.69), Some(0.0)],
            expert_calls: 2048,
            wall_ms: 12.5,
        }
    }

    #[test]
    fn metrics_round_trip_including_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut sink = MetricsSink::create(&path, &[0, 1]).unwrap();
        sink.append(&row(1, Split::Train, 1.5)).unwrap();
        sink.append(&row(200, Split::Valid, 1.2)).unwrap();
        drop(sink);
        let (header, rows) = read_metrics(&path).unwrap();
        assert_eq!(
            header,
            vec![
                "step", "split", "nll", "bpc", "router_loss_b0", "router_loss_b1",
                "entropy_b0", "entropy_b1", "expert_calls", "wall_ms"
            ]
        );
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], row(1, Split::Train, 1.5));
        assert_eq!(rows[1].split, Split::Valid);
        assert_eq!(rows[1].router_loss, vec![Some(0.5), None]);
    }

    #[test]
    fn truncated_final_line_loses_no_complete_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut sink = MetricsSink::create(&path, &[0]).unwrap();
        let full = MetricsRow {
            router_loss: vec![Some(0.1)],
            entropy: vec![Some(0.2)],
            ..row(1, Split::Train, 1.0)
        };
        sink.append(&full).unwrap();
        sink.append(&MetricsRow { step: 2, ..full.clone() }).unwrap();
        drop(sink);
        // Simulate a crash mid-row: append half a line, at every prefix
        // length of a plausible third row.
        let intact = std::fs::read_to_string(&path).unwrap();
        let tail = "3,train,0.9";
        for cut in 1..=tail.len() {
            std::fs::write(&path, format!("{intact}{}", &tail[..cut])).unwrap();
            let (_, rows) = read_metrics(&path).unwrap();
            assert_eq!(rows.len(), 2, "cut {cut} lost a complete row");
        }
    }

    #[test]
    fn malformed_interior_row_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        std::fs::write(
            &path,
            format!("{METRICS_VERSION}\nstep,split,nll,bpc,expert_calls,wall_ms\n1,train\n2,train,1,1,4,5\n"),
        )
        .unwrap();
        assert!(read_metrics(&path).is_err());
    }

    #[test]
    fn one_hot_records_give_zero_entropy_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        let mut w = RoutingRecordWriter::create(&path, "smoe").unwrap();
        // Four tokens, all one-hot on some expert of four.
        let weights = vec![
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ];
        let selected = vec![vec![0], vec![2], vec![1], vec![3]];
        w.append_layer(10, 0, &weights, 4, &selected).unwrap();
        w.append_layer(10, 2, &weights, 4, &selected).unwrap();
        drop(w);
        let table = entropy_table(&[path]).unwrap();
        assert_eq!(table.blocks, vec![0, 2]);
        assert_eq!(table.rows.len(), 1);
        let (method, cells, avg) = &table.rows[0];
        assert_eq!(method, "smoe");
        assert!(cells.iter().all(|&c| c == 0.0));
        assert_eq!(*avg, 0.0);
        let rendered = table.to_string();
        assert!(rendered.contains("0.0000"), "rendered:\n{rendered}");
        assert!(rendered.contains("router0") && rendered.contains("average"));
    }

    #[test]
    fn entropy_table_merges_methods_across_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let uniform = vec![0.5, 0.5, 0.0, 0.0];
        let onehot = vec![0.0, 1.0, 0.0, 0.0];
        let mut wa = RoutingRecordWriter::create(&a, "competesmoe").unwrap();
        wa.append_layer(0, 1, &uniform, 4, &[vec![0, 1]]).unwrap();
        drop(wa);
        let mut wb = RoutingRecordWriter::create(&b, "smoe_fixed").unwrap();
        wb.append_layer(0, 1, &onehot, 4, &[vec![1]]).unwrap();
        drop(wb);
        let table = entropy_table(&[a, b]).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].0, "competesmoe");
        assert!((table.rows[0].2 - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(table.rows[1].2, 0.0);
    }
}
