//! Signal-propagation probes: per-projection forward-output means and
//! gradient norm-squared values, persisted as CSV traces, plus the
//! offline report that summarizes per-layer medians and cross-projection
//! ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ProjOutput, ProjRole};
use crate::tensor::Scalar;

pub const TRACE_HEADER: &str = "step,layer_id,proj,stat,value";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stat {
    FwdMean,
    GradNormSq,
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stat::FwdMean => "fwd_mean",
            Stat::GradNormSq => "grad_norm_sq",
        })
    }
}

impl FromStr for Stat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fwd_mean" => Ok(Stat::FwdMean),
            "grad_norm_sq" => Ok(Stat::GradNormSq),
            other => Err(Error::Invalid(format!("unknown stat '{other}'"))),
        }
    }
}

/// One trace data point.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub layer_id: usize,
    pub proj: ProjRole,
    pub stat: Stat,
    pub value: f64,
}

/// Frobenius norm squared: sum of squared elements.
pub fn grad_norm_sq<T: Scalar>(grad: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for &g in grad {
        let g = g.to_f64();
        acc += g * g;
    }
    acc
}

/// Arithmetic mean over all elements.
pub fn fwd_mean<T: Scalar>(data: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for &v in data {
        acc += v.to_f64();
    }
    acc / data.len() as f64
}

/// Append-only CSV sink, flushed in step order.
pub struct TraceSink {
    path: PathBuf,
    writer: BufWriter<File>,
    records: usize,
}

impl TraceSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "{TRACE_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(TraceSink { path: path.to_path_buf(), writer, records: 0 })
    }

    pub fn append(&mut self, rec: &TraceRecord) -> Result<()> {
        if !rec.value.is_finite() {
            return Err(Error::Invalid(format!(
                "non-finite trace value at step {} layer {} {} {}",
                rec.step, rec.layer_id, rec.proj, rec.stat
            )));
        }
        writeln!(
            self.writer,
            "{},{},{},{},{:.8e}",
            rec.step, rec.layer_id, rec.proj, rec.stat, rec.value
        )
        .map_err(|e| Error::io(&self.path, e))?;
        self.records += 1;
        Ok(())
    }

    pub fn records_written(&self) -> usize {
        self.records
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Probe configuration: which projection roles are observed and how
/// often (every `every_n_steps` training steps, starting at step 0).
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub roles: BTreeSet<ProjRole>,
    pub every_n_steps: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { roles: ProjRole::ALL.into_iter().collect(), every_n_steps: 10 }
    }
}

/// Observer wired into the training loop. Reads tape values and
/// gradients only; it never mutates the computation.
pub struct Probe {
    cfg: ProbeConfig,
    sink: TraceSink,
    last_step: Option<usize>,
}

impl Probe {
    pub fn new(cfg: ProbeConfig, sink: TraceSink) -> Result<Self> {
        if cfg.every_n_steps == 0 {
            return Err(Error::Invalid("every_n_steps must be positive".into()));
        }
        Ok(Probe { cfg, sink, last_step: None })
    }

    pub fn should_sample(&self, step: usize) -> bool {
        step % self.cfg.every_n_steps == 0
    }

    /// Record both statistics for every configured projection output.
    /// Must run after backward so output gradients are populated.
    /// Steps must be observed at most once, in increasing order; this
    /// keeps (step, layer, proj, stat) unique and the file step-ordered.
    pub fn observe<T: Scalar>(&mut self, step: usize, projections: &[ProjOutput<T>]) -> Result<()> {
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(Error::Invalid(format!(
                    "probe already observed step {last}; got step {step} (duplicate installation?)"
                )));
            }
        }
        self.last_step = Some(step);
        for p in projections {
            if !self.cfg.roles.contains(&p.role) {
                continue;
            }
            let mean = p.var.map_value(fwd_mean);
            self.sink.append(&TraceRecord {
                step,
                layer_id: p.layer_id,
                proj: p.role,
                stat: Stat::FwdMean,
                value: mean,
            })?;
            let gns = p.var.map_grad(|g| {
                if g.is_empty() {
                    None
                } else {
                    Some(grad_norm_sq(g))
                }
            });
            let gns = gns.ok_or_else(|| {
                Error::Invalid(format!(
                    "missing gradient at layer {} {} (probe ran before backward?)",
                    p.layer_id, p.role
                ))
            })?;
            self.sink.append(&TraceRecord {
                step,
                layer_id: p.layer_id,
                proj: p.role,
                stat: Stat::GradNormSq,
                value: gns,
            })?;
        }
        Ok(())
    }

    pub fn records_written(&self) -> usize {
        self.sink.records_written()
    }

    pub fn finish(self) -> Result<()> {
        self.sink.finish()
    }
}

/// Parse a trace CSV, reporting the first malformed line.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        if idx == 0 {
            if line.trim_end() != TRACE_HEADER {
                return Err(Error::TraceParse {
                    line: lineno,
                    detail: format!("expected header '{TRACE_HEADER}', got '{line}'"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::TraceParse {
                line: lineno,
                detail: format!("expected 5 fields, got {}", parts.len()),
            });
        }
        let parse_num = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::TraceParse {
                line: lineno,
                detail: format!("bad {what} '{s}'"),
            })
        };
        let rec = TraceRecord {
            step: parse_num(parts[0], "step")?,
            layer_id: parse_num(parts[1], "layer_id")?,
            proj: parts[2].parse().map_err(|_| Error::TraceParse {
                line: lineno,
                detail: format!("bad proj '{}'", parts[2]),
            })?,
            stat: parts[3].parse().map_err(|_| Error::TraceParse {
                line: lineno,
                detail: format!("bad stat '{}'", parts[3]),
            })?,
            value: parts[4].parse().map_err(|_| Error::TraceParse {
                line: lineno,
                detail: format!("bad value '{}'", parts[4]),
            })?,
        };
        records.push(rec);
    }
    Ok(records)
}

/// Per-layer summary row: median grad_norm_sq per projection and the
/// o/q, o/k, v/q, v/k ratios.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SummaryRow {
    pub layer_id: usize,
    pub q_median: f64,
    pub k_median: f64,
    pub v_median: f64,
    pub o_median: f64,
    pub o_over_q: f64,
    pub o_over_k: f64,
    pub v_over_q: f64,
    pub v_over_k: f64,
}

#[derive(Debug)]
pub struct TraceReport {
    pub summary: Vec<SummaryRow>,
    pub series_files: Vec<PathBuf>,
    pub records: usize,
}

pub fn median(sorted_ascending: &[f64]) -> f64 {
    let n = sorted_ascending.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted_ascending[n / 2]
    } else {
        0.5 * (sorted_ascending[n / 2 - 1] + sorted_ascending[n / 2])
    }
}

/// Generate the per-(layer, stat) series files and the grad-norm
/// summary table from a trace CSV.
pub fn trace_report(trace_path: &Path, out_dir: &Path) -> Result<TraceReport> {
    let records = read_trace(trace_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // (layer, stat) -> step -> role -> value
    let mut series: BTreeMap<(usize, Stat), BTreeMap<usize, BTreeMap<ProjRole, f64>>> =
        BTreeMap::new();
    for r in &records {
        series
            .entry((r.layer_id, r.stat))
            .or_default()
            .entry(r.step)
            .or_default()
            .insert(r.proj, r.value);
    }

    let mut series_files = Vec::new();
    for ((layer, stat), steps) in &series {
        let path = out_dir.join(format!("layer{layer}_{stat}.csv"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "step,q,k,v,o").map_err(|e| Error::io(&path, e))?;
        for (step, by_role) in steps {
            let cell = |r: ProjRole| {
                by_role.get(&r).map(|v| format!("{v:.8e}")).unwrap_or_default()
            };
            writeln!(
                w,
                "{step},{},{},{},{}",
                cell(ProjRole::Q),
                cell(ProjRole::K),
                cell(ProjRole::V),
                cell(ProjRole::O)
            )
            .map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        series_files.push(path);
    }

    // Median grad_norm_sq per (layer, proj).
    let mut grads: BTreeMap<(usize, ProjRole), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.stat == Stat::GradNormSq) {
        grads.entry((r.layer_id, r.proj)).or_default().push(r.value);
    }
    for v in grads.values_mut() {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let layers: BTreeSet<usize> = grads.keys().map(|(l, _)| *l).collect();
    let mut summary = Vec::new();
    for layer in layers {
        let med = |r: ProjRole| grads.get(&(layer, r)).map(|v| median(v)).unwrap_or(f64::NAN);
        let (q, k, v, o) = (med(ProjRole::Q), med(ProjRole::K), med(ProjRole::V), med(ProjRole::O));
        summary.push(SummaryRow {
            layer_id: layer,
            q_median: q,
            k_median: k,
            v_median: v,
            o_median: o,
            o_over_q: o / q,
            o_over_k: o / k,
            v_over_q: v / q,
            v_over_k: v / k,
        });
    }

    let summary_path = out_dir.join("summary.csv");
    let file = File::create(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "layer_id,q_median,k_median,v_median,o_median,o_over_q,o_over_k,v_over_q,v_over_k")
        .map_err(|e| Error::io(&summary_path, e))?;
    for row in &summary {
        writeln!(
            w,
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            row.layer_id,
            row.q_median,
            row.k_median,
            row.v_median,
            row.o_median,
            row.o_over_q,
            row.o_over_k,
            row.v_over_q,
            row.v_over_k
        )
        .map_err(|e| Error::io(&summary_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&summary_path, e))?;
    series_files.push(summary_path);

    Ok(TraceReport { summary, series_files, records: records.len() })
}
