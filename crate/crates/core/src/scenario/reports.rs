use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::instance::{ensure_finite, Instance};
use crate::recovery::variance_upper_bound;
use crate::scenario::runner::{ScenarioRun, VarianceReport};
use crate::scenario::BuiltScenario;
use crate::sim::{Flow, TraceRecord, TraceSink, VoltageMode};

type CsvOut = csv::Writer<BufWriter<File>>;

fn create_csv(path: &Path) -> Result<CsvOut> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

fn num(x: f64) -> String {
    x.to_string()
}

/// Streams the trace (`trace.csv`) and the dual/signal trajectory
/// (`dual.csv`, long format) while the run progresses.
pub struct TraceCsvSink {
    trace: CsvOut,
    trace_path: PathBuf,
    dual: Option<(CsvOut, PathBuf)>,
    /// Node of every slow device in trace order.
    slow_nodes: Vec<usize>,
    nodes: usize,
    header_done: bool,
}

impl TraceCsvSink {
    pub fn create(dir: &Path, instance: &Instance, with_dual: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let trace_path = dir.join("trace.csv");
        let dual = if with_dual {
            let p = dir.join("dual.csv");
            let mut w = create_csv(&p)?;
            w.write_record(["iteration", "node", "mu_lower", "mu_upper", "alpha", "beta"])
                .map_err(csv_err(&p))?;
            Some((w, p))
        } else {
            None
        };
        Ok(TraceCsvSink {
            trace: create_csv(&trace_path)?,
            trace_path,
            dual,
            slow_nodes: instance
                .customers
                .iter()
                .flat_map(|c| std::iter::repeat_n(c.node, c.tcls.len()))
                .collect(),
            nodes: instance.nodes(),
            header_done: false,
        })
    }

    fn header(&self, with_ac: bool) -> Vec<String> {
        let mut h: Vec<String> = [
            "k",
            "slow_update",
            "epsilon",
            "lagrangian",
            "dual_value",
            "running_mean_h",
            "hull_pinned",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut per_node = |prefix: &str| h.extend((1..=self.nodes).map(|i| format!("{prefix}_{i}")));
        per_node("v");
        if with_ac {
            per_node("v_ac");
        }
        per_node("mean_v");
        per_node("p");
        per_node("q");
        per_node("tcl_relaxed_w");
        per_node("tcl_realized_w");
        per_node("mu_lower");
        per_node("mu_upper");
        h
    }

    fn by_node(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes];
        for (&node, v) in self.slow_nodes.iter().zip(values) {
            out[node - 1] += v;
        }
        out
    }

    pub fn finish(mut self) -> Result<Vec<PathBuf>> {
        self.trace.flush().map_err(|e| Error::io(&self.trace_path, e))?;
        let mut out = vec![self.trace_path];
        if let Some((mut w, p)) = self.dual.take() {
            w.flush().map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }
}

impl TraceSink for TraceCsvSink {
    fn record(&mut self, r: &TraceRecord) -> Result<Flow> {
        if !self.header_done {
            let h = self.header(r.v_ac.is_some());
            self.trace.write_record(&h).map_err(csv_err(&self.trace_path))?;
            self.header_done = true;
        }
        let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
        let mut row = vec![
            r.k.to_string(),
            u8::from(r.slow_update).to_string(),
            num(r.epsilon),
            num(r.lagrangian),
            opt(r.dual_value),
            opt(r.running_mean_h),
            r.flags.hull_pinned.len().to_string(),
        ];
        let relaxed = self.by_node(&r.slow_relaxed);
        let realized = self.by_node(&r.slow_realized);
        let mut cols: Vec<&[f64]> = vec![&r.v_linear];
        if let Some(ac) = &r.v_ac {
            cols.push(ac);
        }
        cols.extend([
            r.running_mean_v.as_slice(),
            &r.p,
            &r.q,
            &relaxed,
            &realized,
            &r.dual.lower,
            &r.dual.upper,
        ]);
        for c in cols {
            row.extend(c.iter().copied().map(num));
        }
        self.trace.write_record(&row).map_err(csv_err(&self.trace_path))?;
        if let Some((w, p)) = &mut self.dual {
            for i in 0..self.nodes {
                w.write_record([
                    r.k.to_string(),
                    (i + 1).to_string(),
                    num(r.dual.lower[i]),
                    num(r.dual.upper[i]),
                    num(r.signals.alpha[i]),
                    num(r.signals.beta[i]),
                ])
                .map_err(csv_err(p))?;
            }
        }
        Ok(Flow::Continue)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub v: Vec<f64>,
    pub primal_value: f64,
    pub dual_value: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub voltage_mode: VoltageMode,
    pub iterations: u64,
    pub stopped_early: bool,
    pub converged_at: Option<u64>,
    pub post_samples: u64,
    pub running_mean_v: Vec<f64>,
    pub running_mean_h: f64,
    pub post_mean_v: Vec<f64>,
    pub post_variance_v: Vec<f64>,
    pub ci95_half_width: Vec<f64>,
    pub variance_bound: Vec<f64>,
    pub violation_probability_bound: Vec<f64>,
    pub upper_violation_frequency: Vec<f64>,
    pub lower_violation_frequency: Vec<f64>,
    pub uncontrolled_v: Vec<f64>,
    pub oracle: Option<OracleSummary>,
    pub relaxation_deviation: Option<f64>,
    pub max_signal: f64,
    pub max_residual_norm: f64,
    pub hull_pinned_events: u64,
    pub warnings: Vec<String>,
}

impl RunSummary {
    pub fn new(run: &ScenarioRun, built: &BuiltScenario) -> Result<Self> {
        let instance = &built.instance;
        let bound = variance_upper_bound(&instance.model, &instance.slow_spans_worst_case());
        let samples = run.post.count().max(1) as f64;
        let freq = |c: &[u64]| c.iter().map(|&x| x as f64 / samples).collect::<Vec<_>>();
        let s = RunSummary {
            name: built.config.name.clone(),
            seed: built.config.seed,
            voltage_mode: built.config.voltage_mode,
            iterations: run.outcome.iterations,
            stopped_early: run.outcome.stopped_early,
            converged_at: run.converged_at,
            post_samples: run.post.count(),
            running_mean_v: run.outcome.stats.mean_voltage(),
            running_mean_h: run.outcome.stats.dual_value.mean(),
            post_mean_v: run.post.mean_voltage(),
            post_variance_v: run.post.voltage_variance(),
            ci95_half_width: run.post.ci95_half_widths(),
            violation_probability_bound: bound.iter().map(|&b| built.robust.violation_probability_bound(b)).collect(),
            variance_bound: bound,
            upper_violation_frequency: freq(&run.upper_violations),
            lower_violation_frequency: freq(&run.lower_violations),
            uncontrolled_v: run.uncontrolled.clone(),
            oracle: run.oracle.as_ref().map(|o| OracleSummary {
                v: o.v.clone(),
                primal_value: o.primal_value,
                dual_value: o.dual_value,
                kkt_residual: o.kkt_residual,
                iterations: o.iterations,
            }),
            relaxation_deviation: run.relaxation.map(|r| r.max_primal_deviation),
            max_signal: run.outcome.max_signal,
            max_residual_norm: run.outcome.max_residual_norm,
            hull_pinned_events: run.outcome.hull_pinned_events,
            warnings: built.warnings.clone(),
        };
        s.check_finite()?;
        Ok(s)
    }

    fn check_finite(&self) -> Result<()> {
        let scalars = [self.running_mean_h, self.max_signal, self.max_residual_norm];
        ensure_finite("summary scalars", &scalars).map_err(|_| Error::NonFinite("summary".into()))?;
        for (what, v) in [
            ("running mean", &self.running_mean_v),
            ("post mean", &self.post_mean_v),
            ("post variance", &self.post_variance_v),
            ("confidence interval", &self.ci95_half_width),
            ("variance bound", &self.variance_bound),
            ("uncontrolled voltage", &self.uncontrolled_v),
        ] {
            ensure_finite(what, v).map_err(|_| Error::NonFinite(what.to_string()))?;
        }
        if let Some(o) = &self.oracle {
            ensure_finite("oracle", &[o.primal_value, o.dual_value, o.kkt_residual])
                .and_then(|_| ensure_finite("oracle voltage", &o.v))
                .map_err(|_| Error::NonFinite("oracle".into()))?;
        }
        Ok(())
    }
}

/// Writes `fig2.csv`, `fig4.csv`, `summary.json` and, with `plots`, SVG
/// renderings of the two figures. Returns the written paths.
pub fn emit_reports(run: &ScenarioRun, built: &BuiltScenario, dir: &Path, plots: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let oracle_v = run.oracle.as_ref().map(|o| o.v[run.fig2_node - 1]);

    let p = dir.join("fig2.csv");
    let mut w = create_csv(&p)?;
    w.write_record(["iteration", "node", "v", "running_mean", "oracle_v"]).map_err(csv_err(&p))?;
    for row in &run.fig2 {
        w.write_record([
            row.k.to_string(),
            run.fig2_node.to_string(),
            num(row.v),
            num(row.running_mean),
            oracle_v.map(num).unwrap_or_default(),
        ])
        .map_err(csv_err(&p))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    written.push(p);

    // fall back to whole-run statistics if the run never converged
    let stats = if run.post.count() > 1 { &run.post } else { &run.outcome.stats };
    let mean = stats.mean_voltage();
    let half = stats.ci95_half_widths();
    let p = dir.join("fig4.csv");
    let mut w = create_csv(&p)?;
    w.write_record(["node", "uncontrolled_v", "controlled_mean", "ci_low", "ci_high", "v_min", "v_max"])
        .map_err(csv_err(&p))?;
    for i in 0..mean.len() {
        w.write_record([
            (i + 1).to_string(),
            num(run.uncontrolled[i]),
            num(mean[i]),
            num(mean[i] - half[i]),
            num(mean[i] + half[i]),
            num(built.nominal.lower[i]),
            num(built.nominal.upper[i]),
        ])
        .map_err(csv_err(&p))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    written.push(p);

    let summary = RunSummary::new(run, built)?;
    let p = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::io(&p, std::io::Error::other(e)))?;
    std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    written.push(p);

    if plots {
        let series_v: Vec<(f64, f64)> = run.fig2.iter().map(|r| (r.k as f64, r.v)).collect();
        let series_m: Vec<(f64, f64)> = run.fig2.iter().map(|r| (r.k as f64, r.running_mean)).collect();
        let mut lines = vec![
            Series { label: "v", color: "#9ab", points: series_v },
            Series { label: "running mean", color: "#c30", points: series_m },
        ];
        if let (Some(v), Some(first), Some(last)) = (oracle_v, run.fig2.first(), run.fig2.last()) {
            lines.push(Series { label: "relaxed optimum", color: "#000", points: vec![(first.k as f64, v), (last.k as f64, v)] });
        }
        let p = dir.join("fig2.svg");
        write_svg(&p, &format!("Voltage at node {}", run.fig2_node), &lines)?;
        written.push(p);

        let idx = |f: &dyn Fn(usize) -> f64| (0..mean.len()).map(|i| ((i + 1) as f64, f(i))).collect::<Vec<_>>();
        let lines = vec![
            Series { label: "uncontrolled", color: "#36c", points: idx(&|i| run.uncontrolled[i]) },
            Series { label: "controlled mean", color: "#c30", points: idx(&|i| mean[i]) },
            Series { label: "CI high", color: "#e96", points: idx(&|i| mean[i] + half[i]) },
            Series { label: "CI low", color: "#e96", points: idx(&|i| mean[i] - half[i]) },
            Series { label: "upper limit", color: "#000", points: idx(&|i| built.nominal.upper[i]) },
        ];
        let p = dir.join("fig4.svg");
        write_svg(&p, "Voltage profile", &lines)?;
        written.push(p);
    }
    Ok(written)
}

/// `preset,node,variance,bound,device_sum_bound,samples`.
pub fn write_fig3(report: &VarianceReport, path: &Path) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["preset", "node", "variance", "bound", "device_sum_bound", "samples"])
        .map_err(csv_err(path))?;
    for p in &report.presets {
        for i in 0..p.variance.len() {
            w.write_record([
                p.name.clone(),
                (i + 1).to_string(),
                num(p.variance[i]),
                num(p.bound[i]),
                num(p.device_sum_bound[i]),
                p.samples.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Series {
    label: &'static str,
    color: &'static str,
    points: Vec<(f64, f64)>,
}

fn write_svg(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    let (w, h, m) = (800.0, 450.0, 50.0);
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1e-3;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{m}\" y=\"20\">{title}</text>\n\
         <text x=\"5\" y=\"{:.1}\">{y1:.4}</text><text x=\"5\" y=\"{:.1}\">{y0:.4}</text>\n\
         <text x=\"{m}\" y=\"{:.1}\">{x0}</text><text x=\"{:.1}\" y=\"{:.1}\">{x1}</text>\n",
        sy(y1),
        sy(y0),
        h - 20.0,
        w - m - 40.0,
        h - 20.0
    );
    for (k, s) in series.iter().enumerate() {
        // thin long series so the file stays small
        let stride = (s.points.len() / 4000).max(1);
        let pts: Vec<String> = s
            .points
            .iter()
            .step_by(stride)
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\" points=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">{}</text>\n",
            s.color,
            pts.join(" "),
            w - 180.0,
            40.0 + 15.0 * k as f64,
            s.color,
            s.label
        ));
    }
    out.push_str("</svg>\n");
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
