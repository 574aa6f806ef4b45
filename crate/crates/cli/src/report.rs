use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use volstream::report::{
    bandwidth_csv, bandwidth_table, baseline_saving, latency_csv, read_log, summary_csv, SessionReport,
};

use crate::config::{self, create_dir, data, usage, write_file, write_resolved, Outcome};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Session logs (JSON lines).
    logs: Vec<PathBuf>,
    /// Full-retransmit log of the same input, for the saving factor.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Directory for CSV tables; tables are only printed when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for uniformity; reports are deterministic.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub logs: Vec<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn load(path: &Path) -> Result<SessionReport, crate::Failure> {
    let records = read_log(path)
        .with_context(|| format!("log {}", path.display()))
        .map_err(data)?;
    Ok(SessionReport::from_records(&records))
}

pub fn run(args: ReportArgs) -> Outcome {
    let mut cfg: ReportConfig = config::load(args.config.as_deref())?;
    if !args.logs.is_empty() {
        cfg.logs = args.logs;
    }
    cfg.baseline = args.baseline.or(cfg.baseline);
    cfg.out = args.out.or(cfg.out);
    cfg.seed = args.seed.or(cfg.seed);
    if cfg.logs.is_empty() {
        return Err(usage(anyhow::anyhow!("at least one session log is required")));
    }

    let reports = cfg.logs.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<String> = cfg.logs.iter().map(|p| p.display().to_string()).collect();
    let labeled: Vec<(&str, &SessionReport)> = labels.iter().map(String::as_str).zip(&reports).collect();
    let rows = bandwidth_table(&reports);
    let bw = bandwidth_csv(&rows).map_err(data)?;
    let lat = latency_csv(&labeled).map_err(data)?;
    let summary = summary_csv(&reports).map_err(data)?;

    println!("# bandwidth\n{bw}\n# latency (ms, max across cameras then mean across frames)\n{lat}\n# summary\n{summary}");
    if let Some(b) = &cfg.baseline {
        let base = load(b)?;
        for (label, r) in &labeled {
            if let Some(s) = baseline_saving(r, &base) {
                println!("{label}: cube-update saving against baseline {s:.2}x");
            }
        }
    }
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        write_file(&out.join("bandwidth.csv"), bw)?;
        write_file(&out.join("latency.csv"), lat)?;
        write_file(&out.join("summary.csv"), summary)?;
        write_resolved(out, &cfg)?;
    }
    Ok(())
}
