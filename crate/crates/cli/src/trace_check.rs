use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use volstream::scene_reuse::parse_viewport_trace;
use volstream::vabr::BandwidthTrace;

use crate::config::{data, usage, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Bandwidth,
    Viewport,
}

#[derive(Debug, Args)]
pub struct TraceCheckArgs {
    files: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "bandwidth")]
    kind: Kind,
    /// Accepted for uniformity.
    #[arg(long)]
    seed: Option<u64>,
    /// Accepted for uniformity.
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn run(args: TraceCheckArgs) -> Outcome {
    if args.files.is_empty() {
        return Err(usage(anyhow!("no trace files given")));
    }
    for f in &args.files {
        let text = std::fs::read_to_string(f)
            .with_context(|| format!("reading {}", f.display()))
            .map_err(data)?;
        match args.kind {
            Kind::Bandwidth => {
                let t = BandwidthTrace::parse(&text)
                    .with_context(|| format!("{}", f.display()))
                    .map_err(data)?;
                let per_s = t.per_second_bps(t.span_s().ceil().max(1.0) as usize);
                let mean = if per_s.is_empty() {
                    0.0
                } else {
                    per_s.iter().sum::<f64>() / per_s.len() as f64 / 1e6
                };
                println!("{}: ok, {:.1} s, mean {mean:.2} Mbps", f.display(), t.span_s());
            }
            Kind::Viewport => {
                let v = parse_viewport_trace(&text)
                    .with_context(|| format!("{}", f.display()))
                    .map_err(data)?;
                println!("{}: ok, {} samples", f.display(), v.len());
            }
        }
    }
    Ok(())
}
