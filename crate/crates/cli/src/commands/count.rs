use anyhow::Result;
use clap::Args;
use kdgan::models::GeneratorSpec;

use crate::config::ConfigFlags;

#[derive(Args, Debug)]
pub struct CountArgs {
    /// Image side for the FLOP column of the full-scale rows.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[command(flatten)]
    pub cfg: ConfigFlags,
}

pub struct Row {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

pub fn rows(args: &CountArgs) -> Result<Vec<Row>> {
    let cfg = args.cfg.resolve()?;
    let side = cfg.dataset.image_size;
    let mut rows = Vec::new();
    for (name, width) in [("teacher", 64), ("half student", 32), ("quarter student", 16)] {
        let spec = GeneratorSpec::full_scale(width);
        rows.push(Row {
            name: format!("{name}, width {width}, {}x{}", args.size, args.size),
            params: spec.param_count(),
            flops: spec.flops(args.size, args.size)?,
        });
    }
    for (name, spec) in [("desk teacher", &cfg.teacher), ("desk student", &cfg.student)] {
        spec.validate()?;
        rows.push(Row {
            name: format!("{name}, width {}, {side}x{side}", spec.base_width),
            params: spec.param_count(),
            flops: spec.flops(side, side)?,
        });
    }
    Ok(rows)
}

pub fn render(rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = format!("{:width$}  {:>10}  {:>10}  {:>8}\n", "generator", "params", "FLOPs", "speed-up");
    let mut reference = None;
    for r in rows {
        if r.name.contains("teacher") {
            reference = Some(r.flops);
        }
        let speedup = reference.map(|t| t as f64 / r.flops as f64).unwrap_or(1.0);
        out.push_str(&format!(
            "{:width$}  {:>9.2}M  {:>9.2}G  {:>7.2}x\n",
            r.name,
            r.params as f64 / 1e6,
            r.flops as f64 / 1e9,
            speedup
        ));
    }
    out
}

pub fn run(args: &CountArgs) -> Result<()> {
    print!("{}", render(&rows(args)?));
    Ok(())
}
