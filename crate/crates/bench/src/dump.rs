//! Chain trace dumps for post-hoc estimator runs.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mcis::chain::{run_chain, ChainTrace};

use crate::config::ExperimentConfig;
use crate::error::{config_error, Result};
use crate::experiment::{chain_config, seeds};
use crate::setup::build_setup;

/// Header `k,x_1..x_d,y_1..y_d,log_rho_y,accepted,cpu_ns`.
pub fn header(dim: usize) -> Vec<String> {
    let mut h = vec!["k".to_string()];
    h.extend((1..=dim).map(|i| format!("x_{i}")));
    h.extend((1..=dim).map(|i| format!("y_{i}")));
    h.extend(["log_rho_y", "accepted", "cpu_ns"].map(String::from));
    h
}

pub fn write_trace(trace: &ChainTrace, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(trace.dim))?;
    let mut rec = Vec::with_capacity(2 * trace.dim + 4);
    for k in 0..trace.len() {
        rec.clear();
        rec.push((k + 1).to_string());
        rec.extend(trace.state(k).iter().map(f64::to_string));
        rec.extend(trace.proposal(k).iter().map(f64::to_string));
        rec.push(trace.log_rho_y[k].to_string());
        rec.push(u8::from(trace.accepted[k]).to_string());
        rec.push(trace.cpu_ns[k].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a dumped trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRow {
    pub k: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub log_rho_y: f64,
    pub accepted: bool,
    pub cpu_ns: u64,
}

pub fn read_trace(path: &Path) -> Result<Vec<DumpRow>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let width = r.headers()?.len();
    if width < 6 || (width - 4) % 2 != 0 {
        return Err(config_error(format!(
            "{} is not a trace dump",
            path.display()
        )));
    }
    let d = (width - 4) / 2;
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| config_error(format!("bad number '{s}' in {}", path.display())))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| parse(&rec[i]);
        rows.push(DumpRow {
            k: rec[0].parse().map_err(|_| config_error("bad step index"))?,
            x: (1..=d).map(num).collect::<Result<_>>()?,
            y: (d + 1..=2 * d).map(num).collect::<Result<_>>()?,
            log_rho_y: num(2 * d + 1)?,
            accepted: &rec[2 * d + 2] == "1",
            cpu_ns: rec[2 * d + 3]
                .parse()
                .map_err(|_| config_error("bad cpu_ns"))?,
        });
    }
    Ok(rows)
}

/// Writes `trace_<seed>.csv` for every configured seed.
pub fn dump_traces(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let setup = build_setup(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut paths = Vec::new();
    for seed in seeds(cfg) {
        let trace = run_chain(
            &setup.target,
            &setup.proposal,
            &chain_config(cfg, &setup, seed),
        )?;
        let path = cfg.output_dir.join(format!("trace_{seed}.csv"));
        write_trace(&trace, BufWriter::new(File::create(&path)?))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Counts data rows of a dump without parsing them.
pub fn count_rows(path: &Path) -> Result<usize> {
    Ok(BufReader::new(File::open(path)?)
        .lines()
        .count()
        .saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcis::chain::{AcceptMode, ChainConfig};
    use mcis::proposals::ProposalFamily;
    use mcis::targets::TargetDensity;

    #[test]
    fn round_trip_is_exact() {
        let target = TargetDensity::isotropic_gaussian(2, 1.0, 0.5).unwrap();
        let q = ProposalFamily::random_walk(2, 0.7).unwrap();
        let cfg = ChainConfig::new(50, 9, vec![1.0, 1.0], AcceptMode::MetropolisHastings);
        let trace = run_chain(&target, &q, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trace(&trace, File::create(&path).unwrap()).unwrap();
        let rows = read_trace(&path).unwrap();
        assert_eq!(rows.len(), 50);
        assert_eq!(count_rows(&path).unwrap(), 50);
        for (k, r) in rows.iter().enumerate() {
            assert_eq!(r.k, k + 1);
            assert_eq!(r.x, trace.state(k));
            assert_eq!(r.y, trace.proposal(k));
            assert_eq!(r.log_rho_y, trace.log_rho_y[k]);
            assert_eq!(r.accepted, trace.accepted[k]);
        }
        assert_eq!(
            header(2).join(","),
            "k,x_1,x_2,y_1,y_2,log_rho_y,accepted,cpu_ns"
        );
    }
}
