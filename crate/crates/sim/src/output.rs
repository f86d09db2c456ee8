//! CSV output. Floats use the shortest representation that round-trips, so
//! identical runs give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use fedgp_core::baselines::KlReport;
use fedgp_core::Result;

use crate::simulate::EventTrace;

pub const TRACE_HEADER: &str = "iter,substep,f,grad_norm,delta,sigma2,beta,gamma_avg,virtual_time_s";
pub const KL_HEADER: &str = "seed,J,N,m,kl_lowrank,kl_indep,m_over_N";

pub fn trace_csv(trace: &EventTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in &trace.rows {
        let t = r.theta.0;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.step,
            r.f,
            r.grad_norm,
            t[0],
            t[1],
            t[2],
            r.gamma_avg(),
            r.virtual_time
        )
        .expect("writing to a string");
    }
    out
}

/// One KL comparison row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlRow {
    pub seed: u64,
    pub j: usize,
    pub n: usize,
    pub m: usize,
    pub report: KlReport,
}

pub fn kl_csv(rows: &[KlRow]) -> String {
    let mut out = String::from(KL_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.seed, r.j, r.n, r.m, r.report.kl_lowrank, r.report.kl_indep, r.report.m_over_n
        )
        .expect("writing to a string");
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
