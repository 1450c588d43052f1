use std::path::PathBuf;

use cgbp_core::cgbp::{run_cgbp, CgbpConfig};
use cgbp_core::chain::temperature_sweep;
use cgbp_core::models::tfim_template;
use cgbp_core::oracle::jw_energy_density;
use cgbp_core::tree::{quench_average, InstanceRecord};
use serde::Serialize;

use crate::config::{self, CgbpFileConfig, ChainBpConfig, SpinGlassConfig, Unconverged};
use crate::output::{num, OutDir, Provenance, Table};
use crate::CliError;

pub const CHAIN_SCHEMA: &str = "chain-bp/1";
pub const SPIN_GLASS_SCHEMA: &str = "spin-glass/1";
pub const LEVEL_SCHEMA: &str = "cgbp-level/1";
pub const STITCHED_SCHEMA: &str = "cgbp-stitched/1";

pub struct Options {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub verbose: bool,
}

impl Options {
    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("cgbp: {}", msg.as_ref());
        }
    }
}

fn unconverged_outcome(policy: Unconverged, missed: &[String]) -> Result<(), CliError> {
    if missed.is_empty() || policy == Unconverged::Flag {
        return Ok(());
    }
    Err(CliError::Numerical(format!("BP did not converge at {}", missed.join(", "))))
}

pub fn chain_bp(text: &str, opts: &Options) -> Result<(), CliError> {
    let cfg: ChainBpConfig = config::parse(text)?;
    config::check_field(cfg.model.b)?;
    let temps = cfg.temperatures.resolve()?;
    let seed = opts.seed.or(cfg.seed).unwrap_or(0);
    let prov = Provenance::new(text, seed);
    let out = OutDir::create(&opts.out)?;

    opts.note(format!("chain BP: B = {}, l = {}, {} temperatures", cfg.model.b, cfg.bp.l, temps.len()));
    let h = tfim_template(cfg.model.b);
    let runs = temperature_sweep(&h, 2, cfg.bp.l, &temps, cfg.bp.tol, cfg.bp.max_iter)?;

    let mut table = Table::new(
        CHAIN_SCHEMA,
        &["T", "energy", "sz", "sx", "bp_error_estimate", "jw_exact", "true_error", "converged", "iterations"],
    );
    let mut missed = Vec::new();
    for (&t, r) in temps.iter().zip(&runs) {
        let exact = jw_energy_density(cfg.model.b, t);
        let e = r.energy();
        opts.note(format!("T = {t}: energy {e}, estimate {}", r.error_estimate));
        if !r.converged {
            missed.push(format!("T = {t}"));
        }
        table.push(vec![
            num(t),
            num(e),
            num(r.observables["sz"]),
            num(r.observables["sx"]),
            num(r.error_estimate),
            num(exact),
            num((e - exact).abs()),
            r.converged.to_string(),
            r.iterations.to_string(),
        ]);
    }
    out.write("chain_bp.csv", &table.render(&prov))?;
    unconverged_outcome(cfg.on_unconverged, &missed)
}

#[derive(Serialize)]
struct AuditLine<'a> {
    b: f64,
    t: f64,
    #[serde(flatten)]
    record: &'a InstanceRecord,
}

pub fn spin_glass(text: &str, opts: &Options) -> Result<(), CliError> {
    let cfg: SpinGlassConfig = config::parse(text)?;
    cfg.validate()?;
    let seed = opts.seed.or(cfg.seed).unwrap_or(0);
    let prov = Provenance::new(text, seed);
    let out = OutDir::create(&opts.out)?;

    let mut table = Table::new(SPIN_GLASS_SCHEMA, &["B", "T", "q_ea", "stderr", "bp_error", "instances"]);
    let mut audit = String::new();
    // Every grid point sees the same disorder realizations.
    for &b in &cfg.grid.b {
        for &t in &cfg.grid.t {
            let q = quench_average(b, t, cfg.tree.depth, cfg.tree.instances, seed)?;
            opts.note(format!("B = {b}, T = {t}: q_EA {} ± {}", q.q_ea, q.stderr));
            table.push(vec![num(b), num(t), num(q.q_ea), num(q.stderr), num(q.bp_error), cfg.tree.instances.to_string()]);
            for r in &q.records {
                let line = serde_json::to_string(&AuditLine { b, t, record: r })
                    .map_err(|e| CliError::Io(format!("audit record: {e}")))?;
                audit.push_str(&line);
                audit.push('\n');
            }
        }
    }
    out.write("spin_glass.csv", &table.render(&prov))?;
    out.write("instances.jsonl", &audit)?;
    Ok(())
}

#[derive(Serialize)]
struct SwitchEntry {
    /// `T_1`, `T_2`, ... as used for axis labels.
    label: String,
    from_level: usize,
    temperature: f64,
    gap: f64,
    degenerate: bool,
}

#[derive(Serialize)]
struct SwitchesFile {
    schema: &'static str,
    version: &'static str,
    config_sha256: String,
    seed: u64,
    mera_ground_energy: f64,
    switches: Vec<SwitchEntry>,
    accumulated_error: Vec<f64>,
}

pub fn cgbp(text: &str, opts: &Options) -> Result<(), CliError> {
    let cfg: CgbpFileConfig = config::parse(text)?;
    config::check_field(cfg.model.b)?;
    let temps = cfg.temperatures.resolve()?;
    let seed = opts.seed.or(cfg.seed).unwrap_or(0);
    let prov = Provenance::new(text, seed);
    let c = &cfg.cgbp;
    let core_cfg = CgbpConfig {
        tol: c.tol,
        max_iter: c.max_iter,
        mera_sweeps: c.mera_sweeps,
        mera_restart: c.mera_restart.then_some(seed),
        ..CgbpConfig::new(c.levels, c.chi, c.l, temps.clone())
    };
    core_cfg.validate()?;
    let out = OutDir::create(&opts.out)?;

    opts.note(format!("CGBP: B = {}, χ = {}, l = {}, {} levels", cfg.model.b, c.chi, c.l, c.levels));
    let res = run_cgbp(&tfim_template(cfg.model.b), &core_cfg)?;
    opts.note(format!("variational ground energy {}", res.stack.ground_energy()));

    let b = cfg.model.b;
    let exact: Vec<f64> = temps.iter().map(|&t| jw_energy_density(b, t)).collect();
    for s in &res.levels {
        let mut table = Table::new(LEVEL_SCHEMA, &["T", "energy", "bp_error", "converged", "jw_exact", "true_error"]);
        for k in 0..s.len() {
            table.push(vec![
                num(s.temperatures[k]),
                num(s.values[k]),
                num(s.bp_errors[k]),
                s.converged[k].to_string(),
                num(exact[k]),
                num((s.values[k] - exact[k]).abs()),
            ]);
        }
        out.write(&format!("level_{}.csv", s.level), &table.render(&prov))?;
    }

    let st = &res.stitched;
    let mut table = Table::new(STITCHED_SCHEMA, &["T", "level", "energy", "total_error", "jw_exact", "true_error"]);
    for k in 0..st.temperatures.len() {
        table.push(vec![
            num(st.temperatures[k]),
            st.active_level[k].to_string(),
            num(st.values[k]),
            num(st.total_error[k]),
            num(exact[k]),
            num((st.values[k] - exact[k]).abs()),
        ]);
    }
    out.write("stitched.csv", &table.render(&prov))?;

    let switches = SwitchesFile {
        schema: "cgbp-switches/1",
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: prov.config_sha256.clone(),
        seed,
        mera_ground_energy: res.stack.ground_energy(),
        switches: res
            .switches
            .iter()
            .enumerate()
            .map(|(i, s)| SwitchEntry {
                label: format!("T_{}", i + 1),
                from_level: s.level,
                temperature: s.temperature,
                gap: s.gap,
                degenerate: s.degenerate,
            })
            .collect(),
        accumulated_error: st.accumulated.clone(),
    };
    for s in &switches.switches {
        opts.note(format!("{} = {} (gap {})", s.label, s.temperature, s.gap));
    }
    let json = serde_json::to_string_pretty(&switches).map_err(|e| CliError::Io(format!("switches: {e}")))?;
    out.write("switches.json", &(json + "\n"))?;
    out.write("mera_layers.json", &res.stack.to_json()?)?;

    let missed: Vec<String> = res.unconverged.iter().map(|(lvl, t)| format!("level {lvl} T = {t}")).collect();
    unconverged_outcome(cfg.on_unconverged, &missed)
}
