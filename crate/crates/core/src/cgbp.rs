//! Coarse-grained BP: run chain BP on several renormalization levels and
//! switch between them as the temperature drops.
//!
//! Level `i` sees the edge template of the `i`-th MERA level, so a window of
//! `l` coarse sites spans `l·3^i` bare sites. All observables are reported
//! per bare site. Coarse levels lose accuracy at high temperature (the
//! truncation discards most of the spectrum) and BP loses accuracy at low
//! temperature (the thermal potential gets longer-ranged); the switch from
//! level `i` to `i + 1` happens where the two curves come closest.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::temperature_sweep;
use crate::error::{Error, Result};
use crate::mera::{optimize_stack, MeraConfig, MeraStack, BLOCK_FACTOR};

/// Observable and BP error estimate of one level along the temperature grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSeries {
    pub level: usize,
    /// Descending.
    pub temperatures: Vec<f64>,
    pub values: Vec<f64>,
    pub bp_errors: Vec<f64>,
    pub converged: Vec<bool>,
}

impl LevelSeries {
    pub fn new(level: usize, temperatures: Vec<f64>, values: Vec<f64>, bp_errors: Vec<f64>) -> Result<Self> {
        let n = temperatures.len();
        if values.len() != n || bp_errors.len() != n {
            return Err(Error::Grid(format!(
                "series lengths differ: {n} temperatures, {} values, {} errors",
                values.len(),
                bp_errors.len()
            )));
        }
        if bp_errors.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::Contract("BP errors must be non-negative".into()));
        }
        check_grid(&temperatures)?;
        Ok(LevelSeries { level, temperatures, values, bp_errors, converged: vec![true; n] })
    }

    pub fn len(&self) -> usize {
        self.temperatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temperatures.is_empty()
    }
}

fn check_grid(t: &[f64]) -> Result<()> {
    if t.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(Error::Grid("temperatures must be positive and finite".into()));
    }
    if t.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Grid("temperature grid must be strictly descending".into()));
    }
    Ok(())
}

fn same_grid(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs())
}

/// Chosen switching point between two consecutive levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Switch {
    /// From `level` to `level + 1`.
    pub level: usize,
    pub temperature: f64,
    /// Grid index of `temperature`.
    pub index: usize,
    /// `|x̄_i − x̄_{i+1}|` there.
    pub gap: f64,
    /// The smallest gap is attained at several grid points.
    pub degenerate: bool,
}

/// Switch between `a` and its next level `b`, searched over all grid points.
pub fn switching_temperature(a: &LevelSeries, b: &LevelSeries) -> Result<Switch> {
    switching_temperature_below(a, b, f64::INFINITY)
}

/// Same as [`switching_temperature`] restricted to temperatures below `ceiling`.
///
/// Candidates are the local minima of the gap over points where both levels
/// converged. Of several, the one whose gap is closest to `a`'s BP error
/// wins. If the smallest gap occurs more than once the highest such
/// temperature is returned and flagged as degenerate.
pub fn switching_temperature_below(a: &LevelSeries, b: &LevelSeries, ceiling: f64) -> Result<Switch> {
    if !same_grid(&a.temperatures, &b.temperatures) {
        return Err(Error::Grid("levels were evaluated on different grids".into()));
    }
    if a.len() < 3 {
        return Err(Error::Grid(format!("switch search needs at least 3 grid points, got {}", a.len())));
    }
    let idx: Vec<usize> =
        (0..a.len()).filter(|&k| a.converged[k] && b.converged[k] && a.temperatures[k] < ceiling).collect();
    if idx.len() < 3 {
        return Err(Error::Grid(format!("only {} usable grid points for the switch search", idx.len())));
    }
    let gap: Vec<f64> = idx.iter().map(|&k| (a.values[k] - b.values[k]).abs()).collect();
    let gmin = gap.iter().copied().fold(f64::INFINITY, f64::min);
    let tie = |g: f64| g - gmin <= 1e-14 * gmin.abs().max(1e-300) + f64::EPSILON * gmin.abs();
    let at_min: Vec<usize> = (0..idx.len()).filter(|&p| tie(gap[p])).collect();
    let pick = |p: usize, degenerate: bool| Switch {
        level: a.level,
        temperature: a.temperatures[idx[p]],
        index: idx[p],
        gap: gap[p],
        degenerate,
    };
    if at_min.len() > 1 {
        return Ok(pick(at_min[0], true));
    }
    let n = gap.len();
    let minima: Vec<usize> = (0..n)
        .filter(|&p| (p == 0 || gap[p] <= gap[p - 1]) && (p + 1 == n || gap[p] <= gap[p + 1]))
        .collect();
    let score = |p: usize| (gap[p] - a.bp_errors[idx[p]]).abs();
    let best = minima.iter().copied().min_by(|&x, &y| score(x).total_cmp(&score(y))).unwrap();
    Ok(pick(best, false))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchedSeries {
    pub temperatures: Vec<f64>,
    /// `T_1 > T_2 > ...`
    pub switch_temps: Vec<f64>,
    pub values: Vec<f64>,
    pub total_error: Vec<f64>,
    pub active_level: Vec<usize>,
    /// `Σ_{j≤i} δx^BP_{j−1}(T_j)` for each level `i`.
    pub accumulated: Vec<f64>,
}

/// Piecewise combination of the levels with the accumulated error bound.
///
/// Level `i` is active for `T_{i+1} ≤ T < T_i` (with `T_0 = ∞`), and the
/// bound there is `Σ_{j≤i} δx^BP_{j−1}(T_j) + δx_i^BP(T)`.
pub fn stitch(series: &[LevelSeries], switches: &[f64]) -> Result<StitchedSeries> {
    let first = series.first().ok_or_else(|| Error::Size("nothing to stitch".into()))?;
    if switches.len() >= series.len() {
        return Err(Error::Size(format!("{} switches for {} levels", switches.len(), series.len())));
    }
    for s in series {
        if !same_grid(&s.temperatures, &first.temperatures) {
            return Err(Error::Grid(format!("level {} uses a different grid", s.level)));
        }
    }
    if switches.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Ordering(format!("switching temperatures {switches:?} are not strictly decreasing")));
    }
    let grid = &first.temperatures;
    let mut at = Vec::with_capacity(switches.len());
    for &t in switches {
        let k = grid
            .iter()
            .position(|&g| (g - t).abs() <= 1e-12 * t.abs())
            .ok_or_else(|| Error::Grid(format!("switch {t} is not a grid temperature")))?;
        at.push(k);
    }
    let mut accumulated = vec![0.0];
    for (j, &k) in at.iter().enumerate() {
        let prev = *accumulated.last().unwrap();
        accumulated.push(prev + series[j].bp_errors[k]);
    }
    let mut values = Vec::with_capacity(grid.len());
    let mut total_error = Vec::with_capacity(grid.len());
    let mut active_level = Vec::with_capacity(grid.len());
    for (k, &t) in grid.iter().enumerate() {
        let i = switches.iter().take_while(|&&s| t < s).count();
        values.push(series[i].values[k]);
        total_error.push(accumulated[i] + series[i].bp_errors[k]);
        active_level.push(i);
    }
    Ok(StitchedSeries {
        temperatures: grid.clone(),
        switch_temps: switches.to_vec(),
        values,
        total_error,
        active_level,
        accumulated,
    })
}

/// `n` geometrically spaced temperatures from `hi` down to `lo`.
pub fn geometric_grid(hi: f64, lo: f64, n: usize) -> Result<Vec<f64>> {
    if !(hi > lo && lo > 0.0) || n < 2 {
        return Err(Error::Grid(format!("need hi > lo > 0 and n ≥ 2, got {hi}, {lo}, {n}")));
    }
    let r = (lo / hi).ln() / (n - 1) as f64;
    let mut g: Vec<f64> = (0..n).map(|k| hi * (r * k as f64).exp()).collect();
    g[n - 1] = lo;
    Ok(g)
}

/// Geometric grid with `coarse` points per decade, refined to `fine` points
/// per decade inside `[band.0, band.1]`.
pub fn refined_grid(hi: f64, lo: f64, coarse: usize, band: (f64, f64), fine: usize) -> Result<Vec<f64>> {
    let per = |a: f64, b: f64, ppd: usize| ((a / b).log10() * ppd as f64).ceil().max(1.0) as usize + 1;
    let (blo, bhi) = (band.0.max(lo), band.1.min(hi));
    let mut pts = Vec::new();
    if blo >= bhi {
        return geometric_grid(hi, lo, per(hi, lo, coarse));
    }
    if hi > bhi {
        pts.extend(geometric_grid(hi, bhi, per(hi, bhi, coarse))?);
    }
    pts.extend(geometric_grid(bhi, blo, per(bhi, blo, fine))?);
    if blo > lo {
        pts.extend(geometric_grid(blo, lo, per(blo, lo, coarse))?);
    }
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    Ok(pts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgbpConfig {
    /// Highest coarse level; 0 is plain BP.
    pub levels: usize,
    pub chi: usize,
    pub l: usize,
    /// Descending.
    pub temperatures: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub mera_sweeps: usize,
    /// Random restart of the disentanglers from this seed.
    pub mera_restart: Option<u64>,
}

impl CgbpConfig {
    pub fn new(levels: usize, chi: usize, l: usize, temperatures: Vec<f64>) -> Self {
        CgbpConfig { levels, chi, l, temperatures, tol: 1e-10, max_iter: 1000, mera_sweeps: 200, mera_restart: None }
    }

    pub fn validate(&self) -> Result<()> {
        check_grid(&self.temperatures)?;
        let t = &self.temperatures;
        if t.len() < 10 || t[0] / t[t.len() - 1] < 10.0 * (1.0 - 1e-12) {
            return Err(Error::Grid("grid needs at least 10 points spanning a decade".into()));
        }
        if self.chi == 0 {
            return Err(Error::Dimension("χ must be positive".into()));
        }
        if self.l < 2 {
            return Err(Error::Size(format!("window size {} < 2", self.l)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgbpResult {
    pub stitched: StitchedSeries,
    pub levels: Vec<LevelSeries>,
    pub switches: Vec<Switch>,
    /// `(level, temperature)` points where BP did not converge.
    pub unconverged: Vec<(usize, f64)>,
    pub stack: MeraStack,
}

/// BP energy per bare site on one level's edge template.
pub fn level_series(level: usize, h: &DMatrix<f64>, d: usize, config: &CgbpConfig) -> Result<LevelSeries> {
    let runs = temperature_sweep(h, d, config.l, &config.temperatures, config.tol, config.max_iter)?;
    let scale = BLOCK_FACTOR.pow(level as u32) as f64;
    Ok(LevelSeries {
        level,
        temperatures: config.temperatures.clone(),
        values: runs.iter().map(|r| r.energy() / scale).collect(),
        bp_errors: runs.iter().map(|r| r.error_estimate / scale).collect(),
        converged: runs.iter().map(|r| r.converged).collect(),
    })
}

/// Full pipeline on the edge template `h0`: optimize the layers, run BP on
/// every level, locate the switches top-down in temperature and stitch.
pub fn run_cgbp(h0: &DMatrix<f64>, config: &CgbpConfig) -> Result<CgbpResult> {
    config.validate()?;
    let mera = MeraConfig {
        restart_seed: config.mera_restart,
        ..MeraConfig::new(config.chi, config.levels).with_sweeps(config.mera_sweeps)
    };
    let stack = optimize_stack(h0, &mera)?;
    run_cgbp_with_stack(stack, config)
}

/// Same as [`run_cgbp`] with layers optimized earlier (for example loaded from JSON).
///
/// Levels above `config.levels` are ignored.
pub fn run_cgbp_with_stack(mut stack: MeraStack, config: &CgbpConfig) -> Result<CgbpResult> {
    config.validate()?;
    if stack.levels.len() <= config.levels {
        return Err(Error::Size(format!(
            "stack has {} coarse levels, config asks for {}",
            stack.levels.len() - 1,
            config.levels
        )));
    }
    stack.levels.truncate(config.levels + 1);
    let levels: Vec<LevelSeries> = stack
        .levels
        .par_iter()
        .map(|lvl| level_series(lvl.level, &lvl.hamiltonian, lvl.dim, config))
        .collect::<Result<_>>()?;
    let mut switches: Vec<Switch> = Vec::new();
    let mut ceiling = f64::INFINITY;
    for i in 0..levels.len().saturating_sub(1) {
        match switching_temperature_below(&levels[i], &levels[i + 1], ceiling) {
            Ok(s) => {
                ceiling = s.temperature;
                switches.push(s);
            }
            // Too few points left below the previous switch: deeper levels stay unused.
            Err(Error::Grid(_)) => break,
            Err(e) => return Err(e),
        }
    }
    let temps: Vec<f64> = switches.iter().map(|s| s.temperature).collect();
    let stitched = stitch(&levels, &temps)?;
    let unconverged = levels
        .iter()
        .flat_map(|s| s.converged.iter().enumerate().filter(|(_, c)| !**c).map(move |(k, _)| (s.level, s.temperatures[k])))
        .collect();
    Ok(CgbpResult { stitched, levels, switches, unconverged, stack })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{run_infinite, BpConfig};
    use crate::models::tfim_template;

    fn series(level: usize, values: Vec<f64>, errs: Vec<f64>) -> LevelSeries {
        let t = geometric_grid(10.0, 0.1, values.len()).unwrap();
        LevelSeries::new(level, t, values, errs).unwrap()
    }

    #[test]
    fn identical_series_are_degenerate() {
        let a = series(0, vec![1.0, 0.5, 0.2, 0.1, 0.0], vec![0.1; 5]);
        let s = switching_temperature(&a, &a).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.index, 0);
        assert_eq!(s.temperature, 10.0);
    }

    #[test]
    fn tie_break_follows_bp_error() {
        // The gap touches zero twice; only the second crossing agrees with
        // the error attributed to BP at that temperature.
        let x0 = vec![0.0; 9];
        let x1 = vec![0.5, 0.2, 0.001, 0.2, 0.4, 0.2, 0.03, 0.2, 0.5];
        let errs = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.03, 0.0, 0.0];
        let a = series(0, x0, errs);
        let b = series(1, x1, vec![0.0; 9]);
        let s = switching_temperature(&a, &b).unwrap();
        assert_eq!(s.index, 6);
        assert!(!s.degenerate);
        // Without the injected error the deeper minimum wins.
        let a2 = LevelSeries { bp_errors: vec![0.0; 9], ..a };
        assert_eq!(switching_temperature(&a2, &b).unwrap().index, 2);
    }

    #[test]
    fn grid_errors() {
        let a = series(0, vec![1.0, 0.5, 0.2, 0.1], vec![0.0; 4]);
        let t = geometric_grid(5.0, 0.1, 4).unwrap();
        let b = LevelSeries::new(1, t, vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert!(matches!(switching_temperature(&a, &b), Err(Error::Grid(_))));
        let short = series(0, vec![1.0, 0.5], vec![0.0; 2]);
        assert!(matches!(switching_temperature(&short, &short), Err(Error::Grid(_))));
        assert!(LevelSeries::new(0, vec![1.0, 2.0], vec![0.0; 2], vec![0.0; 2]).is_err());
    }

    #[test]
    fn stitch_bands_and_accumulation() {
        let n = 12;
        let s0 = series(0, (0..n).map(|k| k as f64).collect(), (0..n).map(|k| 0.01 * k as f64).collect());
        let s1 = series(1, vec![100.0; n], vec![0.5; n]);
        let s2 = series(2, vec![200.0; n], vec![0.25; n]);
        let t = s0.temperatures.clone();
        let st = stitch(&[s0.clone(), s1, s2], &[t[3], t[8]]).unwrap();
        assert_eq!(st.active_level, vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2]);
        assert_eq!(st.values[2], 2.0);
        assert_eq!(st.values[5], 100.0);
        assert!((st.total_error[1] - 0.01).abs() < 1e-15);
        assert!((st.total_error[5] - (0.03 + 0.5)).abs() < 1e-15);
        assert!((st.total_error[10] - (0.03 + 0.5 + 0.25)).abs() < 1e-15);
        assert!(st.accumulated.windows(2).all(|w| w[1] >= w[0]));
        assert!(matches!(stitch(&[s0.clone(), s0.clone(), s0.clone()], &[t[8], t[3]]), Err(Error::Ordering(_))));
        let alone = stitch(&[s0.clone()], &[]).unwrap();
        assert_eq!(alone.values, s0.values);
        assert_eq!(alone.total_error, s0.bp_errors);
    }

    #[test]
    fn grids() {
        let g = geometric_grid(10.0, 0.1, 21).unwrap();
        assert_eq!(g.len(), 21);
        assert!((g[10] - 1.0).abs() < 1e-12);
        let r = refined_grid(10.0, 0.05, 20, (0.1, 1.0), 60).unwrap();
        assert!(r.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(r[0], 10.0);
        assert_eq!(*r.last().unwrap(), 0.05);
        let inside = r.iter().filter(|&&t| (0.1..=1.0).contains(&t)).count();
        assert!(inside >= 60, "{inside}");
    }

    #[test]
    fn zero_levels_is_plain_bp() {
        let h = tfim_template(1.0);
        let temps = geometric_grid(10.0, 0.5, 10).unwrap();
        let cfg = CgbpConfig::new(0, 2, 4, temps.clone());
        let out = run_cgbp(&h, &cfg).unwrap();
        assert!(out.switches.is_empty());
        let mut warm = None;
        for (k, &t) in temps.iter().enumerate() {
            let c = BpConfig::new(4, 1.0 / t).unwrap().with_tol(cfg.tol).with_max_iter(cfg.max_iter);
            let r = run_infinite(&h, 2, &c, warm.as_ref()).unwrap();
            assert_eq!(out.stitched.values[k], r.energy());
            assert_eq!(out.stitched.total_error[k], r.error_estimate);
            warm = Some(r.warm_start());
        }
    }

    #[test]
    fn run_is_deterministic() {
        let h = tfim_template(1.0);
        let temps = geometric_grid(5.0, 0.2, 10).unwrap();
        let cfg = CgbpConfig { mera_sweeps: 10, ..CgbpConfig::new(1, 2, 3, temps) };
        let a = run_cgbp(&h, &cfg).unwrap();
        let b = run_cgbp(&h, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.levels.len(), 2);
        assert!(a.stitched.active_level.iter().all(|&i| i <= 1));
    }
}
