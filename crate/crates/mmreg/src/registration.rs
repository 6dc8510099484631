//! Full registration cost, regularizers, and the optimizers: multi-resolution
//! gradient descent over control-point displacements, a rigid (1+1)
//! evolution-strategy pre-alignment, and a hyperparameter grid search.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mind::MindParams;
use crate::similarity::{
    combine_scale, lncc_dissimilarity, lncc_gradient, CombineParams, MindSimilarity, NmiContext,
    ScaleStrategy, DEFAULT_BINS, DEFAULT_LNCC_RADIUS,
};
use crate::transform::{compose, inverse_consistency_step, warp, ControlGrid, DenseField};
use crate::util::norm3;
use crate::volume::{gaussian_pyramid, Interp, Volume};
use crate::DEFAULT_SEED;

/// Armijo sufficient-decrease constant.
const ARMIJO_C: f64 = 1e-4;
/// Line-search halvings before an iteration gives up.
const MAX_HALVINGS: usize = 30;
/// TV smoothing epsilon in voxels.
pub const TV_EPSILON: f64 = 0.01;
/// Round-trip norm below which the symmetric pair counts as consistent.
const CONSISTENCY_TOL: f64 = 0.1;
/// Cap on end-of-level consistency averaging rounds.
const MAX_CONSISTENCY_ROUNDS: usize = 8;

/// Which dissimilarity drives the registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Nmi,
    Mind,
    /// Weighted sum of NMI and the descriptor measure.
    NmiMind,
    Lncc,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Measure::Nmi => "nmi",
            Measure::Mind => "mind",
            Measure::NmiMind => "nmi+mind",
            Measure::Lncc => "lncc",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    Tv,
    L2,
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regularizer::Tv => "tv",
            Regularizer::L2 => "l2",
        })
    }
}

/// Everything a deformable run needs besides the two volumes.
#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    pub measure: Measure,
    /// NMI weight of the combined measure.
    pub beta: f64,
    pub scale_strategy: ScaleStrategy,
    /// Descriptor scale when `scale_strategy` is `Fixed`.
    pub fixed_s: f64,
    /// Regularization weight λ ≥ 0. The regularizers are unnormalized sums
    /// over ~10³ node stencils while the measures are of order one, so
    /// useful weights are small.
    pub lambda: f64,
    pub regularizer: Regularizer,
    /// Control-point spacing in voxels at the finest level. Coarser levels
    /// keep the mesh fixed in physical space (spacing halves per level,
    /// floored at 2).
    pub spacing_vox: usize,
    /// Pyramid depth; 1 = single resolution.
    pub levels: usize,
    pub max_iters_per_level: usize,
    /// Relative cost change below which a level stops.
    pub step_tol: f64,
    /// Alternate forward/backward runs with inverse-consistency averaging.
    pub symmetric: bool,
    /// Averaging period in accepted iterations (0 disables even if
    /// `symmetric` is set).
    pub symmetric_every: usize,
    pub lncc_radius: usize,
    pub bins: usize,
    pub mind: MindParams,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            measure: Measure::NmiMind,
            beta: 0.8,
            scale_strategy: ScaleStrategy::InitialGradient,
            fixed_s: 1.0,
            lambda: 1e-5,
            regularizer: Regularizer::Tv,
            spacing_vox: 8,
            levels: 3,
            max_iters_per_level: 100,
            step_tol: 1e-5,
            symmetric: false,
            symmetric_every: 10,
            lncc_radius: DEFAULT_LNCC_RADIUS,
            bins: DEFAULT_BINS,
            mind: MindParams::default(),
            seed: DEFAULT_SEED,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.levels < 1 {
            return Err(Error::invalid("levels must be >= 1"));
        }
        if self.spacing_vox < 2 {
            return Err(Error::invalid("control-point spacing must be >= 2 voxels"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0,1], got {}", self.beta)));
        }
        if self.max_iters_per_level == 0 {
            return Err(Error::invalid("max_iters_per_level must be >= 1"));
        }
        Ok(())
    }
}

/// Cost trace of one pyramid level, coarsest first in the result.
#[derive(Debug, Clone)]
pub struct LevelTrace {
    /// Pyramid index, 0 = finest.
    pub level: usize,
    pub dims: [usize; 3],
    /// Resolved descriptor scale (combined measure only).
    pub s: Option<f64>,
    /// Cost after initialization and after each accepted step.
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub grid: ControlGrid,
    pub backward_grid: Option<ControlGrid>,
    /// Dense forward displacement at full resolution.
    pub field: DenseField,
    pub traces: Vec<LevelTrace>,
    pub wall_seconds: f64,
    pub config: RegistrationConfig,
}

impl RegistrationResult {
    /// Line-oriented key=value report.
    pub fn report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("measure={}\n", self.config.measure));
        out.push_str(&format!("regularizer={}\n", self.config.regularizer));
        out.push_str(&format!("lambda={}\n", self.config.lambda));
        out.push_str(&format!("beta={}\n", self.config.beta));
        out.push_str(&format!("spacing_vox={}\n", self.config.spacing_vox));
        out.push_str(&format!("levels={}\n", self.config.levels));
        out.push_str(&format!("symmetric={}\n", self.config.symmetric));
        out.push_str(&format!("seed={:#x}\n", self.config.seed));
        out.push_str(&format!("wall_seconds={:.3}\n", self.wall_seconds));
        for t in &self.traces {
            out.push_str(&format!(
                "level={} dims={}x{}x{} s={} cost_start={:.6} cost_end={:.6} steps={}\n",
                t.level,
                t.dims[0],
                t.dims[1],
                t.dims[2],
                t.s.map_or_else(|| "-".to_string(), |s| format!("{s:.6}")),
                t.costs.first().copied().unwrap_or(f64::NAN),
                t.costs.last().copied().unwrap_or(f64::NAN),
                t.costs.len().saturating_sub(1),
            ));
        }
        out.push_str(&format!(
            "max_displacement_vox={:.4}\n",
            self.field.max_norm()
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Regularizers
// ---------------------------------------------------------------------------

fn forward_neighbors(g_dims: [usize; 3], node: usize) -> [Option<usize>; 3] {
    let gx = node % g_dims[0];
    let gy = (node / g_dims[0]) % g_dims[1];
    let gz = node / (g_dims[0] * g_dims[1]);
    [
        (gx + 1 < g_dims[0]).then(|| node + 1),
        (gy + 1 < g_dims[1]).then(|| node + g_dims[0]),
        (gz + 1 < g_dims[2]).then(|| node + g_dims[0] * g_dims[1]),
    ]
}

/// Smoothed isotropic total variation of the node displacements: per node,
/// sqrt of the summed squared forward differences (all axes, all
/// components) plus ε², minus ε. Translation-invariant; gradient analytic.
pub fn regularizer_tv(grid: &ControlGrid) -> (f64, Vec<[f64; 3]>) {
    let g_dims = grid.grid_dims;
    let n = grid.disp.len();
    let eps2 = TV_EPSILON * TV_EPSILON;
    // Stencil magnitudes, then scatter-free gradient accumulation: each
    // node's gradient gathers from its own stencil and the up-to-three
    // stencils that reference it from below.
    let stencil: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|node| {
            let mut q = 0f64;
            for nb in forward_neighbors(g_dims, node).into_iter().flatten() {
                for c in 0..3 {
                    let d = grid.disp[nb][c] - grid.disp[node][c];
                    q += d * d;
                }
            }
            (q + eps2).sqrt()
        })
        .collect();
    let value: f64 = stencil.iter().map(|t| t - TV_EPSILON).sum();
    let grad: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|node| {
            let gx = node % g_dims[0];
            let gy = (node / g_dims[0]) % g_dims[1];
            let gz = node / (g_dims[0] * g_dims[1]);
            let mut g = [0f64; 3];
            // Own stencil: d/d(this) of (nb - this)^2 terms.
            let t = stencil[node];
            for nb in forward_neighbors(g_dims, node).into_iter().flatten() {
                for c in 0..3 {
                    g[c] -= (grid.disp[nb][c] - grid.disp[node][c]) / t;
                }
            }
            // Stencils of the lower neighbors that difference toward us.
            let lowers = [
                (gx > 0).then(|| node - 1),
                (gy > 0).then(|| node - g_dims[0]),
                (gz > 0).then(|| node - g_dims[0] * g_dims[1]),
            ];
            for lo in lowers.into_iter().flatten() {
                let t = stencil[lo];
                for c in 0..3 {
                    g[c] += (grid.disp[node][c] - grid.disp[lo][c]) / t;
                }
            }
            g
        })
        .collect();
    (value, grad)
}

/// Squared L2 norm of the forward differences of the node displacements;
/// penalizes variation, not magnitude.
pub fn regularizer_l2(grid: &ControlGrid) -> (f64, Vec<[f64; 3]>) {
    let g_dims = grid.grid_dims;
    let n = grid.disp.len();
    let value: f64 = (0..n)
        .map(|node| {
            let mut q = 0f64;
            for nb in forward_neighbors(g_dims, node).into_iter().flatten() {
                for c in 0..3 {
                    let d = grid.disp[nb][c] - grid.disp[node][c];
                    q += d * d;
                }
            }
            q
        })
        .sum();
    let grad: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|node| {
            let gx = node % g_dims[0];
            let gy = (node / g_dims[0]) % g_dims[1];
            let gz = node / (g_dims[0] * g_dims[1]);
            let mut g = [0f64; 3];
            for nb in forward_neighbors(g_dims, node).into_iter().flatten() {
                for c in 0..3 {
                    g[c] -= 2.0 * (grid.disp[nb][c] - grid.disp[node][c]);
                }
            }
            let lowers = [
                (gx > 0).then(|| node - 1),
                (gy > 0).then(|| node - g_dims[0]),
                (gz > 0).then(|| node - g_dims[0] * g_dims[1]),
            ];
            for lo in lowers.into_iter().flatten() {
                for c in 0..3 {
                    g[c] += 2.0 * (grid.disp[node][c] - grid.disp[lo][c]);
                }
            }
            g
        })
        .collect();
    (value, grad)
}

fn regularize(reg: Regularizer, grid: &ControlGrid) -> (f64, Vec<[f64; 3]>) {
    match reg {
        Regularizer::Tv => regularizer_tv(grid),
        Regularizer::L2 => regularizer_l2(grid),
    }
}

// ---------------------------------------------------------------------------
// Cost engine
// ---------------------------------------------------------------------------

/// Measure machinery frozen for one pyramid level: NMI ranges and the fixed
/// image's descriptors are resolved once so the objective is stable across
/// iterations.
struct CostEngine<'a> {
    fixed: &'a Volume,
    moving: &'a Volume,
    measure: Measure,
    beta: f64,
    /// Resolved descriptor scale; 1 unless the measure is combined.
    s: f64,
    lambda: f64,
    regularizer: Regularizer,
    lncc_radius: usize,
    nmi: Option<NmiContext>,
    mind: Option<MindSimilarity>,
}

impl<'a> CostEngine<'a> {
    fn new(
        fixed: &'a Volume,
        moving: &'a Volume,
        config: &RegistrationConfig,
        init_field: &DenseField,
        s: f64,
    ) -> Result<Self> {
        let needs_nmi = matches!(config.measure, Measure::Nmi | Measure::NmiMind);
        let needs_mind = matches!(config.measure, Measure::Mind | Measure::NmiMind);
        let nmi = if needs_nmi {
            let warped = warp(moving, init_field, Interp::Trilinear)?;
            Some(NmiContext::new(fixed, &warped, config.bins))
        } else {
            None
        };
        let mind = if needs_mind {
            Some(MindSimilarity::new(fixed, config.mind.clone())?)
        } else {
            None
        };
        Ok(CostEngine {
            fixed,
            moving,
            measure: config.measure,
            beta: config.beta,
            s,
            lambda: config.lambda,
            regularizer: config.regularizer,
            lncc_radius: config.lncc_radius,
            nmi,
            mind,
        })
    }

    fn measure_value(&self, field: &DenseField) -> Result<f64> {
        match self.measure {
            Measure::Nmi => {
                let warped = warp(self.moving, field, Interp::Trilinear)?;
                self.nmi.as_ref().unwrap().value_of_warped(self.fixed, &warped.data)
            }
            Measure::Mind => self.mind.as_ref().unwrap().value(self.moving, field),
            Measure::Lncc => {
                let warped = warp(self.moving, field, Interp::Trilinear)?;
                lncc_dissimilarity(self.fixed, &warped, self.lncc_radius)
            }
            Measure::NmiMind => {
                let warped = warp(self.moving, field, Interp::Trilinear)?;
                let e_nmi = self
                    .nmi
                    .as_ref()
                    .unwrap()
                    .value_of_warped(self.fixed, &warped.data)?;
                let e_mind = self.mind.as_ref().unwrap().value(self.moving, field)?;
                Ok(self.beta * e_nmi + (1.0 - self.beta) * self.s * e_mind)
            }
        }
    }

    fn measure_gradient(&self, field: &DenseField) -> Result<DenseField> {
        match self.measure {
            Measure::Nmi => self
                .nmi
                .as_ref()
                .unwrap()
                .gradient(self.fixed, self.moving, field),
            Measure::Mind => self.mind.as_ref().unwrap().gradient(self.moving, field),
            Measure::Lncc => lncc_gradient(self.fixed, self.moving, field, self.lncc_radius),
            Measure::NmiMind => {
                let g_nmi = self
                    .nmi
                    .as_ref()
                    .unwrap()
                    .gradient(self.fixed, self.moving, field)?;
                let g_mind = self.mind.as_ref().unwrap().gradient(self.moving, field)?;
                let mut out = g_nmi;
                let w = (1.0 - self.beta) * self.s;
                out.data
                    .par_iter_mut()
                    .zip(g_mind.data.par_iter())
                    .for_each(|(a, b)| {
                        a[0] = self.beta * a[0] + w * b[0];
                        a[1] = self.beta * a[1] + w * b[1];
                        a[2] = self.beta * a[2] + w * b[2];
                    });
                Ok(out)
            }
        }
    }

    fn cost(&self, grid: &ControlGrid) -> Result<f64> {
        let field = grid.interpolate_dense();
        let e = self.measure_value(&field)?;
        let (r, _) = regularize(self.regularizer, grid);
        Ok(e + self.lambda * r)
    }

    fn cost_and_node_gradient(&self, grid: &ControlGrid) -> Result<(f64, Vec<[f64; 3]>)> {
        let field = grid.interpolate_dense();
        let e = self.measure_value(&field)?;
        let dense_grad = self.measure_gradient(&field)?;
        let mut node_grad = grid.pullback_to_nodes(&dense_grad)?;
        let (r, r_grad) = regularize(self.regularizer, grid);
        for (g, rg) in node_grad.iter_mut().zip(&r_grad) {
            g[0] += self.lambda * rg[0];
            g[1] += self.lambda * rg[1];
            g[2] += self.lambda * rg[2];
        }
        Ok((e + self.lambda * r, node_grad))
    }
}

/// F(grid) = dissimilarity + λ·regularizer, with its gradient with respect
/// to the node displacements (dissimilarity gradient pulled back through
/// the exact interpolation adjoint).
///
/// When the measure is the combined one, the descriptor scale must already
/// be resolved into `config.fixed_s`; the strategy field is not consulted
/// here.
pub fn total_cost(
    fixed: &Volume,
    moving: &Volume,
    grid: &ControlGrid,
    config: &RegistrationConfig,
) -> Result<(f64, Vec<[f64; 3]>)> {
    config.validate()?;
    let field = grid.interpolate_dense();
    let engine = CostEngine::new(fixed, moving, config, &field, config.fixed_s)?;
    engine.cost_and_node_gradient(grid)
}

// ---------------------------------------------------------------------------
// Deformable optimizer
// ---------------------------------------------------------------------------

/// One descent pass at a single resolution. Returns the accepted-cost trace
/// (first entry = initial cost).
fn descend_level(
    engine: &CostEngine,
    grid: &mut ControlGrid,
    max_iters: usize,
    step_tol: f64,
) -> Result<Vec<f64>> {
    let (mut cost, mut grad) = engine.cost_and_node_gradient(grid)?;
    let mut trace = vec![cost];
    let mut warm_step: Option<f64> = None;
    for _ in 0..max_iters {
        let max_g = grad.iter().map(|&g| norm3(g)).fold(0.0, f64::max);
        if max_g == 0.0 {
            break;
        }
        let g_dot: f64 = grad.iter().map(|g| g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sum();
        // Cap the first probe so no node moves more than one voxel.
        let t_cap = 1.0 / max_g;
        let mut t = warm_step.map_or(t_cap, |w| (2.0 * w).min(t_cap));
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut candidate = grid.clone();
            for (d, g) in candidate.disp.iter_mut().zip(&grad) {
                d[0] -= t * g[0];
                d[1] -= t * g[1];
                d[2] -= t * g[2];
            }
            let c = engine.cost(&candidate)?;
            if c <= cost - ARMIJO_C * t * g_dot {
                accepted = Some((candidate, c, t));
                break;
            }
            t *= 0.5;
        }
        let Some((candidate, new_cost, t_used)) = accepted else {
            break;
        };
        *grid = candidate;
        warm_step = Some(t_used);
        let rel = (cost - new_cost) / cost.abs().max(1e-12);
        cost = new_cost;
        trace.push(cost);
        if rel < step_tol {
            break;
        }
        grad = engine.cost_and_node_gradient(grid)?.1;
    }
    Ok(trace)
}

/// Resolves the combined-measure scale for one level, probing with the
/// current grid (or, for the dissimilarity-change strategy, with one NMI
/// descent step away from it so the probe state differs from the start).
fn resolve_scale(
    fixed: &Volume,
    moving: &Volume,
    grid: &ControlGrid,
    config: &RegistrationConfig,
) -> Result<f64> {
    let params = CombineParams {
        beta: config.beta,
        strategy: config.scale_strategy,
        fixed_s: config.fixed_s,
    };
    let probe = match config.scale_strategy {
        ScaleStrategy::DissimilarityChange => {
            let mut probe = grid.clone();
            let nmi_config = RegistrationConfig {
                measure: Measure::Nmi,
                lambda: 0.0,
                ..config.clone()
            };
            let field = probe.interpolate_dense();
            let engine = CostEngine::new(fixed, moving, &nmi_config, &field, 1.0)?;
            descend_level(&engine, &mut probe, 1, 0.0)?;
            probe
        }
        _ => grid.clone(),
    };
    combine_scale(fixed, moving, &probe, &params, &config.mind, config.bins)
}

/// Multi-resolution deformable registration of `moving` onto `fixed`.
///
/// Per level, coarsest to finest: the grid from the previous level is
/// upsampled, the combined-measure scale is resolved once, and Armijo
/// backtracking descent runs until the relative cost change drops below
/// `step_tol` or the iteration budget is spent. With `symmetric` set, a
/// backward registration runs alongside and both displacement fields are
/// averaged with their counterpart's inverse every `symmetric_every`
/// accepted iterations. Deterministic given config and inputs.
pub fn register_deformable(
    fixed: &Volume,
    moving: &Volume,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if fixed.dims != moving.dims {
        return Err(Error::DimensionMismatch {
            context: "registration inputs",
            left: fixed.dims,
            right: moving.dims,
        });
    }
    if fixed.is_constant() && moving.is_constant() {
        return Err(Error::DegeneratePair);
    }
    let start = Instant::now();
    let fixed_pyr = gaussian_pyramid(fixed, config.levels)?;
    let moving_pyr = gaussian_pyramid(moving, config.levels)?;

    let mut grid: Option<ControlGrid> = None;
    let mut bwd_grid: Option<ControlGrid> = None;
    let mut traces = Vec::new();
    let symmetric = config.symmetric && config.symmetric_every > 0;

    // Constant physical node spacing: halve per level so the mesh carries
    // the same degrees of freedom at every resolution.
    let level_spacing = |level: usize| (config.spacing_vox >> level).max(2);

    for level in (0..config.levels).rev() {
        let f = &fixed_pyr[level];
        let m = &moving_pyr[level];
        let spacing = level_spacing(level);
        let mut g = match grid.take() {
            None => ControlGrid::new(f.dims, spacing)?,
            Some(coarse) => coarse.upsampled(f.dims, spacing)?,
        };
        let mut bg = if symmetric {
            Some(match bwd_grid.take() {
                None => ControlGrid::new(f.dims, spacing)?,
                Some(coarse) => coarse.upsampled(f.dims, spacing)?,
            })
        } else {
            None
        };

        let s = if config.measure == Measure::NmiMind {
            Some(resolve_scale(f, m, &g, config)?)
        } else {
            None
        };

        let init_field = g.interpolate_dense();
        let engine = CostEngine::new(f, m, config, &init_field, s.unwrap_or(1.0))?;
        let bwd_engine = if symmetric {
            let bg_ref = bg.as_ref().unwrap();
            let bwd_init = bg_ref.interpolate_dense();
            Some(CostEngine::new(m, f, config, &bwd_init, s.unwrap_or(1.0))?)
        } else {
            None
        };

        let mut costs = Vec::new();
        if symmetric {
            let bwd_engine = bwd_engine.as_ref().unwrap();
            let bg_mut = bg.as_mut().unwrap();
            // Interleave short descent bursts with consistency averaging.
            let burst = config.symmetric_every;
            let mut spent = 0;
            while spent < config.max_iters_per_level {
                let n = burst.min(config.max_iters_per_level - spent);
                let fwd_trace = descend_level(&engine, &mut g, n, config.step_tol)?;
                descend_level(bwd_engine, bg_mut, n, config.step_tol)?;
                let fwd_steps = fwd_trace.len() - 1;
                if costs.is_empty() {
                    costs.extend_from_slice(&fwd_trace);
                } else {
                    costs.extend_from_slice(&fwd_trace[1..]);
                }
                let (nf, nb) =
                    inverse_consistency_step(&g.interpolate_dense(), &bg_mut.interpolate_dense())?;
                g.fit_to_field(&nf)?;
                bg_mut.fit_to_field(&nb)?;
                spent += n;
                if fwd_steps == 0 {
                    break;
                }
            }
            // Descent bursts pull the two fields apart again after each
            // averaging; iterate the averaging at level end so the pair
            // leaves the level mutually consistent.
            for _ in 0..MAX_CONSISTENCY_ROUNDS {
                let fd = g.interpolate_dense();
                let bd = bg_mut.interpolate_dense();
                if compose(&fd, &bd)?.max_norm() < CONSISTENCY_TOL {
                    break;
                }
                let (nf, nb) = inverse_consistency_step(&fd, &bd)?;
                g.fit_to_field(&nf)?;
                bg_mut.fit_to_field(&nb)?;
            }
        } else {
            costs = descend_level(&engine, &mut g, config.max_iters_per_level, config.step_tol)?;
        }
        traces.push(LevelTrace {
            level,
            dims: f.dims,
            s,
            costs,
        });
        grid = Some(g);
        bwd_grid = bg;
    }

    let grid = grid.unwrap();
    let field = grid.interpolate_dense();
    Ok(RegistrationResult {
        grid,
        backward_grid: bwd_grid,
        field,
        traces,
        wall_seconds: start.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

// ---------------------------------------------------------------------------
// Rigid pre-alignment
// ---------------------------------------------------------------------------

/// Rigid transform: rotations in radians about the volume center
/// (applied z·y·x), translations in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidParams {
    pub rotation_rad: [f64; 3],
    pub translation_mm: [f64; 3],
}

impl RigidParams {
    pub fn identity() -> Self {
        RigidParams {
            rotation_rad: [0.0; 3],
            translation_mm: [0.0; 3],
        }
    }

    fn matrix(&self) -> [[f64; 3]; 3] {
        let [rx, ry, rz] = self.rotation_rad;
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        // R = Rz * Ry * Rx.
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    }
}

#[derive(Debug, Clone)]
pub struct RigidResult {
    pub params: RigidParams,
    /// Moving volume resampled into the fixed frame under `params`.
    pub resampled: Volume,
    /// Final NMI dissimilarity.
    pub objective: f64,
    pub evaluations: usize,
}

/// Samples `moving` at R·(x−c)+c+t for every voxel x of `like`'s domain,
/// with c the volume center and t in voxels (translation_mm / spacing).
pub fn resample_rigid(moving: &Volume, params: &RigidParams, like: &Volume) -> Volume {
    let dims = like.dims;
    let r = params.matrix();
    let c = [
        (dims[0] - 1) as f64 / 2.0,
        (dims[1] - 1) as f64 / 2.0,
        (dims[2] - 1) as f64 / 2.0,
    ];
    let t = [
        params.translation_mm[0] / like.spacing[0] as f64,
        params.translation_mm[1] / like.spacing[1] as f64,
        params.translation_mm[2] / like.spacing[2] as f64,
    ];
    let mut out = Volume::zeros(dims, like.spacing);
    out.data.par_iter_mut().enumerate().for_each(|(idx, v)| {
        let x = (idx % dims[0]) as f64 - c[0];
        let y = ((idx / dims[0]) % dims[1]) as f64 - c[1];
        let z = (idx / (dims[0] * dims[1])) as f64 - c[2];
        let p = [
            r[0][0] * x + r[0][1] * y + r[0][2] * z + c[0] + t[0],
            r[1][0] * x + r[1][1] * y + r[1][2] * z + c[1] + t[1],
            r[2][0] * x + r[2][1] * y + r[2][2] * z + c[2] + t[2],
        ];
        *v = moving.sample_trilinear(p);
    });
    out
}

/// Rigid pre-alignment by a (1+1) evolution strategy on the six rigid
/// parameters, minimizing NMI dissimilarity. The mutation scale grows by
/// 1.05 on improvement and shrinks by 0.98 otherwise. Deterministic for a
/// fixed seed.
pub fn register_rigid(fixed: &Volume, moving: &Volume, iters: usize) -> Result<RigidResult> {
    register_rigid_seeded(fixed, moving, iters, DEFAULT_SEED)
}

pub fn register_rigid_seeded(
    fixed: &Volume,
    moving: &Volume,
    iters: usize,
    seed: u64,
) -> Result<RigidResult> {
    if fixed.dims != moving.dims {
        return Err(Error::DimensionMismatch {
            context: "rigid registration inputs",
            left: fixed.dims,
            right: moving.dims,
        });
    }
    if fixed.is_constant() || moving.is_constant() {
        return Err(Error::DegeneratePair);
    }
    let objective = |p: &RigidParams| -> Result<f64> {
        let resampled = resample_rigid(moving, p, fixed);
        crate::similarity::nmi_dissimilarity(fixed, &resampled)
    };
    let mut best = RigidParams::identity();
    let mut best_cost = objective(&best)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sigma = 1.0f64;
    // Per-parameter mutation scales: ~1° rotations, half-voxel translations.
    let rot_step = 0.02;
    let trans_step = [
        0.5 * fixed.spacing[0] as f64,
        0.5 * fixed.spacing[1] as f64,
        0.5 * fixed.spacing[2] as f64,
    ];
    let mut evaluations = 1;
    for _ in 0..iters {
        let normal = |rng: &mut ChaCha8Rng| {
            // Box-Muller from two uniforms.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let mut cand = best;
        for a in 0..3 {
            cand.rotation_rad[a] += sigma * rot_step * normal(&mut rng);
        }
        for a in 0..3 {
            cand.translation_mm[a] += sigma * trans_step[a] * normal(&mut rng);
        }
        let cost = objective(&cand)?;
        evaluations += 1;
        if cost < best_cost {
            best = cand;
            best_cost = cost;
            sigma *= 1.05;
        } else {
            sigma *= 0.98;
        }
    }
    Ok(RigidResult {
        params: best,
        resampled: resample_rigid(moving, &best, fixed),
        objective: best_cost,
        evaluations,
    })
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

/// One hyperparameter combination's outcome. Lower score is better.
#[derive(Debug, Clone)]
pub struct GridSearchCell {
    pub lambda: f64,
    pub spacing_vox: usize,
    pub levels: usize,
    pub score: Option<f64>,
    pub error: Option<String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct GridSearchTable {
    /// Ranked ascending by score; failed cells last. Ties break by
    /// (lambda, spacing, levels) lexicographic.
    pub cells: Vec<GridSearchCell>,
}

impl GridSearchTable {
    pub fn best(&self) -> Option<&GridSearchCell> {
        self.cells.first().filter(|c| c.score.is_some())
    }

    /// CSV with one row per cell: config columns, score, status.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,spacing,levels,score,wall_seconds,status\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{:.3},{}\n",
                c.lambda,
                c.spacing_vox,
                c.levels,
                c.score.map_or_else(|| "".into(), |s| format!("{s:.6}")),
                c.wall_seconds,
                if c.score.is_some() { "ok" } else { "failed" },
            ));
        }
        out
    }
}

/// Runs every (λ, spacing, levels) combination and ranks by the supplied
/// score (lower first). Per-cell failures are recorded, not fatal.
pub fn grid_search(
    fixed: &Volume,
    moving: &Volume,
    base_config: &RegistrationConfig,
    lambdas: &[f64],
    spacings: &[usize],
    levels_list: &[usize],
    score: impl Fn(&RegistrationResult) -> Result<f64>,
) -> Result<GridSearchTable> {
    if lambdas.is_empty() || spacings.is_empty() || levels_list.is_empty() {
        return Err(Error::invalid("grid search needs non-empty parameter lists"));
    }
    let mut cells = Vec::new();
    for &lambda in lambdas {
        for &spacing_vox in spacings {
            for &levels in levels_list {
                let config = RegistrationConfig {
                    lambda,
                    spacing_vox,
                    levels,
                    ..base_config.clone()
                };
                let start = Instant::now();
                let outcome = register_deformable(fixed, moving, &config)
                    .and_then(|result| score(&result));
                let wall_seconds = start.elapsed().as_secs_f64();
                let (score, error) = match outcome {
                    Ok(s) => (Some(s), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                cells.push(GridSearchCell {
                    lambda,
                    spacing_vox,
                    levels,
                    score,
                    error,
                    wall_seconds,
                });
            }
        }
    }
    cells.sort_by(|a, b| {
        let key = |c: &GridSearchCell| (c.score.is_none(), c.score.unwrap_or(f64::INFINITY));
        key(a)
            .partial_cmp(&key(b))
            .unwrap()
            .then(a.lambda.partial_cmp(&b.lambda).unwrap())
            .then(a.spacing_vox.cmp(&b.spacing_vox))
            .then(a.levels.cmp(&b.levels))
    });
    Ok(GridSearchTable { cells })
}
