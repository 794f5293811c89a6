//! Uniform-grid finite abstraction of a nominal model.
//!
//! Affine models with diagonal noise get a factored kernel: the successor
//! cell distribution is a product of one-dimensional masses, each depending
//! only on the cells of the coordinate's parents. Expectations are computed
//! by contracting one factor at a time. Other models get explicit sparse
//! rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmdp::{GmdpModel, LinearMap};
use crate::measures::{shift_norm, deficiency_from_norm, AxisBox, NormMode, TruncatedGaussian};
use crate::relations::{
    BaseRelation, ConcreteMap, DeltaField, FiniteGmdp, InterfaceDesc, ProvenanceEntry, RelationDesc,
    SimRelationCert, SparseDist,
};

/// Transitions are kept within this many standard deviations of the mean.
pub const WINDOW_SDS: f64 = 6.0;

/// Largest grid that may be given explicit rows.
pub const EXPLICIT_CELL_LIMIT: usize = 200_000;

const CHUNK: usize = 1 << 12;

/// Uniform partition of a box with a finite list of input levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub counts: Vec<usize>,
    pub domain: AxisBox,
    pub inputs: Vec<Vec<f64>>,
}

impl GridSpec {
    pub fn new(counts: Vec<usize>, domain: AxisBox, inputs: Vec<Vec<f64>>) -> Result<Self> {
        check_dim("grid counts", domain.dim(), counts.len())?;
        if counts.contains(&0) {
            return Err(Error::invalid("grid needs at least one cell per axis"));
        }
        if !domain.is_bounded() || (0..domain.dim()).any(|i| domain.upper[i] <= domain.lower[i]) {
            return Err(Error::invalid("grid domain must be bounded with positive widths"));
        }
        if inputs.is_empty() {
            return Err(Error::invalid("grid needs at least one input level"));
        }
        let m = inputs[0].len();
        if inputs.iter().any(|u| u.len() != m) {
            return Err(Error::invalid("input levels differ in dimension"));
        }
        Ok(GridSpec { counts, domain, inputs })
    }

    /// `count` evenly spaced levels of a scalar input, endpoints included.
    pub fn scalar_levels(lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
        if count == 1 {
            return vec![vec![0.5 * (lo + hi)]];
        }
        (0..count)
            .map(|i| vec![lo + (hi - lo) * i as f64 / (count - 1) as f64])
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn n_cells(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        (self.domain.upper[i] - self.domain.lower[i]) / self.counts[i] as f64
    }

    pub fn half_widths(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| 0.5 * self.width(i)).collect()
    }

    /// Each axis split into `factor` times as many cells.
    pub fn refined(&self, factor: usize) -> GridSpec {
        GridSpec {
            counts: self.counts.iter().map(|c| c * factor).collect(),
            domain: self.domain.clone(),
            inputs: self.inputs.clone(),
        }
    }

    pub fn center_1d(&self, i: usize, k: usize) -> f64 {
        self.domain.lower[i] + (k as f64 + 0.5) * self.width(i)
    }

    /// Coordinate 0 is the most significant digit.
    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.counts).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn unravel(&self, mut cell: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for i in (0..self.dim()).rev() {
            idx[i] = cell % self.counts[i];
            cell /= self.counts[i];
        }
        idx
    }

    pub fn representative(&self, cell: usize) -> Vec<f64> {
        self.unravel(cell)
            .iter()
            .enumerate()
            .map(|(i, &k)| self.center_1d(i, k))
            .collect()
    }

    pub fn cell_box(&self, cell: usize) -> AxisBox {
        let idx = self.unravel(cell);
        let lower: Vec<f64> = (0..self.dim())
            .map(|i| self.domain.lower[i] + idx[i] as f64 * self.width(i))
            .collect();
        let upper = (0..self.dim()).map(|i| lower[i] + self.width(i)).collect();
        AxisBox { lower, upper }
    }

    /// Index of a cell along axis `i`, if `x` lies in the domain there.
    /// Upper domain faces belong to the last cell.
    pub fn locate_1d(&self, i: usize, x: f64) -> Option<usize> {
        let (lo, hi) = (self.domain.lower[i], self.domain.upper[i]);
        if !(x >= lo && x <= hi) {
            return None;
        }
        Some((((x - lo) / self.width(i)).floor() as usize).min(self.counts[i] - 1))
    }

    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let idx: Option<Vec<usize>> = (0..self.dim()).map(|i| self.locate_1d(i, x[i])).collect();
        idx.map(|v| self.ravel(&v))
    }
}

/// Masses of one coordinate's successor cells as a function of its
/// parents' current cells and, optionally, the input level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub target: usize,
    pub parents: Vec<usize>,
    pub uses_input: bool,
    starts: Vec<u32>,
    offsets: Vec<usize>,
    weights: Vec<f64>,
}

impl Factor {
    fn window(&self, config: usize) -> (usize, &[f64]) {
        let w = &self.weights[self.offsets[config]..self.offsets[config + 1]];
        (self.starts[config] as usize, w)
    }

    fn max_window(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}

/// Masses of `N(mean, noise_i)` on the cells of axis `i` within the window.
fn axis_window(grid: &GridSpec, noise: &TruncatedGaussian, i: usize, mean: f64) -> (usize, Vec<f64>) {
    let sd = noise.base.sd(i);
    let lo_off = (-WINDOW_SDS * sd).max(noise.support.lower[i]);
    let hi_off = (WINDOW_SDS * sd).min(noise.support.upper[i]);
    let (dlo, h, n) = (grid.domain.lower[i], grid.width(i), grid.counts[i]);
    let a = mean + lo_off;
    let b = mean + hi_off;
    if b < dlo || a > grid.domain.upper[i] {
        return (0, Vec::new());
    }
    let k0 = (((a - dlo) / h).floor().max(0.0) as usize).min(n - 1);
    let k1 = (((b - dlo) / h).floor().max(0.0) as usize).min(n - 1);
    let w = (k0..=k1)
        .map(|k| {
            let lo = dlo + k as f64 * h;
            noise.marginal_mass(i, lo - mean, lo + h - mean)
        })
        .collect();
    (k0, w)
}

/// Probability lost by clipping every axis to its window.
fn window_tail(noise: &TruncatedGaussian) -> f64 {
    let kept: f64 = (0..noise.dim())
        .map(|i| {
            let sd = noise.base.sd(i);
            noise.marginal_mass(i, -WINDOW_SDS * sd, WINDOW_SDS * sd)
        })
        .product();
    (1.0 - kept).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Next(usize),
    Cur(usize),
    Input,
}

struct Tensor {
    axes: Vec<Axis>,
    sizes: Vec<usize>,
    data: Vec<f64>,
}

fn strides(sizes: &[usize]) -> Vec<usize> {
    let mut s = vec![1; sizes.len()];
    for q in (0..sizes.len().saturating_sub(1)).rev() {
        s[q] = s[q + 1] * sizes[q + 1];
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredKernel {
    pub factors: Vec<Factor>,
}

impl FactoredKernel {
    fn out_axes(&self, t: &Tensor, f: &Factor, grid: &GridSpec) -> (Vec<Axis>, Vec<usize>) {
        let mut axes = Vec::with_capacity(t.axes.len() + f.parents.len() + 1);
        let mut sizes = Vec::with_capacity(axes.capacity());
        for (a, s) in t.axes.iter().zip(&t.sizes) {
            if *a != Axis::Next(f.target) {
                axes.push(*a);
                sizes.push(*s);
            }
        }
        for &j in &f.parents {
            if !axes.contains(&Axis::Cur(j)) {
                axes.push(Axis::Cur(j));
                sizes.push(grid.counts[j]);
            }
        }
        if f.uses_input && !axes.contains(&Axis::Input) {
            axes.push(Axis::Input);
            sizes.push(grid.n_inputs());
        }
        (axes, sizes)
    }

    fn contract(&self, t: &Tensor, f: &Factor, grid: &GridSpec) -> Tensor {
        let (axes, sizes) = self.out_axes(t, f, grid);
        let t_strides = strides(&t.sizes);
        let pos = t.axes.iter().position(|a| *a == Axis::Next(f.target)).expect("target axis present");
        let stride_p = t_strides[pos];
        let n_u = if f.uses_input { grid.n_inputs() } else { 1 };
        let mut f_strides_by_parent = vec![0usize; f.parents.len()];
        let mut acc = n_u;
        for k in (0..f.parents.len()).rev() {
            f_strides_by_parent[k] = acc;
            acc *= grid.counts[f.parents[k]];
        }
        let ts: Vec<usize> = axes
            .iter()
            .map(|a| t.axes.iter().position(|b| b == a).map_or(0, |q| t_strides[q]))
            .collect();
        let fs: Vec<usize> = axes
            .iter()
            .map(|a| match a {
                Axis::Cur(j) => f.parents.iter().position(|p| p == j).map_or(0, |k| f_strides_by_parent[k]),
                Axis::Input if f.uses_input => 1,
                _ => 0,
            })
            .collect();
        let total: usize = sizes.iter().product();
        let mut data = vec![0.0; total];
        let nax = axes.len();
        data.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
            for (k, out) in chunk.iter_mut().enumerate() {
                let mut flat = ci * CHUNK + k;
                let (mut toff, mut foff) = (0usize, 0usize);
                for q in (0..nax).rev() {
                    let iq = flat % sizes[q];
                    flat /= sizes[q];
                    toff += iq * ts[q];
                    foff += iq * fs[q];
                }
                let (start, w) = f.window(foff);
                let base = toff + start * stride_p;
                let mut s = 0.0;
                for (m, wm) in w.iter().enumerate() {
                    s += wm * t.data[base + m * stride_p];
                }
                *out = s;
            }
        });
        Tensor { axes, sizes, data }
    }

    /// `E[W(next) | cell, input]`, laid out as `[cell * n_inputs + input]`.
    fn expectation(&self, grid: &GridSpec, w: &[f64]) -> Vec<f64> {
        let d = grid.dim();
        let mut t = Tensor {
            axes: (0..d).map(Axis::Next).collect(),
            sizes: grid.counts.clone(),
            data: w.to_vec(),
        };
        let mut remaining: Vec<&Factor> = self.factors.iter().collect();
        while !remaining.is_empty() {
            let (best, _) = remaining
                .iter()
                .enumerate()
                .map(|(k, f)| {
                    let (_, sizes) = self.out_axes(&t, f, grid);
                    (k, sizes.iter().product::<usize>() * f.max_window().max(1))
                })
                .min_by_key(|&(k, cost)| (cost, k))
                .expect("non-empty");
            let f = remaining.remove(best);
            t = self.contract(&t, f, grid);
        }
        let n_u = grid.n_inputs();
        let ts = strides(&t.sizes);
        let coord_stride: Vec<usize> = (0..d)
            .map(|j| t.axes.iter().position(|a| *a == Axis::Cur(j)).map_or(0, |q| ts[q]))
            .collect();
        let input_stride = t.axes.iter().position(|a| *a == Axis::Input).map_or(0, |q| ts[q]);
        let mut out = vec![0.0; grid.n_cells() * n_u];
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
            for (k, o) in chunk.iter_mut().enumerate() {
                let flat = ci * CHUNK + k;
                let (mut cell, u) = (flat / n_u, flat % n_u);
                let mut off = u * input_stride;
                for j in (0..d).rev() {
                    off += (cell % grid.counts[j]) * coord_stride[j];
                    cell /= grid.counts[j];
                }
                *o = t.data[off];
            }
        });
        out
    }

    fn row(&self, grid: &GridSpec, cell: usize, u: usize) -> SparseDist {
        let idx = grid.unravel(cell);
        let mut per_axis = vec![(0usize, &[][..]); grid.dim()];
        for f in &self.factors {
            let n_u = if f.uses_input { grid.n_inputs() } else { 1 };
            let mut config = 0;
            for &p in &f.parents {
                config = config * grid.counts[p] + idx[p];
            }
            config = config * n_u + if f.uses_input { u } else { 0 };
            per_axis[f.target] = f.window(config);
        }
        product_row(grid, &per_axis)
    }
}

fn product_row(grid: &GridSpec, per_axis: &[(usize, &[f64])]) -> SparseDist {
    let mut row: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
    for &(start, w) in per_axis {
        let mut next = Vec::with_capacity(row.len() * w.len());
        for (idx, p) in &row {
            for (m, wm) in w.iter().enumerate() {
                if *wm > 0.0 {
                    let mut i = idx.clone();
                    i.push(start + m);
                    next.push((i, p * wm));
                }
            }
        }
        row = next;
    }
    row.into_iter().map(|(idx, p)| (grid.ravel(&idx), p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Factored(FactoredKernel),
    /// `rows[cell * n_inputs + input]`.
    Explicit(Vec<SparseDist>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteAbstraction {
    pub grid: GridSpec,
    pub model_name: String,
    pub output_coords: Vec<usize>,
    pub kernel: Kernel,
    /// Mass dropped by the transition windows, per row at most.
    pub window_tail: f64,
}

impl FiniteAbstraction {
    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn n_inputs(&self) -> usize {
        self.grid.n_inputs()
    }

    pub fn is_factored(&self) -> bool {
        matches!(self.kernel, Kernel::Factored(_))
    }

    /// `E[W(next) | cell, input]` for a function `W` on cells.
    pub fn expectation(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_dim("value vector", self.n_cells(), w.len())?;
        Ok(match &self.kernel {
            Kernel::Factored(k) => k.expectation(&self.grid, w),
            Kernel::Explicit(rows) => rows
                .par_iter()
                .map(|row| row.iter().map(|&(t, p)| p * w[t]).sum())
                .collect(),
        })
    }

    pub fn row(&self, cell: usize, input: usize) -> SparseDist {
        match &self.kernel {
            Kernel::Factored(k) => k.row(&self.grid, cell, input),
            Kernel::Explicit(rows) => rows[cell * self.n_inputs() + input].clone(),
        }
    }

    pub fn representative_output(&self, cell: usize) -> Vec<f64> {
        let r = self.grid.representative(cell);
        self.output_coords.iter().map(|&i| r[i]).collect()
    }

    /// Explicit finite gMDP with every cell initial.
    pub fn to_finite_gmdp(&self) -> Result<FiniteGmdp> {
        if self.n_cells() > EXPLICIT_CELL_LIMIT {
            return Err(Error::invalid(format!("{} cells is too many for explicit rows", self.n_cells())));
        }
        let outputs = (0..self.n_cells()).map(|c| self.representative_output(c)).collect();
        let mut m = FiniteGmdp::new(self.n_cells(), self.n_inputs(), 1, outputs, (0..self.n_cells()).collect())?;
        for c in 0..self.n_cells() {
            for u in 0..self.n_inputs() {
                m.set_row(c, u, 0, self.row(c, u))?;
            }
        }
        Ok(m)
    }
}

fn check_nominal(model: &GmdpModel, grid: &GridSpec) -> Result<()> {
    check_dim("grid", model.dim(), grid.dim())?;
    check_dim("input levels", model.input_dim(), grid.inputs[0].len())?;
    if model.n_params != 0 || model.disturbance_dim != 0 || model.observation_dim != 0 {
        return Err(Error::invalid(format!(
            "{} must be a closed nominal model: fix parameters and absorb the adversary first",
            model.name
        )));
    }
    if model.noise.base.mean.iter().any(|m| *m != 0.0) {
        return Err(Error::invalid("noise must be centered"));
    }
    for u in &grid.inputs {
        if !model.input_space.contains(u) {
            return Err(Error::OutOfDomain(format!("input level {u:?}")));
        }
    }
    Ok(())
}

/// Abstraction with the factored kernel when the drift is affine and
/// explicit rows otherwise.
pub fn build_abstraction(model: &GmdpModel, grid: &GridSpec) -> Result<FiniteAbstraction> {
    check_nominal(model, grid)?;
    let Some(aff) = model.affine() else {
        return build_abstraction_explicit(model, grid);
    };
    let n_u = grid.n_inputs();
    let mut factors = Vec::with_capacity(grid.dim());
    for i in 0..grid.dim() {
        let parents: Vec<usize> = (0..grid.dim()).filter(|&j| aff.a[i][j] != 0.0).collect();
        let uses_input = aff.b[i].iter().any(|b| *b != 0.0);
        let n_cfg: usize = parents.iter().map(|&p| grid.counts[p]).product::<usize>() * if uses_input { n_u } else { 1 };
        let mut starts = Vec::with_capacity(n_cfg);
        let mut offsets = Vec::with_capacity(n_cfg + 1);
        let mut weights = Vec::new();
        offsets.push(0);
        for cfg in 0..n_cfg {
            let (mut rest, u) = if uses_input { (cfg / n_u, cfg % n_u) } else { (cfg, 0) };
            let mut mean = aff.c[i];
            for &p in parents.iter().rev() {
                let k = rest % grid.counts[p];
                rest /= grid.counts[p];
                mean += aff.a[i][p] * grid.center_1d(p, k);
            }
            if uses_input {
                mean += aff.b[i].iter().zip(&grid.inputs[u]).map(|(b, v)| b * v).sum::<f64>();
            }
            let (start, w) = axis_window(grid, &model.noise, i, mean);
            starts.push(start as u32);
            weights.extend(w);
            offsets.push(weights.len());
        }
        factors.push(Factor {
            target: i,
            parents,
            uses_input,
            starts,
            offsets,
            weights,
        });
    }
    Ok(FiniteAbstraction {
        grid: grid.clone(),
        model_name: model.name.clone(),
        output_coords: model.output.coords.clone(),
        kernel: Kernel::Factored(FactoredKernel { factors }),
        window_tail: window_tail(&model.noise),
    })
}

/// Abstraction with explicit sparse rows from the drift at representatives.
pub fn build_abstraction_explicit(model: &GmdpModel, grid: &GridSpec) -> Result<FiniteAbstraction> {
    check_nominal(model, grid)?;
    if grid.n_cells() > EXPLICIT_CELL_LIMIT {
        return Err(Error::invalid(format!("{} cells is too many for explicit rows", grid.n_cells())));
    }
    let n_u = grid.n_inputs();
    let rows: Result<Vec<SparseDist>> = (0..grid.n_cells() * n_u)
        .into_par_iter()
        .map(|k| {
            let (cell, u) = (k / n_u, k % n_u);
            let mean = model.drift_at(&grid.representative(cell), &grid.inputs[u], &[], &[])?;
            let windows: Vec<(usize, Vec<f64>)> =
                (0..grid.dim()).map(|i| axis_window(grid, &model.noise, i, mean[i])).collect();
            let per_axis: Vec<(usize, &[f64])> = windows.iter().map(|(s, w)| (*s, &w[..])).collect();
            Ok(product_row(grid, &per_axis))
        })
        .collect();
    Ok(FiniteAbstraction {
        grid: grid.clone(),
        model_name: model.name.clone(),
        output_coords: model.output.coords.clone(),
        kernel: Kernel::Explicit(rows?),
        window_tail: window_tail(&model.noise),
    })
}

/// Largest drift deviation between a cell point and its representative,
/// per coordinate: `Σ_j |A_ij| h_j`.
pub fn drift_deviation_bound(model: &GmdpModel, grid: &GridSpec) -> Result<Vec<f64>> {
    let aff = model
        .affine()
        .ok_or_else(|| Error::refused("no closed-form discretization bound for a non-affine drift"))?;
    let h = grid.half_widths();
    Ok(aff
        .a
        .iter()
        .map(|row| row.iter().zip(&h).map(|(a, h)| a.abs() * h).sum())
        .collect())
}

/// Certificate `finite ≼ nominal` for the grid relation: ε is the output
/// radius of a cell, δ the deficiency of the worst representative shift
/// plus the window tail.
pub fn discretization_certificate(model: &GmdpModel, grid: &GridSpec, mode: NormMode) -> Result<SimRelationCert> {
    check_nominal(model, grid)?;
    let dev = drift_deviation_bound(model, grid)?;
    let delta = (deficiency_from_norm(shift_norm(&dev, &model.noise.base.variance, mode)?)
        + window_tail(&model.noise))
    .min(1.0);
    let h = grid.half_widths();
    let out_mags: Vec<f64> = model.output.coords.iter().map(|&i| h[i]).collect();
    let epsilon = model.output.norm_of_magnitudes(&out_mags);
    Ok(SimRelationCert {
        abstract_system: "finite".into(),
        concrete_system: model.name.clone(),
        epsilon,
        delta: DeltaField::Scalar(delta),
        relation: RelationDesc::Simple {
            base: BaseRelation::GridCell {
                counts: grid.counts.clone(),
                domain: grid.domain.clone(),
            },
            concrete_map: ConcreteMap::Linear(LinearMap::Identity(model.dim())),
        },
        interface: InterfaceDesc::Identity,
        uniform_over_adversaries: true,
        provenance: vec![ProvenanceEntry {
            kind: "discretization".into(),
            detail: format!("grid {:?}, {mode} norm", grid.counts),
            epsilon,
            delta_max: delta,
        }],
    })
}

/// Grid of the scenario's nominal model at refinement `level`
/// (cell width 0.5 / 2^level, five input levels).
pub fn case_study_grid(nominal: &GmdpModel, level: u32) -> Result<GridSpec> {
    let base = [6usize, 7, 6, 11];
    let f = 1usize << level;
    let u = nominal.input_space.interval(0);
    GridSpec::new(
        base.iter().map(|c| c * f).collect(),
        nominal.state_space.clone(),
        GridSpec::scalar_levels(u.lo, u.hi, 5),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmdp::builtin_case_study;

    #[test]
    fn grid_indexing_round_trips() {
        let cs = builtin_case_study();
        let g = case_study_grid(&cs.nominal().unwrap(), 0).unwrap();
        assert_eq!(g.n_cells(), 6 * 7 * 6 * 11);
        for cell in [0, 17, 999, g.n_cells() - 1] {
            let r = g.representative(cell);
            assert_eq!(g.locate(&r), Some(cell));
            assert!(g.cell_box(cell).contains(&r));
        }
        assert_eq!(g.locate(&[3.0, 3.5, 3.75, 5.5]), Some(g.n_cells() - 1));
        assert_eq!(g.locate(&[3.1, 0.0, 1.0, 0.0]), None);
        assert_eq!(g.inputs, vec![vec![-5.0], vec![-2.5], vec![0.0], vec![2.5], vec![5.0]]);
    }

    #[test]
    fn factored_rows_match_explicit_rows() {
        let cs = builtin_case_study();
        let nominal = cs.nominal().unwrap();
        let g = case_study_grid(&nominal, 0).unwrap();
        let f = build_abstraction(&nominal, &g).unwrap();
        let e = build_abstraction_explicit(&nominal, &g).unwrap();
        assert!(f.is_factored() && !e.is_factored());
        for cell in [0, 5, 123, 1500, g.n_cells() - 1] {
            for u in 0..g.n_inputs() {
                let (a, b) = (f.row(cell, u), e.row(cell, u));
                assert_eq!(a.len(), b.len());
                for ((i, p), (j, q)) in a.iter().zip(&b) {
                    assert_eq!(i, j);
                    assert!((p - q).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn contraction_matches_row_sums() {
        let cs = builtin_case_study();
        let nominal = cs.nominal().unwrap();
        let g = case_study_grid(&nominal, 0).unwrap();
        let abs = build_abstraction(&nominal, &g).unwrap();
        let w: Vec<f64> = (0..g.n_cells()).map(|c| ((c * 7919) % 101) as f64 / 100.0).collect();
        let ev = abs.expectation(&w).unwrap();
        for cell in (0..g.n_cells()).step_by(97) {
            for u in 0..g.n_inputs() {
                let direct: f64 = abs.row(cell, u).iter().map(|&(t, p)| p * w[t]).sum();
                assert!((ev[cell * g.n_inputs() + u] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_sub_stochastic() {
        let cs = builtin_case_study();
        let nominal = cs.nominal().unwrap();
        let g = case_study_grid(&nominal, 0).unwrap();
        let abs = build_abstraction(&nominal, &g).unwrap();
        let ones = vec![1.0; g.n_cells()];
        for (k, m) in abs.expectation(&ones).unwrap().iter().enumerate() {
            assert!(*m >= 0.0 && *m <= 1.0 + 1e-12, "row {k}: {m}");
        }
    }

    #[test]
    fn discretization_bounds_shrink_under_refinement() {
        let cs = builtin_case_study();
        let nominal = cs.nominal().unwrap();
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for level in 0..3 {
            let g = case_study_grid(&nominal, level).unwrap();
            let c = discretization_certificate(&nominal, &g, NormMode::Weighted).unwrap();
            assert!(c.epsilon < prev.0 && c.delta_max() < prev.1);
            prev = (c.epsilon, c.delta_max());
        }
        assert!((prev.0 - 0.125).abs() < 1e-15);
    }
}
