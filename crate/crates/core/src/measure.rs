//! Finite representation of the minor population: the node grid over the
//! support box, bilinear projection of finite-support measures onto it, and
//! the one-step mean-field transition.
//!
//! A [`ProjectedMeasure`] is a dense weight vector indexed row-major by
//! `(i, j)`: `k = i * r_points.len() + j`, where `i` runs over proportion
//! nodes and `j` over rate nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{linspace, validate_atoms, Atom, BankState, MarketParams, RateBook};
use crate::scalar::Scalar;

/// Tensor grid of `(p̄, r)` nodes spanning the support box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec<T> {
    pub p_points: Vec<T>,
    pub r_points: Vec<T>,
}

impl<T: Scalar> Default for GridSpec<T> {
    /// 16 proportion nodes 0.20, 0.24, ..., 0.80 and 6 rate nodes
    /// 0.025, 0.027, ..., 0.035: 96 nodes.
    fn default() -> Self {
        Self {
            p_points: linspace(T::lit(0.20), T::lit(0.80), 16),
            r_points: linspace(T::lit(0.025), T::lit(0.035), 6),
        }
    }
}

/// Cell containing `x` and the normalized offset inside it. Points on a node
/// get an offset of exactly 0 (or 1 on the last node).
fn locate<T: Scalar>(points: &[T], x: T) -> Option<(usize, T)> {
    let n = points.len();
    if !(x >= points[0] && x <= points[n - 1]) {
        return None;
    }
    let i = points.partition_point(|&v| v <= x).saturating_sub(1).min(n - 2);
    let frac = (x - points[i]) / (points[i + 1] - points[i]);
    Some((i, frac))
}

impl<T: Scalar> GridSpec<T> {
    pub fn new(p_points: Vec<T>, r_points: Vec<T>) -> Result<Self> {
        let grid = Self { p_points, r_points };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, pts) in [("p_points", &self.p_points), ("r_points", &self.r_points)] {
            if pts.len() < 2 {
                return Err(Error::InvalidParam {
                    name,
                    reason: "needs at least two nodes".into(),
                });
            }
            if pts.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidParam {
                    name,
                    reason: "must be strictly increasing".into(),
                });
            }
        }
        Ok(())
    }

    /// Checks that the grid spans exactly the support box of `params`.
    pub fn validate_against(&self, params: &MarketParams<T>) -> Result<()> {
        self.validate()?;
        let tol = T::lit(1e-12);
        let (p0, p1) = (self.p_points[0], *self.p_points.last().unwrap());
        let (r0, r1) = (self.r_points[0], *self.r_points.last().unwrap());
        if (p0 - params.prop_min).abs() > tol || (p1 - params.prop_max).abs() > tol {
            return Err(Error::InvalidParam {
                name: "p_points",
                reason: "must span [prop_min, prop_max]".into(),
            });
        }
        if (r0 - params.rate_min).abs() > tol || (r1 - params.rate_max).abs() > tol {
            return Err(Error::InvalidParam {
                name: "r_points",
                reason: "must span [rate_min, rate_max]".into(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.p_points.len() * self.r_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.r_points.len() + j
    }

    #[inline]
    pub fn node(&self, k: usize) -> BankState<T> {
        let nr = self.r_points.len();
        BankState::new(self.p_points[k / nr], self.r_points[k % nr])
    }

    pub fn nodes(&self) -> impl Iterator<Item = BankState<T>> + '_ {
        (0..self.len()).map(move |k| self.node(k))
    }

    pub fn p_bounds(&self) -> (T, T) {
        (self.p_points[0], *self.p_points.last().unwrap())
    }

    pub fn r_bounds(&self) -> (T, T) {
        (self.r_points[0], *self.r_points.last().unwrap())
    }

    pub fn contains(&self, p: T, r: T) -> bool {
        let (p0, p1) = self.p_bounds();
        let (r0, r1) = self.r_bounds();
        p >= p0 && p <= p1 && r >= r0 && r <= r1
    }

    fn out_of_support(&self, p: T, r: T) -> Error {
        let (p0, p1) = self.p_bounds();
        let (r0, r1) = self.r_bounds();
        Error::OutOfSupport {
            p: p.as_f64(),
            r: r.as_f64(),
            p_min: p0.as_f64(),
            p_max: p1.as_f64(),
            r_min: r0.as_f64(),
            r_max: r1.as_f64(),
        }
    }

    /// Splits mass `w` at `(p, r)` onto the four vertices of its cell.
    fn deposit(&self, weights: &mut [T], p: T, r: T, w: T) -> Result<()> {
        let (Some((i, a)), Some((j, b))) = (locate(&self.p_points, p), locate(&self.r_points, r))
        else {
            return Err(self.out_of_support(p, r));
        };
        let one = T::one();
        let k = self.index(i, j);
        let k_up = self.index(i + 1, j);
        weights[k] = weights[k] + (one - a) * (one - b) * w;
        weights[k + 1] = weights[k + 1] + (one - a) * b * w;
        weights[k_up] = weights[k_up] + a * (one - b) * w;
        weights[k_up + 1] = weights[k_up + 1] + a * b * w;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> GridSpec<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
        GridSpec {
            p_points: c(&self.p_points),
            r_points: c(&self.r_points),
        }
    }
}

/// Probability vector over the grid nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProjectedMeasure<T> {
    weights: Vec<T>,
}

impl<T: Scalar> ProjectedMeasure<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w >= T::zero())) {
            return Err(Error::InvalidMeasure(format!("weight {w} is negative")));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::mass_tolerance() {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    /// Wraps weights produced by a mass-preserving operation on a valid measure.
    pub(crate) fn from_raw(weights: Vec<T>) -> Self {
        Self { weights }
    }

    /// Point mass at node `k`.
    pub fn dirac(len: usize, k: usize) -> Self {
        let mut weights = vec![T::zero(); len];
        weights[k] = T::one();
        Self { weights }
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            weights: vec![T::one() / T::lit(len as f64); len],
        }
    }

    /// Projection of the uniform distribution on `[p_lo, p_hi] × [r_lo, r_hi]`,
    /// integrated exactly against the bilinear vertex weights.
    pub fn uniform_box(grid: &GridSpec<T>, p_range: (T, T), r_range: (T, T)) -> Result<Self> {
        let wp = hat_masses(&grid.p_points, p_range)
            .ok_or_else(|| grid.out_of_support(p_range.0, r_range.0))?;
        let wr = hat_masses(&grid.r_points, r_range)
            .ok_or_else(|| grid.out_of_support(p_range.1, r_range.1))?;
        let mut weights = Vec::with_capacity(grid.len());
        for a in &wp {
            for b in &wr {
                weights.push(*a * *b);
            }
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> T {
        self.weights.iter().copied().sum()
    }

    /// Nonzero nodes as atoms.
    pub fn atoms<'a>(&'a self, grid: &'a GridSpec<T>) -> impl Iterator<Item = Atom<T>> + 'a {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > T::zero())
            .map(move |(k, &w)| {
                let x = grid.node(k);
                Atom::new(x.p, x.r, w)
            })
    }

    pub fn mean_rate(&self, grid: &GridSpec<T>) -> T {
        self.atoms(grid).map(|a| a.w * a.r).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ProjectedMeasure<U> {
        ProjectedMeasure {
            weights: self.weights.iter().map(|w| U::lit(w.as_f64())).collect(),
        }
    }
}

/// Normalized integrals of each 1-D hat function over `[lo, hi]`.
fn hat_masses<T: Scalar>(points: &[T], (lo, hi): (T, T)) -> Option<Vec<T>> {
    let n = points.len();
    if !(lo >= points[0] && hi <= points[n - 1] && lo <= hi) {
        return None;
    }
    let mut out = vec![T::zero(); n];
    if lo == hi {
        let (i, a) = locate(points, lo)?;
        out[i] = T::one() - a;
        out[i + 1] = a;
        return Some(out);
    }
    let half = T::lit(0.5);
    for k in 0..n - 1 {
        let (x0, x1) = (points[k], points[k + 1]);
        let a = lo.max(x0);
        let b = hi.min(x1);
        if b <= a {
            continue;
        }
        let h = x1 - x0;
        let s = (a - x0) / h;
        let e = (b - x0) / h;
        let right = h * (e * e - s * s) * half;
        out[k + 1] = out[k + 1] + right;
        out[k] = out[k] + h * (e - s) - right;
    }
    let total: T = out.iter().copied().sum();
    for w in &mut out {
        *w = *w / total;
    }
    Some(out)
}

/// Probability measure with finite support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure<T> {
    atoms: Vec<Atom<T>>,
}

impl<T: Scalar> EmpiricalMeasure<T> {
    pub fn new(atoms: Vec<Atom<T>>) -> Result<Self> {
        validate_atoms(&atoms)?;
        let total: T = atoms.iter().map(|a| a.w).sum();
        if (total - T::one()).abs() > T::mass_tolerance() {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[Atom<T>] {
        &self.atoms
    }
}

/// Bilinear projection onto the grid. Each atom's mass is split over the
/// vertices of its enclosing cell with normalized bilinear weights, which
/// preserves total mass and both first moments.
pub fn project<T: Scalar>(mu: &EmpiricalMeasure<T>, grid: &GridSpec<T>) -> Result<ProjectedMeasure<T>> {
    let mut weights = vec![T::zero(); grid.len()];
    for a in mu.atoms() {
        grid.deposit(&mut weights, a.p, a.r, a.w)?;
    }
    Ok(ProjectedMeasure { weights })
}

/// `∫ p̄ dμ`: total share held by the minor banks.
pub fn aggregate_minor_mass<T: Scalar>(mu: &ProjectedMeasure<T>, grid: &GridSpec<T>) -> T {
    let nr = grid.r_points.len();
    mu.weights
        .chunks(nr)
        .zip(&grid.p_points)
        .map(|(row, &p)| p * row.iter().copied().sum::<T>())
        .sum()
}

/// What to do with an atom that the dynamics push out of the grid box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportMode {
    /// Fail with [`Error::OutOfSupport`].
    Strict,
    /// Move the atom back onto the nearest boundary.
    Clamp,
}

/// The market after every bank has posted its new rate for the step: the
/// major bank `(p⁰, u⁰)` and the minor nodes carrying their chosen rates.
#[derive(Clone, Debug)]
pub struct DecidedMarket<T> {
    major: BankState<T>,
    atoms: Vec<Atom<T>>,
    book: RateBook<T>,
}

impl<T: Scalar> DecidedMarket<T> {
    /// `node_actions[k]` is the rate posted by the minors at node `k`.
    pub fn new(
        major_p: T,
        major_rate: T,
        mu: &ProjectedMeasure<T>,
        node_actions: &[T],
        grid: &GridSpec<T>,
    ) -> Result<Self> {
        if mu.len() != grid.len() {
            return Err(Error::Dimension {
                expected: grid.len(),
                got: mu.len(),
            });
        }
        if node_actions.len() != grid.len() {
            return Err(Error::Dimension {
                expected: grid.len(),
                got: node_actions.len(),
            });
        }
        let atoms: Vec<Atom<T>> = mu
            .weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > T::zero())
            .map(|(k, &w)| Atom::new(grid.node(k).p, node_actions[k], w))
            .collect();
        let book = RateBook::from_atoms(&atoms);
        Ok(Self {
            major: BankState::new(major_p, major_rate),
            atoms,
            book,
        })
    }

    pub fn major(&self) -> BankState<T> {
        self.major
    }

    pub fn atoms(&self) -> &[Atom<T>] {
        &self.atoms
    }

    pub fn major_drift(&self, params: &MarketParams<T>) -> T {
        self.book.major_drift(self.major.p, self.major.r, params)
    }

    pub fn minor_drift(&self, own_p: T, own_rate: T, params: &MarketParams<T>) -> T {
        self.book
            .minor_drift(self.major.p, self.major.r, own_p, own_rate, params)
    }

    /// `K⁰` applied to the major bank.
    pub fn next_major(&self, params: &MarketParams<T>) -> BankState<T> {
        let b = self.major_drift(params);
        BankState::new(crate::market::euler_step(self.major.p, b, params.dt), self.major.r)
    }

    /// `K` applied to a representative minor that held `p` and posts `u`.
    pub fn next_minor(&self, p: T, u: T, params: &MarketParams<T>) -> BankState<T> {
        let b = self.minor_drift(p, u, params);
        BankState::new(crate::market::euler_step(p, b, params.dt), u)
    }

    /// Pushes every node forward and projects back onto the grid. Returns the
    /// new measure and the number of atoms that had to be clamped.
    pub fn next_measure(
        &self,
        grid: &GridSpec<T>,
        params: &MarketParams<T>,
        support: SupportMode,
    ) -> Result<(ProjectedMeasure<T>, usize)> {
        let mut weights = vec![T::zero(); grid.len()];
        let mut clamped = 0;
        let (p_lo, p_hi) = grid.p_bounds();
        let (r_lo, r_hi) = grid.r_bounds();
        for a in &self.atoms {
            let b = self.minor_drift(a.p, a.r, params);
            let mut p = a.p + b * params.dt;
            let mut r = a.r;
            if !grid.contains(p, r) {
                match support {
                    SupportMode::Strict => return Err(grid.out_of_support(p, r)),
                    SupportMode::Clamp => {
                        clamped += 1;
                        p = p.max(p_lo).min(p_hi);
                        r = r.max(r_lo).min(r_hi);
                    }
                }
            }
            grid.deposit(&mut weights, p, r, a.w)?;
        }
        Ok((ProjectedMeasure { weights }, clamped))
    }
}

/// `𝒜 ∘ T`: the minor population one step later when minors at node `k`
/// post `node_actions[k]` and the major bank `x0` posts `u0`.
pub fn mean_field_transition_with_actions<T: Scalar>(
    x0: BankState<T>,
    u0: T,
    mu: &ProjectedMeasure<T>,
    node_actions: &[T],
    grid: &GridSpec<T>,
    params: &MarketParams<T>,
) -> Result<ProjectedMeasure<T>> {
    let market = DecidedMarket::new(x0.p, u0, mu, node_actions, grid)?;
    Ok(market.next_measure(grid, params, SupportMode::Strict)?.0)
}

/// `𝒜 ∘ T` with the minor control given as a function of the node state.
pub fn mean_field_transition<T: Scalar>(
    x0: BankState<T>,
    u0: T,
    mu: &ProjectedMeasure<T>,
    minor_policy: impl Fn(BankState<T>) -> T,
    grid: &GridSpec<T>,
    params: &MarketParams<T>,
) -> Result<ProjectedMeasure<T>> {
    let actions: Vec<T> = grid.nodes().map(minor_policy).collect();
    mean_field_transition_with_actions(x0, u0, mu, &actions, grid, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid() -> GridSpec<f64> {
        GridSpec::default()
    }

    fn weight_at(mu: &ProjectedMeasure<f64>, g: &GridSpec<f64>, p: f64, r: f64) -> f64 {
        let k = g
            .nodes()
            .position(|x| (x.p - p).abs() < 1e-12 && (x.r - r).abs() < 1e-12)
            .unwrap();
        mu.weights()[k]
    }

    #[test]
    fn default_grid_has_96_nodes() {
        let g = grid();
        assert_eq!(g.len(), 96);
        assert_abs_diff_eq!(g.p_points[1], 0.24, epsilon = 1e-15);
        assert_abs_diff_eq!(g.r_points[1], 0.027, epsilon = 1e-15);
        g.validate_against(&MarketParams::default()).unwrap();
    }

    #[test]
    fn vertex_atom_is_fixed() {
        let g = grid();
        let mu = EmpiricalMeasure::new(vec![Atom::new(g.p_points[5], g.r_points[2], 1.0)]).unwrap();
        let out = project(&mu, &g).unwrap();
        assert_eq!(out.weights()[g.index(5, 2)], 1.0);
        assert_eq!(out.total(), 1.0);
    }

    #[test]
    fn atom_at_cell_center_splits_evenly() {
        let g = grid();
        let mu = EmpiricalMeasure::new(vec![Atom::new(0.42, 0.030, 1.0)]).unwrap();
        let out = project(&mu, &g).unwrap();
        // 0.030 sits halfway between rate nodes 0.029 and 0.031
        for (p, r) in [(0.40, 0.029), (0.40, 0.031), (0.44, 0.029), (0.44, 0.031)] {
            assert_abs_diff_eq!(weight_at(&out, &g, p, r), 0.25, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(out.total(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn bilinear_split_example() {
        let g = grid();
        let mu = EmpiricalMeasure::new(vec![Atom::new(0.41, 0.0295, 1.0)]).unwrap();
        let out = project(&mu, &g).unwrap();
        assert_abs_diff_eq!(weight_at(&out, &g, 0.40, 0.029), 0.5625, epsilon = 1e-12);
        assert_abs_diff_eq!(weight_at(&out, &g, 0.40, 0.031), 0.1875, epsilon = 1e-12);
        assert_abs_diff_eq!(weight_at(&out, &g, 0.44, 0.029), 0.1875, epsilon = 1e-12);
        assert_abs_diff_eq!(weight_at(&out, &g, 0.44, 0.031), 0.0625, epsilon = 1e-12);
    }

    #[test]
    fn out_of_support_atom_is_rejected() {
        let g = grid();
        let mu = EmpiricalMeasure::new(vec![Atom::new(0.81, 0.03, 1.0)]).unwrap();
        assert!(matches!(project(&mu, &g), Err(Error::OutOfSupport { .. })));
        let mu = EmpiricalMeasure::new(vec![Atom::new(0.5, 0.024, 1.0)]).unwrap();
        assert!(matches!(project(&mu, &g), Err(Error::OutOfSupport { .. })));
    }

    #[test]
    fn invalid_measures_are_rejected() {
        assert!(ProjectedMeasure::new(vec![0.5, 0.6]).is_err());
        assert!(ProjectedMeasure::new(vec![1.5, -0.5]).is_err());
        assert!(EmpiricalMeasure::new(vec![Atom::new(0.5, 0.03, 0.5)]).is_err());
    }

    #[test]
    fn aggregate_mass_examples() {
        let g = grid();
        let mu = ProjectedMeasure::dirac(96, g.index(7, 3));
        assert_abs_diff_eq!(aggregate_minor_mass(&mu, &g), 0.48, epsilon = 1e-15);
        let mu = ProjectedMeasure::<f64>::uniform(96);
        assert_abs_diff_eq!(aggregate_minor_mass(&mu, &g), 0.50, epsilon = 1e-14);
    }

    #[test]
    fn uniform_box_matches_hat_integrals() {
        let g = grid();
        let mu = ProjectedMeasure::uniform_box(&g, (0.40, 0.60), (0.025, 0.035)).unwrap();
        assert_abs_diff_eq!(mu.total(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(aggregate_minor_mass(&mu, &g), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(mu.mean_rate(&g), 0.030, epsilon = 1e-14);
        // end nodes carry half the mass of interior nodes
        assert_abs_diff_eq!(weight_at(&mu, &g, 0.40, 0.025), 0.01, epsilon = 1e-14);
        assert_abs_diff_eq!(weight_at(&mu, &g, 0.48, 0.029), 0.04, epsilon = 1e-14);
        assert_eq!(weight_at(&mu, &g, 0.36, 0.029), 0.0);
    }

    #[test]
    fn transition_with_equal_rates_is_identity() {
        let g = grid();
        let mu = ProjectedMeasure::uniform_box(&g, (0.40, 0.60), (0.029, 0.029)).unwrap();
        let out = mean_field_transition(BankState::new(0.5, 0.029), 0.029, &mu, |x| x.r, &g, &MarketParams::default())
            .unwrap();
        assert_eq!(out, mu);
    }

    #[test]
    fn forced_rate_puts_all_mass_on_one_column() {
        let g = grid();
        let mu = ProjectedMeasure::uniform_box(&g, (0.40, 0.60), (0.025, 0.035)).unwrap();
        let out = mean_field_transition(BankState::new(0.5, 0.03), 0.025, &mu, |_| 0.025, &g, &MarketParams::default())
            .unwrap();
        for (k, w) in out.weights().iter().enumerate() {
            if g.node(k).r != 0.025 {
                assert_eq!(*w, 0.0);
            }
        }
        assert_abs_diff_eq!(out.total(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn single_column_shift_by_hand() {
        // one atom at (0.48, 0.029) posting 0.031 against a major at 0.029 holding 0.52:
        // gain from major = 5 * (0.031 - 0.029 - 0.001) * 0.52 = 0.0026, no other minors.
        let g = grid();
        let params = MarketParams::default();
        let mu = ProjectedMeasure::dirac(96, g.index(7, 2));
        let out = mean_field_transition(BankState::new(0.52, 0.029), 0.029, &mu, |_| 0.031, &g, &params).unwrap();
        let p_new = 0.48 + 0.0026;
        let a = (p_new - 0.48) / 0.04;
        assert_abs_diff_eq!(weight_at(&out, &g, 0.48, 0.031), 1.0 - a, epsilon = 1e-12);
        assert_abs_diff_eq!(weight_at(&out, &g, 0.52, 0.031), a, epsilon = 1e-12);
        assert_abs_diff_eq!(out.total(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn transition_conserves_total_share() {
        let g = grid();
        let params = MarketParams::default();
        let mu = ProjectedMeasure::uniform_box(&g, (0.40, 0.60), (0.025, 0.035)).unwrap();
        let x0 = BankState::new(1.0 - aggregate_minor_mass(&mu, &g), 0.03);
        let actions: Vec<f64> = g.nodes().map(|x| if x.p < 0.5 { 0.035 } else { 0.025 }).collect();
        let market = DecidedMarket::new(x0.p, 0.028, &mu, &actions, &g).unwrap();
        let x1 = market.next_major(&params);
        let (mu1, clamped) = market.next_measure(&g, &params, SupportMode::Strict).unwrap();
        assert_eq!(clamped, 0);
        let before = x0.p + aggregate_minor_mass(&mu, &g);
        let after = x1.p + aggregate_minor_mass(&mu1, &g);
        assert!((before - after).abs() < 1e-12, "{before} vs {after}");
    }

    #[test]
    fn clamp_mode_counts_clamped_atoms() {
        let g = grid();
        let params = MarketParams::default();
        let mu = ProjectedMeasure::dirac(96, g.index(0, 5));
        // node at the lower proportion bound loses clients to a higher-paying major
        let market = DecidedMarket::new(0.8, 0.035, &mu, &[0.025; 96], &g).unwrap();
        assert!(market.next_measure(&g, &params, SupportMode::Strict).is_err());
        let (out, clamped) = market.next_measure(&g, &params, SupportMode::Clamp).unwrap();
        assert_eq!(clamped, 1);
        assert_eq!(out.weights()[g.index(0, 0)], 1.0);
    }

    fn empirical() -> impl Strategy<Value = EmpiricalMeasure<f64>> {
        prop::collection::vec((0.2..=0.8f64, 0.025..=0.035f64, 0.01..1.0f64), 1..20).prop_map(|v| {
            let total: f64 = v.iter().map(|a| a.2).sum();
            EmpiricalMeasure::new(v.into_iter().map(|(p, r, w)| Atom::new(p, r, w / total)).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn projection_preserves_mass_and_first_moments(mu in empirical()) {
            let g = grid();
            let out = project(&mu, &g).unwrap();
            let mass: f64 = mu.atoms().iter().map(|a| a.w).sum();
            let ep: f64 = mu.atoms().iter().map(|a| a.w * a.p).sum();
            let er: f64 = mu.atoms().iter().map(|a| a.w * a.r).sum();
            prop_assert!((out.total() - mass).abs() < 1e-12);
            prop_assert!((aggregate_minor_mass(&out, &g) - ep).abs() < 1e-12);
            prop_assert!((out.mean_rate(&g) - er).abs() < 1e-12);
            prop_assert!(out.weights().iter().all(|w| *w >= 0.0));
        }

        #[test]
        fn projection_is_identity_on_grid_measures(raw in prop::collection::vec(0.0..1.0f64, 96)) {
            let g = grid();
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let atoms = w.iter().enumerate().map(|(k, &w)| { let x = g.node(k); Atom::new(x.p, x.r, w) }).collect();
            let out = project(&EmpiricalMeasure::new(atoms).unwrap(), &g).unwrap();
            prop_assert_eq!(out.weights(), &w[..]);
        }

        #[test]
        fn transition_conserves_total_share_for_random_decisions(
            raw in prop::collection::vec(0.0..1.0f64, 96),
            picks in prop::collection::vec(0usize..11, 96),
            u0 in 0usize..11,
        ) {
            let g = grid();
            let params = MarketParams::default();
            let rates = crate::market::linspace(0.025, 0.035, 11);
            let inner: Vec<f64> = (0..96)
                .map(|k| { let x = g.node(k); if (0.4..=0.6).contains(&x.p) { raw[k] } else { 0.0 } })
                .collect();
            let total: f64 = inner.iter().sum();
            prop_assume!(total > 0.0);
            let mu = ProjectedMeasure::new(inner.iter().map(|w| w / total).collect()).unwrap();
            let x0 = BankState::new(1.0 - aggregate_minor_mass(&mu, &g), 0.03);
            let actions: Vec<f64> = picks.iter().map(|&k| rates[k]).collect();
            let market = DecidedMarket::new(x0.p, rates[u0], &mu, &actions, &g).unwrap();
            let x1 = market.next_major(&params);
            let (mu1, clamped) = market.next_measure(&g, &params, SupportMode::Strict).unwrap();
            prop_assert_eq!(clamped, 0);
            let before = x0.p + aggregate_minor_mass(&mu, &g);
            let after = x1.p + aggregate_minor_mass(&mu1, &g);
            prop_assert!((before - after).abs() < 1e-12, "{} vs {}", before, after);
            prop_assert!((mu1.total() - 1.0).abs() < 1e-12);
        }
    }
}
