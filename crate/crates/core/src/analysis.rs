//! Expected proximity-detection accuracy and charging period of wake-all
//! versus two-wave beaconing, integrated numerically over the position of
//! the mobile node.

use serde::Serialize;
use thiserror::Error;

use crate::energy::{HarvestModel, PowerProfile};
use crate::radio::{mean_rss, prob_stronger, prob_stronger_by, RadioParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("quadrature for {what} did not converge: change {change:e} at {intervals} intervals per cell")]
    Quadrature { what: String, change: f64, intervals: usize },
}

/// Anchors on a line at the centres of `r` cells of width `d_v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineDeployment {
    pub r: usize,
    pub d_v: f64,
}

impl LineDeployment {
    pub fn new(r: usize, d_v: f64) -> Result<Self, AnalysisError> {
        if r == 0 || !(d_v > 0.0) {
            return Err(AnalysisError::Parameter("need r >= 1 and d_v > 0".into()));
        }
        Ok(Self { r, d_v })
    }

    /// Position of anchor `i` (1-based).
    pub fn anchor(&self, i: usize) -> f64 {
        (i as f64 - 0.5) * self.d_v
    }

    /// Bounds of cell `i` (1-based).
    pub fn cell(&self, i: usize) -> (f64, f64) {
        ((i - 1) as f64 * self.d_v, i as f64 * self.d_v)
    }

    pub fn span(&self) -> f64 {
        self.r as f64 * self.d_v
    }

    /// Probability the mobile node lands in any one cell.
    pub fn omega(&self) -> f64 {
        1.0 / self.r as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TradeoffPoint {
    pub w: usize,
    pub e_a: f64,
    pub e_c: f64,
}

/// Probability that anchor `i` is received strongest at position `d`,
/// taken as the product of pairwise wins.
pub fn k_correct(i: usize, d: f64, dep: &LineDeployment, radio: &RadioParams) -> f64 {
    let pi = dep.anchor(i);
    (1..=dep.r)
        .filter(|&j| j != i)
        .map(|j| prob_stronger(pi, dep.anchor(j), d, radio))
        .product()
}

/// Probability that border `w` beats every anchor before it at `d`.
pub fn border_wins(w: usize, d: f64, dep: &LineDeployment, radio: &RadioParams) -> f64 {
    let pw = dep.anchor(w);
    (1..w).map(|j| prob_stronger(pw, dep.anchor(j), d, radio)).product()
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let x = a + k as f64 * h;
        s += if k % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    s * h / 3.0
}

pub const BASE_INTERVALS: usize = 64;
pub const TOLERANCE: f64 = 1e-4;
const MAX_INTERVALS: usize = 1 << 16;

/// Mean of `f` over the cell `[a, b]` by composite Simpson, split at the
/// centre where the integrand has a kink. Intervals double until two
/// successive estimates agree within [`TOLERANCE`].
pub fn cell_mean<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, what: &str) -> Result<f64, AnalysisError> {
    let mid = 0.5 * (a + b);
    let eval = |n: usize| (simpson(&f, a, mid, n / 2) + simpson(&f, mid, b, n / 2)) / (b - a);
    let mut n = BASE_INTERVALS;
    let mut prev = eval(n);
    loop {
        let next = eval(2 * n);
        let change = (next - prev).abs();
        if change < TOLERANCE {
            return Ok(next);
        }
        n *= 2;
        if n > MAX_INTERVALS {
            return Err(AnalysisError::Quadrature { what: what.to_string(), change, intervals: n });
        }
        prev = next;
    }
}

/// Mean of `k_correct(i, .)` over cell `i`.
pub fn cell_accuracy(i: usize, dep: &LineDeployment, radio: &RadioParams) -> Result<f64, AnalysisError> {
    let (a, b) = dep.cell(i);
    cell_mean(|d| k_correct(i, d, dep, radio), a, b, &format!("H_{i}"))
}

/// Mean of `border_wins(w, .)` over cell `i`.
pub fn cell_border_win(i: usize, w: usize, dep: &LineDeployment, radio: &RadioParams) -> Result<f64, AnalysisError> {
    let (a, b) = dep.cell(i);
    cell_mean(|d| border_wins(w, d, dep, radio), a, b, &format!("B_{i}^({w})"))
}

pub fn expected_pda_wake_all(dep: &LineDeployment, radio: &RadioParams) -> Result<f64, AnalysisError> {
    let mut sum = 0.0;
    for i in 1..=dep.r {
        sum += cell_accuracy(i, dep, radio)?;
    }
    Ok(dep.omega() * sum)
}

/// Accuracy and charging period with border `w`. `charge_times[i - 1]` is
/// the charging period needed when anchors `1..=i` must beacon.
pub fn expected_two_wave(
    dep: &LineDeployment,
    radio: &RadioParams,
    w: usize,
    charge_times: &[f64],
) -> Result<TradeoffPoint, AnalysisError> {
    if !(1..=dep.r).contains(&w) {
        return Err(AnalysisError::Parameter(format!("border {w} outside 1..={}", dep.r)));
    }
    if charge_times.len() != dep.r {
        return Err(AnalysisError::Parameter(format!("need {} charge times, got {}", dep.r, charge_times.len())));
    }
    let h: Vec<f64> = (1..=dep.r).map(|i| cell_accuracy(i, dep, radio)).collect::<Result<_, _>>()?;
    let c_w = charge_times[w - 1];
    let c_r = charge_times[dep.r - 1];
    if w == dep.r {
        return Ok(TradeoffPoint { w, e_a: dep.omega() * h.iter().sum::<f64>(), e_c: c_r });
    }
    let b: Vec<f64> = (1..=dep.r).map(|i| cell_border_win(i, w, dep, radio)).collect::<Result<_, _>>()?;
    let omega = dep.omega();
    let e_a = omega * (h[..w - 1].iter().sum::<f64>() + (w - 1..dep.r).map(|k| b[k] * h[k]).sum::<f64>());
    let e_c = omega * (c_w * b.iter().map(|x| 1.0 - x).sum::<f64>() + c_r * b.iter().sum::<f64>());
    Ok(TradeoffPoint { w, e_a, e_c })
}

/// Inputs of the border sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepParams {
    pub radio: RadioParams,
    pub d_v: f64,
    pub harvest: HarvestModel,
    pub profile: PowerProfile,
    /// Listening time of one reply round, s.
    pub t_rx: f64,
    /// Position of the energy transmitter on the line, m.
    pub esa_position: f64,
}

impl SweepParams {
    /// Shadowing sigma 7 dB, exponent 3, reference distance 1 m, 1 m
    /// spacing, energy source at the line origin. Distances are not clamped
    /// to the reference distance.
    pub fn line_default() -> Self {
        Self {
            radio: RadioParams { sigma: 7.0, n: 3.0, d0: 1.0, min_distance: 0.01, ..Default::default() },
            d_v: 1.0,
            harvest: HarvestModel::default(),
            profile: PowerProfile::default(),
            t_rx: 0.60e-3,
            esa_position: 0.0,
        }
    }

    /// Charging period of anchor `i`, one reply round over its harvest.
    pub fn charge_times(&self, dep: &LineDeployment) -> Vec<f64> {
        let e_r = self.profile.reply_round_energy(self.t_rx);
        (1..=dep.r)
            .map(|i| e_r / self.harvest.power_extrapolated((dep.anchor(i) - self.esa_position).abs()))
            .collect()
    }
}

/// Border sweep `w = 1..=r` with charging periods normalized to their
/// maximum.
pub fn border_sweep(r: usize, params: &SweepParams) -> Result<Vec<TradeoffPoint>, AnalysisError> {
    if r < 2 {
        return Err(AnalysisError::Parameter("sweep needs r >= 2".into()));
    }
    let dep = LineDeployment::new(r, params.d_v)?;
    let c = params.charge_times(&dep);
    let mut pts: Vec<TradeoffPoint> =
        (1..=r).map(|w| expected_two_wave(&dep, &params.radio, w, &c)).collect::<Result<_, _>>()?;
    let max = pts.iter().map(|p| p.e_c).fold(f64::MIN, f64::max);
    for p in &mut pts {
        p.e_c /= max;
    }
    Ok(pts)
}

pub fn curves_to_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from("w,e_a,e_c_normalized\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.w, p.e_a, p.e_c));
    }
    out
}

/// Anchors anywhere in a `width x height` rectangle with the mobile node
/// uniform over it. Cells are the nearest-anchor regions.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneDeployment {
    pub anchors: Vec<[f64; 2]>,
    pub esa: [f64; 2],
    pub width: f64,
    pub height: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl PlaneDeployment {
    fn nearest(&self, p: [f64; 2]) -> usize {
        let mut best = 0;
        for (k, a) in self.anchors.iter().enumerate() {
            if dist(*a, p) < dist(self.anchors[best], p) {
                best = k;
            }
        }
        best
    }

    fn wins(&self, i: usize, j: usize, p: [f64; 2], radio: &RadioParams) -> f64 {
        let diff = mean_rss(dist(self.anchors[i], p), radio) - mean_rss(dist(self.anchors[j], p), radio);
        prob_stronger_by(diff, radio.sigma)
    }

    /// First wave: anchors harvesting at least as much as the weakest
    /// border anchor.
    pub fn first_wave(&self, borders: &[usize], harvest: &HarvestModel) -> Vec<usize> {
        let mu = |k: usize| harvest.power_extrapolated(dist(self.anchors[k], self.esa));
        let theta = borders.iter().map(|&b| mu(b)).fold(f64::INFINITY, f64::min);
        (0..self.anchors.len()).filter(|&k| mu(k) >= theta).collect()
    }
}

/// Two-dimensional counterpart of [`expected_two_wave`] with a set of
/// border anchors (0-based), integrated on a `grid x grid` midpoint lattice.
/// An empty border set means wake-all. `charge_times[k]` is the charging
/// period of anchor `k` alone; a wave costs the maximum over its members.
pub fn expected_two_wave_plane(
    dep: &PlaneDeployment,
    radio: &RadioParams,
    harvest: &HarvestModel,
    borders: &[usize],
    charge_times: &[f64],
    grid: usize,
) -> Result<TradeoffPoint, AnalysisError> {
    let n = dep.anchors.len();
    if n == 0 || grid == 0 || charge_times.len() != n || borders.iter().any(|&b| b >= n) {
        return Err(AnalysisError::Parameter("bad plane deployment inputs".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let first = if borders.is_empty() { all.clone() } else { dep.first_wave(borders, harvest) };
    let cost = |set: &[usize]| set.iter().map(|&k| charge_times[k]).fold(0.0, f64::max);
    let (c_first, c_all) = (cost(&first), cost(&all));
    // Per-cell means of the accuracy and border-win terms, combined as in
    // the line model.
    let mut sums = vec![(0usize, 0.0, 0.0); n];
    for gx in 0..grid {
        for gy in 0..grid {
            let p = [(gx as f64 + 0.5) * dep.width / grid as f64, (gy as f64 + 0.5) * dep.height / grid as f64];
            let i = dep.nearest(p);
            let k_i: f64 = (0..n).filter(|&j| j != i).map(|j| dep.wins(i, j, p, radio)).product();
            let b: f64 = borders
                .iter()
                .map(|&w| first.iter().filter(|&&j| j != w).map(|&j| dep.wins(w, j, p, radio)).product::<f64>())
                .sum::<f64>()
                .min(1.0);
            sums[i].0 += 1;
            sums[i].1 += k_i;
            sums[i].2 += b;
        }
    }
    let (mut acc, mut cp) = (0.0, 0.0);
    for (i, &(count, k_sum, b_sum)) in sums.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let (h, b) = (k_sum / count as f64, b_sum / count as f64);
        let weight = count as f64;
        if borders.is_empty() {
            acc += weight * h;
            cp += weight * c_all;
            continue;
        }
        let second_wave_cell = !first.contains(&i) || borders.contains(&i);
        acc += weight * if second_wave_cell { b * h } else { h };
        cp += weight * (c_first * (1.0 - b) + c_all * b);
    }
    let cells = (grid * grid) as f64;
    Ok(TradeoffPoint { w: borders.len(), e_a: acc / cells, e_c: cp / cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::radio::sample_rss;

    fn radio(sigma: f64) -> RadioParams {
        RadioParams { sigma, n: 3.0, d0: 1.0, min_distance: 0.01, ..Default::default() }
    }

    #[test]
    fn deterministic_channel_is_exact() {
        let dep = LineDeployment::new(4, 1.0).unwrap();
        let r = radio(0.0);
        assert_eq!(k_correct(2, 1.5, &dep, &r), 1.0);
        assert!((expected_pda_wake_all(&dep, &r).unwrap() - 1.0).abs() < 1e-3);
        let single = LineDeployment::new(1, 1.0).unwrap();
        assert_eq!(expected_pda_wake_all(&single, &radio(7.0)).unwrap(), 1.0);
    }

    #[test]
    fn midpoint_between_two_is_half() {
        let dep = LineDeployment::new(2, 1.0).unwrap();
        assert!((k_correct(1, 1.0, &dep, &radio(7.0)) - 0.5).abs() < 1e-12);
    }

    // Independent shadowing draws for every anchor, counting how often the
    // true anchor is individually stronger than each rival.
    #[test]
    fn k_correct_matches_sampled_products() {
        let dep = LineDeployment::new(4, 1.0).unwrap();
        let r = radio(7.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (i, d) in [(1, 0.3), (2, 1.2), (3, 2.5), (4, 3.9)] {
            let n = 40_000;
            let mut prod = 1.0;
            for j in (1..=4).filter(|&j| j != i) {
                let wins = (0..n)
                    .filter(|_| {
                        sample_rss((d - dep.anchor(i)).abs(), &r, &mut rng)
                            >= sample_rss((d - dep.anchor(j)).abs(), &r, &mut rng)
                    })
                    .count();
                prod *= wins as f64 / n as f64;
            }
            let k = k_correct(i, d, &dep, &r);
            assert!((k - prod).abs() < 0.02, "cell {i} at {d}: {k} vs {prod}");
        }
    }

    #[test]
    fn border_at_end_reduces_to_wake_all() {
        let dep = LineDeployment::new(4, 1.0).unwrap();
        let r = radio(7.0);
        let c = [1.0, 2.0, 3.0, 4.0];
        let p = expected_two_wave(&dep, &r, 4, &c).unwrap();
        assert_eq!(p.e_c, 4.0);
        assert!((p.e_a - expected_pda_wake_all(&dep, &r).unwrap()).abs() < 1e-12);
        assert!(expected_two_wave(&dep, &r, 0, &c).is_err());
        assert!(expected_two_wave(&dep, &r, 2, &c[..3]).is_err());
    }

    #[test]
    fn quadrature_converges() {
        let dep = LineDeployment::new(4, 1.0).unwrap();
        let r = radio(7.0);
        for i in 1..=4 {
            let (a, b) = dep.cell(i);
            let coarse = cell_accuracy(i, &dep, &r).unwrap();
            let f = |d: f64| k_correct(i, d, &dep, &r);
            let fine = (simpson(&f, a, 0.5 * (a + b), 4096) + simpson(&f, 0.5 * (a + b), b, 4096)) / (b - a);
            assert!((coarse - fine).abs() < 1e-4);
        }
        let err = cell_mean(|x: f64| (x - 0.3).abs().powf(-0.9), 0.0, 1.0, "spike").unwrap_err();
        assert!(matches!(err, AnalysisError::Quadrature { .. }));
    }

    #[test]
    fn sweep_normalized_to_one() {
        let pts = border_sweep(4, &SweepParams::line_default()).unwrap();
        assert_eq!(pts.len(), 4);
        let max = pts.iter().map(|p| p.e_c).fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert_eq!(pts[3].e_c, 1.0);
        let csv = curves_to_csv(&pts);
        assert!(csv.starts_with("w,e_a,e_c_normalized\n1,"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn ten_anchor_sweep_has_interior_dip() {
        let pts = border_sweep(10, &SweepParams::line_default()).unwrap();
        assert!(pts[9].e_a > pts[4].e_a);
    }

    #[test]
    fn plane_reduces_to_line() {
        let dep = LineDeployment::new(4, 1.0).unwrap();
        let r = radio(7.0);
        let sp = SweepParams::line_default();
        let c = sp.charge_times(&dep);
        let plane = PlaneDeployment {
            anchors: (1..=4).map(|i| [dep.anchor(i), 0.0]).collect(),
            esa: [0.0, 0.0],
            width: 4.0,
            height: 1e-9,
        };
        let line = expected_two_wave(&dep, &r, 2, &c).unwrap();
        let flat = expected_two_wave_plane(&plane, &r, &sp.harvest, &[1], &c, 400).unwrap();
        assert!((line.e_a - flat.e_a).abs() < 2e-3, "{line:?} {flat:?}");
        assert!((line.e_c - flat.e_c).abs() < 2e-3 * line.e_c);
        let all = expected_two_wave_plane(&plane, &r, &sp.harvest, &[], &c, 400).unwrap();
        assert!((all.e_a - expected_pda_wake_all(&dep, &r).unwrap()).abs() < 2e-3);
    }
}
