//! Coincidence timing analysis.
//!
//! Builds the histogram of time differences `t1 - t2` between the two
//! detectors' records, estimates the accidental-coincidence background from
//! the singles rates, and fits an exponentially modified Gaussian to a
//! coincidence peak to extract the flash decay constant, timing jitter, and
//! peak position.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::circuit::emg_pdf;
use crate::error::Error;
use crate::io::Provenance;
use crate::math::solve;
use crate::sim::EventRecord;

/// Histogram of pair time differences `t1 - t2`, with the singles counts
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceHistogram {
    window_start_ns: f64,
    bin_width_ns: f64,
    counts: Vec<u64>,
    n1: u64,
    n2: u64,
    total_time_s: Option<f64>,
}

impl CoincidenceHistogram {
    pub fn from_parts(
        window_start_ns: f64,
        bin_width_ns: f64,
        counts: Vec<u64>,
        n1: u64,
        n2: u64,
    ) -> Result<Self, Error> {
        if !window_start_ns.is_finite() {
            return Err(Error::Domain("window start must be finite".into()));
        }
        if !(bin_width_ns > 0.0) || !bin_width_ns.is_finite() {
            return Err(Error::Domain(format!(
                "bin width must be positive, got {bin_width_ns}"
            )));
        }
        if counts.is_empty() {
            return Err(Error::Domain("histogram has no bins".into()));
        }
        Ok(CoincidenceHistogram {
            window_start_ns,
            bin_width_ns,
            counts,
            n1,
            n2,
            total_time_s: None,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn bin_width_ns(&self) -> f64 {
        self.bin_width_ns
    }

    /// Covered range; the end is the start plus a whole number of bins.
    pub fn window_ns(&self) -> (f64, f64) {
        (
            self.window_start_ns,
            self.window_start_ns + self.counts.len() as f64 * self.bin_width_ns,
        )
    }

    pub fn bin_start_ns(&self, index: usize) -> f64 {
        self.window_start_ns + index as f64 * self.bin_width_ns
    }

    pub fn bin_center_ns(&self, index: usize) -> f64 {
        self.bin_start_ns(index) + 0.5 * self.bin_width_ns
    }

    /// Singles counts that entered the histogram.
    pub fn singles(&self) -> (u64, u64) {
        (self.n1, self.n2)
    }

    pub fn set_total_time(&mut self, seconds: f64) -> Result<(), Error> {
        if !(seconds > 0.0) || !seconds.is_finite() {
            return Err(Error::Domain(format!(
                "total time must be positive, got {seconds} s"
            )));
        }
        self.total_time_s = Some(seconds);
        Ok(())
    }

    pub fn total_time_s(&self) -> Option<f64> {
        self.total_time_s
    }

    pub fn rate1_cps(&self) -> Option<f64> {
        self.total_time_s.map(|t| self.n1 as f64 / t)
    }

    pub fn rate2_cps(&self) -> Option<f64> {
        self.total_time_s.map(|t| self.n2 as f64 / t)
    }

    fn snap(&self, edge_ns: f64) -> usize {
        let i = ((edge_ns - self.window_start_ns) / self.bin_width_ns).round();
        (i.max(0.0) as usize).min(self.counts.len())
    }

    /// Sum of counts between the bin edges nearest `lo` and `hi`.
    pub fn counts_in_window(&self, lo_ns: f64, hi_ns: f64) -> Result<u64, Error> {
        let (i_lo, i_hi) = (self.snap(lo_ns), self.snap(hi_ns));
        if i_hi <= i_lo {
            return Err(Error::Domain(format!(
                "empty count window {lo_ns}..{hi_ns} ns"
            )));
        }
        Ok(self.counts[i_lo..i_hi].iter().sum())
    }

    /// Expected accidental pairs in the same snapped window, from the singles
    /// rates. Requires the total time to be set.
    pub fn expected_accidentals(&self, lo_ns: f64, hi_ns: f64) -> Result<f64, Error> {
        let t = self
            .total_time_s
            .ok_or_else(|| Error::Domain("total time is not set on this histogram".into()))?;
        let (i_lo, i_hi) = (self.snap(lo_ns), self.snap(hi_ns));
        if i_hi <= i_lo {
            return Err(Error::Domain(format!(
                "empty count window {lo_ns}..{hi_ns} ns"
            )));
        }
        let width_ns = (i_hi - i_lo) as f64 * self.bin_width_ns;
        let (r1, r2) = (self.rate1_cps().unwrap(), self.rate2_cps().unwrap());
        Ok(accidental_rate(r1, r2, width_ns)? * t)
    }

    /// Counts in the window minus the accidental expectation.
    pub fn net_counts_in_window(&self, lo_ns: f64, hi_ns: f64) -> Result<f64, Error> {
        let raw = self.counts_in_window(lo_ns, hi_ns)? as f64;
        Ok(raw - self.expected_accidentals(lo_ns, hi_ns)?)
    }
}

/// Histograms all pair differences `t1 - t2` falling in `window`. The window
/// end is rounded up to a whole number of bins. Events must be sorted.
pub fn build_histogram(
    events: &[EventRecord],
    bin_width_ns: f64,
    window_ns: (f64, f64),
) -> Result<CoincidenceHistogram, Error> {
    if !(bin_width_ns > 0.0) || !bin_width_ns.is_finite() {
        return Err(Error::Domain(format!(
            "bin width must be positive, got {bin_width_ns}"
        )));
    }
    let (lo, hi) = window_ns;
    if !lo.is_finite() || !hi.is_finite() || hi <= lo {
        return Err(Error::Domain(format!("bad histogram window {lo}..{hi} ns")));
    }
    let n_bins = ((hi - lo) / bin_width_ns - 1e-9).ceil().max(1.0) as usize;
    if n_bins > 50_000_000 {
        return Err(Error::Domain(format!(
            "window and bin width give {n_bins} bins"
        )));
    }
    for (i, pair) in events.windows(2).enumerate() {
        if pair[1].timestamp_ns < pair[0].timestamp_ns {
            return Err(Error::UnsortedEvents { index: i + 1 });
        }
    }
    let t1s: Vec<f64> = events
        .iter()
        .filter(|e| e.detector_id == 1)
        .map(|e| e.timestamp_ns)
        .collect();
    let t2s: Vec<f64> = events
        .iter()
        .filter(|e| e.detector_id == 2)
        .map(|e| e.timestamp_ns)
        .collect();
    let end = lo + n_bins as f64 * bin_width_ns;
    let mut counts = vec![0u64; n_bins];
    let mut lo_idx = 0usize;
    let mut hi_idx = 0usize;
    for &t2 in &t2s {
        while lo_idx < t1s.len() && t1s[lo_idx] < t2 + lo {
            lo_idx += 1;
        }
        hi_idx = hi_idx.max(lo_idx);
        while hi_idx < t1s.len() && t1s[hi_idx] < t2 + end {
            hi_idx += 1;
        }
        for &t1 in &t1s[lo_idx..hi_idx] {
            let k = ((t1 - t2 - lo) / bin_width_ns) as usize;
            counts[k.min(n_bins - 1)] += 1;
        }
    }
    CoincidenceHistogram::from_parts(lo, bin_width_ns, counts, t1s.len() as u64, t2s.len() as u64)
}

/// Accidental-coincidence rate `r1 * r2 * window` (per second) for
/// uncorrelated streams, with the window given in ns.
pub fn accidental_rate(rate1_cps: f64, rate2_cps: f64, window_ns: f64) -> Result<f64, Error> {
    for (v, what) in [
        (rate1_cps, "rate1"),
        (rate2_cps, "rate2"),
        (window_ns, "window"),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Domain(format!(
                "{what} must be finite and nonnegative, got {v}"
            )));
        }
    }
    Ok(rate1_cps * rate2_cps * window_ns * 1e-9)
}

/// Photons per steradian per breakdown, from net coincidences, the number of
/// breakdowns of the flashing detector, and the collecting solid angle.
pub fn differential_intensity(
    net_counts: f64,
    breakdowns: f64,
    solid_angle_sr: f64,
) -> Result<f64, Error> {
    if !(breakdowns > 0.0) || !breakdowns.is_finite() {
        return Err(Error::Domain(format!(
            "breakdown count must be positive, got {breakdowns}"
        )));
    }
    if !(solid_angle_sr > 0.0) || solid_angle_sr > 4.0 * std::f64::consts::PI {
        return Err(Error::Domain(format!(
            "solid angle {solid_angle_sr} sr outside (0, 4 pi]"
        )));
    }
    if !net_counts.is_finite() {
        return Err(Error::Domain("net counts must be finite".into()));
    }
    Ok(net_counts / (breakdowns * solid_angle_sr))
}

/// Which way the fitted peak's exponential tail points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakSide {
    /// Tail toward earlier time differences (mirrored profile).
    Left,
    /// Tail toward later time differences.
    Right,
}

/// Peak model: `A * bin_width * emg(s * (x - t0); tau, sigma) + B`, where
/// `s` is -1 for a left-tailed peak and +1 for a right-tailed one. `A` is
/// the total count in the peak, `B` a flat background per bin. Parameters
/// maximize the Poisson likelihood of the binned counts, so sparse and
/// empty tail bins are handled without bias; errors come from the expected
/// information at the optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgFit {
    pub side: PeakSide,
    pub amplitude: f64,
    pub amplitude_err: f64,
    pub baseline_per_bin: f64,
    pub baseline_err: f64,
    pub t0_ns: f64,
    pub t0_err_ns: f64,
    pub tau_ns: f64,
    pub tau_err_ns: f64,
    pub sigma_ns: f64,
    pub sigma_err_ns: f64,
    /// Poisson deviance of the fit, chi-square distributed for `dof`
    /// degrees of freedom when the model describes the data.
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
}

impl EmgFit {
    /// Model prediction for a bin centered at `x_ns`.
    pub fn predict(&self, x_ns: f64, bin_width_ns: f64) -> f64 {
        let s = match self.side {
            PeakSide::Left => -1.0,
            PeakSide::Right => 1.0,
        };
        self.amplitude
            * bin_width_ns
            * emg_pdf(s * (x_ns - self.t0_ns), 0.0, self.tau_ns, self.sigma_ns)
            + self.baseline_per_bin
    }
}

/// Background level is kept strictly positive so the Poisson likelihood
/// stays finite when a stray count lands where the peak model is zero.
const BASELINE_FLOOR: f64 = 1e-12;

struct FitData {
    x: Vec<f64>,
    c: Vec<f64>,
    bin_width: f64,
    sign: f64,
}

impl FitData {
    fn basis(&self, theta: [f64; 3]) -> Vec<f64> {
        let [t0, tau, sigma] = theta;
        self.x
            .iter()
            .map(|&x| self.bin_width * emg_pdf(self.sign * (x - t0), 0.0, tau.abs(), sigma.abs()))
            .collect()
    }

    /// Unweighted linear solve for amplitude and background given the shape;
    /// only used to seed the likelihood refinement, so both are clamped to
    /// the feasible region.
    fn seed_linear(&self, phi: &[f64]) -> (f64, f64) {
        let (mut s_pp, mut s_p1, mut s_pc, mut s_1c) = (0.0, 0.0, 0.0, 0.0);
        let s_11 = phi.len() as f64;
        for (&p, &c) in phi.iter().zip(&self.c) {
            s_pp += p * p;
            s_p1 += p;
            s_pc += p * c;
            s_1c += c;
        }
        let det = s_pp * s_11 - s_p1 * s_p1;
        let (mut a, mut b) = if det.abs() > 1e-300 {
            (
                (s_pc * s_11 - s_1c * s_p1) / det,
                (s_pp * s_1c - s_p1 * s_pc) / det,
            )
        } else {
            (0.0, 0.0)
        };
        if b < 0.0 || !b.is_finite() {
            b = 0.0;
            a = if s_pp > 0.0 { s_pc / s_pp } else { 0.0 };
        }
        (a.max(0.0), b.max(BASELINE_FLOOR))
    }

    /// Poisson deviance of the model `a * phi + b` against the counts;
    /// chi-square distributed when the model holds, and the quantity the
    /// fit minimizes.
    fn deviance(&self, phi: &[f64], a: f64, b: f64) -> f64 {
        let mut acc = 0.0;
        for (&p, &c) in phi.iter().zip(&self.c) {
            let m = a * p + b;
            if c > 0.0 {
                if m <= 0.0 {
                    return f64::INFINITY;
                }
                acc += 2.0 * (m - c + c * (c / m).ln());
            } else {
                acc += 2.0 * m;
            }
        }
        acc
    }

    /// Maximizes the likelihood over amplitude and background for a fixed
    /// shape. The deviance is convex in both, so damped Newton from the
    /// least-squares seed converges; iterates are projected back onto
    /// `a >= 0`, `b >= floor`.
    fn refine_linear(&self, phi: &[f64], seed: (f64, f64)) -> (f64, f64) {
        let (mut a, mut b) = seed;
        if self.c.iter().all(|&c| c == 0.0) {
            return (0.0, BASELINE_FLOOR);
        }
        let mut f = self.deviance(phi, a, b);
        for _ in 0..60 {
            let (mut g_a, mut g_b) = (0.0, 0.0);
            let (mut h_aa, mut h_ab, mut h_bb) = (0.0, 0.0, 0.0);
            for (&p, &c) in phi.iter().zip(&self.c) {
                let m = (a * p + b).max(BASELINE_FLOOR);
                let pull = 1.0 - c / m;
                g_a += pull * p;
                g_b += pull;
                let curv = c / (m * m);
                h_aa += curv * p * p;
                h_ab += curv * p;
                h_bb += curv;
            }
            let det = h_aa * h_bb - h_ab * h_ab;
            if !det.is_finite() || det.abs() < 1e-300 {
                break;
            }
            let da = (h_bb * g_a - h_ab * g_b) / det;
            let db = (h_aa * g_b - h_ab * g_a) / det;
            let mut scale = 1.0;
            let mut improved = false;
            for _ in 0..25 {
                let a_t = (a - scale * da).max(0.0);
                let b_t = (b - scale * db).max(BASELINE_FLOOR);
                let f_t = self.deviance(phi, a_t, b_t);
                if f_t <= f {
                    let done = (a_t - a).abs() <= 1e-10 * (a.abs() + 1.0)
                        && (b_t - b).abs() <= 1e-10 * (b.abs() + 1.0);
                    a = a_t;
                    b = b_t;
                    f = f_t;
                    improved = true;
                    if done {
                        return (a, b);
                    }
                    break;
                }
                scale *= 0.5;
            }
            if !improved {
                break;
            }
        }
        (a, b)
    }

    fn profiled_deviance(&self, theta: [f64; 3]) -> (f64, f64, f64) {
        let phi = self.basis(theta);
        let seed = self.seed_linear(&phi);
        let (a, b) = self.refine_linear(&phi, seed);
        (self.deviance(&phi, a, b), a, b)
    }
}

fn diff_step(v: f64) -> f64 {
    1e-5 * v.abs().max(0.1)
}

/// Fits one coincidence peak. `region` restricts the fit to a sub-range of
/// the histogram; when omitted, the peak nearest the requested side among
/// the prominent local maxima is isolated automatically.
pub fn fit_emg_peak(
    hist: &CoincidenceHistogram,
    side: PeakSide,
    region: Option<(f64, f64)>,
) -> Result<EmgFit, Error> {
    let (w_lo, w_hi) = hist.window_ns();
    let (lo, hi) = match region {
        Some((lo, hi)) => {
            if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                return Err(Error::Domain(format!("bad fit region {lo}..{hi} ns")));
            }
            (lo.max(w_lo), hi.min(w_hi))
        }
        None => auto_region(hist, side),
    };
    let i_lo = hist.snap(lo);
    let i_hi = hist.snap(hi);
    if i_hi.saturating_sub(i_lo) < 8 {
        return Err(Error::Domain(format!(
            "fit region {lo}..{hi} ns covers fewer than 8 bins"
        )));
    }

    let c: Vec<f64> = hist.counts[i_lo..i_hi].iter().map(|&v| v as f64).collect();
    let x: Vec<f64> = (i_lo..i_hi).map(|i| hist.bin_center_ns(i)).collect();
    let sign = match side {
        PeakSide::Left => -1.0,
        PeakSide::Right => 1.0,
    };
    let data = FitData {
        x,
        c,
        bin_width: hist.bin_width_ns,
        sign,
    };

    let mut theta = initial_guess(&data, side);
    let (mut dev, mut a, mut b) = data.profiled_deviance(theta);
    let mut lambda = 1e-3;
    let max_iterations = 200;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        iterations += 1;
        // numeric jacobian of the profiled model
        let n = data.x.len();
        let mut jac = vec![[0.0f64; 3]; n];
        for j in 0..3 {
            let h = diff_step(theta[j]);
            let mut tp = theta;
            tp[j] += h;
            let mut tm = theta;
            tm[j] -= h;
            let (pp, pa, pb) = {
                let phi = data.basis(tp);
                let seed = data.seed_linear(&phi);
                let (a, b) = data.refine_linear(&phi, seed);
                (phi, a, b)
            };
            let (mp, ma, mb) = {
                let phi = data.basis(tm);
                let seed = data.seed_linear(&phi);
                let (a, b) = data.refine_linear(&phi, seed);
                (phi, a, b)
            };
            for i in 0..n {
                let m_hi = pa * pp[i] + pb;
                let m_lo = ma * mp[i] + mb;
                jac[i][j] = (m_hi - m_lo) / (2.0 * h);
            }
        }
        // Fisher scoring step: expected-information weights 1 / model
        let phi = data.basis(theta);
        let mut gram = vec![vec![0.0f64; 3]; 3];
        let mut grad = vec![0.0f64; 3];
        for i in 0..n {
            let m = (a * phi[i] + b).max(BASELINE_FLOOR);
            let w = 1.0 / m;
            let r = data.c[i] - m;
            for j in 0..3 {
                grad[j] += w * jac[i][j] * r;
                for k in 0..3 {
                    gram[j][k] += w * jac[i][j] * jac[i][k];
                }
            }
        }
        let mut stepped = false;
        while lambda < 1e13 {
            let mut damped = gram.clone();
            for j in 0..3 {
                damped[j][j] += lambda * gram[j][j].max(1e-12);
            }
            if let Some(delta) = solve(damped, grad.clone()) {
                let mut trial = theta;
                for j in 0..3 {
                    trial[j] += delta[j];
                }
                trial[1] = trial[1].abs();
                trial[2] = trial[2].abs();
                let (dev_t, a_t, b_t) = data.profiled_deviance(trial);
                if dev_t.is_finite() && dev_t <= dev {
                    let rel_step = (0..3)
                        .map(|j| (delta[j] / theta[j].abs().max(1e-3)).abs())
                        .fold(0.0f64, f64::max);
                    theta = trial;
                    dev = dev_t;
                    a = a_t;
                    b = b_t;
                    lambda = (lambda / 3.0).max(1e-12);
                    stepped = true;
                    if rel_step < 1e-8 {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !stepped {
            // no improving direction at maximum damping: a stationary point
            converged = true;
        }
        if converged {
            break;
        }
    }

    let fit = finish_fit(&data, side, theta, a, b, dev, iterations);
    if converged {
        Ok(fit)
    } else {
        Err(Error::FitDidNotConverge {
            best: Box::new(fit),
            iterations,
        })
    }
}

/// Picks the fit range for the requested side. Prominent smoothed local
/// maxima are clustered by valley depth (two bumps with no deep valley
/// between them count as one peak); distinct peaks split the window at the
/// deepest point between them, and the leftmost (rightmost) peak wins for a
/// left (right) fit.
fn auto_region(hist: &CoincidenceHistogram, side: PeakSide) -> (f64, f64) {
    let n = hist.counts.len();
    let (w_lo, w_hi) = hist.window_ns();
    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 3).min(n);
            hist.counts[lo..hi].iter().sum::<u64>() as f64 / (hi - lo) as f64
        })
        .collect();
    let mut sorted = smoothed.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let floor = sorted[n / 4];
    let peak = sorted[n - 1];
    let threshold = floor + 0.12 * (peak - floor);
    let valley_between = |a: usize, b: usize| -> f64 {
        smoothed[a..=b].iter().fold(f64::INFINITY, |m, &v| m.min(v))
    };
    let mut candidates: Vec<usize> = Vec::new();
    for i in 1..n.saturating_sub(1) {
        if smoothed[i] >= threshold
            && smoothed[i] >= smoothed[i - 1]
            && smoothed[i] > smoothed[i + 1]
        {
            match candidates.last() {
                Some(&prev) => {
                    let lower = smoothed[prev].min(smoothed[i]);
                    if valley_between(prev, i) < floor + 0.5 * (lower - floor) {
                        candidates.push(i);
                    } else if smoothed[i] > smoothed[prev] {
                        *candidates.last_mut().unwrap() = i;
                    }
                }
                None => candidates.push(i),
            }
        }
    }
    if candidates.len() < 2 {
        return (w_lo, w_hi);
    }
    let split_at = |a: usize, b: usize| -> f64 {
        let rel = smoothed[a..=b]
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        hist.bin_center_ns(a + rel)
    };
    match side {
        PeakSide::Left => (w_lo, split_at(candidates[0], candidates[1])),
        PeakSide::Right => {
            let k = candidates.len();
            (split_at(candidates[k - 2], candidates[k - 1]), w_hi)
        }
    }
}

fn initial_guess(data: &FitData, side: PeakSide) -> [f64; 3] {
    let n = data.c.len();
    let mut sorted = data.c.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let b0 = sorted[n / 4];
    let peak_idx = data
        .c
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let peak_height = (data.c[peak_idx] - b0).max(1.0);
    let width = data.bin_width;

    // decay constant from the log slope on the tail side
    let decay_dir: isize = if side == PeakSide::Right { 1 } else { -1 };
    let mut tau0 = 5.0 * width;
    let mut ys = Vec::new();
    for k in 0..10isize {
        let idx = peak_idx as isize + decay_dir * (2 + k);
        if idx < 0 || idx as usize >= n {
            break;
        }
        let d = (2 + k) as f64 * width;
        ys.push((d, ((data.c[idx as usize] - b0).max(0.5)).ln()));
    }
    if ys.len() >= 3 {
        let m = ys.len() as f64;
        let sx: f64 = ys.iter().map(|p| p.0).sum();
        let sy: f64 = ys.iter().map(|p| p.1).sum();
        let sxx: f64 = ys.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = ys.iter().map(|p| p.0 * p.1).sum();
        let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        if slope < -1e-9 {
            tau0 = (-1.0 / slope).clamp(0.5 * width, (n as f64) * width);
        }
    }

    // jitter from the 10-90% rise distance on the steep side
    let rise_dir = -decay_dir;
    let mut x10 = None;
    let mut x90 = None;
    for k in 1..n as isize {
        let idx = peak_idx as isize + rise_dir * k;
        if idx < 0 || idx as usize >= n {
            break;
        }
        let level = (data.c[idx as usize] - b0) / peak_height;
        if x90.is_none() && level < 0.9 {
            x90 = Some(k as f64 * width);
        }
        if level < 0.1 {
            x10 = Some(k as f64 * width);
            break;
        }
    }
    let sigma0 = match (x10, x90) {
        (Some(a), Some(b)) if a > b => ((a - b) / 2.563).clamp(0.25 * width, 5.0 * tau0 + width),
        _ => width,
    };

    [data.x[peak_idx], tau0, sigma0]
}

fn finish_fit(
    data: &FitData,
    side: PeakSide,
    theta: [f64; 3],
    a: f64,
    b: f64,
    chi2: f64,
    iterations: usize,
) -> EmgFit {
    let n = data.x.len();
    let phi = data.basis(theta);
    // full jacobian over (A, B, t0, tau, sigma) for the error estimate
    let mut jac = vec![[0.0f64; 5]; n];
    for i in 0..n {
        jac[i][0] = phi[i];
        jac[i][1] = 1.0;
    }
    for j in 0..3 {
        let h = diff_step(theta[j]);
        let mut tp = theta;
        tp[j] += h;
        let mut tm = theta;
        tm[j] -= h;
        let php = data.basis(tp);
        let phm = data.basis(tm);
        for i in 0..n {
            jac[i][2 + j] = a * (php[i] - phm[i]) / (2.0 * h);
        }
    }
    // expected Fisher information of the Poisson likelihood
    let mut gram = vec![vec![0.0f64; 5]; 5];
    for i in 0..n {
        let w = 1.0 / (a * phi[i] + b).max(BASELINE_FLOOR);
        for j in 0..5 {
            for k in 0..5 {
                gram[j][k] += w * jac[i][j] * jac[i][k];
            }
        }
    }
    let mut errs = [f64::NAN; 5];
    // invert by solving against unit vectors; NaN errors flag degeneracy
    let mut columns = Vec::with_capacity(5);
    for j in 0..5 {
        let mut e = vec![0.0; 5];
        e[j] = 1.0;
        columns.push(solve(gram.clone(), e));
    }
    if columns.iter().all(|c| c.is_some()) {
        for j in 0..5 {
            let var = columns[j].as_ref().unwrap()[j];
            errs[j] = if var >= 0.0 { var.sqrt() } else { f64::NAN };
        }
    }
    EmgFit {
        side,
        amplitude: a,
        amplitude_err: errs[0],
        baseline_per_bin: b,
        baseline_err: errs[1],
        t0_ns: theta[0],
        t0_err_ns: errs[2],
        tau_ns: theta[1].abs(),
        tau_err_ns: errs[3],
        sigma_ns: theta[2].abs(),
        sigma_err_ns: errs[4],
        chi2,
        dof: n.saturating_sub(5),
        iterations,
    }
}

pub const HISTOGRAM_HEADER: &str = "bin_start_ns,count";

/// Writes the histogram with its metadata and provenance comment headers.
pub fn write_histogram<W: Write>(
    mut w: W,
    hist: &CoincidenceHistogram,
    provenance: &Provenance,
) -> std::io::Result<()> {
    provenance.write(&mut w)?;
    let (lo, hi) = hist.window_ns();
    writeln!(w, "# window_start_ns = {lo}")?;
    writeln!(w, "# window_end_ns = {hi}")?;
    writeln!(w, "# bin_width_ns = {}", hist.bin_width_ns)?;
    writeln!(w, "# n1 = {}", hist.n1)?;
    writeln!(w, "# n2 = {}", hist.n2)?;
    if let Some(t) = hist.total_time_s {
        writeln!(w, "# total_time_s = {t}")?;
        writeln!(w, "# rate1_cps = {}", hist.rate1_cps().unwrap())?;
        writeln!(w, "# rate2_cps = {}", hist.rate2_cps().unwrap())?;
    }
    writeln!(w, "{HISTOGRAM_HEADER}")?;
    for (i, &c) in hist.counts.iter().enumerate() {
        writeln!(w, "{:.6},{c}", hist.bin_start_ns(i))?;
    }
    Ok(())
}

/// Reads a histogram written by `write_histogram`.
pub fn read_histogram(path: &Path) -> Result<(CoincidenceHistogram, Provenance), Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let label = path.display().to_string();
    let mut provenance = Provenance::default();
    let mut rows: Vec<(f64, u64)> = Vec::new();
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            path: label.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            provenance.parse_comment(trimmed);
            continue;
        }
        if !saw_header {
            if trimmed != HISTOGRAM_HEADER {
                return Err(Error::Parse {
                    path: label,
                    line: line_no,
                    message: format!("expected header '{HISTOGRAM_HEADER}', found '{trimmed}'"),
                });
            }
            saw_header = true;
            continue;
        }
        let (s_str, c_str) = trimmed.split_once(',').ok_or_else(|| Error::Parse {
            path: label.clone(),
            line: line_no,
            message: "expected two comma-separated fields".into(),
        })?;
        let start: f64 = s_str.trim().parse().map_err(|_| Error::Parse {
            path: label.clone(),
            line: line_no,
            message: format!("bad bin start '{s_str}'"),
        })?;
        let count: u64 = c_str.trim().parse().map_err(|_| Error::Parse {
            path: label.clone(),
            line: line_no,
            message: format!("bad count '{c_str}'"),
        })?;
        rows.push((start, count));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: label,
            line: 1,
            message: "no histogram rows".into(),
        });
    }
    let start = provenance.get_f64("window_start_ns", &label)?;
    let width = provenance.get_f64("bin_width_ns", &label)?;
    let n1 = provenance.get_f64("n1", &label)? as u64;
    let n2 = provenance.get_f64("n2", &label)? as u64;
    for (i, &(s, _)) in rows.iter().enumerate() {
        let expect = start + i as f64 * width;
        if (s - expect).abs() > 1e-3 * width {
            return Err(Error::Parse {
                path: label,
                line: 0,
                message: format!("bin {i} starts at {s}, expected {expect}"),
            });
        }
    }
    let counts = rows.iter().map(|r| r.1).collect();
    let mut hist = CoincidenceHistogram::from_parts(start, width, counts, n1, n2)?;
    if let Some(t) = provenance.get("total_time_s") {
        let t: f64 = t.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "bad total_time_s".into(),
        })?;
        hist.set_total_time(t)?;
    }
    Ok((hist, provenance))
}
