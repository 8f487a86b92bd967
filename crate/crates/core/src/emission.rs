//! Photon emission from a breakdown flash.
//!
//! A discharge emits a Poisson number of photons into a given solid angle.
//! Emission times follow the discharge current profile; wavelengths are drawn
//! from a tabulated relative spectrum by inverse transform sampling.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::circuit::BreakdownProfile;
use crate::error::Error;

/// Tabulated spectral quantity, linearly interpolated between samples.
///
/// Wavelengths are in nm and must be strictly increasing; values must be
/// nonnegative. Emission-type queries return zero outside the tabulated
/// range (`value_at`), efficiency-type queries treat that as an error
/// (`value_within`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCurve {
    points: Vec<(f64, f64)>,
}

pub const CURVE_HEADER: &str = "wavelength_nm,value";

impl SpectralCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, Error> {
        if points.len() < 2 {
            return Err(Error::Domain(
                "spectral curve needs at least two samples".into(),
            ));
        }
        for pair in points.windows(2) {
            if !(pair[1].0 > pair[0].0) {
                return Err(Error::Domain(format!(
                    "wavelengths must be strictly increasing ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        for &(w, v) in &points {
            if !w.is_finite() || !v.is_finite() || v < 0.0 {
                return Err(Error::Domain(format!(
                    "invalid sample ({w} nm, {v}); values must be finite and nonnegative"
                )));
            }
        }
        Ok(SpectralCurve { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Tabulated wavelength range (nm).
    pub fn domain(&self) -> (f64, f64) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }

    /// Interpolated value; zero outside the tabulated range.
    pub fn value_at(&self, wavelength_nm: f64) -> f64 {
        let (lo, hi) = self.domain();
        if wavelength_nm < lo || wavelength_nm > hi {
            return 0.0;
        }
        self.interp(wavelength_nm)
    }

    /// Interpolated value; querying outside the tabulated range is an error.
    pub fn value_within(&self, wavelength_nm: f64) -> Result<f64, Error> {
        let (lo, hi) = self.domain();
        if !(wavelength_nm >= lo && wavelength_nm <= hi) {
            return Err(Error::Domain(format!(
                "wavelength {wavelength_nm} nm outside tabulated range {lo}..{hi} nm"
            )));
        }
        Ok(self.interp(wavelength_nm))
    }

    fn interp(&self, w: f64) -> f64 {
        let i = match self
            .points
            .binary_search_by(|p| p.0.partial_cmp(&w).unwrap())
        {
            Ok(i) => return self.points[i].1,
            Err(i) => i,
        };
        let (x0, y0) = self.points[i - 1];
        let (x1, y1) = self.points[i];
        y0 + (y1 - y0) * (w - x0) / (x1 - x0)
    }

    /// Trapezoid integral over the full tabulated range (exact for the
    /// piecewise-linear interpolant).
    pub fn integral(&self) -> f64 {
        let mut acc = 0.0;
        for pair in self.points.windows(2) {
            acc += 0.5 * (pair[1].1 + pair[0].1) * (pair[1].0 - pair[0].0);
        }
        acc
    }

    /// Integral of the interpolant restricted to `lo..hi` (zero outside the
    /// tabulated range).
    pub fn integral_over(&self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let grid = union_grid(&[self], lo, hi);
        trapezoid_on_grid(&grid, |w| self.value_at(w))
    }

    /// Same curve with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, Error> {
        if !factor.is_finite() || factor < 0.0 {
            return Err(Error::Domain(
                "scale factor must be finite and nonnegative".into(),
            ));
        }
        SpectralCurve::new(self.points.iter().map(|&(w, v)| (w, v * factor)).collect())
    }

    /// Reads a two-column CSV with a `wavelength_nm,value` header.
    /// Lines starting with `#` are skipped.
    pub fn from_csv<R: BufRead>(reader: R, label: &str) -> Result<Self, Error> {
        let mut points = Vec::new();
        let mut saw_header = false;
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                path: label.to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if !saw_header {
                if trimmed != CURVE_HEADER {
                    return Err(Error::Parse {
                        path: label.to_string(),
                        line: line_no,
                        message: format!("expected header '{CURVE_HEADER}', found '{trimmed}'"),
                    });
                }
                saw_header = true;
                continue;
            }
            let mut fields = trimmed.split(',');
            let parse = |field: Option<&str>, what: &str| -> Result<f64, Error> {
                field
                    .map(str::trim)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        path: label.to_string(),
                        line: line_no,
                        message: format!("bad {what}"),
                    })
            };
            let w = parse(fields.next(), "wavelength")?;
            let v = parse(fields.next(), "value")?;
            if fields.next().is_some() {
                return Err(Error::Parse {
                    path: label.to_string(),
                    line: line_no,
                    message: "expected exactly two columns".into(),
                });
            }
            points.push((w, v));
        }
        if !saw_header {
            return Err(Error::Parse {
                path: label.to_string(),
                line: 1,
                message: format!("missing '{CURVE_HEADER}' header"),
            });
        }
        SpectralCurve::new(points).map_err(|e| Error::Parse {
            path: label.to_string(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(std::io::BufReader::new(file), &path.display().to_string())
    }

    pub fn write_csv<W: Write>(&self, mut w: W, comments: &[String]) -> std::io::Result<()> {
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "{CURVE_HEADER}")?;
        for &(wl, v) in &self.points {
            writeln!(w, "{wl},{v}")?;
        }
        Ok(())
    }
}

/// Sorted, deduplicated knot positions of all `curves` clipped to `lo..hi`,
/// with the interval endpoints included.
pub(crate) fn union_grid(curves: &[&SpectralCurve], lo: f64, hi: f64) -> Vec<f64> {
    let mut grid = vec![lo, hi];
    for c in curves {
        grid.extend(c.points.iter().map(|p| p.0).filter(|&w| w > lo && w < hi));
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    grid
}

pub(crate) fn trapezoid_on_grid<F: Fn(f64) -> f64>(grid: &[f64], f: F) -> f64 {
    let mut acc = 0.0;
    let mut prev = (grid[0], f(grid[0]));
    for &x in &grid[1..] {
        let y = f(x);
        acc += 0.5 * (y + prev.1) * (x - prev.0);
        prev = (x, y);
    }
    acc
}

/// Default flash spectrum: a synthetic table with the qualitative shape of a
/// measured silicon APD breakdown flash (as seen through the matching
/// detection efficiency), not a measurement.
pub fn builtin_flash_spectrum() -> SpectralCurve {
    let text = include_str!("../data/flash_spectrum.csv");
    SpectralCurve::from_csv(text.as_bytes(), "builtin:flash_spectrum").expect("builtin table")
}

/// Default photoelectron generation probability versus wavelength
/// (synthetic, smooth drop from 0.70 at 800 nm to 0.08 at 1000 nm).
pub fn builtin_pe_generation() -> SpectralCurve {
    let text = include_str!("../data/pe_generation.csv");
    SpectralCurve::from_csv(text.as_bytes(), "builtin:pe_generation").expect("builtin table")
}

/// One emitted flash photon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlashPhoton {
    pub emission_time_ns: f64,
    pub wavelength_nm: f64,
}

/// Photon emission model of one detector's breakdown flash.
#[derive(Debug, Clone)]
pub struct EmissionModel {
    intensity_per_sr: f64,
    spectrum: SpectralCurve,
    timing: BreakdownProfile,
    knot_cdf: Vec<f64>,
}

impl EmissionModel {
    /// Builds a model from the true (source-side) relative emission spectrum.
    /// The spectrum is normalized to unit integral on construction.
    pub fn new(
        intensity_per_sr: f64,
        spectrum: SpectralCurve,
        timing: BreakdownProfile,
    ) -> Result<Self, Error> {
        if !intensity_per_sr.is_finite() || intensity_per_sr < 0.0 {
            return Err(Error::Domain(
                "intensity must be finite and nonnegative".into(),
            ));
        }
        timing.validate()?;
        let total = spectrum.integral();
        if !(total > 0.0) {
            return Err(Error::Domain("emission spectrum has zero integral".into()));
        }
        let spectrum = spectrum.scaled(1.0 / total)?;
        let mut knot_cdf = Vec::with_capacity(spectrum.points.len());
        let mut acc = 0.0;
        knot_cdf.push(0.0);
        for pair in spectrum.points.windows(2) {
            acc += 0.5 * (pair[1].1 + pair[0].1) * (pair[1].0 - pair[0].0);
            knot_cdf.push(acc);
        }
        Ok(EmissionModel {
            intensity_per_sr,
            spectrum,
            timing,
            knot_cdf,
        })
    }

    /// Builds a model from a detected-reference spectrum: a table of the
    /// flash as seen through a detection efficiency curve. The source-side
    /// spectrum is recovered by dividing the table by `efficiency` on the
    /// union of both knot grids.
    pub fn from_detected_reference(
        intensity_per_sr: f64,
        detected: &SpectralCurve,
        efficiency: &SpectralCurve,
        timing: BreakdownProfile,
    ) -> Result<Self, Error> {
        let (lo, hi) = detected.domain();
        let grid = union_grid(&[detected, efficiency], lo, hi);
        let mut points = Vec::with_capacity(grid.len());
        for w in grid {
            let d = detected.value_at(w);
            let eta = efficiency.value_within(w)?;
            if d > 0.0 && eta <= 0.0 {
                return Err(Error::Domain(format!(
                    "efficiency is zero at {w} nm where the spectrum is nonzero"
                )));
            }
            points.push((w, if d > 0.0 { d / eta } else { 0.0 }));
        }
        EmissionModel::new(intensity_per_sr, SpectralCurve::new(points)?, timing)
    }

    /// True differential photon intensity (photons per steradian per breakdown).
    pub fn intensity_per_sr(&self) -> f64 {
        self.intensity_per_sr
    }

    /// Normalized source-side emission spectrum (1/nm).
    pub fn spectrum(&self) -> &SpectralCurve {
        &self.spectrum
    }

    pub fn timing(&self) -> &BreakdownProfile {
        &self.timing
    }

    /// Fraction of emitted photons a detector with the given efficiency curve
    /// converts, `integral of spectrum * efficiency`. Exact for the two
    /// piecewise-linear factors (per-segment Simpson).
    pub fn detected_fraction(&self, efficiency: &SpectralCurve) -> Result<f64, Error> {
        let (lo, hi) = self.spectrum.domain();
        let grid = union_grid(&[&self.spectrum, efficiency], lo, hi);
        let mut acc = 0.0;
        for pair in grid.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let fa = self.spectrum.value_at(a) * efficiency.value_within(a)?;
            let fb = self.spectrum.value_at(b) * efficiency.value_within(b)?;
            let sm = 0.5 * (self.spectrum.value_at(a) + self.spectrum.value_at(b));
            let em = 0.5 * (efficiency.value_within(a)? + efficiency.value_within(b)?);
            acc += (b - a) / 6.0 * (fa + 4.0 * sm * em + fb);
        }
        Ok(acc)
    }

    /// Inverse of the spectrum's cumulative distribution, using the cached
    /// per-knot cumulative sums.
    pub fn sample_wavelength(&self, u: f64) -> Result<f64, Error> {
        invert_pl_cdf(&self.spectrum.points, &self.knot_cdf, u)
    }
}

/// Wavelength at which the normalized cumulative spectrum reaches `u`.
/// `u` must lie in `[0, 1)`. Monotone nondecreasing in `u` and always within
/// the tabulated range.
pub fn spectrum_cdf_inverse(spectrum: &SpectralCurve, u: f64) -> Result<f64, Error> {
    let mut cdf = Vec::with_capacity(spectrum.points.len());
    let mut acc = 0.0;
    cdf.push(0.0);
    for pair in spectrum.points.windows(2) {
        acc += 0.5 * (pair[1].1 + pair[0].1) * (pair[1].0 - pair[0].0);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::Domain("spectrum has zero integral".into()));
    }
    invert_pl_cdf(&spectrum.points, &cdf, u)
}

fn invert_pl_cdf(points: &[(f64, f64)], cdf: &[f64], u: f64) -> Result<f64, Error> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Domain(format!("u = {u} outside [0, 1)")));
    }
    let total = cdf[cdf.len() - 1];
    let target = u * total;
    // last segment index with cdf[i] <= target
    let mut i = cdf.partition_point(|&c| c <= target);
    i = i.saturating_sub(1).min(points.len() - 2);
    let area = target - cdf[i];
    let (x0, v0) = points[i];
    let (x1, v1) = points[i + 1];
    let h = x1 - x0;
    let m = (v1 - v0) / h;
    // solve v0*t + m*t^2/2 = area for t in [0, h]
    let disc = (v0 * v0 + 2.0 * m * area).max(0.0);
    let denom = v0 + disc.sqrt();
    let t = if denom > 0.0 { 2.0 * area / denom } else { 0.0 };
    Ok(x0 + t.clamp(0.0, h))
}

/// Draws the photons of one breakdown flash into `solid_angle_sr`.
///
/// The photon count is Poisson with mean `intensity * solid_angle`; each
/// photon gets an emission time `breakdown + onset + Exp(tau) + N(0, sigma)`
/// and a wavelength drawn from the emission spectrum.
pub fn sample_flash<R: Rng>(
    model: &EmissionModel,
    breakdown_time_ns: f64,
    solid_angle_sr: f64,
    rng: &mut R,
) -> Result<Vec<FlashPhoton>, Error> {
    if !breakdown_time_ns.is_finite() {
        return Err(Error::Domain("breakdown time must be finite".into()));
    }
    if !solid_angle_sr.is_finite() || !(0.0..=4.0 * std::f64::consts::PI).contains(&solid_angle_sr)
    {
        return Err(Error::Domain(format!(
            "solid angle {solid_angle_sr} sr outside [0, 4 pi]"
        )));
    }
    let mean = model.intensity_per_sr * solid_angle_sr;
    let n = sample_poisson(mean, rng);
    let mut photons = Vec::with_capacity(n as usize);
    let timing = &model.timing;
    for _ in 0..n {
        let exp: f64 = rng.sample::<f64, _>(rand_distr::Exp1) * timing.decay_tau_ns;
        let gauss: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
        let dt = timing.onset_t0_ns + exp + gauss * timing.jitter_sigma_ns;
        let wavelength_nm = model.sample_wavelength(rng.gen::<f64>())?;
        photons.push(FlashPhoton {
            emission_time_ns: breakdown_time_ns + dt,
            wavelength_nm,
        });
    }
    Ok(photons)
}

pub(crate) fn sample_poisson<R: Rng>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    rng.sample(rand_distr::Poisson::new(mean).expect("positive mean")) as u64
}
