//! Spectrum reconstruction from a grating scan.
//!
//! Each scan point carries the coincidence and singles counts collected at
//! one grating position. Normalization subtracts the accidental expectation
//! and divides by the flashing detector's count, giving a relative intensity
//! per breakdown; a scale factor `alpha` keeps the numbers readable.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::emission::SpectralCurve;
use crate::error::Error;
use crate::io::Provenance;

/// Counts collected at one grating position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralScanPoint {
    pub wavelength_nm: f64,
    /// Gated coincidences.
    pub n_c: u64,
    /// Flashing-detector singles.
    pub n_1: u64,
    /// Observer singles.
    pub n_2: u64,
    pub integration_time_s: f64,
    pub gate_ns: f64,
}

impl SpectralScanPoint {
    fn validate(&self) -> Result<(), Error> {
        if !self.wavelength_nm.is_finite() || self.wavelength_nm <= 0.0 {
            return Err(Error::Domain(format!(
                "bad scan wavelength {}",
                self.wavelength_nm
            )));
        }
        if !(self.integration_time_s > 0.0) || !self.integration_time_s.is_finite() {
            return Err(Error::Domain(format!(
                "bad integration time {} s at {} nm",
                self.integration_time_s, self.wavelength_nm
            )));
        }
        if !(self.gate_ns > 0.0) || !self.gate_ns.is_finite() {
            return Err(Error::Domain(format!(
                "bad coincidence gate {} ns at {} nm",
                self.gate_ns, self.wavelength_nm
            )));
        }
        Ok(())
    }

    /// Expected accidental coincidences over the integration time.
    pub fn expected_accidentals(&self) -> f64 {
        self.n_1 as f64 * self.n_2 as f64 * self.gate_ns * 1e-9 / self.integration_time_s
    }

    /// `alpha * (N_c - accidentals) / N_1`; `None` when `N_1` is zero.
    pub fn normalized_intensity(&self, alpha: f64) -> Option<f64> {
        if self.n_1 == 0 {
            return None;
        }
        Some(alpha * (self.n_c as f64 - self.expected_accidentals()) / self.n_1 as f64)
    }

    /// Counting-statistics standard deviation of `normalized_intensity`,
    /// from the Poisson variances of the three counts.
    pub fn intensity_std(&self, alpha: f64) -> Option<f64> {
        if self.n_1 == 0 {
            return None;
        }
        let acc = self.expected_accidentals();
        let var =
            self.n_c as f64 + acc * acc * (1.0 / self.n_1 as f64 + 1.0 / self.n_2.max(1) as f64);
        Some(alpha * var.sqrt() / self.n_1 as f64)
    }
}

/// Normalized scan with a record of what had to be adjusted.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSpectrum {
    pub curve: SpectralCurve,
    /// Wavelengths where the net intensity came out negative and was
    /// clamped to zero.
    pub clamped_nm: Vec<f64>,
    /// Wavelengths dropped because the flashing detector recorded nothing.
    pub excluded_nm: Vec<f64>,
}

/// Converts scan counts to a relative intensity curve.
pub fn normalize_spectrum(
    points: &[SpectralScanPoint],
    alpha: f64,
) -> Result<NormalizedSpectrum, Error> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let mut sorted: Vec<SpectralScanPoint> = points.to_vec();
    sorted.sort_by(|a, b| a.wavelength_nm.partial_cmp(&b.wavelength_nm).unwrap());
    let mut curve_points = Vec::with_capacity(sorted.len());
    let mut clamped_nm = Vec::new();
    let mut excluded_nm = Vec::new();
    for p in &sorted {
        p.validate()?;
        match p.normalized_intensity(alpha) {
            None => excluded_nm.push(p.wavelength_nm),
            Some(v) if v < 0.0 => {
                clamped_nm.push(p.wavelength_nm);
                curve_points.push((p.wavelength_nm, 0.0));
            }
            Some(v) => curve_points.push((p.wavelength_nm, v)),
        }
    }
    if curve_points.len() < 2 {
        return Err(Error::Domain(format!(
            "only {} usable scan points after exclusions",
            curve_points.len()
        )));
    }
    let curve = SpectralCurve::new(curve_points)?;
    Ok(NormalizedSpectrum {
        curve,
        clamped_nm,
        excluded_nm,
    })
}

/// A qualitative feature of a reconstructed spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralFeature {
    /// Local maximum of the smoothed curve, at a tabulated point.
    Maximum { wavelength_nm: f64, value: f64 },
    /// Falling edge; the position is the midpoint of the steepest segment
    /// and the slope is that segment's derivative.
    Edge {
        wavelength_nm: f64,
        slope_per_nm: f64,
    },
}

impl SpectralFeature {
    pub fn wavelength_nm(&self) -> f64 {
        match *self {
            SpectralFeature::Maximum { wavelength_nm, .. } => wavelength_nm,
            SpectralFeature::Edge { wavelength_nm, .. } => wavelength_nm,
        }
    }
}

/// Finds prominent maxima and sharp falling edges.
///
/// The curve is smoothed with a three-point moving average (endpoints kept).
/// Maxima are interior points strictly above both smoothed neighbors and at
/// least 10% of the smoothed global maximum. Edges are runs of segments
/// whose smoothed derivative falls below minus three times the median
/// absolute derivative; each run reports one edge at its steepest segment.
pub fn locate_features(curve: &SpectralCurve) -> Vec<SpectralFeature> {
    let pts = curve.points();
    let n = pts.len();
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let mut smooth = y.clone();
    for i in 1..n - 1 {
        smooth[i] = (y[i - 1] + y[i] + y[i + 1]) / 3.0;
    }
    let global_max = smooth.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut features = Vec::new();
    for i in 1..n - 1 {
        if smooth[i] > smooth[i - 1] && smooth[i] > smooth[i + 1] && smooth[i] >= 0.1 * global_max {
            features.push(SpectralFeature::Maximum {
                wavelength_nm: x[i],
                value: smooth[i],
            });
        }
    }

    let deriv: Vec<f64> = (0..n - 1)
        .map(|i| (smooth[i + 1] - smooth[i]) / (x[i + 1] - x[i]))
        .collect();
    let mut magnitudes: Vec<f64> = deriv.iter().map(|d| d.abs()).collect();
    magnitudes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = magnitudes.len();
    let median = if m % 2 == 1 {
        magnitudes[m / 2]
    } else {
        0.5 * (magnitudes[m / 2 - 1] + magnitudes[m / 2])
    };
    let threshold = -3.0 * median;
    let mut i = 0;
    while i < deriv.len() {
        if deriv[i] < threshold {
            let mut j = i;
            while j + 1 < deriv.len() && deriv[j + 1] < threshold {
                j += 1;
            }
            let steepest = (i..=j)
                .min_by(|&a, &b| deriv[a].partial_cmp(&deriv[b]).unwrap())
                .unwrap();
            features.push(SpectralFeature::Edge {
                wavelength_nm: 0.5 * (x[steepest] + x[steepest + 1]),
                slope_per_nm: deriv[steepest],
            });
            i = j + 1;
        } else {
            i += 1;
        }
    }
    features.sort_by(|a, b| a.wavelength_nm().partial_cmp(&b.wavelength_nm()).unwrap());
    features
}

pub const SCAN_HEADER: &str = "wavelength_nm,N_c,N_1,N_2,T_s,tau_c_ns";

pub fn write_scan<W: Write>(
    mut w: W,
    points: &[SpectralScanPoint],
    provenance: &Provenance,
) -> std::io::Result<()> {
    provenance.write(&mut w)?;
    writeln!(w, "{SCAN_HEADER}")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.wavelength_nm, p.n_c, p.n_1, p.n_2, p.integration_time_s, p.gate_ns
        )?;
    }
    Ok(())
}

pub fn read_scan(path: &Path) -> Result<(Vec<SpectralScanPoint>, Provenance), Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let label = path.display().to_string();
    let mut provenance = Provenance::default();
    let mut points = Vec::new();
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
            if trimmed != SCAN_HEADER {
                return Err(Error::Parse {
                    path: label,
                    line: line_no,
                    message: format!("expected header '{SCAN_HEADER}', found '{trimmed}'"),
                });
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                path: label,
                line: line_no,
                message: format!("expected 6 columns, found {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, Error> {
            s.parse().map_err(|_| Error::Parse {
                path: label.clone(),
                line: line_no,
                message: format!("bad {what} '{s}'"),
            })
        };
        let parse_u = |s: &str, what: &str| -> Result<u64, Error> {
            s.parse().map_err(|_| Error::Parse {
                path: label.clone(),
                line: line_no,
                message: format!("bad {what} '{s}'"),
            })
        };
        let point = SpectralScanPoint {
            wavelength_nm: parse_f(fields[0], "wavelength")?,
            n_c: parse_u(fields[1], "coincidence count")?,
            n_1: parse_u(fields[2], "detector 1 count")?,
            n_2: parse_u(fields[3], "detector 2 count")?,
            integration_time_s: parse_f(fields[4], "integration time")?,
            gate_ns: parse_f(fields[5], "gate")?,
        };
        point.validate().map_err(|e| Error::Parse {
            path: label.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        points.push(point);
    }
    if !saw_header {
        return Err(Error::Parse {
            path: label,
            line: 1,
            message: format!("missing '{SCAN_HEADER}' header"),
        });
    }
    Ok((points, provenance))
}
