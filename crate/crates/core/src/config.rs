//! Run configuration: a small `[section] key = value` format with defaults
//! describing the reference bench, a canonical renderer, and builders that
//! turn a config into engine inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::circuit::BreakdownProfile;
use crate::emission::{
    builtin_flash_spectrum, builtin_pe_generation, EmissionModel, SpectralCurve,
};
use crate::error::Error;
use crate::sim::{DetectorConfig, Mode, OpticsConfig, ScanPlan, SimConfig};

pub const BUILTIN: &str = "builtin";

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSettings {
    pub dark_rate_cps: f64,
    pub ambient_rate_cps: f64,
    pub dead_time_ns: f64,
    pub active_diameter_um: f64,
    pub total_charge_pc: f64,
    pub overvoltage_v: f64,
    pub decay_tau_ns: f64,
    pub jitter_sigma_ns: f64,
    pub onset_t0_ns: f64,
    pub true_intensity_per_sr: f64,
    /// Detected-reference flash spectrum: `builtin` or a CSV path.
    pub spectrum_file: String,
    /// Photoelectron generation probability curve: `builtin` or a CSV path.
    pub pe_generation_file: String,
    /// Flat factor applied on top of the generation curve to give the
    /// photon detection efficiency.
    pub pe_detection_efficiency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpticsSettings {
    /// `facing` or `spectrometer`.
    pub mode: String,
    pub solid_angle_1to2_sr: f64,
    pub solid_angle_2to1_sr: f64,
    pub delay_line_ns: f64,
    pub coupling_efficiency: f64,
    pub grating_center_nm: f64,
    pub grating_fwhm_nm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSettings {
    pub bin_width_ns: f64,
    pub window_start_ns: f64,
    pub window_end_ns: f64,
    /// Time-difference window that counts as the flash peak.
    pub peak_window_start_ns: f64,
    pub peak_window_end_ns: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditSettings {
    pub diff_intensity_per_sr: f64,
    pub active_diameter_um: f64,
    pub reference_brilliance_per_sr_um2: f64,
    pub range_lo_nm: f64,
    pub range_hi_nm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSettings {
    pub start_nm: f64,
    pub stop_nm: f64,
    pub step_nm: f64,
    pub integration_time_s: f64,
    pub coincidence_gate_ns: f64,
    /// Normalization constant folded into the reported intensity.
    pub alpha: f64,
    /// The scan bench floods both detectors harder than the facing bench,
    /// so it carries its own ambient rates and geometry.
    pub detector1_ambient_cps: f64,
    pub detector2_ambient_cps: f64,
    pub solid_angle_sr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub detector1: DetectorSettings,
    pub detector2: DetectorSettings,
    pub optics: OpticsSettings,
    pub analysis: AnalysisSettings,
    pub audit: AuditSettings,
    pub scan: ScanSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let detector = DetectorSettings {
            dark_rate_cps: 500.0,
            ambient_rate_cps: 2127.7,
            dead_time_ns: 1000.0,
            active_diameter_um: 500.0,
            total_charge_pc: 64.0,
            overvoltage_v: 20.0,
            decay_tau_ns: 2.75,
            jitter_sigma_ns: 0.72,
            onset_t0_ns: 2.0,
            true_intensity_per_sr: 142.76,
            spectrum_file: BUILTIN.into(),
            pe_generation_file: BUILTIN.into(),
            pe_detection_efficiency: 0.55,
        };
        RunConfig {
            detector1: detector.clone(),
            detector2: DetectorSettings {
                ambient_rate_cps: 183.6,
                ..detector
            },
            optics: OpticsSettings {
                mode: "facing".into(),
                solid_angle_1to2_sr: 4.67e-4,
                solid_angle_2to1_sr: 4.67e-4,
                delay_line_ns: 63.0,
                coupling_efficiency: 1.0,
                grating_center_nm: 860.0,
                grating_fwhm_nm: 3.3,
            },
            analysis: AnalysisSettings {
                bin_width_ns: 0.2,
                window_start_ns: -40.0,
                window_end_ns: 100.0,
                peak_window_start_ns: 20.0,
                peak_window_end_ns: 62.0,
            },
            audit: AuditSettings {
                diff_intensity_per_sr: 39.0,
                active_diameter_um: 500.0,
                reference_brilliance_per_sr_um2: 2.0e-3,
                range_lo_nm: 700.0,
                range_hi_nm: 1050.0,
            },
            scan: ScanSettings {
                start_nm: 700.0,
                stop_nm: 1000.0,
                step_nm: 5.0,
                integration_time_s: 50.0,
                coincidence_gate_ns: 70.0,
                alpha: 1000.0,
                detector1_ambient_cps: 18000.0,
                detector2_ambient_cps: 5000.0,
                solid_angle_sr: 7.0e-4,
            },
        }
    }
}

fn set_detector(
    d: &mut DetectorSettings,
    key: &str,
    value: &str,
    num: impl Fn(&str) -> Result<f64, Error>,
) -> Result<bool, Error> {
    let slot = match key {
        "dark_rate_cps" => &mut d.dark_rate_cps,
        "ambient_rate_cps" => &mut d.ambient_rate_cps,
        "dead_time_ns" => &mut d.dead_time_ns,
        "active_diameter_um" => &mut d.active_diameter_um,
        "total_charge_pc" => &mut d.total_charge_pc,
        "overvoltage_v" => &mut d.overvoltage_v,
        "decay_tau_ns" => &mut d.decay_tau_ns,
        "jitter_sigma_ns" => &mut d.jitter_sigma_ns,
        "onset_t0_ns" => &mut d.onset_t0_ns,
        "true_intensity_per_sr" => &mut d.true_intensity_per_sr,
        "pe_detection_efficiency" => &mut d.pe_detection_efficiency,
        "spectrum_file" => {
            d.spectrum_file = value.to_string();
            return Ok(true);
        }
        "pe_generation_file" => {
            d.pe_generation_file = value.to_string();
            return Ok(true);
        }
        _ => return Ok(false),
    };
    *slot = num(value)?;
    Ok(true)
}

impl RunConfig {
    pub fn parse(text: &str, label: &str) -> Result<Self, Error> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let err = |message: String| Error::Parse {
                path: label.to_string(),
                line: lineno,
                message,
            };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?
                    .trim();
                if ![
                    "detector1",
                    "detector2",
                    "optics",
                    "analysis",
                    "audit",
                    "scan",
                ]
                .contains(&name)
                {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    path: label.to_string(),
                    line: lineno,
                    message: format!("{key}: not a number: {v:?}"),
                })
            };
            let known = match section.as_str() {
                "" => return Err(err(format!("{key} appears before any [section]"))),
                "detector1" => set_detector(&mut cfg.detector1, key, value, num)?,
                "detector2" => set_detector(&mut cfg.detector2, key, value, num)?,
                "optics" => {
                    let o = &mut cfg.optics;
                    match key {
                        "mode" => {
                            if value != "facing" && value != "spectrometer" {
                                return Err(err(format!(
                                    "mode must be facing or spectrometer, got {value:?}"
                                )));
                            }
                            o.mode = value.to_string();
                            true
                        }
                        "solid_angle_1to2_sr" => {
                            o.solid_angle_1to2_sr = num(value)?;
                            true
                        }
                        "solid_angle_2to1_sr" => {
                            o.solid_angle_2to1_sr = num(value)?;
                            true
                        }
                        "delay_line_ns" => {
                            o.delay_line_ns = num(value)?;
                            true
                        }
                        "coupling_efficiency" => {
                            o.coupling_efficiency = num(value)?;
                            true
                        }
                        "grating_center_nm" => {
                            o.grating_center_nm = num(value)?;
                            true
                        }
                        "grating_fwhm_nm" => {
                            o.grating_fwhm_nm = num(value)?;
                            true
                        }
                        _ => false,
                    }
                }
                "analysis" => {
                    let a = &mut cfg.analysis;
                    match key {
                        "bin_width_ns" => {
                            a.bin_width_ns = num(value)?;
                            true
                        }
                        "window_start_ns" => {
                            a.window_start_ns = num(value)?;
                            true
                        }
                        "window_end_ns" => {
                            a.window_end_ns = num(value)?;
                            true
                        }
                        "peak_window_start_ns" => {
                            a.peak_window_start_ns = num(value)?;
                            true
                        }
                        "peak_window_end_ns" => {
                            a.peak_window_end_ns = num(value)?;
                            true
                        }
                        _ => false,
                    }
                }
                "audit" => {
                    let a = &mut cfg.audit;
                    match key {
                        "diff_intensity_per_sr" => {
                            a.diff_intensity_per_sr = num(value)?;
                            true
                        }
                        "active_diameter_um" => {
                            a.active_diameter_um = num(value)?;
                            true
                        }
                        "reference_brilliance_per_sr_um2" => {
                            a.reference_brilliance_per_sr_um2 = num(value)?;
                            true
                        }
                        "range_lo_nm" => {
                            a.range_lo_nm = num(value)?;
                            true
                        }
                        "range_hi_nm" => {
                            a.range_hi_nm = num(value)?;
                            true
                        }
                        _ => false,
                    }
                }
                "scan" => {
                    let s = &mut cfg.scan;
                    match key {
                        "start_nm" => {
                            s.start_nm = num(value)?;
                            true
                        }
                        "stop_nm" => {
                            s.stop_nm = num(value)?;
                            true
                        }
                        "step_nm" => {
                            s.step_nm = num(value)?;
                            true
                        }
                        "integration_time_s" => {
                            s.integration_time_s = num(value)?;
                            true
                        }
                        "coincidence_gate_ns" => {
                            s.coincidence_gate_ns = num(value)?;
                            true
                        }
                        "alpha" => {
                            s.alpha = num(value)?;
                            true
                        }
                        "detector1_ambient_cps" => {
                            s.detector1_ambient_cps = num(value)?;
                            true
                        }
                        "detector2_ambient_cps" => {
                            s.detector2_ambient_cps = num(value)?;
                            true
                        }
                        "solid_angle_sr" => {
                            s.solid_angle_sr = num(value)?;
                            true
                        }
                        _ => false,
                    }
                }
                _ => unreachable!("section names are validated above"),
            };
            if !known {
                return Err(err(format!("unknown key {key:?} in section [{section}]")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    /// Canonical text form; `parse(render())` round-trips exactly.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, d) in [
            ("detector1", &self.detector1),
            ("detector2", &self.detector2),
        ] {
            writeln!(s, "[{name}]").unwrap();
            writeln!(s, "dark_rate_cps = {}", d.dark_rate_cps).unwrap();
            writeln!(s, "ambient_rate_cps = {}", d.ambient_rate_cps).unwrap();
            writeln!(s, "dead_time_ns = {}", d.dead_time_ns).unwrap();
            writeln!(s, "active_diameter_um = {}", d.active_diameter_um).unwrap();
            writeln!(s, "total_charge_pc = {}", d.total_charge_pc).unwrap();
            writeln!(s, "overvoltage_v = {}", d.overvoltage_v).unwrap();
            writeln!(s, "decay_tau_ns = {}", d.decay_tau_ns).unwrap();
            writeln!(s, "jitter_sigma_ns = {}", d.jitter_sigma_ns).unwrap();
            writeln!(s, "onset_t0_ns = {}", d.onset_t0_ns).unwrap();
            writeln!(s, "true_intensity_per_sr = {}", d.true_intensity_per_sr).unwrap();
            writeln!(s, "spectrum_file = {}", d.spectrum_file).unwrap();
            writeln!(s, "pe_generation_file = {}", d.pe_generation_file).unwrap();
            writeln!(s, "pe_detection_efficiency = {}", d.pe_detection_efficiency).unwrap();
            s.push('\n');
        }
        let o = &self.optics;
        writeln!(s, "[optics]").unwrap();
        writeln!(s, "mode = {}", o.mode).unwrap();
        writeln!(s, "solid_angle_1to2_sr = {}", o.solid_angle_1to2_sr).unwrap();
        writeln!(s, "solid_angle_2to1_sr = {}", o.solid_angle_2to1_sr).unwrap();
        writeln!(s, "delay_line_ns = {}", o.delay_line_ns).unwrap();
        writeln!(s, "coupling_efficiency = {}", o.coupling_efficiency).unwrap();
        writeln!(s, "grating_center_nm = {}", o.grating_center_nm).unwrap();
        writeln!(s, "grating_fwhm_nm = {}", o.grating_fwhm_nm).unwrap();
        s.push('\n');
        let a = &self.analysis;
        writeln!(s, "[analysis]").unwrap();
        writeln!(s, "bin_width_ns = {}", a.bin_width_ns).unwrap();
        writeln!(s, "window_start_ns = {}", a.window_start_ns).unwrap();
        writeln!(s, "window_end_ns = {}", a.window_end_ns).unwrap();
        writeln!(s, "peak_window_start_ns = {}", a.peak_window_start_ns).unwrap();
        writeln!(s, "peak_window_end_ns = {}", a.peak_window_end_ns).unwrap();
        s.push('\n');
        let a = &self.audit;
        writeln!(s, "[audit]").unwrap();
        writeln!(s, "diff_intensity_per_sr = {}", a.diff_intensity_per_sr).unwrap();
        writeln!(s, "active_diameter_um = {}", a.active_diameter_um).unwrap();
        writeln!(
            s,
            "reference_brilliance_per_sr_um2 = {}",
            a.reference_brilliance_per_sr_um2
        )
        .unwrap();
        writeln!(s, "range_lo_nm = {}", a.range_lo_nm).unwrap();
        writeln!(s, "range_hi_nm = {}", a.range_hi_nm).unwrap();
        s.push('\n');
        let c = &self.scan;
        writeln!(s, "[scan]").unwrap();
        writeln!(s, "start_nm = {}", c.start_nm).unwrap();
        writeln!(s, "stop_nm = {}", c.stop_nm).unwrap();
        writeln!(s, "step_nm = {}", c.step_nm).unwrap();
        writeln!(s, "integration_time_s = {}", c.integration_time_s).unwrap();
        writeln!(s, "coincidence_gate_ns = {}", c.coincidence_gate_ns).unwrap();
        writeln!(s, "alpha = {}", c.alpha).unwrap();
        writeln!(s, "detector1_ambient_cps = {}", c.detector1_ambient_cps).unwrap();
        writeln!(s, "detector2_ambient_cps = {}", c.detector2_ambient_cps).unwrap();
        writeln!(s, "solid_angle_sr = {}", c.solid_angle_sr).unwrap();
        s
    }

    /// SHA-256 of the canonical rendering, for provenance lines.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.render().as_bytes());
        let digest = h.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            write!(hex, "{b:02x}").unwrap();
        }
        hex
    }

    pub fn to_sim_config(&self) -> Result<SimConfig, Error> {
        let mode = match self.optics.mode.as_str() {
            "facing" => Mode::Facing,
            "spectrometer" => Mode::Spectrometer {
                center_nm: self.optics.grating_center_nm,
                fwhm_nm: self.optics.grating_fwhm_nm,
            },
            other => return Err(Error::Config(format!("unknown optics mode {other:?}"))),
        };
        let cfg = SimConfig {
            detector1: build_detector(&self.detector1)?,
            detector2: build_detector(&self.detector2)?,
            optics: OpticsConfig {
                mode,
                solid_angle_1to2_sr: self.optics.solid_angle_1to2_sr,
                solid_angle_2to1_sr: self.optics.solid_angle_2to1_sr,
                delay_line_ns: self.optics.delay_line_ns,
                coupling_efficiency: self.optics.coupling_efficiency,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Engine config and plan for a grating scan. The scan bench replaces
    /// the ambient rates and geometry, looks only at photons from detector 1,
    /// and runs without the delay line so the gate sees raw time differences.
    pub fn to_scan_config(&self) -> Result<(SimConfig, ScanPlan), Error> {
        let s = &self.scan;
        if !(s.step_nm > 0.0) || !s.step_nm.is_finite() {
            return Err(Error::Config(format!(
                "scan step must be positive, got {}",
                s.step_nm
            )));
        }
        if !s.start_nm.is_finite() || !s.stop_nm.is_finite() || s.stop_nm < s.start_nm {
            return Err(Error::Config(format!(
                "bad scan range {}..{} nm",
                s.start_nm, s.stop_nm
            )));
        }
        if !(s.alpha > 0.0) || !s.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                s.alpha
            )));
        }
        let n = ((s.stop_nm - s.start_nm) / s.step_nm).round() as usize + 1;
        let centers_nm = (0..n).map(|k| s.start_nm + s.step_nm * k as f64).collect();

        let mut detector1 = self.detector1.clone();
        detector1.ambient_rate_cps = s.detector1_ambient_cps;
        let mut detector2 = self.detector2.clone();
        detector2.ambient_rate_cps = s.detector2_ambient_cps;
        let cfg = SimConfig {
            detector1: build_detector(&detector1)?,
            detector2: build_detector(&detector2)?,
            optics: OpticsConfig {
                mode: Mode::Spectrometer {
                    center_nm: self.optics.grating_center_nm,
                    fwhm_nm: self.optics.grating_fwhm_nm,
                },
                solid_angle_1to2_sr: s.solid_angle_sr,
                solid_angle_2to1_sr: 0.0,
                delay_line_ns: 0.0,
                coupling_efficiency: self.optics.coupling_efficiency,
            },
        };
        cfg.validate()?;
        let plan = ScanPlan {
            centers_nm,
            integration_time_s: s.integration_time_s,
            gate_ns: s.coincidence_gate_ns,
        };
        Ok((cfg, plan))
    }

    /// Detection efficiency curve of detector 1, as used by the audit.
    pub fn detection_efficiency(&self) -> Result<SpectralCurve, Error> {
        efficiency_curve(&self.detector1)
    }
}

fn curve_from(name: &str, builtin: fn() -> SpectralCurve) -> Result<SpectralCurve, Error> {
    if name == BUILTIN {
        Ok(builtin())
    } else {
        SpectralCurve::load(Path::new(name))
    }
}

fn efficiency_curve(d: &DetectorSettings) -> Result<SpectralCurve, Error> {
    curve_from(&d.pe_generation_file, builtin_pe_generation)?.scaled(d.pe_detection_efficiency)
}

fn build_detector(d: &DetectorSettings) -> Result<DetectorConfig, Error> {
    let efficiency = efficiency_curve(d)?;
    let detected = curve_from(&d.spectrum_file, builtin_flash_spectrum)?;
    let timing = BreakdownProfile {
        total_charge_pc: d.total_charge_pc,
        decay_tau_ns: d.decay_tau_ns,
        jitter_sigma_ns: d.jitter_sigma_ns,
        onset_t0_ns: d.onset_t0_ns,
        overvoltage_v: d.overvoltage_v,
    };
    let emission = EmissionModel::from_detected_reference(
        d.true_intensity_per_sr,
        &detected,
        &efficiency,
        timing,
    )?;
    Ok(DetectorConfig {
        dark_rate_cps: d.dark_rate_cps,
        ambient_rate_cps: d.ambient_rate_cps,
        dead_time_ns: d.dead_time_ns,
        efficiency,
        emission,
    })
}
