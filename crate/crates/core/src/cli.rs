//! Command-line surface. Plumbing only: flags in, files and printed
//! summaries out.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::emission::{builtin_flash_spectrum, SpectralCurve};
use crate::error::Error;
use crate::io::Provenance;
use crate::leakage::{audit, render_report, AuditInputs};
use crate::sim::{read_events, simulate, simulate_scan, write_events};
use crate::spectrum::{
    locate_features, normalize_spectrum, read_scan, write_scan, SpectralFeature,
};
use crate::timing::{
    accidental_rate, build_histogram, differential_intensity, fit_emg_peak, write_histogram,
    PeakSide,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "backflash",
    version,
    about = "Breakdown-flash simulator and analysis chain"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the two-detector bench and write the merged event stream.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Wall-clock time to simulate, in seconds.
        #[arg(long)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override the configured optics mode.
        #[arg(long, value_parser = ["facing", "spectrometer"])]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram the time differences in an event file and report
    /// coincidence statistics.
    Analyze {
        events: PathBuf,
        /// Histogram bin width in ns.
        #[arg(long)]
        bin: Option<f64>,
        /// Histogram window as LO:HI in ns.
        #[arg(long, allow_hyphen_values = true)]
        window: Option<String>,
        /// Write the histogram to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fit the flash peak and print the shape parameters.
        #[arg(long)]
        fit: bool,
    },
    /// Step the grating across the configured range and record coincidence
    /// counts per position.
    Scan {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Worker threads; the output is independent of this.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize a scan file into a relative intensity spectrum.
    Spectrum {
        scan: PathBuf,
        /// Normalization constant; defaults to the value recorded in the
        /// scan file header.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also report maxima and falling edges.
        #[arg(long)]
        features: bool,
    },
    /// Estimate single-mode photon leakage from a measured spectrum.
    Leakage {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Measured spectrum CSV; defaults to the built-in reference.
        #[arg(long)]
        spectrum: Option<PathBuf>,
        /// Detection efficiency CSV; defaults to the configured curve.
        #[arg(long)]
        eta: Option<PathBuf>,
        /// Differential intensity in photons/sr per breakdown.
        #[arg(long)]
        diff_intensity: Option<f64>,
        /// Active-area diameter in um.
        #[arg(long)]
        diameter: Option<f64>,
        /// Wavelength range as LO:HI in nm.
        #[arg(long)]
        range: Option<String>,
        /// Transmission curve of a blocking filter.
        #[arg(long)]
        filter: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pair(text: &str, what: &str) -> Result<(f64, f64), Error> {
    let parsed = text
        .split_once(':')
        .and_then(|(a, b)| Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?)));
    parsed.ok_or_else(|| Error::Config(format!("{what} must be LO:HI, got {text:?}")))
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

pub fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate {
            config,
            duration,
            seed,
            mode,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(mode) = mode {
                cfg.optics.mode = mode;
            }
            cmd_simulate(&cfg, duration, seed, &out)
        }
        Command::Analyze {
            events,
            bin,
            window,
            out,
            fit,
        } => cmd_analyze(&events, bin, window.as_deref(), out.as_deref(), fit),
        Command::Scan {
            config,
            seed,
            jobs,
            out,
        } => cmd_scan(&load_config(&config)?, seed, jobs, &out),
        Command::Spectrum {
            scan,
            alpha,
            out,
            features,
        } => cmd_spectrum(&scan, alpha, out.as_deref(), features),
        Command::Leakage {
            config,
            spectrum,
            eta,
            diff_intensity,
            diameter,
            range,
            filter,
            out,
        } => {
            let cfg = load_config(&config)?;
            cmd_leakage(
                &cfg,
                spectrum.as_deref(),
                eta.as_deref(),
                diff_intensity,
                diameter,
                range.as_deref(),
                filter.as_deref(),
                out.as_deref(),
            )
        }
    }
}

fn cmd_simulate(cfg: &RunConfig, duration: f64, seed: u64, out: &Path) -> Result<(), Error> {
    let sim = cfg.to_sim_config()?;
    let events = simulate(&sim, duration, seed)?;
    let n1 = events.iter().filter(|e| e.detector_id == 1).count() as f64;
    let n2 = events.len() as f64 - n1;
    let (r1, r2) = (n1 / duration, n2 / duration);

    let mut prov = Provenance::new(VERSION, &cfg.checksum(), seed);
    prov.push("duration_s", duration.to_string());
    prov.push("mode", cfg.optics.mode.clone());
    prov.push(
        "solid_angle_1to2_sr",
        cfg.optics.solid_angle_1to2_sr.to_string(),
    );
    prov.push("delay_line_ns", cfg.optics.delay_line_ns.to_string());
    let mut w = create(out)?;
    write_events(&mut w, &events, &prov).map_err(|e| Error::io(out, e))?;
    w.flush().map_err(|e| Error::io(out, e))?;

    let window = cfg.analysis.peak_window_end_ns - cfg.analysis.peak_window_start_ns;
    println!(
        "wrote {} events to {} ({} on detector 1, {} on detector 2)",
        events.len(),
        out.display(),
        n1 as u64,
        n2 as u64
    );
    println!("singles rates: r1 = {r1:.1} /s, r2 = {r2:.1} /s");
    println!(
        "accidental coincidences expected in a {window} ns window: {:.4} /s",
        accidental_rate(r1, r2, window)?
    );
    Ok(())
}

fn cmd_analyze(
    events_path: &Path,
    bin: Option<f64>,
    window: Option<&str>,
    out: Option<&Path>,
    fit: bool,
) -> Result<(), Error> {
    let defaults = RunConfig::default().analysis;
    let (events, prov) = read_events(events_path)?;
    let label = events_path.display().to_string();
    let duration = prov.get_f64("duration_s", &label)?;
    let omega = prov.get_f64("solid_angle_1to2_sr", &label)?;
    let bin = bin.unwrap_or(defaults.bin_width_ns);
    let window = match window {
        Some(text) => parse_pair(text, "--window")?,
        None => (defaults.window_start_ns, defaults.window_end_ns),
    };

    let mut hist = build_histogram(&events, bin, window)?;
    hist.set_total_time(duration)?;
    let (n1, _) = hist.singles();
    let (r1, r2) = (hist.rate1_cps().unwrap(), hist.rate2_cps().unwrap());
    println!("{} events over {duration} s", events.len());
    println!("singles rates: r1 = {r1:.1} /s, r2 = {r2:.1} /s");

    let (peak_lo, peak_hi) = (defaults.peak_window_start_ns, defaults.peak_window_end_ns);
    let n_c = hist.counts_in_window(peak_lo, peak_hi)?;
    let n_acc = hist.expected_accidentals(peak_lo, peak_hi)?;
    let net = n_c as f64 - n_acc;
    println!(
        "peak window {peak_lo}..{peak_hi} ns: n_c = {n_c}, accidentals = {n_acc:.2}, net = {net:.2}"
    );
    println!(
        "differential intensity dn_L/dOmega = {:.2} photons/sr per breakdown",
        differential_intensity(net, n1 as f64, omega)?
    );

    if fit {
        let f = fit_emg_peak(&hist, PeakSide::Left, None)?;
        println!("flash peak fit, tail toward earlier delays:");
        println!(
            "  amplitude = {:.1} +- {:.1} counts",
            f.amplitude, f.amplitude_err
        );
        println!("  t0    = {:.4} +- {:.4} ns", f.t0_ns, f.t0_err_ns);
        println!("  tau   = {:.4} +- {:.4} ns", f.tau_ns, f.tau_err_ns);
        println!("  sigma = {:.4} +- {:.4} ns", f.sigma_ns, f.sigma_err_ns);
        println!(
            "  baseline = {:.3} +- {:.3} per bin, chi2/dof = {:.1}/{}",
            f.baseline_per_bin, f.baseline_err, f.chi2, f.dof
        );
    }

    if let Some(out) = out {
        let mut w = create(out)?;
        write_histogram(&mut w, &hist, &prov).map_err(|e| Error::io(out, e))?;
        w.flush().map_err(|e| Error::io(out, e))?;
        println!("histogram written to {}", out.display());
    }
    Ok(())
}

fn cmd_scan(cfg: &RunConfig, seed: u64, jobs: usize, out: &Path) -> Result<(), Error> {
    let (sim, plan) = cfg.to_scan_config()?;
    let points = simulate_scan(&sim, &plan, seed, jobs)?;
    let mut prov = Provenance::new(VERSION, &cfg.checksum(), seed);
    prov.push("alpha", cfg.scan.alpha.to_string());
    prov.push("integration_time_s", plan.integration_time_s.to_string());
    prov.push("gate_ns", plan.gate_ns.to_string());
    prov.push("solid_angle_sr", cfg.scan.solid_angle_sr.to_string());
    let mut w = create(out)?;
    write_scan(&mut w, &points, &prov).map_err(|e| Error::io(out, e))?;
    w.flush().map_err(|e| Error::io(out, e))?;
    let pairs: u64 = points.iter().map(|p| p.n_c).sum();
    println!(
        "scanned {} grating positions at {} s each: {} coincidences, written to {}",
        points.len(),
        plan.integration_time_s,
        pairs,
        out.display()
    );
    Ok(())
}

fn cmd_spectrum(
    scan_path: &Path,
    alpha: Option<f64>,
    out: Option<&Path>,
    features: bool,
) -> Result<(), Error> {
    let (points, mut prov) = read_scan(scan_path)?;
    let label = scan_path.display().to_string();
    let alpha = match alpha {
        Some(a) => a,
        None => prov.get_f64("alpha", &label)?,
    };
    let spectrum = normalize_spectrum(&points, alpha)?;
    println!(
        "normalized {} scan points with alpha = {alpha}",
        spectrum.curve.points().len()
    );
    if !spectrum.excluded_nm.is_empty() {
        println!(
            "excluded (no breakdowns recorded): {:?} nm",
            spectrum.excluded_nm
        );
    }
    if !spectrum.clamped_nm.is_empty() {
        println!(
            "clamped {} negative net intensities to zero",
            spectrum.clamped_nm.len()
        );
    }
    if features {
        for f in locate_features(&spectrum.curve) {
            match f {
                SpectralFeature::Maximum {
                    wavelength_nm,
                    value,
                } => {
                    println!("maximum at {wavelength_nm:.1} nm (intensity {value:.4})");
                }
                SpectralFeature::Edge {
                    wavelength_nm,
                    slope_per_nm,
                } => {
                    println!(
                        "falling edge at {wavelength_nm:.1} nm (slope {slope_per_nm:.4} per nm)"
                    );
                }
            }
        }
    }
    if let Some(out) = out {
        prov.push("alpha_applied", alpha.to_string());
        let mut w = create(out)?;
        prov.write(&mut w).map_err(|e| Error::io(out, e))?;
        spectrum
            .curve
            .write_csv(&mut w, &[])
            .map_err(|e| Error::io(out, e))?;
        w.flush().map_err(|e| Error::io(out, e))?;
        println!("spectrum written to {}", out.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_leakage(
    cfg: &RunConfig,
    spectrum: Option<&Path>,
    eta: Option<&Path>,
    diff_intensity: Option<f64>,
    diameter: Option<f64>,
    range: Option<&str>,
    filter: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Error> {
    let spectrum = match spectrum {
        Some(p) => SpectralCurve::load(p)?,
        None => builtin_flash_spectrum(),
    };
    let eta = match eta {
        Some(p) => SpectralCurve::load(p)?,
        None => cfg.detection_efficiency()?,
    };
    let filter = filter.map(SpectralCurve::load).transpose()?;
    let range_nm = match range {
        Some(text) => parse_pair(text, "--range")?,
        None => (cfg.audit.range_lo_nm, cfg.audit.range_hi_nm),
    };
    let budget = audit(&AuditInputs {
        spectrum: &spectrum,
        efficiency: &eta,
        diff_intensity_per_sr: diff_intensity.unwrap_or(cfg.audit.diff_intensity_per_sr),
        active_diameter_um: diameter.unwrap_or(cfg.audit.active_diameter_um),
        reference_brilliance_per_sr_um2: cfg.audit.reference_brilliance_per_sr_um2,
        range_nm,
        filter: filter.as_ref(),
    })?;
    let report = render_report(&budget, &Provenance::new(VERSION, &cfg.checksum(), 0));
    print!("{report}");
    if let Some(out) = out {
        std::fs::write(out, &report).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_parsing() {
        assert_eq!(parse_pair("-40:100", "--window").unwrap(), (-40.0, 100.0));
        assert_eq!(
            parse_pair("700 : 1050", "--range").unwrap(),
            (700.0, 1050.0)
        );
        assert!(parse_pair("700", "--range").is_err());
        assert!(parse_pair("a:b", "--range").is_err());
    }

    #[test]
    fn simulate_then_analyze_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let events = dir.path().join("events.csv");
        let hist = dir.path().join("hist.csv");
        run(Cli::parse_from([
            "backflash",
            "simulate",
            "--duration",
            "0.5",
            "--seed",
            "7",
            "--out",
            events.to_str().unwrap(),
        ]))
        .unwrap();
        let first = std::fs::read(&events).unwrap();
        run(Cli::parse_from([
            "backflash",
            "simulate",
            "--duration",
            "0.5",
            "--seed",
            "7",
            "--out",
            events.to_str().unwrap(),
        ]))
        .unwrap();
        assert_eq!(
            first,
            std::fs::read(&events).unwrap(),
            "rerun must be byte-identical"
        );
        run(Cli::parse_from([
            "backflash",
            "analyze",
            events.to_str().unwrap(),
            "--window",
            "-40:100",
            "--out",
            hist.to_str().unwrap(),
        ]))
        .unwrap();
        let text = std::fs::read_to_string(&hist).unwrap();
        assert!(text.contains("bin_start_ns,count"));
        assert!(text.contains("# duration_s = 0.5"));
    }

    #[test]
    fn leakage_report_prints_and_writes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report.txt");
        run(Cli::parse_from([
            "backflash",
            "leakage",
            "--out",
            out.to_str().unwrap(),
        ]))
        .unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.contains("characterized reference"));
        assert!(text.contains("lambda^2/(8pi)"));
        let last = text.lines().last().unwrap();
        assert_eq!(last.split(',').count(), 9);
    }

    #[test]
    fn malformed_events_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "detector_id,timestamp_ns\n1,0.5\n3,two\n").unwrap();
        let err = run(Cli::parse_from([
            "backflash",
            "analyze",
            path.to_str().unwrap(),
        ]))
        .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("wrong error {other:?}"),
        }
    }
}
