//! Two-detector Monte Carlo engine.
//!
//! Each detector produces background counts (dark + ambient) and, on every
//! accepted count, emits a breakdown flash toward the other detector. Flash
//! photons that survive the optical path and the target's detection
//! efficiency become new count candidates, so chains of mutual triggering
//! arise naturally and are limited by dead time. Candidates are processed in
//! time order from a priority queue; a candidate is accepted only if the
//! detector has been live for its full dead time.
//!
//! Detector 1's output timestamps pass through a delay line before they are
//! recorded, which shifts its events late relative to detector 2 in the
//! merged stream. Records are delivered to the caller sorted by output time.

use std::collections::{BinaryHeap, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::emission::{sample_flash, EmissionModel, SpectralCurve};
use crate::error::Error;
use crate::io::Provenance;
use crate::spectrum::SpectralScanPoint;

/// One detector: background rates, dead time, detection efficiency for
/// incoming photons, and the flash it emits when it breaks down.
#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub dark_rate_cps: f64,
    pub ambient_rate_cps: f64,
    pub dead_time_ns: f64,
    /// Probability that an incident photon of a given wavelength produces a
    /// count. Values must lie in [0, 1].
    pub efficiency: SpectralCurve,
    pub emission: EmissionModel,
}

/// Optical arrangement between the two detectors.
#[derive(Debug, Clone)]
pub enum Mode {
    /// Detectors face each other directly.
    Facing,
    /// A grating monochromator sits in the shared path; photons in both
    /// directions see its Gaussian passband.
    Spectrometer { center_nm: f64, fwhm_nm: f64 },
}

#[derive(Debug, Clone)]
pub struct OpticsConfig {
    pub mode: Mode,
    /// Solid angle of detector 2's aperture as seen from detector 1 (sr).
    pub solid_angle_1to2_sr: f64,
    /// Solid angle of detector 1's aperture as seen from detector 2 (sr).
    pub solid_angle_2to1_sr: f64,
    /// Electronic delay added to detector 1's output timestamps (ns).
    pub delay_line_ns: f64,
    /// Wavelength-independent transmission of the shared path, in [0, 1].
    pub coupling_efficiency: f64,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub detector1: DetectorConfig,
    pub detector2: DetectorConfig,
    pub optics: OpticsConfig,
}

/// Gaussian passband with unit peak transmission.
pub fn grating_transmission(wavelength_nm: f64, center_nm: f64, fwhm_nm: f64) -> f64 {
    let sigma = fwhm_nm / (8.0 * std::f64::consts::LN_2).sqrt();
    let z = (wavelength_nm - center_nm) / sigma;
    (-0.5 * z * z).exp()
}

impl DetectorConfig {
    fn validate(&self, name: &str) -> Result<(), Error> {
        let nonneg = |v: f64, what: &str| -> Result<(), Error> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name}: {what} must be finite and nonnegative, got {v}"
                )))
            }
        };
        nonneg(self.dark_rate_cps, "dark rate")?;
        nonneg(self.ambient_rate_cps, "ambient rate")?;
        nonneg(self.dead_time_ns, "dead time")?;
        if self.efficiency.points().iter().any(|&(_, v)| v > 1.0) {
            return Err(Error::Config(format!(
                "{name}: efficiency values must not exceed 1"
            )));
        }
        Ok(())
    }

    fn background_rate_per_ns(&self) -> f64 {
        (self.dark_rate_cps + self.ambient_rate_cps) * 1e-9
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.detector1.validate("detector1")?;
        self.detector2.validate("detector2")?;
        let o = &self.optics;
        let max_sr = 4.0 * std::f64::consts::PI;
        for (v, what) in [
            (o.solid_angle_1to2_sr, "solid_angle_1to2_sr"),
            (o.solid_angle_2to1_sr, "solid_angle_2to1_sr"),
        ] {
            if !v.is_finite() || v < 0.0 || v > max_sr {
                return Err(Error::Config(format!("{what} = {v} outside [0, 4 pi]")));
            }
        }
        if !o.delay_line_ns.is_finite() || o.delay_line_ns < 0.0 {
            return Err(Error::Config(
                "delay_line_ns must be finite and nonnegative".into(),
            ));
        }
        if !o.coupling_efficiency.is_finite() || !(0.0..=1.0).contains(&o.coupling_efficiency) {
            return Err(Error::Config(
                "coupling_efficiency must lie in [0, 1]".into(),
            ));
        }
        if let Mode::Spectrometer { center_nm, fwhm_nm } = o.mode {
            if !(center_nm > 0.0) || !center_nm.is_finite() {
                return Err(Error::Config("grating center must be positive".into()));
            }
            if !(fwhm_nm > 0.0) || !fwhm_nm.is_finite() {
                return Err(Error::Config("grating width must be positive".into()));
            }
        }
        // a flash from one detector is thinned by the other's efficiency, so
        // the efficiency table must cover the emission spectrum
        let paths = [
            (
                &self.detector1,
                &self.detector2,
                o.solid_angle_1to2_sr,
                "detector2",
            ),
            (
                &self.detector2,
                &self.detector1,
                o.solid_angle_2to1_sr,
                "detector1",
            ),
        ];
        for (src, dst, omega, dst_name) in paths {
            if src.emission.intensity_per_sr() <= 0.0 || omega <= 0.0 {
                continue;
            }
            let (elo, ehi) = src.emission.spectrum().domain();
            let (dlo, dhi) = dst.efficiency.domain();
            if elo < dlo || ehi > dhi {
                return Err(Error::Config(format!(
                    "{dst_name} efficiency covers {dlo}..{dhi} nm but incoming flash spans {elo}..{ehi} nm"
                )));
            }
        }
        Ok(())
    }
}

/// One recorded count in the merged output stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    /// 1 or 2.
    pub detector_id: u8,
    /// Output time (after the delay line for detector 1), ns.
    pub timestamp_ns: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    time_ns: f64,
    seq: u64,
    kind: Kind,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Background { det: usize },
    Photon { det: usize },
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq && self.time_ns.total_cmp(&other.time_ns).is_eq()
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time_ns
            .total_cmp(&other.time_ns)
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingRecord {
    time_ns: f64,
    seq: u64,
    detector_id: u8,
}

impl PartialEq for PendingRecord {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq && self.time_ns.total_cmp(&other.time_ns).is_eq()
    }
}
impl Eq for PendingRecord {}
impl PartialOrd for PendingRecord {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PendingRecord {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time_ns
            .total_cmp(&other.time_ns)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Timing jitter can place a flash photon slightly before its breakdown, so
/// processing time is not quite monotone. Records are held back this long
/// (plus the delay line, implicitly) before being released in sorted order;
/// the jitter is sub-ns, so 100 ns is far beyond any reachable inversion.
const REORDER_SLACK_NS: f64 = 100.0;

struct Engine<'a, R: Rng> {
    cfg: &'a SimConfig,
    duration_ns: f64,
    heap: BinaryHeap<std::cmp::Reverse<Candidate>>,
    pending: BinaryHeap<std::cmp::Reverse<PendingRecord>>,
    seq: u64,
    last_count_ns: [f64; 2],
    counts: [u64; 2],
    rng: &'a mut R,
}

impl<'a, R: Rng> Engine<'a, R> {
    fn push_candidate(&mut self, time_ns: f64, kind: Kind) {
        let seq = self.seq;
        self.seq += 1;
        self.heap
            .push(std::cmp::Reverse(Candidate { time_ns, seq, kind }));
    }

    fn detector(&self, det: usize) -> &DetectorConfig {
        if det == 0 {
            &self.cfg.detector1
        } else {
            &self.cfg.detector2
        }
    }

    fn schedule_background(&mut self, det: usize, from_ns: f64) {
        let rate = self.detector(det).background_rate_per_ns();
        if rate <= 0.0 {
            return;
        }
        let next = from_ns + self.rng.sample::<f64, _>(rand_distr::Exp1) / rate;
        if next <= self.duration_ns {
            self.push_candidate(next, Kind::Background { det });
        }
    }

    fn attempt_count(&mut self, det: usize, t: f64) -> Result<(), Error> {
        let dead = self.detector(det).dead_time_ns;
        if t < self.last_count_ns[det] + dead {
            return Ok(());
        }
        self.last_count_ns[det] = t;
        if t >= 0.0 && t <= self.duration_ns {
            self.counts[det] += 1;
            let out = if det == 0 {
                t + self.cfg.optics.delay_line_ns
            } else {
                t
            };
            let seq = self.seq;
            self.seq += 1;
            self.pending.push(std::cmp::Reverse(PendingRecord {
                time_ns: out,
                seq,
                detector_id: det as u8 + 1,
            }));
        }
        self.emit_flash(det, t)
    }

    fn emit_flash(&mut self, det: usize, t: f64) -> Result<(), Error> {
        let (omega, other) = if det == 0 {
            (self.cfg.optics.solid_angle_1to2_sr, 1)
        } else {
            (self.cfg.optics.solid_angle_2to1_sr, 0)
        };
        if omega <= 0.0 {
            return Ok(());
        }
        let emission = if det == 0 {
            &self.cfg.detector1.emission
        } else {
            &self.cfg.detector2.emission
        };
        let photons = sample_flash(emission, t, omega, self.rng)?;
        for photon in photons {
            let mut p = self.cfg.optics.coupling_efficiency
                * self
                    .detector(other)
                    .efficiency
                    .value_at(photon.wavelength_nm);
            if let Mode::Spectrometer { center_nm, fwhm_nm } = self.cfg.optics.mode {
                p *= grating_transmission(photon.wavelength_nm, center_nm, fwhm_nm);
            }
            let survives = self.rng.gen::<f64>() < p;
            if survives && photon.emission_time_ns <= self.duration_ns {
                self.push_candidate(photon.emission_time_ns, Kind::Photon { det: other });
            }
        }
        Ok(())
    }

    fn flush_pending<F: FnMut(EventRecord)>(&mut self, up_to_ns: f64, sink: &mut F) {
        while let Some(std::cmp::Reverse(p)) = self.pending.peek() {
            if p.time_ns > up_to_ns {
                break;
            }
            let p = self.pending.pop().unwrap().0;
            sink(EventRecord {
                detector_id: p.detector_id,
                timestamp_ns: p.time_ns,
            });
        }
    }
}

/// Runs the engine for `duration_s`, delivering records sorted by output
/// time to `sink`. Returns the per-detector count totals.
pub fn simulate_with<R: Rng, F: FnMut(EventRecord)>(
    cfg: &SimConfig,
    duration_s: f64,
    rng: &mut R,
    mut sink: F,
) -> Result<[u64; 2], Error> {
    cfg.validate()?;
    if !duration_s.is_finite() || !(duration_s > 0.0) {
        return Err(Error::Config(format!(
            "duration must be positive, got {duration_s} s"
        )));
    }
    let mut engine = Engine {
        cfg,
        duration_ns: duration_s * 1e9,
        heap: BinaryHeap::new(),
        pending: BinaryHeap::new(),
        seq: 0,
        last_count_ns: [f64::NEG_INFINITY; 2],
        counts: [0; 2],
        rng,
    };
    for det in 0..2 {
        engine.schedule_background(det, 0.0);
    }
    while let Some(std::cmp::Reverse(c)) = engine.heap.pop() {
        engine.flush_pending(c.time_ns - REORDER_SLACK_NS, &mut sink);
        match c.kind {
            Kind::Background { det } => {
                engine.schedule_background(det, c.time_ns);
                engine.attempt_count(det, c.time_ns)?;
            }
            Kind::Photon { det } => {
                engine.attempt_count(det, c.time_ns)?;
            }
        }
    }
    engine.flush_pending(f64::INFINITY, &mut sink);
    Ok(engine.counts)
}

/// Convenience wrapper: seeds the generator, collects all records.
pub fn simulate(cfg: &SimConfig, duration_s: f64, seed: u64) -> Result<Vec<EventRecord>, Error> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    simulate_with(cfg, duration_s, &mut rng, |e| events.push(e))?;
    Ok(events)
}

/// Streaming coincidence counter for pairs with `0 < t2 - t1 <= gate_ns`,
/// where t1 is a detector 1 record and t2 a detector 2 record. Input must be
/// sorted by timestamp.
#[derive(Debug, Clone)]
pub struct CoincidenceGate {
    gate_ns: f64,
    recent_det1: VecDeque<f64>,
    pairs: u64,
}

impl CoincidenceGate {
    pub fn new(gate_ns: f64) -> Self {
        CoincidenceGate {
            gate_ns,
            recent_det1: VecDeque::new(),
            pairs: 0,
        }
    }

    pub fn push(&mut self, event: &EventRecord) {
        match event.detector_id {
            1 => self.recent_det1.push_back(event.timestamp_ns),
            2 => {
                let t2 = event.timestamp_ns;
                while let Some(&front) = self.recent_det1.front() {
                    if front < t2 - self.gate_ns {
                        self.recent_det1.pop_front();
                    } else {
                        break;
                    }
                }
                self.pairs += self.recent_det1.iter().filter(|&&t1| t1 < t2).count() as u64;
            }
            _ => {}
        }
    }

    pub fn pairs(&self) -> u64 {
        self.pairs
    }
}

/// Wavelength scan: one spectrometer-mode run per grating position.
#[derive(Debug, Clone)]
pub struct ScanPlan {
    pub centers_nm: Vec<f64>,
    pub integration_time_s: f64,
    pub gate_ns: f64,
}

/// Runs `plan` against `base` (which must be in spectrometer mode; its
/// grating center is overridden point by point). Point `i` uses stream `i`
/// of the seeded generator, so results do not depend on `jobs` or on which
/// other points are simulated.
pub fn simulate_scan(
    base: &SimConfig,
    plan: &ScanPlan,
    seed: u64,
    jobs: usize,
) -> Result<Vec<SpectralScanPoint>, Error> {
    base.validate()?;
    if !matches!(base.optics.mode, Mode::Spectrometer { .. }) {
        return Err(Error::Config("scan requires spectrometer mode".into()));
    }
    if plan.centers_nm.is_empty() {
        return Err(Error::Config("scan has no grating positions".into()));
    }
    if plan.centers_nm.iter().any(|c| !c.is_finite() || *c <= 0.0) {
        return Err(Error::Config("grating positions must be positive".into()));
    }
    if !(plan.integration_time_s > 0.0) || !plan.integration_time_s.is_finite() {
        return Err(Error::Config("integration time must be positive".into()));
    }
    if !(plan.gate_ns > 0.0) || !plan.gate_ns.is_finite() {
        return Err(Error::Config("coincidence gate must be positive".into()));
    }

    let run_point = |i: usize| -> Result<SpectralScanPoint, Error> {
        let mut cfg = base.clone();
        if let Mode::Spectrometer { center_nm, .. } = &mut cfg.optics.mode {
            *center_nm = plan.centers_nm[i];
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut gate = CoincidenceGate::new(plan.gate_ns);
        let counts = simulate_with(&cfg, plan.integration_time_s, &mut rng, |e| gate.push(&e))?;
        Ok(SpectralScanPoint {
            wavelength_nm: plan.centers_nm[i],
            n_c: gate.pairs(),
            n_1: counts[0],
            n_2: counts[1],
            integration_time_s: plan.integration_time_s,
            gate_ns: plan.gate_ns,
        })
    };

    let n = plan.centers_nm.len();
    let jobs = jobs.max(1).min(n);
    if jobs == 1 {
        return (0..n).map(run_point).collect();
    }
    let chunk = n.div_ceil(jobs);
    let mut points = Vec::with_capacity(n);
    std::thread::scope(|scope| -> Result<(), Error> {
        let mut handles = Vec::new();
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let run_point = &run_point;
            handles.push(
                scope.spawn(move || -> Result<Vec<_>, Error> {
                    (start..end).map(run_point).collect()
                }),
            );
        }
        for h in handles {
            points.extend(h.join().expect("scan worker panicked")?);
        }
        Ok(())
    })?;
    Ok(points)
}

pub const EVENTS_HEADER: &str = "detector_id,timestamp_ns";

/// Writes the merged event stream with its provenance header.
pub fn write_events<W: Write>(
    mut w: W,
    events: &[EventRecord],
    provenance: &Provenance,
) -> std::io::Result<()> {
    provenance.write(&mut w)?;
    writeln!(w, "{EVENTS_HEADER}")?;
    for e in events {
        writeln!(w, "{},{:.4}", e.detector_id, e.timestamp_ns)?;
    }
    Ok(())
}

/// Reads an event stream, enforcing the header, detector ids 1 and 2,
/// nonnegative finite timestamps, and nondecreasing order.
pub fn read_events(path: &Path) -> Result<(Vec<EventRecord>, Provenance), Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let label = path.display().to_string();
    let mut provenance = Provenance::default();
    let mut events: Vec<EventRecord> = Vec::new();
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
            if trimmed != EVENTS_HEADER {
                return Err(Error::Parse {
                    path: label,
                    line: line_no,
                    message: format!("expected header '{EVENTS_HEADER}', found '{trimmed}'"),
                });
            }
            saw_header = true;
            continue;
        }
        let (id_str, t_str) = trimmed.split_once(',').ok_or_else(|| Error::Parse {
            path: label.clone(),
            line: line_no,
            message: "expected two comma-separated fields".into(),
        })?;
        let parse_err = |message: String| Error::Parse {
            path: label.clone(),
            line: line_no,
            message,
        };
        let detector_id: u8 = id_str
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad detector id '{id_str}'")))?;
        if detector_id != 1 && detector_id != 2 {
            return Err(parse_err(format!(
                "detector id must be 1 or 2, got {detector_id}"
            )));
        }
        let timestamp_ns: f64 = t_str
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad timestamp '{t_str}'")))?;
        if !timestamp_ns.is_finite() || timestamp_ns < 0.0 {
            return Err(parse_err(format!(
                "timestamp must be finite and nonnegative, got {timestamp_ns}"
            )));
        }
        if let Some(prev) = events.last() {
            if timestamp_ns < prev.timestamp_ns {
                return Err(Error::UnsortedEvents {
                    index: events.len(),
                });
            }
        }
        events.push(EventRecord {
            detector_id,
            timestamp_ns,
        });
    }
    if !saw_header {
        return Err(Error::Parse {
            path: label,
            line: 1,
            message: format!("missing '{EVENTS_HEADER}' header"),
        });
    }
    Ok((events, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::BreakdownProfile;
    use crate::emission::{builtin_flash_spectrum, builtin_pe_generation};

    fn canonical_timing() -> BreakdownProfile {
        BreakdownProfile {
            total_charge_pc: 64.0,
            decay_tau_ns: 2.75,
            jitter_sigma_ns: 0.72,
            onset_t0_ns: 2.0,
            overvoltage_v: 20.0,
        }
    }

    fn canonical_detector(dark: f64, ambient: f64, intensity: f64) -> DetectorConfig {
        let efficiency = builtin_pe_generation().scaled(0.55).unwrap();
        let emission = EmissionModel::from_detected_reference(
            intensity,
            &builtin_flash_spectrum(),
            &efficiency,
            canonical_timing(),
        )
        .unwrap();
        DetectorConfig {
            dark_rate_cps: dark,
            ambient_rate_cps: ambient,
            dead_time_ns: 1000.0,
            efficiency,
            emission,
        }
    }

    fn facing_config(intensity: f64) -> SimConfig {
        SimConfig {
            detector1: canonical_detector(500.0, 2127.7, intensity),
            detector2: canonical_detector(500.0, 183.6, intensity),
            optics: OpticsConfig {
                mode: Mode::Facing,
                solid_angle_1to2_sr: 4.67e-4,
                solid_angle_2to1_sr: 4.67e-4,
                delay_line_ns: 63.0,
                coupling_efficiency: 1.0,
            },
        }
    }

    #[test]
    fn grating_passband_shape() {
        assert!((grating_transmission(860.0, 860.0, 3.3) - 1.0).abs() < 1e-15);
        let half_lo = grating_transmission(860.0 - 1.65, 860.0, 3.3);
        let half_hi = grating_transmission(860.0 + 1.65, 860.0, 3.3);
        assert!((half_lo - 0.5).abs() < 1e-12);
        assert!((half_hi - 0.5).abs() < 1e-12);
        assert!(grating_transmission(900.0, 860.0, 3.3) < 1e-70);
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let cfg = facing_config(142.76);
        let a = simulate(&cfg, 0.2, 7).unwrap();
        let b = simulate(&cfg, 0.2, 7).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
        let c = simulate(&cfg, 0.2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_is_sorted_and_in_range() {
        let cfg = facing_config(142.76);
        let events = simulate(&cfg, 0.5, 21).unwrap();
        for pair in events.windows(2) {
            assert!(pair[1].timestamp_ns >= pair[0].timestamp_ns);
        }
        let duration_ns = 0.5e9;
        for e in &events {
            assert!(e.timestamp_ns >= 0.0);
            assert!(e.timestamp_ns <= duration_ns + cfg.optics.delay_line_ns);
        }
    }

    #[test]
    fn dead_time_separates_counts() {
        let cfg = facing_config(142.76);
        let events = simulate(&cfg, 0.5, 33).unwrap();
        for id in [1u8, 2u8] {
            let mut prev: Option<f64> = None;
            for e in events.iter().filter(|e| e.detector_id == id) {
                if let Some(p) = prev {
                    assert!(
                        e.timestamp_ns - p >= 1000.0 - 1e-6,
                        "detector {id}: gap {}",
                        e.timestamp_ns - p
                    );
                }
                prev = Some(e.timestamp_ns);
            }
        }
    }

    #[test]
    fn background_rate_matches_poisson_expectation() {
        let mut cfg = facing_config(0.0);
        cfg.detector1.dark_rate_cps = 10_000.0;
        cfg.detector1.ambient_rate_cps = 0.0;
        cfg.detector1.dead_time_ns = 0.0;
        cfg.detector2.dark_rate_cps = 0.0;
        cfg.detector2.ambient_rate_cps = 0.0;
        let events = simulate(&cfg, 2.0, 5).unwrap();
        let n1 = events.iter().filter(|e| e.detector_id == 1).count() as f64;
        let expect = 20_000.0;
        assert!((n1 - expect).abs() < 4.0 * expect.sqrt(), "n1 = {n1}");
    }

    #[test]
    fn dead_time_thins_high_rates() {
        let mut cfg = facing_config(0.0);
        cfg.detector1.dark_rate_cps = 1.0e6;
        cfg.detector1.ambient_rate_cps = 0.0;
        cfg.detector2.dark_rate_cps = 0.0;
        cfg.detector2.ambient_rate_cps = 0.0;
        let events = simulate(&cfg, 0.5, 6).unwrap();
        let n1 = events.iter().filter(|e| e.detector_id == 1).count() as f64;
        // non-paralyzable response: rho / (1 + rho * tau_dead)
        let expect = 0.5 * 1.0e6 / (1.0 + 1.0e6 * 1000.0e-9);
        assert!(
            (n1 - expect).abs() / expect < 0.01,
            "n1 = {n1}, expected about {expect}"
        );
    }

    #[test]
    fn flash_photons_arrive_after_source_breakdowns() {
        let mut cfg = facing_config(0.0);
        cfg.detector1 = canonical_detector(2000.0, 0.0, 142.76);
        cfg.detector2.dark_rate_cps = 0.0;
        cfg.detector2.ambient_rate_cps = 0.0;
        cfg.optics.delay_line_ns = 0.0;
        let events = simulate(&cfg, 20.0, 17).unwrap();
        let d1: Vec<f64> = events
            .iter()
            .filter(|e| e.detector_id == 1)
            .map(|e| e.timestamp_ns)
            .collect();
        let d2: Vec<f64> = events
            .iter()
            .filter(|e| e.detector_id == 2)
            .map(|e| e.timestamp_ns)
            .collect();
        // every detector 2 count is a detected flash photon from detector 1
        let expect = d1.len() as f64 * 4.67e-4 * 39.0;
        assert!(
            (d2.len() as f64 - expect).abs() < 4.0 * expect.sqrt(),
            "{} flash detections, expected about {expect}",
            d2.len()
        );
        let mut deltas = Vec::new();
        for &t2 in &d2 {
            let i = d1.partition_point(|&t1| t1 <= t2);
            if i > 0 {
                deltas.push(t2 - d1[i - 1]);
            }
        }
        // restrict to the flash window so a stray dark count between source
        // and detection cannot distort the mean
        deltas.retain(|d| (0.0..=100.0).contains(d));
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let se = 2.84 / (deltas.len() as f64).sqrt();
        assert!((mean - 4.75).abs() < 4.0 * se, "mean flash delay {mean}");
    }

    #[test]
    fn delay_line_shifts_detector1_only() {
        let mut cfg = facing_config(142.76);
        cfg.optics.delay_line_ns = 0.0;
        let plain = simulate(&cfg, 0.1, 9).unwrap();
        cfg.optics.delay_line_ns = 63.0;
        let delayed = simulate(&cfg, 0.1, 9).unwrap();
        assert_eq!(plain.len(), delayed.len());
        let shift = |events: &[EventRecord], id: u8| -> Vec<f64> {
            events
                .iter()
                .filter(|e| e.detector_id == id)
                .map(|e| e.timestamp_ns)
                .collect()
        };
        let p1 = shift(&plain, 1);
        let d1 = shift(&delayed, 1);
        assert_eq!(p1.len(), d1.len());
        for (a, b) in p1.iter().zip(&d1) {
            assert!((b - a - 63.0).abs() < 1e-9);
        }
        assert_eq!(shift(&plain, 2), shift(&delayed, 2));
    }

    #[test]
    fn spectrometer_mode_suppresses_out_of_band_flash() {
        let mut cfg = facing_config(0.0);
        cfg.detector1 = canonical_detector(5000.0, 0.0, 142.76);
        cfg.detector2.dark_rate_cps = 0.0;
        cfg.detector2.ambient_rate_cps = 0.0;
        cfg.optics.delay_line_ns = 0.0;
        cfg.optics.mode = Mode::Spectrometer {
            center_nm: 860.0,
            fwhm_nm: 3.3,
        };
        let through_peak = simulate(&cfg, 10.0, 12)
            .unwrap()
            .iter()
            .filter(|e| e.detector_id == 2)
            .count();
        cfg.optics.mode = Mode::Spectrometer {
            center_nm: 750.0,
            fwhm_nm: 3.3,
        };
        let through_tail = simulate(&cfg, 10.0, 12)
            .unwrap()
            .iter()
            .filter(|e| e.detector_id == 2)
            .count();
        assert!(through_peak > 3 * through_tail.max(1));
    }

    #[test]
    fn coincidence_gate_counts_ordered_pairs() {
        let mut gate = CoincidenceGate::new(70.0);
        let stream = [
            (1u8, 100.0),
            (2u8, 150.0), // pair with 100
            (1u8, 200.0),
            (1u8, 240.0),
            (2u8, 260.0), // pairs with 200 and 240
            (2u8, 400.0), // nothing within the gate
            (1u8, 500.0),
            (2u8, 500.0), // zero separation is not a pair
        ];
        for (detector_id, timestamp_ns) in stream {
            gate.push(&EventRecord {
                detector_id,
                timestamp_ns,
            });
        }
        assert_eq!(gate.pairs(), 3);
    }

    #[test]
    fn scan_results_do_not_depend_on_jobs() {
        let mut base = facing_config(142.76);
        base.optics.mode = Mode::Spectrometer {
            center_nm: 860.0,
            fwhm_nm: 3.3,
        };
        base.optics.delay_line_ns = 0.0;
        let plan = ScanPlan {
            centers_nm: vec![850.0, 855.0, 860.0, 865.0, 870.0],
            integration_time_s: 0.2,
            gate_ns: 70.0,
        };
        let serial = simulate_scan(&base, &plan, 99, 1).unwrap();
        let parallel = simulate_scan(&base, &plan, 99, 4).unwrap();
        assert_eq!(serial, parallel);
        // and each point is reproducible in isolation
        let solo = simulate_scan(
            &base,
            &ScanPlan {
                centers_nm: vec![860.0],
                ..plan.clone()
            },
            99,
            1,
        )
        .unwrap();
        assert_ne!(solo[0], serial[2]); // different stream index
    }

    #[test]
    fn scan_requires_spectrometer_mode() {
        let base = facing_config(142.76);
        let plan = ScanPlan {
            centers_nm: vec![860.0],
            integration_time_s: 0.1,
            gate_ns: 70.0,
        };
        assert!(simulate_scan(&base, &plan, 1, 1).is_err());
    }

    #[test]
    fn events_csv_round_trip() {
        let cfg = facing_config(142.76);
        let events = simulate(&cfg, 0.05, 3).unwrap();
        let mut prov = Provenance::new("0.0.0", "deadbeef", 3);
        prov.push("duration_s", "0.05");
        let mut buf = Vec::new();
        write_events(&mut buf, &events, &prov).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        std::fs::write(&path, &buf).unwrap();
        let (back, prov_back) = read_events(&path).unwrap();
        assert_eq!(back.len(), events.len());
        for (a, b) in events.iter().zip(&back) {
            assert_eq!(a.detector_id, b.detector_id);
            assert!((a.timestamp_ns - b.timestamp_ns).abs() < 5e-5);
        }
        assert_eq!(prov_back.get("duration_s"), Some("0.05"));
        assert_eq!(prov_back.get("seed"), Some("3"));
    }

    #[test]
    fn events_csv_rejects_disorder_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "detector_id,timestamp_ns\n1,100.0\n2,50.0\n").unwrap();
        match read_events(&path).unwrap_err() {
            Error::UnsortedEvents { index } => assert_eq!(index, 1),
            other => panic!("expected unsorted error, got {other:?}"),
        }
        std::fs::write(&path, "detector_id,timestamp_ns\n3,100.0\n").unwrap();
        assert!(read_events(&path).is_err());
        std::fs::write(&path, "detector_id,timestamp_ns\n1,-5.0\n").unwrap();
        assert!(read_events(&path).is_err());
        std::fs::write(&path, "1,100.0\n").unwrap();
        assert!(read_events(&path).is_err());
    }

    #[test]
    fn config_validation_catches_coverage_gaps() {
        let mut cfg = facing_config(142.76);
        // efficiency table that stops short of the emission band
        cfg.detector2.efficiency = SpectralCurve::new(vec![(700.0, 0.3), (900.0, 0.2)]).unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = facing_config(142.76);
        cfg.optics.coupling_efficiency = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = facing_config(142.76);
        cfg.detector1.dark_rate_cps = -1.0;
        assert!(cfg.validate().is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn dead_time_invariant_holds_for_random_backgrounds(
            rate1 in 1.0e3f64..2.0e5,
            rate2 in 1.0e3f64..2.0e5,
            dead in 0.0f64..5000.0,
            seed in 0u64..1000,
        ) {
            let mut cfg = facing_config(0.0);
            cfg.detector1.dark_rate_cps = rate1;
            cfg.detector1.ambient_rate_cps = 0.0;
            cfg.detector1.dead_time_ns = dead;
            cfg.detector2.dark_rate_cps = rate2;
            cfg.detector2.ambient_rate_cps = 0.0;
            cfg.detector2.dead_time_ns = dead;
            let events = simulate(&cfg, 0.01, seed).unwrap();
            for id in [1u8, 2u8] {
                let mut prev: Option<f64> = None;
                for e in events.iter().filter(|e| e.detector_id == id) {
                    if let Some(p) = prev {
                        proptest::prop_assert!(e.timestamp_ns - p >= dead - 1e-6);
                    }
                    prev = Some(e.timestamp_ns);
                }
            }
            for pair in events.windows(2) {
                proptest::prop_assert!(pair[1].timestamp_ns >= pair[0].timestamp_ns);
            }
        }
    }
}
