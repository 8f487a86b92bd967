//! Discharge model of a passively quenched Geiger-mode avalanche photodiode.
//!
//! A breakdown dumps the diode's stored charge through the multiplication
//! region. The current pulse is modeled as a single exponential decay with
//! Gaussian timing jitter, i.e. an exponentially modified Gaussian (EMG).
//! Internal units: time ns, charge pC, current mA (1 pC/ns = 1 mA).

use crate::error::Error;
use crate::math::erfcx;

/// Shape of one breakdown discharge pulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BreakdownProfile {
    /// Total charge released per breakdown (pC).
    pub total_charge_pc: f64,
    /// Exponential decay constant of the current pulse (ns).
    pub decay_tau_ns: f64,
    /// Gaussian timing jitter (ns). Zero gives a pure one-sided exponential.
    pub jitter_sigma_ns: f64,
    /// Pulse onset relative to the breakdown trigger (ns).
    pub onset_t0_ns: f64,
    /// Bias above breakdown voltage (V).
    pub overvoltage_v: f64,
}

impl BreakdownProfile {
    pub fn validate(&self) -> Result<(), Error> {
        let all_finite = self.total_charge_pc.is_finite()
            && self.decay_tau_ns.is_finite()
            && self.jitter_sigma_ns.is_finite()
            && self.onset_t0_ns.is_finite()
            && self.overvoltage_v.is_finite();
        if !all_finite {
            return Err(Error::Domain(
                "breakdown profile has non-finite fields".into(),
            ));
        }
        if self.total_charge_pc <= 0.0 {
            return Err(Error::Domain("total_charge_pc must be positive".into()));
        }
        if self.decay_tau_ns <= 0.0 {
            return Err(Error::Domain("decay_tau_ns must be positive".into()));
        }
        if self.jitter_sigma_ns < 0.0 {
            return Err(Error::Domain("jitter_sigma_ns must not be negative".into()));
        }
        if self.overvoltage_v <= 0.0 {
            return Err(Error::Domain("overvoltage_v must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized EMG density without validation. Never returns a non-finite
/// value for finite inputs: the left flank uses the scaled complementary
/// error function, the right flank the plain one, so neither branch can
/// overflow.
pub(crate) fn emg_pdf(t: f64, t0: f64, tau: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        if t < t0 {
            return 0.0;
        }
        return (-(t - t0) / tau).exp() / tau;
    }
    let u = (t - t0) / sigma;
    let a = sigma / tau;
    let z = (a - u) / std::f64::consts::SQRT_2;
    if z >= 0.0 {
        0.5 / tau * erfcx(z) * (-0.5 * u * u).exp()
    } else {
        0.5 / tau * libm::erfc(z) * (0.5 * a * a - u * a).exp()
    }
}

/// Time density of the discharge, an exponential decay of constant
/// `decay_tau_ns` convolved with a Gaussian of width `jitter_sigma_ns`,
/// shifted to `onset_t0_ns`. Integrates to one; units 1/ns.
pub fn emg_density(t_ns: f64, profile: &BreakdownProfile) -> Result<f64, Error> {
    profile.validate()?;
    if !t_ns.is_finite() {
        return Err(Error::Domain("time must be finite".into()));
    }
    Ok(emg_pdf(
        t_ns,
        profile.onset_t0_ns,
        profile.decay_tau_ns,
        profile.jitter_sigma_ns,
    ))
}

/// Instantaneous discharge current in mA: total charge times the time density.
pub fn discharge_current(t_ns: f64, profile: &BreakdownProfile) -> Result<f64, Error> {
    Ok(profile.total_charge_pc * emg_density(t_ns, profile)?)
}

/// Effective parasitic capacitance that stored the discharge charge,
/// `C = Q / dV`, in pF.
pub fn parasitic_capacitance(total_charge_pc: f64, overvoltage_v: f64) -> Result<f64, Error> {
    if !total_charge_pc.is_finite() || total_charge_pc <= 0.0 {
        return Err(Error::Domain("total_charge_pc must be positive".into()));
    }
    if !overvoltage_v.is_finite() || overvoltage_v <= 0.0 {
        return Err(Error::Domain("overvoltage_v must be positive".into()));
    }
    Ok(total_charge_pc / overvoltage_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::simpson;

    fn canonical() -> BreakdownProfile {
        BreakdownProfile {
            total_charge_pc: 64.0,
            decay_tau_ns: 2.75,
            jitter_sigma_ns: 0.72,
            onset_t0_ns: 0.0,
            overvoltage_v: 20.0,
        }
    }

    /// Direct numerical convolution of the one-sided exponential with a
    /// Gaussian, independent of the closed form under test.
    fn emg_by_convolution(t: f64, t0: f64, tau: f64, sigma: f64) -> f64 {
        let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let f = |s: f64| {
            let gauss = norm * (-0.5 * ((t - t0 - s) / sigma).powi(2)).exp();
            (-s / tau).exp() / tau * gauss
        };
        simpson(f, 0.0, 60.0 * tau, 400_000)
    }

    #[test]
    fn capacitance_of_canonical_discharge() {
        assert_eq!(parasitic_capacitance(64.0, 20.0).unwrap(), 3.2);
    }

    #[test]
    fn capacitance_rejects_bad_arguments() {
        assert!(parasitic_capacitance(64.0, 0.0).is_err());
        assert!(parasitic_capacitance(64.0, -5.0).is_err());
        assert!(parasitic_capacitance(0.0, 20.0).is_err());
        assert!(parasitic_capacitance(f64::NAN, 20.0).is_err());
    }

    #[test]
    fn emg_matches_convolution_oracle() {
        let p = canonical();
        for t in [-1.0, 0.0, 1.0, 2.0, 5.0, 10.0] {
            let got = emg_density(t, &p).unwrap();
            let want = emg_by_convolution(t, 0.0, 2.75, 0.72);
            assert!(
                ((got - want) / want).abs() < 1e-8,
                "t={t}: closed form {got}, convolution {want}"
            );
        }
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn emg_matches_high_precision_reference() {
        // 40-digit reference evaluations for tau=2.75, sigma=0.72, t0=0
        let cases = [
            (-1.0, 0.026742233525063652),
            (0.0, 0.14929608170873754),
            (1.0, 0.22762407688428314),
            (2.0, 0.18076591300692394),
            (5.0, 0.061083814499441112),
            (10.0, 0.0099151621029842734),
            (20.0, 0.00026124450086157879),
        ];
        let p = canonical();
        for (t, want) in cases {
            let got = emg_density(t, &p).unwrap();
            assert!(
                ((got - want) / want).abs() < 1e-12,
                "t={t}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn emg_with_zero_jitter_is_one_sided_exponential() {
        let p = BreakdownProfile {
            jitter_sigma_ns: 0.0,
            ..canonical()
        };
        assert_eq!(emg_density(-0.001, &p).unwrap(), 0.0);
        let got = emg_density(5.0, &p).unwrap();
        let want = (-5.0_f64 / 2.75).exp() / 2.75;
        assert!(((got - want) / want).abs() < 1e-15);
    }

    #[test]
    fn emg_is_finite_within_a_microsecond_of_onset() {
        let profiles = [
            canonical(),
            BreakdownProfile {
                jitter_sigma_ns: 0.05,
                ..canonical()
            },
            BreakdownProfile {
                jitter_sigma_ns: 3.0,
                decay_tau_ns: 0.5,
                ..canonical()
            },
            BreakdownProfile {
                jitter_sigma_ns: 0.0,
                ..canonical()
            },
            BreakdownProfile {
                onset_t0_ns: 40.0,
                ..canonical()
            },
        ];
        for p in &profiles {
            for i in 0..=4000 {
                let t = p.onset_t0_ns - 1000.0 + 0.5 * i as f64;
                let v = emg_density(t, p).unwrap();
                assert!(v.is_finite() && v >= 0.0, "t={t} gave {v} for {p:?}");
            }
        }
    }

    #[test]
    fn emg_integrates_to_one() {
        let p = canonical();
        let integral = simpson(
            |t| emg_pdf(t, p.onset_t0_ns, p.decay_tau_ns, p.jitter_sigma_ns),
            -12.0 * p.jitter_sigma_ns,
            60.0 * p.decay_tau_ns,
            40_000,
        );
        assert!((integral - 1.0).abs() < 1e-9, "integral {integral}");
    }

    #[test]
    fn emg_rejects_invalid_profiles() {
        assert!(emg_density(
            1.0,
            &BreakdownProfile {
                decay_tau_ns: 0.0,
                ..canonical()
            }
        )
        .is_err());
        assert!(emg_density(
            1.0,
            &BreakdownProfile {
                decay_tau_ns: -1.0,
                ..canonical()
            }
        )
        .is_err());
        assert!(emg_density(
            1.0,
            &BreakdownProfile {
                jitter_sigma_ns: -0.1,
                ..canonical()
            }
        )
        .is_err());
        assert!(emg_density(f64::NAN, &canonical()).is_err());
    }

    #[test]
    fn discharge_current_scales_density_by_charge() {
        let p = canonical();
        let got = discharge_current(5.0, &p).unwrap();
        assert!(((got - 3.9093641279642312) / 3.9093641279642312).abs() < 1e-12);
    }

    #[test]
    fn discharge_current_integrates_to_total_charge() {
        let p = canonical();
        let integral = simpson(
            |t| discharge_current(t, &p).unwrap(),
            -12.0 * p.jitter_sigma_ns,
            60.0 * p.decay_tau_ns,
            40_000,
        );
        assert!(
            ((integral - p.total_charge_pc) / p.total_charge_pc).abs() < 1e-6,
            "integral {integral} pC"
        );
    }
}
