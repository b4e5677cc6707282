use std::f64::consts::TAU;

use proptest::prelude::*;

use cptlock::control::{pi_gains, pid_step, LoopConfig, LoopState};
use cptlock::device::{resonant_frequency, BiasPoint, CavityParams, CptParams, Parity};
use cptlock::noise::power_law_noise;
use cptlock::rf::{error_quadratures, kerr_photon_number, kerr_residual, reflection_coefficient, DriveConfig, DrivePower};
use cptlock::series::TimeSeries;
use cptlock::spectral::{welch_psd, Window};

fn cavity(kappa_int: f64, kerr: f64) -> CavityParams {
    CavityParams::new(TAU * 5.757e9, TAU * kappa_int, TAU * 0.97e6, TAU * kerr, CptParams::default())
        .unwrap()
        .calibrated(TAU * 140e6)
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reflection_is_passive(k in -4i32..=4, delta in -2e7f64..2e7, ki in 0.0f64..3e6) {
        let cav = cavity(ki, 0.0);
        let r = reflection_coefficient(k, TAU * delta, &cav, TAU * 30e6);
        prop_assert!(r.norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn lossless_reflection_has_unit_magnitude(k in -4i32..=4, delta in -2e7f64..2e7) {
        let cav = CavityParams::new(TAU * 5.757e9, 0.0, TAU * 0.97e6, 0.0, CptParams::default()).unwrap();
        let r = reflection_coefficient(k, TAU * delta, &cav, TAU * 30e6);
        prop_assert!((r.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pi_gains_satisfy_the_design_law(fp in 1.0f64..5e3, fl in 10.0f64..1e4, g0 in prop_oneof![-100.0f64..-0.1, 0.1f64..100.0]) {
        let cfg = LoopConfig::new(TAU * fp, TAU * fl, g0, 1e-6);
        let (kp, ki) = pi_gains(&cfg).unwrap();
        prop_assert!((ki / kp / (TAU * fl) - 1.0).abs() < 1e-12);
        prop_assert!((ki * g0 / (TAU * fp) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn controller_output_respects_clamp(errors in prop::collection::vec(-1e3f64..1e3, 1..200)) {
        let mut cfg = LoopConfig::new(TAU * 100.0, TAU * 1e3, -3.0, 1e-5);
        cfg.output_clamp = 0.05;
        let mut state = LoopState::default();
        for e in errors {
            let (next, out) = pid_step(state, e, &cfg).unwrap();
            prop_assert!(out.abs() <= cfg.output_clamp);
            state = next;
        }
    }

    #[test]
    fn error_signal_is_odd_without_kerr(delta in 0.0f64..3e6, beta in 0.2f64..2.0) {
        let cav = cavity(0.3e6, 0.0);
        let drive = DriveConfig::new(cav.omega_bare, beta, TAU * 30e6, DrivePower::Photons(5.0));
        let up = error_quadratures(TAU * delta, &cav, &drive, false).unwrap();
        let down = error_quadratures(-TAU * delta, &cav, &drive, false).unwrap();
        prop_assert!((up.y + down.y).abs() <= 1e-9 * up.y.abs().max(1e-30));
    }

    #[test]
    fn kerr_root_solves_the_cubic(delta in -5e6f64..5e6, n in 0.1f64..20.0) {
        let cav = cavity(0.3e6, -80e3);
        let drive = DriveConfig::new(cav.omega_bare, 1.08, TAU * 30e6, DrivePower::Photons(n));
        let sol = kerr_photon_number(TAU * delta, &cav, &drive).unwrap();
        prop_assert!(sol.n >= 0.0);
        let rate = cptlock::rf::carrier_photon_flux(&cav, &drive);
        prop_assert!(kerr_residual(sol.n, TAU * delta, &cav, rate) < 1e-10);
    }

    #[test]
    fn resonance_is_periodic_and_mirror_symmetric(i in -64i32..64, j in -32i32..32) {
        let cav = cavity(0.3e6, 0.0);
        let (ng, phi) = (i as f64 / 32.0, j as f64 / 128.0);
        let w = |ng: f64, phi: f64| resonant_frequency(BiasPoint::new(ng, phi), &cav, Parity::Even).unwrap();
        let base = w(ng, phi);
        prop_assert_eq!(base, w(ng + 2.0, phi));
        prop_assert_eq!(base, w(-ng, phi));
        prop_assert_eq!(base, w(ng, -phi));
        prop_assert_eq!(base, w(ng, phi + 1.0));
        prop_assert_eq!(
            resonant_frequency(BiasPoint::new(ng, phi), &cav, Parity::Odd).unwrap(),
            w(ng - 1.0, phi)
        );
    }

    #[test]
    fn noise_is_a_pure_function_of_seed(seed in any::<u64>()) {
        let a = power_law_noise(1e-6, 0.9, 1e3, 1024, seed).unwrap();
        let b = power_law_noise(1e-6, 0.9, 1e3, 1024, seed).unwrap();
        prop_assert_eq!(a.samples, b.samples);
    }
}

// Parseval: the one-sided PSD integrates to the variance.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn welch_integrates_to_variance(seed in any::<u64>(), exponent in 0.0f64..1.5) {
        let x = power_law_noise(1e-4, exponent, 1e3, 1 << 14, seed).unwrap();
        let mean = x.samples.iter().sum::<f64>() / x.len() as f64;
        let centred: Vec<f64> = x.samples.iter().map(|v| v - mean).collect();
        let var = centred.iter().map(|v| v * v).sum::<f64>() / centred.len() as f64;
        let s = TimeSeries::new(centred, x.fs, "").unwrap();
        let p = welch_psd(&s, 1 << 14, 0.0, Window::Rectangular).unwrap();
        let df = p.freqs[1] - p.freqs[0];
        let total: f64 = p.values.iter().sum::<f64>() * df;
        prop_assert!((total / var - 1.0).abs() < 0.02, "{} vs {}", total, var);
    }
}
