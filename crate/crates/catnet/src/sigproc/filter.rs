//! IIR filter design (Butterworth low-pass / band-pass, power-line notch)
//! as cascaded second-order sections, plus zero-phase application.

use crate::error::{Error, Result};
use num_complex::Complex64;

/// One biquad: `b0, b1, b2, a1, a2` with `a0` normalized to 1.
#[derive(Clone, Copy, Debug)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

/// Cascade of second-order sections.
#[derive(Clone, Debug)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, rate_hz: f64) -> Complex64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / rate_hz;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let mut h = Complex64::new(1.0, 0.0);
        for s in &self.sections {
            let num = Complex64::new(s.b[0], 0.0) + z1 * s.b[1] + z2 * s.b[2];
            let den = Complex64::new(1.0, 0.0) + z1 * s.a[0] + z2 * s.a[1];
            h *= num / den;
        }
        h
    }
}

/// Left-half-plane poles of the analog Butterworth prototype. Only even
/// orders are supported; they pair into conjugate biquads cleanly.
fn prototype_poles(order: usize) -> Result<Vec<Complex64>> {
    if order == 0 || order % 2 != 0 {
        return Err(Error::invalid(format!(
            "Butterworth order must be even and positive, got {order}"
        )));
    }
    let n = order as f64;
    Ok((0..order)
        .map(|k| {
            let theta = std::f64::consts::PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n);
            Complex64::from_polar(1.0, theta)
        })
        .collect())
}

fn bilinear(s: Complex64) -> Complex64 {
    (Complex64::new(1.0, 0.0) + s) / (Complex64::new(1.0, 0.0) - s)
}

/// Butterworth low-pass, `-3 dB` at `cutoff_hz`.
pub fn butter_lowpass(order: usize, cutoff_hz: f64, rate_hz: f64) -> Result<Sos> {
    if !(cutoff_hz > 0.0 && cutoff_hz < rate_hz / 2.0) {
        return Err(Error::invalid(format!(
            "low-pass cutoff {cutoff_hz} Hz must lie in (0, {}) for rate {rate_hz}",
            rate_hz / 2.0
        )));
    }
    let warped = (std::f64::consts::PI * cutoff_hz / rate_hz).tan();
    let poles = prototype_poles(order)?;
    let mut sections = Vec::with_capacity(order / 2);
    for p in poles.iter().filter(|p| p.im > 0.0) {
        let z = bilinear(p * warped);
        let a1 = -2.0 * z.re;
        let a2 = z.norm_sqr();
        // two zeros at z = -1; normalize for unit DC gain
        let k = (1.0 + a1 + a2) / 4.0;
        sections.push(Biquad {
            b: [k, 2.0 * k, k],
            a: [a1, a2],
        });
    }
    Ok(Sos { sections })
}

/// Butterworth band-pass from a prototype of the given order (so a
/// fourth-order design realizes eight poles, four biquads).
pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, rate_hz: f64) -> Result<Sos> {
    let nyq = rate_hz / 2.0;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyq) {
        return Err(Error::invalid(format!(
            "band edges ({low_hz}, {high_hz}) Hz must satisfy 0 < low < high < {nyq}"
        )));
    }
    let w1 = (std::f64::consts::PI * low_hz / rate_hz).tan();
    let w2 = (std::f64::consts::PI * high_hz / rate_hz).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;
    let poles = prototype_poles(order)?;
    let mut sections = Vec::with_capacity(order);
    for p in poles.iter().filter(|p| p.im > 0.0) {
        // band-pass transform: s^2 - (bw p) s + w0^2 = 0
        let bp = p * bw;
        let disc = (bp * bp - Complex64::new(4.0 * w0sq, 0.0)).sqrt();
        for root in [(bp + disc) * 0.5, (bp - disc) * 0.5] {
            let z = bilinear(root);
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [-2.0 * z.re, z.norm_sqr()],
            });
        }
    }
    // normalize to unit gain at the geometric center frequency
    let mut sos = Sos { sections };
    let fc = (low_hz * high_hz).sqrt();
    let gain = sos.response(fc, rate_hz).norm();
    let per_section = (1.0 / gain).powf(1.0 / sos.sections.len() as f64);
    for s in &mut sos.sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    Ok(sos)
}

/// Quality factor of the power-line notch. Narrow enough to leave 10 Hz and
/// 90 Hz essentially untouched at a 500 Hz rate.
pub const NOTCH_Q: f64 = 35.0;

/// Second-order notch with a zero pair on the unit circle at `center_hz`.
pub fn iir_notch(center_hz: f64, q: f64, rate_hz: f64) -> Result<Sos> {
    if !(center_hz > 0.0 && center_hz < rate_hz / 2.0) {
        return Err(Error::invalid(format!(
            "notch center {center_hz} Hz must lie below the Nyquist frequency {}",
            rate_hz / 2.0
        )));
    }
    let w0 = 2.0 * std::f64::consts::PI * center_hz / rate_hz;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    Ok(Sos {
        sections: vec![Biquad {
            b: [1.0 / a0, -2.0 * w0.cos() / a0, 1.0 / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
        }],
    })
}

/// Single-pass causal filtering (direct form II transposed).
pub fn sosfilt(sos: &Sos, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in &sos.sections {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for v in y.iter_mut() {
            let xn = *v;
            let yn = s.b[0] * xn + s1;
            s1 = s.b[1] * xn - s.a[0] * yn + s2;
            s2 = s.b[2] * xn - s.a[1] * yn;
            *v = yn;
        }
    }
    y
}

/// Zero-phase (forward-backward) filtering with odd-reflection padding.
pub fn filtfilt(sos: &Sos, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (3 * (2 * sos.sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let mut y = sosfilt(sos, &ext);
    y.reverse();
    let mut y = sosfilt(sos, &y);
    y.reverse();
    y[pad..pad + n].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowpass_dc_gain_is_one() {
        let sos = butter_lowpass(8, 225.0, 1000.0).unwrap();
        let h0 = sos.response(0.0, 1000.0).norm();
        assert!((h0 - 1.0).abs() < 1e-12, "DC gain {h0}");
    }

    #[test]
    fn lowpass_cutoff_is_3db() {
        let sos = butter_lowpass(8, 100.0, 1000.0).unwrap();
        let h = sos.response(100.0, 1000.0).norm();
        let db = 20.0 * h.log10();
        assert!((db + 3.0103).abs() < 0.05, "cutoff gain {db} dB");
    }

    #[test]
    fn bandpass_center_gain_is_one_and_edges_attenuate() {
        let sos = butter_bandpass(4, 1.0, 100.0, 500.0).unwrap();
        let fc = (1.0f64 * 100.0).sqrt();
        assert!((sos.response(fc, 500.0).norm() - 1.0).abs() < 1e-9);
        assert!(sos.response(0.01, 500.0).norm() < 1e-3);
        assert!(sos.response(240.0, 500.0).norm() < 1e-2);
        // passband is flat
        assert!((sos.response(20.0, 500.0).norm() - 1.0).abs() < 0.01);
    }

    #[test]
    fn notch_kills_center_and_passes_neighbors() {
        let sos = iir_notch(50.0, NOTCH_Q, 500.0).unwrap();
        assert!(sos.response(50.0, 500.0).norm() < 1e-10);
        assert!((sos.response(10.0, 500.0).norm() - 1.0).abs() < 0.06);
        assert!((sos.response(90.0, 500.0).norm() - 1.0).abs() < 0.06);
    }

    #[test]
    fn odd_orders_are_rejected() {
        assert!(butter_lowpass(3, 10.0, 100.0).is_err());
        assert!(butter_bandpass(5, 1.0, 10.0, 100.0).is_err());
    }

    #[test]
    fn filtfilt_of_sine_has_no_phase_shift() {
        let rate = 500.0;
        let sos = butter_bandpass(4, 1.0, 100.0, rate).unwrap();
        let n = 5000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 20.0 * i as f64 / rate).sin())
            .collect();
        let y = filtfilt(&sos, &x);
        // compare against the input in the middle where transients are gone
        for i in 2000..3000 {
            assert!((y[i] - x[i]).abs() < 0.02, "sample {i}: {} vs {}", y[i], x[i]);
        }
    }
}
