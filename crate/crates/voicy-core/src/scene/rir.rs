use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{Result, SceneError};
use crate::dsp::Waveform;

pub const SPEED_OF_SOUND_M_S: f64 = 343.0;

/// Rectangular room with one broadband energy absorption coefficient shared
/// by all six walls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShoeboxRoom {
    /// Lx, Ly, Lz in meters.
    pub dims: [f64; 3],
    /// Energy absorption in (0, 1]; 1 means fully dead walls.
    pub absorption: f64,
    /// Highest image reflection order simulated.
    pub max_order: usize,
}

impl ShoeboxRoom {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0)) {
            return Err(SceneError::InvalidRoom(format!(
                "non-positive dims {:?}",
                self.dims
            )));
        }
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            return Err(SceneError::InvalidRoom(format!(
                "absorption {} outside (0, 1]",
                self.absorption
            )));
        }
        Ok(())
    }

    pub fn check_inside(&self, pos: [f64; 3]) -> Result<()> {
        for axis in 0..3 {
            if !(pos[axis] > 0.0 && pos[axis] < self.dims[axis]) {
                return Err(SceneError::OutsideRoom {
                    pos,
                    dims: self.dims,
                });
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn surface_area(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }
}

/// Room impulse response as a dense tap sequence starting at sample 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate_hz: u32,
}

/// Sabine's reverberation time for a uniformly absorbing shoebox:
/// `0.161 * V / (S * absorption)`.
pub fn sabine_t60(room: &ShoeboxRoom) -> f64 {
    0.161 * room.volume() / (room.surface_area() * room.absorption)
}

/// Image-source simulation of the source-to-microphone impulse response.
/// Each image up to `max_order` wall bounces contributes one tap at the
/// nearest-sample propagation delay with amplitude `r^bounces / (4 pi d)`,
/// `r = sqrt(1 - absorption)` being the pressure reflection coefficient.
/// Taps landing on the same sample accumulate.
pub fn simulate_rir(room: &ShoeboxRoom, src: [f64; 3], mic: [f64; 3], fs: u32) -> Result<Rir> {
    room.validate()?;
    room.check_inside(src)?;
    room.check_inside(mic)?;
    if fs == 0 {
        return Err(SceneError::InvalidRoom("fs must be positive".into()));
    }
    let direct: f64 = (0..3)
        .map(|a| (src[a] - mic[a]).powi(2))
        .sum::<f64>()
        .sqrt();
    if direct == 0.0 {
        return Err(SceneError::ZeroDistance);
    }

    let n = room.max_order as i64;
    let r = (1.0 - room.absorption).sqrt();
    // Lattice bound: |2m - q| <= n with q in {0, 1}.
    let m_hi = (n + 1) / 2;
    let m_lo = -(n / 2) - 1;

    let mut entries: Vec<(usize, f64)> = Vec::new();
    let mut max_idx = 0usize;
    for mx in m_lo..=m_hi {
        for qx in 0..2i64 {
            let bx = (2 * mx - qx).abs();
            if bx > n {
                continue;
            }
            let ix = (1 - 2 * qx) as f64 * src[0] + 2.0 * mx as f64 * room.dims[0];
            for my in m_lo..=m_hi {
                for qy in 0..2i64 {
                    let by = (2 * my - qy).abs();
                    if bx + by > n {
                        continue;
                    }
                    let iy = (1 - 2 * qy) as f64 * src[1] + 2.0 * my as f64 * room.dims[1];
                    for mz in m_lo..=m_hi {
                        for qz in 0..2i64 {
                            let bz = (2 * mz - qz).abs();
                            let refl = bx + by + bz;
                            if refl > n {
                                continue;
                            }
                            let iz =
                                (1 - 2 * qz) as f64 * src[2] + 2.0 * mz as f64 * room.dims[2];
                            let d = ((ix - mic[0]).powi(2)
                                + (iy - mic[1]).powi(2)
                                + (iz - mic[2]).powi(2))
                            .sqrt();
                            let amp = r.powi(refl as i32) / (4.0 * std::f64::consts::PI * d);
                            if amp == 0.0 {
                                continue;
                            }
                            let idx = (d / SPEED_OF_SOUND_M_S * fs as f64).round() as usize;
                            max_idx = max_idx.max(idx);
                            entries.push((idx, amp));
                        }
                    }
                }
            }
        }
    }

    let mut taps = vec![0.0; max_idx + 1];
    for (idx, amp) in entries {
        taps[idx] += amp;
    }
    Ok(Rir {
        taps,
        sample_rate_hz: fs,
    })
}

/// Full linear convolution with the RIR via FFT; output length is
/// `len(wave) + len(taps) - 1`.
pub fn apply_rir(wave: &Waveform, rir: &Rir) -> Result<Waveform> {
    if wave.sample_rate_hz != rir.sample_rate_hz {
        return Err(SceneError::SampleRateMismatch {
            a: wave.sample_rate_hz,
            b: rir.sample_rate_hz,
        });
    }
    let out_len = wave.len() + rir.taps.len() - 1;
    let fft_len = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);
    let ifft = planner.plan_fft_inverse(fft_len);

    let mut a = vec![Complex64::default(); fft_len];
    let mut b = vec![Complex64::default(); fft_len];
    for (slot, &s) in a.iter_mut().zip(&wave.samples) {
        *slot = Complex64::new(s, 0.0);
    }
    for (slot, &t) in b.iter_mut().zip(&rir.taps) {
        *slot = Complex64::new(t, 0.0);
    }
    fft.process(&mut a);
    fft.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    ifft.process(&mut a);

    let scale = 1.0 / fft_len as f64;
    let samples = a[..out_len].iter().map(|c| c.re * scale).collect();
    Ok(Waveform::new(samples, wave.sample_rate_hz))
}

/// Schroeder backward-integrated energy decay curve in dB, normalised to
/// start at 0.
pub fn schroeder_decay_db(rir: &Rir) -> Vec<f64> {
    let mut edc: Vec<f64> = Vec::with_capacity(rir.taps.len());
    let mut acc = 0.0;
    for &t in rir.taps.iter().rev() {
        acc += t * t;
        edc.push(acc);
    }
    edc.reverse();
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter()
        .map(|&e| {
            if e > 0.0 && total > 0.0 {
                10.0 * (e / total).log10()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// T60 measured from the decay curve by a least-squares line through the
/// -5 dB to -25 dB span, extrapolated to -60 dB. `None` when the response
/// never decays 25 dB.
pub fn estimate_t60(rir: &Rir) -> Option<f64> {
    let edc = schroeder_decay_db(rir);
    let start = edc.iter().position(|&v| v <= -5.0)?;
    let end = edc.iter().position(|&v| v <= -25.0)?;
    if end <= start + 1 {
        return None;
    }
    // Least-squares slope of edc[start..=end] against sample index.
    let xs = || (start..=end).map(|i| i as f64);
    let n = (end - start + 1) as f64;
    let mean_x = xs().sum::<f64>() / n;
    let mean_y = edc[start..=end].iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, &y) in xs().zip(&edc[start..=end]) {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    let slope_db_per_sample = num / den;
    if slope_db_per_sample >= 0.0 {
        return None;
    }
    Some(-60.0 / slope_db_per_sample / rir.sample_rate_hz as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn anechoic() -> ShoeboxRoom {
        ShoeboxRoom {
            dims: [5.0, 4.0, 3.0],
            absorption: 1.0,
            max_order: 0,
        }
    }

    #[test]
    fn anechoic_one_meter_is_a_single_calibrated_tap() {
        let rir = simulate_rir(&anechoic(), [1.0, 1.0, 1.0], [2.0, 1.0, 1.0], 24_000).unwrap();
        let nonzero: Vec<(usize, f64)> = rir
            .taps
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != 0.0)
            .map(|(i, &t)| (i, t))
            .collect();
        assert_eq!(nonzero.len(), 1);
        let (idx, amp) = nonzero[0];
        assert_eq!(idx, 70); // 24000 / 343 = 69.97
        assert!((amp - 1.0 / (4.0 * std::f64::consts::PI)).abs() <= 1e-12);
    }

    #[test]
    fn mirror_symmetric_placements_give_identical_responses() {
        let room = ShoeboxRoom {
            dims: [6.0, 4.0, 3.0],
            absorption: 0.4,
            max_order: 6,
        };
        let a = simulate_rir(&room, [1.5, 2.0, 1.2], [2.5, 2.0, 1.2], 24_000).unwrap();
        // Same geometry reflected about the x = 3 plane.
        let b = simulate_rir(&room, [4.5, 2.0, 1.2], [3.5, 2.0, 1.2], 24_000).unwrap();
        assert_eq!(a.taps.len(), b.taps.len());
        for (x, y) in a.taps.iter().zip(&b.taps) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn schroeder_t60_tracks_sabine() {
        let room = ShoeboxRoom {
            dims: [5.0, 4.0, 3.0],
            absorption: 0.3,
            max_order: 30,
        };
        let rir = simulate_rir(&room, [1.2, 1.4, 1.1], [3.1, 2.6, 1.9], 24_000).unwrap();
        let measured = estimate_t60(&rir).unwrap();
        let predicted = sabine_t60(&room);
        assert!(
            (measured - predicted).abs() <= 0.35 * predicted,
            "measured {measured}, sabine {predicted}"
        );
    }

    #[test]
    fn direct_path_delay_matches_geometry() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(314);
        for _ in 0..20 {
            let room = ShoeboxRoom {
                dims: [
                    rng.gen_range(3.0..8.0),
                    rng.gen_range(3.0..8.0),
                    rng.gen_range(2.4..3.5),
                ],
                absorption: rng.gen_range(0.1..0.9),
                max_order: 8,
            };
            let p = |rng: &mut rand_chacha::ChaCha20Rng, room: &ShoeboxRoom| {
                [
                    rng.gen_range(0.3..room.dims[0] - 0.3),
                    rng.gen_range(0.3..room.dims[1] - 0.3),
                    rng.gen_range(0.3..room.dims[2] - 0.3),
                ]
            };
            let src = p(&mut rng, &room);
            let mic = p(&mut rng, &room);
            let d: f64 = (0..3).map(|a| (src[a] - mic[a]).powi(2)).sum::<f64>().sqrt();
            if d < 0.2 {
                continue;
            }
            let rir = simulate_rir(&room, src, mic, 24_000).unwrap();
            let first = rir.taps.iter().position(|&t| t != 0.0).unwrap();
            let expected = d / SPEED_OF_SOUND_M_S * 24_000.0;
            assert!(
                (first as f64 - expected).abs() <= 1.0,
                "first tap {first}, geometric {expected}"
            );
        }
    }

    #[test]
    fn decay_curve_is_monotone_non_increasing() {
        let room = ShoeboxRoom {
            dims: [4.0, 3.5, 2.8],
            absorption: 0.25,
            max_order: 12,
        };
        let rir = simulate_rir(&room, [1.0, 1.0, 1.0], [2.8, 2.4, 1.7], 24_000).unwrap();
        let edc = schroeder_decay_db(&rir);
        for w in edc.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn identity_and_delay_rirs() {
        let wave = Waveform::new((0..100).map(|i| (i as f64).sin()).collect(), 24_000);
        let ident = Rir {
            taps: vec![1.0],
            sample_rate_hz: 24_000,
        };
        let out = apply_rir(&wave, &ident).unwrap();
        assert_eq!(out.len(), 100);
        for (a, b) in out.samples.iter().zip(&wave.samples) {
            assert!((a - b).abs() <= 1e-12);
        }

        let mut taps = vec![0.0; 101];
        taps[100] = 1.0;
        let delayed = apply_rir(
            &wave,
            &Rir {
                taps,
                sample_rate_hz: 24_000,
            },
        )
        .unwrap();
        assert_eq!(delayed.len(), 200);
        for i in 0..100 {
            assert!(delayed.samples[i].abs() <= 1e-12);
            assert!((delayed.samples[i + 100] - wave.samples[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn fft_convolution_matches_direct_convolution() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let wave = Waveform::new((0..24_000).map(|_| rng.gen_range(-1.0..1.0)).collect(), 24_000);
        let taps: Vec<f64> = (0..2000).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let rir = Rir {
            taps: taps.clone(),
            sample_rate_hz: 24_000,
        };
        let fast = apply_rir(&wave, &rir).unwrap();

        let mut direct = vec![0.0; wave.len() + taps.len() - 1];
        for (i, &x) in wave.samples.iter().enumerate() {
            for (j, &t) in taps.iter().enumerate() {
                direct[i + j] += x * t;
            }
        }
        let peak = direct.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for (a, b) in fast.samples.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-8 * peak, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_distance_and_outside_positions_are_rejected() {
        let room = anechoic();
        assert!(matches!(
            simulate_rir(&room, [1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 24_000),
            Err(SceneError::ZeroDistance)
        ));
        assert!(matches!(
            simulate_rir(&room, [5.0, 1.0, 1.0], [1.0, 1.0, 1.0], 24_000),
            Err(SceneError::OutsideRoom { .. })
        ));
        assert!(matches!(
            simulate_rir(&room, [-0.1, 1.0, 1.0], [1.0, 1.0, 1.0], 24_000),
            Err(SceneError::OutsideRoom { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        /// apply_rir(a*x + b*y) = a*apply_rir(x) + b*apply_rir(y).
        #[test]
        fn convolution_is_linear(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let n = 400usize;
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let taps: Vec<f64> = (0..64).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let rir = Rir { taps, sample_rate_hz: 24_000 };

            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = apply_rir(&Waveform::new(combo, 24_000), &rir).unwrap();
            let fx = apply_rir(&Waveform::new(x, 24_000), &rir).unwrap();
            let fy = apply_rir(&Waveform::new(y, 24_000), &rir).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * fx.samples[i] + b * fy.samples[i];
                prop_assert!((lhs.samples[i] - rhs).abs() <= 1e-8);
            }
        }
    }
}
