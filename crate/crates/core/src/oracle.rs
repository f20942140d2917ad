//! Inverts the synthetic generator: recovers speaker attributes from a grid
//! without knowing the text.

use crate::caption::Caption;
use crate::data::{
    expressiveness_level, rate_level, tilt_level, BASE_FRAMES, CHAR_BASE_BIN, F0_AMP, F0_BASE_BIN,
    MOD_DEPTH, N_MELS, NOISE_STD,
};
use crate::mat::MelGrid;

/// Highest bin searched for the fundamental.
const F0_SEARCH_END: usize = 6;
/// Bins within this distance of the fundamental are left out of the slope fit.
const F0_GUARD: usize = 2;
const BASELINE_QUANTILE: f64 = 0.1;
/// Minimum bump height above the tilt line for a frame to count as voiced.
const CHAR_THRESHOLD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatedAttributes {
    pub pitch_idx: u8,
    pub tilt: f64,
    pub rate: f64,
    pub expressiveness: f64,
}

impl EstimatedAttributes {
    pub fn caption(&self) -> Caption {
        Caption::new(
            tilt_level(self.tilt),
            self.pitch_idx,
            rate_level(self.rate),
            expressiveness_level(self.expressiveness),
        )
        .expect("quantized levels are in range")
    }
}

fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let idx = ((values.len() - 1) as f64 * q).floor() as usize;
    values[idx]
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Most frequent per-frame argmax inside the fundamental search band.
pub fn fundamental_bin(mel: &MelGrid) -> usize {
    let mut votes = [0usize; F0_SEARCH_END];
    for t in 0..mel.rows() {
        let row = mel.row(t);
        votes[argmax(row[..F0_SEARCH_END].iter().map(|&v| v as f64))] += 1;
    }
    argmax(votes.iter().map(|&v| v as f64))
}

/// Least-squares line `intercept + slope * bin` through a low quantile of each
/// bin, skipping bins next to the fundamental.
fn baseline_line(mel: &MelGrid, f0: usize) -> (f64, f64) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..mel.cols() {
        if k.abs_diff(f0) <= F0_GUARD {
            continue;
        }
        let mut col: Vec<f64> = (0..mel.rows()).map(|t| mel.get(t, k) as f64).collect();
        xs.push(k as f64);
        ys.push(quantile(&mut col, BASELINE_QUANTILE));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

/// Median run length of the per-frame dominant letter bin.
fn median_run_length(mel: &MelGrid, pitch_idx: u8, line: (f64, f64)) -> f64 {
    let lo = CHAR_BASE_BIN + pitch_idx as usize;
    let symbols: Vec<i32> = (0..mel.rows())
        .map(|t| {
            let row = mel.row(t);
            let resid = (lo..N_MELS).map(|k| row[k] as f64 - (line.0 + line.1 * k as f64));
            let (mut best, mut val) = (0usize, f64::NEG_INFINITY);
            for (i, r) in resid.enumerate() {
                if r > val {
                    best = i;
                    val = r;
                }
            }
            if val < CHAR_THRESHOLD {
                -1
            } else {
                best as i32
            }
        })
        .collect();
    let mut runs = Vec::new();
    let mut len = 1usize;
    for w in symbols.windows(2) {
        if w[0] == w[1] {
            len += 1;
        } else {
            runs.push(len as f64);
            len = 1;
        }
    }
    runs.push(len as f64);
    let mid = runs.len() / 2;
    runs.sort_by(|a, b| a.total_cmp(b));
    if runs.len() % 2 == 1 {
        runs[mid]
    } else {
        0.5 * (runs[mid - 1] + runs[mid])
    }
}

/// Recovers every attribute from a nonempty grid.
pub fn estimate_attributes(mel: &MelGrid) -> EstimatedAttributes {
    assert!(mel.rows() > 0 && mel.cols() == N_MELS, "oracle needs a nonempty {N_MELS}-bin grid");
    let f0 = fundamental_bin(mel);
    let pitch_idx = f0.saturating_sub(F0_BASE_BIN).min(2) as u8;
    let line = baseline_line(mel, f0);
    let mid = (N_MELS as f64 - 1.0) / 2.0;
    let tilt = (line.1 * mid).clamp(-1.0, 1.0);

    let fpc = median_run_length(mel, pitch_idx, line);
    let rate = (BASE_FRAMES as f64 / fpc).clamp(0.5, 2.0);

    let amps: Vec<f64> =
        (0..mel.rows()).map(|t| mel.get(t, f0) as f64 - (line.0 + line.1 * f0 as f64)).collect();
    let n = amps.len() as f64;
    let mean = amps.iter().sum::<f64>() / n;
    let var = amps.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let mod_std = (var - NOISE_STD * NOISE_STD).max(0.0).sqrt();
    let expressiveness = if mean > 1e-6 {
        (mod_std * std::f64::consts::SQRT_2 / (mean.max(0.1 * F0_AMP) * MOD_DEPTH)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    EstimatedAttributes { pitch_idx, tilt, rate, expressiveness }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{caption_from_params, gen_utterance, sample_text, SpeakerParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_pitch_exactly_and_tilt_closely() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut worst_tilt: f64 = 0.0;
        for i in 0..100 {
            let spk = SpeakerParams::new(
                rng.gen_range(0..3),
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(0.5..=2.0),
                rng.gen_range(0.0..=1.0),
            )
            .unwrap();
            let text = sample_text(&mut rng);
            let u = gen_utterance(&spk, &text, i).unwrap();
            let est = estimate_attributes(&u.mel);
            assert_eq!(est.pitch_idx, spk.pitch_idx, "utterance {i}: {spk:?} {text}");
            worst_tilt = worst_tilt.max((est.tilt - spk.tilt as f64).abs());
        }
        assert!(worst_tilt < 0.1, "worst tilt error {worst_tilt}");
    }

    #[test]
    fn recovers_captions_of_sampled_speakers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut exact = 0;
        for i in 0..200 {
            let spk = SpeakerParams::sample(&mut rng);
            let text = sample_text(&mut rng);
            let u = gen_utterance(&spk, &text, i).unwrap();
            let est = estimate_attributes(&u.mel).caption();
            let truth = caption_from_params(&spk);
            for a in crate::caption::Attribute::ALL {
                assert!(est.level(a).abs_diff(truth.level(a)) <= 1, "{a:?}: {est} vs {truth}");
            }
            exact += (est == truth) as usize;
        }
        assert!(exact >= 180, "only {exact}/200 captions recovered exactly");
    }
}
