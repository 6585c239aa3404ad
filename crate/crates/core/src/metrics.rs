//! Evaluation measures (MSE, foreground MSE, PSNR on the 0-255 scale) and
//! maximum-likelihood Bradley-Terry ranking from pairwise judgments.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// [0, 1] tensors are mapped onto this scale (without rounding) before any
/// metric is computed.
pub const PIXEL_SCALE: f64 = 255.0;

/// PSNR reported for a (near-)zero error; reached when mse < 255^2 * 1e-10.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn scale_to_255(t: &Tensor) -> Tensor {
    t.map(|v| v * PIXEL_SCALE)
}

fn check_shapes(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::InvalidTensor(format!(
            "metric shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Mean squared error per pixel-channel. Inputs on the 0-255 scale.
pub fn mse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.numel() as f64)
}

fn masked_sq_sum(pred: &Tensor, gt: &Tensor, mask: &Tensor, want: f64) -> (f64, usize) {
    let plane = mask.numel() / mask.shape()[0].max(1);
    let _ = plane;
    let hw = mask.shape()[mask.shape().len() - 2] * mask.shape()[mask.shape().len() - 1];
    let channels = pred.numel() / hw;
    let mut acc = 0.0;
    let mut count = 0usize;
    for j in 0..hw {
        if mask.data()[j] == want {
            count += 1;
            for c in 0..channels {
                let d = pred.data()[c * hw + j] - gt.data()[c * hw + j];
                acc += d * d;
            }
        }
    }
    (acc, count * channels)
}

/// Mean squared error over foreground pixels only (denominator = foreground
/// pixel count x channels). Inputs on the 0-255 scale; mask binary.
pub fn fmse(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    check_shapes(pred, gt)?;
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryMask);
    }
    let (acc, denom) = masked_sq_sum(pred, gt, mask, 1.0);
    if denom == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(acc / denom as f64)
}

/// Background counterpart of `fmse`.
pub fn bmse(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (acc, denom) = masked_sq_sum(pred, gt, mask, 0.0);
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(acc / denom as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PIXEL_SCALE * PIXEL_SCALE * 1e-10 {
        return PSNR_CAP_DB;
    }
    10.0 * (PIXEL_SCALE * PIXEL_SCALE / mse).log10()
}

/// 10 log10(255^2 / mse), capped at 100 dB.
pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

/// Per-sample evaluation record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: usize,
    pub mse: f64,
    pub fmse: f64,
    pub psnr: f64,
}

// ---------------------------------------------------------------------------
// Bradley-Terry
// ---------------------------------------------------------------------------

/// Pairwise win counts: `wins[a][b]` judgments preferred a over b.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairwiseTally {
    wins: Vec<Vec<u64>>,
}

impl PairwiseTally {
    pub fn new(n_methods: usize) -> Self {
        PairwiseTally {
            wins: vec![vec![0; n_methods]; n_methods],
        }
    }

    pub fn from_matrix(wins: Vec<Vec<u64>>) -> Result<Self> {
        let n = wins.len();
        for (i, row) in wins.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidArgument("tally matrix must be square".into()));
            }
            if row[i] != 0 {
                return Err(Error::InvalidArgument(
                    "tally diagonal must be zero".into(),
                ));
            }
        }
        Ok(PairwiseTally { wins })
    }

    pub fn n_methods(&self) -> usize {
        self.wins.len()
    }

    pub fn record(&mut self, winner: usize, loser: usize, count: u64) {
        assert_ne!(winner, loser, "a method cannot beat itself");
        self.wins[winner][loser] += count;
    }

    pub fn wins(&self, a: usize, b: usize) -> u64 {
        self.wins[a][b]
    }

    fn total(&self) -> u64 {
        self.wins.iter().flatten().sum()
    }

    /// Every method reachable from every other through compared pairs.
    fn is_connected(&self) -> bool {
        let n = self.n_methods();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        while let Some(a) = stack.pop() {
            if seen[a] {
                continue;
            }
            seen[a] = true;
            for b in 0..n {
                if !seen[b] && (self.wins[a][b] + self.wins[b][a]) > 0 {
                    stack.push(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

const BT_FLOOR: f64 = 1e-12;

/// Maximum-likelihood Bradley-Terry strengths by minorization-maximization
/// fixed-point iteration, normalized to zero mean in log space. Converged
/// when the largest log-strength change drops below `tolerance`.
pub fn bt_scores(tally: &PairwiseTally, iterations: usize, tolerance: f64) -> Result<Vec<f64>> {
    let n = tally.n_methods();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "ranking needs at least two methods".into(),
        ));
    }
    if tally.total() == 0 {
        return Err(Error::EmptyTally);
    }
    if !tally.is_connected() {
        return Err(Error::DisconnectedTally);
    }
    let total_wins: Vec<f64> = (0..n)
        .map(|a| (0..n).map(|b| tally.wins(a, b)).sum::<u64>() as f64)
        .collect();
    let mut strengths = vec![1.0f64; n];
    for _ in 0..iterations {
        let mut next = vec![0.0f64; n];
        for a in 0..n {
            let mut denom = 0.0;
            for b in 0..n {
                if a == b {
                    continue;
                }
                let games = (tally.wins(a, b) + tally.wins(b, a)) as f64;
                if games > 0.0 {
                    denom += games / (strengths[a] + strengths[b]);
                }
            }
            next[a] = if denom > 0.0 {
                (total_wins[a] / denom).max(BT_FLOOR)
            } else {
                strengths[a]
            };
        }
        // normalize to zero mean in log space
        let log_mean = next.iter().map(|s| s.ln()).sum::<f64>() / n as f64;
        let scale = log_mean.exp();
        for s in &mut next {
            *s /= scale;
        }
        let delta = strengths
            .iter()
            .zip(&next)
            .map(|(&a, &b)| (a.ln() - b.ln()).abs())
            .fold(0.0, f64::max);
        strengths = next;
        if delta < tolerance {
            break;
        }
    }
    Ok(strengths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn random_pair(seed: u64, n: usize) -> (Tensor, Tensor) {
        let mut rng = seeds::rng(seed);
        let a = Tensor::from_vec(
            vec![3, n, n],
            (0..3 * n * n).map(|_| rng.gen_range(0.0..255.0)).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(
            vec![3, n, n],
            (0..3 * n * n).map(|_| rng.gen_range(0.0..255.0)).collect(),
        )
        .unwrap();
        (a, b)
    }

    fn random_mask(seed: u64, n: usize) -> Tensor {
        let mut rng = seeds::rng(seed);
        let mut m = Tensor::zeros(&[1, n, n]);
        for v in m.data_mut() {
            *v = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
        }
        m.data_mut()[0] = 1.0; // nonempty
        m
    }

    #[test]
    fn mse_basic_and_oracle() {
        let (a, _) = random_pair(1, 8);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 10.0);
        assert!((mse(&a, &b).unwrap() - 100.0).abs() < 1e-9);

        let (x, y) = random_pair(2, 16);
        // direct double-loop oracle
        let mut acc = 0.0;
        for i in 0..x.numel() {
            let d = x.data()[i] - y.data()[i];
            acc += d * d;
        }
        let oracle = acc / x.numel() as f64;
        let got = mse(&x, &y).unwrap();
        assert!((got - oracle).abs() / oracle.max(1e-300) < 1e-10);
    }

    #[test]
    fn fmse_dilution_identity() {
        let n = 8;
        let mask = random_mask(3, n);
        let (gt, _) = random_pair(4, n);
        // foreground off by 10, background identical
        let mut pred = gt.clone();
        let hw = n * n;
        for c in 0..3 {
            for j in 0..hw {
                if mask.data()[j] == 1.0 {
                    pred.data_mut()[c * hw + j] += 10.0;
                }
            }
        }
        let f = fmse(&pred, &gt, &mask).unwrap();
        assert!((f - 100.0).abs() < 1e-9);
        let m = mse(&pred, &gt).unwrap();
        let r = mask.data().iter().sum::<f64>() / hw as f64;
        assert!((m - 100.0 * r).abs() < 1e-9);
    }

    #[test]
    fn fmse_matches_masked_oracle() {
        let n = 16;
        let (x, y) = random_pair(5, n);
        let mask = random_mask(6, n);
        let hw = n * n;
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for j in 0..hw {
            if mask.data()[j] == 1.0 {
                for c in 0..3 {
                    let d = x.data()[c * hw + j] - y.data()[c * hw + j];
                    acc += d * d;
                }
                cnt += 3;
            }
        }
        let oracle = acc / cnt as f64;
        let got = fmse(&x, &y, &mask).unwrap();
        assert!((got - oracle).abs() / oracle.max(1e-300) < 1e-10);
        assert!(matches!(
            fmse(&x, &y, &Tensor::zeros(&[1, n, n])).unwrap_err(),
            Error::EmptyMask
        ));
    }

    #[test]
    fn decomposition_mse_eq_r_fmse_plus_bmse() {
        for seed in 0..5u64 {
            let n = 16;
            let (x, y) = random_pair(seed * 2 + 10, n);
            let mask = random_mask(seed * 2 + 11, n);
            let hw = (n * n) as f64;
            let r = mask.data().iter().sum::<f64>() / hw;
            let m = mse(&x, &y).unwrap();
            let f = fmse(&x, &y, &mask).unwrap();
            let b = bmse(&x, &y, &mask).unwrap();
            let recon = r * f + (1.0 - r) * b;
            assert!((m - recon).abs() / m.max(recon).max(1e-300) < 1e-12);
        }
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::filled(&[1, 4, 4], 255.0);
        let b = Tensor::zeros(&[1, 4, 4]);
        assert!((psnr(&a, &b).unwrap() - 0.0).abs() < 1e-12, "mse = 255^2");
        assert!((psnr_from_mse(1.0) - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_strictly_decreasing_below_cap() {
        let mut prev = f64::INFINITY;
        for mse_v in [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, 65025.0] {
            let p = psnr_from_mse(mse_v);
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn bt_symmetric_and_closed_form() {
        let mut t = PairwiseTally::new(2);
        t.record(0, 1, 2);
        t.record(1, 0, 2);
        let s = bt_scores(&t, 1000, 1e-12).unwrap();
        assert!((s[0] - s[1]).abs() < 1e-9);

        let mut t = PairwiseTally::new(2);
        t.record(0, 1, 3);
        t.record(1, 0, 1);
        let s = bt_scores(&t, 10_000, 1e-14).unwrap();
        assert!(((s[0] / s[1]) - 3.0).abs() < 1e-6, "ratio {}", s[0] / s[1]);
    }

    #[test]
    fn bt_recovers_ranking_from_simulated_judgments() {
        let truth = [3.0, 1.6, 1.0, 0.55, 0.2];
        let mut rng = seeds::rng(77);
        let mut tally = PairwiseTally::new(5);
        for a in 0..5 {
            for b in (a + 1)..5 {
                for _ in 0..1000 {
                    let p = truth[a] / (truth[a] + truth[b]);
                    if rng.gen_bool(p) {
                        tally.record(a, b, 1);
                    } else {
                        tally.record(b, a, 1);
                    }
                }
            }
        }
        let s = bt_scores(&tally, 10_000, 1e-12).unwrap();
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn bt_invariant_under_tally_scaling() {
        let mut t1 = PairwiseTally::new(3);
        t1.record(0, 1, 7);
        t1.record(1, 0, 3);
        t1.record(1, 2, 9);
        t1.record(2, 1, 2);
        t1.record(0, 2, 5);
        t1.record(2, 0, 4);
        let mut t2 = PairwiseTally::new(3);
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    t2.record(a, b, t1.wins(a, b) * 10);
                }
            }
        }
        let s1 = bt_scores(&t1, 10_000, 1e-13).unwrap();
        let s2 = bt_scores(&t2, 10_000, 1e-13).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bt_error_cases() {
        let t = PairwiseTally::new(3);
        assert!(matches!(bt_scores(&t, 10, 1e-6), Err(Error::EmptyTally)));
        let mut t = PairwiseTally::new(4);
        t.record(0, 1, 5);
        t.record(1, 0, 5);
        t.record(2, 3, 5);
        t.record(3, 2, 5);
        assert!(matches!(
            bt_scores(&t, 10, 1e-6),
            Err(Error::DisconnectedTally)
        ));
    }
}
