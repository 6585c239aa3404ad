//! Training objectives: hinge adversarial pair, L1 reconstruction, style
//! cross-entropy, weighted classification, entropy reduction, the style
//! aggregation combination, and the weighted total. Scalar forms live here
//! for direct use and testing; `graph` holds the builders that assemble the
//! same losses as differentiable nodes.

use serde::{Deserialize, Serialize};

use crate::compositegen::StyleLabel;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Floor applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Trade-off scalars of the total generator objective plus the entropy
/// margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_sty_rd: f64,
    pub lambda_sty_rl: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 0.1,
            lambda_sty_rd: 0.1,
            lambda_sty_rl: 0.05,
            margin: 1.0,
        }
    }
}

/// Which loss terms participate in training; one flag per ablation column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub adv: bool,
    pub sty_in: bool,
    pub sty_out: bool,
    pub weighted: bool,
    pub entropy_reduction: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            adv: true,
            sty_in: true,
            sty_out: true,
            weighted: true,
            entropy_reduction: true,
        }
    }
}

impl LossFlags {
    pub fn reconstruction_only() -> Self {
        LossFlags {
            adv: false,
            sty_in: false,
            sty_out: false,
            weighted: false,
            entropy_reduction: false,
        }
    }
}

/// Named scalar values of every objective on one batch. Disabled terms stay
/// exactly zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_g_rd: f64,
    pub l_rec_rd: f64,
    pub l_rec_rl: f64,
    pub l_in_rd: f64,
    pub l_out_rd: f64,
    pub l_w_rl: f64,
    pub l_er_rl: f64,
    pub l_sa_rl: f64,
    pub l_g_total: f64,
}

impl LossBreakdown {
    /// The weighted combination the generator total must equal.
    pub fn combined(&self, w: &LossWeights) -> f64 {
        loss_total_generator(
            self.l_rec_rd,
            self.l_rec_rl,
            self.l_g_rd,
            self.l_in_rd,
            self.l_out_rd,
            self.l_sa_rl,
            w,
        )
    }

    /// Relative agreement between the recorded total and the recombination of
    /// its parts.
    pub fn total_consistency(&self, w: &LossWeights) -> f64 {
        let c = self.combined(w);
        (self.l_g_total - c).abs() / self.l_g_total.abs().max(c.abs()).max(1e-300)
    }
}

/// Hinge discriminator objective:
/// mean(max(0, 1 - D(f_rl))) + mean(max(0, 1 + D(f_rd))).
pub fn loss_discriminator(score_real: &[f64], score_rendered: &[f64]) -> Result<f64> {
    if score_real.is_empty() || score_rendered.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let a: f64 = score_real.iter().map(|&s| (1.0 - s).max(0.0)).sum::<f64>()
        / score_real.len() as f64;
    let b: f64 = score_rendered
        .iter()
        .map(|&s| (1.0 + s).max(0.0))
        .sum::<f64>()
        / score_rendered.len() as f64;
    Ok(a + b)
}

/// Adversarial generator objective: -mean(D(f_rd)).
pub fn loss_adv_generator(score_rendered: &[f64]) -> Result<f64> {
    if score_rendered.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(-score_rendered.iter().sum::<f64>() / score_rendered.len() as f64)
}

/// Mean absolute error over all elements.
pub fn loss_reconstruction(harmonized: &Tensor, ground_truth: &Tensor) -> Result<f64> {
    if harmonized.shape() != ground_truth.shape() {
        return Err(Error::InvalidTensor(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            harmonized.shape(),
            ground_truth.shape()
        )));
    }
    Ok(harmonized
        .data()
        .iter()
        .zip(ground_truth.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<f64>()
        / harmonized.numel() as f64)
}

/// -sum_k target_k * ln(max(pred_k, floor)).
pub fn loss_style_ce(pred: &StyleLabel, target: &StyleLabel) -> f64 {
    -target
        .probs()
        .iter()
        .zip(pred.probs())
        .map(|(&t, &p)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Weighted classification: the input distribution acts as a constant
/// target for the output distribution.
pub fn loss_weighted_cls(p_in: &StyleLabel, p_out: &StyleLabel) -> f64 {
    -p_in
        .probs()
        .iter()
        .zip(p_out.probs())
        .map(|(&w, &p)| w * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Shannon entropy with the same log floor; zero entries contribute zero.
pub fn entropy(p: &StyleLabel) -> f64 {
    -p.probs()
        .iter()
        .map(|&v| v * v.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// max(0, m - H(p_in) + H(p_out)).
pub fn loss_entropy_reduction(p_in: &StyleLabel, p_out: &StyleLabel, margin: f64) -> Result<f64> {
    if margin < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "entropy-reduction margin must be nonnegative, got {margin}"
        )));
    }
    Ok((margin - entropy(p_in) + entropy(p_out)).max(0.0))
}

/// Style aggregation: weighted classification plus entropy reduction.
pub fn loss_style_aggregation(p_in: &StyleLabel, p_out: &StyleLabel, margin: f64) -> Result<f64> {
    Ok(loss_weighted_cls(p_in, p_out) + loss_entropy_reduction(p_in, p_out, margin)?)
}

/// L_rec_rd + L_rec_rl + l_adv * L_G_rd + l_sty_rd * (L_in + L_out)
/// + l_sty_rl * L_SA.
pub fn loss_total_generator(
    l_rec_rd: f64,
    l_rec_rl: f64,
    l_g_rd: f64,
    l_in_rd: f64,
    l_out_rd: f64,
    l_sa_rl: f64,
    w: &LossWeights,
) -> f64 {
    l_rec_rd
        + l_rec_rl
        + w.lambda_adv * l_g_rd
        + w.lambda_sty_rd * (l_in_rd + l_out_rd)
        + w.lambda_sty_rl * l_sa_rl
}

/// Builders that assemble the same objectives as differentiable graph nodes.
/// Batched inputs are (N, K) distributions or (N, 1) scores; every builder
/// returns a scalar node holding the per-sample mean.
pub mod graph {
    use super::PROB_FLOOR;
    use crate::diffcore::{Graph, NodeId};

    /// mean |a - b|
    pub fn reconstruction(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
        let d = g.sub(a, b);
        let ad = g.abs(d);
        g.mean(ad)
    }

    /// mean(max(0, 1 - s_real)) + mean(max(0, 1 + s_rendered))
    pub fn discriminator_hinge(g: &mut Graph, score_real: NodeId, score_rendered: NodeId) -> NodeId {
        let a = g.affine(score_real, -1.0, 1.0);
        let ra = g.relu(a);
        let ma = g.mean(ra);
        let b = g.affine(score_rendered, 1.0, 1.0);
        let rb = g.relu(b);
        let mb = g.mean(rb);
        g.add(ma, mb)
    }

    /// -mean(s_rendered)
    pub fn adversarial_generator(g: &mut Graph, score_rendered: NodeId) -> NodeId {
        let m = g.mean(score_rendered);
        g.affine(m, -1.0, 0.0)
    }

    /// Per-sample -sum_k t * ln(p), averaged over the batch. `target` may be
    /// an input node (labels) or any distribution node.
    pub fn cross_entropy(g: &mut Graph, pred: NodeId, target: NodeId) -> NodeId {
        let lp = g.ln(pred, PROB_FLOOR);
        let prod = g.mul(target, lp);
        let rows = g.sum_last_dim(prod);
        let neg = g.affine(rows, -1.0, 0.0);
        g.mean(neg)
    }

    /// Per-row Shannon entropy of an (N, K) distribution node -> (N,).
    pub fn entropy_rows(g: &mut Graph, p: NodeId) -> NodeId {
        let lp = g.ln(p, PROB_FLOOR);
        let prod = g.mul(p, lp);
        let s = g.sum_last_dim(prod);
        g.affine(s, -1.0, 0.0)
    }

    /// mean over rows of max(0, m - H(p_in) + H(p_out)).
    pub fn entropy_reduction(g: &mut Graph, p_in: NodeId, p_out: NodeId, margin: f64) -> NodeId {
        let h_in = entropy_rows(g, p_in);
        let h_out = entropy_rows(g, p_out);
        let diff = g.sub(h_out, h_in);
        let shifted = g.affine(diff, 1.0, margin);
        let hinged = g.relu(shifted);
        g.mean(hinged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn label(v: &[f64]) -> StyleLabel {
        StyleLabel::new(v.to_vec()).unwrap()
    }

    fn uniform() -> StyleLabel {
        label(&[0.1; 10])
    }

    const LN10: f64 = 2.302585092994046;

    #[test]
    fn discriminator_hinge_values() {
        assert_eq!(loss_discriminator(&[1.0], &[-1.0]).unwrap(), 0.0);
        assert_eq!(loss_discriminator(&[0.0], &[0.0]).unwrap(), 2.0);
        assert_eq!(loss_discriminator(&[0.5], &[-0.5]).unwrap(), 1.0);
        assert!(loss_discriminator(&[], &[0.0]).is_err());
    }

    #[test]
    fn adversarial_generator_values() {
        assert_eq!(loss_adv_generator(&[-0.5]).unwrap(), 0.5);
        assert_eq!(loss_adv_generator(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(loss_adv_generator(&[1.0, 3.0]).unwrap(), -2.0);
    }

    #[test]
    fn reconstruction_values_and_oracle() {
        let a = Tensor::filled(&[2, 3, 4, 4], 0.6);
        assert_eq!(loss_reconstruction(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v - 0.1);
        assert!((loss_reconstruction(&a, &b).unwrap() - 0.1).abs() < 1e-12);

        let mut rng = seeds::rng(17);
        let x = Tensor::from_vec(
            vec![3, 2, 5, 5],
            (0..150).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = Tensor::from_vec(
            vec![3, 2, 5, 5],
            (0..150).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        // independent elementwise-loop oracle
        let mut acc = 0.0;
        for i in 0..150 {
            acc += (x.data()[i] - y.data()[i]).abs();
        }
        let oracle = acc / 150.0;
        assert!((loss_reconstruction(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn style_ce_values() {
        assert_eq!(loss_style_ce(&label(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
                                 &StyleLabel::one_hot(1)), 0.0);
        let any_target = label(&[0.3, 0.2, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((loss_style_ce(&uniform(), &any_target) - LN10).abs() < 1e-9);
        let pred = label(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let target = label(&[0.25, 0.75, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((loss_style_ce(&pred, &target) - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn weighted_cls_values() {
        let k = StyleLabel::one_hot(4);
        assert_eq!(loss_weighted_cls(&k, &k), 0.0);
        assert!((loss_weighted_cls(&label(&[0.7, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &uniform()) - LN10).abs() < 1e-9);
        // direct-summation oracle for the floored one-hot case
        let got = loss_weighted_cls(&uniform(), &StyleLabel::one_hot(2));
        let mut oracle = 0.0;
        for i in 0..10 {
            let p: f64 = if i == 2 { 1.0 } else { PROB_FLOOR };
            oracle -= 0.1 * p.ln();
        }
        assert!((got - oracle).abs() < 1e-9);
        assert!((got - 0.1 * 9.0 * -PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_reduction_values() {
        let p = label(&[0.4, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(loss_entropy_reduction(&p, &p, 1.0).unwrap(), 1.0);
        let got = loss_entropy_reduction(&uniform(), &StyleLabel::one_hot(0), 1.0).unwrap();
        assert_eq!(got, 0.0, "max(0, 1 - ln 10) = 0");
        let got = loss_entropy_reduction(&StyleLabel::one_hot(0), &uniform(), 1.0).unwrap();
        assert!((got - (1.0 + LN10)).abs() < 1e-9);
        assert!(loss_entropy_reduction(&p, &p, -0.5).is_err());
    }

    #[test]
    fn entropy_reduction_inactive_region() {
        // exactly 0 whenever H(p_out) <= H(p_in) - m
        let p_in = uniform(); // H = ln 10
        let p_out = label(&[0.9, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]); // H ~ 0.325
        let m = 1.0;
        assert!(entropy(&p_out) <= entropy(&p_in) - m);
        assert_eq!(loss_entropy_reduction(&p_in, &p_out, m).unwrap(), 0.0);
    }

    #[test]
    fn style_aggregation_composes() {
        let k = StyleLabel::one_hot(3);
        assert_eq!(loss_style_aggregation(&k, &k, 1.0).unwrap(), 1.0);
        let w = loss_weighted_cls(&uniform(), &StyleLabel::one_hot(0));
        let got = loss_style_aggregation(&uniform(), &StyleLabel::one_hot(0), 1.0).unwrap();
        assert!((got - w).abs() < 1e-12, "ER term is 0 here");
        // m = 0, p_in == p_out: SA = weighted(p, p) + 0 = H(p)
        let p = label(&[0.2, 0.3, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let got = loss_style_aggregation(&p, &p, 0.0).unwrap();
        assert!((got - entropy(&p)).abs() < 1e-12);
    }

    #[test]
    fn ce_of_a_distribution_with_itself_is_its_entropy() {
        let mut rng = seeds::rng(9);
        for _ in 0..20 {
            let mut v: Vec<f64> = (0..10).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            let p = StyleLabel::new(v).unwrap();
            assert!((loss_style_ce(&p, &p) - entropy(&p)).abs() < 1e-12);
        }
    }

    #[test]
    fn total_generator_combinations() {
        let w = LossWeights::default();
        assert_eq!(loss_total_generator(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, &w), 0.0);
        let total = loss_total_generator(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, &w);
        assert!((total - 2.35).abs() < 1e-12);
        let zero = LossWeights {
            lambda_adv: 0.0,
            lambda_sty_rd: 0.0,
            lambda_sty_rl: 0.0,
            margin: 1.0,
        };
        let total = loss_total_generator(0.7, 0.4, 9.0, 9.0, 9.0, 9.0, &zero);
        assert_eq!(total, 0.7 + 0.4);
    }

    #[test]
    fn total_is_linear_in_each_component() {
        let w = LossWeights::default();
        let base = loss_total_generator(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, &w);
        let bumped = loss_total_generator(1.0, 2.0, 3.0 + 2.0, 4.0, 5.0, 6.0, &w);
        assert!((bumped - base - 2.0 * w.lambda_adv).abs() < 1e-12);
    }

    #[test]
    fn breakdown_consistency_check() {
        let w = LossWeights::default();
        let mut b = LossBreakdown {
            l_rec_rd: 0.5,
            l_rec_rl: 0.25,
            l_g_rd: -0.1,
            l_in_rd: 2.0,
            l_out_rd: 1.5,
            l_w_rl: 1.0,
            l_er_rl: 0.5,
            l_sa_rl: 1.5,
            l_d: 1.9,
            l_g_total: 0.0,
        };
        b.l_g_total = b.combined(&w);
        assert!(b.total_consistency(&w) < 1e-12);
    }
}
