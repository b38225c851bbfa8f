//! Training targets and losses: IoU-based labels, binary cross-entropy, and
//! the margin ranking loss over pairs drawn by sampling-after-splitting.

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{max_iou_against, BBox, HIT_IOU};

pub const NUM_BINS: u8 = 6;
pub const XE_CLAMP: f64 = 1e-7;
pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_TOP_H: usize = 100;

// Bin edges fall on multiples of 0.1, where `(rho - 0.5) / 0.1` picks up
// representation error (0.8 maps to 3.0000000000000004).
const BIN_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub index: usize,
    /// Largest IoU against the foreground boxes.
    pub rho: f64,
    pub r_star: f64,
    pub q_bin: u8,
}

impl LabeledBox {
    pub fn is_positive(&self) -> bool {
        self.r_star == 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingConfig {
    pub margin: f64,
    pub top_h: usize,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            margin: DEFAULT_MARGIN,
            top_h: DEFAULT_TOP_H,
        }
    }
}

impl RankingConfig {
    pub fn new(margin: f64, top_h: usize) -> Result<Self> {
        if !(margin > 0.0) || top_h == 0 {
            return Err(Error::Config(format!(
                "ranking margin must be > 0 and top_h >= 1 (got {margin}, {top_h})"
            )));
        }
        Ok(RankingConfig { margin, top_h })
    }
}

/// `ceil(max(0, rho - 0.5) / 0.1)`, in `0..=5`.
pub fn q_bin(rho: f64) -> u8 {
    if rho <= HIT_IOU {
        return 0;
    }
    let raw = ((rho - HIT_IOU) / 0.1 - BIN_SLACK).ceil();
    raw.clamp(1.0, (NUM_BINS - 1) as f64) as u8
}

pub fn assign_labels(boxes: &[BBox], foreground: &[BBox]) -> Vec<LabeledBox> {
    boxes
        .iter()
        .enumerate()
        .map(|(index, b)| {
            let rho = max_iou_against(b, foreground);
            LabeledBox {
                index,
                rho,
                r_star: if rho > HIT_IOU { 1.0 } else { 0.0 },
                q_bin: q_bin(rho),
            }
        })
        .collect()
}

fn check_batch(r: usize, labels: usize) -> Result<()> {
    if r != labels {
        return Err(Error::shape(
            "binary_xe",
            format!("{r} predictions for {labels} labels"),
        ));
    }
    if r == 0 {
        return Err(Error::Empty("binary_xe over an empty batch".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn binary_xe(r: &[f64], r_star: &[f64]) -> Result<f64> {
    check_batch(r.len(), r_star.len())?;
    let total: f64 = r
        .iter()
        .zip(r_star)
        .map(|(&p, &y)| {
            let p = p.clamp(XE_CLAMP, 1.0 - XE_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / r.len() as f64)
}

/// [`binary_xe`] on graph node `r` (`n×1`).
pub fn binary_xe_node(g: &mut Graph, r: Var, r_star: &[f64]) -> Result<Var> {
    let n = g.value(r).len();
    check_batch(n, r_star.len())?;
    let shape = g.shape(r).to_vec();
    let y = g.constant(Array::new(shape.clone(), r_star.to_vec())?);
    let not_y = g.constant(Array::new(shape, r_star.iter().map(|v| 1.0 - v).collect())?);

    let p = g.clamp(r, XE_CLAMP, 1.0 - XE_CLAMP);
    let log_p = g.log(p);
    let one_minus = g.scale(p, -1.0);
    let one_minus = g.offset(one_minus, 1.0);
    let log_q = g.log(one_minus);
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let ll = g.add(pos, neg)?;
    let mean = g.mean(ll)?;
    Ok(g.scale(mean, -1.0))
}

/// `(negative, positive)` box indices.
pub type Pair = (usize, usize);

/// For each positive (ascending index), pairs it with up to `top_h` boxes from
/// strictly lower bins, highest predicted score first (ties by index).
pub fn sample_pairs(labeled: &[LabeledBox], predicted_r: &[f64], cfg: &RankingConfig) -> Result<Vec<Pair>> {
    if labeled.len() != predicted_r.len() {
        return Err(Error::shape(
            "sample_pairs",
            format!("{} labels for {} scores", labeled.len(), predicted_r.len()),
        ));
    }
    // Boxes sorted once by descending score; each positive takes a prefix of
    // the eligible ones.
    let mut by_score: Vec<usize> = (0..labeled.len()).collect();
    by_score.sort_by(|&a, &b| predicted_r[b].total_cmp(&predicted_r[a]).then(a.cmp(&b)));

    let mut pairs = Vec::new();
    for pos in labeled.iter().filter(|l| l.is_positive()) {
        pairs.extend(
            by_score
                .iter()
                .filter(|&&i| labeled[i].q_bin < pos.q_bin)
                .take(cfg.top_h)
                .map(|&i| (labeled[i].index, pos.index)),
        );
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingLoss {
    pub value: f64,
    /// False when there were no pairs; the value is then 0 and carries no gradient.
    pub defined: bool,
}

/// Mean hinge `max(0, r_neg - r_pos + margin)` over the emitted pairs.
pub fn ranking_loss(pairs: &[Pair], predicted_r: &[f64], cfg: &RankingConfig) -> RankingLoss {
    if pairs.is_empty() {
        return RankingLoss {
            value: 0.0,
            defined: false,
        };
    }
    let total: f64 = pairs
        .iter()
        .map(|&(n, p)| (predicted_r[n] - predicted_r[p] + cfg.margin).max(0.0))
        .sum();
    RankingLoss {
        value: total / pairs.len() as f64,
        defined: true,
    }
}

/// [`ranking_loss`] on graph node `r` (`n×1`); `None` when there are no pairs.
pub fn ranking_loss_node(g: &mut Graph, r: Var, pairs: &[Pair], cfg: &RankingConfig) -> Result<Option<Var>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let neg: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let pos: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let rn = g.gather_rows(r, &neg)?;
    let rp = g.gather_rows(r, &pos)?;
    let diff = g.sub(rn, rp)?;
    let diff = g.offset(diff, cfg.margin);
    let hinge = g.relu(diff);
    g.mean(hinge).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, DEFAULT_STEP};

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn lb(index: usize, rho: f64) -> LabeledBox {
        LabeledBox {
            index,
            rho,
            r_star: if rho > 0.5 { 1.0 } else { 0.0 },
            q_bin: q_bin(rho),
        }
    }

    #[test]
    fn q_bin_matches_integer_formula_on_grid() {
        for k in 0..=100u32 {
            let rho = k as f64 / 100.0;
            // ceil(max(0, k - 50) / 10) in exact integer arithmetic
            let want = k.saturating_sub(50).div_ceil(10);
            assert_eq!(q_bin(rho) as u32, want, "rho = {rho}");
        }
        assert_eq!(q_bin(0.5), 0);
        assert_eq!(q_bin(1.0), 5);
        assert_eq!(q_bin(0.5 + 1e-12), 1);
    }

    #[test]
    fn q_bin_is_monotone() {
        let mut last = 0;
        for k in 0..=10_000 {
            let q = q_bin(k as f64 / 10_000.0);
            assert!(q >= last);
            last = q;
        }
    }

    #[test]
    fn label_examples() {
        let fg = [b(0.0, 0.0, 10.0, 10.0)];
        let l = assign_labels(&[b(0.0, 0.0, 10.0, 10.0)], &fg);
        assert_eq!((l[0].rho, l[0].r_star, l[0].q_bin), (1.0, 1.0, 5));
        assert_eq!((lb(0, 0.3).r_star, lb(0, 0.3).q_bin), (0.0, 0));
        assert_eq!((lb(0, 0.55).r_star, lb(0, 0.55).q_bin), (1.0, 1));
        assert!(assign_labels(&[b(0.0, 0.0, 1.0, 1.0)], &[])[0].rho == 0.0);
    }

    #[test]
    fn xe_examples() {
        assert!((binary_xe(&[0.5], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let near = binary_xe(&[1.0 - 1e-7], &[1.0]).unwrap();
        assert!(near > 0.0 && (near - 1e-7).abs() < 1e-12);
        assert!((binary_xe(&[0.9, 0.1], &[1.0, 0.0]).unwrap() + 0.9f64.ln()).abs() < 1e-12);
        assert!(binary_xe(&[], &[]).is_err());
        assert!(binary_xe(&[0.5], &[1.0, 0.0]).is_err());
        // exact 0 and 1 predictions are clamped
        assert!(binary_xe(&[0.0, 1.0], &[1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn xe_minimized_at_label() {
        for y in [0.0, 1.0] {
            let best = (1..1000)
                .map(|k| k as f64 / 1000.0)
                .min_by(|a, b| {
                    binary_xe(&[*a], &[y])
                        .unwrap()
                        .total_cmp(&binary_xe(&[*b], &[y]).unwrap())
                })
                .unwrap();
            assert!((best - y).abs() <= 0.001 + 1e-12, "y={y} best={best}");
        }
    }

    #[test]
    fn xe_node_matches_values_and_gradients() {
        let r = [0.2, 0.7, 0.95, 0.4];
        let y = [0.0, 1.0, 1.0, 0.0];
        let mut g = Graph::new();
        let rv = g.param(Array::new(vec![4, 1], r.to_vec()).unwrap());
        let l = binary_xe_node(&mut g, rv, &y).unwrap();
        assert!((g.value(l).item() - binary_xe(&r, &y).unwrap()).abs() < 1e-15);

        let err = grad_check(
            |g: &mut Graph, v: &[Var]| binary_xe_node(g, v[0], &y),
            &[Array::new(vec![4, 1], r.to_vec()).unwrap()],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn pairs_examples() {
        let cfg = RankingConfig::new(0.1, 2).unwrap();
        let none = [lb(0, 0.1), lb(1, 0.5)];
        assert!(sample_pairs(&none, &[0.3, 0.9], &cfg).unwrap().is_empty());

        let l = [lb(0, 1.0), lb(1, 0.0), lb(2, 0.1), lb(3, 0.2)];
        let pairs = sample_pairs(&l, &[0.5, 0.9, 0.2, 0.5], &cfg).unwrap();
        assert_eq!(pairs, vec![(1, 0), (3, 0)]);

        // same bin is not an eligible negative
        let l = [lb(0, 0.55), lb(1, 0.58), lb(2, 0.3)];
        let pairs = sample_pairs(&l, &[0.1, 0.9, 0.5], &cfg).unwrap();
        assert_eq!(pairs, vec![(2, 0), (2, 1)]);
    }

    #[test]
    fn pairs_tie_break_by_index() {
        let cfg = RankingConfig::new(0.1, 2).unwrap();
        let l = [lb(0, 0.9), lb(1, 0.2), lb(2, 0.2), lb(3, 0.2)];
        let pairs = sample_pairs(&l, &[0.9, 0.4, 0.4, 0.4], &cfg).unwrap();
        assert_eq!(pairs, vec![(1, 0), (2, 0)]);
    }

    #[test]
    fn ranking_examples() {
        let cfg = RankingConfig::default();
        let r = [0.9, 0.5, 0.2, 0.6];
        let one = ranking_loss(&[(0, 1)], &r, &cfg);
        assert!((one.value - 0.5).abs() < 1e-12 && one.defined);
        assert_eq!(ranking_loss(&[(2, 3)], &r, &cfg).value, 0.0);
        let two = ranking_loss(&[(0, 1), (2, 3)], &r, &cfg);
        assert!((two.value - 0.25).abs() < 1e-12);
        let empty = ranking_loss(&[], &r, &cfg);
        assert_eq!((empty.value, empty.defined), (0.0, false));
    }

    #[test]
    fn ranking_node_matches_values() {
        let cfg = RankingConfig::default();
        let r = [0.9, 0.5, 0.2, 0.6, 0.55];
        let pairs = [(0, 1), (2, 3), (4, 3), (0, 3)];
        let mut g = Graph::new();
        let rv = g.param(Array::new(vec![5, 1], r.to_vec()).unwrap());
        let l = ranking_loss_node(&mut g, rv, &pairs, &cfg).unwrap().unwrap();
        assert!((g.value(l).item() - ranking_loss(&pairs, &r, &cfg).value).abs() < 1e-15);
        g.backward(l).unwrap();
        // active hinges: (0,1), (4,3), (0,3); each contributes +1/4 to the
        // negative and -1/4 to the positive
        assert_eq!(g.grad(rv).unwrap().data(), &[0.5, -0.25, 0.0, -0.5, 0.25]);
        assert!(ranking_loss_node(&mut Graph::new(), rv, &[], &cfg).unwrap().is_none());
    }

    #[test]
    fn config_validation() {
        assert!(RankingConfig::new(0.0, 10).is_err());
        assert!(RankingConfig::new(0.1, 0).is_err());
    }
}
