//! Greedy non-maximum suppression with a pluggable ranking criterion, and
//! proposal selection under a budget.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::ingest::ImageDetections;
use crate::model::{score_boxes, ModelParameters, Relatedness, ScoredProposal};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;
/// Confidence floor of the "real case" budget.
pub const REAL_CASE_CONF: f64 = 0.65;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Detector confidence `c`.
    Confidence,
    /// `r * c`.
    Fused,
}

impl Criterion {
    pub fn score(&self, p: &ScoredProposal) -> f64 {
        match self {
            Criterion::Confidence => p.confidence,
            Criterion::Fused => p.fused,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub per_class: bool,
    pub criterion: Criterion,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            per_class: true,
            criterion: Criterion::Confidence,
        }
    }
}

impl NmsConfig {
    pub fn new(iou_threshold: f64, per_class: bool, criterion: Criterion) -> Result<Self> {
        if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
            return Err(Error::Config(format!("iou threshold {iou_threshold} outside (0, 1)")));
        }
        Ok(NmsConfig {
            iou_threshold,
            per_class,
            criterion,
        })
    }
}

/// Descending score, ties by ascending position.
fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Classic greedy NMS. Returns positions into `items` in keep order.
pub fn greedy_nms(items: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = items.iter().map(|(_, s)| *s).collect();
    let order = rank_order(&scores);
    let mut suppressed = vec![false; items.len()];
    let mut keep = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[k + 1..] {
            if !suppressed[j] && iou(&items[i].0, &items[j].0) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// NMS on `cfg.criterion`, within each category unless `per_class` is off.
/// The merged output is sorted by criterion score, ties by input position.
pub fn per_class_nms(proposals: &[ScoredProposal], cfg: &NmsConfig) -> Vec<ScoredProposal> {
    let score = |p: &ScoredProposal| cfg.criterion.score(p);
    let mut kept: Vec<usize> = Vec::new();
    if cfg.per_class {
        let mut classes: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, p) in proposals.iter().enumerate() {
            classes.entry(p.category_id).or_default().push(i);
        }
        for members in classes.values() {
            let items: Vec<(BBox, f64)> = members
                .iter()
                .map(|&i| (proposals[i].bbox, score(&proposals[i])))
                .collect();
            kept.extend(greedy_nms(&items, cfg.iou_threshold).into_iter().map(|k| members[k]));
        }
    } else {
        let items: Vec<(BBox, f64)> = proposals.iter().map(|p| (p.bbox, score(p))).collect();
        kept = greedy_nms(&items, cfg.iou_threshold);
    }
    kept.sort_by(|&a, &b| score(&proposals[b]).total_cmp(&score(&proposals[a])).then(a.cmp(&b)));
    kept.into_iter().map(|i| proposals[i].clone()).collect()
}

/// How many proposals are forwarded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProposalBudget {
    TopN(usize),
    /// Every proposal whose criterion score is at least this value.
    Threshold(f64),
}

impl ProposalBudget {
    pub fn real_case() -> Self {
        ProposalBudget::Threshold(REAL_CASE_CONF)
    }
}

impl fmt::Display for ProposalBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProposalBudget::TopN(n) => write!(f, "{n}"),
            ProposalBudget::Threshold(c) if *c == REAL_CASE_CONF => f.write_str("real_case"),
            ProposalBudget::Threshold(c) => write!(f, "conf>={c}"),
        }
    }
}

/// Accepts `N`, `real_case` or `conf>=X`.
impl FromStr for ProposalBudget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "real_case" {
            return Ok(ProposalBudget::real_case());
        }
        if let Some(c) = s.strip_prefix("conf>=") {
            let c: f64 = c
                .parse()
                .map_err(|_| Error::Config(format!("bad confidence floor in budget `{s}`")))?;
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("confidence floor {c} outside [0, 1]")));
            }
            return Ok(ProposalBudget::Threshold(c));
        }
        s.parse()
            .map(ProposalBudget::TopN)
            .map_err(|_| Error::Config(format!("bad budget `{s}` (expected N, real_case or conf>=X)")))
    }
}

/// Parses a comma-separated budget list.
pub fn parse_budgets(s: &str) -> Result<Vec<ProposalBudget>> {
    let out: Vec<ProposalBudget> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("empty budget list".into()));
    }
    Ok(out)
}

/// Applies `budget` to proposals already sorted by `criterion`.
pub fn select_proposals(kept: &[ScoredProposal], budget: ProposalBudget, criterion: Criterion) -> Vec<ScoredProposal> {
    match budget {
        ProposalBudget::TopN(n) => kept.iter().take(n).cloned().collect(),
        ProposalBudget::Threshold(c) => kept.iter().filter(|p| criterion.score(p) >= c).cloned().collect(),
    }
}

/// δ-filter, score, NMS and budget in one go.
pub fn filter_proposals(
    image: &ImageDetections,
    indices: &[usize],
    relatedness: Relatedness<'_>,
    delta: f64,
    cfg: &NmsConfig,
    budget: ProposalBudget,
) -> Result<Vec<ScoredProposal>> {
    let scored = score_boxes(image, indices, relatedness, delta)?;
    let kept = per_class_nms(&scored, cfg);
    Ok(select_proposals(&kept, budget, cfg.criterion))
}

/// Expression-aware filtering: NMS and budget on the fused score.
pub fn ref_nms_pipeline(
    image: &ImageDetections,
    indices: &[usize],
    params: &ModelParameters,
    delta: f64,
    cfg: &NmsConfig,
    budget: ProposalBudget,
) -> Result<Vec<ScoredProposal>> {
    let cfg = NmsConfig {
        criterion: Criterion::Fused,
        ..*cfg
    };
    filter_proposals(image, indices, Relatedness::Model(params), delta, &cfg, budget)
}

/// Confidence-only filtering; relatedness is reported as 1.
pub fn baseline_pipeline(
    image: &ImageDetections,
    delta: f64,
    cfg: &NmsConfig,
    budget: ProposalBudget,
) -> Result<Vec<ScoredProposal>> {
    let cfg = NmsConfig {
        criterion: Criterion::Confidence,
        ..*cfg
    };
    filter_proposals(image, &[], Relatedness::Constant(1.0), delta, &cfg, budget)
}

/// Keep order equality on `(index, bbox)`: the proposals themselves, not
/// their scores.
pub fn same_boxes(a: &[ScoredProposal], b: &[ScoredProposal]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.index == y.index && x.bbox == y.bbox)
}
