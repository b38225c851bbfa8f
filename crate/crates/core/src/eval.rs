//! Recall of referents and contextual objects under proposal budgets.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{hits, BBox, HIT_IOU};
use crate::ingest::{encode_tokens, ExpressionRecord, GroundTruthRegion, ImageDetections, Split, Vocabulary};
use crate::model::{score_boxes, ModelParameters, Relatedness, ScoredProposal};
use crate::nms::{per_class_nms, select_proposals, Criterion, NmsConfig, ProposalBudget};
use crate::pseudo_gt::PseudoGtSet;

pub const REPORT_HEADER: [&str; 9] = [
    "split",
    "method",
    "budget",
    "referent_recall",
    "referent_hits",
    "referent_total",
    "contextual_recall",
    "contextual_matched",
    "contextual_total",
];

/// True iff some proposal hits the referent (IoU > 0.5).
pub fn referent_hit(proposals: &[BBox], referent: &BBox) -> bool {
    proposals.iter().any(|p| hits(p, referent, HIT_IOU))
}

/// `(matched, total)`: a region is matched when any proposal hits it. One
/// proposal may match several regions.
pub fn contextual_recall(proposals: &[BBox], regions: &[BBox]) -> (usize, usize) {
    let matched = regions.iter().filter(|r| referent_hit(proposals, r)).count();
    (matched, regions.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// NMS and budget on detector confidence.
    BaselineConf,
    /// NMS and budget on the fused score.
    RefNms,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::BaselineConf => "baseline_conf",
            Method::RefNms => "ref_nms",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline_conf" | "baseline" => Ok(Method::BaselineConf),
            "ref_nms" | "refnms" => Ok(Method::RefNms),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected baseline_conf or ref_nms)"
            ))),
        }
    }
}

/// Percentage rounded for the report, e.g. 2/3 → "66.67". An empty
/// denominator reports 0.
pub fn format_percent(hits: usize, total: usize) -> String {
    format!("{:.2}", percent(hits, total))
}

pub fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallRow {
    pub split: String,
    pub method: Method,
    pub budget: String,
    pub referent_hits: usize,
    pub referent_total: usize,
    pub contextual_matched: usize,
    pub contextual_total: usize,
}

impl RecallRow {
    pub fn referent_recall(&self) -> f64 {
        percent(self.referent_hits, self.referent_total)
    }

    pub fn contextual_recall(&self) -> f64 {
        percent(self.contextual_matched, self.contextual_total)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecallReport {
    pub rows: Vec<RecallRow>,
}

impl RecallReport {
    pub fn find(&self, method: Method, budget: &str) -> Option<&RecallRow> {
        self.rows.iter().find(|r| r.method == method && r.budget == budget)
    }

    pub fn extend(&mut self, other: RecallReport) {
        self.rows.extend(other.rows);
    }
}

/// One expression prepared for evaluation.
#[derive(Clone, Debug)]
pub struct EvalExpression {
    pub expression_id: String,
    pub image: usize,
    /// Empty when no vocabulary was supplied (baseline only).
    pub tokens: Vec<usize>,
    pub referent: BBox,
    pub pseudo_regions: Vec<BBox>,
}

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub split: String,
    pub images: Vec<ImageDetections>,
    pub expressions: Vec<EvalExpression>,
}

impl EvalSet {
    /// Joins the expressions of `split` with detections and pseudo ground
    /// truth. Images without detections evaluate to empty proposal sets.
    pub fn build(
        split: Split,
        expressions: &[ExpressionRecord],
        images: &[ImageDetections],
        regions: &[GroundTruthRegion],
        pseudo: &[PseudoGtSet],
        vocab: Option<&Vocabulary>,
    ) -> Result<Self> {
        let region_box: HashMap<&str, BBox> = regions.iter().map(|r| (r.region_id.as_str(), r.bbox)).collect();
        let pseudo_by_expr: HashMap<&str, &PseudoGtSet> =
            pseudo.iter().map(|p| (p.expression_id.as_str(), p)).collect();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        let mut used: Vec<ImageDetections> = Vec::new();
        let by_id: HashMap<&str, &ImageDetections> = images.iter().map(|im| (im.image_id.as_str(), im)).collect();

        let mut out = Vec::new();
        for e in expressions.iter().filter(|e| e.split == split) {
            let image = *slot.entry(e.image_id.as_str()).or_insert_with(|| {
                used.push(
                    by_id
                        .get(e.image_id.as_str())
                        .map(|im| (*im).clone())
                        .unwrap_or(ImageDetections {
                            image_id: e.image_id.clone(),
                            records: Vec::new(),
                        }),
                );
                used.len() - 1
            });
            let mut pseudo_regions = Vec::new();
            if let Some(p) = pseudo_by_expr.get(e.expression_id.as_str()) {
                for id in &p.region_ids {
                    let b = region_box
                        .get(id.as_str())
                        .ok_or_else(|| Error::Schema(format!("pseudo ground truth names unknown region `{id}`")))?;
                    pseudo_regions.push(*b);
                }
            }
            let tokens = match vocab {
                Some(v) => encode_tokens(&e.tokens, v)?,
                None => Vec::new(),
            };
            out.push(EvalExpression {
                expression_id: e.expression_id.clone(),
                image,
                tokens,
                referent: e.referent,
                pseudo_regions,
            });
        }
        Ok(EvalSet {
            split: split.to_string(),
            images: used,
            expressions: out,
        })
    }
}

/// Per-expression result at one budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub referent_hit: bool,
    pub contextual_matched: usize,
    pub contextual_total: usize,
}

/// Settings shared by every method of one evaluation run.
#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub delta: f64,
    pub nms: NmsConfig,
}

/// NMS-kept proposals of one expression, sorted by the method's criterion.
pub fn kept_proposals(
    set: &EvalSet,
    expr: &EvalExpression,
    method: Method,
    params: Option<&ModelParameters>,
    cfg: &EvalConfig,
) -> Result<(Vec<ScoredProposal>, Criterion)> {
    let image = &set.images[expr.image];
    let (relatedness, criterion) = match method {
        Method::BaselineConf => (Relatedness::Constant(1.0), Criterion::Confidence),
        Method::RefNms => {
            let p = params.ok_or_else(|| Error::Config("ref_nms evaluation needs a checkpoint".into()))?;
            if expr.tokens.is_empty() {
                return Err(Error::Config(format!(
                    "expression {} has no encoded tokens; a vocabulary is required",
                    expr.expression_id
                )));
            }
            (Relatedness::Model(p), Criterion::Fused)
        }
    };
    let scored = score_boxes(image, &expr.tokens, relatedness, cfg.delta)?;
    let nms = NmsConfig { criterion, ..cfg.nms };
    Ok((per_class_nms(&scored, &nms), criterion))
}

/// `outcomes[b][e]`: outcome of expression `e` under `budgets[b]`.
pub fn expression_outcomes(
    set: &EvalSet,
    method: Method,
    budgets: &[ProposalBudget],
    params: Option<&ModelParameters>,
    cfg: &EvalConfig,
) -> Result<Vec<Vec<Outcome>>> {
    let mut out = vec![Vec::with_capacity(set.expressions.len()); budgets.len()];
    for expr in &set.expressions {
        let (kept, criterion) = kept_proposals(set, expr, method, params, cfg)?;
        for (b, budget) in budgets.iter().enumerate() {
            let boxes: Vec<BBox> = select_proposals(&kept, *budget, criterion)
                .iter()
                .map(|p| p.bbox)
                .collect();
            let (m, t) = contextual_recall(&boxes, &expr.pseudo_regions);
            out[b].push(Outcome {
                referent_hit: referent_hit(&boxes, &expr.referent),
                contextual_matched: m,
                contextual_total: t,
            });
        }
    }
    Ok(out)
}

/// Sums per-expression outcomes into one report row.
pub fn aggregate(split: &str, method: Method, budget: &str, outcomes: &[Outcome]) -> RecallRow {
    let mut row = RecallRow {
        split: split.to_string(),
        method,
        budget: budget.to_string(),
        referent_hits: 0,
        referent_total: outcomes.len(),
        contextual_matched: 0,
        contextual_total: 0,
    };
    for o in outcomes {
        row.referent_hits += o.referent_hit as usize;
        // expressions without pseudo regions add nothing to either count
        row.contextual_matched += o.contextual_matched;
        row.contextual_total += o.contextual_total;
    }
    row
}

/// One row per budget, in the given order.
pub fn recall_curve(
    set: &EvalSet,
    method: Method,
    budgets: &[ProposalBudget],
    params: Option<&ModelParameters>,
    cfg: &EvalConfig,
) -> Result<RecallReport> {
    if set.expressions.is_empty() {
        return Err(Error::Empty(format!("split {} has no expressions", set.split)));
    }
    let outcomes = expression_outcomes(set, method, budgets, params, cfg)?;
    Ok(RecallReport {
        rows: budgets
            .iter()
            .zip(&outcomes)
            .map(|(b, o)| aggregate(&set.split, method, &b.to_string(), o))
            .collect(),
    })
}

pub fn format_report(report: &RecallReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Schema(format!("csv: {e}"));
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.split.clone(),
            r.method.to_string(),
            r.budget.clone(),
            format_percent(r.referent_hits, r.referent_total),
            r.referent_hits.to_string(),
            r.referent_total.to_string(),
            format_percent(r.contextual_matched, r.contextual_total),
            r.contextual_matched.to_string(),
            r.contextual_total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Schema(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_report(report: &RecallReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_report(report)?).map_err(|e| Error::io(path, e))
}

/// Reads a report back. Percentages are recomputed from the counts and
/// checked against the stored text.
pub fn parse_report(text: &str) -> Result<RecallReport> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::Schema(format!("unexpected report header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let count = |k: usize| -> Result<usize> {
            rec[k].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad count `{}` in column {}", &rec[k], REPORT_HEADER[k]),
            })
        };
        let row = RecallRow {
            split: rec[0].to_string(),
            method: rec[1].parse()?,
            budget: rec[2].to_string(),
            referent_hits: count(4)?,
            referent_total: count(5)?,
            contextual_matched: count(7)?,
            contextual_total: count(8)?,
        };
        if rec[3] != format_percent(row.referent_hits, row.referent_total)
            || rec[6] != format_percent(row.contextual_matched, row.contextual_total)
        {
            return Err(Error::Parse {
                line,
                msg: "percentages disagree with counts".into(),
            });
        }
        rows.push(row);
    }
    Ok(RecallReport { rows })
}

pub fn load_report(path: impl AsRef<Path>) -> Result<RecallReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::DetectionRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn referent_hit_cases() {
        let r = b(0.0, 0.0, 10.0, 10.0);
        assert!(referent_hit(&[r], &r));
        assert!(!referent_hit(&[], &r));
        // 4/10 overlap on one axis → IoU 0.4
        let p = b(0.0, 0.0, 4.0, 10.0);
        assert!((crate::geometry::iou(&p, &r) - 0.4).abs() < 1e-12);
        assert!(!referent_hit(&[p], &r));
    }

    #[test]
    fn contextual_cases() {
        assert_eq!(contextual_recall(&[b(0.0, 0.0, 1.0, 1.0)], &[]), (0, 0));
        let regions = [b(0.0, 0.0, 10.0, 10.0), b(20.0, 0.0, 30.0, 10.0)];
        assert_eq!(contextual_recall(&regions, &regions), (2, 2));
        // two nearly identical regions, one proposal covering both
        let twins = [b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 10.0, 9.0)];
        assert_eq!(contextual_recall(&[b(0.0, 0.0, 10.0, 9.5)], &twins), (2, 2));
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(format_percent(2, 3), "66.67");
        assert_eq!(format_percent(1, 3), "33.33");
        assert_eq!(format_percent(0, 0), "0.00");
        assert_eq!(format_percent(5, 5), "100.00");
    }

    #[test]
    fn report_round_trip() {
        assert_eq!(
            format_report(&RecallReport::default()).unwrap(),
            REPORT_HEADER.join(",") + "\n"
        );
        let report = RecallReport {
            rows: vec![RecallRow {
                split: "testB".into(),
                method: Method::RefNms,
                budget: "real_case".into(),
                referent_hits: 2,
                referent_total: 3,
                contextual_matched: 0,
                contextual_total: 0,
            }],
        };
        let text = format_report(&report).unwrap();
        assert!(text.ends_with("testB,ref_nms,real_case,66.67,2,3,0.00,0,0\n"));
        assert_eq!(parse_report(&text).unwrap(), report);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_report(&report, &path).unwrap();
        assert_eq!(load_report(&path).unwrap(), report);
        assert!(write_report(&report, dir.path().join("missing/r.csv")).is_err());
        assert!(parse_report("a,b\n").is_err());
    }

    fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
        let x = rng.random_range(0.0..60.0);
        let y = rng.random_range(0.0..60.0);
        b(x, y, x + rng.random_range(5.0..30.0), y + rng.random_range(5.0..30.0))
    }

    /// Random images and expressions with up to two context regions each.
    fn random_fixture(seed: u64) -> (EvalSet, Vec<ProposalBudget>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut exprs = Vec::new();
        for i in 0..rng.random_range(1..6) {
            let n = rng.random_range(0..25);
            let records = (0..n)
                .map(|_| {
                    let x = rng.random_range(0.0..60.0);
                    let y = rng.random_range(0.0..60.0);
                    DetectionRecord {
                        bbox: b(x, y, x + rng.random_range(5.0..30.0), y + rng.random_range(5.0..30.0)),
                        category_id: rng.random_range(0..3),
                        category_name: "c".into(),
                        confidence: rng.random_range(0.0..1.0),
                        feature: vec![],
                    }
                })
                .collect();
            images.push(ImageDetections {
                image_id: format!("im{i}"),
                records,
            });
            for _ in 0..rng.random_range(1..4) {
                let referent = rand_box(&mut rng);
                let k = rng.random_range(0..3);
                let pseudo_regions = (0..k).map(|_| rand_box(&mut rng)).collect();
                exprs.push(EvalExpression {
                    expression_id: format!("e{}", exprs.len()),
                    image: i,
                    tokens: vec![],
                    referent,
                    pseudo_regions,
                });
            }
        }
        let set = EvalSet {
            split: "val".into(),
            images,
            expressions: exprs,
        };
        let budgets = [5, 10, 20, 50].map(ProposalBudget::TopN).to_vec();
        (set, budgets)
    }

    fn cfg() -> EvalConfig {
        EvalConfig {
            delta: 0.05,
            nms: NmsConfig::default(),
        }
    }

    #[test]
    fn aggregate_matches_brute_force_and_is_monotone() {
        for seed in 0..20 {
            let (set, budgets) = random_fixture(seed);
            let report = recall_curve(&set, Method::BaselineConf, &budgets, None, &cfg()).unwrap();
            let mut prev: Option<&RecallRow> = None;
            for (row, budget) in report.rows.iter().zip(&budgets) {
                // brute force: recompute every expression from scratch
                let (mut hits_n, mut ctx_m, mut ctx_t) = (0, 0, 0);
                for e in &set.expressions {
                    let image = &set.images[e.image];
                    let cands: Vec<&DetectionRecord> = image.records.iter().filter(|r| r.confidence >= 0.05).collect();
                    let items: Vec<(BBox, f64)> = cands.iter().map(|r| (r.bbox, r.confidence)).collect();
                    let mut kept: Vec<usize> = Vec::new();
                    for cat in 0..3 {
                        let idx: Vec<usize> = (0..items.len()).filter(|&i| cands[i].category_id == cat).collect();
                        let sub: Vec<(BBox, f64)> = idx.iter().map(|&i| items[i]).collect();
                        kept.extend(crate::nms::greedy_nms(&sub, 0.3).into_iter().map(|k| idx[k]));
                    }
                    kept.sort_by(|&a, &c| items[c].1.total_cmp(&items[a].1).then(a.cmp(&c)));
                    let ProposalBudget::TopN(n) = budget else {
                        unreachable!()
                    };
                    let boxes: Vec<BBox> = kept.iter().take(*n).map(|&i| items[i].0).collect();
                    if boxes.iter().any(|p| hits(p, &e.referent, HIT_IOU)) {
                        hits_n += 1;
                    }
                    for r in &e.pseudo_regions {
                        ctx_t += 1;
                        if boxes.iter().any(|p| hits(p, r, HIT_IOU)) {
                            ctx_m += 1;
                        }
                    }
                }
                assert_eq!(
                    (row.referent_hits, row.referent_total),
                    (hits_n, set.expressions.len()),
                    "seed {seed}"
                );
                assert_eq!(
                    (row.contextual_matched, row.contextual_total),
                    (ctx_m, ctx_t),
                    "seed {seed}"
                );
                if let Some(p) = prev {
                    assert!(row.referent_hits >= p.referent_hits && row.contextual_matched >= p.contextual_matched);
                }
                prev = Some(row);
            }
        }
    }

    #[test]
    fn referent_always_proposed_gives_full_recall() {
        let r = b(10.0, 10.0, 30.0, 30.0);
        let images = vec![ImageDetections {
            image_id: "im".into(),
            records: vec![DetectionRecord {
                bbox: r,
                category_id: 0,
                category_name: "c".into(),
                confidence: 0.99,
                feature: vec![],
            }],
        }];
        let set = EvalSet {
            split: "val".into(),
            images,
            expressions: vec![EvalExpression {
                expression_id: "e".into(),
                image: 0,
                tokens: vec![],
                referent: r,
                pseudo_regions: vec![r],
            }],
        };
        let budgets = parse_budgets_for_test();
        let report = recall_curve(&set, Method::BaselineConf, &budgets, None, &cfg()).unwrap();
        for row in &report.rows {
            assert_eq!(row.referent_recall(), 100.0);
            assert_eq!(row.contextual_recall(), 100.0);
        }
        let empty = EvalSet {
            expressions: vec![],
            ..set
        };
        assert!(matches!(
            recall_curve(&empty, Method::BaselineConf, &budgets, None, &cfg()),
            Err(Error::Empty(_))
        ));
    }

    fn parse_budgets_for_test() -> Vec<ProposalBudget> {
        crate::nms::parse_budgets("10,20,50,100,real_case").unwrap()
    }

    #[test]
    fn ref_nms_needs_parameters() {
        let (set, budgets) = random_fixture(1);
        assert!(recall_curve(&set, Method::RefNms, &budgets, None, &cfg()).is_err());
    }

    #[test]
    fn method_names() {
        for m in [Method::BaselineConf, Method::RefNms] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("x".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn row_recalls_stay_in_range(hits in 0usize..50, extra in 0usize..50, m in 0usize..50, e2 in 0usize..50) {
            let row = RecallRow {
                split: "s".into(),
                method: Method::BaselineConf,
                budget: "5".into(),
                referent_hits: hits,
                referent_total: hits + extra,
                contextual_matched: m,
                contextual_total: m + e2,
            };
            prop_assert!((0.0..=100.0).contains(&row.referent_recall()));
            prop_assert!((0.0..=100.0).contains(&row.contextual_recall()));
            let text = format_report(&RecallReport { rows: vec![row.clone()] }).unwrap();
            prop_assert_eq!(parse_report(&text).unwrap().rows, vec![row]);
        }
    }
}
