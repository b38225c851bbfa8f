//! Pseudo ground truth for contextual objects: nouns of the expression are
//! matched against region category names by embedding cosine similarity.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{EmbeddingTable, ExpressionRecord, GroundTruthRegion};

pub const DEFAULT_GAMMA: f64 = 0.4;

/// Similarity returned when a word is missing from the table or a vector has
/// zero norm. It never passes a threshold in `(-1, 1]`.
pub const NO_MATCH: f64 = -1.0;

/// Function words dropped by the untagged noun heuristic. Everything else that
/// is not purely numeric counts as a noun; verbs such as "holding" are kept.
pub const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "his", "her", "its", "their", "my", "your", "our", "he", "she",
    "it", "they", "him", "them", "who", "whom", "which", "what", "whose", "where", "when", "and", "or", "but", "nor",
    "so", "of", "in", "on", "at", "to", "from", "by", "with", "without", "for", "into", "onto", "over", "under",
    "above", "below", "behind", "beside", "besides", "between", "near", "next", "around", "across", "along", "up",
    "down", "out", "off", "through", "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had",
    "do", "does", "did", "not", "no", "very", "just", "only", "also", "than", "then", "there", "here", "as", "one",
    "ones", "left", "right", "front", "back", "middle", "center", "top", "bottom", "far", "closest", "first", "second",
    "third", "last", "other", "another", "some", "any", "all", "both", "each",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoGtSet {
    pub expression_id: String,
    pub region_ids: BTreeSet<String>,
    /// The annotated referent is always part of the foreground.
    pub referent_included: bool,
}

fn is_function_word(tok: &str) -> bool {
    FUNCTION_WORDS.contains(&tok)
}

fn is_numeric(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',')
}

/// Tokens tagged NOUN or PROPN; without tags, every token outside
/// [`FUNCTION_WORDS`] that is not a number. Order and duplicates are kept.
pub fn extract_nouns<S: AsRef<str>>(tokens: &[S], pos_tags: Option<&[S]>) -> Vec<String> {
    match pos_tags {
        Some(tags) => tokens
            .iter()
            .zip(tags)
            .filter(|(_, tag)| {
                let t = tag.as_ref();
                t.eq_ignore_ascii_case("NOUN") || t.eq_ignore_ascii_case("PROPN")
            })
            .map(|(tok, _)| tok.as_ref().to_string())
            .collect(),
        None => tokens
            .iter()
            .map(AsRef::as_ref)
            .filter(|t| !is_function_word(t) && !is_numeric(t))
            .map(str::to_string)
            .collect(),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return NO_MATCH;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean of the word vectors of a (possibly multi-word) category name.
pub fn category_vector(category_name: &str, table: &EmbeddingTable) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; table.dimension()];
    let mut n = 0usize;
    for word in category_name.split_whitespace() {
        let v = table.get(&word.to_lowercase())?;
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        n += 1;
    }
    if n == 0 {
        return None;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Some(acc)
}

pub fn category_similarity(noun: &str, category_name: &str, table: &EmbeddingTable) -> f64 {
    let Some(nv) = table.get(noun) else {
        return NO_MATCH;
    };
    match category_vector(category_name, table) {
        Some(cv) => cosine(nv, &cv),
        None => NO_MATCH,
    }
}

/// Keeps the regions of the expression's image whose category is at least
/// `gamma`-similar to some noun of the expression.
pub fn generate_pseudo_gt(
    expr: &ExpressionRecord,
    regions: &[GroundTruthRegion],
    table: &EmbeddingTable,
    gamma: f64,
) -> PseudoGtSet {
    let nouns = extract_nouns(&expr.tokens, expr.pos_tags.as_deref());
    let mut cache: HashMap<&str, f64> = HashMap::new();
    let mut region_ids = BTreeSet::new();
    for region in regions.iter().filter(|r| r.image_id == expr.image_id) {
        let best = *cache.entry(region.category_name.as_str()).or_insert_with(|| {
            nouns
                .iter()
                .map(|n| category_similarity(n, &region.category_name, table))
                .fold(NO_MATCH, f64::max)
        });
        if !nouns.is_empty() && best >= gamma {
            region_ids.insert(region.region_id.clone());
        }
    }
    PseudoGtSet {
        expression_id: expr.expression_id.clone(),
        region_ids,
        referent_included: true,
    }
}

/// Groups regions by image id, keeping file order within each image.
pub fn regions_by_image(regions: &[GroundTruthRegion]) -> HashMap<&str, Vec<GroundTruthRegion>> {
    let mut map: HashMap<&str, Vec<GroundTruthRegion>> = HashMap::new();
    for r in regions {
        map.entry(r.image_id.as_str()).or_default().push(r.clone());
    }
    map
}

/// One output line: `expression_id<TAB>id1,id2,...`.
pub fn format_pseudo_gt_line(set: &PseudoGtSet) -> String {
    let ids: Vec<&str> = set.region_ids.iter().map(String::as_str).collect();
    format!("{}\t{}", set.expression_id, ids.join(","))
}

/// Pseudo ground truth for every expression, in input order. Regions are
/// looked up per image.
pub fn generate_all(
    exprs: &[ExpressionRecord],
    regions: &[GroundTruthRegion],
    table: &EmbeddingTable,
    gamma: f64,
) -> Vec<PseudoGtSet> {
    let by_image = regions_by_image(regions);
    exprs
        .iter()
        .map(|e| {
            let rs = by_image.get(e.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            generate_pseudo_gt(e, rs, table, gamma)
        })
        .collect()
}

pub fn format_pseudo_gt(sets: &[PseudoGtSet]) -> String {
    sets.iter().map(|s| format_pseudo_gt_line(s) + "\n").collect()
}

/// Inverse of [`format_pseudo_gt`]. Blank lines and `#` comments are skipped.
pub fn parse_pseudo_gt(text: &str) -> Result<Vec<PseudoGtSet>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, ids) = line.split_once('\t').unwrap_or((line, ""));
        if id.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "missing expression id".into(),
            });
        }
        out.push(PseudoGtSet {
            expression_id: id.to_string(),
            region_ids: ids.split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
            referent_included: true,
        });
    }
    Ok(out)
}

pub fn load_pseudo_gt(path: impl AsRef<Path>) -> Result<Vec<PseudoGtSet>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pseudo_gt(&text)
}

pub fn write_pseudo_gt(path: impl AsRef<Path>, sets: &[PseudoGtSet]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_pseudo_gt(sets)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::ingest::Split;
    use proptest::prelude::*;

    #[test]
    fn file_round_trip() {
        let sets = vec![
            PseudoGtSet {
                expression_id: "e1".into(),
                region_ids: ["r2", "r1"].map(String::from).into(),
                referent_included: true,
            },
            PseudoGtSet {
                expression_id: "e2".into(),
                region_ids: BTreeSet::new(),
                referent_included: true,
            },
        ];
        let text = format_pseudo_gt(&sets);
        assert_eq!(text, "e1\tr1,r2\ne2\t\n");
        assert_eq!(parse_pseudo_gt(&text).unwrap(), sets);
        assert!(parse_pseudo_gt("\tr1\n").is_err());
    }

    fn table(entries: &[(&str, Vec<f64>)]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(entries[0].1.len());
        for (w, v) in entries {
            t.insert(*w, v.clone()).unwrap();
        }
        t
    }

    fn region(id: &str, cat: &str) -> GroundTruthRegion {
        GroundTruthRegion {
            region_id: id.into(),
            image_id: "img".into(),
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            category_name: cat.into(),
        }
    }

    fn expr(tokens: &[&str], tags: Option<&[&str]>) -> ExpressionRecord {
        ExpressionRecord {
            expression_id: "e".into(),
            image_id: "img".into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            pos_tags: tags.map(|t| t.iter().map(|s| s.to_string()).collect()),
            referent: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            split: Split::Train,
        }
    }

    #[test]
    fn nouns_from_tags() {
        let toks = ["the", "cat", "on", "a", "towel"];
        let tags = ["DET", "NOUN", "ADP", "DET", "NOUN"];
        assert_eq!(extract_nouns(&toks, Some(&tags)), vec!["cat", "towel"]);
        assert!(extract_nouns(&["red", "one"], Some(&["ADJ", "NUM"])).is_empty());
        assert_eq!(
            extract_nouns(&["john", "s", "dog"], Some(&["PROPN", "PART", "NOUN"])),
            vec!["john", "dog"]
        );
    }

    #[test]
    fn heuristic_nouns() {
        // "holding" is not in FUNCTION_WORDS, so the heuristic keeps it.
        assert_eq!(
            extract_nouns::<&str>(&["man", "holding", "pizza"], None),
            vec!["man", "holding", "pizza"]
        );
        assert_eq!(
            extract_nouns::<&str>(&["the", "2", "dogs", "on", "left", "dogs"], None),
            vec!["dogs", "dogs"]
        );
    }

    #[test]
    fn similarity_examples() {
        let t = table(&[
            ("cat", vec![1.0, 0.0]),
            ("dog", vec![0.0, 1.0]),
            ("both", vec![1.0, 1.0]),
            ("zero", vec![0.0, 0.0]),
        ]);
        assert!((category_similarity("cat", "cat", &t) - 1.0).abs() < 1e-12);
        assert_eq!(category_similarity("cat", "dog", &t), 0.0);
        assert!((category_similarity("both", "cat dog", &t) - 1.0).abs() < 1e-12);
        assert_eq!(category_similarity("bird", "cat", &t), NO_MATCH);
        assert_eq!(category_similarity("cat", "cat bird", &t), NO_MATCH);
        assert_eq!(category_similarity("zero", "cat", &t), NO_MATCH);
    }

    #[test]
    fn pseudo_gt_examples() {
        let t = table(&[("cat", vec![1.0, 0.0]), ("towel", vec![0.0, 1.0])]);
        let regions = vec![region("r1", "cat"), region("r2", "towel")];

        let none = generate_pseudo_gt(&expr(&["the", "red"], Some(&["DET", "ADJ"])), &regions, &t, 0.4);
        assert!(none.region_ids.is_empty());
        assert!(none.referent_included);

        let got = generate_pseudo_gt(&expr(&["cat"], Some(&["NOUN"])), &regions, &t, 0.4);
        assert_eq!(got.region_ids, BTreeSet::from(["r1".to_string()]));
    }

    #[test]
    fn threshold_boundary_cases() {
        // cos(noun, a) = 0.39, cos(noun, b) = 0.41 for unit vectors built from the angle.
        let unit = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let t = table(&[("noun", vec![1.0, 0.0]), ("cata", unit(0.39)), ("catb", unit(0.41))]);
        let regions = vec![region("a", "cata"), region("b", "catb")];
        let got = generate_pseudo_gt(&expr(&["noun"], Some(&["NOUN"])), &regions, &t, 0.4);
        assert_eq!(got.region_ids, BTreeSet::from(["b".to_string()]));

        // similarity exactly at gamma is included
        let t = table(&[("noun", vec![1.0, 0.0]), ("cat", vec![0.5, 0.0])]);
        let got = generate_pseudo_gt(&expr(&["noun"], None), &[region("x", "cat")], &t, 1.0);
        assert_eq!(got.region_ids.len(), 1);
    }

    #[test]
    fn other_images_are_ignored() {
        let t = table(&[("cat", vec![1.0])]);
        let mut r = region("r", "cat");
        r.image_id = "elsewhere".into();
        let got = generate_pseudo_gt(&expr(&["cat"], None), &[r], &t, 0.4);
        assert!(got.region_ids.is_empty());
    }

    #[test]
    fn line_format() {
        let set = PseudoGtSet {
            expression_id: "e9".into(),
            region_ids: BTreeSet::from(["r2".to_string(), "r1".to_string()]),
            referent_included: true,
        };
        assert_eq!(format_pseudo_gt_line(&set), "e9\tr1,r2");
        let empty = PseudoGtSet {
            region_ids: BTreeSet::new(),
            ..set
        };
        assert_eq!(format_pseudo_gt_line(&empty), "e9\t");
    }

    const WORDS: [&str; 5] = ["w0", "w1", "w2", "w3", "w4"];

    fn arb_table() -> impl Strategy<Value = EmbeddingTable> {
        prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3), 5).prop_map(|vs| {
            let mut t = EmbeddingTable::new(3);
            for (w, v) in WORDS.iter().zip(vs) {
                t.insert(*w, v).unwrap();
            }
            t
        })
    }

    proptest! {
        #[test]
        fn monotone_in_gamma(t in arb_table(), nouns in prop::collection::vec(0usize..5, 1..4),
                             g1 in -1.0..1.0f64, g2 in -1.0..1.0f64) {
            let regions: Vec<_> = WORDS.iter().enumerate().map(|(i, w)| region(&format!("r{i}"), w)).collect();
            let toks: Vec<&str> = nouns.iter().map(|&i| WORDS[i]).collect();
            let e = expr(&toks, None);
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let loose = generate_pseudo_gt(&e, &regions, &t, lo);
            let strict = generate_pseudo_gt(&e, &regions, &t, hi);
            prop_assert!(strict.region_ids.is_subset(&loose.region_ids));
        }

        #[test]
        fn extra_noun_never_removes(t in arb_table(), nouns in prop::collection::vec(0usize..5, 1..4),
                                    extra in 0usize..5, g in -1.0..1.0f64) {
            let regions: Vec<_> = WORDS.iter().enumerate().map(|(i, w)| region(&format!("r{i}"), w)).collect();
            let toks: Vec<&str> = nouns.iter().map(|&i| WORDS[i]).collect();
            let mut more = toks.clone();
            more.push(WORDS[extra]);
            let base = generate_pseudo_gt(&expr(&toks, None), &regions, &t, g);
            let grown = generate_pseudo_gt(&expr(&more, None), &regions, &t, g);
            prop_assert!(base.region_ids.is_subset(&grown.region_ids));
        }

        #[test]
        fn region_order_irrelevant(t in arb_table(), nouns in prop::collection::vec(0usize..5, 1..4), g in -1.0..1.0f64) {
            let regions: Vec<_> = WORDS.iter().enumerate().map(|(i, w)| region(&format!("r{i}"), w)).collect();
            let mut rev = regions.clone();
            rev.reverse();
            let toks: Vec<&str> = nouns.iter().map(|&i| WORDS[i]).collect();
            let e = expr(&toks, None);
            prop_assert_eq!(generate_pseudo_gt(&e, &regions, &t, g), generate_pseudo_gt(&e, &rev, &t, g));
        }
    }
}
