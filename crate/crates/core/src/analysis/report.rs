//! CSV renderings of analysis results. JSON output is the canonical JSON of
//! the result types themselves.

use super::{CategoryDistribution, CorpusCategories, CostReport, DistanceMatrix, HallucinationSummary, ScanDiff};

fn write_rows(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// `group,category,count,proportion`, one row per group and category.
pub fn distributions_csv(groups: &[(String, CategoryDistribution)]) -> String {
    let mut rows = Vec::new();
    for (g, d) in groups {
        for ((c, n), p) in d.categories.iter().zip(&d.counts).zip(&d.proportions) {
            rows.push(vec![g.clone(), c.clone(), n.to_string(), fmt(*p)]);
        }
    }
    write_rows(&["group", "category", "count", "proportion"], rows)
}

/// `a,b,distance` for every ordered pair with a before b.
pub fn distances_csv(m: &DistanceMatrix) -> String {
    let mut rows = Vec::new();
    for i in 0..m.names.len() {
        for j in i + 1..m.names.len() {
            rows.push(vec![m.names[i].clone(), m.names[j].clone(), fmt(m.distances[i][j])]);
        }
    }
    write_rows(&["a", "b", "distance"], rows)
}

/// `cluster,size,terms,category` with terms joined by `|`.
pub fn clusters_csv(corpus: &CorpusCategories) -> String {
    let rows = corpus
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let terms: Vec<&str> = c.terms.iter().map(|t| t.term.as_str()).collect();
            vec![i.to_string(), c.members.len().to_string(), terms.join("|"), c.category.clone()]
        })
        .collect();
    write_rows(&["cluster", "size", "terms", "category"], rows)
}

/// `kind,concern_a,concern_b,similarity`; kind is `similar`, `unique_a` or `unique_b`.
pub fn diff_csv(d: &ScanDiff) -> String {
    let mut rows: Vec<Vec<String>> = d
        .similar_pairs
        .iter()
        .map(|p| vec!["similar".into(), p.a.clone(), p.b.clone(), fmt(p.similarity)])
        .collect();
    rows.extend(d.unique_a.iter().map(|a| vec!["unique_a".into(), a.clone(), String::new(), String::new()]));
    rows.extend(d.unique_b.iter().map(|b| vec!["unique_b".into(), String::new(), b.clone(), String::new()]));
    write_rows(&["kind", "concern_a", "concern_b", "similarity"], rows)
}

/// One row with every cost field; an absent throughput is an empty cell.
pub fn cost_csv(r: &CostReport) -> String {
    write_rows(
        &[
            "images",
            "mean_tokens",
            "std_tokens",
            "mean_prompt_tokens",
            "mean_completion_tokens",
            "mean_requests",
            "mean_latency_s",
            "std_latency_s",
            "cost_per_image_usd",
            "parallelism",
            "images_per_minute",
        ],
        vec![vec![
            r.images.to_string(),
            fmt(r.mean_tokens),
            fmt(r.std_tokens),
            fmt(r.mean_prompt_tokens),
            fmt(r.mean_completion_tokens),
            fmt(r.mean_requests),
            fmt(r.mean_latency),
            fmt(r.std_latency),
            fmt(r.cost_per_image),
            r.parallelism.to_string(),
            r.images_per_minute.map(fmt).unwrap_or_default(),
        ]],
    )
}

/// `flagged,total,rate,percent`.
pub fn hallucination_csv(s: &HallucinationSummary) -> String {
    write_rows(
        &["flagged", "total", "rate", "percent"],
        vec![vec![
            s.flagged.to_string(),
            s.total.to_string(),
            s.rate.map(fmt).unwrap_or_default(),
            s.percent().unwrap_or_default(),
        ]],
    )
}
