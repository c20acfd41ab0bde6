//! Text formats for every artifact. Records are tab-separated, one per
//! line, floats in 9 significant digits. Parse errors carry the 1-based
//! line number.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{
    format_sig9, Document, FeatureVector, GroundTruth, LabeledDataset, Query, RankedEntry, RankedList, Run,
    SelectionEntry, SelectionRecord,
};
use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split('\t').collect()))
}

fn expect_fields(fields: &[&str], n: usize, file: &str, line: usize) -> Result<()> {
    if fields.len() != n {
        return Err(Error::schema(
            file,
            line,
            format!("expected {n} tab-separated fields, found {}", fields.len()),
        ));
    }
    if fields.iter().any(|f| f.is_empty()) {
        return Err(Error::schema(file, line, "empty field"));
    }
    Ok(())
}

fn parse_f64(s: &str, what: &str, file: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::schema(file, line, format!("bad {what} `{s}`")))?;
    if !v.is_finite() {
        return Err(Error::schema(file, line, format!("non-finite {what}")));
    }
    Ok(v)
}

// ---- vectors (corpus, queries, latent) ----

pub fn write_vectors<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut s = String::new();
    for (id, v) in rows {
        s.push_str(id);
        s.push('\t');
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&format_sig9(*x));
        }
        s.push('\n');
    }
    s
}

/// `id \t v1,...,vF`. Every row must have `dim` values when given,
/// otherwise the length of the first row.
pub fn parse_vectors(text: &str, file: &str, dim: Option<usize>) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut dim = dim;
    for (line, fields) in records(text) {
        expect_fields(&fields, 2, file, line)?;
        let values = fields[1]
            .split(',')
            .map(|v| parse_f64(v.trim(), "vector component", file, line))
            .collect::<Result<Vec<_>>>()?;
        match dim {
            Some(d) if d != values.len() => {
                return Err(Error::schema(
                    file,
                    line,
                    format!("expected {d} components, found {}", values.len()),
                ))
            }
            None => dim = Some(values.len()),
            _ => {}
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::schema(file, line, format!("duplicate id `{}`", fields[0])));
        }
        out.push((fields[0].to_string(), values));
    }
    Ok(out)
}

pub fn write_corpus(docs: &[Document]) -> String {
    write_vectors(docs.iter().map(|d| (d.doc_id.as_str(), d.features.as_slice())))
}

pub fn write_queries(queries: &[Query]) -> String {
    write_vectors(queries.iter().map(|q| (q.query_id.as_str(), q.features.as_slice())))
}

pub fn parse_corpus(text: &str, file: &str, dim: Option<usize>) -> Result<Vec<Document>> {
    parse_vectors(text, file, dim)?
        .into_iter()
        .map(|(doc_id, v)| {
            Ok(Document {
                doc_id,
                features: FeatureVector::new(v)?,
            })
        })
        .collect()
}

pub fn parse_queries(text: &str, file: &str, dim: Option<usize>) -> Result<Vec<Query>> {
    parse_vectors(text, file, dim)?
        .into_iter()
        .map(|(query_id, v)| {
            Ok(Query {
                query_id,
                features: FeatureVector::new(v)?,
            })
        })
        .collect()
}

// ---- qrels ----

/// `query_id \t 0 \t doc_id \t 1` for every relevant pair.
pub fn write_qrels(relevant: &BTreeMap<String, BTreeSet<String>>) -> String {
    let mut s = String::new();
    for (qid, docs) in relevant {
        for d in docs {
            let _ = writeln!(s, "{qid}\t0\t{d}\t1");
        }
    }
    s
}

/// Lines with `rel = 0` are accepted and carry no information. Queries that
/// only appear with `rel = 0` are kept with an empty set.
pub fn parse_qrels(text: &str, file: &str) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (line, fields) in records(text) {
        expect_fields(&fields, 4, file, line)?;
        if fields[1] != "0" {
            return Err(Error::schema(file, line, "second field must be 0"));
        }
        let entry = out.entry(fields[0].to_string()).or_default();
        match fields[3] {
            "1" => {
                if !entry.insert(fields[2].to_string()) {
                    return Err(Error::schema(file, line, "duplicate qrels pair"));
                }
            }
            "0" => {}
            other => return Err(Error::schema(file, line, format!("relevance `{other}` not in {{0,1}}"))),
        }
    }
    Ok(out)
}

pub fn parse_truth(text: &str, file: &str) -> Result<GroundTruth> {
    Ok(GroundTruth::new(parse_qrels(text, file)?))
}

pub fn parse_labels(text: &str, file: &str) -> Result<LabeledDataset> {
    let mut map = parse_qrels(text, file)?;
    map.retain(|_, v| !v.is_empty());
    Ok(LabeledDataset::new(map))
}

// ---- runs ----

pub fn write_run(run: &Run, tag: &str) -> String {
    let mut s = String::new();
    for (qid, list) in run {
        for e in list.entries() {
            let _ = writeln!(s, "{qid}\tQ0\t{}\t{}\t{}\t{tag}", e.doc_id, e.rank, format_sig9(e.score));
        }
    }
    s
}

/// Lines of one query must be contiguous and in rank order.
pub fn parse_run(text: &str, file: &str) -> Result<Run> {
    let mut run = Run::new();
    let mut current: Option<(String, usize, Vec<RankedEntry>)> = None;
    let finish = |run: &mut Run, (qid, first_line, entries): (String, usize, Vec<RankedEntry>)| -> Result<()> {
        if run.contains_key(&qid) {
            return Err(Error::schema(file, first_line, format!("query `{qid}` is not contiguous")));
        }
        let list = RankedList::from_entries(qid.clone(), entries)
            .map_err(|e| Error::schema(file, first_line, e.to_string()))?;
        run.insert(qid, list);
        Ok(())
    };
    for (line, fields) in records(text) {
        expect_fields(&fields, 6, file, line)?;
        if fields[1] != "Q0" {
            return Err(Error::schema(file, line, "second field must be Q0"));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| Error::schema(file, line, format!("bad rank `{}`", fields[3])))?;
        let score = parse_f64(fields[4], "score", file, line)?;
        let qid = fields[0];
        if current.as_ref().is_some_and(|(q, _, _)| q != qid) {
            finish(&mut run, current.take().expect("checked"))?;
        }
        let (_, _, entries) = current.get_or_insert_with(|| (qid.to_string(), line, Vec::new()));
        if rank != entries.len() + 1 {
            return Err(Error::schema(
                file,
                line,
                format!("rank {rank} where {} was expected", entries.len() + 1),
            ));
        }
        if let Some(prev) = entries.last() {
            if score > prev.score || (score == prev.score && fields[2] <= prev.doc_id.as_str()) {
                return Err(Error::schema(file, line, "entry out of score order"));
            }
        }
        entries.push(RankedEntry {
            doc_id: fields[2].to_string(),
            score,
            rank,
        });
    }
    if let Some(c) = current {
        finish(&mut run, c)?;
    }
    Ok(run)
}

// ---- selection ----

pub fn write_selection(selection: &SelectionRecord) -> String {
    let mut s = String::new();
    for (qid, docs) in selection.as_map() {
        for (d, e) in docs {
            let _ = writeln!(s, "{qid}\t{d}\t{}\t{}", u8::from(e.selected), format_sig9(e.p_sel));
        }
    }
    s
}

pub fn parse_selection(text: &str, file: &str) -> Result<SelectionRecord> {
    let mut map: BTreeMap<String, BTreeMap<String, SelectionEntry>> = BTreeMap::new();
    for (line, fields) in records(text) {
        expect_fields(&fields, 4, file, line)?;
        let selected = match fields[2] {
            "1" => true,
            "0" => false,
            other => return Err(Error::schema(file, line, format!("selection flag `{other}` not in {{0,1}}"))),
        };
        let p_sel = parse_f64(fields[3], "p_sel", file, line)?;
        if !(0.0..=1.0).contains(&p_sel) {
            return Err(Error::schema(file, line, format!("p_sel {p_sel} outside [0, 1]")));
        }
        let prev = map
            .entry(fields[0].to_string())
            .or_default()
            .insert(fields[1].to_string(), SelectionEntry { selected, p_sel });
        if prev.is_some() {
            return Err(Error::schema(file, line, "duplicate selection pair"));
        }
    }
    Ok(SelectionRecord::new(map))
}

/// Reads a file and parses it, tagging errors with the file's path.
pub fn load<T>(path: &Path, parse: impl FnOnce(&str, &str) -> Result<T>) -> Result<T> {
    let text = read_text(path)?;
    parse(&text, &file_name(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_round_trip() {
        let docs = vec![
            Document {
                doc_id: "d1".into(),
                features: FeatureVector::new(vec![0.5, -1.25e-7, 3.0]).unwrap(),
            },
            Document {
                doc_id: "d2".into(),
                features: FeatureVector::new(vec![1.0, 2.0, 123456789.0]).unwrap(),
            },
        ];
        let text = write_corpus(&docs);
        assert_eq!(text, "d1\t0.5,-1.25e-7,3\nd2\t1,2,123456789\n");
        assert_eq!(parse_corpus(&text, "c", Some(3)).unwrap(), docs);
    }

    #[test]
    fn vector_schema_errors_name_the_line() {
        let err = parse_vectors("a\t1,2\nb\t1,x\n", "c.tsv", None).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }), "{err}");
        let err = parse_vectors("a\t1,2\n\nb\t1\n", "c.tsv", None).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 3, .. }), "{err}");
        let err = parse_vectors("a 1,2\n", "c.tsv", None).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }));
        let err = parse_vectors("a\t1\na\t2\n", "c.tsv", None).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }));
    }

    #[test]
    fn qrels_round_trip() {
        let map = BTreeMap::from([
            ("q1".to_string(), BTreeSet::from(["d1".to_string(), "d3".to_string()])),
            ("q2".to_string(), BTreeSet::from(["d2".to_string()])),
        ]);
        let text = write_qrels(&map);
        assert_eq!(text, "q1\t0\td1\t1\nq1\t0\td3\t1\nq2\t0\td2\t1\n");
        assert_eq!(parse_qrels(&text, "q").unwrap(), map);
        let with_zero = format!("{text}q3\t0\td9\t0\n");
        assert_eq!(parse_labels(&with_zero, "q").unwrap().as_map(), &map);
        let err = parse_qrels("q1\t0\td1\t2\n", "q").unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }));
    }

    #[test]
    fn run_round_trip() {
        let mut run = Run::new();
        run.insert(
            "q1".into(),
            RankedList::from_scores("q1", [("a", 0.25), ("b", 1.5), ("c", 0.25)]).unwrap(),
        );
        run.insert("q2".into(), RankedList::from_scores("q2", [("z", -3.0)]).unwrap());
        let text = write_run(&run, "strong");
        assert_eq!(
            text,
            "q1\tQ0\tb\t1\t1.5\tstrong\nq1\tQ0\ta\t2\t0.25\tstrong\nq1\tQ0\tc\t3\t0.25\tstrong\nq2\tQ0\tz\t1\t-3\tstrong\n"
        );
        assert_eq!(parse_run(&text, "r").unwrap(), run);
    }

    #[test]
    fn run_schema_errors() {
        let bad_rank = "q\tQ0\ta\t1\t2\tt\nq\tQ0\tb\t3\t1\tt\n";
        assert!(matches!(parse_run(bad_rank, "r"), Err(Error::Schema { line: 2, .. })));
        let bad_order = "q\tQ0\ta\t1\t1\tt\nq\tQ0\tb\t2\t2\tt\n";
        assert!(matches!(parse_run(bad_order, "r"), Err(Error::Schema { line: 2, .. })));
        let split = "q\tQ0\ta\t1\t1\tt\np\tQ0\tb\t1\t1\tt\nq\tQ0\tc\t1\t1\tt\n";
        assert!(matches!(parse_run(split, "r"), Err(Error::Schema { line: 3, .. })));
        assert!(matches!(parse_run("q\tQ1\ta\t1\t1\tt\n", "r"), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn selection_round_trip() {
        let rec = SelectionRecord::new(BTreeMap::from([(
            "q".to_string(),
            BTreeMap::from([
                ("a".to_string(), SelectionEntry { selected: true, p_sel: 0.75 }),
                ("b".to_string(), SelectionEntry { selected: false, p_sel: 0.125 }),
            ]),
        )]));
        let text = write_selection(&rec);
        assert_eq!(text, "q\ta\t1\t0.75\nq\tb\t0\t0.125\n");
        assert_eq!(parse_selection(&text, "s").unwrap(), rec);
        assert!(matches!(parse_selection("q\ta\t1\t1.5\n", "s"), Err(Error::Schema { line: 1, .. })));
    }
}
