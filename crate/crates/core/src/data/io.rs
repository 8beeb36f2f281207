//! Line-oriented dataset files.
//!
//! - STS pairs: `sentence_a<TAB>sentence_b<TAB>score`, `#` comments skipped.
//! - NLI: `premise<TAB>hypothesis<TAB>label`.
//! - Unlabeled: one sentence per line.
//!
//! CRLF and LF line endings are both accepted; writers emit LF.

use super::{DataError, NliExample, NliLabel, SentencePairExample};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, body: String) -> Result<(), DataError> {
    std::fs::write(path, body).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Non-empty, non-comment lines with 1-based line numbers.
fn records(text: &str, comments: bool) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(move |(_, l)| !l.trim().is_empty() && !(comments && l.starts_with('#')))
}

fn three_fields(line: &str) -> Result<[&str; 3], String> {
    let fields: Vec<&str> = line.split('\t').collect();
    <[&str; 3]>::try_from(fields).map_err(|f| format!("expected 3 tab-separated fields, found {}", f.len()))
}

fn collect<T>(path: &Path, parsed: Vec<Result<T, LineError>>) -> Result<Vec<T>, DataError> {
    let mut ok = Vec::with_capacity(parsed.len());
    let mut errors = Vec::new();
    for r in parsed {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(ok)
    } else {
        Err(DataError::Parse { path: path.to_path_buf(), errors })
    }
}

pub fn parse_sts(text: &str, origin: &Path) -> Result<Vec<SentencePairExample>, DataError> {
    let parsed = records(text, true)
        .map(|(line, l)| {
            let err = |message: String| LineError { line, message };
            let [a, b, score] = three_fields(l).map_err(err)?;
            let gold: f32 = score.trim().parse().map_err(|_| err(format!("score {score:?} is not a number")))?;
            if !(0.0..=5.0).contains(&gold) {
                return Err(err(format!("score {gold} outside [0, 5]")));
            }
            Ok(SentencePairExample { sentence_a: a.to_string(), sentence_b: b.to_string(), gold })
        })
        .collect();
    collect(origin, parsed)
}

pub fn parse_nli(text: &str, origin: &Path) -> Result<Vec<NliExample>, DataError> {
    let parsed = records(text, true)
        .map(|(line, l)| {
            let err = |message: String| LineError { line, message };
            let [p, h, label] = three_fields(l).map_err(err)?;
            let label: NliLabel = label.parse().map_err(|e: DataError| err(e.to_string()))?;
            Ok(NliExample { premise: p.to_string(), hypothesis: h.to_string(), label })
        })
        .collect();
    collect(origin, parsed)
}

pub fn parse_unlabeled(text: &str) -> Vec<String> {
    records(text, false).map(|(_, l)| l.to_string()).collect()
}

pub fn load_sts_tsv(path: &Path) -> Result<Vec<SentencePairExample>, DataError> {
    parse_sts(&read(path)?, path)
}

pub fn load_nli_tsv(path: &Path) -> Result<Vec<NliExample>, DataError> {
    parse_nli(&read(path)?, path)
}

pub fn load_unlabeled(path: &Path) -> Result<Vec<String>, DataError> {
    Ok(parse_unlabeled(&read(path)?))
}

pub fn write_sts_tsv(path: &Path, examples: &[SentencePairExample]) -> Result<(), DataError> {
    let body: String = examples.iter().map(|e| format!("{}\t{}\t{}\n", e.sentence_a, e.sentence_b, e.gold)).collect();
    write(path, body)
}

pub fn write_nli_tsv(path: &Path, examples: &[NliExample]) -> Result<(), DataError> {
    let body: String = examples.iter().map(|e| format!("{}\t{}\t{}\n", e.premise, e.hypothesis, e.label)).collect();
    write(path, body)
}

pub fn write_unlabeled(path: &Path, texts: &[String]) -> Result<(), DataError> {
    let body: String = texts.iter().map(|t| format!("{t}\n")).collect();
    write(path, body)
}

#[cfg(test)]
mod tests {
    use super::*;

    const STS: &str = "# comment\na cat sits\ta cat sat\t4.2\r\nthe dog\tthe sky\t0\nx\ty\t2.5\n";

    #[test]
    fn parses_valid_sts_fixture_with_crlf() {
        let ex = parse_sts(STS, Path::new("fixture")).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].sentence_b, "a cat sat");
        assert_eq!(ex[0].gold, 4.2);
        assert_eq!(ex[1].gold, 0.0);
    }

    #[test]
    fn rejects_out_of_range_score_with_line_number() {
        let err = parse_sts("a\tb\t1.0\nc\td\t7.0\n", Path::new("f")).unwrap_err();
        match err {
            DataError::Parse { errors, .. } => {
                assert_eq!(errors.len(), 1);
                assert_eq!(errors[0].line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collects_every_malformed_line() {
        let err = parse_nli("p\th\tentailment\np\th\tmaybe\nonly two\tfields\n", Path::new("f")).unwrap_err();
        let DataError::Parse { errors, .. } = err else { panic!() };
        assert_eq!(errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_sts_tsv(Path::new("/nonexistent/sts.tsv")), Err(DataError::Io { .. })));
    }

    #[test]
    fn write_of_parse_reproduces_canonical_files() {
        let dir = tempfile::tempdir().unwrap();
        let canonical_sts = "a cat sits\ta cat sat\t4.2\nthe dog\tthe sky\t0\nx\ty\t2.5\n";
        let p = dir.path().join("sts.tsv");
        write_sts_tsv(&p, &parse_sts(canonical_sts, &p).unwrap()).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), canonical_sts);

        let canonical_nli = "p one\th one\tentailment\np two\th two\tcontradiction\n";
        let p = dir.path().join("nli.tsv");
        write_nli_tsv(&p, &parse_nli(canonical_nli, &p).unwrap()).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), canonical_nli);

        let canonical_unl = "first line\nsecond line\n";
        let p = dir.path().join("u.txt");
        write_unlabeled(&p, &parse_unlabeled(canonical_unl)).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), canonical_unl);
    }
}
