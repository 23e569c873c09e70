use anyhow::{bail, Context, Result};
use ldpnn_core::linalg::Matrix;
use serde::Serialize;
use serde_json::{json, Value};
use std::io::Write;
use std::path::Path;

pub const SCHEMA: &str = "ldpnn/1";

/// A matrix given inline (a number or a JSON nested array) or as a `.json` / `.csv` file.
pub fn read_matrix(arg: &str) -> Result<Matrix<f64>> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
        let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        return if is_csv { parse_csv_matrix(&text) } else { parse_inline(&text) };
    }
    parse_inline(arg)
}

fn parse_inline(text: &str) -> Result<Matrix<f64>> {
    let t = text.trim();
    if let Ok(v) = t.parse::<f64>() {
        return Ok(Matrix::from_fn(1, 1, |_, _| v));
    }
    let value: Value = serde_json::from_str(t).with_context(|| format!("not a number, matrix, or file: {t:?}"))?;
    let rows: Vec<Vec<f64>> = match value {
        Value::Number(n) => vec![vec![n.as_f64().unwrap_or(f64::NAN)]],
        Value::Array(ref a) if a.iter().all(Value::is_number) => {
            vec![serde_json::from_value(value.clone())?]
        }
        other => serde_json::from_value(other).context("matrix must be a row-major nested array")?,
    };
    Ok(Matrix::from_rows(&rows)?)
}

fn parse_csv_matrix(text: &str) -> Result<Matrix<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let row = rec.iter().map(parse_f64).collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("empty matrix file");
    }
    Ok(Matrix::from_rows(&rows)?)
}

pub fn parse_f64(s: &str) -> Result<f64> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        t => t.parse().with_context(|| format!("not a number: {s:?}")),
    }
}

/// `a:b:step`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!("grid must be a:b:step, got {s:?}");
    }
    let (a, b, step) = (parse_f64(parts[0])?, parse_f64(parts[1])?, parse_f64(parts[2])?);
    Ok(ldpnn_core::simulator::grid(a, b, step)?)
}

/// Shortest round-trip decimal; infinities as `inf` / `-inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x}")
    }
}

/// A JSON document stamped with the schema version; `extra` fields are merged in.
pub fn document(body: impl Serialize, extra: Value) -> Result<Value> {
    let mut v = serde_json::to_value(body)?;
    let obj = v.as_object_mut().context("output must be a JSON object")?;
    obj.insert("schema".into(), json!(SCHEMA));
    if let Value::Object(e) = extra {
        obj.extend(e);
    }
    Ok(v)
}

/// JSON cannot hold infinities: finite values as numbers, others as `null` next to a flag.
pub fn number(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

pub fn emit_json(v: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
            Ok(())
        }
    }
}

/// CSV with a leading `# ldpnn/1` line.
pub fn write_csv(path: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = format!("# {SCHEMA}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    match path {
        Some(p) => std::fs::write(p, buf).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().lock().write_all(&buf)?;
            Ok(())
        }
    }
}
