//! JSONL records to tidy CSV and back. Nested keys are joined with dots and
//! array positions become numeric key segments, so `{"x":[1.0,2.0]}` turns
//! into columns `x.0` and `x.1`. Strings are written raw and every other
//! scalar as JSON text, which keeps floats bit-exact. Empty arrays, empty
//! objects and empty strings do not survive the trip.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
#[cfg(test)]
use std::io::Read;

use serde_json::Value;
#[cfg(test)]
use serde_json::Map;

fn flatten_into(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => m.iter().for_each(|(k, v)| flatten_into(&key(k), v, out)),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| flatten_into(&key(&i.to_string()), v, out)),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

pub fn flatten(v: &Value) -> Vec<(String, String)> {
    let mut out = Vec::new();
    flatten_into("", v, &mut out);
    out
}

#[cfg(test)]
fn decode_cell(cell: &str) -> Value {
    match serde_json::from_str::<Value>(cell) {
        Ok(v @ (Value::Number(_) | Value::Bool(_) | Value::Null)) => v,
        _ => Value::String(cell.to_string()),
    }
}

#[cfg(test)]
enum Node {
    Leaf(Value),
    Branch(BTreeMap<String, Node>),
}

#[cfg(test)]
fn insert(node: &mut BTreeMap<String, Node>, path: &[&str], v: Value) {
    if path.len() == 1 {
        node.insert(path[0].to_string(), Node::Leaf(v));
        return;
    }
    let child = node.entry(path[0].to_string()).or_insert_with(|| Node::Branch(BTreeMap::new()));
    if let Node::Branch(m) = child {
        insert(m, &path[1..], v);
    }
}

#[cfg(test)]
fn build(node: BTreeMap<String, Node>) -> Value {
    let as_index: Option<Vec<usize>> = node.keys().map(|k| k.parse().ok()).collect();
    let is_array = matches!(&as_index, Some(ix) if { let mut s = ix.clone(); s.sort_unstable(); s.iter().enumerate().all(|(i, k)| i == *k) });
    let convert = |n: Node| match n {
        Node::Leaf(v) => v,
        Node::Branch(m) => build(m),
    };
    if is_array {
        let mut items: Vec<(usize, Value)> = node.into_iter().map(|(k, n)| (k.parse().expect("checked"), convert(n))).collect();
        items.sort_by_key(|(i, _)| *i);
        Value::Array(items.into_iter().map(|(_, v)| v).collect())
    } else {
        Value::Object(node.into_iter().map(|(k, n)| (k, convert(n))).collect::<Map<_, _>>())
    }
}

#[cfg(test)]
pub fn unflatten(cells: &[(String, String)]) -> Value {
    let mut root = BTreeMap::new();
    for (k, cell) in cells {
        if !cell.is_empty() {
            insert(&mut root, &k.split('.').collect::<Vec<_>>(), decode_cell(cell));
        }
    }
    build(root)
}

/// Writes every JSONL record as one CSV row; the header is the union of keys
/// in first-seen order.
pub fn jsonl_to_csv<R: BufRead, W: Write>(input: R, out: W) -> anyhow::Result<usize> {
    let mut rows = Vec::new();
    let mut header: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let flat = flatten(&serde_json::from_str(&line)?);
        for (k, _) in &flat {
            if seen.insert(k.clone()) {
                header.push(k.clone());
            }
        }
        rows.push(flat.into_iter().collect::<BTreeMap<_, _>>());
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header)?;
    for r in &rows {
        w.write_record(header.iter().map(|k| r.get(k).map_or("", String::as_str)))?;
    }
    w.flush()?;
    Ok(rows.len())
}

#[cfg(test)]
pub fn csv_to_jsonl<R: Read, W: Write>(input: R, mut out: W) -> anyhow::Result<usize> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        let cells: Vec<(String, String)> = header.iter().cloned().zip(rec.iter().map(String::from)).collect();
        serde_json::to_writer(&mut out, &unflatten(&cells))?;
        out.write_all(b"\n")?;
        n += 1;
    }
    Ok(n)
}
