//! JSONL interchange: one file per entity class plus one for interactions.
//!
//! ```text
//! users.jsonl         {"id":0,"is_common":true,"profile_doc":["w012",...]}
//! categories.jsonl    {"id":0,"doc":[...]}
//! items.jsonl         {"id":0,"category":3,"doc":[...]}
//! dishes.jsonl        {"id":0,"doc":[...],"recipe":[{"category":3,"items":[0,5]}]}
//! interactions.jsonl  {"user":0,"target":"item:5","count":2,"domain":"A"}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{validate, DataError, Dataset};

pub const DATASET_FILES: [&str; 5] = [
    "users.jsonl",
    "categories.jsonl",
    "items.jsonl",
    "dishes.jsonl",
    "interactions.jsonl",
];

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Best-effort field name from a serde_json message (`missing field `x``).
fn field_of(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("record").to_string()
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            DataError::Parse {
                file: file.clone(),
                line: n + 1,
                field: field_of(&msg),
                msg,
            }
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(DATASET_FILES[0]), &ds.users)?;
    write_jsonl(&dir.join(DATASET_FILES[1]), &ds.categories)?;
    write_jsonl(&dir.join(DATASET_FILES[2]), &ds.items)?;
    write_jsonl(&dir.join(DATASET_FILES[3]), &ds.dishes)?;
    write_jsonl(&dir.join(DATASET_FILES[4]), &ds.interactions)?;
    Ok(())
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let ds = Dataset {
        users: read_jsonl(&dir.join(DATASET_FILES[0]))?,
        categories: read_jsonl(&dir.join(DATASET_FILES[1]))?,
        items: read_jsonl(&dir.join(DATASET_FILES[2]))?,
        dishes: read_jsonl(&dir.join(DATASET_FILES[3]))?,
        interactions: read_jsonl(&dir.join(DATASET_FILES[4]))?,
    };
    if ds.interactions.is_empty() {
        return Err(DataError::NoInteractions);
    }
    for (n, it) in ds.interactions.iter().enumerate() {
        if it.count == 0 {
            return Err(DataError::Parse {
                file: DATASET_FILES[4].into(),
                line: n + 1,
                field: "count".into(),
                msg: "count must be >= 1".into(),
            });
        }
    }
    let report = validate(&ds);
    if !report.is_valid() {
        return Err(DataError::Invalid(report));
    }
    Ok(ds)
}
