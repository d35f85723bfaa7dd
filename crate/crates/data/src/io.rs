//! On-disk layout of a dataset directory.
//!
//! | file               | one JSON object per line                         |
//! |--------------------|--------------------------------------------------|
//! | `manifest.json`    | config, seed, counts, split boundaries           |
//! | `items.jsonl`      | [`ItemRecord`]                                   |
//! | `requests.jsonl`   | [`Request`] with its behavior snapshot           |
//! | `train.jsonl`      | [`Sample`]; behavior looked up by `request_id`   |
//! | `test.jsonl`       | [`Sample`]                                       |
//! | `queries.jsonl`    | [`QueryItemPair`]                                |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::GenConfig;
use crate::error::{DataError, Result};
use crate::types::{Dataset, ItemRecord, QueryItemPair, Request, Sample};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub items: usize,
    pub users: usize,
    pub requests: usize,
    pub train: usize,
    pub test: usize,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: GenConfig,
    pub counts: Counts,
    pub window_start: u64,
    pub test_start: u64,
    pub days: u32,
}

impl Manifest {
    pub fn of(dataset: &Dataset) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            seed: dataset.seed,
            config: dataset.config.clone(),
            counts: Counts {
                items: dataset.items.len(),
                users: dataset.config.num_users,
                requests: dataset.requests.len(),
                train: dataset.train.len(),
                test: dataset.test.len(),
                queries: dataset.queries.len(),
            },
            window_start: dataset.window_start(),
            test_start: dataset.test_start(),
            days: dataset.config.days,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&Manifest::of(dataset)).expect("manifest serializes");
    std::fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))?;
    write_lines(&dir.join("items.jsonl"), &dataset.items)?;
    write_lines(&dir.join("requests.jsonl"), &dataset.requests)?;
    write_lines(&dir.join("train.jsonl"), &dataset.train)?;
    write_lines(&dir.join("test.jsonl"), &dataset.test)?;
    write_lines(&dir.join("queries.jsonl"), &dataset.queries)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| DataError::Parse {
        path: path.display().to_string(),
        line: 0,
        source,
    })
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::Invalid(format!(
            "dataset format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let items: Vec<ItemRecord> = read_lines(&dir.join("items.jsonl"))?;
    let requests: Vec<Request> = read_lines(&dir.join("requests.jsonl"))?;
    let train: Vec<Sample> = read_lines(&dir.join("train.jsonl"))?;
    let test: Vec<Sample> = read_lines(&dir.join("test.jsonl"))?;
    let queries: Vec<QueryItemPair> = read_lines(&dir.join("queries.jsonl"))?;
    let c = &manifest.counts;
    if (items.len(), requests.len(), train.len(), test.len(), queries.len())
        != (c.items, c.requests, c.train, c.test, c.queries)
    {
        return Err(DataError::Invalid(format!("{}: record counts disagree with manifest", dir.display())));
    }
    if requests.iter().enumerate().any(|(i, r)| r.request_id != i as u64) {
        return Err(DataError::Invalid("requests must be stored in id order".into()));
    }
    for s in train.iter().chain(&test) {
        if s.request_id as usize >= requests.len() {
            return Err(DataError::Invalid(format!("sample refers to unknown request {}", s.request_id)));
        }
        if s.target_item_id as usize >= items.len() {
            return Err(DataError::UnknownItem(s.target_item_id));
        }
    }
    Ok(Dataset { config: manifest.config, seed: manifest.seed, items, requests, train, test, queries })
}
