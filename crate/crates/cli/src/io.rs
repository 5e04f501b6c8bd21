//! File formats of the command line: JSON documents carry a
//! `schema_version` field, CSV files carry it as their first column.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hetserve::costmodel::ProfileParams;
use hetserve::scenario::{scenario_cluster, scenario_model};
use hetserve::sim::StrategyTimeline;
use hetserve::workload::TypeModel;
use hetserve::{parse_trace, ClusterSpec, Deployment, ModelSpec, TraceRecord, WorkloadType};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn cluster(path: Option<&Path>) -> Result<ClusterSpec> {
    let c = match path {
        Some(p) => read_json(p)?,
        None => scenario_cluster(),
    };
    c.validate().context("cluster spec")?;
    Ok(c)
}

pub fn model(path: Option<&Path>) -> Result<ModelSpec> {
    let m = match path {
        Some(p) => read_json(p)?,
        None => scenario_model(),
    };
    m.validate().context("model spec")?;
    Ok(m)
}

pub fn profile(path: Option<&Path>) -> Result<ProfileParams> {
    match path {
        Some(p) => ProfileParams::from_json(&read_text(p)?)
            .with_context(|| format!("parsing {}", p.display())),
        None => Ok(ProfileParams::default()),
    }
}

pub fn trace(path: Option<&Path>) -> Result<Vec<TraceRecord>> {
    let Some(p) = path else {
        bail!("this command needs --trace");
    };
    let records =
        parse_trace(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?;
    if records.is_empty() {
        bail!("{} holds no records", p.display());
    }
    Ok(records)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TypesFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub model: TypeModel,
    /// Centroids rounded to whole tokens, as the scheduler sees them.
    pub types: Vec<WorkloadType>,
}

pub fn types(path: &Path) -> Result<TypeModel> {
    let f: TypesFile = read_json(path)?;
    if f.model.centroids.len() != f.model.k || f.model.k == 0 {
        bail!("{}: k does not match the centroid list", path.display());
    }
    Ok(f.model)
}

pub fn deployment(path: &Path, cluster: &ClusterSpec) -> Result<Deployment> {
    let d: Deployment = read_json(path)?;
    d.validate(cluster)
        .with_context(|| format!("deployment in {}", path.display()))?;
    Ok(d)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TimelineFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub timeline: StrategyTimeline,
}

pub fn timeline(path: &Path) -> Result<StrategyTimeline> {
    let f: TimelineFile = read_json(path)?;
    Ok(f.timeline)
}

/// Output directory with helpers that name every file they write.
pub struct OutDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        self.written.push(p.clone());
        p
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut body = serde_json::to_string_pretty(value)?;
        body.push('\n');
        self.text(name, &body)
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let p = self.path(name);
        let mut w =
            csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()
            .with_context(|| format!("writing {}", p.display()))
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}
