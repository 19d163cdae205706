//! Stage runners over a run directory.
//!
//! ```text
//! <out>/config.resolved.json   <out>/data/            <out>/vq.ckpt   <out>/lamp.ckpt
//! <out>/t2m.ckpt               <out>/m2t.ckpt         <out>/*_report.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{self, LampModel};
use crate::captioner::{self, CaptionReport, CaptionerModel};
use crate::config::RunConfig;
use crate::corpus::{self, Dataset};
use crate::generator::{self, T2MModel};
use crate::metrics::{self, EvalModels, EvalReport};
use crate::retrieval::{self, RetrievalReport};
use crate::vq::{self, MotionTokenizer};
use crate::{seed, Error, Result};

pub const DATA_DIR: &str = "data";
pub const VQ_CKPT: &str = "vq.ckpt";
pub const LAMP_CKPT: &str = "lamp.ckpt";
pub const T2M_CKPT: &str = "t2m.ckpt";
pub const M2T_CKPT: &str = "m2t.ckpt";
pub const EVAL_REPORT: &str = "eval_report.json";

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// The path of an artifact that a later stage depends on.
    pub fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::CheckpointMissing(p))
        }
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        corpus::load_dataset(&self.require(DATA_DIR)?)
    }

    pub fn tokenizer(&self) -> Result<MotionTokenizer> {
        MotionTokenizer::load(&self.require(VQ_CKPT)?)
    }

    pub fn lamp(&self) -> Result<LampModel> {
        LampModel::load(&self.require(LAMP_CKPT)?)
    }

    pub fn t2m(&self) -> Result<T2MModel> {
        T2MModel::load(&self.require(T2M_CKPT)?)
    }

    pub fn captioner(&self) -> Result<CaptionerModel> {
        CaptionerModel::load(&self.require(M2T_CKPT)?)
    }

    /// SHA-256 of every file under the run directory, keyed by relative path.
    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let p = entry.map_err(|e| Error::io(&dir, e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                    let rel = p.strip_prefix(&self.root).unwrap_or(&p).to_string_lossy().into_owned();
                    out.insert(rel, seed::sha256_hex(&bytes));
                }
            }
        }
        Ok(out)
    }
}

pub fn make_synthetic(config: &RunConfig, run: &RunDir) -> Result<Dataset> {
    let ds = corpus::synth_generate(&config.synth).map_err(|e| e.in_stage("make-synthetic"))?;
    ds.write(&run.path(DATA_DIR))?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqStageReport {
    pub train: vq::TrainReport,
    pub test_relative_error: Option<f64>,
}

pub fn train_vq(config: &RunConfig, run: &RunDir) -> Result<VqStageReport> {
    let ds = run.dataset()?;
    let (tok, train) = vq::train_vq(&ds.split("train"), &config.vq).map_err(|e| e.in_stage("train-vq"))?;
    tok.save(&run.path(VQ_CKPT))?;
    let test = ds.split("test");
    let test_relative_error =
        if test.is_empty() { None } else { Some(vq::relative_reconstruction_error(&tok, &test)?) };
    let report = VqStageReport { train, test_relative_error };
    run.write_json("vq_report.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LampStageReport {
    pub train: alignment::LampTrainReport,
    pub test_retrieval: Option<RetrievalReport>,
}

pub fn train_lamp(config: &RunConfig, run: &RunDir) -> Result<LampStageReport> {
    let ds = run.dataset()?;
    let tok = run.tokenizer()?;
    let (lamp, train) = alignment::train_lamp(&ds.split("train"), &tok, &config.lamp).map_err(|e| e.in_stage("train-lamp"))?;
    lamp.save(&run.path(LAMP_CKPT))?;
    let test = ds.split("test");
    let test_retrieval =
        if test.is_empty() { None } else { Some(retrieval::evaluate_retrieval(&test, &lamp, &tok)?) };
    let report = LampStageReport { train, test_retrieval };
    run.write_json("lamp_report.json", &report)?;
    Ok(report)
}

pub fn train_t2m(config: &RunConfig, run: &RunDir) -> Result<generator::T2MTrainReport> {
    let ds = run.dataset()?;
    let (tok, lamp) = (run.tokenizer()?, run.lamp()?);
    let (t2m, report) = generator::train_t2m(&ds.split("train"), &tok, &lamp, &config.t2m).map_err(|e| e.in_stage("train-t2m"))?;
    t2m.save(&run.path(T2M_CKPT))?;
    run.write_json("t2m_report.json", &report)?;
    Ok(report)
}

pub fn train_m2t(config: &RunConfig, run: &RunDir) -> Result<captioner::M2TTrainReport> {
    let ds = run.dataset()?;
    let (tok, lamp) = (run.tokenizer()?, run.lamp()?);
    let (m2t, report) = captioner::train_m2t(&ds.split("train"), &tok, &lamp, &config.m2t).map_err(|e| e.in_stage("train-m2t"))?;
    m2t.save(&run.path(M2T_CKPT))?;
    run.write_json("m2t_report.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub generation: EvalReport,
    pub retrieval: RetrievalReport,
    pub captioning: Option<CaptionReport>,
}

/// Evaluates on the test split (or everything when no split is tagged). The captioner is
/// optional: its metrics are included when `m2t.ckpt` exists.
pub fn evaluate(config: &RunConfig, run: &RunDir) -> Result<FullReport> {
    let ds = run.dataset()?;
    let test = match ds.split("test") {
        t if t.is_empty() => ds,
        t => t,
    };
    let (tok, lamp, t2m) = (run.tokenizer()?, run.lamp()?, run.t2m()?);
    let m2t = if run.path(M2T_CKPT).exists() { Some(run.captioner()?) } else { None };
    let models = EvalModels { tokenizer: &tok, lamp: &lamp, t2m: &t2m, captioner: m2t.as_ref(), conditioner: None };
    let generation = metrics::evaluate_generation(&test, &models, &config.eval).map_err(|e| e.in_stage("evaluate"))?;
    let retrieval = retrieval::evaluate_retrieval(&test, &lamp, &tok)?;
    let captioning = match &m2t {
        Some(c) => {
            let captions = captioner::caption_many(test.motions(), &tok, &lamp, c)?;
            Some(captioner::evaluate_captions(&test, &captions, &lamp, config.eval.seed)?)
        }
        None => None,
    };
    let report = FullReport { generation, retrieval, captioning };
    run.write_json(EVAL_REPORT, &report)?;
    Ok(report)
}

/// make-synthetic → train-vq → train-lamp → train-t2m → train-m2t → evaluate.
pub fn run_all(config: &RunConfig, run: &RunDir) -> Result<FullReport> {
    config.write_resolved(run.root())?;
    make_synthetic(config, run)?;
    train_vq(config, run)?;
    train_lamp(config, run)?;
    train_t2m(config, run)?;
    train_m2t(config, run)?;
    evaluate(config, run)
}
