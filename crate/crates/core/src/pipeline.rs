//! Stage functions over a run directory named by the config hash.
//!
//! ```text
//! run-<hash>/
//!   config.json
//!   cohort/        manifest.jsonl, sessions/*.csv, cohort_config.json
//!   features/      fvtc.mmvq, sessions.json, warnings.json
//!   mrl/           checkpoint.mmvq, history.json
//!   embed/         sessions.mmvq, codes.json
//!   downstream/<mode>/  checkpoint.mmvq, history.json, predictions.csv, predictions_val.csv
//!   eval/          <mode>.json, <mode>.txt, comparison.{json,txt}
//!   error_analysis/ leave_subject_out.{json,txt}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mmvq_autodiff::{Container, EntryData, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_synthetic, split_subjects, Manifest, Split, SymptomClass};
use crate::downstream::{
    prediction_rows, read_predictions, stack_session, train_downstream, write_predictions, DownstreamCheckpoint,
    LabelledSession, PredictionRow, SessionMatrix, TaskMode,
};
use crate::error::{Error, Result};
use crate::features::{session_features, FeatureCache};
use crate::metrics::{comparison_table, leave_subject_out, CohortStats, ComparisonRow, EvalReport, LeaveSubjectOut};
use crate::mrl::{train_mrl, MrlCheckpoint, MrlDataset, SegmentPair, TrainOutcome};
use crate::util::{read_to_string, write_atomic, write_json_atomic};

/// Per-session metadata recorded at feature extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub subject_id: String,
    pub split: Split,
    pub class: SymptomClass,
    pub bprs_total: u32,
    pub segments: usize,
}

#[derive(Serialize, Deserialize)]
struct EmbedMeta {
    mrl_hash: String,
    t_max: usize,
    dim: usize,
    sessions: Vec<String>,
}

/// Session matrices produced by the embed stage.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub mrl_hash: String,
    pub matrices: BTreeMap<String, SessionMatrix>,
}

#[derive(Clone, Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub force: bool,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "{} is missing; run `{stage}` first",
            path.display()
        )))
    }
}

impl Run {
    /// Opens (creating if needed) `out/run-<hash>` and records the config.
    pub fn open(out: &Path, config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let dir = out.join(config.run_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let run = Self { dir, config, force };
        let cfg_path = run.path("config.json");
        if cfg_path.exists() {
            let stored: RunConfig = read_json(&cfg_path)?;
            if stored != run.config {
                return Err(Error::HashMismatch {
                    expected: run.config.hash(),
                    found: stored.hash(),
                });
            }
        } else {
            write_json_atomic(&cfg_path, &run.config)?;
        }
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn guard(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() && !self.force {
            return Err(Error::validation(format!(
                "{} exists; pass --force to overwrite",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn synth_data(&self) -> Result<Manifest> {
        self.guard("cohort/manifest.jsonl")?;
        let d = &self.config.data;
        let dir = self.path("cohort");
        let m = generate_synthetic(&d.cohort, &d.subtypes, self.config.seed, &dir)?;
        write_json_atomic(&dir.join("cohort_config.json"), &d.cohort)?;
        log::info!("wrote {} sessions to {}", m.records.len(), dir.display());
        Ok(m)
    }

    /// Segments and featurizes every manifest session, assigns subject
    /// splits, and records per-session labels.
    pub fn extract_features(&self, manifest: Option<&Path>) -> Result<Vec<SessionInfo>> {
        let cache_path = self.guard("features/fvtc.mmvq")?;
        let default = self.path("cohort/manifest.jsonl");
        let mpath = manifest.unwrap_or(&default);
        require(mpath, "synth-data")?;
        let m = Manifest::read(mpath)?;
        let labels = m.labels(&self.config.data.subtypes)?;
        let split = split_subjects(&m.records, &self.config.data.split, self.config.seed)?;
        let f = &self.config.mrl.features;
        let results: Vec<_> = m
            .records
            .par_iter()
            .map(|r| {
                let (a, v) = m.load_series(r, f.audio_rate_hz, f.video_rate_hz)?;
                session_features(&a, &v, f)
            })
            .collect::<Result<_>>()?;
        let mut cache = FeatureCache::default();
        let mut warnings = BTreeMap::new();
        let mut infos = Vec::with_capacity(m.records.len());
        for (r, (segs, warn)) in m.records.iter().zip(results) {
            if !warn.is_empty() {
                warnings.insert(r.session_id.clone(), warn);
            }
            let label = &labels[&r.session_id];
            infos.push(SessionInfo {
                session_id: r.session_id.clone(),
                subject_id: r.subject_id.clone(),
                split: split
                    .split_of(&r.subject_id)
                    .ok_or_else(|| Error::validation(format!("subject {} has no split", r.subject_id)))?,
                class: label.class,
                bprs_total: label.bprs_total,
                segments: segs.len(),
            });
            cache.sessions.insert(r.session_id.clone(), segs);
        }
        infos.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        cache.save(&cache_path)?;
        write_json_atomic(&self.path("features/sessions.json"), &infos)?;
        write_json_atomic(&self.path("features/warnings.json"), &warnings)?;
        log::info!(
            "{} sessions, {} segments, longest {} segments",
            infos.len(),
            cache.segment_total(),
            cache.max_segments()
        );
        Ok(infos)
    }

    pub fn sessions(&self) -> Result<Vec<SessionInfo>> {
        let p = self.path("features/sessions.json");
        require(&p, "extract-features")?;
        read_json(&p)
    }

    fn cache(&self) -> Result<FeatureCache> {
        let p = self.path("features/fvtc.mmvq");
        require(&p, "extract-features")?;
        FeatureCache::load(&p)
    }

    pub fn train_mrl(&self) -> Result<TrainOutcome> {
        let ckpt_path = self.guard("mrl/checkpoint.mmvq")?;
        let cache = self.cache()?;
        let mut data = MrlDataset::default();
        for s in self.sessions()? {
            let dst = match s.split {
                Split::Train => &mut data.train,
                Split::Val => &mut data.val,
                Split::Test => &mut data.test,
            };
            for g in cache.sessions.get(&s.session_id).into_iter().flatten() {
                dst.push(SegmentPair {
                    audio: g.audio.clone(),
                    video: g.video.clone(),
                });
            }
        }
        let out = train_mrl(&data, &self.config.mrl, self.config.seed)?;
        out.checkpoint.save(&ckpt_path)?;
        write_json_atomic(&self.path("mrl/history.json"), &out.history)?;
        Ok(out)
    }

    pub fn mrl_checkpoint(&self) -> Result<MrlCheckpoint> {
        let p = self.path("mrl/checkpoint.mmvq");
        require(&p, "train-mrl")?;
        MrlCheckpoint::load(&p, Some(&self.config.mrl.hash()))
    }

    /// Quantized embeddings of every segment, stacked per session.
    pub fn embed(&self) -> Result<Embeddings> {
        let path = self.guard("embed/sessions.mmvq")?;
        let ckpt = self.mrl_checkpoint()?;
        let cache = self.cache()?;
        let t_max = self.config.downstream.t_max.unwrap_or(cache.max_segments());
        let infos = self.sessions()?;
        let mut matrices = BTreeMap::new();
        let mut codes = BTreeMap::new();
        for s in &infos {
            let segs = cache
                .sessions
                .get(&s.session_id)
                .ok_or_else(|| Error::validation(format!("session {} missing from the FVTC cache", s.session_id)))?;
            let a: Vec<&Tensor<f32>> = segs.iter().map(|g| &g.audio).collect();
            let v: Vec<&Tensor<f32>> = segs.iter().map(|g| &g.video).collect();
            let (idx, zq) = ckpt.embed_many(&a, &v)?;
            let l = zq.shape()[1];
            let rows: Vec<Vec<f32>> = zq.data().chunks(l).map(<[f32]>::to_vec).collect();
            matrices.insert(
                s.session_id.clone(),
                stack_session(&rows, t_max, &s.session_id, &s.subject_id)?,
            );
            codes.insert(s.session_id.clone(), idx);
        }
        let emb = Embeddings {
            mrl_hash: ckpt.config_hash.clone(),
            matrices,
        };
        save_embeddings(&emb, &path)?;
        write_json_atomic(&self.path("embed/codes.json"), &codes)?;
        Ok(emb)
    }

    pub fn embeddings(&self) -> Result<Embeddings> {
        let p = self.path("embed/sessions.mmvq");
        require(&p, "embed")?;
        load_embeddings(&p)
    }

    fn labelled(&self) -> Result<BTreeMap<Split, Vec<LabelledSession>>> {
        let emb = self.embeddings()?;
        if emb.mrl_hash != self.config.mrl.hash() {
            return Err(Error::HashMismatch {
                expected: self.config.mrl.hash(),
                found: emb.mrl_hash,
            });
        }
        let mut out: BTreeMap<Split, Vec<LabelledSession>> = BTreeMap::new();
        for s in self.sessions()? {
            let matrix = emb
                .matrices
                .get(&s.session_id)
                .ok_or_else(|| Error::validation(format!("session {} has no embedding", s.session_id)))?
                .clone();
            out.entry(s.split).or_default().push(LabelledSession {
                matrix,
                class: s.class,
                bprs_total: s.bprs_total as f64,
            });
        }
        Ok(out)
    }

    /// Trains one mode and writes its checkpoint and split predictions.
    pub fn train_downstream(&self, mode: TaskMode) -> Result<(DownstreamCheckpoint, Vec<PredictionRow>)> {
        let base = format!("downstream/{}", mode.as_str());
        let ckpt_path = self.guard(&format!("{base}/checkpoint.mmvq"))?;
        let splits = self.labelled()?;
        let get = |s| splits.get(&s).map(Vec::as_slice).unwrap_or(&[]);
        let ckpt = train_downstream(
            get(Split::Train),
            get(Split::Val),
            &self.config.downstream,
            mode,
            &self.config.mrl.hash(),
            self.config.seed,
        )?;
        ckpt.save(&ckpt_path)?;
        write_json_atomic(&self.path(&format!("{base}/history.json")), &ckpt.history)?;
        let test = prediction_rows(&ckpt, get(Split::Test))?;
        write_predictions(&self.path(&format!("{base}/predictions.csv")), &test)?;
        let val = prediction_rows(&ckpt, get(Split::Val))?;
        write_predictions(&self.path(&format!("{base}/predictions_val.csv")), &val)?;
        Ok((ckpt, test))
    }

    /// Evaluates one predictions file, or every trained mode when neither
    /// `mode` nor `predictions` is given. Writes a comparison table when
    /// all three modes are available.
    pub fn evaluate(&self, mode: Option<TaskMode>, predictions: Option<&Path>) -> Result<BTreeMap<String, EvalReport>> {
        let mut inputs: Vec<(String, Option<TaskMode>, PathBuf)> = Vec::new();
        if let Some(p) = predictions {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("predictions")
                .to_string();
            inputs.push((name, mode, p.to_path_buf()));
        } else {
            let modes: Vec<TaskMode> = mode.map_or(TaskMode::ALL.to_vec(), |m| vec![m]);
            for m in modes {
                let p = self.path(&format!("downstream/{}/predictions.csv", m.as_str()));
                if p.exists() {
                    inputs.push((m.as_str().to_string(), Some(m), p));
                } else if mode.is_some() {
                    require(&p, "train-downstream")?;
                }
            }
            if inputs.is_empty() {
                return Err(Error::validation("no predictions found; run `train-downstream` first"));
            }
        }
        let mut reports = BTreeMap::new();
        let mut rows = Vec::new();
        for (name, m, p) in inputs {
            let json = self.guard(&format!("eval/{name}.json"))?;
            let r = EvalReport::from_predictions(&read_predictions(&p)?)?;
            write_json_atomic(&json, &r)?;
            write_atomic(&self.path(&format!("eval/{name}.txt")), r.to_table().as_bytes())?;
            if let Some(m) = m {
                rows.push((m, ComparisonRow::from_report(m, &r)));
            }
            reports.insert(name, r);
        }
        if rows.len() == TaskMode::ALL.len() {
            rows.sort_by_key(|(m, _)| TaskMode::ALL.iter().position(|x| x == m));
            let rows: Vec<ComparisonRow> = rows.into_iter().map(|(_, r)| r).collect();
            write_json_atomic(&self.path("eval/comparison.json"), &rows)?;
            write_atomic(&self.path("eval/comparison.txt"), comparison_table(&rows).as_bytes())?;
        }
        Ok(reports)
    }

    /// Severity statistics over every session in the corpus, if extracted.
    pub fn cohort_stats(&self) -> Result<Option<CohortStats>> {
        if !self.path("features/sessions.json").exists() {
            return Ok(None);
        }
        let totals: Vec<f64> = self.sessions()?.iter().map(|s| s.bprs_total as f64).collect();
        CohortStats::from_totals(&totals).map(Some)
    }

    pub fn error_analysis(&self, predictions: Option<&Path>, replacement: Option<&Path>) -> Result<LeaveSubjectOut> {
        let json = self.guard("error_analysis/leave_subject_out.json")?;
        let default = self.path("downstream/mtl/predictions.csv");
        let p = predictions.unwrap_or(&default);
        require(p, "train-downstream --mode mtl")?;
        let rows = read_predictions(p)?;
        let rep = replacement.map(read_predictions).transpose()?;
        let out = leave_subject_out(&rows, rep.as_deref(), self.cohort_stats()?)?;
        write_json_atomic(&json, &out)?;
        write_atomic(
            &self.path("error_analysis/leave_subject_out.txt"),
            out.to_table().as_bytes(),
        )?;
        Ok(out)
    }
}

pub fn save_embeddings(emb: &Embeddings, path: &Path) -> Result<()> {
    let first = emb
        .matrices
        .values()
        .next()
        .ok_or_else(|| Error::validation("no sessions to save"))?;
    let meta = EmbedMeta {
        mrl_hash: emb.mrl_hash.clone(),
        t_max: first.t_max(),
        dim: first.dim(),
        sessions: emb.matrices.keys().cloned().collect(),
    };
    let mut c = Container::new();
    c.insert("meta", EntryData::Bytes(serde_json::to_vec(&meta)?));
    for (sid, m) in &emb.matrices {
        c.insert_tensor(format!("{sid}/values"), m.values.clone());
        c.insert_tensor(format!("{sid}/mask"), Tensor::new(&[m.mask.len()], m.mask.clone())?);
        c.insert(
            format!("{sid}/subject"),
            EntryData::Bytes(m.subject_id.as_bytes().to_vec()),
        );
    }
    write_atomic(path, &c.to_bytes()?)
}

pub fn load_embeddings(path: &Path) -> Result<Embeddings> {
    let c = Container::read(path)?;
    let meta: EmbedMeta = serde_json::from_slice(c.bytes("meta")?)?;
    let mut matrices = BTreeMap::new();
    for sid in meta.sessions {
        let values = c.tensor::<f32>(&format!("{sid}/values"))?.clone();
        if values.shape() != [meta.t_max, meta.dim] {
            return Err(Error::validation(format!(
                "session {sid} matrix has shape {:?}",
                values.shape()
            )));
        }
        let mask = c.tensor::<f32>(&format!("{sid}/mask"))?.data().to_vec();
        let subject_id = String::from_utf8(c.bytes(&format!("{sid}/subject"))?.to_vec())
            .map_err(|_| Error::validation(format!("session {sid}: subject id is not UTF-8")))?;
        matrices.insert(
            sid.clone(),
            SessionMatrix {
                values,
                mask,
                session_id: sid,
                subject_id,
            },
        );
    }
    Ok(Embeddings {
        mrl_hash: meta.mrl_hash,
        matrices,
    })
}

/// Outputs of [`run_full`].
#[derive(Clone, Debug)]
pub struct FullRun {
    pub run: Run,
    pub mrl: TrainOutcome,
    pub reports: BTreeMap<String, EvalReport>,
    pub error_analysis: LeaveSubjectOut,
}

/// Every stage in order on a synthetic cohort.
pub fn run_full(out: &Path, config: RunConfig, force: bool) -> Result<FullRun> {
    let run = Run::open(out, config, force)?;
    run.synth_data()?;
    run.extract_features(None)?;
    let mrl = run.train_mrl()?;
    run.embed()?;
    for m in TaskMode::ALL {
        run.train_downstream(m)?;
    }
    let reports = run.evaluate(None, None)?;
    let error_analysis = run.error_analysis(None, None)?;
    Ok(FullRun {
        run,
        mrl,
        reports,
        error_analysis,
    })
}
