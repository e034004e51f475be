//! Cohort records: BPRS labels, the session manifest, subject-independent
//! splits and a synthetic cohort generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ChannelSeries, Modality, AUDIO_CHANNELS, VIDEO_CHANNELS};
use crate::util::{module_rng, read_to_string, write_atomic};

pub const BPRS_ITEMS: [&str; 18] = [
    "somatic concern",
    "anxiety",
    "emotional withdrawal",
    "conceptual disorganization",
    "guilt feelings",
    "tension",
    "mannerisms and posturing",
    "grandiosity",
    "depressive mood",
    "hostility",
    "suspiciousness",
    "hallucinatory behavior",
    "motor retardation",
    "uncooperativeness",
    "unusual thought content",
    "blunted affect",
    "excitement",
    "disorientation",
];

pub const BPRS_MIN_TOTAL: u32 = 18;
pub const BPRS_MAX_TOTAL: u32 = 126;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SymptomClass {
    Hc,
    PSz,
    MSz,
}

impl SymptomClass {
    pub const ALL: [SymptomClass; 3] = [SymptomClass::Hc, SymptomClass::PSz, SymptomClass::MSz];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::validation(format!("class index {i} out of range")))
    }

    pub fn label(self) -> &'static str {
        match self {
            SymptomClass::Hc => "HC",
            SymptomClass::PSz => "P-SZ",
            SymptomClass::MSz => "M-SZ",
        }
    }
}

impl fmt::Display for SymptomClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SymptomClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "HC" => Ok(SymptomClass::Hc),
            "P-SZ" => Ok(SymptomClass::PSz),
            "M-SZ" => Ok(SymptomClass::MSz),
            other => Err(Error::validation(format!("unknown class `{other}`"))),
        }
    }
}

impl Serialize for SymptomClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for SymptomClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subtype {
    pub name: String,
    pub items: Vec<usize>,
}

/// BPRS item groups used for labeling (0-based item indices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubtypeConfig {
    pub positive_items: Vec<usize>,
    /// Non-positive subtypes; a session with two or more subtypes above the
    /// threshold is mixed.
    pub other_subtypes: Vec<Subtype>,
    pub threshold: f64,
}

impl Default for SubtypeConfig {
    fn default() -> Self {
        Self {
            positive_items: vec![3, 7, 11, 14],
            other_subtypes: vec![Subtype {
                name: "negative".into(),
                items: vec![2, 12, 15],
            }],
            threshold: 3.5,
        }
    }
}

impl SubtypeConfig {
    pub fn validate(&self) -> Result<()> {
        let groups = std::iter::once(&self.positive_items).chain(self.other_subtypes.iter().map(|s| &s.items));
        for g in groups {
            if g.is_empty() || g.iter().any(|&i| i >= BPRS_ITEMS.len()) {
                return Err(Error::validation(format!("invalid BPRS subtype item set {g:?}")));
            }
        }
        Ok(())
    }
}

fn check_items(items: &[u8]) -> Result<()> {
    if items.len() != BPRS_ITEMS.len() {
        return Err(Error::validation(format!(
            "expected {} BPRS items, got {}",
            BPRS_ITEMS.len(),
            items.len()
        )));
    }
    if let Some((i, v)) = items.iter().enumerate().find(|(_, v)| !(1..=7).contains(*v)) {
        return Err(Error::validation(format!(
            "BPRS item {} ({}) = {v} outside [1, 7]",
            i + 1,
            BPRS_ITEMS[i]
        )));
    }
    Ok(())
}

fn group_mean(items: &[u8], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| items[i] as f64).sum::<f64>() / idx.len() as f64
}

/// Labels a session from its BPRS items. Mixed when two or more subtype
/// averages exceed the threshold, positive when only the positive one does,
/// healthy when none does. A single elevated non-positive subtype has no
/// class in this cohort and is rejected.
pub fn assign_subtype(items: &[u8], cfg: &SubtypeConfig) -> Result<SymptomClass> {
    check_items(items)?;
    let pos = group_mean(items, &cfg.positive_items) > cfg.threshold;
    let others: Vec<&str> = cfg
        .other_subtypes
        .iter()
        .filter(|s| group_mean(items, &s.items) > cfg.threshold)
        .map(|s| s.name.as_str())
        .collect();
    match (pos, others.len()) {
        (false, 0) => Ok(SymptomClass::Hc),
        (true, 0) => Ok(SymptomClass::PSz),
        (true, _) | (false, 2..) => Ok(SymptomClass::MSz),
        (false, _) => Err(Error::validation(format!(
            "only the {} subtype is elevated; no matching class",
            others[0]
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLabel {
    pub bprs_items: Vec<u8>,
    pub bprs_total: u32,
    pub class: SymptomClass,
}

impl SessionLabel {
    pub fn from_items(items: Vec<u8>, cfg: &SubtypeConfig) -> Result<Self> {
        let class = assign_subtype(&items, cfg)?;
        let bprs_total = items.iter().map(|&v| v as u32).sum();
        Ok(Self {
            bprs_items: items,
            bprs_total,
            class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub session_id: String,
    pub audio_csv: PathBuf,
    pub video_csv: PathBuf,
    pub bprs_items: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<SymptomClass>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::validation(format!("{} line {}: {e}", path.display(), n + 1)))?;
            records.push(r);
        }
        let m = Manifest {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        };
        m.check_unique()?;
        for r in &m.records {
            for p in [&r.audio_csv, &r.video_csv] {
                let full = m.base_dir.join(p);
                if !full.is_file() {
                    return Err(Error::validation(format!(
                        "session {}: missing file {}",
                        r.session_id,
                        full.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.check_unique()?;
        write_atomic(path, &self.to_jsonl()?)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.session_id) {
                return Err(Error::validation(format!("duplicate session id {}", r.session_id)));
            }
        }
        Ok(())
    }

    /// Labels every record, checking stored classes against the rule.
    pub fn labels(&self, cfg: &SubtypeConfig) -> Result<BTreeMap<String, SessionLabel>> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            let label = SessionLabel::from_items(r.bprs_items.clone(), cfg)
                .map_err(|e| Error::validation(format!("session {}: {e}", r.session_id)))?;
            if let Some(c) = r.class {
                if c != label.class {
                    return Err(Error::validation(format!(
                        "session {}: stored class {c} but items imply {}",
                        r.session_id, label.class
                    )));
                }
            }
            out.insert(r.session_id.clone(), label);
        }
        Ok(out)
    }

    pub fn load_series(
        &self,
        r: &ManifestRecord,
        audio_hz: f64,
        video_hz: f64,
    ) -> Result<(ChannelSeries, ChannelSeries)> {
        let a = ChannelSeries::read_csv(
            &self.base_dir.join(&r.audio_csv),
            Modality::Audio,
            audio_hz,
            &r.session_id,
            &r.subject_id,
        )?;
        let v = ChannelSeries::read_csv(
            &self.base_dir.join(&r.video_csv),
            Modality::Video,
            video_hz,
            &r.session_id,
            &r.subject_id,
        )?;
        Ok((a, v))
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.subject_id.as_str()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Subjects forced into the test split.
    pub pinned_test: Vec<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
            pinned_test: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub subjects: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, subject: &str) -> Option<Split> {
        self.subjects.get(subject).copied()
    }

    pub fn members(&self, split: Split) -> Vec<&str> {
        self.subjects
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

fn closest_cut(cum: &[f64], target: f64, range: std::ops::RangeInclusive<usize>) -> usize {
    let mut best = *range.start();
    let mut best_d = f64::INFINITY;
    for i in range {
        let d = (cum[i] - target).abs();
        if d < best_d - 1e-12 {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Subject-independent split. Subjects are sorted, shuffled with the seed
/// (pinned test subjects moved to the end), then cut where the cumulative
/// session fraction is closest to the train and train+val ratios.
pub fn split_subjects(records: &[ManifestRecord], cfg: &SplitConfig, seed: u64) -> Result<SplitAssignment> {
    let total_ratio = cfg.train + cfg.val + cfg.test;
    if [cfg.train, cfg.val, cfg.test].iter().any(|&r| r <= 0.0) || (total_ratio - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!(
            "split ratios must be positive and sum to 1, got {}/{}/{}",
            cfg.train, cfg.val, cfg.test
        )));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.subject_id.as_str()).or_default() += 1;
    }
    let n = counts.len();
    if n < 3 {
        return Err(Error::validation(format!(
            "need at least 3 subjects to split, found {n}"
        )));
    }
    for p in &cfg.pinned_test {
        if !counts.contains_key(p.as_str()) {
            return Err(Error::validation(format!("pinned test subject {p} not in manifest")));
        }
    }
    let mut order: Vec<&str> = counts.keys().copied().collect();
    order.shuffle(&mut module_rng(seed, "data.split"));
    let (mut free, pinned): (Vec<&str>, Vec<&str>) =
        order.into_iter().partition(|s| !cfg.pinned_test.iter().any(|p| p == s));
    if free.len() < 2 {
        return Err(Error::validation(
            "pinning leaves fewer than 2 subjects for train and val",
        ));
    }
    let n_pinned = pinned.len();
    free.extend(pinned);
    let total: usize = records.len();
    let mut cum = vec![0.0; n + 1];
    for (i, s) in free.iter().enumerate() {
        cum[i + 1] = cum[i] + counts[s] as f64 / total as f64;
    }
    // cut1: number of train subjects; cut2: train + val subjects.
    let cut2_max = if n_pinned > 0 { n - n_pinned } else { n - 1 };
    let cut1 = closest_cut(&cum, cfg.train, 1..=cut2_max - 1);
    let cut2 = closest_cut(&cum, cfg.train + cfg.val, cut1 + 1..=cut2_max);
    let mut a = SplitAssignment::default();
    for (i, s) in free.iter().enumerate() {
        let split = if i < cut1 {
            Split::Train
        } else if i < cut2 {
            Split::Val
        } else {
            Split::Test
        };
        a.subjects.insert(s.to_string(), split);
    }
    Ok(a)
}

/// Synthetic cohort parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub subjects: usize,
    pub sessions_per_subject: usize,
    pub duration_s: (f64, f64),
    /// HC, P-SZ, M-SZ proportions.
    pub class_mix: [f64; 3],
    /// Additional mixed-class subjects with totals near the top of the range.
    pub extreme_subjects: usize,
    pub audio_rate_hz: f64,
    pub video_rate_hz: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            subjects: 20,
            sessions_per_subject: 3,
            duration_s: (150.0, 360.0),
            class_mix: [0.4, 0.35, 0.25],
            extreme_subjects: 0,
            audio_rate_hz: 100.0,
            video_rate_hz: 30.0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration_s;
        if self.subjects == 0 || self.sessions_per_subject == 0 {
            return Err(Error::validation("cohort needs at least one subject and session"));
        }
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::validation(format!("bad duration range ({lo}, {hi})")));
        }
        if self.class_mix.iter().any(|&p| p < 0.0) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::validation("class mix must be non-negative with a positive sum"));
        }
        if self.audio_rate_hz <= 0.0 || self.video_rate_hz <= 0.0 {
            return Err(Error::validation("sample rates must be positive"));
        }
        Ok(())
    }
}

/// Splits `n` subjects across classes by largest remainder.
fn allocate_classes(n: usize, mix: &[f64; 3]) -> [usize; 3] {
    let s: f64 = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|p| p / s * n as f64).collect();
    let mut out = [0usize; 3];
    for (o, e) in out.iter_mut().zip(&exact) {
        *o = e.floor() as usize;
    }
    let mut rem: Vec<(usize, f64)> = exact.iter().enumerate().map(|(i, e)| (i, e - e.floor())).collect();
    rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut left = n - out.iter().sum::<usize>();
    for (i, _) in rem {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn total_range(class: SymptomClass, extreme: bool) -> (u32, u32) {
    match (class, extreme) {
        (_, true) => (61, 62),
        (SymptomClass::Hc, _) => (19, 27),
        (SymptomClass::PSz, _) => (30, 42),
        (SymptomClass::MSz, _) => (43, 54),
    }
}

/// Draws BPRS items for a class with the requested total. Subtype items get
/// class-dependent floors and caps so the labeling rule holds by construction.
fn draw_items(rng: &mut ChaCha8Rng, class: SymptomClass, target: u32, cfg: &SubtypeConfig) -> Result<Vec<u8>> {
    let neg: Vec<usize> = cfg
        .other_subtypes
        .iter()
        .flat_map(|s| s.items.iter().copied())
        .collect();
    let mut lo = [1u8; 18];
    let mut hi = [3u8; 18];
    let (pos_lo, pos_hi, neg_lo, neg_hi) = match class {
        SymptomClass::Hc => (1, 3, 1, 3),
        SymptomClass::PSz => (4, 5, 1, 3),
        SymptomClass::MSz => (4, 5, 4, 5),
    };
    for &i in &neg {
        lo[i] = neg_lo;
        hi[i] = neg_hi;
    }
    for &i in &cfg.positive_items {
        lo[i] = pos_lo;
        hi[i] = pos_hi;
    }
    let min: u32 = lo.iter().map(|&v| v as u32).sum();
    let max: u32 = hi.iter().map(|&v| v as u32).sum();
    if target < min || target > max {
        return Err(Error::validation(format!(
            "cannot draw {class} items totalling {target} (feasible {min}..={max})"
        )));
    }
    let mut items = lo;
    let mut total = min;
    while total < target {
        let open: Vec<usize> = (0..18).filter(|&i| items[i] < hi[i]).collect();
        let i = open[rng.random_range(0..open.len())];
        items[i] += 1;
        total += 1;
    }
    Ok(items.to_vec())
}

/// Subject-level generation state.
#[derive(Clone, Debug)]
struct SubjectPlan {
    id: String,
    class: SymptomClass,
    base_total: u32,
    extreme: bool,
}

/// One synthesized session: labels plus both channel series.
#[derive(Clone, Debug)]
pub struct SyntheticSession {
    pub record: ManifestRecord,
    pub label: SessionLabel,
    pub audio: ChannelSeries,
    pub video: ChannelSeries,
}

/// Severity-coupled AR(1) series. Every channel mixes a shared AR(1) factor,
/// delayed by `i mod 4` frames, with independent AR(1) noise; the mixing
/// weight grows with `coupling` and the factor's persistence with `phi`.
fn ar_series(
    rng: &mut ChaCha8Rng,
    channels: usize,
    frames: usize,
    coupling: f64,
    phi: f64,
    scale: f64,
) -> Vec<Vec<f64>> {
    const MAX_LAG: usize = 3;
    let innov = (1.0 - phi * phi).sqrt();
    let mut f = Vec::with_capacity(frames + MAX_LAG);
    let mut prev: f64 = StandardNormal.sample(rng);
    for _ in 0..frames + MAX_LAG {
        let e: f64 = StandardNormal.sample(rng);
        prev = phi * prev + innov * e;
        f.push(prev);
    }
    let (wc, wn) = (coupling.sqrt(), (1.0 - coupling).sqrt());
    let noise_phi: f64 = 0.3;
    let noise_innov = (1.0 - noise_phi * noise_phi).sqrt();
    (0..channels)
        .map(|ch| {
            let lag = ch % (MAX_LAG + 1);
            let offset = 0.1 * ch as f64;
            let mut n: f64 = StandardNormal.sample(rng);
            (0..frames)
                .map(|t| {
                    let e: f64 = StandardNormal.sample(rng);
                    n = noise_phi * n + noise_innov * e;
                    offset + scale * (wc * f[t + MAX_LAG - lag] + wn * n)
                })
                .collect()
        })
        .collect()
}

fn couplings(label: &SessionLabel, cfg: &SubtypeConfig) -> (f64, f64, f64) {
    let s_tot = ((label.bprs_total as f64 - 18.0) / 44.0).clamp(0.0, 1.0);
    let pos = ((group_mean(&label.bprs_items, &cfg.positive_items) - 1.0) / 4.0).clamp(0.0, 1.0);
    let neg_items: Vec<usize> = cfg
        .other_subtypes
        .iter()
        .flat_map(|s| s.items.iter().copied())
        .collect();
    let neg = if neg_items.is_empty() {
        0.0
    } else {
        ((group_mean(&label.bprs_items, &neg_items) - 1.0) / 4.0).clamp(0.0, 1.0)
    };
    let ca = (0.05 + 0.45 * pos + 0.4 * s_tot).min(0.95);
    let cv = (0.05 + 0.45 * neg + 0.4 * s_tot).min(0.95);
    (ca, cv, s_tot)
}

/// Generates one session's series in memory.
pub fn synthesize_session(
    rng: &mut ChaCha8Rng,
    label: &SessionLabel,
    duration_s: f64,
    cohort: &CohortConfig,
    subtypes: &SubtypeConfig,
    session_id: &str,
    subject_id: &str,
) -> Result<(ChannelSeries, ChannelSeries)> {
    let (ca, cv, s_tot) = couplings(label, subtypes);
    let phi = 0.6 + 0.35 * s_tot;
    let scale = 1.0 + s_tot;
    let fa = (duration_s * cohort.audio_rate_hz).round() as usize;
    let fv = (duration_s * cohort.video_rate_hz).round() as usize;
    let a = ar_series(rng, AUDIO_CHANNELS.len(), fa, ca, phi, scale);
    let v = ar_series(rng, VIDEO_CHANNELS.len(), fv, cv, phi, scale);
    let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    Ok((
        ChannelSeries::new(
            Modality::Audio,
            names(&AUDIO_CHANNELS),
            cohort.audio_rate_hz,
            a,
            session_id,
            subject_id,
        )?,
        ChannelSeries::new(
            Modality::Video,
            names(&VIDEO_CHANNELS),
            cohort.video_rate_hz,
            v,
            session_id,
            subject_id,
        )?,
    ))
}

fn plan_subjects(rng: &mut ChaCha8Rng, cfg: &CohortConfig) -> Vec<SubjectPlan> {
    let counts = allocate_classes(cfg.subjects, &cfg.class_mix);
    let mut classes: Vec<SymptomClass> = SymptomClass::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, k)| std::iter::repeat_n(c, k))
        .collect();
    classes.shuffle(rng);
    let mut plans: Vec<SubjectPlan> = classes
        .into_iter()
        .map(|class| (class, false))
        .chain(std::iter::repeat_n((SymptomClass::MSz, true), cfg.extreme_subjects))
        .enumerate()
        .map(|(i, (class, extreme))| {
            let (lo, hi) = total_range(class, extreme);
            SubjectPlan {
                id: format!("S{:03}", i + 1),
                class,
                base_total: rng.random_range(lo..=hi),
                extreme,
            }
        })
        .collect();
    plans.sort_by(|a, b| a.id.cmp(&b.id));
    plans
}

/// Ids of the injected extreme-severity subjects for a cohort config.
pub fn extreme_subject_ids(cfg: &CohortConfig) -> Vec<String> {
    (cfg.subjects..cfg.subjects + cfg.extreme_subjects)
        .map(|i| format!("S{:03}", i + 1))
        .collect()
}

/// Generates the cohort in memory. Deterministic per seed.
pub fn generate_sessions(cfg: &CohortConfig, subtypes: &SubtypeConfig, seed: u64) -> Result<Vec<SyntheticSession>> {
    cfg.validate()?;
    subtypes.validate()?;
    let mut rng = module_rng(seed, "data.cohort");
    let plans = plan_subjects(&mut rng, cfg);
    let mut out = Vec::new();
    for p in &plans {
        let (lo, hi) = total_range(p.class, p.extreme);
        for k in 0..cfg.sessions_per_subject {
            let session_id = format!("{}_{:02}", p.id, k + 1);
            let jitter: i64 = rng.random_range(-2..=2);
            let target = (p.base_total as i64 + jitter).clamp(lo as i64, hi as i64) as u32;
            let items = draw_items(&mut rng, p.class, target, subtypes)?;
            let label = SessionLabel::from_items(items, subtypes)?;
            if label.class != p.class {
                return Err(Error::validation(format!(
                    "generator drew {} items for a {} subject; the subtype config is inconsistent",
                    label.class, p.class
                )));
            }
            let dur = rng.random_range(cfg.duration_s.0..=cfg.duration_s.1).round();
            let mut srng = crate::util::module_rng(seed, &format!("data.signal.{session_id}"));
            let (audio, video) = synthesize_session(&mut srng, &label, dur, cfg, subtypes, &session_id, &p.id)?;
            let record = ManifestRecord {
                subject_id: p.id.clone(),
                session_id: session_id.clone(),
                audio_csv: PathBuf::from(format!("sessions/{session_id}_audio.csv")),
                video_csv: PathBuf::from(format!("sessions/{session_id}_video.csv")),
                bprs_items: label.bprs_items.clone(),
                class: Some(label.class),
            };
            out.push(SyntheticSession {
                record,
                label,
                audio,
                video,
            });
        }
    }
    Ok(out)
}

/// Writes the cohort's manifest and channel CSVs under `dir`.
pub fn generate_synthetic(cfg: &CohortConfig, subtypes: &SubtypeConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    let sessions = generate_sessions(cfg, subtypes, seed)?;
    let mut records = Vec::with_capacity(sessions.len());
    for s in sessions {
        write_atomic(&dir.join(&s.record.audio_csv), &s.audio.to_csv_bytes()?)?;
        write_atomic(&dir.join(&s.record.video_csv), &s.video.to_csv_bytes()?)?;
        records.push(s.record);
    }
    let manifest = Manifest {
        base_dir: dir.to_path_buf(),
        records,
    };
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items_with(pos: u8, neg: u8) -> Vec<u8> {
        let cfg = SubtypeConfig::default();
        let mut v = vec![1u8; 18];
        for &i in &cfg.positive_items {
            v[i] = pos;
        }
        for &i in &cfg.other_subtypes[0].items {
            v[i] = neg;
        }
        v
    }

    #[test]
    fn subtype_rule_examples() {
        let cfg = SubtypeConfig::default();
        assert_eq!(assign_subtype(&[1; 18], &cfg).unwrap(), SymptomClass::Hc);
        assert_eq!(assign_subtype(&items_with(4, 1), &cfg).unwrap(), SymptomClass::PSz);
        assert_eq!(assign_subtype(&items_with(4, 4), &cfg).unwrap(), SymptomClass::MSz);
        assert!(assign_subtype(&items_with(1, 4), &cfg).is_err());
        let mut bad = vec![1u8; 18];
        bad[5] = 8;
        assert!(assign_subtype(&bad, &cfg).is_err());
        assert!(assign_subtype(&[1; 17], &cfg).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let mut v = vec![1u8; 18];
        // positive items 3,4,3,4 → average exactly 3.5
        for (k, &i) in SubtypeConfig::default().positive_items.iter().enumerate() {
            v[i] = if k % 2 == 0 { 3 } else { 4 };
        }
        assert_eq!(assign_subtype(&v, &SubtypeConfig::default()).unwrap(), SymptomClass::Hc);
    }

    #[test]
    fn class_allocation_sums() {
        assert_eq!(allocate_classes(20, &[0.4, 0.35, 0.25]), [8, 7, 5]);
        assert_eq!(allocate_classes(3, &[1.0, 1.0, 1.0]), [1, 1, 1]);
        assert_eq!(allocate_classes(7, &[0.4, 0.35, 0.25]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn ten_single_session_subjects_split_seven_one_two() {
        let recs: Vec<ManifestRecord> = (0..10)
            .map(|i| ManifestRecord {
                subject_id: format!("s{i}"),
                session_id: format!("s{i}_1"),
                audio_csv: "a".into(),
                video_csv: "v".into(),
                bprs_items: vec![1; 18],
                class: None,
            })
            .collect();
        let a = split_subjects(&recs, &SplitConfig::default(), 3).unwrap();
        let sizes: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| a.members(s).len())
            .collect();
        assert!(sizes == [7, 1, 2] || sizes == [7, 2, 1], "{sizes:?}");
        assert_eq!(a, split_subjects(&recs, &SplitConfig::default(), 3).unwrap());
        assert!(split_subjects(&recs[..2], &SplitConfig::default(), 3).is_err());
    }

    #[test]
    fn pinned_subject_lands_in_test() {
        let recs: Vec<ManifestRecord> = (0..12)
            .map(|i| ManifestRecord {
                subject_id: format!("s{i:02}"),
                session_id: format!("x{i}"),
                audio_csv: "a".into(),
                video_csv: "v".into(),
                bprs_items: vec![1; 18],
                class: None,
            })
            .collect();
        for seed in 0..20 {
            let cfg = SplitConfig {
                pinned_test: vec!["s05".into()],
                ..Default::default()
            };
            let a = split_subjects(&recs, &cfg, seed).unwrap();
            assert_eq!(a.split_of("s05"), Some(Split::Test));
        }
    }

    #[test]
    fn generated_sessions_respect_labels_and_range() {
        let cfg = CohortConfig {
            subjects: 6,
            sessions_per_subject: 2,
            duration_s: (41.0, 45.0),
            extreme_subjects: 1,
            ..Default::default()
        };
        let sessions = generate_sessions(&cfg, &SubtypeConfig::default(), 1).unwrap();
        assert_eq!(sessions.len(), 14);
        for s in &sessions {
            assert!((19..=62).contains(&s.label.bprs_total));
            assert_eq!(
                assign_subtype(&s.label.bprs_items, &SubtypeConfig::default()).unwrap(),
                s.label.class
            );
            assert_eq!(s.audio.channels(), 8);
            assert_eq!(s.video.channels(), 10);
        }
        let ext = extreme_subject_ids(&cfg);
        assert_eq!(ext, vec!["S007".to_string()]);
        assert!(sessions
            .iter()
            .filter(|s| s.record.subject_id == "S007")
            .all(|s| s.label.bprs_total >= 61));
    }
}
