//! Session segmentation and channel-delay correlation (FVTC) matrices.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use mmvq_autodiff::{Container, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

pub const AUDIO_CHANNELS: [&str; 8] = [
    "LA",
    "LP",
    "TBCL",
    "TBCD",
    "TTCL",
    "TTCD",
    "aperiodicity",
    "periodicity",
];

pub const VIDEO_CHANNELS: [&str; 10] = [
    "AU01", "AU02", "AU04", "AU06", "AU07", "AU09", "AU10", "AU12", "AU15", "AU25",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub window_s: f64,
    pub overlap_s: f64,
    pub audio_rate_hz: f64,
    pub video_rate_hz: f64,
    pub audio_channels: Vec<String>,
    pub video_channels: Vec<String>,
    pub audio_delays: Vec<usize>,
    pub video_delays: Vec<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_s: 40.0,
            overlap_s: 5.0,
            audio_rate_hz: 100.0,
            video_rate_hz: 30.0,
            audio_channels: AUDIO_CHANNELS.iter().map(|s| s.to_string()).collect(),
            video_channels: VIDEO_CHANNELS.iter().map(|s| s.to_string()).collect(),
            audio_delays: (0..10).collect(),
            video_delays: (0..10).collect(),
        }
    }
}

impl FeatureConfig {
    pub fn channels(&self, m: Modality) -> &[String] {
        match m {
            Modality::Audio => &self.audio_channels,
            Modality::Video => &self.video_channels,
        }
    }

    pub fn delays(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Audio => &self.audio_delays,
            Modality::Video => &self.video_delays,
        }
    }

    pub fn rate(&self, m: Modality) -> f64 {
        match m {
            Modality::Audio => self.audio_rate_hz,
            Modality::Video => self.video_rate_hz,
        }
    }

    /// FVTC matrix shape `(N, N·D)` for a modality.
    pub fn fvtc_shape(&self, m: Modality) -> (usize, usize) {
        let n = self.channels(m).len();
        (n, n * self.delays(m).len())
    }

    pub fn hop_s(&self) -> f64 {
        self.window_s - self.overlap_s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > self.overlap_s && self.overlap_s >= 0.0) {
            return Err(Error::validation(format!(
                "segmentation needs window_s > overlap_s >= 0 (got {} / {})",
                self.window_s, self.overlap_s
            )));
        }
        for m in [Modality::Audio, Modality::Video] {
            if self.rate(m) <= 0.0 {
                return Err(Error::validation(format!("{} rate must be positive", m.as_str())));
            }
            if self.channels(m).is_empty() || self.delays(m).is_empty() {
                return Err(Error::validation(format!(
                    "{} needs at least one channel and one delay",
                    m.as_str()
                )));
            }
            let frames = (self.window_s * self.rate(m)).round() as usize;
            if let Some(&d) = self.delays(m).iter().max() {
                if d + 2 > frames {
                    return Err(Error::validation(format!(
                        "{} delay {d} too large for {frames}-frame windows",
                        m.as_str()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One session's multichannel series for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSeries {
    pub modality: Modality,
    pub channel_names: Vec<String>,
    pub rate_hz: f64,
    /// `[channels][frames]`
    pub samples: Vec<Vec<f64>>,
    pub session_id: String,
    pub subject_id: String,
}

impl ChannelSeries {
    pub fn new(
        modality: Modality,
        channel_names: Vec<String>,
        rate_hz: f64,
        samples: Vec<Vec<f64>>,
        session_id: impl Into<String>,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        if rate_hz.is_nan() || rate_hz <= 0.0 {
            return Err(Error::validation("sample rate must be positive"));
        }
        if channel_names.len() != samples.len() {
            return Err(Error::validation(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                samples.len()
            )));
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|r| r.len() != first.len()) {
                return Err(Error::validation("channels have unequal frame counts"));
            }
        }
        Ok(Self {
            modality,
            channel_names,
            rate_hz,
            samples,
            session_id: session_id.into(),
            subject_id: subject_id.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn frames(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.rate_hz
    }

    /// Checks the channel count against the configured layout.
    pub fn check_config(&self, cfg: &FeatureConfig) -> Result<()> {
        let want = cfg.channels(self.modality).len();
        if self.channels() != want {
            return Err(Error::validation(format!(
                "session {}: {} series has {} channels, config expects {want}",
                self.session_id,
                self.modality.as_str(),
                self.channels()
            )));
        }
        Ok(())
    }

    /// Reads a channel CSV: header row of channel names, one frame per row.
    pub fn read_csv(path: &Path, modality: Modality, rate_hz: f64, session_id: &str, subject_id: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::validation(format!("{}: {other:?}", path.display())),
        })?;
        let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut samples = vec![Vec::new(); names.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != names.len() {
                return Err(Error::validation(format!(
                    "{} row {}: {} values for {} channels",
                    path.display(),
                    row + 2,
                    rec.len(),
                    names.len()
                )));
            }
            for (ch, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::validation(format!("{} row {}: bad number `{field}`", path.display(), row + 2))
                })?;
                samples[ch].push(v);
            }
        }
        Self::new(modality, names, rate_hz, samples, session_id, subject_id)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.channel_names)?;
        let mut row = Vec::with_capacity(self.channels());
        for t in 0..self.frames() {
            row.clear();
            row.extend(self.samples.iter().map(|c| format!("{:.5}", c[t])));
            w.write_record(&row)?;
        }
        w.into_inner().map_err(|e| Error::validation(format!("csv flush: {e}")))
    }
}

/// A fixed-length window aligned across both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub audio_frames: Range<usize>,
    pub video_frames: Range<usize>,
}

impl Segment {
    pub fn frames(&self, m: Modality) -> Range<usize> {
        match m {
            Modality::Audio => self.audio_frames.clone(),
            Modality::Video => self.video_frames.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
    pub warnings: Vec<String>,
}

/// Number of full windows in a session of `duration_s` seconds.
pub fn segment_count(duration_s: f64, window_s: f64, hop_s: f64) -> usize {
    if duration_s + 1e-9 < window_s {
        return 0;
    }
    ((duration_s - window_s) / hop_s + 1e-9).floor() as usize + 1
}

/// Splits a session into overlapping windows; trailing partial windows are
/// dropped. Frame indices are `round(time · rate)` per modality.
pub fn segment_session(
    audio: &ChannelSeries,
    video: &ChannelSeries,
    window_s: f64,
    overlap_s: f64,
) -> Result<Segmentation> {
    if !(window_s > overlap_s && overlap_s >= 0.0) {
        return Err(Error::validation(format!(
            "need window_s > overlap_s >= 0, got {window_s} / {overlap_s}"
        )));
    }
    if audio.session_id != video.session_id {
        return Err(Error::validation(format!(
            "audio session {} does not match video session {}",
            audio.session_id, video.session_id
        )));
    }
    let duration = audio.duration_s().min(video.duration_s());
    let hop = window_s - overlap_s;
    let count = segment_count(duration, window_s, hop);
    let mut out = Segmentation::default();
    if count == 0 {
        out.warnings.push(format!(
            "session {} lasts {duration:.2} s, shorter than one {window_s} s window",
            audio.session_id
        ));
        return Ok(out);
    }
    let frames_at = |t: f64, s: &ChannelSeries| ((t * s.rate_hz).round() as usize).min(s.frames());
    for k in 0..count {
        let start_s = k as f64 * hop;
        let end_s = start_s + window_s;
        out.segments.push(Segment {
            index: k,
            start_s,
            end_s,
            audio_frames: frames_at(start_s, audio)..frames_at(end_s, audio),
            video_frames: frames_at(start_s, video)..frames_at(end_s, video),
        });
    }
    Ok(out)
}

fn is_constant(xs: &[f64]) -> bool {
    xs.first().is_none_or(|&f| xs.iter().all(|&v| v == f))
}

/// Pearson correlation without range checks; 0 for zero-variance slices.
pub(crate) fn pearson(x: &[f64], y: &[f64]) -> f64 {
    if is_constant(x) || is_constant(y) {
        return 0.0;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation of `x[0..T-d)` with `y[d..T)`.
pub fn delay_correlation(x: &[f64], y: &[f64], d: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::validation(format!(
            "delay_correlation: lengths {} and {} differ",
            x.len(),
            y.len()
        )));
    }
    let t = x.len();
    if t < 2 || d > t - 2 {
        return Err(Error::validation(format!(
            "delay {d} out of range for series of length {t} (max {})",
            t.saturating_sub(2)
        )));
    }
    Ok(pearson(&x[..t - d], &y[d..]))
}

/// Channel-delay correlation matrix `[N × N·D]` with
/// `values[i, j·D + k] = corr(channel_i, channel_j delayed by delays[k])`.
#[derive(Clone, Debug, PartialEq)]
pub struct FvtcMatrix {
    pub modality: Modality,
    pub channels: usize,
    pub delays_frames: Vec<usize>,
    pub values: Vec<f64>,
    pub segment_index: usize,
}

impl FvtcMatrix {
    pub fn rows(&self) -> usize {
        self.channels
    }

    pub fn cols(&self) -> usize {
        self.channels * self.delays_frames.len()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[i * self.cols() + j * self.delays_frames.len() + k]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &[self.rows(), self.cols()],
            self.values.iter().map(|&v| v as f32).collect(),
        )
        .expect("fvtc shape")
    }
}

/// Channels found constant within a segment; their correlations are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QualityReport {
    pub constant_channels: Vec<String>,
}

/// Builds the FVTC matrix for the series' modality over one segment.
pub fn build_fvtc(series: &ChannelSeries, segment: &Segment, delays: &[usize]) -> Result<(FvtcMatrix, QualityReport)> {
    let range = segment.frames(series.modality);
    if range.end > series.frames() {
        return Err(Error::validation(format!(
            "segment {} ends at frame {} beyond {} frames",
            segment.index,
            range.end,
            series.frames()
        )));
    }
    let t = range.len();
    if let Some(&dmax) = delays.iter().max() {
        if t < 2 || dmax > t - 2 {
            return Err(Error::validation(format!("delay {dmax} invalid for {t}-frame segment")));
        }
    }
    let n = series.channels();
    let nd = delays.len();
    let slices: Vec<&[f64]> = series.samples.iter().map(|c| &c[range.clone()]).collect();
    let mut quality = QualityReport::default();
    for (i, s) in slices.iter().enumerate() {
        if is_constant(s) {
            quality.constant_channels.push(series.channel_names[i].clone());
        }
    }
    let mut values = vec![0.0; n * n * nd];
    for i in 0..n {
        for j in 0..n {
            for (k, &d) in delays.iter().enumerate() {
                values[i * n * nd + j * nd + k] = pearson(&slices[i][..t - d], &slices[j][d..]);
            }
        }
    }
    Ok((
        FvtcMatrix {
            modality: series.modality,
            channels: n,
            delays_frames: delays.to_vec(),
            values,
            segment_index: segment.index,
        },
        quality,
    ))
}

/// Per-session aligned FVTC pairs, keyed by session id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureCache {
    pub sessions: BTreeMap<String, Vec<SegmentFeatures>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFeatures {
    pub segment_index: usize,
    pub audio: Tensor<f32>,
    pub video: Tensor<f32>,
}

impl FeatureCache {
    pub fn entry_name(session: &str, segment: usize, m: Modality) -> String {
        format!("{session}/{segment}/{}", m.as_str())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (sid, segs) in &self.sessions {
            for s in segs {
                c.insert_tensor(Self::entry_name(sid, s.segment_index, Modality::Audio), s.audio.clone());
                c.insert_tensor(Self::entry_name(sid, s.segment_index, Modality::Video), s.video.clone());
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut audio: BTreeMap<(String, usize), Tensor<f32>> = BTreeMap::new();
        let mut video: BTreeMap<(String, usize), Tensor<f32>> = BTreeMap::new();
        for name in c.names() {
            let mut parts = name.rsplitn(3, '/');
            let (Some(m), Some(seg), Some(sid)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::validation(format!("bad FVTC cache entry `{name}`")));
            };
            let seg: usize = seg
                .parse()
                .map_err(|_| Error::validation(format!("bad segment index in `{name}`")))?;
            let t = c.tensor::<f32>(name)?.clone();
            let key = (sid.to_string(), seg);
            match m {
                "audio" => audio.insert(key, t),
                "video" => video.insert(key, t),
                _ => return Err(Error::validation(format!("bad modality in `{name}`"))),
            };
        }
        let mut cache = FeatureCache::default();
        for ((sid, seg), a) in audio {
            let v = video
                .remove(&(sid.clone(), seg))
                .ok_or_else(|| Error::validation(format!("session {sid} segment {seg} lacks video")))?;
            cache.sessions.entry(sid).or_default().push(SegmentFeatures {
                segment_index: seg,
                audio: a,
                video: v,
            });
        }
        if let Some(((sid, seg), _)) = video.into_iter().next() {
            return Err(Error::validation(format!("session {sid} segment {seg} lacks audio")));
        }
        for segs in cache.sessions.values_mut() {
            segs.sort_by_key(|s| s.segment_index);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        self.to_container().write(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn segment_total(&self) -> usize {
        self.sessions.values().map(Vec::len).sum()
    }

    pub fn max_segments(&self) -> usize {
        self.sessions.values().map(Vec::len).max().unwrap_or(0)
    }
}

/// Segments one session and builds both FVTC matrices for every segment.
pub fn session_features(
    audio: &ChannelSeries,
    video: &ChannelSeries,
    cfg: &FeatureConfig,
) -> Result<(Vec<SegmentFeatures>, Vec<String>)> {
    audio.check_config(cfg)?;
    video.check_config(cfg)?;
    let seg = segment_session(audio, video, cfg.window_s, cfg.overlap_s)?;
    let mut warnings = seg.warnings;
    let mut out = Vec::with_capacity(seg.segments.len());
    for s in &seg.segments {
        let (fa, qa) = build_fvtc(audio, s, &cfg.audio_delays)?;
        let (fv, qv) = build_fvtc(video, s, &cfg.video_delays)?;
        for (q, m) in [(qa, "audio"), (qv, "video")] {
            if !q.constant_channels.is_empty() {
                warnings.push(format!(
                    "session {} segment {}: constant {m} channels {:?}",
                    audio.session_id, s.index, q.constant_channels
                ));
            }
        }
        out.push(SegmentFeatures {
            segment_index: s.index,
            audio: fa.to_tensor(),
            video: fv.to_tensor(),
        });
    }
    Ok((out, warnings))
}
