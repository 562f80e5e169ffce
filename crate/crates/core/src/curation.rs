//! Dataset-curation rules for externally supplied detection and keypoint
//! records: video filtering, crop validity, frame striding, and the
//! identity-count estimate.
//!
//! All thresholds are strict inequalities; boundary values (confidence 0.72,
//! aspect ratio 1.5 and 5, width 48, frame count 100) are pinned by tests.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum frame count for a video to be kept.
pub const MIN_FRAME_COUNT: u64 = 100;
/// Detection confidence must be strictly larger than this.
pub const MIN_CONFIDENCE: f64 = 0.72;
/// Height/width ratio must lie strictly inside this open interval.
pub const ASPECT_RATIO_BOUNDS: (f64, f64) = (1.5, 5.0);
/// Bounding-box width must be strictly larger than this many pixels.
pub const MIN_BBOX_WIDTH: f64 = 48.0;
/// Default frame-sampling stride.
pub const DEFAULT_FRAME_STRIDE: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub key: String,
    pub frame_count: u64,
    /// Content hashes of 5 evenly sampled frames (present when the video
    /// has at least 5 frames).
    #[serde(default)]
    pub digests: Vec<String>,
    #[serde(default)]
    pub is_vr: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_key: String,
    pub frame_index: i64,
    /// `(x, y, width, height)` in pixels.
    pub bbox: (f64, f64, f64, f64),
    pub confidence: f64,
}

/// Keypoint presence grouped into head, upper body and lower body; the
/// lower-body group carries explicit hip and knee flags.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KeypointSet {
    #[serde(default)]
    pub head: bool,
    #[serde(default)]
    pub upper: bool,
    #[serde(default)]
    pub hip: bool,
    #[serde(default)]
    pub knee: bool,
}

/// One line of the detections JSONL input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionInput {
    pub video_key: String,
    pub frame_index: i64,
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub keypoints: KeypointSet,
}

impl DetectionInput {
    pub fn record(&self) -> DetectionRecord {
        DetectionRecord {
            video_key: self.video_key.clone(),
            frame_index: self.frame_index,
            bbox: (self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3]),
            confidence: self.confidence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoRejectReason {
    Duplicate,
    TooFewFrames,
    StaticVideo,
    VrVideo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropRejectReason {
    HeadOrUpperNotVisible,
    LowerBodyNotVisible,
    AspectRatio,
    LowConfidence,
    TooSmall,
}

/// Apply the video filtering rules in order: duplicate key (first occurrence
/// wins), too few frames, static content (all sampled digests equal), VR.
/// Every rejection carries the first matching reason.
pub fn filter_videos(
    videos: &[VideoRecord],
) -> (Vec<VideoRecord>, Vec<(VideoRecord, VideoRejectReason)>) {
    let mut seen = std::collections::HashSet::new();
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for video in videos {
        let reason = if !seen.insert(video.key.clone()) {
            Some(VideoRejectReason::Duplicate)
        } else if video.frame_count < MIN_FRAME_COUNT {
            Some(VideoRejectReason::TooFewFrames)
        } else if video.digests.len() == 5 && video.digests.iter().all(|d| d == &video.digests[0])
        {
            Some(VideoRejectReason::StaticVideo)
        } else if video.is_vr {
            Some(VideoRejectReason::VrVideo)
        } else {
            None
        };
        match reason {
            Some(r) => rejected.push((video.clone(), r)),
            None => kept.push(video.clone()),
        }
    }
    (kept, rejected)
}

/// Crop validity verdict; `failures` lists every violated rule in rule
/// order, so the first entry is the primary reason.
#[derive(Debug, Clone, PartialEq)]
pub struct CropVerdict {
    pub accepted: bool,
    pub failures: Vec<CropRejectReason>,
}

/// A person crop is valid iff all five rules hold: head and upper body
/// visible; hip or knee present; 1.5 < height/width < 5; confidence > 0.72;
/// bbox width > 48 px. All inequalities strict.
pub fn validate_crop(det: &DetectionRecord, kps: &KeypointSet) -> CropVerdict {
    let mut failures = Vec::new();
    if !(kps.head && kps.upper) {
        failures.push(CropRejectReason::HeadOrUpperNotVisible);
    }
    if !(kps.hip || kps.knee) {
        failures.push(CropRejectReason::LowerBodyNotVisible);
    }
    let (_, _, w, h) = det.bbox;
    let ratio = h / w;
    if !(ratio > ASPECT_RATIO_BOUNDS.0 && ratio < ASPECT_RATIO_BOUNDS.1) {
        failures.push(CropRejectReason::AspectRatio);
    }
    if !(det.confidence > MIN_CONFIDENCE) {
        failures.push(CropRejectReason::LowConfidence);
    }
    if !(w > MIN_BBOX_WIDTH) {
        failures.push(CropRejectReason::TooSmall);
    }
    CropVerdict { accepted: failures.is_empty(), failures }
}

/// Keep frames whose index is `first + k * stride` for the sorted input.
pub fn select_frames(frame_indices: &[i64], stride: u64) -> Vec<i64> {
    assert!(stride >= 1, "stride must be >= 1");
    let first = match frame_indices.first() {
        Some(&f) => f,
        None => return Vec::new(),
    };
    frame_indices
        .iter()
        .copied()
        .filter(|&f| (f - first) as u64 % stride == 0)
        .collect()
}

/// Sum over videos of the per-video maximum per-frame person count.
pub fn estimate_identity_count(per_video_frame_counts: &[Vec<u64>]) -> u64 {
    per_video_frame_counts
        .iter()
        .map(|counts| counts.iter().copied().max().unwrap_or(0))
        .sum()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line)
            .map_err(|e| Error::ManifestLine { line: i + 1, detail: e.to_string() })?;
        out.push(value);
    }
    Ok(out)
}

pub fn read_video_records(path: &Path) -> Result<Vec<VideoRecord>> {
    let records: Vec<VideoRecord> = read_jsonl(path)?;
    for (i, rec) in records.iter().enumerate() {
        if rec.frame_count >= 5 && rec.digests.len() != 5 {
            return Err(Error::ManifestLine {
                line: i + 1,
                detail: format!(
                    "video `{}` has {} digests, want exactly 5",
                    rec.key,
                    rec.digests.len()
                ),
            });
        }
    }
    Ok(records)
}

pub fn read_detection_inputs(path: &Path) -> Result<Vec<DetectionInput>> {
    let records: Vec<DetectionInput> = read_jsonl(path)?;
    for (i, rec) in records.iter().enumerate() {
        if rec.bbox[2] <= 0.0 || rec.bbox[3] <= 0.0 {
            return Err(Error::ManifestLine {
                line: i + 1,
                detail: format!("non-positive bbox dims {:?}", rec.bbox),
            });
        }
    }
    Ok(records)
}

/// One rejected crop in the rejection log.
#[derive(Debug, Clone, Serialize)]
pub struct CropRejection {
    pub video_key: String,
    pub frame_index: i64,
    pub bbox: [f64; 4],
    pub reasons: Vec<String>,
}

/// Full curation pass over pre-parsed inputs.
pub struct CurationOutcome {
    pub kept_videos: Vec<VideoRecord>,
    pub rejected_videos: Vec<(VideoRecord, VideoRejectReason)>,
    /// Accepted detections in input order.
    pub accepted: Vec<DetectionInput>,
    pub rejected: Vec<CropRejection>,
    pub identity_estimate: u64,
}

/// Filter videos, stride frames per kept video, validate each surviving
/// crop. Detections from rejected videos and unsampled frames land in the
/// rejection log with pseudo-reasons `video_rejected` / `frame_not_sampled`.
pub fn run_curation(
    videos: &[VideoRecord],
    detections: &[DetectionInput],
    stride: u64,
) -> CurationOutcome {
    let (kept_videos, rejected_videos) = filter_videos(videos);
    let kept_keys: std::collections::HashSet<&str> =
        kept_videos.iter().map(|v| v.key.as_str()).collect();

    // Frame selection per kept video, over the frames that actually carry
    // detections.
    let mut frames_by_video: std::collections::HashMap<&str, Vec<i64>> =
        std::collections::HashMap::new();
    for det in detections {
        if kept_keys.contains(det.video_key.as_str()) {
            frames_by_video.entry(det.video_key.as_str()).or_default().push(det.frame_index);
        }
    }
    let mut sampled: std::collections::HashMap<&str, std::collections::HashSet<i64>> =
        std::collections::HashMap::new();
    for (key, mut frames) in frames_by_video {
        frames.sort_unstable();
        frames.dedup();
        sampled.insert(key, select_frames(&frames, stride).into_iter().collect());
    }

    // Identity estimate: per-frame person counts over kept videos.
    let mut counts: std::collections::HashMap<&str, std::collections::HashMap<i64, u64>> =
        std::collections::HashMap::new();
    for det in detections {
        if kept_keys.contains(det.video_key.as_str()) {
            *counts.entry(det.video_key.as_str()).or_default().entry(det.frame_index).or_insert(0) +=
                1;
        }
    }
    let per_video: Vec<Vec<u64>> = kept_videos
        .iter()
        .map(|v| counts.get(v.key.as_str()).map(|m| m.values().copied().collect()).unwrap_or_default())
        .collect();
    let identity_estimate = estimate_identity_count(&per_video);

    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for det in detections {
        if !kept_keys.contains(det.video_key.as_str()) {
            rejected.push(CropRejection {
                video_key: det.video_key.clone(),
                frame_index: det.frame_index,
                bbox: det.bbox,
                reasons: vec!["video_rejected".into()],
            });
            continue;
        }
        let on_sampled_frame = sampled
            .get(det.video_key.as_str())
            .map(|set| set.contains(&det.frame_index))
            .unwrap_or(false);
        if !on_sampled_frame {
            rejected.push(CropRejection {
                video_key: det.video_key.clone(),
                frame_index: det.frame_index,
                bbox: det.bbox,
                reasons: vec!["frame_not_sampled".into()],
            });
            continue;
        }
        let verdict = validate_crop(&det.record(), &det.keypoints);
        if verdict.accepted {
            accepted.push(det.clone());
        } else {
            rejected.push(CropRejection {
                video_key: det.video_key.clone(),
                frame_index: det.frame_index,
                bbox: det.bbox,
                reasons: verdict
                    .failures
                    .iter()
                    .map(|r| {
                        serde_json::to_value(r)
                            .expect("reason serializes")
                            .as_str()
                            .expect("reason is a string")
                            .to_string()
                    })
                    .collect(),
            });
        }
    }

    CurationOutcome { kept_videos, rejected_videos, accepted, rejected, identity_estimate }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(key: &str, frames: u64) -> VideoRecord {
        VideoRecord {
            key: key.into(),
            frame_count: frames,
            digests: (0..5).map(|i| format!("{key}-{i}")).collect(),
            is_vr: false,
        }
    }

    fn good_det() -> (DetectionRecord, KeypointSet) {
        (
            DetectionRecord {
                video_key: "v".into(),
                frame_index: 0,
                bbox: (0.0, 0.0, 64.0, 128.0),
                confidence: 0.9,
            },
            KeypointSet { head: true, upper: true, hip: false, knee: true },
        )
    }

    #[test]
    fn video_boundaries() {
        let (kept, rejected) = filter_videos(&[video("a", 99), video("b", 100)]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].key, "b");
        assert_eq!(rejected[0].1, VideoRejectReason::TooFewFrames);
    }

    #[test]
    fn duplicate_keeps_first_occurrence() {
        let mut v2 = video("a", 500);
        v2.is_vr = true;
        let (kept, rejected) = filter_videos(&[video("a", 200), v2]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].frame_count, 200);
        assert_eq!(rejected[0].1, VideoRejectReason::Duplicate);
    }

    #[test]
    fn static_and_vr_rules() {
        let mut stat = video("s", 200);
        stat.digests = vec!["same".into(); 5];
        let mut vr = video("v", 200);
        vr.is_vr = true;
        let (kept, rejected) = filter_videos(&[stat, vr, video("ok", 200)]);
        assert_eq!(kept.len(), 1);
        assert_eq!(rejected[0].1, VideoRejectReason::StaticVideo);
        assert_eq!(rejected[1].1, VideoRejectReason::VrVideo);
    }

    #[test]
    fn filtering_kept_list_is_idempotent() {
        let videos = vec![video("a", 150), video("a", 300), video("b", 99), video("c", 500)];
        let (kept, _) = filter_videos(&videos);
        let (kept2, rejected2) = filter_videos(&kept);
        assert_eq!(kept, kept2);
        assert!(rejected2.is_empty());
    }

    #[test]
    fn crop_boundary_values_reject() {
        let (mut det, kps) = good_det();
        det.confidence = 0.72;
        let v = validate_crop(&det, &kps);
        assert!(!v.accepted);
        assert_eq!(v.failures, vec![CropRejectReason::LowConfidence]);

        let (mut det, kps) = good_det();
        det.bbox = (0.0, 0.0, 64.0, 96.0); // ratio exactly 1.5
        let v = validate_crop(&det, &kps);
        assert_eq!(v.failures, vec![CropRejectReason::AspectRatio]);

        let (mut det, kps) = good_det();
        det.bbox = (0.0, 0.0, 64.0, 320.0); // ratio exactly 5
        let v = validate_crop(&det, &kps);
        assert_eq!(v.failures, vec![CropRejectReason::AspectRatio]);

        let (mut det, kps) = good_det();
        det.bbox = (0.0, 0.0, 48.0, 100.0); // width exactly 48
        let v = validate_crop(&det, &kps);
        assert_eq!(v.failures, vec![CropRejectReason::TooSmall]);
    }

    #[test]
    fn crop_acceptance_is_a_pure_conjunction() {
        let (det, kps) = good_det();
        assert!(validate_crop(&det, &kps).accepted);

        // Flip each condition to failing with all others passing; the
        // verdict must flip, and fixing it must restore acceptance.
        let mut kps_bad = kps;
        kps_bad.head = false;
        assert_eq!(
            validate_crop(&det, &kps_bad).failures,
            vec![CropRejectReason::HeadOrUpperNotVisible]
        );

        let mut kps_bad = kps;
        kps_bad.knee = false; // hip also false
        assert_eq!(
            validate_crop(&det, &kps_bad).failures,
            vec![CropRejectReason::LowerBodyNotVisible]
        );
        // Hip alone satisfies the lower-body rule.
        kps_bad.hip = true;
        assert!(validate_crop(&det, &kps_bad).accepted);
    }

    #[test]
    fn crop_failures_listed_in_rule_order() {
        let det = DetectionRecord {
            video_key: "v".into(),
            frame_index: 0,
            bbox: (0.0, 0.0, 40.0, 40.0),
            confidence: 0.5,
        };
        let kps = KeypointSet::default();
        let v = validate_crop(&det, &kps);
        assert_eq!(
            v.failures,
            vec![
                CropRejectReason::HeadOrUpperNotVisible,
                CropRejectReason::LowerBodyNotVisible,
                CropRejectReason::AspectRatio,
                CropRejectReason::LowConfidence,
                CropRejectReason::TooSmall,
            ]
        );
    }

    #[test]
    fn frame_striding() {
        let all: Vec<i64> = (0..=250).collect();
        assert_eq!(select_frames(&all, 100), vec![0, 100, 200]);
        assert_eq!(select_frames(&all, 1).len(), 251);
        assert_eq!(select_frames(&[], 100), Vec::<i64>::new());
        // Relative to the first available frame.
        assert_eq!(select_frames(&[5, 60, 105, 205, 240], 100), vec![5, 105, 205]);
    }

    #[test]
    fn identity_count_rules() {
        assert_eq!(estimate_identity_count(&[vec![3, 5, 2]]), 5);
        assert_eq!(estimate_identity_count(&[vec![3, 5, 2], vec![7, 1]]), 12);
        assert_eq!(estimate_identity_count(&[vec![]]), 0);
        // Monotone: adding a video never decreases the total.
        let base = estimate_identity_count(&[vec![4, 2]]);
        assert!(estimate_identity_count(&[vec![4, 2], vec![9]]) >= base);
    }
}
