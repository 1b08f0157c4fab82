//! Wrapper detector used to simulate slow or flaky backends.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::{Crop, DetectError, DetectionResult, Detector, Frame};

/// Delegates to an inner detector after a fixed delay, optionally failing on
/// chosen frames, overriding the box confidence or hiding keypoints.
pub struct LatencyStub {
    inner: Arc<dyn Detector>,
    delay: Duration,
    fail_frames: BTreeSet<String>,
    confidence_override: Option<f64>,
    keep_only: Option<BTreeSet<String>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl LatencyStub {
    pub fn new(inner: Arc<dyn Detector>) -> Self {
        Self {
            inner,
            delay: Duration::ZERO,
            fail_frames: BTreeSet::new(),
            confidence_override: None,
            keep_only: None,
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn failing_on(mut self, frames: impl IntoIterator<Item = String>) -> Self {
        self.fail_frames.extend(frames);
        self
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence_override = Some(confidence);
        self
    }

    /// Report only the named keypoints; the rest go to `dropped`.
    pub fn keep_only(mut self, names: impl IntoIterator<Item = String>) -> Self {
        self.keep_only = Some(names.into_iter().collect());
        self
    }

    /// Highest number of overlapping calls observed.
    pub fn max_concurrency(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn run(
        &self,
        frame: &Frame,
        f: impl FnOnce() -> Result<DetectionResult, DetectError>,
    ) -> Result<DetectionResult, DetectError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let out = if self.fail_frames.contains(&frame.image_id) {
            Err(DetectError::Failed(format!("injected failure on `{}`", frame.image_id)))
        } else {
            f().map(|mut det| {
                if let Some(c) = self.confidence_override {
                    det.confidence = c;
                }
                if let Some(keep) = &self.keep_only {
                    let removed: Vec<String> = det
                        .keypoints_2d
                        .keys()
                        .filter(|k| !keep.contains(*k))
                        .cloned()
                        .collect();
                    for k in removed {
                        det.keypoints_2d.remove(&k);
                        det.dropped.push(k);
                    }
                    det.dropped.sort();
                }
                det
            })
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

impl Detector for LatencyStub {
    fn name(&self) -> &str {
        "latency-stub"
    }

    fn detect(&self, frame: &Frame) -> Result<DetectionResult, DetectError> {
        self.run(frame, || self.inner.detect(frame))
    }

    fn detect_in_crop(&self, frame: &Frame, crop: &Crop) -> Result<DetectionResult, DetectError> {
        self.run(frame, || self.inner.detect_in_crop(frame, crop))
    }
}
