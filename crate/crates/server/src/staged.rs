//! Two-stage execution for the box-then-keypoint pipeline.
//!
//! The box stage and the keypoint+PnP stage each own a worker thread and are
//! linked by a bounded channel, so the box stage of frame n+1 runs while the
//! keypoint stage of frame n is busy. Both stages are FIFO, so results come
//! back in submission order.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::JoinHandle;

use edgepose_core::detector::{
    betapose_keypoints, betapose_locate, Detector, Frame, LocateOutput, PipelineError,
    PipelineOptions, PipelineOutput,
};
use edgepose_core::geometry::CameraIntrinsics;
use edgepose_core::metrics::ObjectModel;
use tokio::sync::oneshot;

pub type StageReply = oneshot::Receiver<Result<PipelineOutput, PipelineError>>;

struct Job {
    frame: Frame,
    intrinsics: CameraIntrinsics,
    reply: oneshot::Sender<Result<PipelineOutput, PipelineError>>,
}

/// Returned when the first stage's hand-off queue is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageFull;

pub struct StagedPipeline {
    tx: Option<SyncSender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl StagedPipeline {
    pub fn spawn(
        bbox: Arc<dyn Detector>,
        kp: Arc<dyn Detector>,
        model: Arc<ObjectModel>,
        options: PipelineOptions,
        capacity: usize,
    ) -> Self {
        let capacity = capacity.max(1);
        let (tx, rx) = sync_channel::<Job>(capacity);
        let (mid_tx, mid_rx) = sync_channel::<(Job, LocateOutput)>(capacity);

        let opts = options.clone();
        let locate = std::thread::Builder::new()
            .name("stage-bbox".into())
            .spawn(move || box_stage(rx, mid_tx, bbox, opts))
            .expect("spawn box stage");
        let keypoints = std::thread::Builder::new()
            .name("stage-kpd".into())
            .spawn(move || keypoint_stage(mid_rx, kp, model, options))
            .expect("spawn keypoint stage");
        Self {
            tx: Some(tx),
            workers: vec![locate, keypoints],
        }
    }

    /// Queue a frame without blocking.
    pub fn submit(&self, frame: Frame, intrinsics: CameraIntrinsics) -> Result<StageReply, StageFull> {
        let (reply, rx) = oneshot::channel();
        let job = Job {
            frame,
            intrinsics,
            reply,
        };
        match self.tx.as_ref().expect("pipeline running").try_send(job) {
            Ok(()) => Ok(rx),
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => Err(StageFull),
        }
    }

    /// Submit and wait, for callers outside an async runtime.
    pub fn run_blocking(
        &self,
        frame: Frame,
        intrinsics: CameraIntrinsics,
    ) -> Result<Result<PipelineOutput, PipelineError>, StageFull> {
        let rx = self.submit(frame, intrinsics)?;
        rx.blocking_recv().map_err(|_| StageFull)
    }
}

impl Drop for StagedPipeline {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn box_stage(
    rx: Receiver<Job>,
    next: SyncSender<(Job, LocateOutput)>,
    detector: Arc<dyn Detector>,
    opts: PipelineOptions,
) {
    for job in rx {
        match betapose_locate(detector.as_ref(), &job.frame, &opts) {
            Ok(located) => {
                if next.send((job, located)).is_err() {
                    return;
                }
            }
            Err(e) => {
                let _ = job.reply.send(Err(e));
            }
        }
    }
}

fn keypoint_stage(
    rx: Receiver<(Job, LocateOutput)>,
    detector: Arc<dyn Detector>,
    model: Arc<ObjectModel>,
    opts: PipelineOptions,
) {
    for (job, located) in rx {
        let out = betapose_keypoints(
            detector.as_ref(),
            &job.frame,
            located,
            &model,
            &job.intrinsics,
            &opts,
        );
        let _ = job.reply.send(out);
    }
}
