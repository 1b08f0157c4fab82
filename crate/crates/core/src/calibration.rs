//! Three-frame calibration graph linking the AR device, the robot and the map.
//!
//! Edge `(a, b)` stores `T_a_b`, which maps b-coordinates into frame a. The
//! AR-to-map transform is the chain `T_AR_Map = T_AR_Robot * T_Robot_Map`.
//! All frames are right-handed; adapters converting device or map conventions
//! belong at the point where poses enter the graph.
//!
//! Edges carry a timestamp and queries reject edges older than a caller
//! supplied bound, which plays the role of the AR headset's spatial anchor.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FrameId {
    #[serde(rename = "AR")]
    Ar,
    Robot,
    Map,
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameId::Ar => "AR",
            FrameId::Robot => "Robot",
            FrameId::Map => "Map",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("edge {edge}: timestamp {t_ms} ms is older than the stored {last_ms} ms")]
    NonMonotonicTimestamp { edge: String, t_ms: u64, last_ms: u64 },
    #[error("missing edge {0}")]
    MissingEdge(String),
    #[error("edge {edge} is stale ({age_ms} ms old)")]
    StaleEdge { edge: String, age_ms: u64 },
    #[error("no cycle: missing edge {0}")]
    NoCycle(String),
    #[error("invalid edge {0}: a frame cannot link to itself")]
    SelfLoop(FrameId),
}

fn edge_name(a: FrameId, b: FrameId) -> String {
    format!("{a}-{b}")
}

/// Monotonic millisecond clock.
pub trait Clock: Send + Sync + fmt::Debug {
    fn now_ms(&self) -> u64;
}

/// Milliseconds since construction.
#[derive(Debug)]
pub struct MonotonicClock(Instant);

impl Default for MonotonicClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for MonotonicClock {
    fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

/// Clock advanced by hand, for tests and replayed feeds.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StampedPose {
    pub pose: Pose,
    pub t_ms: u64,
}

/// Cycle residual against identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub rotation_rad: f64,
    pub translation_m: f64,
}

#[derive(Debug, Clone)]
pub struct FrameGraph {
    /// Keyed by the unordered pair (smaller frame first); the value keeps the
    /// direction it was written in so forward queries return it unchanged.
    edges: BTreeMap<(FrameId, FrameId), (FrameId, StampedPose)>,
    clock: Arc<dyn Clock>,
}

impl Default for FrameGraph {
    fn default() -> Self {
        Self::new(Arc::new(MonotonicClock::default()))
    }
}

impl FrameGraph {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            edges: BTreeMap::new(),
            clock,
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Store `T_from_to` observed at `t_ms`.
    pub fn update_edge(
        &mut self,
        from: FrameId,
        to: FrameId,
        pose: Pose,
        t_ms: u64,
    ) -> Result<(), CalibrationError> {
        if from == to {
            return Err(CalibrationError::SelfLoop(from));
        }
        let key = if from < to { (from, to) } else { (to, from) };
        if let Some((_, prev)) = self.edges.get(&key) {
            if t_ms < prev.t_ms {
                return Err(CalibrationError::NonMonotonicTimestamp {
                    edge: edge_name(from, to),
                    t_ms,
                    last_ms: prev.t_ms,
                });
            }
        }
        self.edges.insert(key, (from, StampedPose { pose, t_ms }));
        Ok(())
    }

    /// `T_from_to`, inverting the stored edge when queried in reverse.
    pub fn edge(&self, from: FrameId, to: FrameId) -> Option<StampedPose> {
        if from == to {
            return Some(StampedPose {
                pose: Pose::identity(),
                t_ms: self.now_ms(),
            });
        }
        let key = if from < to { (from, to) } else { (to, from) };
        self.edges.get(&key).map(|(written_from, e)| {
            if *written_from == from {
                *e
            } else {
                StampedPose {
                    pose: e.pose.inverse(),
                    t_ms: e.t_ms,
                }
            }
        })
    }

    fn fresh_edge(&self, from: FrameId, to: FrameId, max_staleness_ms: u64) -> Result<StampedPose, CalibrationError> {
        let e = self
            .edge(from, to)
            .ok_or_else(|| CalibrationError::MissingEdge(edge_name(from, to)))?;
        let age_ms = self.now_ms().saturating_sub(e.t_ms);
        if age_ms > max_staleness_ms {
            return Err(CalibrationError::StaleEdge {
                edge: edge_name(from, to),
                age_ms,
            });
        }
        Ok(e)
    }

    /// `T_AR_Map = T_AR_Robot * T_Robot_Map`, stamped with the older input.
    pub fn ar_to_map(&self, max_staleness_ms: u64) -> Result<StampedPose, CalibrationError> {
        let ar_robot = self.fresh_edge(FrameId::Ar, FrameId::Robot, max_staleness_ms)?;
        let robot_map = self.fresh_edge(FrameId::Robot, FrameId::Map, max_staleness_ms)?;
        Ok(StampedPose {
            pose: ar_robot.pose.compose(&robot_map.pose),
            t_ms: ar_robot.t_ms.min(robot_map.t_ms),
        })
    }

    /// Residual of `inv(T_AR_Map) * T_AR_Robot * T_Robot_Map` against identity.
    /// Needs a direct AR-Map observation in addition to the chain.
    pub fn consistency_check(&self) -> Result<Residual, CalibrationError> {
        let get = |a, b| {
            self.edge(a, b)
                .ok_or_else(|| CalibrationError::NoCycle(edge_name(a, b)))
        };
        let ar_robot = get(FrameId::Ar, FrameId::Robot)?;
        let robot_map = get(FrameId::Robot, FrameId::Map)?;
        let ar_map = get(FrameId::Ar, FrameId::Map)?;
        let cycle = ar_map
            .pose
            .inverse()
            .compose(&ar_robot.pose.compose(&robot_map.pose));
        Ok(Residual {
            rotation_rad: cycle.rotation_angle_to(&Pose::identity()),
            translation_m: cycle.translation().norm(),
        })
    }
}

/// Single-writer, multi-reader wrapper. Readers take a coherent snapshot.
#[derive(Debug, Clone, Default)]
pub struct SharedFrameGraph {
    inner: Arc<RwLock<FrameGraph>>,
}

impl SharedFrameGraph {
    pub fn new(graph: FrameGraph) -> Self {
        Self {
            inner: Arc::new(RwLock::new(graph)),
        }
    }

    pub fn update_edge(&self, from: FrameId, to: FrameId, pose: Pose, t_ms: u64) -> Result<(), CalibrationError> {
        self.inner
            .write()
            .expect("frame graph poisoned")
            .update_edge(from, to, pose, t_ms)
    }

    pub fn snapshot(&self) -> FrameGraph {
        self.inner.read().expect("frame graph poisoned").clone()
    }
}

/// One timestamped edge observation, as read from an edges file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeObservation {
    pub from: FrameId,
    pub to: FrameId,
    pub pose: Pose,
    pub t_ms: u64,
}

/// Replayed edge feed plus query parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRequest {
    pub edges: Vec<EdgeObservation>,
    /// Query time; defaults to the newest edge timestamp.
    #[serde(default)]
    pub now_ms: Option<u64>,
    pub max_staleness_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ar_to_map: StampedPose,
    /// Present when the feed also contains a direct AR-Map observation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<Residual>,
}

/// Replay a feed through a graph and query it.
pub fn run_calibration(req: &CalibrationRequest) -> Result<CalibrationReport, CalibrationError> {
    let now = req
        .now_ms
        .unwrap_or_else(|| req.edges.iter().map(|e| e.t_ms).max().unwrap_or(0));
    let mut graph = FrameGraph::new(Arc::new(ManualClock::new(now)));
    for e in &req.edges {
        graph.update_edge(e.from, e.to, e.pose, e.t_ms)?;
    }
    let ar_to_map = graph.ar_to_map(req.max_staleness_ms)?;
    let residual = match graph.consistency_check() {
        Ok(r) => Some(r),
        Err(CalibrationError::NoCycle(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CalibrationReport { ar_to_map, residual })
}
