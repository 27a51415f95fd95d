//! Crash-point injection for the stage/persist/commit pipeline.
//!
//! Every step that can be interrupted by a process death calls
//! [`FaultInjector::check`] with its [`CrashPoint`]. An armed injector fails
//! the n-th hit of one point with [`Error::InjectedCrash`]; the caller must
//! then stop without cleanup, as a killed process would.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrashPoint {
    /// Slot claimed (WRITING), nothing copied.
    StageAfterClaim,
    /// Half the payload copied into the slot.
    StageMidCopy,
    /// Payload and checksum written, state not yet VALID.
    StageBeforeSeal,
    /// Temporary iteration directory created.
    PersistAfterTempDir,
    /// tensors.bin written.
    PersistAfterTensors,
    /// manifest.bin written.
    PersistAfterManifest,
    /// type.txt written.
    PersistAfterTypeFile,
    /// Directory renamed into place, tracker untouched.
    PersistAfterDirRename,
    /// Temporary tracker written, not renamed.
    TrackerAfterTempWrite,
    /// Tracker renamed; slot still VALID.
    TrackerAfterRename,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 10] = [
        CrashPoint::StageAfterClaim,
        CrashPoint::StageMidCopy,
        CrashPoint::StageBeforeSeal,
        CrashPoint::PersistAfterTempDir,
        CrashPoint::PersistAfterTensors,
        CrashPoint::PersistAfterManifest,
        CrashPoint::PersistAfterTypeFile,
        CrashPoint::PersistAfterDirRename,
        CrashPoint::TrackerAfterTempWrite,
        CrashPoint::TrackerAfterRename,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CrashPoint::StageAfterClaim => "stage-after-claim",
            CrashPoint::StageMidCopy => "stage-mid-copy",
            CrashPoint::StageBeforeSeal => "stage-before-seal",
            CrashPoint::PersistAfterTempDir => "persist-after-temp-dir",
            CrashPoint::PersistAfterTensors => "persist-after-tensors",
            CrashPoint::PersistAfterManifest => "persist-after-manifest",
            CrashPoint::PersistAfterTypeFile => "persist-after-type-file",
            CrashPoint::PersistAfterDirRename => "persist-after-dir-rename",
            CrashPoint::TrackerAfterTempWrite => "tracker-after-temp-write",
            CrashPoint::TrackerAfterRename => "tracker-after-rename",
        }
    }
}

impl std::fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Default)]
struct State {
    armed: Option<(CrashPoint, usize)>,
    hits: HashMap<CrashPoint, usize>,
    fired: Option<CrashPoint>,
}

/// Shared, cloneable injector. The default instance only counts hits.
#[derive(Debug, Clone, Default)]
pub struct FaultInjector {
    state: Arc<Mutex<State>>,
}

impl FaultInjector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails the `nth` (1-based) hit of `point`.
    pub fn armed(point: CrashPoint, nth: usize) -> Self {
        let inj = Self::default();
        inj.state.lock().unwrap().armed = Some((point, nth));
        inj
    }

    pub fn check(&self, point: CrashPoint) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        let hits = st.hits.entry(point).or_insert(0);
        *hits += 1;
        let hit = *hits;
        if st.armed == Some((point, hit)) {
            st.fired = Some(point);
            return Err(Error::InjectedCrash(point));
        }
        Ok(())
    }

    pub fn hits(&self, point: CrashPoint) -> usize {
        self.state
            .lock()
            .unwrap()
            .hits
            .get(&point)
            .copied()
            .unwrap_or(0)
    }

    pub fn fired(&self) -> Option<CrashPoint> {
        self.state.lock().unwrap().fired
    }
}
