//! Subject-consent gate for 3D-scanned human content.
//!
//! Documents tagged as scans must carry consent metadata to be publicly
//! visible. The gate runs at search time; blocked documents stay stored and
//! editable so the creator can add consent later.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ThingDocument;

pub const DEFAULT_SCAN_MARKERS: [&str; 4] = ["3d_scan", "3d_scanning", "body_scan", "bodyscan"];

/// Shown to creators when a scan-tagged upload arrives without consent.
pub const CONSENT_ADVISORY: &str = "This design is tagged as a 3D scan. If it reproduces a real person, \
confirm that the person agreed to have the scan shared by setting consent.subject_consent; \
without that confirmation the design is hidden from public search.";

pub const CONSENT_MISSING_EXPLANATION: &str = "Hidden from public search: this design is tagged as a 3D scan \
and has no record that the scanned subject agreed to its publication. The creator can add consent metadata \
to make it visible again.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConsentError {
    #[error("subject_consent is true but attested_by is missing")]
    MissingAttester,
    #[error("subject_consent is true but attested_at is missing")]
    MissingAttestationTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentMetadata {
    pub subject_consent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statement: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attested_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attested_at: Option<DateTime<Utc>>,
}

impl ConsentMetadata {
    pub fn validate(&self) -> Result<(), ConsentError> {
        if self.subject_consent {
            if self.attested_by.as_deref().is_none_or(|s| s.trim().is_empty()) {
                return Err(ConsentError::MissingAttester);
            }
            if self.attested_at.is_none() {
                return Err(ConsentError::MissingAttestationTime);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReasonCode {
    ConsentMissing,
    SensitiveAboveThreshold,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GateStatus {
    NotApplicable,
    Exempt,
    Blocked { reason: ReasonCode, explanation: String },
}

impl GateStatus {
    pub fn is_blocked(&self) -> bool {
        matches!(self, GateStatus::Blocked { .. })
    }
}

/// Marker tags that trigger the consent requirement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsentPolicy {
    pub scan_markers: BTreeSet<String>,
}

impl Default for ConsentPolicy {
    fn default() -> Self {
        Self { scan_markers: DEFAULT_SCAN_MARKERS.iter().map(|s| s.to_string()).collect() }
    }
}

impl ConsentPolicy {
    pub fn requires_consent(&self, doc: &ThingDocument) -> bool {
        doc.tags.iter().any(|t| self.scan_markers.contains(t))
    }

    pub fn evaluate_gate(&self, doc: &ThingDocument) -> GateStatus {
        if !self.requires_consent(doc) {
            return GateStatus::NotApplicable;
        }
        match &doc.consent {
            Some(c) if c.subject_consent => GateStatus::Exempt,
            _ => GateStatus::Blocked {
                reason: ReasonCode::ConsentMissing,
                explanation: CONSENT_MISSING_EXPLANATION.to_owned(),
            },
        }
    }

    /// Advisory text for an ingest response, if the document would be blocked.
    pub fn ingest_advisory(&self, doc: &ThingDocument) -> Option<&'static str> {
        self.evaluate_gate(doc).is_blocked().then_some(CONSENT_ADVISORY)
    }
}
