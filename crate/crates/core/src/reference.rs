//! Published test-set results used by `reproduce-table` for comparison.

use crate::ingest::SubsetId;
use crate::models::Architecture;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub subset: SubsetId,
    pub architecture: Architecture,
    pub rmse: f64,
    pub rmse_std: Option<f64>,
    pub score: f64,
    pub score_std: Option<f64>,
}

const fn r(
    subset: SubsetId,
    architecture: Architecture,
    rmse: f64,
    rmse_std: Option<f64>,
    score: f64,
    score_std: Option<f64>,
) -> Reference {
    Reference {
        subset,
        architecture,
        rmse,
        rmse_std,
        score,
        score_std,
    }
}

pub const REFERENCES: [Reference; 10] = [
    r(SubsetId::FD001, Architecture::Cnn, 14.38, None, 332.0, None),
    r(SubsetId::FD003, Architecture::Cnn, 15.12, None, 495.0, None),
    r(SubsetId::FD001, Architecture::Lstm, 14.88, None, 400.0, None),
    r(SubsetId::FD003, Architecture::Lstm, 14.75, None, 382.0, None),
    r(SubsetId::FD001, Architecture::Tfm, 11.73, Some(0.09), 215.0, Some(5.0)),
    r(SubsetId::FD003, Architecture::Tfm, 11.64, Some(0.03), 191.0, Some(9.0)),
    r(SubsetId::FD001, Architecture::Dtfm, 11.65, Some(0.07), 210.0, Some(6.0)),
    r(SubsetId::FD003, Architecture::Dtfm, 11.58, Some(0.03), 204.0, Some(6.0)),
    r(SubsetId::FD001, Architecture::Tfim, 11.59, Some(0.08), 208.0, Some(3.0)),
    r(SubsetId::FD003, Architecture::Tfim, 10.9, Some(0.06), 187.0, Some(8.0)),
];

pub fn lookup(subset: SubsetId, architecture: Architecture) -> Option<Reference> {
    REFERENCES
        .iter()
        .copied()
        .find(|r| r.subset == subset && r.architecture == architecture)
}
