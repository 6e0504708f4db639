//! Deterministic, pre-unblinding-safe classification of intercurrent events
//! into three categories, plus per-arm summary tables.
//!
//! Classification looks only at the event record itself, never at arms or
//! outcome values, so it can run before treatment codes are unblinded.

use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, IceEvent, IceReason};
use crate::error::{Error, Result};

/// ICE category. Priority order for ties is Cat1 > Cat2 > Cat3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    /// ICEs potentially related to safety.
    Cat1Safety,
    /// ICEs potentially due to lack of efficacy.
    Cat2Efficacy,
    /// ICEs due to administrative reasons.
    Cat3Admin,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Cat1Safety, Category::Cat2Efficacy, Category::Cat3Admin];

    /// Higher value = higher priority when several candidate reasons coincide.
    pub fn priority(self) -> u8 {
        match self {
            Category::Cat1Safety => 3,
            Category::Cat2Efficacy => 2,
            Category::Cat3Admin => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::Cat1Safety => "Category 1",
            Category::Cat2Efficacy => "Category 2",
            Category::Cat3Admin => "Category 3",
        }
    }

    /// 0-based slot used by summary tables / strategy maps.
    pub fn slot(self) -> usize {
        match self {
            Category::Cat1Safety => 0,
            Category::Cat2Efficacy => 1,
            Category::Cat3Admin => 2,
        }
    }
}

impl PartialOrd for Category {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Category {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.priority().cmp(&other.priority())
    }
}

/// Map one ICE record to its category.
///
/// Category 1: discontinuation due to AE or death, or due to any reason other
/// than lack of efficacy / rescue medication when a persistent AE was reported
/// before discontinuation. Category 2: lack of efficacy or rescue medication,
/// or deteriorated efficacy without a persistent AE. Category 3: everything
/// else. Ties resolve by priority Cat1 > Cat2 > Cat3, which the clause order
/// realizes.
pub fn classify(event: &IceEvent) -> Category {
    let efficacy_reason = matches!(
        event.reason,
        IceReason::LackOfEfficacy | IceReason::RescueMedication
    );
    if matches!(event.reason, IceReason::Ae | IceReason::Death)
        || (!efficacy_reason && event.persistent_ae_before_dc)
    {
        return Category::Cat1Safety;
    }
    if efficacy_reason
        || (event.efficacy_deteriorated_before_dc && !event.persistent_ae_before_dc)
    {
        return Category::Cat2Efficacy;
    }
    Category::Cat3Admin
}

/// Return a copy of the dataset with `ice_category` filled for every subject
/// that has an ICE.
pub fn classify_dataset(dataset: &Dataset) -> Dataset {
    let mut out = dataset.clone();
    for s in &mut out.subjects {
        s.ice_category = s.ice.as_ref().map(classify);
    }
    out
}

/// Per-arm ICE counts in Table-2 layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IceSummaryRow {
    pub arm: Arm,
    pub n: usize,
    pub n_any_ice: usize,
    /// Counts indexed by `Category::slot()`.
    pub n_by_category: [usize; 3],
}

impl IceSummaryRow {
    pub fn pct_any(&self) -> f64 {
        100.0 * self.n_any_ice as f64 / self.n as f64
    }

    pub fn pct(&self, category: Category) -> f64 {
        100.0 * self.n_by_category[category.slot()] as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IceSummaryTable {
    pub rows: Vec<IceSummaryRow>,
}

/// Count subjects with any ICE and with each category, per arm.
///
/// Classification is taken from `ice_category` when present and derived from
/// the event otherwise.
pub fn summarize(dataset: &Dataset) -> Result<IceSummaryTable> {
    let arms = dataset.arms();
    let mut rows = Vec::with_capacity(arms.len());
    for arm in arms {
        let n = dataset.n_in_arm(arm);
        if n == 0 {
            return Err(Error::Validation(format!("arm {} is empty", arm)));
        }
        let mut row = IceSummaryRow {
            arm,
            n,
            n_any_ice: 0,
            n_by_category: [0; 3],
        };
        for s in dataset.subjects.iter().filter(|s| s.arm == arm) {
            if let Some(ice) = &s.ice {
                let category = s.ice_category.unwrap_or_else(|| classify(ice));
                row.n_any_ice += 1;
                row.n_by_category[category.slot()] += 1;
            }
        }
        rows.push(row);
    }
    Ok(IceSummaryTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SubjectRecord, VisitSchedule};

    fn event(reason: IceReason, persistent: bool, deteriorated: bool) -> IceEvent {
        IceEvent {
            visit_of_onset: 1,
            reason,
            persistent_ae_before_dc: persistent,
            efficacy_deteriorated_before_dc: deteriorated,
        }
    }

    #[test]
    fn ae_is_cat1() {
        assert_eq!(classify(&event(IceReason::Ae, false, false)), Category::Cat1Safety);
        assert_eq!(classify(&event(IceReason::Death, false, false)), Category::Cat1Safety);
    }

    #[test]
    fn rescue_medication_is_cat2() {
        assert_eq!(
            classify(&event(IceReason::RescueMedication, false, false)),
            Category::Cat2Efficacy
        );
        assert_eq!(
            classify(&event(IceReason::LackOfEfficacy, false, false)),
            Category::Cat2Efficacy
        );
    }

    #[test]
    fn plain_subject_decision_is_cat3() {
        assert_eq!(
            classify(&event(IceReason::SubjectDecision, false, false)),
            Category::Cat3Admin
        );
        assert_eq!(
            classify(&event(IceReason::LostToFollowup, false, false)),
            Category::Cat3Admin
        );
    }

    #[test]
    fn priority_cat1_over_cat2_on_ties() {
        // Both a persistent AE and deteriorated efficacy: safety wins.
        assert_eq!(
            classify(&event(IceReason::SubjectDecision, true, true)),
            Category::Cat1Safety
        );
        // Deteriorated efficacy alone: Cat2.
        assert_eq!(
            classify(&event(IceReason::SubjectDecision, false, true)),
            Category::Cat2Efficacy
        );
    }

    #[test]
    fn category_order_matches_priority() {
        assert!(Category::Cat1Safety > Category::Cat2Efficacy);
        assert!(Category::Cat2Efficacy > Category::Cat3Admin);
    }

    #[test]
    fn classification_total_over_all_inputs() {
        // Every reason × flag combination maps to exactly one category.
        let reasons = [
            IceReason::Ae,
            IceReason::LackOfEfficacy,
            IceReason::RescueMedication,
            IceReason::InvestigatorDecision,
            IceReason::SubjectDecision,
            IceReason::LostToFollowup,
            IceReason::ProtocolAdmin,
            IceReason::Death,
            IceReason::Other,
        ];
        for reason in reasons {
            for persistent in [false, true] {
                for deteriorated in [false, true] {
                    let _ = classify(&event(reason, persistent, deteriorated));
                }
            }
        }
    }

    fn dataset_with_ices() -> Dataset {
        let schedule = VisitSchedule::from_weeks(&[4.0, 8.0]).unwrap();
        let mut subjects = Vec::new();
        // Arm 0: 141 subjects, 9 of them Cat1 (matches a 6.4% row).
        for i in 0..141 {
            let ice = if i < 9 {
                Some(event(IceReason::Ae, false, false))
            } else {
                None
            };
            subjects.push(SubjectRecord {
                id: format!("A{i:04}"),
                arm: Arm(0),
                baseline: 8.0,
                outcomes: vec![Some(0.0), Some(0.0)],
                post_ice_flags: vec![ice.is_some(), ice.is_some()],
                ice,
                ice_category: None,
            });
        }
        for i in 0..50 {
            subjects.push(SubjectRecord {
                id: format!("B{i:04}"),
                arm: Arm(1),
                baseline: 8.0,
                outcomes: vec![Some(0.0), Some(0.0)],
                post_ice_flags: vec![false, false],
                ice: None,
                ice_category: None,
            });
        }
        Dataset {
            schedule,
            subjects,
            endpoint_name: "change".into(),
            smaller_is_better: true,
            values_are_change: true,
        }
    }

    #[test]
    fn summary_percentages_and_row_sums() {
        let ds = classify_dataset(&dataset_with_ices());
        let table = summarize(&ds).unwrap();
        let row0 = &table.rows[0];
        assert_eq!(row0.n, 141);
        assert_eq!(row0.n_by_category[0], 9);
        assert!((row0.pct(Category::Cat1Safety) - 6.4).abs() < 0.05);
        // count(any) = sum of category counts
        for row in &table.rows {
            assert_eq!(row.n_any_ice, row.n_by_category.iter().sum::<usize>());
        }
        // Arm with zero ICEs → all-zero row.
        let row1 = &table.rows[1];
        assert_eq!(row1.n_any_ice, 0);
        assert_eq!(row1.n_by_category, [0, 0, 0]);
    }

    #[test]
    fn classification_blind_to_arm_and_outcomes() {
        let ds = dataset_with_ices();
        let mut permuted = ds.clone();
        for s in &mut permuted.subjects {
            s.arm = Arm(1 - s.arm.0); // swap arms
            for v in s.outcomes.iter_mut() {
                *v = v.map(|x| -x + 3.0);
            }
        }
        let cats: Vec<_> = classify_dataset(&ds)
            .subjects
            .iter()
            .map(|s| s.ice_category)
            .collect();
        let cats_permuted: Vec<_> = classify_dataset(&permuted)
            .subjects
            .iter()
            .map(|s| s.ice_category)
            .collect();
        assert_eq!(cats, cats_permuted);
    }
}
