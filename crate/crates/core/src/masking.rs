//! Foreground-aware masking plans.
//!
//! A plan sends each patch to one of three states: DROPPED background
//! patches never enter the model, MASKED patches are reconstruction targets,
//! VISIBLE patches feed the encoder. The randomness only ever chooses which
//! patches land in each state; the per-state counts are closed-form in the
//! ratios and the foreground/background split.

use rand::seq::index::sample;

use crate::correspondence::PatchSemantics;
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchState {
    Visible,
    Masked,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskingCounts {
    pub n_total: usize,
    pub n_dropped: usize,
    pub n_masked_fg: usize,
    pub n_masked_bg: usize,
    pub n_visible: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingPlan {
    pub state: Vec<PatchState>,
    pub r_w: f64,
    pub r_f: f64,
    pub r_d: f64,
    pub counts: MaskingCounts,
}

impl MaskingPlan {
    pub fn n_masked(&self) -> usize {
        self.counts.n_masked_fg + self.counts.n_masked_bg
    }

    /// Patch indices that survive dropping (visible or masked), in patch
    /// order. This is the model's input ordering.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.indices_where(|s| s != PatchState::Dropped)
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        self.indices_where(|s| s == PatchState::Visible)
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.indices_where(|s| s == PatchState::Masked)
    }

    pub fn dropped_indices(&self) -> Vec<usize> {
        self.indices_where(|s| s == PatchState::Dropped)
    }

    fn indices_where(&self, pred: impl Fn(PatchState) -> bool) -> Vec<usize> {
        self.state
            .iter()
            .enumerate()
            .filter(|(_, &s)| pred(s))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Knobs beyond the three ratios. `ratio_over_predrop` switches the overall
/// masking ratio's denominator from patches-remaining-after-dropping (the
/// default) to the full pre-drop patch count, kept around for ablating that
/// reading.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskingOptions {
    pub ratio_over_predrop: bool,
}

#[inline]
fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

pub fn build_masking_plan(
    semantics: &PatchSemantics,
    r_w: f64,
    r_f: f64,
    r_d: f64,
    rng_seed: u64,
) -> Result<MaskingPlan> {
    build_masking_plan_with(semantics, r_w, r_f, r_d, rng_seed, MaskingOptions::default())
}

/// Two-stage plan construction. Stage one uniformly drops
/// `round(r_d * n_background)` background patches. Stage two masks
/// `round(r_f * n_foreground)` of the foreground patches and tops up with
/// background patches until the overall masked count reaches
/// `round(r_w * remaining)`, clamped to what the background supply allows.
pub fn build_masking_plan_with(
    semantics: &PatchSemantics,
    r_w: f64,
    r_f: f64,
    r_d: f64,
    rng_seed: u64,
    options: MaskingOptions,
) -> Result<MaskingPlan> {
    if !(0.0..=1.0).contains(&r_w) {
        return Err(Error::Precondition(format!("r_w must be in [0,1], got {r_w}")));
    }
    if !(0.0..1.0).contains(&r_d) {
        return Err(Error::Precondition(format!("r_d must be in [0,1), got {r_d}")));
    }
    if !(0.0..=1.0).contains(&r_f) || r_f < r_w {
        return Err(Error::Precondition(format!(
            "r_f must be in [r_w, 1], got r_f={r_f} r_w={r_w}"
        )));
    }
    let n_total = semantics.n_patches();
    if n_total == 0 {
        return Err(Error::Precondition("no patches to plan over".into()));
    }

    let fg: Vec<usize> = (0..n_total).filter(|&i| semantics.is_foreground[i]).collect();
    let bg: Vec<usize> = (0..n_total).filter(|&i| !semantics.is_foreground[i]).collect();

    let mut rng = rng_for(rng_seed, "masking.plan", &[]);
    let mut state = vec![PatchState::Visible; n_total];

    let n_dropped = round_half_away(r_d * bg.len() as f64).min(bg.len());
    let remaining = n_total - n_dropped;
    if remaining == 0 {
        return Err(Error::Degenerate(format!(
            "dropping removed all {n_total} patches (r_d={r_d})"
        )));
    }
    for idx in sample(&mut rng, bg.len(), n_dropped) {
        state[bg[idx]] = PatchState::Dropped;
    }
    let surviving_bg: Vec<usize> = bg
        .iter()
        .copied()
        .filter(|&i| state[i] == PatchState::Visible)
        .collect();

    let n_masked_fg = round_half_away(r_f * fg.len() as f64).min(fg.len());
    for idx in sample(&mut rng, fg.len(), n_masked_fg) {
        state[fg[idx]] = PatchState::Masked;
    }

    let ratio_base = if options.ratio_over_predrop {
        n_total
    } else {
        remaining
    };
    let target_total = round_half_away(r_w * ratio_base as f64);
    let n_masked_bg = target_total
        .saturating_sub(n_masked_fg)
        .min(surviving_bg.len());
    for idx in sample(&mut rng, surviving_bg.len(), n_masked_bg) {
        state[surviving_bg[idx]] = PatchState::Masked;
    }

    let n_visible = remaining - n_masked_fg - n_masked_bg;
    Ok(MaskingPlan {
        state,
        r_w,
        r_f,
        r_d,
        counts: MaskingCounts {
            n_total,
            n_dropped,
            n_masked_fg,
            n_masked_bg,
            n_visible,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn semantics(n_fg: usize, n_bg: usize) -> PatchSemantics {
        // Foreground patches first, then background.
        let mut is_foreground = vec![true; n_fg];
        is_foreground.extend(vec![false; n_bg]);
        let dominant_mask = is_foreground
            .iter()
            .map(|&f| if f { 0 } else { -1 })
            .collect();
        PatchSemantics {
            is_foreground,
            dominant_mask,
        }
    }

    fn check_counts_match_state(plan: &MaskingPlan, sem: &PatchSemantics) {
        let mut dropped = 0;
        let mut mfg = 0;
        let mut mbg = 0;
        let mut visible = 0;
        for (i, &s) in plan.state.iter().enumerate() {
            match s {
                PatchState::Dropped => {
                    assert!(!sem.is_foreground[i], "dropped a foreground patch");
                    dropped += 1;
                }
                PatchState::Masked => {
                    if sem.is_foreground[i] {
                        mfg += 1;
                    } else {
                        mbg += 1;
                    }
                }
                PatchState::Visible => visible += 1,
            }
        }
        assert_eq!(plan.counts.n_dropped, dropped);
        assert_eq!(plan.counts.n_masked_fg, mfg);
        assert_eq!(plan.counts.n_masked_bg, mbg);
        assert_eq!(plan.counts.n_visible, visible);
        assert_eq!(plan.counts.n_total, plan.state.len());
    }

    #[test]
    fn staged_rule_small_hand_example() {
        // 10 patches (4 fg, 6 bg), r_d=0.5, r_f=0.75, r_w=0.7:
        // 3 bg dropped, 7 remain, target = round(4.9) = 5,
        // masked fg = 3, masked bg = 2, visible = 2.
        let sem = semantics(4, 6);
        let plan = build_masking_plan(&sem, 0.7, 0.75, 0.5, 11).unwrap();
        assert_eq!(plan.counts.n_dropped, 3);
        assert_eq!(plan.counts.n_masked_fg, 3);
        assert_eq!(plan.counts.n_masked_bg, 2);
        assert_eq!(plan.counts.n_visible, 2);
        check_counts_match_state(&plan, &sem);
    }

    #[test]
    fn staged_rule_default_ratios_example() {
        let sem = semantics(30, 70);
        let plan = build_masking_plan(&sem, 0.7, 0.8, 0.4, 5).unwrap();
        assert_eq!(plan.counts.n_dropped, 28);
        assert_eq!(plan.counts.n_masked_fg, 24);
        assert_eq!(plan.counts.n_masked_bg, 26);
        assert_eq!(plan.counts.n_visible, 22);
        check_counts_match_state(&plan, &sem);
    }

    #[test]
    fn zero_ratios_leave_everything_visible() {
        let sem = semantics(3, 5);
        let plan = build_masking_plan(&sem, 0.0, 0.0, 0.0, 0).unwrap();
        assert!(plan.state.iter().all(|&s| s == PatchState::Visible));
        assert_eq!(plan.counts.n_visible, 8);
    }

    #[test]
    fn dropping_everything_is_degenerate() {
        // One background patch, r_d=0.5 rounds up to dropping it.
        let sem = semantics(0, 1);
        assert!(matches!(
            build_masking_plan(&sem, 0.5, 0.5, 0.5, 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn ratio_preconditions_enforced() {
        let sem = semantics(2, 2);
        assert!(build_masking_plan(&sem, 0.7, 0.5, 0.0, 0).is_err()); // r_f < r_w
        assert!(build_masking_plan(&sem, 0.7, 0.8, 1.0, 0).is_err()); // r_d = 1
        assert!(build_masking_plan(&sem, 1.5, 1.5, 0.0, 0).is_err());
    }

    #[test]
    fn predrop_denominator_option() {
        // Same split as the default-ratio example; with the pre-drop
        // denominator the target becomes round(0.7*100) = 70, capped by the
        // 42 surviving background patches: masked bg = min(70-24, 42) = 42.
        let sem = semantics(30, 70);
        let opts = MaskingOptions {
            ratio_over_predrop: true,
        };
        let plan = build_masking_plan_with(&sem, 0.7, 0.8, 0.4, 5, opts).unwrap();
        assert_eq!(plan.counts.n_dropped, 28);
        assert_eq!(plan.counts.n_masked_fg, 24);
        assert_eq!(plan.counts.n_masked_bg, 42);
        assert_eq!(plan.counts.n_visible, 6);
    }

    #[test]
    fn counts_are_seed_independent() {
        let sem = semantics(30, 70);
        let reference = build_masking_plan(&sem, 0.7, 0.8, 0.4, 0).unwrap().counts;
        let mut memberships = std::collections::HashSet::new();
        for seed in 0..1000u64 {
            let plan = build_masking_plan(&sem, 0.7, 0.8, 0.4, seed).unwrap();
            assert_eq!(plan.counts, reference, "seed {seed}");
            check_counts_match_state(&plan, &sem);
            memberships.insert(plan.state.clone());
        }
        // The randomness does vary membership.
        assert!(memberships.len() > 900);
    }

    #[test]
    fn same_seed_reproduces_plan() {
        let sem = semantics(12, 20);
        let a = build_masking_plan(&sem, 0.7, 0.8, 0.4, 77).unwrap();
        let b = build_masking_plan(&sem, 0.7, 0.8, 0.4, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_masking_is_uniform_chi_square() {
        // r_f = r_w, r_d = 0 on 20 patches (10 fg, 10 bg): every patch is
        // masked with probability 0.7 each seed. Pearson statistic over
        // per-patch mask counts for 10^4 seeds against the uniform
        // expectation, 19 degrees of freedom, critical value at p = 0.01.
        let sem = semantics(10, 10);
        let trials = 10_000u64;
        let mut counts = [0u64; 20];
        for seed in 0..trials {
            let plan = build_masking_plan(&sem, 0.7, 0.7, 0.0, seed).unwrap();
            assert_eq!(plan.n_masked(), 14);
            for (i, &s) in plan.state.iter().enumerate() {
                if s == PatchState::Masked {
                    counts[i] += 1;
                }
            }
        }
        let expected = trials as f64 * 0.7;
        let statistic: f64 = counts
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(
            statistic < 36.1909,
            "chi-square statistic {statistic} exceeds the df=19, p=0.01 critical value"
        );
    }
}
