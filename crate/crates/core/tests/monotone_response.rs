use clcp::simulate::{run_sweep, GridTaskOptions, Method, SegmentationTask, SweepEntry, TrialRecord};

const TRIALS: usize = 10_000;
const LEVELS: [f64; 4] = [0.05, 0.1, 0.15, 0.2];

fn sweep(alphas: &[f64], deltas: &[f64]) -> Vec<SweepEntry> {
    let scenario = SegmentationTask::build(4, &GridTaskOptions::segmentation())
        .unwrap()
        .scenario()
        .unwrap();
    run_sweep(&scenario, Method::Clcp, alphas, deltas, 150, TRIALS, 5).unwrap()
}

fn sorted_losses(records: &[TrialRecord]) -> Vec<f64> {
    let mut v: Vec<f64> = records.iter().filter_map(|r| r.loss).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn assert_paired_order(smaller: &[TrialRecord], larger: &[TrialRecord]) {
    assert_eq!(smaller.len(), larger.len());
    for (s, l) in smaller.iter().zip(larger) {
        let (Some(ls), Some(ll)) = (s.lambda_star, l.lambda_star) else {
            continue;
        };
        assert!(ll <= ls, "trial {}: λ* {ll} > {ls}", s.trial);
        assert!(l.loss.unwrap() >= s.loss.unwrap(), "trial {}", s.trial);
        assert!(l.efficiency.unwrap() <= s.efficiency.unwrap(), "trial {}", s.trial);
    }
}

#[test]
fn larger_alpha_shrinks_sets_and_raises_losses() {
    let entries = sweep(&LEVELS, &[0.1]);
    for pair in entries.windows(2) {
        assert_paired_order(&pair[0].records, &pair[1].records);
        // first-order dominance: every order statistic of the loss grows
        let (a, b) = (sorted_losses(&pair[0].records), sorted_losses(&pair[1].records));
        assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
        assert!(pair[1].report.mean_loss >= pair[0].report.mean_loss);
    }
}

#[test]
fn larger_delta_shrinks_sets() {
    let entries = sweep(&[0.1], &LEVELS);
    for pair in entries.windows(2) {
        assert_paired_order(&pair[0].records, &pair[1].records);
        assert!(pair[1].report.efficiency <= pair[0].report.efficiency);
    }
}
