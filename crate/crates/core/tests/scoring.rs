use std::collections::BTreeMap;

use togkit::dataset::{DatasetIndex, SplitSetting};
use togkit::metrics::{evaluate, ConstantScorer, OracleScorer, Scorer};
use togkit::pipeline::TrainSample;
use togkit::synthgen::{generate_index, SynthSpec};
use togkit::training::make_folds;

struct AntiOracle;

impl Scorer for AntiOracle {
    fn score(&mut self, s: &TrainSample) -> togkit::Result<f64> {
        Ok(1.0 - s.label as f64)
    }
}

fn index() -> DatasetIndex {
    let spec =
        SynthSpec { instances_per_class: 2, grasps_per_instance: 8, points_per_instance: 128, ..SynthSpec::default() };
    generate_index(&spec).unwrap().0
}

/// Labels of every (instance, task) pair in candidate order.
fn pair_labels(index: &DatasetIndex) -> BTreeMap<String, Vec<u8>> {
    let mut out: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for inst in &index.instances {
        for g in &inst.grasps {
            for (task, &l) in &g.labels {
                out.entry(format!("{}/{task}", inst.id)).or_default().push(l);
            }
        }
    }
    out
}

/// Precision at each positive when the list is read in the given order.
fn ap_in_order(labels: &[u8]) -> f64 {
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (rank, &l) in labels.iter().enumerate() {
        if l == 1 {
            hits += 1.0;
            sum += hits / (rank + 1) as f64;
        }
    }
    sum / hits
}

fn worst_order(labels: &[u8]) -> Vec<u8> {
    let mut v = labels.to_vec();
    v.sort();
    v
}

#[test]
fn reference_scorers_bracket_every_pair() {
    let idx = index();
    let labels = pair_labels(&idx);
    for setting in SplitSetting::ALL {
        let split = make_folds(&idx, setting, 2, 3).unwrap().remove(0);
        let best = evaluate(&mut OracleScorer, &idx, &split).unwrap();
        assert_eq!((best.instance_map, best.class_map, best.task_map), (1.0, 1.0, 1.0));

        let worst = evaluate(&mut AntiOracle, &idx, &split).unwrap();
        let flat = evaluate(&mut ConstantScorer(0.3), &idx, &split).unwrap();
        let flat_again = evaluate(&mut ConstantScorer(0.9), &idx, &split).unwrap();
        assert_eq!(flat.pair_ap, flat_again.pair_ap);
        assert!(!worst.pair_ap.is_empty());
        for (pair, ap) in &worst.pair_ap {
            let l = &labels[pair];
            assert!((ap - ap_in_order(&worst_order(l))).abs() < 1e-12, "{pair}");
            // Constant scores keep candidate order, which sits between the extremes.
            let c = flat.pair_ap[pair];
            assert!((c - ap_in_order(l)).abs() < 1e-12, "{pair}");
            assert!(*ap <= c + 1e-12 && c <= 1.0);
        }
        assert!(worst.instance_map < flat.instance_map);
    }
}
