use std::collections::BTreeSet;

use lada::dataset::*;

#[test]
fn split_oracle() {
    let s = split(9, 1, &[]).unwrap();
    assert_eq!(s.train, vec![0, 1, 3, 4, 6, 7]);
    assert_eq!(s.val, vec![2, 8]);
    assert_eq!(s.test, vec![5]);
}

#[test]
fn observations_go_to_test() {
    let s = split(9, 1, &[5]).unwrap();
    assert!(s.test.contains(&5));
    let s = split(12, 1, &[0, 3]).unwrap();
    assert!(s.test.contains(&0) && s.test.contains(&3));
    assert!(!s.train.contains(&0));
}

#[test]
fn split_partitions_for_any_jump() {
    for total in 4..60 {
        for jump in 1..5 {
            let obs: Vec<usize> = (0..total).step_by(7).collect();
            let Ok(s) = split(total, jump, &obs) else { continue };
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..total).collect::<Vec<_>>());
            let mut shuffled = obs.clone();
            shuffled.reverse();
            assert_eq!(split(total, jump, &shuffled).unwrap(), s);
        }
    }
    assert!(split(3, 1, &[]).is_err());
    assert!(split(9, 0, &[]).is_err());
}

#[test]
fn window_oracles() {
    let w = window(&[0, 1, 2, 3, 4], 3).unwrap();
    assert_eq!(w.len(), 2);
    assert_eq!((w[0].inputs.clone(), w[0].target), (vec![0, 1, 2], 3));
    assert_eq!((w[1].inputs.clone(), w[1].target), (vec![1, 2, 3], 4));
    assert_eq!(window(&[0, 1, 2, 3], 3).unwrap().len(), 1);
    let markov = window(&[0, 1, 2, 3], 1).unwrap();
    assert_eq!(markov.iter().map(|s| (s.inputs[0], s.target)).collect::<Vec<_>>(), vec![(0, 1), (1, 2), (2, 3)]);
    assert!(window(&[0, 1, 2], 3).is_err());
}

#[test]
fn windows_stay_inside_runs() {
    let series: Vec<usize> = (0..20).collect();
    let train = [0, 1, 2, 3, 5, 6, 7, 8, 9, 12];
    for s in windows_within_runs(&series, &train, 3) {
        assert!(s.inputs.windows(2).all(|p| p[1] == p[0] + 1));
        assert_eq!(s.target, s.inputs[2] + 1);
        assert!(train.contains(&s.target));
    }
    assert_eq!(windows_within_runs(&series, &train, 3).len(), 1 + 2);
}

#[test]
fn kfold_partitions() {
    let idx: Vec<usize> = (0..10).collect();
    let folds = kfold(&idx, 5, 3).unwrap();
    assert_eq!(folds.len(), 5);
    let mut seen = BTreeSet::new();
    for (train, hold) in &folds {
        assert_eq!(hold.len(), 2);
        assert_eq!(train.len(), 8);
        for h in hold {
            assert!(seen.insert(*h));
            assert!(!train.contains(h));
        }
    }
    assert_eq!(seen.len(), 10);
    assert_eq!(kfold(&idx, 5, 3).unwrap(), folds);
    assert_ne!(kfold(&idx, 5, 4).unwrap(), folds);
    let sizes: Vec<usize> = kfold(&[0, 1, 2, 3, 4], 2, 0).unwrap().iter().map(|f| f.1.len()).collect();
    assert_eq!(sizes, vec![3, 2]);
    assert!(kfold(&[0, 1], 3, 0).is_err());
    assert!(kfold(&[0, 1], 1, 0).is_err());
}
