use lesionattn::attention::{attention_loss, soften_mask, AttentionMap, LesionMask};
use lesionattn::fairmetrics::{auroc, fairness_report, Group, GroupedPredictions};
use lesionattn::pareto::{dominates, pareto_frontier, read_candidates_csv, select_final, write_candidates_csv, ModelCandidate, SelectionPolicy};
use proptest::prelude::*;

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..10, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 9.0).collect()),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn grouped() -> impl Strategy<Value = GroupedPredictions<f64>> {
    (8usize..60)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..1.0, n),
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter_map("every group needs both labels", |(s, l, g)| {
            let groups: Vec<Group> = g.iter().map(|&m| if m { Group::Male } else { Group::Female }).collect();
            let full = [Group::Male, Group::Female]
                .iter()
                .all(|&gr| [true, false].iter().all(|&lab| groups.iter().zip(&l).any(|(&x, &y)| x == gr && y == lab)));
            full.then(|| GroupedPredictions::new(s, l, groups).unwrap())
        })
}

fn candidates() -> impl Strategy<Value = Vec<ModelCandidate<f64>>> {
    prop::collection::vec((0u8..6, 0u8..6), 1..15).prop_map(|pts| {
        pts.into_iter()
            .enumerate()
            .map(|(i, (p, f))| ModelCandidate::new(format!("m{i:02}"), p as f64 / 5.0, f as f64 / 5.0).unwrap())
            .collect()
    })
}

proptest! {
    #[test]
    fn auroc_complements_under_label_flip((scores, labels) in scored_labels()) {
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auroc(&scores, &labels).unwrap();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let b = auroc(&scores, &flipped).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms((scores, labels) in scored_labels()) {
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() / 10.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&squashed, &labels).unwrap());
    }

    #[test]
    fn eo_is_bounded_and_symmetric(p in grouped(), t in 0.1f64..0.9) {
        let r = fairness_report(&p, t).unwrap();
        let s = fairness_report(&p.relabeled(), t).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.eo));
        prop_assert_eq!(r.eo, s.eo);
        prop_assert_eq!(r.eo_tp, -s.eo_tp);
        prop_assert_eq!(r.auroc, s.auroc);
    }

    #[test]
    fn frontier_is_exactly_the_undominated_set(c in candidates()) {
        let front = pareto_frontier(&c).unwrap();
        for x in &c {
            let dominated = c.iter().any(|y| dominates(y, x));
            prop_assert_eq!(front.contains_id(&x.id), !dominated);
        }
        for policy in [SelectionPolicy::Knee, SelectionPolicy::MaxPred, SelectionPolicy::MaxFair] {
            let pick = select_final(&front, policy).unwrap();
            prop_assert!(front.contains_id(&pick.id));
        }
    }

    #[test]
    fn candidates_csv_round_trips(c in candidates()) {
        let front = pareto_frontier(&c).unwrap();
        let mut buf = Vec::new();
        write_candidates_csv(&mut buf, &c, Some(&front)).unwrap();
        let back: Vec<ModelCandidate<f64>> = read_candidates_csv(&buf[..]).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn attention_loss_vanishes_on_the_soft_mask(
        bits in prop::collection::vec(any::<bool>(), 1..64),
        rho in 0.05f64..1.0,
    ) {
        let n = bits.len();
        let mask = LesionMask::new(1, n, bits).unwrap();
        let soft = soften_mask::<f64>(&mask, rho).unwrap();
        prop_assert!(soft.data().iter().all(|&v| v >= rho && v <= 1.0));
        let aligned = AttentionMap::from_weights(1, n, soft.data()).unwrap();
        prop_assert!(attention_loss(&soft, &aligned).unwrap().abs() < 1e-12);
        let uniform = AttentionMap::<f64>::uniform(1, n);
        let l = attention_loss(&soft, &uniform).unwrap();
        prop_assert!(l > -1e-12 && l <= 1.0);
    }
}
