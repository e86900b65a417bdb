mod common;

use std::collections::BTreeSet;

use genrank::disturb::{apply, disturb_candidates, subtree_at, DisturbanceKind};
use genrank::exprcore::{
    evaluate, parse_infix, serialize_infix, ExprTree, ExprValue, MappedProblem, NumberTable, Op, Operand,
};
use genrank::synthdata::{generate_dataset, load_from_reader, split_dataset, write_records, OpCountDistribution};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{agrees, brute_eval, leaves, Frac};

fn tree(max_depth: u32, num_count: usize) -> impl Strategy<Value = ExprTree> {
    let leaf = (0..num_count).prop_map(ExprTree::num);
    leaf.prop_recursive(max_depth, 64, 2, |inner| {
        (prop::sample::select(Op::ALL.to_vec()), inner.clone(), inner).prop_map(|(op, l, r)| ExprTree::node(op, l, r))
    })
}

fn problem(tree: ExprTree, numbers: &[i64]) -> MappedProblem {
    MappedProblem {
        id: "p".into(),
        tokens: Vec::new(),
        numbers: NumberTable::from_integers(numbers),
        ground_truth: tree,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn evaluate_agrees_with_brute_force(t in tree(4, 4), numbers in prop::collection::vec(-3i64..12, 4)) {
        let value = evaluate(&t, &NumberTable::from_integers(&numbers)).unwrap();
        prop_assert!(agrees(&value, &brute_eval(&t, &numbers)), "{t}: {value}");
    }

    #[test]
    fn serialize_then_parse_is_identity(t in tree(6, 5)) {
        prop_assert_eq!(parse_infix(&serialize_infix(&t)).unwrap(), t);
    }

    #[test]
    fn disturbance_leaf_deltas(t in tree(4, 3), seed in any::<u64>(), k in 0usize..4) {
        let kind = DisturbanceKind::ALL[k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Ok(out) = apply(kind, &t, 3, &mut rng) {
            let delta = leaves(&out.tree) as i64 - leaves(&t) as i64;
            let expected = match kind {
                DisturbanceKind::Expand => 1,
                DisturbanceKind::Delete => -1,
                DisturbanceKind::Edit | DisturbanceKind::Swap => 0,
            };
            prop_assert_eq!(delta, expected);
            prop_assert_eq!(parse_infix(&serialize_infix(&out.tree)).unwrap(), out.tree.clone());
            if kind == DisturbanceKind::Swap {
                let site = subtree_at(&t, &out.site).unwrap();
                if let ExprTree::Node { op: Op::Add | Op::Mul, .. } = site {
                    let numbers = NumberTable::from_integers(&[7, 3, 5]);
                    let (a, b) = (evaluate(&t, &numbers).unwrap(), evaluate(&out.tree, &numbers).unwrap());
                    prop_assert!(a == b || a == ExprValue::Undefined);
                }
            }
        }
    }

    #[test]
    fn disturbance_labels_match_oracle(t in tree(4, 3), seed in any::<u64>(), numbers in prop::collection::vec(1i64..20, 3)) {
        let p = problem(t.clone(), &numbers);
        let Some(truth) = brute_eval(&t, &numbers) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::from([t.to_infix()]);
        for c in disturb_candidates(&p, 10, &mut rng) {
            let correct = brute_eval(&c.expr, &numbers).is_some_and(|v| v.same(&truth));
            prop_assert_eq!(c.label.is_positive(), correct, "{}", c.expr);
            prop_assert!(seen.insert(c.expr.to_infix()), "duplicate {}", c.expr);
        }
    }

    #[test]
    fn folds_partition_exactly(count in 0usize..200, folds in 2usize..8, seed in any::<u64>()) {
        let assignment = split_dataset(count, folds, seed);
        prop_assert_eq!(assignment.len(), count);
        let sizes: Vec<usize> = (0..folds).map(|f| assignment.iter().filter(|&&a| a == f).count()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(split_dataset(count, folds, seed), assignment);
    }
}

#[test]
fn zero_divisor_is_undefined_in_both() {
    let t = ExprTree::node(Op::Div, ExprTree::num(0), ExprTree::node(Op::Sub, ExprTree::num(1), ExprTree::num(1)));
    assert_eq!(evaluate(&t, &NumberTable::from_integers(&[4, 2])).unwrap(), ExprValue::Undefined);
    assert!(brute_eval(&t, &[4, 2]).is_none());
    let constant = ExprTree::Leaf(Operand::Const(genrank::exprcore::Constant::from_integer(3)));
    assert!(brute_eval(&constant, &[]).unwrap().same(&Frac::int(3)));
}

#[test]
fn op_count_histogram_matches_distribution() {
    let weights = [0.1, 0.3, 0.25, 0.2, 0.15];
    let dist = OpCountDistribution::new(weights).unwrap();
    let n = 10_000;
    let mut counts = [0usize; 5];
    for record in generate_dataset(n, &dist, 11) {
        let (p, _) = genrank::synthdata::map_record(&record, 0).unwrap();
        counts[p.ground_truth.op_count() - 1] += 1;
    }
    for (c, w) in counts.iter().zip(weights) {
        let share = *c as f64 / n as f64;
        assert!((share - w).abs() <= 0.02, "share {share} vs {w}");
    }
}

#[test]
fn generated_data_loads_back_unchanged() {
    let records = generate_dataset(300, &OpCountDistribution::default(), 5);
    let mut buf = Vec::new();
    write_records(&records, &mut buf).unwrap();
    let loaded = load_from_reader(buf.as_slice()).unwrap();
    assert!(loaded.warnings.is_empty());
    assert_eq!(loaded.problems.len(), records.len());
    for (record, p) in records.iter().zip(&loaded.problems) {
        let value = p.ground_truth_value().unwrap();
        assert_ne!(value, ExprValue::Undefined);
        if let Some(answer) = &record.answer {
            assert_eq!(&value.to_string(), answer);
        }
        let numbers: Vec<String> = p.numbers.values().iter().map(|v| v.to_string()).collect();
        let tokens = p.ground_truth.to_tokens();
        let rendered = tokens.iter().map(|t| match genrank::exprcore::num_token_index(t) {
            Some(i) => numbers[i].clone(),
            None => t.clone(),
        });
        assert_eq!(rendered.collect::<Vec<_>>().join(" "), record.equation);
    }
}
