mod common;

use adaptkit::ckpt::WriteOptions;
use adaptkit::evalmc::{evaluate, EvalOptions, PromptTemplate};
use adaptkit::merge::{linear_merge, merge_sweep, ratio_grid, sweep_csv, MergeSpec};
use adaptkit::model::TinyLM;
use adaptkit::synth::{mcq_items, mcq_suite};
use common::*;

fn pair() -> (TinyLM, TinyLM, adaptkit::tok::Tokenizer) {
    let (a, tok) = tuned_model(&mcq_items(&["order"], 64, 1), 40, 1e-2, 7);
    let (b, _) = tuned_model(&mcq_items(&["color"], 64, 2), 40, 1e-2, 7);
    (a, b, tok)
}

#[test]
fn endpoint_and_swap_identities() {
    let (a, b, _) = pair();
    let (pa, pb) = (a.params(), b.params());
    let one = linear_merge(pa, pb, &MergeSpec::new(1.0)).unwrap();
    assert_eq!(one.tensors, pa.tensors);
    let zero = linear_merge(pa, pb, &MergeSpec::new(0.0)).unwrap();
    assert_eq!(zero.tensors, pb.tensors);
    for w in [0.25, 0.5, 0.8, 0.35] {
        let ab = linear_merge(pa, pb, &MergeSpec::new(w)).unwrap();
        let ba = linear_merge(pb, pa, &MergeSpec::new(1.0 - w)).unwrap();
        for (name, t) in &ab.tensors {
            let (x, y) = (t.to_f64_vec(), ba.tensors[name].to_f64_vec());
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() <= 1e-6 * p.abs().max(1e-6), "{name} w={w}");
            }
        }
        if w == 0.25 || w == 0.5 {
            assert_eq!(ab.tensors, ba.tensors, "dyadic weight {w}");
        }
    }
}

#[test]
fn sweep_endpoints_equal_standalone_evals_and_rerun() {
    let (a, b, tok) = pair();
    let bench = mcq_suite(40, 3);
    let tmpl = PromptTemplate::default();
    let opts = EvalOptions::default();
    let ratios = ratio_grid(0.0, 1.0, 0.25);
    assert_eq!(ratios, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let rows = merge_sweep(a.params(), b.params(), a.config(), &ratios, &bench, &tmpl, &tok, &opts);
    let acc_a = evaluate(&a, &bench, &tmpl, &tok, &opts).unwrap().accuracy;
    let acc_b = evaluate(&b, &bench, &tmpl, &tok, &opts).unwrap().accuracy;
    assert_eq!(rows[0].accuracy, Some(acc_b));
    assert_eq!(rows[4].accuracy, Some(acc_a));
    for row in &rows {
        let m = linear_merge(a.params(), b.params(), &MergeSpec::new(row.ratio)).unwrap();
        let model = TinyLM::from_checkpoint(a.config().clone(), m).unwrap();
        let acc = evaluate(&model, &bench, &tmpl, &tok, &opts).unwrap().accuracy;
        assert_eq!(row.accuracy, Some(acc), "ratio {}", row.ratio);
    }
    let again = merge_sweep(a.params(), b.params(), a.config(), &ratios, &bench, &tmpl, &tok, &opts);
    assert_eq!(sweep_csv(&rows), sweep_csv(&again));
}

#[test]
fn merged_checkpoint_is_deterministic() {
    let (a, b, _) = pair();
    let spec = MergeSpec::new(0.8);
    let m1 = linear_merge(a.params(), b.params(), &spec).unwrap();
    let m2 = linear_merge(a.params(), b.params(), &spec).unwrap();
    assert_eq!(
        m1.to_bytes(WriteOptions::default()).unwrap(),
        m2.to_bytes(WriteOptions::default()).unwrap()
    );
    assert_eq!(m1.meta["merge.weight_a"], "0.8");
}
