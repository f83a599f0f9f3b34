mod common;

use candle_core::{DType, Tensor, Var};
use common::*;
use featrecon::losses::{
    alpha_schedule, distance_map, easy_mask, loss_global, loss_global_hm, loss_regional, HardMiningConfig,
};
use proptest::prelude::*;

fn tensors(maps: &[Map4]) -> Vec<Tensor> {
    maps.iter().map(|m| m.tensor(DType::F64)).collect()
}

#[test]
fn losses_match_nested_loop_oracles() {
    let mut r = rng(11);
    for _ in 0..50 {
        let (e, d) = random_pyramids(&mut r, 8, 6);
        let (te, td) = (tensors(&e), tensors(&d));
        assert!((scalar(&loss_regional(&te, &td).unwrap()) - oracle_regional(&e, &d)).abs() < 1e-9);
        assert!((scalar(&loss_global(&te, &td, false).unwrap()) - oracle_global(&e, &d)).abs() < 1e-9);
        let (hm, _) = loss_global_hm(&te, &td, 1.0, true).unwrap();
        assert!((scalar(&hm) - oracle_global(&e, &d)).abs() < 1e-9);
    }
}

#[test]
fn distance_map_matches_oracle_pointwise() {
    let mut r = rng(12);
    let e = Map4::random([2, 5, 3, 4], &mut r);
    let d = Map4::random([2, 5, 3, 4], &mut r);
    let got = distance_map(&e.tensor(DType::F64), &d.tensor(DType::F64))
        .unwrap()
        .to_vec3::<f64>()
        .unwrap();
    let want = oracle_distance_map(&e, &d);
    for (g, w) in got.iter().flatten().flatten().zip(want.iter().flatten().flatten()) {
        assert!((g - w).abs() < 1e-12);
    }
}

/// Loss as a function of the flattened decoder-side values of every stage.
fn eval_with(e: &[Map4], d: &[Map4], flat_d: &[f64], f: &dyn Fn(&[Map4], &[Map4]) -> f64) -> f64 {
    let mut offset = 0;
    let shifted: Vec<Map4> = d
        .iter()
        .map(|m| {
            let n = m.data.len();
            let out = Map4 {
                dims: m.dims,
                data: flat_d[offset..offset + n].to_vec(),
            };
            offset += n;
            out
        })
        .collect();
    f(e, &shifted)
}

fn analytic(loss: &Tensor, vars: &[Var]) -> Vec<f64> {
    let grads = loss.backward().unwrap();
    vars.iter()
        .flat_map(|v| match grads.get(v) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; v.elem_count()],
        })
        .collect()
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(13);
    for case in 0..8 {
        let (e, d) = random_pyramids(&mut r, 4, 3);
        let te = tensors(&e);
        let vars: Vec<Var> = d.iter().map(|m| Var::from_tensor(&m.tensor(DType::F64)).unwrap()).collect();
        let td: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let flat: Vec<f64> = d.iter().flat_map(|m| m.data.clone()).collect();

        let a = analytic(&loss_regional(&te, &td).unwrap(), &vars);
        let n = numeric_gradient(&flat, 1e-6, |x| eval_with(&e, &d, x, &oracle_regional));
        assert!(relative_error(&a, &n) < 1e-4, "regional case {case}");

        let a = analytic(&loss_global(&te, &td, true).unwrap(), &vars);
        let n = numeric_gradient(&flat, 1e-6, |x| eval_with(&e, &d, x, &oracle_global));
        assert!(relative_error(&a, &n) < 1e-4, "global case {case}");
    }
}

#[test]
fn global_gradient_reaches_target_unless_stopped() {
    let mut r = rng(14);
    let e = Map4::random([2, 3, 2, 2], &mut r);
    let d = Map4::random([2, 3, 2, 2], &mut r);
    let ve = Var::from_tensor(&e.tensor(DType::F64)).unwrap();
    let td = d.tensor(DType::F64);
    let live = loss_global(&[ve.as_tensor().clone()], &[td.clone()], false).unwrap();
    let g = live.backward().unwrap();
    let n = numeric_gradient(&e.data, 1e-6, |x| {
        oracle_global(&[Map4 { dims: e.dims, data: x.to_vec() }], &[d.clone()])
    });
    let a = g.get(&ve).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(relative_error(&a, &n) < 1e-4);

    let stopped = loss_global(&[ve.as_tensor().clone()], &[td], true).unwrap();
    assert!(stopped.backward().unwrap().get(&ve).is_none());
}

#[test]
fn hard_mining_zeroes_easy_gradients_only() {
    let mut r = rng(15);
    for case in 0..8 {
        let (e, d) = random_pyramids(&mut r, 4, 4);
        let te = tensors(&e);
        let vars: Vec<Var> = d.iter().map(|m| Var::from_tensor(&m.tensor(DType::F64)).unwrap()).collect();
        let td: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let (hm, _) = loss_global_hm(&te, &td, 0.0, true).unwrap();
        let a_hm = analytic(&hm, &vars);
        let a_global = analytic(&loss_global(&te, &td, true).unwrap(), &vars);
        let mut k = 0;
        for (em, dm) in e.iter().zip(&d) {
            let easy = oracle_easy(em, dm, 0.0);
            let [bb, cc, hh, ww] = em.dims;
            for b in 0..bb {
                for _c in 0..cc {
                    for h in 0..hh {
                        for w in 0..ww {
                            if easy[b][h][w] {
                                assert_eq!(a_hm[k], 0.0, "case {case}");
                            } else {
                                assert!((a_hm[k] - a_global[k]).abs() < 1e-12, "case {case}");
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn schedule_is_piecewise_linear() {
    let cfg = HardMiningConfig::default();
    let total = 1000;
    for it in 0..total {
        let want = if it < 100 { -3.0 + 4.0 * it as f64 / 100.0 } else { 1.0 };
        assert!((alpha_schedule(it, total, &cfg).unwrap() - want).abs() < 1e-12, "{it}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_scale_invariant(seed in 0u64..10_000, a in 0.1f64..10.0, b in 0.1f64..10.0) {
        let mut r = rng(seed);
        let (e, d) = random_pyramids(&mut r, 6, 5);
        let scaled = |m: &[Map4], s: f64| -> Vec<Tensor> {
            m.iter().map(|x| (x.tensor(DType::F64) * s).unwrap()).collect()
        };
        let (te, td) = (tensors(&e), tensors(&d));
        let base_r = scalar(&loss_regional(&te, &td).unwrap());
        let base_g = scalar(&loss_global(&te, &td, false).unwrap());
        let (se, sd) = (scaled(&e, a), scaled(&d, b));
        prop_assert!((scalar(&loss_regional(&se, &sd).unwrap()) - base_r).abs() < 1e-9);
        prop_assert!((scalar(&loss_global(&se, &sd, false).unwrap()) - base_g).abs() < 1e-9);
    }

    #[test]
    fn per_stage_losses_lie_in_zero_two(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (e, d) = random_pyramids(&mut r, 6, 5);
        let stages = e.len() as f64;
        let (te, td) = (tensors(&e), tensors(&d));
        for v in [scalar(&loss_regional(&te, &td).unwrap()), scalar(&loss_global(&te, &td, false).unwrap())] {
            prop_assert!((0.0..=2.0 * stages + 1e-12).contains(&v));
        }
        prop_assert!(scalar(&loss_global(&te, &te, false).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hard_mining_value_equals_global(seed in 0u64..10_000, alpha in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (e, d) = random_pyramids(&mut r, 6, 5);
        let (te, td) = (tensors(&e), tensors(&d));
        let (hm, stats) = loss_global_hm(&te, &td, alpha, true).unwrap();
        prop_assert!((scalar(&hm) - scalar(&loss_global(&te, &td, true).unwrap())).abs() < 1e-12);
        prop_assert_eq!(stats.len(), e.len());
    }

    #[test]
    fn discard_count_is_monotone_in_alpha(values in prop::collection::vec(0.0f32..2.0, 2..200), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (_, s_lo) = easy_mask(&values, lo).unwrap();
        let (_, s_hi) = easy_mask(&values, hi).unwrap();
        prop_assert!(s_lo.discarded <= s_hi.discarded);
    }
}
