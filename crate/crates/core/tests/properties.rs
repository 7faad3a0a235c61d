use flashwin::{
    finite_diff_grad, flash_backward, flash_forward, matmul, max_abs_diff, naive_backward,
    naive_forward, peak_sram_backward, peak_sram_forward, softmax_backward, softmax_rows,
    window_partition, window_reverse, AttnParams, DenseTensor, Rng, ScratchpadArena, TileConfig,
    WindowConfig,
};
use proptest::prelude::*;

fn rand(rng: &mut Rng, shape: &[usize]) -> DenseTensor {
    DenseTensor::fill_uniform(rng, shape, -1.0, 1.0).unwrap()
}

/// Every `r` for which the chunk layout of `c` columns is valid.
fn valid_chunk_counts(c: usize) -> Vec<usize> {
    (1..=c)
        .filter(|&r| TileConfig::new(r, 1.0, 8).unwrap().chunk_width(c).is_ok())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matmul_right_identity_exact(rows in 1usize..8, cols in 1usize..8, seed: u64) {
        let mut rng = Rng::new(seed);
        let a = DenseTensor::from_fn(&[rows, cols], |_| (rng.next_u64() % 21) as f64 - 10.0).unwrap();
        prop_assert_eq!(matmul(&a, &DenseTensor::identity(cols).unwrap()).unwrap(), a);
    }

    #[test]
    fn fill_uniform_equal_seeds_equal_tensors(seed: u64, n in 1usize..64) {
        let a = DenseTensor::fill_uniform(&mut Rng::new(seed), &[n], -3.0, 5.0).unwrap();
        let b = DenseTensor::fill_uniform(&mut Rng::new(seed), &[n], -3.0, 5.0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn max_abs_diff_symmetric_and_triangle(seed: u64, n in 1usize..32) {
        let mut rng = Rng::new(seed);
        let (a, b, c) = (rand(&mut rng, &[n]), rand(&mut rng, &[n]), rand(&mut rng, &[n]));
        let ab = max_abs_diff(&a, &b).unwrap();
        prop_assert_eq!(ab, max_abs_diff(&b, &a).unwrap());
        let ac = max_abs_diff(&a, &c).unwrap();
        let bc = max_abs_diff(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc);
    }

    #[test]
    fn window_round_trips(wr in 1usize..5, wc in 1usize..5, k in 1usize..5, c in 1usize..4, seed: u64) {
        let cfg = WindowConfig::new(wr * k, wc * k, c, k).unwrap();
        let mut rng = Rng::new(seed);
        let x = rand(&mut rng, &[wr * k, wc * k, c]);
        let y = window_partition(&x, &cfg).unwrap();
        prop_assert_eq!(y.shape(), &[wr * wc, k * k, c][..]);
        prop_assert_eq!(&window_reverse(&y, &cfg).unwrap(), &x);

        let z = rand(&mut rng, &[wr * wc, k * k, c]);
        prop_assert_eq!(&window_partition(&window_reverse(&z, &cfg).unwrap(), &cfg).unwrap(), &z);

        let mut before = x.data().to_vec();
        let mut after = y.data().to_vec();
        before.sort_by(f64::total_cmp);
        after.sort_by(f64::total_cmp);
        prop_assert_eq!(before, after);
    }

    #[test]
    fn softmax_row_stochastic_and_shift_invariant(rows in 1usize..10, cols in 1usize..10, seed: u64) {
        let mut rng = Rng::new(seed);
        let s = DenseTensor::fill_uniform(&mut rng, &[rows, cols], -8.0, 8.0).unwrap();
        let p = softmax_rows(&s).unwrap();
        for row in p.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let shift = rng.uniform(-20.0, 20.0);
        let shifted = softmax_rows(&s.map(|x| x + shift)).unwrap();
        prop_assert!(max_abs_diff(&p, &shifted).unwrap() <= 1e-12);
    }

    #[test]
    fn softmax_backward_rows_sum_to_zero(l in 1usize..12, seed: u64) {
        let mut rng = Rng::new(seed);
        let p = softmax_rows(&rand(&mut rng, &[l, l])).unwrap();
        let ds = softmax_backward(&p, &rand(&mut rng, &[l, l])).unwrap();
        for row in ds.data().chunks(l) {
            prop_assert!(row.iter().sum::<f64>().abs() <= 1e-10);
        }
    }

    #[test]
    fn output_stays_in_value_hull(l in 1usize..12, c in 1usize..6, seed: u64) {
        let mut rng = Rng::new(seed);
        let (q, k, v) = (rand(&mut rng, &[l, c]), rand(&mut rng, &[l, c]), rand(&mut rng, &[l, c]));
        let (o, _) = naive_forward(&q, &k, &v, &AttnParams::default()).unwrap();
        for col in 0..c {
            let vals: Vec<f64> = (0..l).map(|i| v.at(i, col)).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..l {
                prop_assert!(o.at(i, col) >= lo - 1e-12 && o.at(i, col) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn flash_invariant_in_chunk_count_with_exact_accounting(
        l in 1usize..20, c in 1usize..24, eb in prop::sample::select(vec![4usize, 8]), seed: u64,
    ) {
        let mut rng = Rng::new(seed);
        let (q, k, v) = (rand(&mut rng, &[l, c]), rand(&mut rng, &[l, c]), rand(&mut rng, &[l, c]));
        let d_out = rand(&mut rng, &[l, c]);
        let p = AttnParams::default();
        let (o, cache) = naive_forward(&q, &k, &v, &p).unwrap();
        let g = naive_backward(&q, &k, &v, &cache, &d_out, &p).unwrap();
        let lc = (l * c) as u64;
        for r in valid_chunk_counts(c) {
            let cfg = TileConfig::new(r, 1.0, eb).unwrap();
            let mut arena = ScratchpadArena::unbounded();
            let fwd = flash_forward(&q, &k, &v, &cfg, &mut arena).unwrap();
            prop_assert_eq!(arena.peak_bytes(), peak_sram_forward(l, c, &cfg).unwrap());
            let bwd = flash_backward(&fwd.context, &d_out, &mut arena).unwrap();
            prop_assert_eq!(arena.peak_bytes(), peak_sram_backward(l, c, &cfg).unwrap());
            prop_assert_eq!(arena.live_bytes(), 0);

            prop_assert!(max_abs_diff(&fwd.output, &o).unwrap() <= 1e-10);
            prop_assert!(max_abs_diff(&bwd.grads.dq, &g.dq).unwrap() <= 1e-10);
            prop_assert!(max_abs_diff(&bwd.grads.dk, &g.dk).unwrap() <= 1e-10);
            prop_assert!(max_abs_diff(&bwd.grads.dv, &g.dv).unwrap() <= 1e-10);

            for name in ["Q", "K", "V"] {
                prop_assert_eq!(fwd.report.loads_of(name), lc);
            }
            prop_assert_eq!(fwd.report.stores_of("O"), lc);
            prop_assert_eq!(bwd.report.loads_of("Q"), 2 * lc);
            prop_assert_eq!(bwd.report.loads_of("K"), 2 * lc);
            prop_assert_eq!(bwd.report.total_elements(), 9 * lc);
        }
    }
}

#[test]
fn analytic_and_numerical_gradients_agree_on_grid() {
    let mut rng = Rng::new(2024);
    let p = AttnParams::default();
    for l in [1, 2, 8, 49, 64] {
        for c in [4, 16, 32] {
            let (q, k, v) = (
                rand(&mut rng, &[l, c]),
                rand(&mut rng, &[l, c]),
                rand(&mut rng, &[l, c]),
            );
            let d_out = rand(&mut rng, &[l, c]);
            let (_, cache) = naive_forward(&q, &k, &v, &p).unwrap();
            let g = naive_backward(&q, &k, &v, &cache, &d_out, &p).unwrap();
            let loss = |q: &DenseTensor, k: &DenseTensor, v: &DenseTensor| {
                naive_forward(q, k, v, &p)?.0.dot(&d_out)
            };
            let fq = finite_diff_grad(|x| loss(x, &k, &v), &q, 1e-5).unwrap();
            let fk = finite_diff_grad(|x| loss(&q, x, &v), &k, 1e-5).unwrap();
            let fv = finite_diff_grad(|x| loss(&q, &k, x), &v, 1e-5).unwrap();
            for (name, a, n) in [("dQ", &g.dq, &fq), ("dK", &g.dk, &fk), ("dV", &g.dv, &fv)] {
                let err = max_abs_diff(a, n).unwrap();
                assert!(err <= 1e-5, "L={l} C={c} {name}: {err:e}");
            }
        }
    }
}

#[test]
fn no_attention_sized_buffer_reaches_global_memory() {
    let mut rng = Rng::new(3);
    for (l, c, r) in [(8, 16, 2), (49, 32, 2), (64, 64, 4), (16, 16, 1)] {
        let (q, k, v) = (
            rand(&mut rng, &[l, c]),
            rand(&mut rng, &[l, c]),
            rand(&mut rng, &[l, c]),
        );
        let cfg = TileConfig::new(r, 1.0, 4).unwrap();
        let fwd = flash_forward(&q, &k, &v, &cfg, &mut ScratchpadArena::default()).unwrap();
        let bwd = flash_backward(&fwd.context, &q, &mut ScratchpadArena::default()).unwrap();
        for report in [&fwd.report, &bwd.report] {
            for (name, shape) in &report.buffers {
                assert_eq!(shape, &vec![l, c], "{name} is not an L×C operand");
            }
            for name in report.operands() {
                assert!(!["S", "P", "dP", "dS"].contains(&name));
            }
        }
    }
}
