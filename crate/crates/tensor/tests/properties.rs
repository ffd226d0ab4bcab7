use genspan_tensor::{live_bytes, peak_bytes, reset_peak, Graph, Precision, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn scatter_after_gather_restores_rows(
        (x, idx) in (2usize..9, 1usize..5).prop_flat_map(|(m, n)| {
            (matrix(m, n), prop::sample::subsequence((0..m).collect::<Vec<_>>(), 1..=m))
        })
    ) {
        let mut g = Graph::with_precision(Precision::F64);
        let xv = g.constant(x.clone());
        let gathered = g.gather_rows(xv, &idx).unwrap();
        let zeros = g.constant(Tensor::zeros(x.dims()));
        let back = g.scatter_rows(gathered, &idx, zeros).unwrap();
        let out = g.value(back);
        for r in 0..x.rows() {
            if idx.contains(&r) {
                prop_assert_eq!(out.row(r), x.row(r));
            } else {
                prop_assert!(out.row(r).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn forward_backward_is_bitwise_deterministic(x in matrix(5, 3), w in matrix(3, 3)) {
        let run = || {
            let mut g = Graph::with_precision(Precision::F64);
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let h = g.matmul(xv, wv).unwrap();
            let s = g.silu(h).unwrap();
            let k = g.softmax(s, 1).unwrap();
            let l = g.logsumexp(k, 0).unwrap();
            let loss = g.sum(l).unwrap();
            let gr = g.backward(loss).unwrap();
            (g.value(loss).item().to_bits(), gr.wrt(xv).unwrap().clone(), gr.wrt(wv).unwrap().clone())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
        prop_assert_eq!(a.2, b.2);
    }

    #[test]
    fn reverse_twice_is_identity(x in matrix(6, 2)) {
        let mut g = Graph::with_precision(Precision::F64);
        let v = g.constant(x.clone());
        let r = g.reverse_rows(v).unwrap();
        let rr = g.reverse_rows(r).unwrap();
        prop_assert_eq!(g.value(rr), &x);
    }
}

#[test]
fn byte_accounting_tracks_live_tensors() {
    let base = live_bytes();
    {
        let t64 = Tensor::with_precision(&[10, 10], vec![0.0; 100], Precision::F64).unwrap();
        assert_eq!(live_bytes(), base + 800);
        let t32 = Tensor::with_precision(&[10, 10], vec![0.0; 100], Precision::F32).unwrap();
        assert_eq!(live_bytes(), base + 1200);
        drop((t64, t32));
    }
    assert_eq!(live_bytes(), base);
    reset_peak();
    {
        let _a = Tensor::with_precision(&[5], vec![1.0; 5], Precision::F64).unwrap();
    }
    assert_eq!(peak_bytes(), base + 40);
}
