use proptest::prelude::*;
use uid_autodiff::{Graph, Tensor};

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c)
            .prop_map(move |data| Tensor::new(vec![r, c], data).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in matrix()) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v);
        let out = g.value(s);
        for r in 0..out.rows() {
            let total: f64 = out.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_non_negative(x in matrix(), t in 0usize..7) {
        let mut g = Graph::new();
        let targets: Vec<usize> = (0..x.rows()).map(|r| (t + r) % x.cols()).collect();
        let v = g.constant(x);
        let ce = g.cross_entropy(v, &targets).unwrap();
        prop_assert!(g.value(ce).data()[0] >= 0.0);
    }
}
