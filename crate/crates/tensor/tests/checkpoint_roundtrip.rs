use proptest::prelude::*;
use rehab_tensor::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Real, Tensor,
};

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<u64>(), n).prop_map(move |bits| {
            // arbitrary finite bit patterns, including subnormals and -0.0
            let data = bits
                .into_iter()
                .map(|b| {
                    let v = f64::from_bits(b);
                    if v.is_finite() {
                        v as Real
                    } else {
                        (b as f64 / u64::MAX as f64) as Real
                    }
                })
                .collect();
            Tensor::new(shape.clone(), data).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn roundtrip_is_bit_exact(tensors in prop::collection::vec(tensor_strategy(), 0..5)) {
        let named: Vec<(String, Tensor)> = tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("layer{i}.weight"), t))
            .collect();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, named.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), named.len());
        for ((n1, t1), (n2, t2)) in named.iter().zip(&back) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn file_roundtrip_and_rewrite_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    let t = Tensor::new([2, 2], vec![0.1, -2.5, 1e-300, -0.0]).unwrap();
    save_checkpoint(&p1, [("w", &t)]).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    save_checkpoint(&p2, loaded.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}
