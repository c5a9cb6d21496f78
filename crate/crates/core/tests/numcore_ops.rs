use kbsg_core::gradcheck::{op_suite, OP_TOLERANCE};
use kbsg_core::numcore::{bilinear_warp, Tape, Tensor};
use kbsg_core::BBox;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn every_op_matches_finite_differences_over_twenty_shapes() {
    let report = op_suite(17, 20).unwrap();
    for row in &report {
        assert!(row.passed(), "{}: max rel err {:e} (tol {:e})", row.name, row.max_rel_err, OP_TOLERANCE);
        assert!(row.count > 0);
    }
    assert!(report.len() >= 25);
}

#[test]
fn matmul_identity_and_dot() {
    let mut t = Tape::new();
    let eye = t.constant(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
    let m = t.constant(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let p = t.matmul(eye, m).unwrap();
    assert_eq!(t.value(p), &[1., 2., 3., 4.]);

    let a = t.constant(&[1, 2], vec![1., 2.]).unwrap();
    let b = t.constant(&[2, 1], vec![3., 4.]).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c), &[11.0]);

    let err = t.matmul(a, a).unwrap_err().to_string();
    assert!(err.contains("[1, 2]"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[3], vec![0., 0., 0.]).unwrap();
    let y = t.softmax(x, 0).unwrap();
    assert!(close(t.value(y), &[1. / 3.; 3], 1e-15));

    let x = t.constant(&[2], vec![1000., 0.]).unwrap();
    let y = t.softmax(x, 0).unwrap();
    assert!(t.value(y).iter().all(|v| v.is_finite()));
    assert!((t.value(y)[0] - 1.0).abs() < 1e-12 && t.value(y)[1] < 1e-300);

    for v in [-3.0, 0.0, 712.5] {
        let x = t.constant(&[1], vec![v]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y), &[1.0]);
    }
    assert!(t.softmax(x, 1).is_err());
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[3], vec![-1., 0., 2.]).unwrap();
    let r = t.relu(x);
    assert_eq!(t.value(r), &[0., 0., 2.]);
    let z = t.constant(&[1], vec![0.0]).unwrap();
    let th = t.tanh(z);
    assert_eq!(t.value(th), &[0.0]);

    let a = Tensor::vector(vec![2.0]).with_grad();
    let b = Tensor::vector(vec![5.0]).with_grad();
    let mut t = Tape::new();
    let (va, vb) = (t.leaf(&a), t.leaf(&b));
    let c = t.concat(&[va, vb], 0).unwrap();
    assert_eq!(t.value(c), &[2.0, 5.0]);
    let w = t.constant(&[2], vec![3.0, -7.0]).unwrap();
    let l = t.mul(c, w).unwrap();
    let l = t.sum(l);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(va).unwrap(), &[3.0]);
    assert_eq!(g.get(vb).unwrap(), &[-7.0]);

    let mut t = Tape::new();
    let p = t.constant(&[2], vec![1., 2.]).unwrap();
    let q = t.constant(&[3], vec![1., 2., 3.]).unwrap();
    assert!(t.add(p, q).is_err());
}

#[test]
fn conv2d_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let k = t.constant(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let x = t.constant(&[1, 5, 5], vec![1.0; 25]).unwrap();
    let k = t.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let y = t.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 5, 5]);
    let v = t.value(y);
    for yy in 1..4 {
        for xx in 1..4 {
            assert_eq!(v[yy * 5 + xx], 9.0);
        }
    }
    assert_eq!(v[0], 4.0);
    assert_eq!(v[2], 6.0);

    let x = t.constant(&[1, 4, 4], vec![1.0; 16]).unwrap();
    assert!(t.conv2d(x, k, 2, 0).is_err(), "(4 - 3) / 2 is not integral");
}

#[test]
fn bilinear_warp_examples() {
    let mut t = Tape::new();
    let c = 0.75;
    let e = t.constant(&[2, 8, 8], vec![c; 128]).unwrap();
    let full = BBox::new(0., 0., 16., 16.).unwrap();
    let y = bilinear_warp(&mut t, e, &full, 16, 16).unwrap();
    assert!(t.value(y).iter().all(|v| (v - c).abs() < 1e-15));

    let z = t.constant(&[1, 8, 8], vec![0.0; 64]).unwrap();
    let y = bilinear_warp(&mut t, z, &full, 16, 16).unwrap();
    assert!(t.value(y).iter().all(|v| *v == 0.0));

    let ramp = t.constant(&[1, 8, 8], (0..64).map(|i| 1.0 + i as f64).collect()).unwrap();
    let left = BBox::new(0., 0., 8., 16.).unwrap();
    let y = bilinear_warp(&mut t, ramp, &left, 16, 16).unwrap();
    let v = t.value(y);
    for row in 0..16 {
        assert!(v[row * 16..row * 16 + 8].iter().all(|x| *x > 0.0));
        assert!(v[row * 16 + 8..row * 16 + 16].iter().all(|x| *x == 0.0));
    }
    // Cell (0,0) centre maps to grid (−0.25·…) which clamps to grid cell (0,0);
    // cell (0,1) centre maps to grid x = (1.5/8)·8 − 0.5 = 1.0.
    assert!((v[0] - 1.0).abs() < 1e-12);
    assert!((v[1] - 2.0).abs() < 1e-12);

    assert!(BBox::new(0., 0., 0., 1.).is_err());
    let bad = BBox { x: 1., y: 1., w: 0., h: 2. };
    assert!(bilinear_warp(&mut t, e, &bad, 4, 4).is_err());
}

#[test]
fn upsample_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[1, 1, 1], vec![1.0]).unwrap();
    let y = t.upsample_nearest(x).unwrap();
    assert_eq!(t.value(y), &[1.0; 4]);

    let x = t.constant(&[2, 3, 3], vec![2.5; 18]).unwrap();
    let y = t.upsample_nearest(x).unwrap();
    let back = t.avg_pool(y, 2).unwrap();
    assert_eq!(t.value(back), t.value(x));

    let x = t.constant(&[1, 2, 3], vec![1., -2., 3., 0.5, 7., 1.]).unwrap();
    let y = t.upsample_nearest(x).unwrap();
    let s_in: f64 = t.value(x).iter().sum();
    let s_out: f64 = t.value(y).iter().sum();
    assert!((s_out - 4.0 * s_in).abs() < 1e-12);
}

#[test]
fn backward_examples() {
    let x = Tensor::vector(vec![0.5, -1.5, 2.0]).with_grad();
    let mut t = Tape::new();
    let v = t.leaf(&x);
    let sq = t.mul(v, v).unwrap();
    let l = t.sum(sq);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(v).unwrap(), &[1.0, -3.0, 4.0]);

    let other = Tensor::vector(vec![1.0, 2.0]).with_grad();
    let mut t = Tape::new();
    let v = t.leaf(&x);
    let u = t.leaf(&other);
    let l = t.sum(v);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(u).unwrap(), &[0.0, 0.0]);
    assert!(t.backward(v).is_err(), "non-scalar loss");
}

#[test]
fn fan_out_accumulates() {
    let x = Tensor::vector(vec![0.3, -0.7]).with_grad();
    let mut t = Tape::new();
    let v = t.leaf(&x);
    let a = t.tanh(v);
    let b = t.scale(v, 3.0);
    let s = t.add(a, b).unwrap();
    let l = t.sum(s);
    let g = t.backward(l).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|x| (1.0 - x.tanh().powi(2)) + 3.0).collect();
    assert!(close(g.get(v).unwrap(), &expect, 1e-15));

    let mut acc = x.clone();
    g.accumulate_into(v, &mut acc);
    g.accumulate_into(v, &mut acc);
    let twice: Vec<f64> = expect.iter().map(|e| 2.0 * e).collect();
    assert!(close(acc.grad.as_deref().unwrap(), &twice, 1e-15));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(&[2, 4, 4], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let k = t.constant(&[3, 2, 3, 3], (0..54).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let y = t.conv2d(x, k, 1, 1).unwrap();
        let y = t.softmax(y, 0).unwrap();
        t.value(y).to_vec()
    };
    assert_eq!(run(), run());
}
