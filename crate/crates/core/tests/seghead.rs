use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specmask::seghead::{
    bce_loss, cosine_affinity, kshot_merge, miou, predict_mask, predict_mask_backward,
    resize_nearest, BinaryMask, Episode, DEFAULT_TEMP,
};
use specmask::{Error, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn at(f: &Tensor, m: usize) -> Vec<f64> {
    let (c, h, w) = f.dims3().unwrap();
    (0..c).map(|k| f.data()[k * h * w + m]).collect()
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

#[test]
fn affinity_matches_pairwise_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let (q, s) = (
        random(&[4, 3, 5], &mut rng, -1.0, 1.0),
        random(&[4, 3, 5], &mut rng, -1.0, 1.0),
    );
    let aff = cosine_affinity(&q, &s).unwrap();
    assert_eq!(aff.shape(), &[3, 5, 3, 5]);
    for m in 0..15 {
        for n in 0..15 {
            let expect = oracle_cos(&at(&q, m), &at(&s, n)).max(0.0);
            assert!((aff.data()[m * 15 + n] - expect).abs() < 1e-10);
        }
    }
    assert!(aff.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn affinity_special_pairs() {
    let f = Tensor::new(vec![2, 1, 3], vec![1.0, 1.0, -1.0, 0.0, 2.0, 0.0]).unwrap();
    // Positions: (1, 0), (1, 2), (-1, 0): parallel, orthogonal-ish, antiparallel to the first.
    let aff = cosine_affinity(&f, &f).unwrap();
    assert!((aff.data()[0] - 1.0).abs() < 1e-9);
    assert_eq!(aff.data()[2], 0.0);
    let orth = Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
    let other = Tensor::new(vec![2, 1, 1], vec![0.0, 3.0]).unwrap();
    assert_eq!(cosine_affinity(&orth, &other).unwrap().data(), &[0.0]);
    let zero = Tensor::zeros(&[2, 1, 1]).unwrap();
    assert_eq!(cosine_affinity(&zero, &orth).unwrap().data(), &[0.0]);
}

#[test]
fn affinity_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (q, s) = (
        random(&[3, 4, 4], &mut rng, -1.0, 1.0),
        random(&[3, 4, 4], &mut rng, -1.0, 1.0),
    );
    let base = cosine_affinity(&q, &s).unwrap();
    let scaled = cosine_affinity(&q.scale(3.5), &s.scale(0.02)).unwrap();
    for (a, b) in base.data().iter().zip(scaled.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn identical_query_gives_closed_form_probability() {
    let f = Tensor::new(
        vec![3, 4, 4],
        [0.3, -1.2, 2.0].iter().flat_map(|&v| vec![v; 16]).collect(),
    )
    .unwrap();
    let all = BinaryMask::from_fn(4, 4, |_, _| true).unwrap();
    let p = predict_mask(&f, &f, &all, DEFAULT_TEMP).unwrap();
    let expect = 1.0 / (1.0 + (-10.0f64).exp());
    assert!((expect - 0.99995).abs() < 1e-5);
    assert!(p.data().iter().all(|&v| (v - expect).abs() < 1e-9));
}

#[test]
fn orthogonal_query_gives_one_half() {
    let support = Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let query = Tensor::new(vec![2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 5.0, -1.0, 2.0, 0.5]).unwrap();
    let mask = BinaryMask::from_fn(2, 2, |i, _| i == 0).unwrap();
    let p = predict_mask(&query, &support, &mask, DEFAULT_TEMP).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.5));
}

#[test]
fn prediction_matches_prototype_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (c, h, w) = (5, 4, 6);
    let q = random(&[c, h, w], &mut rng, -1.0, 1.0);
    let mut s = random(&[c, h, w], &mut rng, -1.0, 1.0);
    // The mask is given at a finer resolution and downsampled to the feature grid.
    let mask = BinaryMask::from_fn(8, 12, |i, j| i < 4 && j >= 6).unwrap();
    let small = mask.downsample(h, w);
    for k in 0..c {
        for (v, &m) in s.channel_mut(k).iter_mut().zip(small.data()) {
            *v *= m;
        }
    }
    let count = small.count() as f64;
    assert_eq!(count, 6.0);
    let proto: Vec<f64> = (0..c)
        .map(|k| s.channel(k).iter().sum::<f64>() / count)
        .collect();
    let p = predict_mask(&q, &s, &mask, 0.25).unwrap();
    for m in 0..h * w {
        let expect = 1.0 / (1.0 + (-oracle_cos(&at(&q, m), &proto) / 0.25).exp());
        assert!((p.data()[m] - expect).abs() < 1e-12);
    }
    let scaled = predict_mask(&q.scale(7.0), &s, &mask, 0.25).unwrap();
    for (a, b) in p.data().iter().zip(scaled.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn empty_support_mask_is_degenerate() {
    let f = Tensor::filled(&[2, 4, 4], 1.0).unwrap();
    let empty = BinaryMask::from_fn(4, 4, |_, _| false).unwrap();
    assert!(matches!(
        predict_mask(&f, &f, &empty, DEFAULT_TEMP),
        Err(Error::Degenerate(_))
    ));
    assert!(predict_mask(&f, &f, &empty.complement(), 0.0).is_err());
}

#[test]
fn prediction_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (c, h, w) = (3, 3, 4);
    let q = random(&[c, h, w], &mut rng, -1.0, 1.0);
    let s = random(&[c, h, w], &mut rng, -1.0, 1.0);
    let upstream = random(&[h, w], &mut rng, -1.0, 1.0);
    let mask = BinaryMask::from_fn(h, w, |i, j| (i + j) % 2 == 0).unwrap();
    let loss = |q: &Tensor, s: &Tensor| -> f64 {
        let p = predict_mask(q, s, &mask, 0.5).unwrap();
        p.data()
            .iter()
            .zip(upstream.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let (gq, gs) = predict_mask_backward(&q, &s, &mask, 0.5, &upstream).unwrap();
    let step = 1e-6;
    for (which, grad) in [(0, &gq), (1, &gs)] {
        for i in 0..q.len() {
            let (mut qp, mut sp) = (q.clone(), s.clone());
            let (mut qm, mut sm) = (q.clone(), s.clone());
            if which == 0 {
                qp.data_mut()[i] += step;
                qm.data_mut()[i] -= step;
            } else {
                sp.data_mut()[i] += step;
                sm.data_mut()[i] -= step;
            }
            let numeric = (loss(&qp, &sp) - loss(&qm, &sm)) / (2.0 * step);
            assert!(
                (numeric - grad.data()[i]).abs() < 1e-7,
                "input {which} entry {i}"
            );
        }
    }
}

#[test]
fn bce_closed_forms() {
    let target = BinaryMask::from_fn(3, 3, |i, j| i == j).unwrap();
    let half = Tensor::filled(&[3, 3], 0.5).unwrap();
    let (l, _) = bce_loss(&half, &target).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

    let (l, _) = bce_loss(target.tensor(), &target).unwrap();
    assert!(l > 0.0 && l < 2e-7);
    let (l, _) = bce_loss(target.complement().tensor(), &target).unwrap();
    assert!((l - (-(1e-7f64).ln())).abs() < 1e-9);
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let pred = random(&[4, 3], &mut rng, 0.05, 0.95);
    let target = BinaryMask::from_fn(4, 3, |i, j| (i * 3 + j) % 3 != 1).unwrap();
    let (_, g) = bce_loss(&pred, &target).unwrap();
    let step = 1e-6;
    for i in 0..pred.len() {
        let (mut up, mut down) = (pred.clone(), pred.clone());
        up.data_mut()[i] += step;
        down.data_mut()[i] -= step;
        let numeric = (bce_loss(&up, &target).unwrap().0 - bce_loss(&down, &target).unwrap().0)
            / (2.0 * step);
        let rel = (numeric - g.data()[i]).abs() / g.data()[i].abs();
        assert!(rel < 1e-6, "entry {i}: {rel}");
    }
}

/// Per-class IoU by listing pixel coordinates.
fn brute_miou(pred: &[(usize, usize)], target: &[(usize, usize)], h: usize, w: usize) -> f64 {
    let all: Vec<(usize, usize)> = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect();
    let class_iou = |p: Vec<(usize, usize)>, t: Vec<(usize, usize)>| {
        let inter = p.iter().filter(|x| t.contains(x)).count();
        let union = all
            .iter()
            .filter(|x| p.contains(x) || t.contains(x))
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    let bg = |s: &[(usize, usize)]| {
        all.iter()
            .copied()
            .filter(|x| !s.contains(x))
            .collect::<Vec<_>>()
    };
    (class_iou(pred.to_vec(), target.to_vec()) + class_iou(bg(pred), bg(target))) / 2.0
}

#[test]
fn miou_top_half_versus_left_half() {
    let pred = BinaryMask::from_fn(2, 2, |i, _| i == 0).unwrap();
    let target = BinaryMask::from_fn(2, 2, |_, j| j == 0).unwrap();
    let expect = brute_miou(&[(0, 0), (0, 1)], &[(0, 0), (1, 0)], 2, 2);
    assert!((expect - 1.0 / 3.0).abs() < 1e-15);
    assert!((miou(&pred, &target).unwrap() - expect).abs() < 1e-15);
}

#[test]
fn miou_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..20 {
        let bits: Vec<bool> = (0..30).map(|_| rng.random_bool(0.4)).collect();
        let bits2: Vec<bool> = (0..30).map(|_| rng.random_bool(0.6)).collect();
        let t = BinaryMask::from_fn(5, 6, |i, j| bits[i * 6 + j]).unwrap();
        let p = BinaryMask::from_fn(5, 6, |i, j| bits2[i * 6 + j]).unwrap();
        assert_eq!(miou(&t, &t).unwrap(), 1.0);
        let v = miou(&p, &t).unwrap();
        assert!((v - miou(&p.complement(), &t.complement()).unwrap()).abs() < 1e-15);
        let coords = |b: &[bool]| {
            (0..30)
                .filter(|&i| b[i])
                .map(|i| (i / 6, i % 6))
                .collect::<Vec<_>>()
        };
        assert!((v - brute_miou(&coords(&bits2), &coords(&bits), 5, 6)).abs() < 1e-15);
    }
    let t = BinaryMask::from_fn(3, 3, |i, _| i == 1).unwrap();
    assert_eq!(miou(&t.complement(), &t).unwrap(), 0.0);
    let empty = BinaryMask::from_fn(3, 3, |_, _| false).unwrap();
    assert_eq!(miou(&empty, &empty).unwrap(), 1.0);
}

#[test]
fn kshot_merge_is_the_mean() {
    let a = Tensor::filled(&[2, 2], 0.2).unwrap();
    let b = Tensor::filled(&[2, 2], 0.8).unwrap();
    assert_eq!(kshot_merge(std::slice::from_ref(&a)).unwrap(), a);
    assert_eq!(kshot_merge(&[a.clone(), a.clone()]).unwrap(), a);
    assert!(kshot_merge(&[a.clone(), b])
        .unwrap()
        .data()
        .iter()
        .all(|&v| (v - 0.5).abs() < 1e-15));
    assert!(kshot_merge(&[]).is_err());
    assert!(kshot_merge(&[a, Tensor::zeros(&[3, 2]).unwrap()]).is_err());
}

#[test]
fn nearest_resize_picks_cell_centres() {
    let t = Tensor::new(vec![4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
    let down = resize_nearest(&t, 4, 4, 2, 2);
    assert_eq!(down.data(), &[5.0, 7.0, 13.0, 15.0]);
    let up = resize_nearest(&down, 2, 2, 4, 4);
    assert_eq!(&up.data()[..4], &[5.0, 5.0, 7.0, 7.0]);
}

#[test]
fn episode_validation() {
    let img = Tensor::zeros(&[1, 4, 4]).unwrap();
    let mask = BinaryMask::from_fn(4, 4, |i, _| i < 2).unwrap();
    let ep = Episode::new(vec![(img.clone(), mask.clone())], img.clone(), mask.clone()).unwrap();
    assert_eq!(ep.shots(), 1);
    assert!(Episode::new(vec![], img.clone(), mask.clone()).is_err());
    let small = BinaryMask::from_fn(2, 2, |_, _| true).unwrap();
    assert!(Episode::new(vec![(img.clone(), small)], img, mask).is_err());
    assert!(BinaryMask::new(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).is_err());
}
