use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specmask::spectral::{
    band_filter, decompose, dft2, idft2, idft2_complex, recombine, Band, Spectrum,
};
use specmask::{ComplexTensor, Tensor};

/// Direct O((hw)^2) summation; `out[p][q]` pairs row frequency `p` with column frequency `q`.
fn direct_dft(f: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(h * w);
    for p in 0..h {
        for q in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let theta = -2.0 * PI * ((p * i) as f64 / h as f64 + (q * j) as f64 / w as f64);
                    re += f[i * w + j] * theta.cos();
                    im += f[i * w + j] * theta.sin();
                }
            }
            out.push((re / (h * w) as f64, im / (h * w) as f64));
        }
    }
    out
}

fn direct_idft_real(spec: &[(f64, f64)], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for p in 0..h {
                for q in 0..w {
                    let theta = 2.0 * PI * ((p * i) as f64 / h as f64 + (q * j) as f64 / w as f64);
                    let (re, im) = spec[p * w + q];
                    acc += re * theta.cos() - im * theta.sin();
                }
            }
            out.push(acc);
        }
    }
    out
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn dft_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for &(h, w) in &[(1, 1), (1, 6), (5, 7), (8, 8), (3, 16), (13, 13), (16, 16)] {
        let f = random(&[h, w], &mut rng);
        let fast = dft2(&f).unwrap();
        for (i, &(re, im)) in direct_dft(f.data(), h, w).iter().enumerate() {
            let (a, b) = fast.get(i);
            assert!(
                (a - re).abs() < 1e-10 && (b - im).abs() < 1e-10,
                "{h}x{w} bin {i}"
            );
        }
    }
}

#[test]
fn dc_bin_is_the_mean() {
    let f = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let s = dft2(&f).unwrap();
    assert!((s.re()[0] - 2.5).abs() < 1e-15);
    assert_eq!(s.im()[0], 0.0);

    let flat = Tensor::filled(&[3, 5], -1.25).unwrap();
    let s = dft2(&flat).unwrap();
    for i in 0..15 {
        let (re, im) = s.get(i);
        let expect = if i == 0 { -1.25 } else { 0.0 };
        assert!((re - expect).abs() < 1e-15 && im.abs() < 1e-15);
    }
}

#[test]
fn conjugate_symmetry_for_real_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(h, w) in &[(4, 4), (5, 7), (6, 3)] {
        let s = dft2(&random(&[h, w], &mut rng)).unwrap();
        for u in 0..h {
            for v in 0..w {
                let (a, b) = s.get(u * w + v);
                let (c, d) = s.get(((h - u) % h) * w + (w - v) % w);
                assert!((a - c).abs() < 1e-12 && (b + d).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn parseval_with_forward_normalisation() {
    // With the 1/(hw) factor on the forward transform: sum |f|^2 = hw * sum |F|^2.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &(h, w) in &[(4, 4), (5, 9), (13, 13)] {
        let f = random(&[h, w], &mut rng);
        let s = dft2(&f).unwrap();
        let spatial: f64 = f.data().iter().map(|v| v * v).sum();
        let spectral: f64 = (0..h * w)
            .map(|i| s.re()[i].powi(2) + s.im()[i].powi(2))
            .sum();
        let n = (h * w) as f64;
        assert!((spatial - n * spectral).abs() <= 1e-12 * spatial);
    }
}

#[test]
fn inverse_roundtrip_and_imaginary_residue() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for &(h, w) in &[(4, 4), (7, 5), (16, 16)] {
        let f = random(&[h, w], &mut rng);
        let full = idft2_complex(&dft2(&f).unwrap()).unwrap();
        for (i, &v) in f.data().iter().enumerate() {
            assert!((full.re()[i] - v).abs() <= 1e-9 * v.abs().max(1.0));
            assert!(full.im()[i].abs() < 1e-9);
        }
    }
}

#[test]
fn inverse_of_trivial_spectra() {
    let zero = ComplexTensor::zeros(&[3, 4]).unwrap();
    assert!(idft2(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    let mut dc = ComplexTensor::zeros(&[3, 4]).unwrap();
    dc.re_mut()[0] = 2.75;
    assert!(idft2(&dc)
        .unwrap()
        .data()
        .iter()
        .all(|&v| (v - 2.75).abs() < 1e-15));
}

#[test]
fn decompose_sign_and_range() {
    let pos = decompose(&Tensor::filled(&[1, 3, 3], 2.0).unwrap()).unwrap();
    assert!((pos.amplitude().data()[0] - 2.0).abs() < 1e-15);
    assert_eq!(pos.phase().data()[0], 0.0);
    let neg = decompose(&Tensor::filled(&[1, 3, 3], -2.0).unwrap()).unwrap();
    assert!((neg.amplitude().data()[0] - 2.0).abs() < 1e-15);
    assert_eq!(neg.phase().data()[0], PI);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let s = decompose(&random(&[3, 8, 8], &mut rng)).unwrap();
    assert!(s.phase().data().iter().all(|&p| p > -PI && p <= PI));
    assert!(s.amplitude().data().iter().all(|&a| a >= 0.0));
}

#[test]
fn recombine_inverts_decompose() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for shape in [[3, 8, 8], [2, 5, 7], [1, 13, 13]] {
        let f = random(&shape, &mut rng);
        let back = recombine(&decompose(&f).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}

#[test]
fn amplitude_with_zero_phase_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (h, w) = (5, 6);
    let f = random(&[2, h, w], &mut rng);
    let amp = decompose(&f).unwrap().amplitude().clone();
    let out = recombine(&Spectrum::new(amp.clone(), Tensor::zeros(&[2, h, w]).unwrap()).unwrap())
        .unwrap();
    for k in 0..2 {
        let spec: Vec<(f64, f64)> = amp.channel(k).iter().map(|&a| (a, 0.0)).collect();
        let expect = direct_idft_real(&spec, h, w);
        for (a, b) in out.channel(k).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

/// Centred radius of bin `(p, q)` over the largest centred radius.
fn oracle_radius(p: usize, q: usize, h: usize, w: usize) -> f64 {
    let c = |k: usize, n: usize| {
        let s = (k + n / 2) % n;
        s as f64 - (n / 2) as f64
    };
    let rmax = (((h / 2).pow(2) + (w / 2).pow(2)) as f64).sqrt();
    (c(p, h).powi(2) + c(q, w).powi(2)).sqrt() / rmax
}

#[test]
fn low_band_amplitude_filter_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (h, w) = (8, 8);
    let f = random(&[1, h, w], &mut rng);
    for cutoff in [0.25, 0.6, 0.999_999] {
        let out = band_filter(&f, Band::Low, Band::Full, cutoff).unwrap();
        let spec: Vec<(f64, f64)> = direct_dft(f.data(), h, w)
            .into_iter()
            .enumerate()
            .map(|(i, z)| {
                if oracle_radius(i / w, i % w, h, w) <= cutoff {
                    z
                } else {
                    (0.0, 0.0)
                }
            })
            .collect();
        let expect = direct_idft_real(&spec, h, w);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "cutoff {cutoff}");
        }
    }
}

#[test]
fn band_filter_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let f = random(&[2, 8, 8], &mut rng);
    assert_eq!(band_filter(&f, Band::Full, Band::Full, 0.25).unwrap(), f);
    let flat = Tensor::filled(&[1, 8, 8], 4.0).unwrap();
    assert!(
        band_filter(&flat, Band::High, Band::Full, 0.25)
            .unwrap()
            .max_abs()
            < 1e-12
    );
    assert!(band_filter(&f, Band::Low, Band::Full, 1.0).is_err());
    assert!(band_filter(&f, Band::Low, Band::Full, 0.0).is_err());
}
