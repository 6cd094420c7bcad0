//! Statistical and identity checks of the synthetic degradation pipeline.

use restore_core::degrade::{
    add_blur, add_haze, add_lowlight, add_noise, add_rain, degrade, flip_horizontal, flip_vertical,
    gaussian_noise, make_batch, make_sample, synth_clean, transmission_map, DegradationKind, Image,
    Kernel, Task,
};
use restore_core::metrics::psnr;
use restore_core::Tensor;

fn std_of(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn image_std(img: &Image) -> f64 {
    std_of(&img.data().iter().map(|&v| v as f64).collect::<Vec<_>>())
}

fn in_unit_range(img: &Image) -> bool {
    img.data()
        .iter()
        .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
}

#[test]
fn clean_images_are_deterministic_in_range_and_distinct() {
    let a = synth_clean(1, 48, 40);
    assert_eq!(a.shape(), &[48, 40, 3]);
    assert_eq!(a.data(), synth_clean(1, 48, 40).data());
    assert!(in_unit_range(&a));
    let b = synth_clean(2, 48, 40);
    let mad = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.numel() as f64;
    assert!(mad > 0.01, "mean abs difference {mad}");
}

#[test]
fn noise_level_and_expected_psnr() {
    let clean = Tensor::<f32>::full(&[64, 64, 3], 0.5);
    assert_eq!(add_noise(&clean, 0.0, 3).unwrap().data(), clean.data());
    let noisy = add_noise(&clean, 25.0, 3).unwrap();
    let diff: Vec<f64> = noisy
        .data()
        .iter()
        .zip(clean.data())
        .map(|(a, b)| (a - b) as f64)
        .collect();
    let s = std_of(&diff) * 255.0;
    assert!((23.0..=27.0).contains(&s), "std {s} on the 0-255 scale");
    // 20·log10(255/25)
    let expected = 20.0 * (255.0f64 / 25.0).log10();
    assert!((expected - 20.1720).abs() < 1e-4);
    let p = psnr(&clean, &noisy).unwrap();
    assert!((p - expected).abs() < 0.3, "psnr {p}");
}

#[test]
fn noise_draws_look_normal() {
    let n = 1_000_000;
    let z = gaussian_noise(n, 1.0, 42);
    let mean = z.iter().sum::<f64>() / n as f64;
    let m2 = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let m3 = z.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64;
    let m4 = z.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
    let skew = m3 / m2.powf(1.5);
    let excess = m4 / (m2 * m2) - 3.0;
    assert!(skew.abs() < 0.1, "skew {skew}");
    assert!(excess.abs() < 0.2, "excess kurtosis {excess}");
    assert!((m2.sqrt() - 1.0).abs() < 0.01);
}

#[test]
fn haze_endpoints_and_contrast_loss() {
    let clean = synth_clean(5, 32, 32);
    let n = 32 * 32;
    assert_eq!(
        add_haze(&clean, 0.8, &vec![1.0; n]).unwrap().data(),
        clean.data()
    );
    let veil = add_haze(&clean, 0.8, &vec![0.0; n]).unwrap();
    assert!(veil.data().iter().all(|&v| v == 0.8f32));
    for seed in 0..10 {
        let clean = synth_clean(seed, 32, 32);
        let t = transmission_map(seed, 32, 32, 0.2, 0.9);
        assert!(t.iter().all(|v| (0.2..=0.9).contains(v)));
        let hazy = add_haze(&clean, 0.9, &t).unwrap();
        assert!(in_unit_range(&hazy));
        assert!(image_std(&hazy) < image_std(&clean), "seed {seed}");
    }
}

#[test]
fn blur_kernels() {
    // Reflect padding shifts the mean by a border term that shrinks with size.
    let clean = synth_clean(7, 128, 128);
    assert_eq!(
        add_blur(&clean, &Kernel::Delta).unwrap().data(),
        clean.data()
    );
    for k in [
        Kernel::Gaussian { sigma: 1.5 },
        Kernel::Motion {
            length: 9,
            angle: 30.0,
        },
    ] {
        let (side, w) = k.weights();
        assert_eq!(side % 2, 1);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let b = add_blur(&clean, &k).unwrap();
        let mean = |t: &Image| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let d = (mean(&b) - mean(&clean)).abs();
        assert!(d < 1e-4, "{k:?}: mean shift {d}");
    }
}

#[test]
fn neutral_parameters_are_identities() {
    let clean = synth_clean(8, 24, 24);
    let ll = add_lowlight(&clean, 1.0, 1.0).unwrap();
    for (a, b) in ll.data().iter().zip(clean.data()) {
        assert!((a - b).abs() <= f32::EPSILON);
    }
    let dark = add_lowlight(&clean, 2.0, 0.5).unwrap();
    assert!(dark.data().iter().zip(clean.data()).all(|(d, c)| d <= c));
    let rain = add_rain(&clean, 8.0, 10.0, 1).unwrap();
    assert!(in_unit_range(&rain));
    assert!(rain.data().iter().zip(clean.data()).all(|(r, c)| r >= c));
    assert!(rain.data() != clean.data());
}

#[test]
fn every_family_is_deterministic_and_in_range() {
    for kind in DegradationKind::ALL {
        let clean = synth_clean(9, 32, 32);
        let a = degrade(&clean, Task::new(kind), 11).unwrap();
        let b = degrade(&clean, Task::new(kind), 11).unwrap();
        assert_eq!(a.degraded.data(), b.degraded.data(), "{kind:?}");
        assert_eq!(a.params, b.params);
        assert_eq!(a.clean.data(), clean.data());
        assert!(in_unit_range(&a.degraded), "{kind:?}");
        assert_eq!(kind.index(), kind as usize);
    }
}

#[test]
fn batch_labels_are_roughly_uniform() {
    let tasks: Vec<Task> = [
        DegradationKind::Noise,
        DegradationKind::Haze,
        DegradationKind::Rain,
    ]
    .into_iter()
    .map(Task::new)
    .collect();
    let b = make_batch(&tasks, 300, 8, 17, true).unwrap();
    let mut counts = [0usize; 3];
    for &l in &b.labels {
        counts[l] += 1;
    }
    assert!(counts.iter().all(|c| (70..=130).contains(c)), "{counts:?}");
    assert_eq!(b.clean.shape(), &[300, 8, 8, 3]);
    let again = make_batch(&tasks, 300, 8, 17, true).unwrap();
    assert_eq!(again.degraded.data(), b.degraded.data());
    assert_eq!(again.labels, b.labels);
    assert!(make_batch(&tasks, 4, 12, 0, false).is_err());
}

#[test]
fn flips_are_involutions_and_shared_by_pair() {
    let img = synth_clean(3, 10, 14);
    assert_eq!(flip_horizontal(&flip_horizontal(&img)).data(), img.data());
    assert_eq!(flip_vertical(&flip_vertical(&img)).data(), img.data());
    assert_ne!(flip_horizontal(&img).data(), img.data());
    // A zero-noise task leaves degraded == clean, which survives the random
    // flips only if both images get the same ones.
    let mut flipped = 0;
    for seed in 0..16 {
        let s = make_sample(Task::noise(0.0), 16, seed, true).unwrap();
        assert_eq!(s.clean.data(), s.degraded.data());
        let plain = make_sample(Task::noise(0.0), 16, seed, false).unwrap();
        flipped += usize::from(plain.clean.data() != s.clean.data());
    }
    assert!(flipped > 0);
}
