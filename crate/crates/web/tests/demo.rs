use usaad_web::demo::{attention, blur_scene, quality, KERNEL_VIEW};

#[test]
fn zero_intensity_leaves_the_scene_untouched() {
    let out = blur_scene(3, 64, 1, 15, 0.0).unwrap();
    assert_eq!(out.sharp, out.blurred);
    assert_eq!(out.support, 1);
    assert_eq!(out.psnr, 100.0);
    assert_eq!(out.sharp.len(), 64 * 64 * 4);
    assert_eq!(out.kernel.len(), KERNEL_VIEW * KERNEL_VIEW * 4);
    assert!(out.sharp.chunks_exact(4).all(|p| p[3] == 255));
}

#[test]
fn blur_is_seeded_and_lowers_psnr() {
    let a = blur_scene(3, 96, 7, 15, 0.8).unwrap();
    let b = blur_scene(3, 96, 7, 15, 0.8).unwrap();
    assert_eq!(a.blurred, b.blurred);
    assert!(a.psnr < 40.0 && a.support > 1, "psnr {} support {}", a.psnr, a.support);
    // the heaviest tap is drawn white
    assert!(a.kernel.chunks_exact(4).any(|p| p[0] == 255));
    assert!(blur_scene(3, 8, 7, 15, 0.5).is_err());
    assert!(blur_scene(3, 64, 7, 14, 0.5).is_err());
}

#[test]
fn attention_matches_the_logistic_of_the_product() {
    let beta = attention(&[1.0, -1.0, 0.0], &[1.0, 1.0, 5.0]).unwrap();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    for (b, want) in beta.iter().zip([sig(1.0), sig(-1.0), 0.5]) {
        assert!((b - want).abs() < 1e-12);
    }
    assert!(attention(&[1.0], &[1.0, 2.0]).is_err());
    assert!(attention(&[], &[]).is_err());
}

#[test]
fn quality_prefers_the_sharp_scene() {
    let out = blur_scene(5, 128, 2, 15, 0.7).unwrap();
    let sharp = quality(&out.sharp, 128, 128).unwrap();
    let blurred = quality(&out.blurred, 128, 128).unwrap();
    assert!(blurred.nr_score > sharp.nr_score, "{blurred:?} vs {sharp:?}");
    assert!(sharp.piqe.is_some());

    let small = blur_scene(5, 48, 2, 9, 0.5).unwrap();
    assert_eq!(quality(&small.sharp, 48, 48).unwrap().piqe, None);
    assert!(quality(&out.sharp, 64, 64).is_err());
}
