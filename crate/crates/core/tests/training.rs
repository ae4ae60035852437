use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use usaad::blursynth::{apply_blur, sample_kernel};
use usaad::history::{read_loss_csv, RowScale};
use usaad::imaging::{resample_bicubic, ImageBatch};
use usaad::synth::natural;
use usaad::trainer::{fit_with, Corpus, Preset, TrainConfig, Trainer};
use usaad::Error;

fn corpus(n: u64, size: usize) -> Corpus {
    let blur = (0..n)
        .map(|i| apply_blur(&natural(100 + i, size, 3), &sample_kernel(i, 9, 0.5).unwrap()).unwrap())
        .collect();
    let sharp = (0..n).map(|i| natural(200 + i, size, 3)).collect();
    Corpus { blur, sharp }
}

fn tiny(out: &Path, n_scales: usize, iterations: u64) -> TrainConfig {
    TrainConfig {
        n_scales,
        image_size: 64,
        base_width: 8,
        reblur_width: 8,
        disc_width: 8,
        disc_layers: 2,
        residual_blocks: 2,
        iterations,
        checkpoint_every: 2,
        seed: 11,
        out_dir: out.to_path_buf(),
        ..Default::default()
    }
}

fn params(t: &Trainer) -> Vec<Vec<f32>> {
    t.nets.store.ids().map(|id| t.nets.store.get(id).data().to_vec()).collect()
}

#[test]
fn train_step_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(2, 64);
    let config = tiny(dir.path(), 2, 0);
    let (blur, sharp) = data.batch(&config, 0).unwrap();
    let mut a = Trainer::new(config.clone()).unwrap();
    let mut b = Trainer::new(config).unwrap();
    for _ in 0..2 {
        assert_eq!(a.train_step(&blur, &sharp).unwrap(), b.train_step(&blur, &sharp).unwrap());
    }
    assert!(a.to_bytes() == b.to_bytes());
}

#[test]
fn one_step_updates_both_players_through_disjoint_parameter_sets() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(2, 64);
    let config = tiny(dir.path(), 2, 0);
    let mut t = Trainer::new(config.clone()).unwrap();
    let g: HashSet<_> = t.nets.generator_params().into_iter().collect();
    let d: HashSet<_> = t.nets.discriminator_params().into_iter().collect();
    assert!(g.is_disjoint(&d));
    assert_eq!(g.len() + d.len(), t.nets.store.len());

    let before = t.nets.store.clone();
    let (blur, sharp) = data.batch(&config, 0).unwrap();
    t.train_step(&blur, &sharp).unwrap();
    let moved = |ids: &HashSet<_>| ids.iter().filter(|&&id| before.get(id) != t.nets.store.get(id)).count();
    assert!(moved(&g) > g.len() / 2, "{} of {} generator tensors moved", moved(&g), g.len());
    assert!(moved(&d) > d.len() / 2, "{} of {} discriminator tensors moved", moved(&d), d.len());
}

#[test]
fn cycle_only_training_lowers_the_cycle_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(4, 64);
    let config = TrainConfig { lambda_adv: 0.0, iterations: 50, checkpoint_every: 50, ..tiny(dir.path(), 2, 50) };
    let out = fit_with(&config, &data, None).unwrap();
    let ys: Vec<f64> = out.history.iter().map(|b| b.finest().cycle()).collect();
    let n = ys.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        sxy += (i as f64 - mean_x) * (y - mean_y);
        sxx += (i as f64 - mean_x).powi(2);
    }
    assert!(sxy / sxx < 0.0, "slope {} over {ys:?}", sxy / sxx);
}

#[test]
fn zero_iterations_only_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit_with(&tiny(dir.path(), 2, 0), &corpus(2, 64), None).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.checkpoints, vec![Trainer::checkpoint_path(dir.path(), 0)]);
    assert!(read_loss_csv(&out.loss_csv).unwrap().is_empty());
}

#[test]
fn loss_csv_has_scale_rows_and_a_total_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit_with(&tiny(dir.path(), 3, 4), &corpus(2, 64), None).unwrap();
    let text = fs::read_to_string(&out.loss_csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * (3 + 1));
    let rows = read_loss_csv(&out.loss_csv).unwrap();
    let totals: Vec<_> = rows.iter().filter(|r| r.scale == RowScale::Total).collect();
    assert_eq!(totals.len(), 4);
    for (bundle, row) in out.history.iter().zip(totals) {
        assert_eq!(row.total, bundle.total);
    }
    let names: Vec<_> = out.checkpoints.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_owned()).collect();
    assert_eq!(names, ["ckpt_00000000.usaad", "ckpt_00000002.usaad", "ckpt_00000004.usaad"]);
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit_with(&tiny(dir.path(), 2, 3), &corpus(2, 64), None).unwrap();
    let path = out.checkpoints.last().unwrap();
    let bytes = fs::read(path).unwrap();
    let loaded = Trainer::load(path).unwrap();
    assert_eq!(loaded.iteration, 3);
    assert!(loaded.to_bytes() == bytes);
    assert_eq!(params(&loaded), params(&out.trainer));

    let again = dir.path().join("again.usaad");
    loaded.save(&again).unwrap();
    assert!(fs::read(&again).unwrap() == bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = Trainer::new(tiny(dir.path(), 1, 0)).unwrap().to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_header = bytes.clone();
    bad_header[14] ^= 0xff;
    for damaged in [&bytes[..bytes.len() - 5], &bytes[..6], &bad_magic[..], &bad_header[..]] {
        assert!(matches!(Trainer::from_bytes(damaged), Err(Error::Corrupt(_))));
    }
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0; 4]);
    assert!(matches!(Trainer::from_bytes(&extra), Err(Error::Corrupt(_))));
    assert!(matches!(Trainer::load(&dir.path().join("missing.usaad")), Err(Error::Io { .. })));
}

#[test]
fn inference_keeps_shape_range_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(tiny(dir.path(), 3, 0)).unwrap();
    let odd = resample_bicubic(&natural(5, 64, 3), 37, 50).clamped();
    let a = t.infer(&odd).unwrap();
    assert_eq!(a.dims(), (1, 3, 37, 50));
    assert!(a.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(a.tensor().data() == t.infer(&odd).unwrap().tensor().data());
    assert!(matches!(t.infer(&ImageBatch::zeros(1, 1, 32, 32)), Err(Error::Shape(_))));
}

#[test]
fn three_scale_preset_fits_eight_images_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = TrainConfig { base_width: 16, reblur_width: 16, disc_width: 16, residual_blocks: 9, ..tiny(dir.path(), 3, 8) };
    Preset::Net3.apply(&mut config);
    let started = Instant::now();
    let out = fit_with(&config, &corpus(8, 64), None).unwrap();
    assert_eq!(out.trainer.iteration, 8);
    assert!(out.history.iter().all(|b| b.total.is_finite()));
    assert!(started.elapsed().as_secs() < 300, "{:?}", started.elapsed());
}
