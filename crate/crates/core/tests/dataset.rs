use cainet::aux_targets::Grid;
use cainet::dataset::{
    class_temperature, colorize, load_sample, load_split, save_label_png, save_sample, save_sample_rgbt, synth_scene,
    write_synth_corpus, DatasetManifest, Layout, Split, SynthOptions,
};
use cainet::Error;
use image::{GrayImage, RgbImage};

#[test]
fn paired_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_scene(5, "a", 12, 10, 4, &SynthOptions::default());
    save_sample(dir.path(), &s).unwrap();
    let mut m = DatasetManifest::new(4, Layout::Paired);
    m.train.push("a".into());
    m.save(dir.path()).unwrap();
    let back = load_sample(dir.path(), &DatasetManifest::load(dir.path()).unwrap(), "a").unwrap();
    // Synthetic intensities are quantized to bytes before they become tensors.
    assert_eq!(back, s);
}

#[test]
fn rgbt_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_scene(6, "b", 8, 8, 3, &SynthOptions::default());
    save_sample_rgbt(dir.path(), &s).unwrap();
    let mut m = DatasetManifest::new(3, Layout::Rgbt);
    m.val.push("b".into());
    let back = load_split(dir.path(), &m, Split::Val).unwrap();
    assert_eq!(back, vec![s]);
}

#[test]
fn label_out_of_range_names_the_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_scene(1, "c", 6, 6, 3, &SynthOptions::default());
    save_sample(dir.path(), &s).unwrap();
    let mut bad = vec![0u8; 36];
    bad[2 * 6 + 4] = 7;
    GrayImage::from_raw(6, 6, bad).unwrap().save(dir.path().join("labels/c.png")).unwrap();
    let m = DatasetManifest::new(3, Layout::Paired);
    match load_sample(dir.path(), &m, "c") {
        Err(Error::LabelOutOfRange { id, row, col, value, max }) => {
            assert_eq!((id.as_str(), row, col, value, max), ("c", 2, 4, 7, 2));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn size_mismatch_and_missing_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_scene(2, "d", 6, 6, 3, &SynthOptions::default());
    save_sample(dir.path(), &s).unwrap();
    let m = DatasetManifest::new(3, Layout::Paired);
    RgbImage::new(5, 6).save(dir.path().join("images/d.png")).unwrap();
    assert!(matches!(load_sample(dir.path(), &m, "d"), Err(Error::SizeMismatch { .. })));
    assert!(matches!(load_sample(dir.path(), &m, "nope"), Err(Error::MissingFile(_))));
    assert!(matches!(DatasetManifest::load(&dir.path().join("empty")), Err(Error::MissingFile(_))));
}

#[test]
fn colorize_uses_the_palette() {
    let pred = Grid::new(1, 3, vec![0, 2, 1]).unwrap();
    let img = colorize(&pred, &[[1, 2, 3], [4, 5, 6], [7, 8, 9]]).unwrap();
    assert_eq!(img.as_raw(), &[1, 2, 3, 7, 8, 9, 4, 5, 6]);
    assert!(matches!(colorize(&pred, &[[0; 3]; 2]), Err(Error::MissingPalette(2))));
}

#[test]
fn label_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let labels = Grid::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
    let p = dir.path().join("l.png");
    save_label_png(&labels, &p).unwrap();
    assert_eq!(image::open(&p).unwrap().to_luma8().as_raw(), &[0, 1, 2, 2, 1, 0]);
    let wide = Grid::new(1, 1, vec![300]).unwrap();
    assert!(save_label_png(&wide, &p).is_err());
}

#[test]
fn synthetic_corpus_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_synth_corpus(a.path(), 9, 3, 1, (8, 8), 3, &SynthOptions::default()).unwrap();
    let mb = write_synth_corpus(b.path(), 9, 3, 1, (8, 8), 3, &SynthOptions::default()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!((ma.train.len(), ma.val.len()), (3, 1));
    for id in ma.train.iter().chain(&ma.val) {
        for dir in ["images", "thermal", "labels"] {
            let f = format!("{dir}/{id}.png");
            assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
        }
    }
}

/// Thermal alone should identify the classes: nearest class temperature per pixel.
#[test]
fn thermal_threshold_classifier_is_accurate() {
    let k = 3;
    let (mut right, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let s = synth_scene(seed, "t", 32, 32, k, &SynthOptions::dark());
        for (i, &l) in s.labels.data.iter().enumerate() {
            let t = s.thermal.data()[i] as f64;
            let guess = (0..k)
                .min_by(|&a, &b| {
                    (t - class_temperature(a, k)).abs().total_cmp(&(t - class_temperature(b, k)).abs())
                })
                .unwrap();
            right += (guess as u32 == l) as usize;
            total += 1;
        }
    }
    let acc = right as f64 / total as f64;
    assert!(acc > 0.9, "thermal-only accuracy {acc}");
}

#[test]
fn dark_scenes_keep_rgb_below_five_percent_plus_noise() {
    let s = synth_scene(3, "d", 32, 32, 3, &SynthOptions::dark());
    let mean = s.rgb.sum() / s.rgb.numel() as f64;
    assert!(mean < 0.06, "{mean}");
    let day = synth_scene(3, "d", 32, 32, 3, &SynthOptions::default());
    assert_eq!(day.labels, s.labels);
}
