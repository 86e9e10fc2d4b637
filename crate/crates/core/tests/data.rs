mod common;

use geopeft::backbone::SampleMetadata;
use geopeft::data::synth::{generate, write_dataset, SyntheticConfig};
use geopeft::data::{
    compute_stats, decode_sample, denormalize, encode_image, impute_missing, normalize, subset_bands, BandStats, DataError,
    DatasetManifest, Sample, Split, IGNORE_INDEX,
};
use geopeft::train::PreparedData;

fn sample(bands: &[&str], h: usize, w: usize) -> Sample {
    let c = bands.len();
    Sample {
        id: "s0".into(),
        bands: bands.iter().map(|b| b.to_string()).collect(),
        height: h,
        width: w,
        image: (0..c * h * w).map(|i| (i as f32 * 0.37).sin() * 3.0 + i as f32 * 0.01).collect(),
        mask: (0..h * w).map(|i| (i % 3) as u8).collect(),
        meta: SampleMetadata { lat: 10.0, lon: 20.0, day_of_year: 100.0, year: 2020 },
        region: "r".into(),
    }
}

fn names(b: &[&str]) -> Vec<String> {
    b.iter().map(|s| s.to_string()).collect()
}

#[test]
fn decode_sample_round_trip_and_rejections() {
    let s = sample(&["a", "b"], 3, 4);
    let sc = serde_json::to_vec(&s.sidecar()).unwrap();
    let img = encode_image(&s.image);
    assert_eq!(decode_sample(&sc, &img, &s.mask, 3).unwrap(), s);

    // truncated image blob
    assert!(matches!(decode_sample(&sc, &img[..img.len() - 4], &s.mask, 3), Err(DataError::Sample { .. })));
    // short mask
    assert!(decode_sample(&sc, &img, &s.mask[1..], 3).is_err());
    // class out of range for K = 2, but 255 is fine
    assert!(decode_sample(&sc, &img, &s.mask, 2).is_err());
    let mut m = s.mask.clone();
    m[0] = IGNORE_INDEX;
    m.iter_mut().filter(|v| **v == 2).for_each(|v| *v = 1);
    assert!(decode_sample(&sc, &img, &m, 2).is_ok());
    // unknown sidecar field
    let mut v: serde_json::Value = serde_json::from_slice(&sc).unwrap();
    v["extra"] = 1.into();
    assert!(decode_sample(&serde_json::to_vec(&v).unwrap(), &img, &s.mask, 3).is_err());
    // invalid acquisition date
    let mut bad = s.clone();
    bad.meta.day_of_year = 400.0;
    let sc2 = serde_json::to_vec(&bad.sidecar()).unwrap();
    assert!(decode_sample(&sc2, &img, &s.mask, 3).is_err());
}

#[test]
fn manifest_validation_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { samples_per_region: 4, extent: (8, 8), ..Default::default() };
    let gen = generate(&cfg).unwrap();
    let m = write_dataset(dir.path(), &cfg, &gen).unwrap();
    let (loaded, root) = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(root, dir.path());

    let check = |f: &dyn Fn(&mut DatasetManifest)| {
        let mut x = m.clone();
        f(&mut x);
        let bytes = serde_json::to_vec(&x).unwrap();
        DatasetManifest::parse(&bytes)
    };
    assert!(check(&|_| {}).is_ok());
    assert!(check(&|x| x.num_classes = 1).is_err());
    assert!(check(&|x| x.class_names.pop().map(|_| ()).unwrap()).is_err());
    assert!(check(&|x| x.bands.push(x.bands[0].clone())).is_err());
    assert!(check(&|x| x.stats[0].std = 0.0).is_err());
    assert!(check(&|x| x.samples[1].id = x.samples[0].id.clone()).is_err());
    assert!(check(&|x| x.samples[0].labels.push(7)).is_err());
    assert!(check(&|x| x.samples[0].image = "../escape.img".into()).is_err());
    assert!(check(&|x| x.samples[0].mask = "/abs.mask".into()).is_err());
    assert!(check(&|x| {
        x.splits.insert("ghost".into(), Split::Test);
    })
    .is_err());
    assert!(DatasetManifest::parse(b"{not json").is_err());

    // a missing blob is caught at load time
    std::fs::remove_file(dir.path().join(&m.samples[0].mask)).unwrap();
    assert!(DatasetManifest::load(&dir.path().join("manifest.json")).is_err());
}

#[test]
fn normalize_then_denormalize_is_identity() {
    let s = sample(&["a", "b"], 4, 5);
    let stats = vec![
        BandStats { band: "b".into(), mean: -1.5, std: 0.25 },
        BandStats { band: "a".into(), mean: 2.0, std: 3.0 },
    ];
    let n = normalize(&s, &stats).unwrap();
    // band a: (x − 2) / 3
    let x = s.image[7] as f64;
    assert!(((n.image[7] as f64) - (x - 2.0) / 3.0).abs() < 1e-6);
    let back = denormalize(&n, &stats).unwrap();
    for (a, b) in back.image.iter().zip(&s.image) {
        assert!((a - b).abs() < 1e-5);
    }
    assert!(matches!(normalize(&s, &stats[..1]), Err(DataError::MissingStats(b)) if b == "a"));
}

#[test]
fn compute_stats_matches_two_pass_formula() {
    let a = sample(&["x", "y"], 3, 3);
    let mut b = sample(&["x", "y"], 3, 3);
    b.image.iter_mut().for_each(|v| *v = *v * 0.5 + 1.0);
    let stats = compute_stats([&a, &b], &names(&["y", "x"])).unwrap();
    for (i, band) in ["y", "x"].iter().enumerate() {
        let c = if *band == "x" { 0 } else { 1 };
        let vals: Vec<f64> = [&a, &b].iter().flat_map(|s| s.band_plane(c).iter().map(|&v| v as f64)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert_eq!(stats[i].band, *band);
        assert!((stats[i].mean - mean).abs() < 1e-9);
        assert!((stats[i].std - var.sqrt()).abs() < 1e-9);
    }
    let mut flat = a.clone();
    flat.image.iter_mut().for_each(|v| *v = 1.0);
    assert!(compute_stats([&flat], &names(&["x"])).is_err());
    assert!(compute_stats([&a], &names(&["z"])).is_err());
}

#[test]
fn subset_and_impute_restore_full_layout_with_zero_planes() {
    let s = sample(&["a", "b", "c"], 2, 3);
    let sub = subset_bands(&s, &names(&["c", "a"])).unwrap();
    // original order is kept
    assert_eq!(sub.bands, names(&["a", "c"]));
    assert_eq!(sub.band_plane(1), s.band_plane(2));
    let full = impute_missing(&sub, &s.bands).unwrap();
    assert_eq!(full.band_plane(0), s.band_plane(0));
    assert!(full.band_plane(1).iter().all(|&v| v == 0.0));
    assert_eq!(full.band_plane(2), s.band_plane(2));
    assert!(subset_bands(&s, &names(&["q"])).is_err());
    assert!(impute_missing(&s, &names(&["a"])).is_err());
}

#[test]
fn synthetic_generation_is_deterministic_and_seed_sensitive() {
    let cfg = SyntheticConfig { samples_per_region: 5, extent: (16, 16), ..Default::default() };
    let a = generate(&cfg).unwrap();
    let b = generate(&cfg).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.splits, b.splits);
    let c = generate(&SyntheticConfig { seed: 1, ..cfg.clone() }).unwrap();
    assert_ne!(a.samples[0].image, c.samples[0].image);
    // the hold-out region is entirely ghos, others never are
    for s in &a.samples {
        assert_eq!(a.splits[&s.id] == Split::Ghos, s.region == cfg.ghos_region);
    }
    assert!(SyntheticConfig { transect_cuts: (0.8, 0.6), ..cfg.clone() }.validate().is_err());
    assert!(SyntheticConfig { regions: vec!["one".into()], ghos_region: "one".into(), ..cfg }.validate().is_err());
}

#[test]
fn prepared_data_from_disk_matches_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { samples_per_region: 5, extent: (16, 16), ..Default::default() };
    let gen = generate(&cfg).unwrap();
    let m = write_dataset(dir.path(), &cfg, &gen).unwrap();
    let mut run = common::run_config(geopeft::peft::FreezePolicy::LinearProbe, 0, 1);
    run.model.backbone.image_size = (16, 16);
    let disk = PreparedData::from_manifest(&m, dir.path(), &run).unwrap();
    let mem = PreparedData::from_generated(&gen, cfg.num_classes, &cfg.bands, (16, 16)).unwrap();
    assert_eq!(disk.splits, mem.splits);
    // train-split statistics normalize the train split to zero mean
    let train = disk.split(Split::Train);
    let hw = 16 * 16;
    let mean: f64 = train.iter().flat_map(|s| s.image[..hw].iter()).map(|&v| v as f64).sum::<f64>() / (train.len() * hw) as f64;
    assert!(mean.abs() < 1e-4, "{mean}");
}

#[test]
fn band_subset_request_reorders_and_pads() {
    let cfg = SyntheticConfig { samples_per_region: 3, extent: (14, 15), ..Default::default() };
    let gen = generate(&cfg).unwrap();
    let pick = vec![cfg.bands[3].clone(), cfg.bands[0].clone()];
    let p = PreparedData::from_generated(&gen, cfg.num_classes, &pick, (16, 16)).unwrap();
    for s in p.splits.values().flatten() {
        assert_eq!(s.bands, pick);
        assert_eq!((s.height, s.width), (16, 16));
        // one padded row on top, one on the bottom; one column on the right
        assert!(s.mask[..16].iter().all(|&m| m == IGNORE_INDEX));
        assert_eq!(s.mask.iter().filter(|&&m| m == IGNORE_INDEX).count(), 16 * 16 - 14 * 15);
    }
}
