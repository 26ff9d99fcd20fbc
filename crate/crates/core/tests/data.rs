//! Synthetic generator, manifest loading and batching.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use ram_core::data::*;
use ram_core::tensor::Tensor;

fn spec(noise: f64, cue: CueRegion, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        noise_std: noise,
        cue_region: cue,
        seed,
        ..SyntheticSpec::default()
    }
}

/// Top-1 of a brute-force pixel matcher comparing query and gallery images
/// only on the rows of the query identity's cue band.
fn cue_band_top1(ds: &SyntheticDataset) -> f64 {
    let h = ds.images[0].image.shape()[1];
    let w = ds.images[0].image.shape()[2];
    let band_of = |id: u64| ds.identities[id as usize].band.rows(h);
    let gallery: Vec<&SyntheticImage> = ds.images.iter().filter(|i| i.split == "gallery").collect();
    let queries: Vec<&SyntheticImage> = ds.images.iter().filter(|i| i.split == "query").collect();
    let mut hits = 0;
    for q in &queries {
        let rows = band_of(q.vehicle_id);
        let dist = |g: &SyntheticImage| {
            let mut d = 0.0;
            for c in 0..3 {
                for y in rows.clone() {
                    for x in 0..w {
                        let diff = q.image.get(&[c, y, x]) - g.image.get(&[c, y, x]);
                        d += diff * diff;
                    }
                }
            }
            d
        };
        let best = gallery
            .iter()
            .map(|g| (dist(g), g.vehicle_id))
            .fold((f64::INFINITY, u64::MAX), |a, b| if b.0 < a.0 { b } else { a });
        hits += usize::from(best.1 == q.vehicle_id);
    }
    hits as f64 / queries.len() as f64
}

#[test]
fn cue_band_pixel_matcher_is_perfect_without_noise() {
    for cue in [CueRegion::Random, CueRegion::Fixed(Band::Bottom), CueRegion::Fixed(Band::Top)] {
        for seed in 0..3 {
            let ds = generate_synthetic(&spec(0.0, cue, seed)).unwrap();
            assert_eq!(cue_band_top1(&ds), 1.0, "cue {cue} seed {seed}");
        }
    }
}

#[test]
fn identity_lives_only_in_the_cue_patch() {
    let s = SyntheticSpec { num_colors: 1, num_types: 1, ..spec(0.0, CueRegion::Random, 5) };
    let ds = generate_synthetic(&s).unwrap();
    let p = s.patch_size;
    let first: Vec<&SyntheticImage> = ds.images.iter().step_by(s.images_per_id).collect();
    let inside = |info: &IdentityInfo, y: usize, x: usize| {
        let (t, l) = info.patch_origin;
        (t..t + p).contains(&y) && (l..l + p).contains(&x)
    };
    for a in 0..s.num_ids {
        for b in a + 1..s.num_ids {
            let (ia, ib) = (&ds.identities[a], &ds.identities[b]);
            for c in 0..3 {
                for y in 0..s.height {
                    for x in 0..s.width {
                        if !inside(ia, y, x) && !inside(ib, y, x) {
                            assert_eq!(first[a].image.get(&[c, y, x]), first[b].image.get(&[c, y, x]));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn noiseless_images_repeat_within_an_identity() {
    let ds = generate_synthetic(&spec(0.0, CueRegion::Random, 2)).unwrap();
    for chunk in ds.images.chunks(10) {
        assert!(chunk.iter().all(|i| i.bytes == chunk[0].bytes));
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn written_datasets_are_byte_identical_per_seed() {
    let s = SyntheticSpec::default();
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = write_synthetic(&s, a.path()).unwrap();
    write_synthetic(&s, b.path()).unwrap();
    write_synthetic(&SyntheticSpec { seed: 1, ..s.clone() }, c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
    assert_eq!(m.samples.len(), s.num_ids * s.images_per_id);
    assert_eq!(ta.len(), m.samples.len() + 2);
}

#[test]
fn loaded_synthetic_manifest_partitions_identities() {
    let s = SyntheticSpec::default();
    let dir = tempfile::tempdir().unwrap();
    let m = write_synthetic(&s, dir.path()).unwrap();
    let count = |split| m.indices(&[split]).len();
    let held_out = s.num_test_ids;
    assert_eq!(count(Split::Train), (s.num_ids - held_out) * s.images_per_id);
    assert_eq!(count(Split::Query), held_out * s.queries_per_id);
    assert_eq!(count(Split::Gallery), held_out * (s.images_per_id - s.queries_per_id));

    let labels: BTreeSet<usize> = m.indices(&[Split::Train]).iter().map(|&i| m.train_label(&m.samples[i]).unwrap()).collect();
    assert_eq!(labels, (0..m.num_train_ids()).collect());
    let train_ids: BTreeSet<u64> = m.indices(&[Split::Train]).iter().map(|&i| m.samples[i].vehicle_id).collect();
    for i in m.indices(&[Split::Query, Split::Gallery]) {
        assert!(!train_ids.contains(&m.samples[i].vehicle_id));
        assert_eq!(m.train_label(&m.samples[i]), None);
    }
    assert_eq!(m.image_dims, Some((3, s.height, s.width)));

    let data = Dataset::load(&m, &[Split::Train], (3, 24, 24), ResizeMode::Nearest).unwrap();
    assert_eq!(data.dims(), (3, 24, 24));
    assert_eq!(data.len(), count(Split::Train));
}

#[test]
fn manifest_with_attribute_gaps_and_cameras() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::new(vec![3, 2, 2], vec![0.5; 12]).unwrap();
    fs::write(dir.path().join("a.ppm"), encode_image(&img).unwrap()).unwrap();
    let text = "path,id,color,type,camera,split\n\
                a.ppm,7,red,,c1,train\n\
                a.ppm,3,,sedan,c2,train\n\
                a.ppm,9,blue,suv,c1,query\n\
                a.ppm,9,,,c3,gallery\n";
    let path = dir.path().join("m.csv");
    fs::write(&path, text).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.num_train_ids(), 2);
    assert_eq!(m.train_label(&m.samples[1]), Some(0));
    assert_eq!(m.train_label(&m.samples[0]), Some(1));
    assert_eq!(m.samples[0].type_id, None);
    assert_eq!(m.samples[3].camera_id.as_deref(), Some("c3"));
    assert_eq!(m.colors.len(), 2);

    fs::write(&path, text.replace("gallery", "probe")).unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("m.csv:5") && err.contains("probe"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_partition_the_training_set(n in 1usize..60, bs in 1usize..16, seed: u64, epoch in 0usize..50) {
        prop_assume!(bs <= n);
        let b = batch_order(n, bs, seed, epoch).unwrap();
        prop_assert_eq!(b.len(), n.div_ceil(bs));
        prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= bs));
        let mut all = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn batch_tensors_align_with_labels(bs in 1usize..12, seed: u64) {
        let ds = common::small_synthetic(6, seed % 100);
        let data = ds.dataset(&[Split::Train]).unwrap();
        let attrs = vec!["color".to_string(), "type".to_string()];
        for b in make_batches(&data, bs, seed, 0, &attrs).unwrap() {
            let n = b.indices.len();
            prop_assert_eq!(b.images.shape(), &[n, 3, 32, 32][..]);
            for (k, &i) in b.indices.iter().enumerate() {
                prop_assert_eq!(b.ids[k], data.labels[i]);
                prop_assert_eq!(&b.images.data()[k * 3072..(k + 1) * 3072], data.image(i).data());
                prop_assert_eq!(b.attributes[0][k], data.samples[i].color_id);
                prop_assert_eq!(b.attributes[1][k], data.samples[i].type_id);
            }
        }
    }

    #[test]
    fn eight_bit_images_round_trip(h in 1usize..6, w in 1usize..6, pixels in proptest::collection::vec(any::<u8>(), 75)) {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(&pixels[..3 * h * w]);
        let img = decode_image(&bytes).unwrap();
        prop_assert_eq!(img.shape(), &[3, h, w][..]);
        prop_assert_eq!(encode_image(&img).unwrap(), bytes);
    }
}
