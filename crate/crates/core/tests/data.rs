mod common;

use std::fs;

use ndarray::{Array2, Array3};
use partseg::data::{
    generate_synthetic, load_manifest, object_labels, oracle_obj_decode, pred_all_decode, read_image, read_label,
    write_image, write_label, write_manifest, SynthConfig,
};
use partseg::losses::derive_targets;
use partseg::metrics::LabelGrid;
use partseg::model::PartSegModel;
use partseg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn tree_digest(root: &std::path::Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, format!("{:x}", Sha256::digest(fs::read(&p).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_generation_is_byte_identical() {
    let cfg = SynthConfig { train_samples: 6, val_samples: 3, ..SynthConfig::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic(&cfg, a.path()).unwrap();
    generate_synthetic(&cfg, b.path()).unwrap();
    let (da, db) = (tree_digest(a.path()), tree_digest(b.path()));
    assert!(da.len() >= 9 * 2);
    assert_eq!(da, db);

    let other = SynthConfig { seed: 1, ..cfg };
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&other, c.path()).unwrap();
    assert_ne!(da, tree_digest(c.path()));
}

#[test]
fn written_dataset_loads_back() {
    let cfg = SynthConfig { train_samples: 4, val_samples: 3, ..SynthConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&cfg, dir.path()).unwrap();
    let refs = load_manifest(dir.path().join("val.tsv")).unwrap();
    assert_eq!(refs.len(), 3);
    for r in &refs {
        let s = r.load(&ds.taxonomy).unwrap();
        assert_eq!(s.image.dim(), (64, 64, 3));
        assert_eq!(s.label.dim(), (64, 64));
    }
}

#[test]
fn manifest_errors_name_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    let lbl = dir.path().join("a_label.png");
    write_image(&img, &Array3::zeros((4, 4, 3))).unwrap();
    write_label(&lbl, &LabelGrid::zeros(4, 4)).unwrap();

    let m = dir.path().join("m.tsv");
    fs::write(&m, "# header\n\na.png\ta_label.png\nb.png\n").unwrap();
    assert!(matches!(load_manifest(&m), Err(Error::BadManifestRow { row: 4, .. })));

    fs::write(&m, "a.png\ta_label.png\nmissing.png\ta_label.png\n").unwrap();
    assert!(matches!(load_manifest(&m), Err(Error::MissingFile { row: 2, .. })));

    write_manifest(&m, &[("a.png".into(), "a_label.png".into())]).unwrap();
    let refs = load_manifest(&m).unwrap();
    assert_eq!(refs[0].id(), "a");

    let t = partseg::taxonomy::Taxonomy::build(&["a's x"], &[]).unwrap();
    write_label(&lbl, &LabelGrid(Array2::from_elem((4, 4), 5))).unwrap();
    assert!(matches!(refs[0].load(&t), Err(Error::BadLabelRange { value: 5, .. })));
}

#[test]
fn png_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let label = LabelGrid(Array2::from_shape_fn((5, 7), |_| rng.gen_range(0..1000)));
    let p = dir.path().join("l.png");
    write_label(&p, &label).unwrap();
    assert_eq!(read_label(&p).unwrap(), label);

    let img = Array3::from_shape_fn((5, 7, 3), |_| rng.gen::<f64>());
    let q = dir.path().join("i.png");
    write_image(&q, &img).unwrap();
    let back = read_image(&q).unwrap();
    for (a, b) in img.iter().zip(back.iter()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }

    let eight = image::GrayImage::from_raw(2, 1, vec![3, 250]).unwrap();
    let r = dir.path().join("e.png");
    eight.save(&r).unwrap();
    assert_eq!(read_label(&r).unwrap().0, ndarray::array![[3u16, 250]]);
}

#[test]
fn targets_agree_with_object_labels() {
    let (tax, train, _) = common::tiny_data(5, 0, 4);
    for s in &train {
        let t = derive_targets(&s.label, &tax).unwrap();
        let obj = object_labels(&s.label, &tax).unwrap();
        assert_eq!(obj, s.object_label);
        assert_eq!(t.objpart.len(), tax.num_pairs() + 1);
        assert_eq!(t.objects.len(), tax.num_objects() + 1);
        assert_eq!(t.parts.len(), tax.num_parts());
        for ((y, x), &o) in obj.0.indexed_iter() {
            for (i, m) in t.objects.iter().enumerate().take(tax.num_objects()) {
                assert_eq!(m[[y, x]], o as usize == i + 1);
            }
            assert_eq!(t.objects[tax.num_objects()][[y, x]], o == 0);
            let covered = t.objpart.iter().filter(|m| m[[y, x]]).count();
            assert_eq!(covered, 1);
        }
    }
}

#[test]
fn oracle_decoding_stays_inside_ground_truth_objects() {
    let (tax, _, val) = common::tiny_data(0, 6, 9);
    let model = PartSegModel::new(common::tiny_model()).unwrap();
    for s in &val {
        let out = model.forward(&s.image, &tax).unwrap();
        let pred = oracle_obj_decode(&out, &s.object_label, &tax).unwrap();
        for ((y, x), &v) in pred.0.indexed_iter() {
            let o = s.object_label.0[[y, x]];
            if o == 0 {
                assert_eq!(v, 0);
            } else {
                assert_eq!(tax.pair(v as usize - 1).0 + 1, o as usize);
            }
        }
        let all = pred_all_decode(&out);
        assert!(all.max_value() as usize <= tax.num_pairs());
    }
}
