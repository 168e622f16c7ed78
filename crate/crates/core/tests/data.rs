mod common;

use std::collections::HashSet;
use std::path::Path;

use common::{plain_vocab, toy_config};
use kzread::checkpoint::{Checkpoint, MAGIC, VERSION};
use kzread::data::{
    generate_corpus, generate_document, load_dataset, make_split, placements_tsv, read_image,
    write_dataset, write_pgm, SynthSettings, TaggedId,
};
use kzread::trainer::{TrainConfig, Trainer};
use kzread::{Error, Model, Tensor, Vocabulary};
use proptest::prelude::*;

#[test]
fn dataset_round_trip() {
    let spec = SynthSettings::default().build().unwrap();
    let docs = generate_corpus(&spec, 4, 11).unwrap();
    let samples: Vec<_> = docs.iter().map(|d| d.sample.clone()).collect();
    let dir = tempfile::tempdir().unwrap();
    let vocab = spec.vocabulary();
    write_dataset(dir.path(), &samples, &vocab).unwrap();
    let back = load_dataset(dir.path(), &Vocabulary::load(&dir.path().join("vocab.txt")).unwrap()).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.target, b.target);
        // images are stored as 8-bit gray levels
        assert_eq!(a.image, b.image);
    }
}

#[test]
fn dataset_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = plain_vocab(3);
    std::fs::write(dir.path().join("labels.tsv"), "images/a.pgm\tc0 c1\nimages/b.pgm\tc0 zz\n").unwrap();
    std::fs::create_dir(dir.path().join("images")).unwrap();
    write_pgm(&dir.path().join("images/a.pgm"), &Tensor::zeros(&[8, 8, 1])).unwrap();
    write_pgm(&dir.path().join("images/b.pgm"), &Tensor::zeros(&[8, 8, 1])).unwrap();
    match load_dataset(dir.path(), &vocab) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("zz"), "{msg}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    std::fs::write(dir.path().join("labels.tsv"), "images/missing.pgm\tc0\n").unwrap();
    assert!(matches!(load_dataset(dir.path(), &vocab), Err(Error::Parse { line: 1, .. })));
    std::fs::write(dir.path().join("labels.tsv"), "").unwrap();
    assert!(load_dataset(dir.path(), &vocab).unwrap().is_empty());
}

#[test]
fn png_input_is_read_as_gray() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    image::GrayImage::from_raw(2, 1, vec![255, 0]).unwrap().save(&path).unwrap();
    let t = read_image(&path).unwrap();
    assert_eq!(t.shape(), &[1, 2, 1]);
    assert_eq!(t.data(), &[0.0, 1.0]);
}

#[test]
fn generator_is_deterministic() {
    let spec = SynthSettings::default().build().unwrap();
    let a = generate_corpus(&spec, 5, 3).unwrap();
    let b = generate_corpus(&spec, 5, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(placements_tsv(&a), placements_tsv(&b));
    let c = generate_corpus(&spec, 5, 4).unwrap();
    assert_ne!(a[0].sample.image, c[0].sample.image);
    assert!(generate_corpus(&spec, 0, 3).unwrap().is_empty());
}

#[test]
fn placements_follow_reading_order() {
    let spec = SynthSettings {
        lines_min: 1,
        lines_max: 2,
        chars_min: 1,
        chars_max: 3,
        ..SynthSettings::default()
    }
    .build()
    .unwrap();
    for seed in 0..30 {
        let d = generate_document(&spec, seed, "d").unwrap();
        assert_eq!(d.sample.target.len(), d.placements.len());
        for w in d.placements.windows(2) {
            let (p, q) = (&w[0], &w[1]);
            if p.line == q.line {
                assert_eq!(q.row, p.row + 1);
                assert!(q.slot.y0 >= p.slot.y1);
            } else {
                assert_eq!(q.line, p.line + 1);
                assert_eq!(q.row, 0);
                assert!(q.slot.x1 <= p.slot.x0, "next column lies to the left");
            }
        }
        for p in &d.placements {
            assert!(p.glyph.x0 >= p.slot.x0 && p.glyph.x1 <= p.slot.x1);
            assert!(p.glyph.y0 >= p.slot.y0 && p.glyph.y1 <= p.slot.y1);
        }
    }
}

#[test]
fn glyph_ink_lands_in_its_box() {
    let spec = SynthSettings {
        noise: 0.0,
        ..SynthSettings::default()
    }
    .build()
    .unwrap();
    let d = generate_document(&spec, 1, "d").unwrap();
    let w = spec.canvas_width;
    for (i, v) in d.sample.image.data().iter().enumerate() {
        if *v > 0.0 {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            assert!(d.placements.iter().any(|p| p.glyph.contains(x, y)));
        }
    }
}

proptest! {
    #[test]
    fn split_partitions_ids(n in 1usize..300, seed in 0u64..50, tagged in 0usize..5) {
        let ids: Vec<TaggedId> = (0..n)
            .map(|i| TaggedId { id: format!("s{i}"), tag: (i < tagged).then(|| "held".to_string()) })
            .collect();
        match make_split(&ids, [9, 1], Some("held"), seed) {
            Ok(m) => {
                let all: HashSet<&String> = m.train.iter().chain(&m.validation).chain(&m.test).collect();
                prop_assert_eq!(all.len(), n);
                prop_assert_eq!(m.train.len() + m.validation.len() + m.test.len(), n);
                prop_assert_eq!(m.test.len(), tagged.min(n));
                let rest = n - m.test.len();
                let expect = ((rest as f64) / 10.0).round() as usize;
                prop_assert_eq!(m.validation.len(), expect);
                prop_assert_eq!(make_split(&ids, [9, 1], Some("held"), seed).unwrap(), m);
            }
            Err(_) => prop_assert!(tagged >= n),
        }
    }
}

fn tiny_checkpoint() -> Checkpoint {
    let model = Model::new(&toy_config(), plain_vocab(3), 5).unwrap();
    let trainer = Trainer::new(model, TrainConfig::default()).unwrap();
    trainer.checkpoint()
}

#[test]
fn checkpoint_layout() {
    let ckpt = tiny_checkpoint();
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cfg = std::str::from_utf8(&bytes[12..12 + cfg_len]).unwrap();
    assert!(cfg.starts_with("growth_rate=4\n"));
    assert!(cfg.contains("vocab_hash="));
    let vocab_count = u32::from_le_bytes(bytes[12 + cfg_len..16 + cfg_len].try_into().unwrap());
    assert_eq!(vocab_count, 5);
    // the final payload is the last optimizer accumulator, all zeros
    let last = ckpt.optimizer.as_ref().unwrap().1.last().unwrap().len();
    assert!(bytes[bytes.len() - 8 * last..].iter().all(|&b| b == 0));
    let params = ckpt.params.iter().map(|(_, t)| t.len()).sum::<usize>();
    assert!(bytes.len() > 8 * 3 * params);
}

#[test]
fn checkpoint_save_load_save_is_identical() {
    let ckpt = tiny_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let model = loaded.to_model().unwrap();
    assert_eq!(model.params.tensors(), &ckpt.params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>()[..]);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = tiny_checkpoint().to_bytes();
    let err = |b: &[u8]| Checkpoint::from_bytes(b).unwrap_err();
    assert!(matches!(err(&bytes[..bytes.len() - 1]), Error::Checkpoint(_)));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(err(&extra).to_string().contains("trailing"));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(err(&magic).to_string().contains("magic"));
    // flip a byte inside the stored config text
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let pos = text.find("hidden_size=32").unwrap();
    let mut tampered = bytes.clone();
    tampered[pos + 12] = b'4';
    assert!(Checkpoint::from_bytes(&tampered).is_err());
    assert!(Checkpoint::load(Path::new("/nonexistent/x.ckpt")).is_err());
}
