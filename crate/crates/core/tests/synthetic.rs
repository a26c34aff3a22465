use std::collections::BTreeMap;
use std::path::Path;

use ccreid::config::Config;
use ccreid::datamodel::{load_dataset, DatasetIndex, RegionVocabulary, Sample};
use ccreid::masking::{clothing_masked_image, clothing_region_mask, DEFAULT_FILL};
use ccreid::model::Variant;
use ccreid::sampler::{epoch_plan, BatchSampler, SamplerConfig, SamplerMode};
use ccreid::synthdata::{generate_split, synthesize, synthesize_split, SynthConfig, JITTER};
use ccreid::training::Trainer;

fn small(ids: usize, clothings: usize, images: usize) -> SynthConfig {
    SynthConfig {
        num_identities: ids,
        clothings_per_identity: clothings,
        images_per_appearance: images,
        ..SynthConfig::default()
    }
}

#[test]
fn manifest_buckets_match_counting_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(4, 3, 5);
    let m = generate_split(&cfg, tmp.path()).unwrap();
    let index = load_dataset(tmp.path(), &m.all).unwrap();
    assert_eq!(index.len(), 60);
    assert_eq!(index.by_identity().len(), 4);
    assert!(index.by_identity().values().all(|v| v.len() == 15));
    assert_eq!(index.by_appearance().len(), 12);
    assert!(index.by_appearance().values().all(|v| v.len() == 5));
}

#[test]
fn split_sizes_match_counting_oracle() {
    for (ids, k, n) in [(4, 3, 5), (8, 3, 10), (3, 2, 4)] {
        let cfg = small(ids, k, n);
        let (train, query, gallery) = synthesize_split(&cfg).unwrap();
        let cam0 = n.div_ceil(2);
        assert_eq!(train.len(), ids * (k - 1) * n);
        assert_eq!(query.len(), ids * cam0);
        assert_eq!(gallery.len(), ids * (n - cam0) + ids);
        let held = (k - 1) as u32;
        assert!(train.samples().iter().all(|s| s.clothing != held));
        assert!(query.samples().iter().all(|s| s.clothing == held));
        for q in query.samples() {
            let positives: Vec<&Sample> = gallery
                .samples()
                .iter()
                .map(|s| s.as_ref())
                .filter(|g| g.identity == q.identity && g.clothing != q.clothing && g.camera != q.camera)
                .collect();
            assert!(!positives.is_empty());
        }
    }
}

#[test]
fn written_split_reloads_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(3, 2, 4);
    let m = generate_split(&cfg, tmp.path()).unwrap();
    let (train, _, gallery) = synthesize_split(&cfg).unwrap();
    for (path, mem) in [(&m.train, &train), (&m.gallery, &gallery)] {
        let disk = load_dataset(tmp.path(), path).unwrap();
        assert_eq!(disk.len(), mem.len());
        for (a, b) in disk.samples().iter().zip(mem.samples()) {
            assert_eq!((a.identity, a.clothing, a.camera), (b.identity, b.clothing, b.camera));
            assert_eq!(a.parsing, b.parsing);
            for (x, y) in a.image.data.iter().zip(&b.image.data) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}

#[test]
fn noiseless_images_differ_only_near_the_figure_edges() {
    let cfg = SynthConfig {
        noise: 0.0,
        ..small(2, 2, 6)
    };
    let samples = synthesize(&cfg).unwrap();
    let vocab = RegionVocabulary::default();
    let m = JITTER as usize;
    for app in samples.chunks(cfg.images_per_appearance) {
        let first = &app[0];
        for other in &app[1..] {
            let (h, w) = (first.image.height, first.image.width);
            for r in 0..h {
                for c in 0..w {
                    // pixels whose whole jitter neighbourhood shares one parsing code cannot move
                    let stable = |s: &Sample| {
                        let code = s.parsing.get(r, c);
                        (r.saturating_sub(m)..(r + m + 1).min(h))
                            .all(|y| (c.saturating_sub(m)..(c + m + 1).min(w)).all(|x| s.parsing.get(y, x) == code))
                    };
                    if stable(first) && stable(other) && first.parsing.get(r, c) == 0 {
                        assert_eq!(first.image.pixel(r, c), other.image.pixel(r, c));
                    }
                }
            }
        }
    }
    assert!(vocab.clothing_codes().len() > 1);
}

fn nearest_neighbour_accuracy(train: &DatasetIndex, query: &DatasetIndex, masked: bool) -> f64 {
    let vocab = RegionVocabulary::default();
    let pixels = |s: &Sample| -> Vec<f64> {
        if masked {
            clothing_masked_image(s, &vocab, DEFAULT_FILL).unwrap().data
        } else {
            s.image.data.clone()
        }
    };
    let gallery: Vec<(u32, Vec<f64>)> = train.samples().iter().map(|s| (s.identity, pixels(s))).collect();
    let correct = query
        .samples()
        .iter()
        .filter(|q| {
            let p = pixels(q);
            let best = gallery
                .iter()
                .map(|(id, g)| (g.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), *id))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            best.1 == q.identity
        })
        .count();
    correct as f64 / query.len() as f64
}

#[test]
fn masked_pixels_identify_and_raw_pixels_are_confounded() {
    let cfg = SynthConfig::default();
    let (train, query, _) = synthesize_split(&cfg).unwrap();
    let masked = nearest_neighbour_accuracy(&train, &query, true);
    assert!(masked > 0.95, "masked nearest-neighbour accuracy {masked}");
    let raw = nearest_neighbour_accuracy(&train, &query, false);
    assert!(raw < 0.3, "raw nearest-neighbour accuracy {raw}");
}

#[test]
fn clothing_mask_covers_upper_and_pants_only() {
    let samples = synthesize(&small(2, 2, 2)).unwrap();
    let vocab = RegionVocabulary::default();
    let clothing = vocab.clothing_codes();
    for s in &samples {
        let mask = clothing_region_mask(&s.parsing, &vocab).unwrap();
        let masked = clothing_masked_image(s, &vocab, DEFAULT_FILL).unwrap();
        let covered = mask.data.iter().filter(|&&v| v == 1.0).count();
        assert!(covered > 0);
        for (i, &code) in s.parsing.data.iter().enumerate() {
            let (r, c) = (i / s.parsing.width, i % s.parsing.width);
            if clothing.contains(&code) {
                assert_eq!(masked.pixel(r, c), [DEFAULT_FILL; 3]);
            } else {
                assert_eq!(masked.pixel(r, c), s.image.pixel(r, c));
            }
        }
    }
}

#[test]
fn pk_marginals_are_uniform_within_three_sigma() {
    let (train, _, _) = synthesize_split(&small(6, 3, 4)).unwrap();
    let cfg = SamplerConfig {
        identities: 2,
        per_identity: 2,
        mode: SamplerMode::Pk,
        seed: 9,
    };
    let mut sampler = BatchSampler::new(cfg).unwrap();
    let batches = 10_000;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for _ in 0..batches {
        for p in sampler.next_batch(&train).unwrap() {
            *counts.entry(train.get(p).identity).or_default() += 1;
        }
    }
    let total = (batches * cfg.batch_size()) as f64;
    let p = 1.0 / 6.0;
    let sigma = (total * p * (1.0 - p)).sqrt();
    for (&id, &n) in &counts {
        assert!((n as f64 - total * p).abs() <= 3.0 * sigma, "identity {id}: {n}");
    }
    assert_eq!(counts.len(), 6);
}

#[test]
fn epoch_plan_covers_every_identity() {
    let (train, _, _) = synthesize_split(&small(12, 2, 4)).unwrap();
    for mode in [SamplerMode::Pk, SamplerMode::ProportionalRas] {
        let cfg = SamplerConfig {
            mode,
            ..SamplerConfig::default()
        };
        let plan = epoch_plan(&train, &cfg).unwrap();
        let seen: std::collections::BTreeSet<u32> =
            plan.iter().flatten().map(|&p| train.get(p).identity).collect();
        assert_eq!(seen.len(), 12);
    }
}

#[test]
fn extracted_features_have_configured_width() {
    let mut config = Config::default();
    config.synth = small(3, 2, 2);
    config.train.variant = Variant::Ifd;
    let (train, query, _) = synthesize_split(&config.synth).unwrap();
    let trainer = Trainer::new(&config, &train).unwrap();
    let records = trainer.extract(&query).unwrap();
    assert_eq!(records.len(), query.len());
    let (c, fh, fw) = trainer.model.main.output;
    assert_eq!(c, *config.backbone.widths.last().unwrap());
    assert_eq!((fh, fw), (64 / config.backbone.output_stride, 32 / config.backbone.output_stride));
    assert_eq!(trainer.model.feature_size(), (fh, fw));
    assert!(records.iter().all(|r| r.feature.len() == c));
    assert!(records
        .iter()
        .all(|r| (r.feature.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6));
    assert!(trainer.extract(&DatasetIndex::from_samples(vec![])).unwrap().is_empty());
}

#[test]
fn pretrained_attention_stream_identifies_held_out_clothing() {
    let mut config = Config::default();
    config.train.variant = Variant::Ifd;
    config.train.lr = 1e-3;
    config.train.phase1_epochs = 30;
    config.train.phase2_epochs = 0;
    let (train, query, gallery) = synthesize_split(&config.synth).unwrap();
    let mut trainer = Trainer::new(&config, &train).unwrap();
    trainer.run(&train, None, &mut |_| {}).unwrap();
    let vocab = RegionVocabulary::default();
    let class_of: BTreeMap<usize, u32> = trainer.classes.iter().map(|(&id, &c)| (c, id)).collect();
    let held = config.synth.held_out_clothing();
    let held_out: Vec<_> = query
        .samples()
        .iter()
        .chain(gallery.samples())
        .filter(|s| s.clothing == held)
        .collect();
    let correct = held_out
        .iter()
        .filter(|s| {
            let p = trainer.model.prepare(s, &vocab, false).unwrap();
            let logits = trainer.model.attention_logits(&p).unwrap().unwrap();
            let best = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
            class_of[&best] == s.identity
        })
        .count();
    let acc = correct as f64 / held_out.len() as f64;
    assert!(acc > 0.9, "attention-stream accuracy on held-out clothing {acc}");
}

#[test]
fn config_file_drives_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run.toml");
    std::fs::write(&path, "[synth]\nnum_identities = 8\nclothings_per_identity = 2\nimages_per_appearance = 2\n").unwrap();
    let config = Config::from_file(&path).unwrap();
    let m = generate_split(&config.synth, tmp.path()).unwrap();
    let index = load_dataset(tmp.path(), &m.all).unwrap();
    assert_eq!(index.identities().len(), 8);
    assert!(Config::from_file(Path::new("/no/such/file.toml")).is_err());
}
