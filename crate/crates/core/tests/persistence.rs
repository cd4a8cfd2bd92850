use std::path::PathBuf;

use mom_core::datasynth::{generate, GeneratorConfig};
use mom_core::memory::MemoryPool;
use mom_core::numerics::{ParamStore, Tensor};
use mom_core::persistence::*;
use proptest::prelude::*;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_pool.momp")
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// id, tag, then e_txt, e_img and e_act as IEEE-754 bit patterns.
type GoldenEntry = (u64, &'static str, [u32; 3], [u32; 3], [u32; 2]);

const GOLDEN: [GoldenEntry; 3] = [
    (
        7,
        "train",
        [0x3f00_0000, 0xbfa0_0000, 0x4040_0000],
        [0x3f80_0000, 0x0000_0000, 0x8000_0000],
        [0x4020_0000, 0xc080_0000],
    ),
    (
        2,
        "ext",
        [0x3a83_126f, 0x477f_e000, 0xb580_0000],
        [0x3dcc_cccd, 0x3e4c_cccd, 0x3e99_999a],
        [0xbf80_0000, 0x3f80_0000],
    ),
    (
        1 << 40,
        "",
        [0x0000_0000, 0x0000_0000, 0x3f80_0000],
        [0xc0f8_0000, 0x4100_0000, 0x3d00_0000],
        [0x0000_0001, 0x7f7f_c99e],
    ),
];

#[test]
fn golden_pool_parses_to_the_expected_bits() {
    let pool = load_pool(&golden_path()).unwrap();
    assert_eq!(pool.dims(), (3, 2));
    assert_eq!(pool.len(), GOLDEN.len());
    for (e, (id, tag, txt, img, act)) in pool.entries().iter().zip(GOLDEN) {
        assert_eq!(e.id, id);
        assert_eq!(e.source_tag, tag);
        assert_eq!(bits(&e.e_txt), txt);
        assert_eq!(bits(&e.e_img), img);
        assert_eq!(bits(&e.e_act), act);
    }
}

#[test]
fn golden_pool_reencodes_to_the_same_bytes() {
    let bytes = std::fs::read(golden_path()).unwrap();
    assert_eq!(encode_pool(&decode_pool(&bytes).unwrap()), bytes);
}

#[test]
fn golden_pool_rejects_truncation_and_a_foreign_magic() {
    let bytes = std::fs::read(golden_path()).unwrap();
    for cut in [3, 8, 30, bytes.len() - 1] {
        assert!(decode_pool(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut other = bytes.clone();
    other[..4].copy_from_slice(&CHECKPOINT_MAGIC);
    assert!(decode_pool(&other).is_err());
}

fn small_data(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        latent_dim: 3,
        n_voxels: 10,
        d_clip: 4,
        d_act: 3,
        n_classes: 5,
        n_train: 6,
        n_test: 2,
        frames: 2,
        channels: 1,
        height: 4,
        width: 4,
        seed,
        ..GeneratorConfig::default()
    }
}

#[test]
fn dataset_round_trip_is_bitwise() {
    let ds = generate(&small_data(5)).unwrap();
    let bytes = encode_dataset(&ds);
    let back = decode_dataset(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(encode_dataset(&back), bytes);
}

#[test]
fn generation_depends_only_on_the_seed() {
    let a = encode_dataset(&generate(&small_data(8)).unwrap());
    assert_eq!(a, encode_dataset(&generate(&small_data(8)).unwrap()));
    assert_ne!(a, encode_dataset(&generate(&small_data(9)).unwrap()));
}

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>()
        .prop_map(f32::from_bits)
        .prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #[test]
    fn pools_round_trip(n in 1usize..6, d_clip in 1usize..5, d_act in 1usize..4, seed in any::<u64>(),
                        vals in prop::collection::vec(finite_f32(), 60)) {
        let mut k = 0;
        let mut next = |len: usize| -> Tensor {
            let v = (0..len).map(|_| { k += 1; vals[k % vals.len()] }).collect();
            Tensor::vector(v)
        };
        let entries = (0..n)
            .map(|i| mom_core::memory::MemoryEntry {
                id: seed.wrapping_add(i as u64 * 7919),
                e_txt: next(d_clip),
                e_img: next(d_clip),
                e_act: next(d_act),
                source_tag: format!("tag{i}"),
            })
            .collect();
        let pool = MemoryPool::from_entries(d_clip, d_act, entries).unwrap();
        let bytes = encode_pool(&pool);
        let back = decode_pool(&bytes).unwrap();
        prop_assert_eq!(encode_pool(&back), bytes);
        for (a, b) in pool.entries().iter().zip(back.entries()) {
            prop_assert_eq!(bits(&a.e_txt), bits(&b.e_txt));
            prop_assert_eq!(bits(&a.e_act), bits(&b.e_act));
        }
    }

    #[test]
    fn checkpoints_round_trip(shapes in prop::collection::vec((1usize..4, 1usize..4), 1..5),
                              vals in prop::collection::vec(finite_f32(), 16),
                              note in "[a-z=. ]{0,12}") {
        let mut params = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            let data = (0..r * c).map(|j| vals[(i + j) % vals.len()]).collect();
            params.insert(format!("p{i}.w"), Tensor::matrix(r, c, data).unwrap()).unwrap();
        }
        let mut ckpt = Checkpoint { params, ..Checkpoint::default() };
        ckpt.meta.insert("note".into(), note);
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&back), bytes);
        prop_assert_eq!(back.meta, ckpt.meta);
    }

    #[test]
    fn clips_round_trip(id in any::<u64>(), vals in prop::collection::vec(finite_f32(), 24)) {
        let clip = Tensor::new(vec![2, 1, 3, 4], vals).unwrap();
        let bytes = encode_clip(id, &clip).unwrap();
        let (back_id, back) = decode_clip(&bytes).unwrap();
        prop_assert_eq!(back_id, id);
        prop_assert_eq!(bits(&back), bits(&clip));
        prop_assert_eq!(back.shape(), clip.shape());
    }
}
