use maskquant::abmp::{allocate, partition, reallocation_count};
use maskquant::daq::{search_signs, SignMatrix};
use maskquant::qformat::{pack, unpack, words_for, QpkFile};
use maskquant::tensor::Tensor;
use proptest::prelude::*;

fn signs(rows: usize, cols: usize) -> impl Strategy<Value = SignMatrix> {
    prop::collection::vec(prop::bool::ANY, rows * cols)
        .prop_map(move |bits| SignMatrix::new(rows, cols, bits.into_iter().map(|b| if b { 1 } else { -1 }).collect()).unwrap())
}

proptest! {
    #[test]
    fn pack_round_trips((rows, cols) in (1usize..20, 1usize..150), seed in any::<u64>()) {
        let mut rng = maskquant::Rng::new(seed, 0);
        let data = (0..rows * cols).map(|_| if rng.bernoulli(0.5) { 1 } else { -1 }).collect();
        let s = SignMatrix::new(rows, cols, data).unwrap();
        let words = pack(&s);
        prop_assert_eq!(words.len(), words_for(rows * cols));
        prop_assert_eq!(unpack(&words, rows, cols).unwrap(), s);
    }

    #[test]
    fn nonzero_pad_bits_are_rejected(s in signs(3, 7), bit in 21usize..64) {
        let mut words = pack(&s);
        words[0] |= 1 << bit;
        prop_assert!(unpack(&words, 3, 7).is_err());
    }

    #[test]
    fn allocation_keeps_two_bit_mean(scores in prop::collection::vec(0.0f64..1e6, 1..200), ratio in 0.0f64..=0.5) {
        let a = allocate(&scores, ratio).unwrap();
        let k = reallocation_count(scores.len(), ratio);
        prop_assert_eq!(a.total_bits(), 2 * scores.len() as u64);
        prop_assert_eq!(a.histogram(), [k, scores.len() - 2 * k, k]);
        // every order-3 group scores at least as high as every order-1 group
        let hi = scores.iter().zip(&a.bits).filter(|(_, &b)| b == 3).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
        let lo = scores.iter().zip(&a.bits).filter(|(_, &b)| b == 1).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(k == 0 || hi >= lo);
    }

    #[test]
    fn partition_tiles_columns(rows in 1usize..10, cols in 1usize..1000, width in 1usize..300) {
        let p = partition(rows, cols, width).unwrap();
        let mut next = 0;
        for g in p.groups() {
            prop_assert_eq!(g.start, next);
            prop_assert!(g.len() <= width && !g.is_empty());
            next = g.end;
        }
        prop_assert_eq!(next, cols);
        prop_assert_eq!(p.len(), cols.div_ceil(width));
    }

    #[test]
    fn sign_search_is_optimal(target in -5.0f64..5.0, scales in prop::collection::vec(0.0f64..3.0, 1..=3)) {
        let got = search_signs(target, &scales);
        let err = |p: &[i8]| (target - scales.iter().zip(p).map(|(s, &b)| s * b as f64).sum::<f64>()).abs();
        let k = scales.len();
        for bits in 0..1u32 << k {
            let p: Vec<i8> = (0..k).map(|q| if bits >> q & 1 == 1 { -1 } else { 1 }).collect();
            prop_assert!(err(&got) <= err(&p));
        }
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = Tensor::decode(&bytes);
        let _ = QpkFile::decode(&bytes);
    }

    #[test]
    fn qdt_prefixed_garbage_is_an_error(tail in prop::collection::vec(any::<u8>(), 0..64)) {
        let mut bytes = b"QDT1".to_vec();
        bytes.extend(&tail);
        if let Ok(t) = Tensor::decode(&bytes) {
            prop_assert_eq!(t.encode().unwrap(), bytes);
        }
    }
}
