use proptest::prelude::*;

use crovca::dataio::{decode_checkpoint, decode_codes, decode_embeddings, decode_labels, encode_codes, encode_labels};
use crovca::evalkit::{map_at_k, recall_at_k, LabelSet};
use crovca::hashcoder::sigmoid;
use crovca::numkit::DenseMatrix;
use crovca::retrieval::{
    asym_hamming, bce_score, hamming, symbce_score, topk, topk_sharded, Measure, PackedCodeSet, QueryBatch, RankedList,
};
use crovca::Execution;

fn bit_matrix(rows: usize, bits: usize, flat: &[bool]) -> DenseMatrix {
    DenseMatrix::from_vec(rows, bits, flat.iter().map(|&b| b as u8 as f64).collect()).unwrap()
}

/// `rows × bits` random code matrix.
fn codes(max_rows: usize, max_bits: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max_rows, 1..=max_bits)
        .prop_flat_map(|(r, b)| prop::collection::vec(any::<bool>(), r * b).prop_map(move |v| bit_matrix(r, b, &v)))
}

fn logits(rows: usize, bits: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-4.0f64..4.0, rows * bits).prop_map(move |v| DenseMatrix::from_vec(rows, bits, v).unwrap())
}

proptest! {
    #[test]
    fn hamming_matches_bit_count(m in (1usize..200).prop_flat_map(|b| codes_fixed(2, b))) {
        let set = PackedCodeSet::from_binary(&m).unwrap();
        let naive = (0..m.cols()).filter(|&j| m.get(0, j) != m.get(1, j)).count() as u32;
        prop_assert_eq!(hamming(set.row(0), set.row(1)).unwrap(), naive);
        prop_assert_eq!(hamming(set.row(0), set.row(0)).unwrap(), 0);
    }

    #[test]
    fn topk_agrees_with_pairwise_scores(
        (db, q) in (1usize..40, 1usize..24, 1usize..5)
            .prop_flat_map(|(n, b, nq)| (logits(n, b), logits(nq, b))),
        k in 1usize..50,
        measure in prop::sample::select(vec![Measure::Hamming, Measure::AsymHamming, Measure::Bce, Measure::SymBce]),
    ) {
        let set = PackedCodeSet::from_logits(&db, true).unwrap();
        let queries = QueryBatch::from_logits(q).unwrap();
        let ranked = topk(&set, &queries, measure, k, Execution::Sequential).unwrap();
        let probs = queries.probabilities();
        let db_probs: Vec<Vec<f64>> = (0..set.rows())
            .map(|i| set.logits_row(i).unwrap().iter().map(|&z| sigmoid(z as f64)).collect())
            .collect();
        for (qi, list) in ranked.lists.iter().enumerate() {
            let q_code = queries.codes().row(qi);
            let oracle: Vec<f64> = (0..set.rows())
                .map(|i| match measure {
                    Measure::Hamming => hamming(q_code, set.row(i)).unwrap() as f64,
                    Measure::AsymHamming => asym_hamming(probs.row(qi), set.row(i)).unwrap(),
                    Measure::Bce => bce_score(probs.row(qi), set.row(i)).unwrap(),
                    Measure::SymBce => symbce_score(probs.row(qi), q_code, &db_probs[i], set.row(i)).unwrap(),
                })
                .collect();
            prop_assert_eq!(list.len(), k.min(set.rows()));
            prop_assert!(list.windows(2).all(|w| w[0] < w[1]));
            for nb in list {
                prop_assert!((nb.score - oracle[nb.index]).abs() <= 1e-9);
            }
            let last = list.last().unwrap().score;
            let listed: Vec<usize> = list.iter().map(|nb| nb.index).collect();
            for (i, &o) in oracle.iter().enumerate() {
                if !listed.contains(&i) {
                    prop_assert!(o >= last - 1e-9);
                }
            }
        }
        for shard in [1, 3, 16] {
            let sharded = topk_sharded(&set, &queries, measure, k, shard, Execution::Parallel).unwrap();
            prop_assert_eq!(&sharded, &ranked);
        }
        prop_assert_eq!(RankedList::parse(&ranked.to_text()).unwrap(), ranked);
    }

    #[test]
    fn code_files_round_trip(m in codes(20, 130)) {
        let set = PackedCodeSet::from_binary(&m).unwrap();
        let back = decode_codes(&encode_codes(&set, false).unwrap()).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn label_files_round_trip(rows in prop::collection::vec(prop::collection::btree_set(0u32..12, 1..5), 1..30)) {
        let rows: Vec<Vec<u32>> = rows.into_iter().map(|s| s.into_iter().collect()).collect();
        let labels = LabelSet::multi(12, rows, false).unwrap();
        prop_assert_eq!(decode_labels(&encode_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_embeddings(&bytes);
        let _ = decode_labels(&bytes);
        let _ = decode_codes(&bytes);
        let _ = decode_checkpoint(&bytes);
    }

    #[test]
    fn metrics_lie_in_unit_interval(
        (db, q) in (2usize..30, 1usize..10).prop_flat_map(|(n, nq)| (codes_fixed(n, 8), logits(nq, 8))),
        db_labels in prop::collection::vec(0u32..4, 30),
        q_labels in prop::collection::vec(0u32..4, 10),
        k in 1usize..40,
    ) {
        let set = PackedCodeSet::from_binary(&db).unwrap();
        let queries = QueryBatch::from_logits(q).unwrap();
        let dl = LabelSet::single(4, &db_labels[..set.rows()]).unwrap();
        let ql = LabelSet::single(4, &q_labels[..queries.len()]).unwrap();
        let ranked = topk(&set, &queries, Measure::Hamming, k, Execution::Sequential).unwrap();
        let map = map_at_k(&ranked, &ql, &dl, k, Execution::Sequential).unwrap().value;
        let recall = recall_at_k(&ranked, &ql, &dl, k, Execution::Sequential).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&map));
        prop_assert!((0.0..=1.0).contains(&recall));
        prop_assert!(map <= recall + 1e-12);
    }
}

fn codes_fixed(rows: usize, bits: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(any::<bool>(), rows * bits).prop_map(move |v| bit_matrix(rows, bits, &v))
}
