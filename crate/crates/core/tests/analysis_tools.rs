mod common;

use common::{tiny_experiment, tiny_splits};
use dhicm_core::analysis::{
    dump_encdec_attention, dump_head_importance, mean_importance_entropy, prune_and_eval, rank_by_means,
    rank_heads, rank_heads_on_corpus, AttentionDump, DumpKind, HeadSelection,
};
use dhicm_core::attention::{AttentionKind, HeadPruning, SiteId};
use dhicm_core::config::ModelConfig;
use dhicm_core::data::{Batch, TaskKind};
use dhicm_core::model::{ForwardOptions, Model};
use dhicm_core::training::evaluate;
use dhicm_core::Tensor;
use proptest::prelude::*;

fn model(heads: usize) -> Model {
    let mut cfg = tiny_experiment(true, 8).model;
    cfg.heads = heads;
    Model::new(ModelConfig { d_model: 16, d_m: 16, ..cfg }).unwrap()
}

fn zero_second_level_queries(m: &mut Model) {
    let names: Vec<String> = m.params().names().iter().filter(|n| n.ends_with(".dhicm.w")).cloned().collect();
    for n in names {
        let id = m.params().id(&n).unwrap();
        let shape = m.params().get(id).shape().to_vec();
        *m.params_mut().get_mut(id) = Tensor::zeros(&shape);
    }
}

const CROSS: SiteId = SiteId { layer: 0, kind: AttentionKind::DecoderCross };

#[test]
fn single_source_token_gets_all_attention() {
    let m = model(4);
    // The empty source becomes just the end marker.
    for sel in [HeadSelection::Average, HeadSelection::Head(2)] {
        let d = dump_encdec_attention(&m, &[], &[5, 6, 7], None, 0, sel).unwrap();
        assert_eq!(d.shape(), [4, 1]);
        assert!(d.values.iter().all(|r| r == &[1.0]));
    }
}

#[test]
fn zero_query_projection_gives_uniform_importance() {
    let mut m = model(4);
    zero_second_level_queries(&mut m);
    let d = dump_head_importance(&m, &[4, 5, 6], &[7, 8], None, CROSS).unwrap();
    assert!(d.values.iter().flatten().all(|&v| (v - 0.25).abs() < 1e-15));
    let data = tiny_splits(TaskKind::Copy, 8, 10);
    let h = mean_importance_entropy(&m, &data.valid, 128).unwrap();
    assert!((h - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn dumps_reproduce_forward_values() {
    let m = model(4);
    let (src, tgt) = (vec![4, 9, 6, 11], vec![7, 8, 10]);
    let out = m.forward(&Batch::from_pairs(&[&(src.clone(), tgt.clone())], vec![0]), &ForwardOptions::eval()).unwrap();
    let imp = dump_head_importance(&m, &src, &tgt, None, CROSS).unwrap();
    let rec = out.importance.iter().find(|r| r.site == CROSS).unwrap();
    assert_eq!(imp.values.concat(), rec.a.data());
    assert!(imp.max_row_sum_error() < 1e-12);

    let w = &out.cross_attention[0];
    let (m_len, n_len) = (w.shape()[2], w.shape()[3]);
    let head1 = dump_encdec_attention(&m, &src, &tgt, None, 0, HeadSelection::Head(1)).unwrap();
    assert_eq!(head1.values.concat(), &w.data()[m_len * n_len..2 * m_len * n_len]);
    let avg = dump_encdec_attention(&m, &src, &tgt, None, 0, HeadSelection::Average).unwrap();
    for i in 0..m_len {
        for j in 0..n_len {
            let mean = (0..4).map(|h| w.data()[(h * m_len + i) * n_len + j]).sum::<f64>() / 4.0;
            assert!((avg.values[i][j] - mean).abs() < 1e-15);
        }
    }
    assert!(avg.max_row_sum_error() < 1e-12);
    assert!(dump_encdec_attention(&m, &src, &tgt, None, 1, HeadSelection::Average).is_err());
    assert!(dump_encdec_attention(&m, &src, &tgt, None, 0, HeadSelection::Head(4)).is_err());
}

#[test]
fn dump_files_round_trip() {
    let m = model(2);
    let mut d = dump_head_importance(&m, &[4, 5], &[6], None, CROSS).unwrap();
    d.sentence = Some(3);
    d.checkpoint = Some("best.ckpt".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    d.save(&path).unwrap();
    let back = AttentionDump::load(&path).unwrap();
    assert_eq!(back.kind, DumpKind::HeadImportance);
    assert_eq!(back.site, CROSS);
    assert_eq!(back.sentence, Some(3));
    for (a, b) in back.values.iter().flatten().zip(d.values.iter().flatten()) {
        assert!((a - b).abs() <= 5e-7);
    }
}

#[test]
fn empty_pruning_changes_nothing() {
    let m = model(4);
    let data = tiny_splits(TaskKind::Copy, 8, 10);
    let plain = evaluate(&m, &data.valid, 128, None).unwrap();
    let none = HeadPruning { site: CROSS, heads: vec![], renormalize: true };
    let report = prune_and_eval(&m, &none, &data.valid, 128, None).unwrap();
    assert_eq!(report.valid_ce.to_bits(), plain.ce.to_bits());
    assert_eq!(report.token_accuracy, plain.token_accuracy);
}

#[test]
fn pruning_zeroes_and_renormalizes_importance() {
    let m = model(4);
    let batch = Batch::from_pairs(&[&(vec![4, 5, 6], vec![7, 8])], vec![0]);
    let base = m.forward(&batch, &ForwardOptions::eval()).unwrap();
    for renormalize in [true, false] {
        let opts = ForwardOptions {
            pruning: Some(HeadPruning { site: CROSS, heads: vec![1, 3], renormalize }),
            ..ForwardOptions::eval()
        };
        let out = m.forward(&batch, &opts).unwrap();
        let a = out.importance.iter().find(|r| r.site == CROSS).unwrap().a.clone();
        for row in a.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if renormalize {
                assert_eq!((row[1], row[3]), (0.0, 0.0));
            } else {
                // Zeroed heads score exactly 0, so they share one weight.
                assert_eq!(row[1], row[3]);
            }
        }
        assert_ne!(out.logits, base.logits);
    }
}

#[test]
fn invalid_pruning_is_rejected() {
    let data = tiny_splits(TaskKind::Copy, 8, 10);
    let one = model(1);
    let all = HeadPruning { site: CROSS, heads: vec![0], renormalize: true };
    assert!(prune_and_eval(&one, &all, &data.valid, 128, None).unwrap_err().to_string().contains("all heads"));
    let four = model(4);
    let out_of_range = HeadPruning { site: CROSS, heads: vec![4], renormalize: true };
    assert!(prune_and_eval(&four, &out_of_range, &data.valid, 128, None).is_err());
    let missing = HeadPruning { site: SiteId { layer: 3, kind: AttentionKind::DecoderSelf }, heads: vec![0], renormalize: true };
    assert!(prune_and_eval(&four, &missing, &data.valid, 128, None).is_err());
}

#[test]
fn corpus_ranking_agrees_with_dump_ranking() {
    let m = model(4);
    let data = tiny_splits(TaskKind::Copy, 8, 10);
    let dumps: Vec<AttentionDump> = data
        .valid
        .pairs
        .iter()
        .map(|(s, t)| dump_head_importance(&m, s, t, None, CROSS).unwrap())
        .collect();
    let a = rank_heads(&dumps).unwrap();
    let b = rank_heads_on_corpus(&m, &data.valid, CROSS, 128).unwrap();
    assert_eq!(a.order, b.order);
    assert_eq!(a.tokens, b.tokens);
    for (x, y) in a.means.iter().zip(&b.means) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!((a.means.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ranking_is_a_sorted_permutation(means in prop::collection::vec(0.0f64..1.0, 1..10), rot in 0usize..10) {
        let order = rank_by_means(&means);
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..means.len()).collect::<Vec<_>>());
        prop_assert!(order.windows(2).all(|w| means[w[0]] >= means[w[1]]));
        // Relabeling heads relabels the ranking.
        let n = means.len();
        let k = rot % n;
        let rotated: Vec<f64> = (0..n).map(|i| means[(i + k) % n]).collect();
        let back: Vec<f64> = rank_by_means(&rotated).iter().map(|&i| rotated[i]).collect();
        let direct: Vec<f64> = order.iter().map(|&i| means[i]).collect();
        prop_assert_eq!(back, direct);
    }
}
