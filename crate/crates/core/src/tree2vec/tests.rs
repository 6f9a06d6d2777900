use super::*;
use crate::data::{Category, Dish, Domain, Interaction, Item, RecipeComponent, User};
use crate::treegraph::{build_tg, tg_adjacency, Tms};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Three common users and one unique user over two dishes sharing item 1.
fn micro() -> Dataset {
    let doc = |w: &str| vec![w.to_string()];
    let sale = |user, dish, count| Interaction { user, target: EntityId::dish(dish), count, domain: Domain::B };
    Dataset {
        users: (0..4).map(|id| User { id, is_common: id < 3, profile_doc: doc("w000") }).collect(),
        categories: (0..3).map(|id| Category { id, doc: doc("w001") }).collect(),
        items: [0, 0, 1, 2].iter().enumerate().map(|(id, &category)| Item { id, category, doc: doc("w002") }).collect(),
        dishes: vec![
            Dish {
                id: 0,
                doc: doc("w003"),
                recipe: vec![
                    RecipeComponent { category: 0, items: vec![0, 1] },
                    RecipeComponent { category: 1, items: vec![2] },
                ],
            },
            Dish {
                id: 1,
                doc: doc("w004"),
                recipe: vec![
                    RecipeComponent { category: 0, items: vec![1] },
                    RecipeComponent { category: 2, items: vec![3] },
                ],
            },
        ],
        interactions: vec![sale(0, 0, 2), sale(0, 1, 1), sale(1, 0, 1), sale(2, 1, 3)],
    }
}

fn docvecs(ds: &Dataset, dim: usize) -> DocVectors {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = ds
        .corpus()
        .into_iter()
        .map(|(id, _)| (id, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    DocVectors { dim, map }
}

struct Fixture {
    ds: Dataset,
    dv: DocVectors,
    vocab: TokenVocab,
    cfg: Tree2vecConfig,
    store: ParamStore,
    params: TreeParams,
    tgs: Vec<TreeGraph>,
}

fn fixture() -> Fixture {
    let ds = micro();
    let dv = docvecs(&ds, 6);
    let vocab = TokenVocab { n_dishes: 2, n_categories: 3, n_items: 4 };
    let cfg = Tree2vecConfig {
        gcn_hidden: 5,
        gcn_out: 3,
        encoder: EncoderConfig { model_dim: 4, heads: 2, layers: 1, ff_dim: 8, max_len: 128 },
        flow: Flow::Down,
    };
    let mut store = ParamStore::new();
    let params = TreeParams::init(&mut store, &cfg, &vocab, &dv, &mut ChaCha8Rng::seed_from_u64(1));
    let tgs = (0..3).map(|u| build_tg(u, &ds).unwrap()).collect();
    Fixture { ds, dv, vocab, cfg, store, params, tgs }
}

fn all_ablations() -> Vec<Ablation> {
    (0..32u32)
        .map(|m| Ablation {
            no_tree: m & 1 != 0,
            no_gcn: m & 2 != 0,
            no_unidirectional: m & 4 != 0,
            no_bert: m & 8 != 0,
            no_fix_position: m & 16 != 0,
        })
        .collect()
}

#[test]
fn dimensions_follow_ablation_flags() {
    let f = fixture();
    for ab in all_ablations() {
        let built = TreeInputs::build(4, 4, &f.tgs, &f.dv, &f.vocab, &f.cfg, &ab);
        if ab.no_gcn && ab.no_bert {
            assert!(matches!(built, Err(TreeVecError::NothingToEncode)));
            continue;
        }
        let mut tape = Tape::new();
        let parts = built.unwrap().forward(&mut tape, &f.store, &f.params).unwrap();
        let (u, i) = parts.concat(&mut tape).unwrap();
        let want = f.cfg.output_dim(&ab);
        assert_eq!(tape.value(u).shape(), &[4, want], "{ab:?}");
        assert_eq!(tape.value(i).shape(), &[4, want], "{ab:?}");
        assert_eq!(want, if ab.no_gcn { 0 } else { 3 } + if ab.no_bert { 0 } else { 4 });
    }
}

#[test]
fn variant_flags_differ_pairwise() {
    let all: Vec<Ablation> = Ablation::VARIANTS.iter().map(|v| Ablation::from_variant(v).unwrap()).collect();
    for a in 0..all.len() {
        assert_eq!(all[a].label(), Ablation::VARIANTS[a]);
        for b in (a + 1)..all.len() {
            assert_ne!(all[a], all[b]);
        }
    }
}

#[test]
fn unique_user_and_unused_items_have_zero_rows() {
    let f = fixture();
    let inputs = TreeInputs::build(4, 4, &f.tgs, &f.dv, &f.vocab, &f.cfg, &Ablation::default()).unwrap();
    assert_eq!(inputs.user_mask, vec![true, true, true, false]);
    assert_eq!(inputs.item_mask, vec![true; 4]);
    let mut tape = Tape::new();
    let parts = inputs.forward(&mut tape, &f.store, &f.params).unwrap();
    let (u, _) = parts.concat(&mut tape).unwrap();
    assert!(tape.value(u).row(3).iter().all(|&x| x == 0.0));
}

#[test]
fn batched_rows_match_single_user_embedding() {
    let f = fixture();
    let ab = Ablation::default();
    let inputs = TreeInputs::build(4, 4, &f.tgs, &f.dv, &f.vocab, &f.cfg, &ab).unwrap();
    let mut tape = Tape::new();
    let parts = inputs.forward(&mut tape, &f.store, &f.params).unwrap();
    let (u, _) = parts.concat(&mut tape).unwrap();
    for tg in &f.tgs {
        let single = tree2vec(tg.owner, tg, &f.ds, &f.dv, &f.vocab, &f.store, &f.params, &f.cfg, &ab).unwrap();
        let batched = tape.value(u).row(tg.owner);
        let diff = single.user.iter().zip(batched).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "user {}: {diff}", tg.owner);
        let g = single.g_user.unwrap();
        let b = single.b_user.unwrap();
        assert_eq!(single.user, [g, b].concat());
    }
}

#[test]
fn gcn_user_vector_sums_dish_rows() {
    let f = fixture();
    let tg = &f.tgs[0];
    let n = tg.num_nodes();
    let h = Tensor::from_rows(&(0..n).map(|r| vec![r as f64, 1.0]).collect::<Vec<_>>()).unwrap();
    let (user, items) = gcn_aggregate(tg, &h);
    // dishes occupy rows 0 and 1
    assert_eq!(user, vec![1.0, 2.0]);
    // item 1 is shared by both dishes yet has a single node
    assert_eq!(items.len(), 4);
    assert_eq!(tg.node_order.iter().filter(|id| **id == EntityId::item(1)).count(), 1);
    let single = build_tg(2, &f.ds).unwrap();
    let (one, _) = gcn_aggregate(&single, &Tensor::from_rows(&(0..single.num_nodes()).map(|r| vec![r as f64 + 0.5]).collect::<Vec<_>>()).unwrap());
    assert_eq!(one, vec![0.5]);
}

#[test]
fn bert_mean_over_item_occurrences() {
    let a = serialize_tms_dfs(&Tms { dish: 0, children: vec![(0, vec![1])] });
    let b = serialize_tms_dfs(&Tms { dish: 1, children: vec![(0, vec![1])] });
    let ea = Tensor::from_rows(&(0..5).map(|r| vec![r as f64]).collect::<Vec<_>>()).unwrap();
    let eb = Tensor::from_rows(&(0..5).map(|r| vec![10.0 * r as f64]).collect::<Vec<_>>()).unwrap();
    let (user, items) = bert_aggregate(&[(&a.tokens, &ea)]);
    assert_eq!(user, vec![0.0]);
    assert_eq!(items[&1], vec![4.0]);
    let (user, items) = bert_aggregate(&[(&a.tokens, &ea), (&b.tokens, &eb)]);
    assert_eq!(user, vec![0.0]);
    assert_eq!(items[&1], vec![22.0]);
}

#[test]
fn bidirectional_chain_is_symmetric() {
    let f = fixture();
    let tg = build_tg(2, &f.ds).unwrap();
    let ab = Ablation { no_unidirectional: true, ..Default::default() };
    let (nodes, entries) = gcn_block(&tg, &f.cfg, &ab);
    let a = gcn_normalize_sparse(nodes.len(), &entries).unwrap().to_dense();
    assert!(a.max_abs_diff(&a.transpose()) < 1e-15);
    let (_, down) = gcn_block(&tg, &f.cfg, &Ablation::default());
    let a = gcn_normalize_sparse(nodes.len(), &down).unwrap().to_dense();
    let m = tg_adjacency(&tg);
    for r in 0..m.rows() {
        for c in (r + 1)..m.cols() {
            assert_eq!(a.get(r, c), 0.0);
        }
    }
}

#[test]
fn flat_variant_changes_user_embedding() {
    let f = fixture();
    let full = tree2vec(0, &f.tgs[0], &f.ds, &f.dv, &f.vocab, &f.store, &f.params, &f.cfg, &Ablation::default()).unwrap();
    let flat_ab = Ablation { no_tree: true, ..Default::default() };
    let flat = tree2vec(0, &f.tgs[0], &f.ds, &f.dv, &f.vocab, &f.store, &f.params, &f.cfg, &flat_ab).unwrap();
    assert_eq!(full.user.len(), flat.user.len());
    assert_ne!(full.user, flat.user);
    assert_eq!(full.items.keys().collect::<Vec<_>>(), flat.items.keys().collect::<Vec<_>>());
}

#[test]
fn overlong_sequence_names_the_tms() {
    let mut f = fixture();
    f.cfg.encoder.max_len = 6;
    let err = TreeInputs::build(4, 4, &f.tgs, &f.dv, &f.vocab, &f.cfg, &Ablation::default()).err().unwrap();
    assert!(err.to_string().contains("TMS of dish:0"), "{err}");
}

#[test]
fn gcn_is_permutation_equivariant() {
    let m = Tensor::matrix(3, 3, vec![0.0, 0.0, 0.0, 0.6, 0.0, 0.0, 0.2, 0.9, 0.0]).unwrap();
    let x = Tensor::matrix(3, 2, vec![0.5, -0.1, 0.3, 0.8, -0.4, 0.2]).unwrap();
    let perm = [2, 0, 1];
    let mut pm = Tensor::zeros(&[3, 3]);
    let mut px = Tensor::zeros(&[3, 2]);
    for r in 0..3 {
        px.row_mut(r).copy_from_slice(x.row(perm[r]));
        for c in 0..3 {
            pm.set(r, c, m.get(perm[r], perm[c]));
        }
    }
    let run = |m: &Tensor, x: &Tensor| {
        let a = Rc::new(SparseMatrix::from_dense(&gcn_normalize(m).unwrap()));
        let mut t = Tape::new();
        let h0 = t.leaf(x.clone());
        let w0 = t.leaf(Tensor::matrix(2, 2, vec![0.4, -0.7, 0.9, 0.3]).unwrap());
        let w1 = t.leaf(Tensor::matrix(2, 1, vec![1.1, -0.5]).unwrap());
        let out = gcn_forward(&mut t, a, h0, w0, w1).unwrap();
        t.value(out).clone()
    };
    let (base, permuted) = (run(&m, &x), run(&pm, &px));
    for r in 0..3 {
        assert!((permuted.get(r, 0) - base.get(perm[r], 0)).abs() < 1e-14);
    }
}
