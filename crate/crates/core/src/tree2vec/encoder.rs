use std::ops::Range;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Result;
use crate::data::{EntityId, EntityKind};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::textembed::DocVectors;
use crate::treegraph::Token;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 2,
            layers: 2,
            ff_dim: 128,
            max_len: 128,
        }
    }
}

/// Embedding-table rows: dishes, categories, items, then the two edge tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    pub n_dishes: usize,
    pub n_categories: usize,
    pub n_items: usize,
}

impl TokenVocab {
    pub fn len(&self) -> usize {
        self.n_dishes + self.n_categories + self.n_items + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row(&self, token: Token) -> usize {
        let base = self.n_dishes + self.n_categories + self.n_items;
        match token {
            Token::Node(id) => match id.kind {
                EntityKind::Dish => id.index,
                EntityKind::Category => self.n_dishes + id.index,
                EntityKind::Item => self.n_dishes + self.n_categories + id.index,
                EntityKind::User => panic!("users are not sequence tokens"),
            },
            Token::DishCat => base,
            Token::CatItem => base + 1,
        }
    }

    pub fn entity(&self, row: usize) -> Option<EntityId> {
        let (d, c) = (self.n_dishes, self.n_categories);
        if row < d {
            Some(EntityId::dish(row))
        } else if row < d + c {
            Some(EntityId::category(row - d))
        } else if row < d + c + self.n_items {
            Some(EntityId::item(row - d - c))
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ff1: usize,
    pub ff1_b: usize,
    pub ff2: usize,
    pub ff2_b: usize,
}

/// Slots of the encoder weights inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub tok: usize,
    pub level: usize,
    pub layers: Vec<LayerParams>,
    pub heads: usize,
}

impl EncoderParams {
    /// Entity rows start from their document vectors when the widths agree.
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, vocab: &TokenVocab, docvecs: &DocVectors, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let mut tok = Tensor::xavier_uniform(vocab.len(), d, rng);
        if docvecs.dim == d {
            for row in 0..vocab.len() {
                if let Some(v) = vocab.entity(row).and_then(|id| docvecs.get(&id)) {
                    tok.row_mut(row).copy_from_slice(v);
                }
            }
        }
        let tok = store.add("enc.tok", tok);
        let level = store.add("enc.level", Tensor::xavier_uniform(4, d, rng));
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut add = |name: &str, t: Tensor| store.add(format!("enc.l{l}.{name}"), t);
                LayerParams {
                    wq: add("wq", Tensor::xavier_uniform(d, d, rng)),
                    wk: add("wk", Tensor::xavier_uniform(d, d, rng)),
                    wv: add("wv", Tensor::xavier_uniform(d, d, rng)),
                    wo: add("wo", Tensor::xavier_uniform(d, d, rng)),
                    ff1: add("ff1", Tensor::xavier_uniform(d, cfg.ff_dim, rng)),
                    ff1_b: add("ff1_b", Tensor::zeros(&[1, cfg.ff_dim])),
                    ff2: add("ff2", Tensor::xavier_uniform(cfg.ff_dim, d, rng)),
                    ff2_b: add("ff2_b", Tensor::zeros(&[1, d])),
                }
            })
            .collect();
        Self { tok, level, layers, heads: cfg.heads }
    }
}

/// Position signal added to token embeddings.
#[derive(Clone, Debug)]
pub enum Positions {
    /// Row of the level table per token.
    Levels(Rc<Vec<usize>>),
    /// Fixed sinusoidal vectors of the in-sequence offset.
    Sinusoidal(Tensor),
}

pub fn sinusoidal_positions(offsets: &[usize], dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[offsets.len(), dim]);
    for (r, &pos) in offsets.iter().enumerate() {
        for (c, v) in t.row_mut(r).iter_mut().enumerate() {
            let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            *v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Post-norm transformer layers over concatenated sequences; tokens attend
/// only within their own segment.
pub fn encode_batch(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    tokens: Rc<Vec<usize>>,
    positions: &Positions,
    segments: Rc<Vec<Range<usize>>>,
) -> Result<Var> {
    let table = tape.param(store, params.tok);
    let emb = tape.gather(table, tokens)?;
    let pos = match positions {
        Positions::Levels(levels) => {
            let lt = tape.param(store, params.level);
            tape.gather(lt, levels.clone())?
        }
        Positions::Sinusoidal(t) => tape.leaf(t.clone()),
    };
    let mut x = tape.add(emb, pos)?;
    for lp in &params.layers {
        let w = |tape: &mut Tape, i: usize| tape.param(store, i);
        let (wq, wk, wv, wo) = (w(tape, lp.wq), w(tape, lp.wk), w(tape, lp.wv), w(tape, lp.wo));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let att = tape.attention(q, k, v, segments.clone(), params.heads)?;
        let o = tape.matmul(att, wo)?;
        let res = tape.add(x, o)?;
        x = tape.layer_norm(res, LN_EPS);

        let (f1, b1, f2, b2) = (w(tape, lp.ff1), w(tape, lp.ff1_b), w(tape, lp.ff2), w(tape, lp.ff2_b));
        let h = tape.matmul(x, f1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, f2)?;
        let h = tape.add_row(h, b2)?;
        let res = tape.add(x, h)?;
        x = tape.layer_norm(res, LN_EPS);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{attention_probs, grad_check_slots};
    use crate::treegraph::{serialize_tms_dfs, Tms};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (ParamStore, EncoderParams, TokenVocab) {
        let vocab = TokenVocab { n_dishes: 2, n_categories: 3, n_items: 4 };
        let cfg = EncoderConfig { model_dim: d, heads: 2, layers: 2, ff_dim: 2 * d, max_len: 128 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dv = DocVectors { dim: d + 1, map: Default::default() };
        let p = EncoderParams::init(&mut store, &cfg, &vocab, &dv, &mut rng);
        (store, p, vocab)
    }

    fn sequence(vocab: &TokenVocab) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
        let seq = serialize_tms_dfs(&Tms { dish: 1, children: vec![(0, vec![0, 3]), (2, vec![1])] });
        let tokens = seq.tokens.iter().map(|t| vocab.row(*t)).collect();
        let levels = seq.levels.iter().map(|&l| l as usize).collect();
        (Rc::new(tokens), Rc::new(levels))
    }

    #[test]
    fn vocab_rows_are_distinct() {
        let v = TokenVocab { n_dishes: 2, n_categories: 3, n_items: 4 };
        assert_eq!(v.row(Token::Node(EntityId::item(3))), 8);
        assert_eq!(v.row(Token::DishCat), 9);
        assert_eq!(v.row(Token::CatItem), 10);
        assert_eq!(v.entity(5), Some(EntityId::item(0)));
        assert_eq!(v.entity(9), None);
    }

    #[test]
    fn level_positions_shared_sinusoidal_not() {
        let (store, _, vocab) = setup(8);
        let (_, levels) = sequence(&vocab);
        // items sit at offsets 4, 6 and 10
        let lt = store.value(1);
        assert_eq!(levels[4], 3);
        assert_eq!(levels[6], 3);
        assert_eq!(lt.row(levels[4]), lt.row(levels[6]));
        let sin = sinusoidal_positions(&[4, 6], 8);
        assert_ne!(sin.row(0), sin.row(1));
    }

    #[test]
    fn attention_rows_sum_to_one_within_segments() {
        let (store, p, vocab) = setup(8);
        let (tokens, _) = sequence(&vocab);
        let x = store.value(p.tok).clone();
        let mut t = Tape::new();
        let tab = t.leaf(x);
        let e = t.gather(tab, tokens.clone()).unwrap();
        let q = t.value(e).clone();
        let n = tokens.len();
        let probs = attention_probs(&q, &q, &[0..5, 5..n], 2).unwrap();
        for (s, p) in probs.iter().enumerate() {
            let len = if s < 2 { 5 } else { n - 5 };
            for row in p.chunks(len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weight_gradient_checks() {
        let (store, p, vocab) = setup(8);
        let (tokens, levels) = sequence(&vocab);
        let n = tokens.len();
        let positions = Positions::Levels(levels);
        let segments = Rc::new(vec![0..n]);
        let target = p.layers[0].wq;
        let report = grad_check_slots(&store, &[target], 1e-5, 40, 3, |s| {
            let mut t = Tape::new();
            let out = encode_batch(&mut t, s, &p, tokens.clone(), &positions, segments.clone()).unwrap();
            let pooled = t.sum_rows(out);
            let w = t.leaf(Tensor::from_rows(&[(0..8).map(|i| 0.1 * i as f64 - 0.3).collect()]).unwrap());
            let prod = t.mul(pooled, w).unwrap();
            let loss = t.sum(prod);
            let grads = t.backward(loss).param_grads(&t, s);
            Ok((t.value(loss).data()[0], grads))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
