//! Seeded two-domain dataset generator.
//!
//! Latent topic mixtures drive everything: documents are sampled from the
//! entity's mixture, dishes combine topically coherent categories, and
//! purchases follow user taste plus the ingredient needs of the dishes a
//! common user sells. Needs are category-level, so a restaurant selling a
//! dish that uses "beef" buys beef items that may differ from the recipe's
//! exact item.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Geometric, Normal};
use serde::{Deserialize, Serialize};

use super::{Category, DataError, Dataset, Dish, Domain, EntityId, Interaction, Item, RecipeComponent, User};

pub const VOCAB_SIZE: usize = 500;
const NOISE_TOKEN_RATE: f64 = 0.1;
const DOC_LEN: std::ops::RangeInclusive<usize> = 20..=50;
/// Weight of latent taste in purchase scores.
const TASTE_WEIGHT: f64 = 1.0;
/// Weight of the category-level needs of sold dishes.
const NEED_WEIGHT: f64 = 3.0;
/// Extra weight for the exact items listed in sold recipes.
const RECIPE_ITEM_WEIGHT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_common_users: usize,
    pub n_unique_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_dishes: usize,
    /// Proportion `M` of unique users among all users.
    pub unique_user_proportion: f64,
    /// Expected fraction of (user, item) pairs with a domain-A purchase.
    pub sparsity_a: f64,
    pub latent_dim: usize,
    pub rng_seed: u64,
}

impl Default for GenConfig {
    /// The standard desk-scale dataset.
    fn default() -> Self {
        Self {
            n_common_users: 300,
            n_unique_users: 60,
            n_items: 200,
            n_categories: 40,
            n_dishes: 150,
            unique_user_proportion: 60.0 / 360.0,
            sparsity_a: 0.03,
            latent_dim: 8,
            rng_seed: 0,
        }
    }
}

impl GenConfig {
    /// Sets `M` and derives the unique-user count from the common-user count.
    pub fn with_unique_proportion(mut self, m: f64) -> Self {
        self.unique_user_proportion = m;
        self.n_unique_users = ((m * self.n_common_users as f64) / (1.0 - m)).round() as usize;
        self
    }

    pub fn n_users(&self) -> usize {
        self.n_common_users + self.n_unique_users
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        for (name, v) in [
            ("n_common_users", self.n_common_users),
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("n_dishes", self.n_dishes),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.n_items < self.n_categories {
            return bad("every category needs at least one item (n_items < n_categories)".into());
        }
        let m = self.unique_user_proportion;
        if !(m > 0.0 && m < 1.0) {
            return bad(format!("unique_user_proportion {m} outside (0,1)"));
        }
        let total = self.n_users() as f64;
        if (self.n_unique_users as f64 / total - m).abs() > 1.0 / total {
            return bad(format!(
                "unique_user_proportion {m} inconsistent with {} unique of {} users",
                self.n_unique_users, total
            ));
        }
        if !(self.sparsity_a > 0.0 && self.sparsity_a < 1.0) {
            return bad(format!("sparsity_a {} outside (0,1)", self.sparsity_a));
        }
        Ok(())
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut v: Vec<f64> = (0..k).map(|_| g.sample(rng).max(1e-12)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn token(i: usize) -> String {
    format!("w{i:03}")
}

fn document(rng: &mut ChaCha8Rng, mixture: &[f64]) -> Vec<String> {
    let k = mixture.len();
    let per_topic = VOCAB_SIZE / k;
    let topics = WeightedIndex::new(mixture).expect("valid mixture");
    let len = rng.random_range(DOC_LEN);
    (0..len)
        .map(|_| {
            if per_topic == 0 || rng.random::<f64>() < NOISE_TOKEN_RATE {
                token(rng.random_range(0..VOCAB_SIZE))
            } else {
                let t = topics.sample(rng);
                token(t * per_topic + rng.random_range(0..per_topic))
            }
        })
        .collect()
}

/// Top-`n` by `score + Gumbel noise`: sampling without replacement with
/// probabilities proportional to `exp(score)`.
fn gumbel_top_n(rng: &mut ChaCha8Rng, scores: &[f64], n: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let u: f64 = rng.random::<f64>().max(1e-300);
            (s - (-u.ln()).ln(), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(n).map(|(_, i)| i).collect()
}

/// Order count with mean 2.
fn order_count(rng: &mut ChaCha8Rng) -> u32 {
    let g = Geometric::new(0.5).expect("valid p");
    1 + g.sample(rng).min(1000) as u32
}

pub fn generate_synthetic(cfg: &GenConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let k = cfg.latent_dim;

    // categories
    let cat_latent: Vec<Vec<f64>> = (0..cfg.n_categories)
        .map(|c| {
            let noise = dirichlet(&mut rng, 0.5, k);
            let mut v: Vec<f64> = noise.iter().map(|x| 0.25 * x).collect();
            v[c % k] += 0.75;
            v
        })
        .collect();

    // items: every category gets one, the rest are spread uniformly
    let mut item_cat: Vec<usize> = (0..cfg.n_categories).collect();
    item_cat.extend((cfg.n_categories..cfg.n_items).map(|_| rng.random_range(0..cfg.n_categories)));
    item_cat.shuffle(&mut rng);
    let pop = Normal::new(0.0, 0.8).expect("valid sigma");
    let mut item_latent = Vec::with_capacity(cfg.n_items);
    let mut item_logpop = Vec::with_capacity(cfg.n_items);
    for &c in &item_cat {
        let noise = dirichlet(&mut rng, 0.5, k);
        let mut v: Vec<f64> = cat_latent[c].iter().zip(&noise).map(|(a, b)| 0.8 * a + 0.2 * b).collect();
        normalize(&mut v);
        item_latent.push(v);
        item_logpop.push(pop.sample(&mut rng));
    }
    let mut cat_items: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_categories];
    for (i, &c) in item_cat.iter().enumerate() {
        cat_items[c].push(i);
    }

    // dishes with distinct recipes
    let mut recipes: Vec<Vec<RecipeComponent>> = Vec::with_capacity(cfg.n_dishes);
    let mut seen: BTreeSet<Vec<(usize, Vec<usize>)>> = BTreeSet::new();
    let max_attempts = 200 * cfg.n_dishes + 1000;
    let mut attempts = 0;
    while recipes.len() < cfg.n_dishes {
        attempts += 1;
        if attempts > max_attempts {
            return Err(DataError::Infeasible(format!(
                "could only build {} distinct recipes for {} dishes",
                recipes.len(),
                cfg.n_dishes
            )));
        }
        let topic = rng.random_range(0..k);
        let n_cat = rng.random_range(2..=4).min(cfg.n_categories);
        let weights: Vec<f64> = cat_latent.iter().map(|l| (l[topic] + 0.02).ln()).collect();
        let mut cats = gumbel_top_n(&mut rng, &weights, n_cat);
        cats.sort_unstable();
        let mut comps = Vec::with_capacity(cats.len());
        for c in cats {
            let pool = &cat_items[c];
            let n_items = rng.random_range(1..=2).min(pool.len());
            let scores: Vec<f64> = pool.iter().map(|&i| item_logpop[i]).collect();
            let mut items: Vec<usize> = gumbel_top_n(&mut rng, &scores, n_items).into_iter().map(|p| pool[p]).collect();
            items.sort_unstable();
            comps.push(RecipeComponent { category: c, items });
        }
        let sig: Vec<(usize, Vec<usize>)> = comps.iter().map(|c| (c.category, c.items.clone())).collect();
        if seen.insert(sig) {
            recipes.push(comps);
        }
    }
    let dish_latent: Vec<Vec<f64>> = recipes
        .iter()
        .map(|r| {
            let mut v = vec![0.0; k];
            for &i in r.iter().flat_map(|c| &c.items) {
                v.iter_mut().zip(&item_latent[i]).for_each(|(a, b)| *a += b);
            }
            normalize(&mut v);
            v
        })
        .collect();

    // users: common first, then unique
    let n_users = cfg.n_users();
    let user_latent: Vec<Vec<f64>> = (0..n_users).map(|_| dirichlet(&mut rng, 0.3, k)).collect();

    let mut interactions = Vec::new();
    // domain B: every common user sells 1..=3 dishes
    let mut user_needs: Vec<Option<(Vec<f64>, BTreeSet<usize>)>> = vec![None; n_users];
    for (u, latent) in user_latent.iter().enumerate().take(cfg.n_common_users) {
        let n_sold = rng.random_range(1..=3).min(cfg.n_dishes);
        let scores: Vec<f64> = dish_latent.iter().map(|d| 8.0 * dot(latent, d)).collect();
        let mut sold = gumbel_top_n(&mut rng, &scores, n_sold);
        sold.sort_unstable();
        let counts: Vec<u32> = sold.iter().map(|_| order_count(&mut rng)).collect();
        let max = *counts.iter().max().expect("at least one dish") as f64;
        let mut need = vec![0.0; cfg.n_categories];
        let mut recipe_items = BTreeSet::new();
        for (&d, &cnt) in sold.iter().zip(&counts) {
            interactions.push(Interaction {
                user: u,
                target: EntityId::dish(d),
                count: cnt,
                domain: Domain::B,
            });
            for comp in &recipes[d] {
                need[comp.category] += cnt as f64 / max;
                recipe_items.extend(comp.items.iter().copied());
            }
        }
        user_needs[u] = Some((need, recipe_items));
    }

    // domain A: total purchases fixed by sparsity, at least one per user
    let target_total = ((cfg.sparsity_a * (n_users * cfg.n_items) as f64).round() as usize).max(n_users);
    let activity = Normal::new(0.0, 0.5).expect("valid sigma");
    let act_weights: Vec<f64> = (0..n_users).map(|_| f64::exp(activity.sample(&mut rng))).collect();
    let mut per_user = vec![1usize; n_users];
    let pick = WeightedIndex::new(&act_weights).expect("positive weights");
    let mut extra = target_total - n_users;
    while extra > 0 {
        let u = pick.sample(&mut rng);
        if per_user[u] < cfg.n_items {
            per_user[u] += 1;
            extra -= 1;
        } else if per_user.iter().all(|&n| n >= cfg.n_items) {
            break;
        }
    }
    for u in 0..n_users {
        let scores: Vec<f64> = (0..cfg.n_items)
            .map(|i| {
                let mut s = item_logpop[i] + TASTE_WEIGHT * k as f64 * dot(&user_latent[u], &item_latent[i]);
                if let Some((need, recipe_items)) = &user_needs[u] {
                    s += NEED_WEIGHT * need[item_cat[i]].min(1.5);
                    if recipe_items.contains(&i) {
                        s += RECIPE_ITEM_WEIGHT;
                    }
                }
                s
            })
            .collect();
        let mut bought = gumbel_top_n(&mut rng, &scores, per_user[u]);
        bought.sort_unstable();
        for i in bought {
            interactions.push(Interaction {
                user: u,
                target: EntityId::item(i),
                count: order_count(&mut rng),
                domain: Domain::A,
            });
        }
    }

    // documents
    let users = (0..n_users)
        .map(|u| User {
            id: u,
            is_common: u < cfg.n_common_users,
            profile_doc: document(&mut rng, &user_latent[u]),
        })
        .collect();
    let categories = (0..cfg.n_categories)
        .map(|c| Category {
            id: c,
            doc: document(&mut rng, &cat_latent[c]),
        })
        .collect();
    let items = (0..cfg.n_items)
        .map(|i| Item {
            id: i,
            category: item_cat[i],
            doc: document(&mut rng, &item_latent[i]),
        })
        .collect();
    let dishes = recipes
        .into_iter()
        .enumerate()
        .map(|(d, recipe)| Dish {
            id: d,
            doc: document(&mut rng, &dish_latent[d]),
            recipe,
        })
        .collect();
    Ok(Dataset {
        users,
        categories,
        items,
        dishes,
        interactions,
    })
}
