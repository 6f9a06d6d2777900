use std::collections::BTreeSet;
use std::fmt;

use super::{Dataset, Domain, EntityId, EntityKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NonContiguousId { kind: EntityKind, position: usize, id: usize },
    UniqueUserWithDomainB { user: usize },
    CommonUserWithoutTms { user: usize },
    ItemWithUnknownCategory { item: usize, category: usize },
    EmptyRecipe { dish: usize },
    EmptyRecipeComponent { dish: usize, category: usize },
    RecipeItemOutsideCategory { dish: usize, category: usize, item: usize },
    UnknownReference { interaction: usize, target: String },
    WrongTargetKind { interaction: usize, target: EntityId, domain: Domain },
    ZeroCount { interaction: usize },
    DuplicateInteraction { interaction: usize },
    EmptyDocument { entity: EntityId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            NonContiguousId { kind, position, id } => {
                write!(f, "{} record #{position} has id {id} (ids must be contiguous from 0)", kind.as_str())
            }
            UniqueUserWithDomainB { user } => write!(f, "unique user user:{user} has domain-B records"),
            CommonUserWithoutTms { user } => write!(f, "common user without TMS: user:{user}"),
            ItemWithUnknownCategory { item, category } => {
                write!(f, "item:{item} references unknown category:{category}")
            }
            EmptyRecipe { dish } => write!(f, "dish:{dish} has an empty recipe"),
            EmptyRecipeComponent { dish, category } => {
                write!(f, "dish:{dish} lists category:{category} without items")
            }
            RecipeItemOutsideCategory { dish, category, item } => {
                write!(f, "dish:{dish} lists item:{item} under category:{category} it does not belong to")
            }
            UnknownReference { interaction, target } => {
                write!(f, "interaction #{interaction} references unknown {target}")
            }
            WrongTargetKind { interaction, target, domain } => {
                write!(f, "interaction #{interaction}: {target} is not a valid domain-{domain:?} target")
            }
            ZeroCount { interaction } => write!(f, "interaction #{interaction} has count 0"),
            DuplicateInteraction { interaction } => {
                write!(f, "interaction #{interaction} duplicates an earlier (user, target, domain)")
            }
            EmptyDocument { entity } => write!(f, "{entity} has an empty document"),
        }
    }
}

/// Every invariant violation found; empty iff the dataset is valid.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", lines.join("; "))
    }
}

pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut v = Vec::new();
    let ids = |kind, it: &mut dyn Iterator<Item = usize>, v: &mut Vec<Violation>| {
        for (position, id) in it.enumerate() {
            if id != position {
                v.push(Violation::NonContiguousId { kind, position, id });
            }
        }
    };
    ids(EntityKind::User, &mut ds.users.iter().map(|u| u.id), &mut v);
    ids(EntityKind::Category, &mut ds.categories.iter().map(|c| c.id), &mut v);
    ids(EntityKind::Item, &mut ds.items.iter().map(|i| i.id), &mut v);
    ids(EntityKind::Dish, &mut ds.dishes.iter().map(|d| d.id), &mut v);

    for (entity, doc) in ds.corpus() {
        if doc.is_empty() {
            v.push(Violation::EmptyDocument { entity });
        }
    }
    for item in &ds.items {
        if item.category >= ds.categories.len() {
            v.push(Violation::ItemWithUnknownCategory {
                item: item.id,
                category: item.category,
            });
        }
    }
    for dish in &ds.dishes {
        if dish.recipe.is_empty() {
            v.push(Violation::EmptyRecipe { dish: dish.id });
        }
        for comp in &dish.recipe {
            if comp.items.is_empty() {
                v.push(Violation::EmptyRecipeComponent {
                    dish: dish.id,
                    category: comp.category,
                });
            }
            for &item in &comp.items {
                if ds.items.get(item).is_none_or(|i| i.category != comp.category) {
                    v.push(Violation::RecipeItemOutsideCategory {
                        dish: dish.id,
                        category: comp.category,
                        item,
                    });
                }
            }
        }
    }

    let mut seen = BTreeSet::new();
    let mut sells = vec![false; ds.users.len()];
    for (n, it) in ds.interactions.iter().enumerate() {
        let Some(user) = ds.users.get(it.user) else {
            v.push(Violation::UnknownReference {
                interaction: n,
                target: format!("user:{}", it.user),
            });
            continue;
        };
        let expected = match it.domain {
            Domain::A => EntityKind::Item,
            Domain::B => EntityKind::Dish,
        };
        if it.target.kind != expected {
            v.push(Violation::WrongTargetKind {
                interaction: n,
                target: it.target,
                domain: it.domain,
            });
        } else {
            let exists = match expected {
                EntityKind::Item => it.target.index < ds.items.len(),
                _ => it.target.index < ds.dishes.len(),
            };
            if !exists {
                v.push(Violation::UnknownReference {
                    interaction: n,
                    target: it.target.to_string(),
                });
            }
        }
        if it.count == 0 {
            v.push(Violation::ZeroCount { interaction: n });
        }
        if !seen.insert((it.user, it.target, it.domain)) {
            v.push(Violation::DuplicateInteraction { interaction: n });
        }
        if it.domain == Domain::B {
            if user.is_common {
                sells[it.user] = true;
            } else {
                v.push(Violation::UniqueUserWithDomainB { user: it.user });
            }
        }
    }
    for u in &ds.users {
        if u.is_common && !sells.get(u.id).copied().unwrap_or(false) {
            v.push(Violation::CommonUserWithoutTms { user: u.id });
        }
    }
    ValidationReport { violations: v }
}
