//! Dataset entities for the two domains, JSONL interchange, validation, and
//! a seeded synthetic generator.

mod generate;
mod io;
mod validate;

pub use generate::{generate_synthetic, GenConfig, VOCAB_SIZE};
pub use io::{load_dataset, save_dataset, DATASET_FILES};
pub use validate::{validate, ValidationReport, Violation};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}:{line}: field `{field}`: {msg}")]
    Parse {
        file: String,
        line: usize,
        field: String,
        msg: String,
    },
    #[error("no interactions")]
    NoInteractions,
    #[error("invalid dataset: {0}")]
    Invalid(ValidationReport),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("infeasible generator config: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    User,
    Category,
    Item,
    Dish,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Category => "category",
            EntityKind::Item => "item",
            EntityKind::Dish => "dish",
        }
    }
}

/// `(kind, index)` with indices dense from 0 within each kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId {
    pub kind: EntityKind,
    pub index: usize,
}

impl EntityId {
    pub fn user(index: usize) -> Self {
        Self { kind: EntityKind::User, index }
    }
    pub fn item(index: usize) -> Self {
        Self { kind: EntityKind::Item, index }
    }
    pub fn category(index: usize) -> Self {
        Self { kind: EntityKind::Category, index }
    }
    pub fn dish(index: usize) -> Self {
        Self { kind: EntityKind::Dish, index }
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.index)
    }
}

impl FromStr for EntityId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, idx) = s.split_once(':').ok_or_else(|| format!("expected kind:index, got `{s}`"))?;
        let kind = match kind {
            "user" => EntityKind::User,
            "category" => EntityKind::Category,
            "item" => EntityKind::Item,
            "dish" => EntityKind::Dish,
            other => return Err(format!("unknown entity kind `{other}`")),
        };
        let index = idx.parse().map_err(|_| format!("bad index in `{s}`"))?;
        Ok(Self { kind, index })
    }
}

impl Serialize for EntityId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct User {
    pub id: usize,
    pub is_common: bool,
    pub profile_doc: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: usize,
    pub doc: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub id: usize,
    pub category: usize,
    pub doc: Vec<String>,
}

/// One category of a recipe together with the items used from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeComponent {
    pub category: usize,
    pub items: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dish {
    pub id: usize,
    pub doc: Vec<String>,
    pub recipe: Vec<RecipeComponent>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

/// Purchase (domain A, target is an item) or sale (domain B, target is a
/// dish) with its order count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub user: usize,
    pub target: EntityId,
    pub count: u32,
    pub domain: Domain,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub users: Vec<User>,
    pub categories: Vec<Category>,
    pub items: Vec<Item>,
    pub dishes: Vec<Dish>,
    pub interactions: Vec<Interaction>,
}

impl Dataset {
    pub fn domain(&self, d: Domain) -> impl Iterator<Item = &Interaction> {
        self.interactions.iter().filter(move |i| i.domain == d)
    }

    pub fn n_common_users(&self) -> usize {
        self.users.iter().filter(|u| u.is_common).count()
    }

    pub fn n_unique_users(&self) -> usize {
        self.users.len() - self.n_common_users()
    }

    /// `(dish index, sales count)` for every dish the user sells, by dish id.
    pub fn sold_dishes(&self, user: usize) -> Vec<(usize, u32)> {
        let mut out: Vec<(usize, u32)> = self
            .domain(Domain::B)
            .filter(|i| i.user == user && i.target.kind == EntityKind::Dish)
            .map(|i| (i.target.index, i.count))
            .collect();
        out.sort_unstable();
        out
    }

    /// Document of a user, category, item, or dish.
    pub fn document(&self, id: EntityId) -> Option<&[String]> {
        match id.kind {
            EntityKind::User => self.users.get(id.index).map(|u| u.profile_doc.as_slice()),
            EntityKind::Category => self.categories.get(id.index).map(|c| c.doc.as_slice()),
            EntityKind::Item => self.items.get(id.index).map(|i| i.doc.as_slice()),
            EntityKind::Dish => self.dishes.get(id.index).map(|d| d.doc.as_slice()),
        }
    }

    /// Every entity with its document, kinds in user/category/item/dish order.
    pub fn corpus(&self) -> Vec<(EntityId, Vec<String>)> {
        let mut out = Vec::new();
        out.extend(self.users.iter().map(|u| (EntityId::user(u.id), u.profile_doc.clone())));
        out.extend(self.categories.iter().map(|c| (EntityId::category(c.id), c.doc.clone())));
        out.extend(self.items.iter().map(|i| (EntityId::item(i.id), i.doc.clone())));
        out.extend(self.dishes.iter().map(|d| (EntityId::dish(d.id), d.doc.clone())));
        out
    }
}
