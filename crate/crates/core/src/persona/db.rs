use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::DomainDataset;
use crate::error::{Error, Result};
use crate::idh::{CategoryLabels, IdhAnalysis, ItemCriterion};
use crate::quantile::{OrdinalLabel, Tertiles};

/// Category-indexed ordinal labels of one user in one domain.
///
/// A category appears in the price map only when the user has at least
/// one priced item there; the other category maps cover every category the
/// user interacted with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaDb {
    #[serde(rename = "User ID")]
    pub user_id: String,
    #[serde(rename = "price_affiliated_group")]
    pub price: BTreeMap<String, OrdinalLabel>,
    #[serde(rename = "rating_score_preferred_group")]
    pub rating: BTreeMap<String, OrdinalLabel>,
    #[serde(rename = "rating_nums_preferred_group")]
    pub popularity: BTreeMap<String, OrdinalLabel>,
    #[serde(rename = "cats_familiarity")]
    pub familiarity: BTreeMap<String, OrdinalLabel>,
    #[serde(rename = "cats_interaction_diversity")]
    pub diversity: OrdinalLabel,
}

impl PersonaDb {
    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.familiarity.keys().map(String::as_str)
    }
}

/// Distinct-category count per user and its label under domain-wide tertiles.
pub fn category_diversity(dataset: &DomainDataset) -> Result<BTreeMap<String, (usize, OrdinalLabel)>> {
    let counts: BTreeMap<&String, usize> = dataset
        .views()
        .user_categories
        .iter()
        .map(|(u, cats)| (u, cats.len()))
        .collect();
    let t = Tertiles::from_values(counts.values().map(|&x| x as f64))?;
    Ok(counts
        .into_iter()
        .map(|(u, x)| (u.clone(), (x, t.label(x as f64))))
        .collect())
}

/// Per-category familiarity labels: the user's event count in the category
/// against the tertiles of all counts in that category.
pub fn category_familiarity_labels(dataset: &DomainDataset) -> Result<CategoryLabels> {
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for (u, cats) in &dataset.views().user_categories {
        for (c, view) in cats {
            counts.entry(c).or_default().insert(u, view.events);
        }
    }
    let mut out = CategoryLabels::new();
    for (c, users) in counts {
        let t = Tertiles::from_values(users.values().map(|&n| n as f64))?;
        out.insert(
            c.to_string(),
            users
                .into_iter()
                .map(|(u, n)| (u.to_string(), t.label(n as f64)))
                .collect(),
        );
    }
    Ok(out)
}

pub fn category_familiarity_label(user: &str, category: &str, labels: &CategoryLabels) -> Result<OrdinalLabel> {
    labels
        .get(category)
        .and_then(|m| m.get(user))
        .copied()
        .ok_or_else(|| Error::Unknown {
            kind: "user in category",
            name: format!("{user} / {category}"),
        })
}

fn labels_of(labels: &CategoryLabels, user: &str, categories: &[&String]) -> BTreeMap<String, OrdinalLabel> {
    categories
        .iter()
        .filter_map(|c| labels.get(*c)?.get(user).map(|l| ((*c).clone(), *l)))
        .collect()
}

pub fn build_persona_db(
    user: &str,
    dataset: &DomainDataset,
    idh: &IdhAnalysis,
    familiarity: &CategoryLabels,
    diversity: &BTreeMap<String, (usize, OrdinalLabel)>,
) -> Result<PersonaDb> {
    let categories: Vec<&String> = dataset
        .views()
        .user_categories
        .get(user)
        .map(|m| m.keys().collect())
        .unwrap_or_default();
    if categories.is_empty() {
        return Err(Error::EmptyInput(format!("user {user} has no interactions")));
    }
    let diversity = diversity
        .get(user)
        .map(|&(_, l)| l)
        .ok_or_else(|| Error::MissingLabels("CD".into()))?;
    Ok(PersonaDb {
        user_id: user.to_string(),
        price: labels_of(idh.labels_for(ItemCriterion::Ps)?, user, &categories),
        rating: labels_of(idh.labels_for(ItemCriterion::Qp)?, user, &categories),
        popularity: labels_of(idh.labels_for(ItemCriterion::Pb)?, user, &categories),
        familiarity: labels_of(familiarity, user, &categories),
        diversity,
    })
}

/// Databases for every user of the dataset, in user order.
pub fn build_persona_dbs(dataset: &DomainDataset, idh: &IdhAnalysis) -> Result<Vec<PersonaDb>> {
    let cf = category_familiarity_labels(dataset)?;
    let cd = category_diversity(dataset)?;
    dataset
        .users()
        .iter()
        .map(|u| build_persona_db(u, dataset, idh, &cf, &cd))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{InteractionRecord, ItemMeta};

    fn item(id: &str, cat: &str, price: Option<f64>) -> ItemMeta {
        ItemMeta {
            item: id.into(),
            title: format!("title {id}"),
            category: cat.into(),
            price,
            avg_rating: 4.0,
            rating_count: 10,
            description: None,
        }
    }

    fn ev(u: &str, i: &str, ts: i64) -> InteractionRecord {
        InteractionRecord {
            user: u.into(),
            item: i.into(),
            rating: 4.0,
            ts,
        }
    }

    fn dataset() -> DomainDataset {
        let items = vec![
            item("a1", "A", Some(5.0)),
            item("a2", "A", Some(50.0)),
            item("b1", "B", None),
        ];
        let inter = vec![
            ev("u1", "a1", 1),
            ev("u1", "a1", 2),
            ev("u1", "b1", 3),
            ev("u2", "a2", 1),
            ev("u3", "b1", 1),
        ];
        DomainDataset::new("d", inter, items).unwrap()
    }

    #[test]
    fn diversity_counts_distinct_categories() {
        let cd = category_diversity(&dataset()).unwrap();
        assert_eq!(cd["u1"].0, 2);
        assert_eq!(cd["u2"].0, 1);
        // counts [1, 1, 2]: q13 = 1, q23 = 1, so everyone is High.
        assert!(cd.values().all(|&(_, l)| l == OrdinalLabel::High));
    }

    #[test]
    fn familiarity_boundaries() {
        let mut t = CategoryLabels::new();
        let th = Tertiles::from_values([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!((th.q13, th.q23), (2.0, 4.0));
        t.insert("C".into(), [("x".to_string(), th.label(3.0)), ("y".to_string(), th.label(4.0))].into());
        assert_eq!(category_familiarity_label("x", "C", &t).unwrap(), OrdinalLabel::Medium);
        assert_eq!(category_familiarity_label("y", "C", &t).unwrap(), OrdinalLabel::High);
        assert!(category_familiarity_label("z", "C", &t).is_err());
    }

    #[test]
    fn sole_user_in_category_is_high() {
        let cf = category_familiarity_labels(&dataset()).unwrap();
        // Only u1 and u3 touch B; counts [1, 1].
        assert_eq!(cf["B"]["u3"], OrdinalLabel::High);
    }

    #[test]
    fn db_shape_and_round_trip() {
        let ds = dataset();
        let idh = IdhAnalysis::run(&ds, &ItemCriterion::ALL).unwrap();
        let dbs = build_persona_dbs(&ds, &idh).unwrap();
        let u1 = &dbs[0];
        assert_eq!(u1.user_id, "u1");
        // B has no prices, so only A carries a price label.
        assert_eq!(u1.price.keys().collect::<Vec<_>>(), ["A"]);
        assert_eq!(u1.rating.len(), 2);
        assert_eq!(u1.familiarity.len(), 2);

        let js = serde_json::to_value(u1).unwrap();
        for key in [
            "User ID",
            "price_affiliated_group",
            "rating_score_preferred_group",
            "rating_nums_preferred_group",
            "cats_familiarity",
            "cats_interaction_diversity",
        ] {
            assert!(js.get(key).is_some(), "{key}");
        }
        assert!(js["price_affiliated_group"]["A"].is_string());
        let back: PersonaDb = serde_json::from_value(js).unwrap();
        assert_eq!(&back, u1);
    }

    #[test]
    fn missing_labels_and_unknown_user() {
        let ds = dataset();
        let cf = category_familiarity_labels(&ds).unwrap();
        let cd = category_diversity(&ds).unwrap();
        let partial = IdhAnalysis::run(&ds, &[ItemCriterion::Qp]).unwrap();
        match build_persona_db("u1", &ds, &partial, &cf, &cd) {
            Err(Error::MissingLabels(c)) => assert_eq!(c, "PS"),
            other => panic!("{other:?}"),
        }
        let full = IdhAnalysis::run(&ds, &ItemCriterion::ALL).unwrap();
        assert!(build_persona_db("nobody", &ds, &full, &cf, &cd).is_err());
    }
}
