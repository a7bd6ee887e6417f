//! Catalog search-and-purchase environment.
//!
//! The catalog crosses 8 product types with 5 attributes, one product per
//! combination, each with a 3-value option dimension and a seeded price.
//! `Search[query]` ranks products by token overlap; `Choose[title]` opens a
//! product, `Choose[value]` selects an option, and `Choose[buy]` ends the
//! episode with a graded match score against the goal's attribute, option,
//! and price cap.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{parse_action, EnvError, EnvState, Environment, StatePayload, TaskSpec, TaskTruth};
use crate::rewards::{normalize_tokens, shop_reward, ShopChoice, ShopTarget};

/// Product type with its option dimension name and the three option values.
const TYPES: [(&str, &str, [&str; 3]); 8] = [
    ("jacket", "color", ["red", "blue", "green"]),
    ("boots", "size", ["small", "medium", "large"]),
    ("backpack", "capacity", ["20l", "30l", "45l"]),
    ("lamp", "finish", ["matte", "glossy", "satin"]),
    ("kettle", "voltage", ["110v", "220v", "240v"]),
    ("tent", "berth", ["solo", "duo", "family"]),
    ("blanket", "material", ["wool", "fleece", "cotton"]),
    ("speaker", "power", ["10w", "20w", "40w"]),
];

const ATTRIBUTES: [&str; 5] = ["waterproof", "lightweight", "compact", "durable", "premium"];

const BRANDS: [&str; 40] = [
    "Norlan", "Vexa", "Tundrix", "Halcyon", "Orvix", "Peltor", "Quanda", "Rivelle", "Sondor",
    "Tessok", "Ulvane", "Vantor", "Wrenfel", "Xandor", "Yorvik", "Zephell", "Arctern", "Boreal",
    "Cindral", "Dorvath", "Elkarim", "Fennix", "Galdor", "Hestral", "Ivorine", "Jorvand",
    "Kestrel", "Lumara", "Morvath", "Nellior", "Ostrand", "Pindral", "Quorvex", "Rastel",
    "Selvane", "Torvald", "Umbrell", "Vandrik", "Wistral", "Ysolde",
];

/// One catalog entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Product {
    pub title: String,
    pub product_type: String,
    pub attribute: String,
    pub option_name: String,
    pub option_values: [String; 3],
    pub price: f64,
}

impl Product {
    fn tokens(&self) -> BTreeSet<String> {
        let mut set: BTreeSet<String> = normalize_tokens(&self.title).into_iter().collect();
        set.extend(normalize_tokens(&self.product_type));
        set.extend(normalize_tokens(&self.attribute));
        set
    }
}

/// Hidden per-episode state: browsing position and the scoring target.
#[derive(Debug, Clone, PartialEq)]
pub struct ShopState {
    target: ShopTarget,
    /// Catalog indices currently listed as search results.
    results: Vec<usize>,
    /// Catalog index of the product page being viewed.
    viewing: Option<usize>,
    chosen_options: BTreeSet<String>,
}

pub struct SynthShopEnv {
    products: Vec<Product>,
}

impl SynthShopEnv {
    pub fn new(world_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed);
        let mut brands: Vec<&str> = BRANDS.to_vec();
        use rand::seq::SliceRandom;
        brands.shuffle(&mut rng);
        let mut products = Vec::with_capacity(TYPES.len() * ATTRIBUTES.len());
        for (ti, (ptype, option_name, values)) in TYPES.iter().enumerate() {
            for (ai, attribute) in ATTRIBUTES.iter().enumerate() {
                let idx = ti * ATTRIBUTES.len() + ai;
                let title =
                    format!("{} {} {}", capitalize(attribute), brands[idx], capitalize(ptype));
                products.push(Product {
                    title,
                    product_type: ptype.to_string(),
                    attribute: attribute.to_string(),
                    option_name: option_name.to_string(),
                    option_values: values.map(str::to_string),
                    price: rng.random_range(12..180) as f64,
                });
            }
        }
        Self { products }
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    /// Ranks catalog indices by query-token overlap, descending, ties broken
    /// by title; products with zero overlap are excluded.
    pub fn search_scored(&self, query: &str) -> Vec<(usize, usize)> {
        let query_tokens: BTreeSet<String> = normalize_tokens(query).into_iter().collect();
        let mut scored: Vec<(usize, usize)> = self
            .products
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let overlap = p.tokens().intersection(&query_tokens).count();
                (overlap > 0).then_some((i, overlap))
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.cmp(&a.1).then_with(|| self.products[a.0].title.cmp(&self.products[b.0].title))
        });
        scored
    }

    fn find_by_title(&self, title: &str) -> Option<usize> {
        let needle = title.trim().to_lowercase();
        self.products.iter().position(|p| p.title.to_lowercase() == needle)
    }

    fn product_page(&self, idx: usize) -> String {
        let p = &self.products[idx];
        format!(
            "You are viewing {}. Price: ${:.0}. Options: {}: {}.",
            p.title,
            p.price,
            p.option_name,
            p.option_values.join(", ")
        )
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

impl Environment for SynthShopEnv {
    fn env_id(&self) -> &'static str {
        "synthshop"
    }

    fn default_max_steps(&self) -> u32 {
        10
    }

    fn reset(&self, task: &TaskSpec, _seed: u64) -> Result<EnvState, EnvError> {
        let mismatch = |detail: String| EnvError::TaskNotFound {
            task_id: task.task_id.clone(),
            detail,
        };
        let TaskTruth::Shop {
            search_query,
            product_title,
            product_type,
            attribute,
            option,
            wrong_option,
            price_limit,
            distractor_query,
        } = &task.truth
        else {
            return Err(mismatch("truth is not a shop record".into()));
        };
        let Some(idx) = self.find_by_title(product_title) else {
            return Err(mismatch(format!("no product titled {product_title:?}")));
        };
        let product = &self.products[idx];
        if &product.product_type != product_type || &product.attribute != attribute {
            return Err(mismatch("type or attribute does not match the catalog".into()));
        }
        if !product.option_values.contains(option) {
            return Err(mismatch(format!("option {option:?} not offered")));
        }
        if !product.option_values.contains(wrong_option) || wrong_option == option {
            return Err(mismatch(format!("bad wrong option {wrong_option:?}")));
        }
        if product.price > *price_limit {
            return Err(mismatch("price limit below the product price".into()));
        }
        match self.search_scored(search_query).first() {
            Some((top, _)) if *top == idx => {}
            _ => return Err(mismatch(format!("query {search_query:?} does not rank the product first"))),
        }
        if !self.search_scored(distractor_query).is_empty() {
            return Err(mismatch(format!("distractor query {distractor_query:?} has matches")));
        }
        let target = ShopTarget {
            attributes: BTreeSet::from([attribute.clone()]),
            options: BTreeSet::from([option.clone()]),
            price_limit: *price_limit,
            type_text: product_type.clone(),
        };
        Ok(EnvState {
            observation_text: format!(
                "Welcome to the shop. Your task: {} Search to begin.",
                task.goal_text
            ),
            terminal: false,
            payload: StatePayload::Shop(ShopState {
                target,
                results: Vec::new(),
                viewing: None,
                chosen_options: BTreeSet::new(),
            }),
        })
    }

    fn step(&self, state: &EnvState, action: &str) -> Result<(EnvState, f64), EnvError> {
        if state.terminal {
            return Err(EnvError::EpisodeOver);
        }
        let StatePayload::Shop(shop) = &state.payload else {
            return Err(EnvError::EpisodeOver);
        };
        let mut next = shop.clone();
        let mut terminal = false;
        let mut reward = 0.0;
        let observation = match parse_action(action) {
            Some(("Search", query)) => {
                next.viewing = None;
                next.chosen_options.clear();
                let scored = self.search_scored(query);
                next.results = scored.iter().take(3).map(|(i, _)| *i).collect();
                if next.results.is_empty() {
                    format!("Could not find any products matching {}.", query.trim())
                } else {
                    let listing = next
                        .results
                        .iter()
                        .enumerate()
                        .map(|(rank, i)| {
                            let p = &self.products[*i];
                            format!("{}. {} (${:.0})", rank + 1, p.title, p.price)
                        })
                        .collect::<Vec<_>>()
                        .join(" | ");
                    format!("Results: {listing}")
                }
            }
            Some(("Choose", arg)) => {
                if arg == "buy" {
                    match next.viewing {
                        Some(idx) => {
                            let product = &self.products[idx];
                            let choice = ShopChoice {
                                attributes: BTreeSet::from([product.attribute.clone()]),
                                options: next.chosen_options.clone(),
                                price: product.price,
                                type_text: product.product_type.clone(),
                            };
                            reward = shop_reward(&next.target, &choice);
                            terminal = true;
                            format!("You buy {}. Order placed.", product.title)
                        }
                        None => "Invalid action: Choose[buy]. No product is open.".to_string(),
                    }
                } else if let Some(idx) =
                    self.find_by_title(arg).filter(|i| next.results.contains(i))
                {
                    next.viewing = Some(idx);
                    next.chosen_options.clear();
                    self.product_page(idx)
                } else if let Some(idx) = next.viewing {
                    let product = &self.products[idx];
                    if product.option_values.iter().any(|v| v == arg) {
                        next.chosen_options.insert(arg.to_string());
                        format!("You select {arg}.")
                    } else {
                        format!("Invalid action: {action}.")
                    }
                } else {
                    format!("Invalid action: {action}.")
                }
            }
            _ => format!(
                "Invalid action: {action}. Valid actions: Search[query], Choose[item]."
            ),
        };
        Ok((
            EnvState {
                observation_text: observation,
                terminal,
                payload: StatePayload::Shop(next),
            },
            reward,
        ))
    }
}
