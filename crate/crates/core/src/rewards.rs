//! Terminal reward functions for the three environments.
//!
//! - [`f1_reward`]: token-level F1 between a generated answer and the gold
//!   answer, the question-answering episode return.
//! - [`binary_reward`]: 1.0 or 0.0 from a goal predicate, the household
//!   episode return.
//! - [`shop_reward`]: attribute/option/price match between the purchased
//!   product and the request, the shopping episode return:
//!
//! ```text
//! r = r_type * (|att_match| + |opt_match| + 1[price <= limit])
//!            / (|req_att| + |req_opt| + 1)
//! ```
//!
//! where `r_type` is 1 iff the requested and purchased product types share at
//! least one normalized token, else 0.
//!
//! All three return values in [0, 1] and are pure functions of their inputs.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// Fixed stopword list used by answer normalization. Exactly these 30 words
/// are dropped; the list is part of the reward definition and never changes
/// at runtime.
pub const STOPWORDS: [&str; 30] = [
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "has", "he", "in",
    "is", "it", "its", "of", "on", "or", "that", "the", "these", "this", "those", "to", "was",
    "were", "will", "with",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Normalizes answer text: lowercase, strip punctuation characters, split on
/// whitespace, drop stopwords. Returns the surviving tokens in order
/// (duplicates kept; F1 counts multiplicity).
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    lowered
        .split_whitespace()
        .filter(|t| !is_stopword(t))
        .map(str::to_string)
        .collect()
}

/// Token-level F1 between generated and gold answers.
///
/// Tokens are compared as multisets: precision = common / |generated|,
/// recall = common / |gold|, F1 = 2PR / (P + R). Both sides empty after
/// normalization scores 0.0, as does an empty intersection.
pub fn f1_reward(generated: &str, gold: &str) -> f64 {
    let gen_tokens = normalize_tokens(generated);
    let gold_tokens = normalize_tokens(gold);
    if gen_tokens.is_empty() || gold_tokens.is_empty() {
        return 0.0;
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_tokens {
        *gold_counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in &gen_tokens {
        if let Some(count) = gold_counts.get_mut(t.as_str()) {
            if *count > 0 {
                *count -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / gen_tokens.len() as f64;
    let recall = common as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Binary episode reward from a goal predicate.
pub fn binary_reward(goal_satisfied: bool) -> f64 {
    if goal_satisfied {
        1.0
    } else {
        0.0
    }
}

/// What the shopper asked for: required attributes and options, a price
/// ceiling, and the free-text product type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopTarget {
    pub attributes: BTreeSet<String>,
    pub options: BTreeSet<String>,
    pub price_limit: f64,
    pub type_text: String,
}

/// What was actually bought: the product's attributes, the options selected
/// at purchase time, the price paid, and the product's type text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopChoice {
    pub attributes: BTreeSet<String>,
    pub options: BTreeSet<String>,
    pub price: f64,
    pub type_text: String,
}

/// Graded purchase reward; see the module doc for the formula. The type
/// gate `r_type` zeroes the reward when the requested and purchased type
/// texts share no normalized token.
pub fn shop_reward(target: &ShopTarget, choice: &ShopChoice) -> f64 {
    let target_type: BTreeSet<String> = normalize_tokens(&target.type_text).into_iter().collect();
    let choice_type: BTreeSet<String> = normalize_tokens(&choice.type_text).into_iter().collect();
    let r_type = if target_type.intersection(&choice_type).next().is_some() {
        1.0
    } else {
        0.0
    };
    let att_matches = target.attributes.intersection(&choice.attributes).count();
    let opt_matches = target.options.intersection(&choice.options).count();
    let price_ok = if choice.price <= target.price_limit { 1 } else { 0 };
    let numerator = (att_matches + opt_matches + price_ok) as f64;
    let denominator = (target.attributes.len() + target.options.len() + 1) as f64;
    r_type * numerator / denominator
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent F1 oracle: counts the multiset intersection by scanning
    // per unique token, a different route than the running-count used by the
    // implementation.
    fn f1_oracle(generated: &str, gold: &str) -> f64 {
        let g = normalize_tokens(generated);
        let h = normalize_tokens(gold);
        if g.is_empty() || h.is_empty() {
            return 0.0;
        }
        let mut uniq: Vec<&String> = g.iter().collect();
        uniq.sort();
        uniq.dedup();
        let mut common = 0usize;
        for token in uniq {
            let in_g = g.iter().filter(|t| *t == token).count();
            let in_h = h.iter().filter(|t| *t == token).count();
            common += in_g.min(in_h);
        }
        if common == 0 {
            return 0.0;
        }
        let p = common as f64 / g.len() as f64;
        let r = common as f64 / h.len() as f64;
        2.0 * p * r / (p + r)
    }

    // Independent purchase-reward oracle: element-by-element membership
    // loops instead of set intersections.
    fn shop_oracle(target: &ShopTarget, choice: &ShopChoice) -> f64 {
        let tt = normalize_tokens(&target.type_text);
        let ct = normalize_tokens(&choice.type_text);
        let mut shared_type = false;
        for a in &tt {
            for b in &ct {
                if a == b {
                    shared_type = true;
                }
            }
        }
        if !shared_type {
            return 0.0;
        }
        let mut hits = 0usize;
        for a in &target.attributes {
            if choice.attributes.iter().any(|c| c == a) {
                hits += 1;
            }
        }
        for o in &target.options {
            if choice.options.iter().any(|c| c == o) {
                hits += 1;
            }
        }
        if choice.price <= target.price_limit {
            hits += 1;
        }
        hits as f64 / (target.attributes.len() + target.options.len() + 1) as f64
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn test_f1_partial_overlap_with_duplicates() {
        // generated {teen x2, titans x2, go}, gold {teen, titans, go}:
        // common 3, precision 3/5, recall 1, F1 = 0.75. "and" is a stopword.
        let v = f1_reward("Teen Titans and Teen Titans Go", "Teen Titans Go");
        assert!((v - 0.75).abs() < 1e-12, "got {v}");
        assert_eq!(v, f1_oracle("Teen Titans and Teen Titans Go", "Teen Titans Go"));
    }

    #[test]
    fn test_f1_exact_match_is_one() {
        assert!((f1_reward("Teen Titans Go", "Teen Titans Go") - 1.0).abs() < 1e-12);
        assert!((f1_reward("Tomas Reyes", "tomas reyes.") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn test_f1_disjoint_is_zero() {
        assert_eq!(f1_reward("cold fusion", "warm dinner"), 0.0);
    }

    #[test]
    fn test_f1_all_stopwords_is_zero() {
        assert_eq!(f1_reward("the of and", "the of and"), 0.0);
        assert_eq!(f1_reward("", "answer"), 0.0);
        assert_eq!(f1_reward("answer", ""), 0.0);
    }

    #[test]
    fn test_f1_range_and_symmetric_tokens() {
        let v = f1_reward("alpha beta gamma", "beta gamma delta");
        assert!((0.0..=1.0).contains(&v));
        // P = 2/3, R = 2/3 -> F1 = 2/3.
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn test_stopword_list_is_exactly_thirty() {
        let unique: BTreeSet<&str> = STOPWORDS.iter().copied().collect();
        assert_eq!(unique.len(), 30);
    }

    #[test]
    fn test_binary_reward() {
        assert_eq!(binary_reward(true), 1.0);
        assert_eq!(binary_reward(false), 0.0);
        // Idempotent on repeated evaluation of the same predicate value.
        assert_eq!(binary_reward(true), binary_reward(true));
    }

    #[test]
    fn test_shop_full_match_is_one() {
        // 2 attributes + 1 option + price ok over 2 + 1 + 1.
        let target = ShopTarget {
            attributes: set(&["waterproof", "insulated"]),
            options: set(&["medium"]),
            price_limit: 50.0,
            type_text: "travel mug".into(),
        };
        let choice = ShopChoice {
            attributes: set(&["waterproof", "insulated", "magnetic"]),
            options: set(&["medium"]),
            price: 42.0,
            type_text: "mug".into(),
        };
        let v = shop_reward(&target, &choice);
        assert!((v - 1.0).abs() < 1e-12, "got {v}");
        assert_eq!(v, shop_oracle(&target, &choice));
    }

    #[test]
    fn test_shop_half_match() {
        // 1 of 2 attributes + option ok + price exceeded = 2/4 = 0.5.
        let target = ShopTarget {
            attributes: set(&["waterproof", "insulated"]),
            options: set(&["medium"]),
            price_limit: 30.0,
            type_text: "mug".into(),
        };
        let choice = ShopChoice {
            attributes: set(&["waterproof"]),
            options: set(&["medium"]),
            price: 42.0,
            type_text: "mug".into(),
        };
        let v = shop_reward(&target, &choice);
        assert!((v - 0.5).abs() < 1e-12, "got {v}");
        assert_eq!(v, shop_oracle(&target, &choice));
    }

    #[test]
    fn test_shop_disjoint_type_zeroes_everything() {
        let target = ShopTarget {
            attributes: set(&["waterproof"]),
            options: set(&["medium"]),
            price_limit: 50.0,
            type_text: "mug".into(),
        };
        let choice = ShopChoice {
            attributes: set(&["waterproof"]),
            options: set(&["medium"]),
            price: 10.0,
            type_text: "backpack".into(),
        };
        assert_eq!(shop_reward(&target, &choice), 0.0);
    }

    #[test]
    fn test_shop_empty_requests_price_only() {
        // No required attributes or options: reward is the price indicator.
        let target = ShopTarget {
            attributes: set(&[]),
            options: set(&[]),
            price_limit: 20.0,
            type_text: "lamp".into(),
        };
        let choice = ShopChoice {
            attributes: set(&["matte"]),
            options: set(&[]),
            price: 19.0,
            type_text: "lamp".into(),
        };
        assert_eq!(shop_reward(&target, &choice), 1.0);
    }

    #[test]
    fn test_shop_monotone_in_matches() {
        // Adding a matching attribute to the choice never lowers the reward.
        let target = ShopTarget {
            attributes: set(&["waterproof", "foldable", "recycled"]),
            options: set(&["large"]),
            price_limit: 60.0,
            type_text: "backpack".into(),
        };
        let worse = ShopChoice {
            attributes: set(&["waterproof"]),
            options: set(&[]),
            price: 55.0,
            type_text: "backpack".into(),
        };
        let mut better = worse.clone();
        better.attributes.insert("foldable".into());
        assert!(shop_reward(&target, &better) >= shop_reward(&target, &worse));
    }

    #[test]
    fn test_randomized_agreement_with_oracles() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vocab = ["teen", "titans", "go", "the", "and", "silver", "harbor", "mug", "blue"];
        for _ in 0..200 {
            let pick = |rng: &mut rand_chacha::ChaCha8Rng| {
                let n = rng.random_range(0..6);
                (0..n)
                    .map(|_| vocab[rng.random_range(0..vocab.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let a = pick(&mut rng);
            let b = pick(&mut rng);
            let got = f1_reward(&a, &b);
            let want = f1_oracle(&a, &b);
            assert!((got - want).abs() < 1e-9, "{a:?} vs {b:?}: {got} vs {want}");
            assert!((0.0..=1.0).contains(&got));
        }
    }
}
