//! Caption standardization.
//!
//! Vehicles are referred to by color and type ("white and black car"),
//! pedestrians by clothing ("adult wearing a blue shirt"). Captions that
//! carry no color term (vehicles, other objects) or no clothing term
//! (pedestrians) are rejected as non-specific.

use crate::scene::{category_kind, category_noun, CategoryKind};

const COLORS: &[&str] = &[
    "white", "black", "gray", "grey", "silver", "red", "blue", "green", "yellow", "orange",
    "brown", "beige", "gold", "golden", "purple", "pink", "tan", "maroon", "navy", "teal",
    "turquoise", "cream", "khaki",
];

const VEHICLE_TYPES: &[&str] = &[
    "car", "sedan", "suv", "truck", "pickup", "van", "minivan", "bus", "motorcycle", "motorbike",
    "scooter", "bicycle", "bike", "trailer", "taxi", "jeep", "hatchback", "coupe", "wagon",
    "ambulance", "excavator", "bulldozer", "crane", "forklift", "tractor",
];

const CLOTHING: &[&str] = &[
    "shirt", "t-shirt", "tshirt", "jacket", "coat", "hoodie", "sweater", "sweatshirt", "dress",
    "skirt", "pants", "jeans", "shorts", "trousers", "hat", "cap", "helmet", "vest", "uniform",
    "top", "blouse", "suit", "scarf", "shoes", "boots", "sneakers", "raincoat", "jumpsuit",
    "overalls", "clothes", "clothing", "outfit", "tank",
];

const PLURAL_CLOTHING: &[&str] =
    &["pants", "jeans", "shorts", "trousers", "shoes", "boots", "sneakers", "overalls", "clothes", "clothing"];

fn tokens(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|t| !t.is_empty())
        .map(|t| t.trim_matches('-').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

fn canonical_color(t: &str) -> Option<&'static str> {
    match t {
        "grey" => Some("gray"),
        "golden" => Some("gold"),
        _ => COLORS.iter().copied().find(|c| *c == t),
    }
}

fn join_words(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn color_phrase(toks: &[String]) -> Option<String> {
    let mut colors: Vec<String> = Vec::new();
    for t in toks {
        if let Some(c) = canonical_color(t) {
            if !colors.iter().any(|x| x == c) {
                colors.push(c.to_string());
            }
        }
    }
    (!colors.is_empty()).then(|| join_words(&colors))
}

fn vehicle_description(toks: &[String], category: &str) -> Option<String> {
    let colors = color_phrase(toks)?;
    let kind = toks
        .iter()
        .find(|t| VEHICLE_TYPES.contains(&t.as_str()))
        .map(|t| t.to_string())
        .unwrap_or_else(|| category_noun(category).to_string());
    Some(format!("{colors} {kind}"))
}

fn clothing_description(toks: &[String], category: &str) -> Option<String> {
    let mut items = Vec::new();
    for (i, t) in toks.iter().enumerate() {
        if !CLOTHING.contains(&t.as_str()) {
            continue;
        }
        // "tank" only counts as "tank top"
        if t == "tank" {
            continue;
        }
        let garment = if t == "top" && i > 0 && toks[i - 1] == "tank" { "tank top".to_string() } else { t.clone() };
        let mut j = i;
        if garment == "tank top" {
            j -= 1;
        }
        let mut colors = Vec::new();
        while j > 0 {
            let prev = &toks[j - 1];
            if let Some(c) = canonical_color(prev) {
                colors.push(c.to_string());
            } else if prev != "and" || colors.is_empty() {
                break;
            }
            j -= 1;
        }
        colors.reverse();
        colors.dedup();
        let phrase = if colors.is_empty() { garment.clone() } else { format!("{} {garment}", join_words(&colors)) };
        let plural = PLURAL_CLOTHING.contains(&t.as_str());
        items.push(if plural { phrase } else { format!("{} {phrase}", article(&phrase)) });
    }
    if items.is_empty() {
        return None;
    }
    let who = category_noun(category);
    let who = if who == "child" { "child" } else { "adult" };
    Some(format!("{who} wearing {}", items.join(" and ")))
}

/// Standardized reference text, or `None` when the caption is non-specific.
pub fn standardize_caption(caption: &str, category: &str) -> Option<String> {
    let toks = tokens(caption);
    match category_kind(category) {
        CategoryKind::Pedestrian => clothing_description(&toks, category),
        CategoryKind::Vehicle => vehicle_description(&toks, category),
        CategoryKind::Other => {
            let colors = color_phrase(&toks)?;
            Some(format!("{colors} {}", category_noun(category)))
        }
    }
}
