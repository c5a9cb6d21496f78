use alloc::string::String;
use alloc::vec::Vec;

use super::FactTriple;

/// Splits an entity phrase into lowercase words on whitespace and underscores.
pub fn entity_words(s: &str) -> Vec<String> {
    s.split(|c: char| c.is_whitespace() || c == '_')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Splits a relation name such as `UsedFor` or `HTTPServer` into lowercase words.
pub fn camel_words(s: &str) -> Vec<String> {
    let mut words = Vec::new();
    for part in s.split(|c: char| !c.is_alphanumeric()).filter(|p| !p.is_empty()) {
        let chars: Vec<char> = part.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let (prev, cur) = (chars[i - 1], chars[i]);
            let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
            let boundary = (cur.is_uppercase() && (prev.is_lowercase() || prev.is_numeric()))
                || (cur.is_uppercase() && prev.is_uppercase() && next_lower);
            if boundary {
                words.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        words.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
    words
}

/// Head words, relation words and tail words, in order.
pub fn linearize(fact: &FactTriple) -> Vec<String> {
    let mut out = entity_words(&fact.head);
    out.extend(camel_words(&fact.relation));
    out.extend(entity_words(&fact.tail));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linearizes_camel_case_relations() {
        let f = FactTriple::new("snow", "UsedFor", "skiing", 1.0).unwrap();
        assert_eq!(linearize(&f), vec!["snow", "used", "for", "skiing"]);
        let f = FactTriple::new("a", "X", "b", 1.0).unwrap();
        assert_eq!(linearize(&f), vec!["a", "x", "b"]);
        let f = FactTriple::new("fire hydrant", "AtLocation", "street_corner", 1.0).unwrap();
        let words = linearize(&f);
        assert_eq!(words, vec!["fire", "hydrant", "at", "location", "street", "corner"]);
        assert_eq!(
            words.len(),
            entity_words(&f.head).len() + camel_words(&f.relation).len() + entity_words(&f.tail).len()
        );
    }

    #[test]
    fn camel_handles_acronyms_and_digits() {
        assert_eq!(camel_words("HTTPServer"), vec!["http", "server"]);
        assert_eq!(camel_words("HasA"), vec!["has", "a"]);
        assert_eq!(camel_words("on"), vec!["on"]);
        assert_eq!(camel_words("NextTo"), vec!["next", "to"]);
    }
}
