//! Small text utilities shared by context verification, question validation,
//! CoT pruning and TeX ingestion.

/// Tokens that end with a period but do not end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "sr", "jr", "st", "vs", "etc", "e.g", "i.e", "fig", "figs",
    "eq", "eqs", "sec", "vol", "al", "approx", "inc", "ltd", "co", "cf", "resp", "tab",
];

/// Splits text into sentences on terminal punctuation (`.`, `!`, `?`).
///
/// A period does not end a sentence when it follows a known abbreviation, a
/// single capital letter (initials), or sits between two digits (`3.5`).
/// Closing quotes and brackets directly after the terminator stay with the
/// sentence. Returned sentences are trimmed and never empty.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?') {
            // swallow runs like "?!" or "..."
            let mut end = i + 1;
            while end < chars.len() && matches!(chars[end], '.' | '!' | '?') {
                end += 1;
            }
            while end < chars.len() && matches!(chars[end], '"' | '\'' | ')' | ']' | '”' | '’') {
                end += 1;
            }
            let at_boundary = end >= chars.len() || chars[end].is_whitespace();
            if at_boundary && !(c == '.' && end == i + 1 && is_non_terminal_period(&chars, start, i))
            {
                push_trimmed(&mut sentences, &chars[start..end]);
                start = end;
            }
            i = end;
            continue;
        }
        i += 1;
    }
    if start < chars.len() {
        push_trimmed(&mut sentences, &chars[start..]);
    }
    sentences
}

fn push_trimmed(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

fn is_non_terminal_period(chars: &[char], sentence_start: usize, dot: usize) -> bool {
    // the word immediately before the period
    let mut b = dot;
    while b > sentence_start && !chars[b - 1].is_whitespace() {
        b -= 1;
    }
    let word: String = chars[b..dot].iter().collect();
    let word = word.trim_start_matches(['(', '"', '\'', '[']);
    if word.is_empty() {
        return false;
    }
    let lower = word.to_lowercase();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return true;
    }
    let mut wc = word.chars();
    if let (Some(first), None) = (wc.next(), wc.next()) {
        if first.is_uppercase() {
            return true;
        }
    }
    false
}

/// Lowercases and replaces every non-alphanumeric character with a space,
/// then splits on whitespace.
pub fn word_tokens(text: &str) -> Vec<String> {
    let folded: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    folded.split_whitespace().map(str::to_string).collect()
}

/// Case-insensitive whole-word phrase containment.
///
/// `"the telephone pole shown"` contains `"Telephone Pole"` but `"cordial"`
/// does not contain `"cord"`. An empty needle never matches.
pub fn contains_phrase(haystack: &str, needle: &str) -> bool {
    let needle = word_tokens(needle);
    if needle.is_empty() {
        return false;
    }
    let hay = word_tokens(haystack);
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Whitespace token count.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Splits `"type (name)"` into its two parts. Returns `None` when the string
/// does not have exactly that shape.
pub fn split_typed_name(s: &str) -> Option<(&str, &str)> {
    let s = s.trim();
    let open = s.find('(')?;
    if !s.ends_with(')') || s[open + 1..].contains('(') {
        return None;
    }
    let ty = s[..open].trim();
    let name = s[open + 1..s.len() - 1].trim();
    if ty.is_empty() || name.is_empty() || ty.contains(')') || name.contains(')') {
        return None;
    }
    Some((ty, name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abbreviation_guard() {
        assert_eq!(
            split_sentences("Dr. Smith walks. She stops."),
            vec!["Dr. Smith walks.", "She stops."]
        );
    }

    #[test]
    fn decimals_initials_and_quotes() {
        let s = split_sentences("Accuracy was 3.5 points higher. J. Doe agreed. (It held.) Done!");
        assert_eq!(
            s,
            vec!["Accuracy was 3.5 points higher.", "J. Doe agreed.", "(It held.)", "Done!"]
        );
    }

    #[test]
    fn unterminated_tail_is_a_sentence() {
        assert_eq!(split_sentences("One. Two"), vec!["One.", "Two"]);
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn phrase_matching_respects_word_boundaries() {
        assert!(contains_phrase("The Telephone pole, shown in image 1.", "telephone pole"));
        assert!(!contains_phrase("a cordial greeting", "cord"));
        assert!(contains_phrase("Veridian Grid Solutions' crew", "Veridian Grid Solutions"));
        assert!(!contains_phrase("anything", ""));
    }

    #[test]
    fn typed_names() {
        assert_eq!(split_typed_name("artisan (Liora Vex)"), Some(("artisan", "Liora Vex")));
        assert_eq!(
            split_typed_name(" utility company (Veridian Grid Solutions) "),
            Some(("utility company", "Veridian Grid Solutions"))
        );
        assert_eq!(split_typed_name("Liora Vex"), None);
        assert_eq!(split_typed_name("(Liora Vex)"), None);
        assert_eq!(split_typed_name("a (b) c"), None);
        assert_eq!(split_typed_name("a (b (c))"), None);
    }
}
