//! Prompt templates bundled with the crate and a small slot renderer.

pub const YAW: &str = include_str!("../resources/vqa/yaw.txt");
pub const PIXEL: &str = include_str!("../resources/vqa/pixel.txt");
pub const DEPTH: &str = include_str!("../resources/vqa/depth.txt");
pub const DISTANCE: &str = include_str!("../resources/vqa/distance.txt");
pub const LEFT_RIGHT: &str = include_str!("../resources/vqa/left_right.txt");
pub const FRONT_BEHIND: &str = include_str!("../resources/vqa/front_behind.txt");
pub const FORMAT_WITH_LOCATION: &str = include_str!("../resources/vqa/format_with_location.txt");
pub const FORMAT_WITHOUT_LOCATION: &str = include_str!("../resources/vqa/format_without_location.txt");

pub const COT_REFLECT: &str = include_str!("../resources/cot/reflect.txt");
pub const COT_SUMMARIZE: &str = include_str!("../resources/cot/summarize.txt");
pub const COT_GENERATE: &str = include_str!("../resources/cot/generate.txt");
pub const COT_VALIDATE: &str = include_str!("../resources/cot/validate.txt");

pub const VERIFIER: &str = include_str!("../resources/verifier.txt");

/// Replaces `{name}` slots in one pass. Unknown slots and braces inside the
/// substituted values are left untouched.
pub fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match slots.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => {
                        out.push_str(v);
                        rest = &after[close + 1..];
                    }
                    None => {
                        out.push('{');
                        rest = after;
                    }
                }
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// `- option` lines.
pub fn option_lines(options: &[String]) -> String {
    options.iter().map(|o| format!("- {o}")).collect::<Vec<_>>().join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_single_pass() {
        assert_eq!(render("a {x} b {y}", &[("x", "{y}"), ("y", "2")]), "a {y} b 2");
        assert_eq!(render("{unknown} {", &[]), "{unknown} {");
    }

    #[test]
    fn templates_have_their_slots() {
        assert!(YAW.contains("{facing}") && YAW.contains("{object}") && YAW.contains("{options}"));
        assert!(DISTANCE.contains("{relation}"));
        assert!(LEFT_RIGHT.contains("{side}"));
        assert!(COT_GENERATE.contains("{rules}") && COT_GENERATE.contains("{answer}"));
        assert!(COT_VALIDATE.starts_with("{response}"));
        assert!(VERIFIER.contains("{trace}"));
    }
}
