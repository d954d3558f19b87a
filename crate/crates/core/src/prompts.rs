//! Prompt templates shipped as text assets.

pub const GRID_SYSTEM: &str = include_str!("../assets/prompts/grid_system.txt");
pub const QA_SYSTEM: &str = include_str!("../assets/prompts/qa_system.txt");
pub const GRID_REFLECTION: &str = include_str!("../assets/prompts/grid_reflection.txt");
pub const QA_REFLECTION: &str = include_str!("../assets/prompts/qa_reflection.txt");
pub const RETRY_NO_REFLECTION: &str = include_str!("../assets/prompts/retry_no_reflection.txt");
const QA_TOOLS: &str = include_str!("../assets/prompts/qa_tools.json");

pub const GRID_TASK_FOOTER: &str = "## Action space\nUp | Down | Left | Right\n\n## Output requirement\nReturn reasoning in <reason>...</reason> and final action in triple backticks, e.g., ```Right```.";

pub fn qa_tools() -> serde_json::Value {
    serde_json::from_str(QA_TOOLS).expect("bundled tool schema is valid JSON")
}

pub fn reflection_prompt(env_name: &str) -> &'static str {
    match env_name {
        "qa" => QA_REFLECTION,
        _ => GRID_REFLECTION,
    }
}

/// Generic second-attempt prompt used when structured reflection is ablated.
pub fn retry_prompt(first_attempt_transcript: &str) -> String {
    RETRY_NO_REFLECTION.trim_end().replace("{trajectory}", first_attempt_transcript.trim_end())
}

/// The rulebook inside `<prompt>...</prompt>` when present, else the whole text.
pub fn extract_prompt_block(text: &str) -> &str {
    match (text.find("<prompt>"), text.rfind("</prompt>")) {
        (Some(open), Some(close)) if close > open => text[open + "<prompt>".len()..close].trim(),
        _ => text.trim(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tool_schema_matches_bounds() {
        let tools = qa_tools();
        let params = &tools[0]["function"]["parameters"];
        assert_eq!(tools[0]["function"]["name"], "local_search");
        assert_eq!(params["properties"]["top_k"]["minimum"], 1);
        assert_eq!(params["properties"]["top_k"]["maximum"], 50);
        assert_eq!(params["required"][0], "query");
    }

    #[test]
    fn retry_prompt_embeds_transcript() {
        let p = retry_prompt("### Step 0\nobs\n");
        assert!(p.starts_with("You are also provided with the model's past attempt data"));
        assert!(p.ends_with("### Step 0\nobs"));
    }

    #[test]
    fn prompt_block_extraction() {
        assert_eq!(extract_prompt_block("junk <prompt> rules </prompt> tail"), "rules");
        assert_eq!(extract_prompt_block("  plain "), "plain");
    }

    #[test]
    fn grid_reflection_prompt_has_rulebook_structure() {
        assert!(GRID_REFLECTION.contains("<prompt>\n<game_rules>\n**1. Symbol Meanings:**"));
    }
}
