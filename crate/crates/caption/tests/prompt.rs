use std::path::PathBuf;

use pestvl_caption::{build_prompt, prompt_hash, CaptionError, CotTemplate, KnowledgeBase};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn prompt_matches_golden_file() {
    let kb = KnowledgeBase::load(&fixture("knowledge.toml")).unwrap();
    let t = CotTemplate::load(&fixture("cot_template.toml")).unwrap();
    let prompt = build_prompt(kb.get("brown planthopper").unwrap(), &t, "img_0042").unwrap();
    let golden = std::fs::read_to_string(fixture("expected_prompt.txt")).unwrap();
    assert_eq!(prompt, golden);
    assert_eq!(prompt_hash(&prompt), prompt_hash(&golden));
}

#[test]
fn prompt_is_a_pure_function_of_its_inputs() {
    let kb = KnowledgeBase::load(&fixture("knowledge.toml")).unwrap();
    let t = CotTemplate::load(&fixture("cot_template.toml")).unwrap();
    let e = kb.get("rice leaf roller").unwrap();
    let a = build_prompt(e, &t, "x").unwrap();
    assert_eq!(a, build_prompt(e, &t, "x").unwrap());
    assert_ne!(prompt_hash(&a), prompt_hash(&build_prompt(e, &t, "y").unwrap()));
}

#[test]
fn unknown_placeholder_is_named() {
    let kb = KnowledgeBase::load(&fixture("knowledge.toml")).unwrap();
    let t = CotTemplate::from_toml_str("version = \"v\"\nsteps = [\"{species} on {host_plant}\"]").unwrap();
    let err = build_prompt(kb.get("rice leaf roller").unwrap(), &t, "").unwrap_err();
    assert!(matches!(&err, CaptionError::UnboundPlaceholder(n) if n == "host_plant"), "{err}");
}
