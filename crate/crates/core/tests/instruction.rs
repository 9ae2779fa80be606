use proptest::prelude::*;
use region_restore::instruction::{parse_inference_instruction, render_inference_instruction, Instruction, Task};
use region_restore::Error;

const WORDS: &[&str] = &[
    "red", "disk", "sign", "and", "with", "make", "parts", "other", "bokeh", "blur", "clear", "keep", "the",
    "striped", "x", "flower", "Öl", "café", "big-dog", "3", "{a}", "a,b",
];

fn caption() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..6).prop_map(|w| w.join(" "))
}

fn scale() -> impl Strategy<Value = f64> {
    (0u32..=400).prop_map(|k| k as f64 / 100.0)
}

fn instruction() -> impl Strategy<Value = Instruction> {
    (prop::bool::ANY, caption(), scale(), scale())
        .prop_filter_map("caption must be valid", |(bokeh, c, s1, s2)| {
            let task = if bokeh { Task::BokehRestore } else { Task::LocalRestore };
            Instruction::new(task, c, s1, s2).ok()
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn render_parse_round_trip(instr in instruction()) {
        let text = render_inference_instruction(&instr);
        let back = parse_inference_instruction(&text).unwrap();
        prop_assert_eq!(&back, &instr);
        prop_assert_eq!(render_inference_instruction(&back), text);
    }
}

pub const MALFORMED: [&str; 20] = [
    "",
    "hello",
    "make it nice",
    "make sign clear",
    "make sign clear with 0.9",
    "make sign clear with 0.9, and make other parts",
    "make sign clear with, and make other parts with 1.0",
    "make  clear with 0.9, and make other parts with 1.0",
    "make sign clear with -0.5, and make other parts with 1.0",
    "make sign clear with 0.9, and make other parts with -1",
    "make sign clear with 0.123, and make other parts with 1.0",
    "make sign clear with abc, and make other parts with 1.0",
    "make sign clear with 0.9, and make other parts with 1e3",
    "make sign clear with 0.9, and make other parts with inf",
    "make sign clear with 0.9, and make other parts with NaN",
    "make sign clear with 0.9 and keep other parts bokeh with 1.0",
    "sign clear with 0.9, and make other parts with 1.0",
    "make sign clear with 0.9, and make other parts with 1.0 please",
    "make sign blurry with 0.9, and make other parts with 1.0",
    "make sign clear with .5, and make other parts with 1.0",
];

#[test]
fn malformed_corpus_rejected() {
    for text in MALFORMED {
        match parse_inference_instruction(text) {
            Err(Error::MalformedInstruction(_)) | Err(Error::InvalidInstruction(_)) => {}
            other => panic!("{text:?} was accepted: {other:?}"),
        }
    }
}

#[test]
fn diagnostics_name_the_problem() {
    let msg = parse_inference_instruction("make it nice").unwrap_err().to_string();
    assert!(msg.contains("clear with"), "{msg}");
}
