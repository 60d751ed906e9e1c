//! Template rendering and k-shot prompt assembly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Label, TaskKind, TaskSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub text: String,
    pub label_surface: String,
}

/// A rendered prompt: demonstrations, then the unlabeled test input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub test_id: String,
    pub demonstrations: Vec<Demonstration>,
    pub test_rendering: String,
    pub full_text: String,
}

impl PromptInstance {
    pub fn k(&self) -> usize {
        self.demonstrations.len()
    }
}

/// Surface text of `label` for `example` under `task`.
pub fn label_surface<'a>(
    example: &'a Example,
    task: &'a TaskSpec,
    label: &Label,
) -> Result<&'a str> {
    match (task.kind, label) {
        (TaskKind::Classification, Label::Class(id)) => task
            .verbalize(id)
            .ok_or_else(|| Error::InvalidTask(format!("label {id:?} has no verbalizer entry"))),
        (TaskKind::Multichoice, Label::Option(i)) => example
            .options
            .as_ref()
            .and_then(|o| o.get(*i))
            .map(String::as_str)
            .ok_or_else(|| {
                Error::OutOfRange(format!(
                    "option {i} out of range for example {:?}",
                    example.id
                ))
            }),
        (_, other) => Err(Error::InvalidTask(format!(
            "label {other} does not fit a {:?} task",
            task.kind
        ))),
    }
}

fn render_inputs(example: &Example, task: &TaskSpec) -> Result<String> {
    let mut out = String::new();
    for f in &task.template.fields {
        let text = example
            .fields
            .get(&f.field)
            .ok_or_else(|| Error::MissingField {
                example: example.id.clone(),
                field: f.field.clone(),
            })?;
        out.push_str(&f.prefix);
        out.push_str(text);
    }
    out.push_str(&task.template.label_prefix);
    Ok(out)
}

/// Renders an example through the task template.
///
/// The label cue prefix is always emitted; with `include_label` the verbalized
/// label follows it after one space.
pub fn render_example(example: &Example, task: &TaskSpec, include_label: bool) -> Result<String> {
    let mut out = render_inputs(example, task)?;
    if include_label {
        let label = example
            .label
            .as_ref()
            .ok_or_else(|| Error::MissingLabel(format!("example {:?} is unlabeled", example.id)))?;
        out.push(' ');
        out.push_str(label_surface(example, task, label)?);
    }
    Ok(out)
}

fn render_with(example: &Example, task: &TaskSpec, label: &Label) -> Result<(String, String)> {
    let surface = label_surface(example, task, label)?.to_string();
    let mut text = render_inputs(example, task)?;
    text.push(' ');
    text.push_str(&surface);
    Ok((text, surface))
}

/// Concatenates labeled demonstrations and the unlabeled test rendering.
///
/// Labels in `label_override` take precedence over the demonstrations' own.
pub fn build_prompt(
    demos: &[&Example],
    test: &Example,
    task: &TaskSpec,
    label_override: Option<&HashMap<String, Label>>,
) -> Result<PromptInstance> {
    let mut demonstrations = Vec::with_capacity(demos.len());
    for ex in demos {
        let label = label_override
            .and_then(|m| m.get(&ex.id))
            .or(ex.label.as_ref())
            .ok_or_else(|| {
                Error::MissingLabel(format!("demonstration {:?} has no label", ex.id))
            })?;
        if let Label::Class(id) = label {
            if task.kind == TaskKind::Classification && !task.label_set.contains(id) {
                return Err(Error::OutOfRange(format!(
                    "override label {id:?} outside the label set"
                )));
            }
        }
        let (text, label_surface) = render_with(ex, task, label)?;
        demonstrations.push(Demonstration {
            id: ex.id.clone(),
            text,
            label_surface,
        });
    }
    let test_rendering = render_example(test, task, false)?;
    let mut full_text = String::new();
    for d in &demonstrations {
        full_text.push_str(&d.text);
        full_text.push_str(&task.separator);
    }
    full_text.push_str(&test_rendering);
    Ok(PromptInstance {
        test_id: test.id.clone(),
        demonstrations,
        test_rendering,
        full_text,
    })
}

/// Ids of examples whose rendering contains the task separator.
///
/// Such examples make the prompt text ambiguous to split; callers log them.
pub fn separator_conflicts<'a>(examples: &'a [Example], task: &TaskSpec) -> Vec<&'a str> {
    examples
        .iter()
        .filter(|ex| {
            render_example(ex, task, ex.label.is_some())
                .map(|r| r.contains(&task.separator))
                .unwrap_or(false)
        })
        .map(|ex| ex.id.as_str())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Template, TemplateField};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn sentiment() -> TaskSpec {
        TaskSpec {
            name: "sent".into(),
            kind: TaskKind::Classification,
            label_set: vec!["pos".into(), "neg".into()],
            verbalizer: BTreeMap::from([
                ("pos".to_string(), "positive".to_string()),
                ("neg".to_string(), "negative".to_string()),
            ]),
            template: Template {
                fields: vec![TemplateField {
                    field: "text".into(),
                    prefix: "Review: ".into(),
                }],
                label_prefix: " Sentiment:".into(),
            },
            separator: "\n\n".into(),
        }
    }

    fn ex(id: &str, text: &str, label: Option<&str>) -> Example {
        let e = Example::new(id).with_field("text", text);
        match label {
            Some(l) => e.with_label(Label::class(l)),
            None => e,
        }
    }

    #[test]
    fn render_with_and_without_label() {
        let task = sentiment();
        let e = ex("1", "great", Some("pos"));
        assert_eq!(
            render_example(&e, &task, true).unwrap(),
            "Review: great Sentiment: positive"
        );
        assert_eq!(
            render_example(&e, &task, false).unwrap(),
            "Review: great Sentiment:"
        );
        let missing = Example::new("2").with_field("body", "x");
        let err = render_example(&missing, &task, false).unwrap_err();
        assert!(err.to_string().contains("\"text\""));
        assert!(render_example(&ex("3", "x", None), &task, true).is_err());
    }

    #[test]
    fn multichoice_renders_gold_option() {
        let mut task = sentiment();
        task.kind = TaskKind::Multichoice;
        task.label_set.clear();
        task.verbalizer.clear();
        let e = Example::new("q")
            .with_field("text", "2+2?")
            .with_options(["three", "four"])
            .with_label(Label::Option(1));
        assert_eq!(
            render_example(&e, &task, true).unwrap(),
            "Review: 2+2? Sentiment: four"
        );
    }

    #[test]
    fn zero_shot_prompt() {
        let task = sentiment();
        let t = ex("t", "meh", None);
        let p = build_prompt(&[], &t, &task, None).unwrap();
        assert_eq!(p.k(), 0);
        assert_eq!(p.full_text, p.test_rendering);
    }

    #[test]
    fn two_demo_concatenation() {
        let task = sentiment();
        let d1 = ex("1", "good", Some("pos"));
        let d2 = ex("2", "bad", Some("neg"));
        let t = ex("t", "fine", Some("pos"));
        let p = build_prompt(&[&d1, &d2], &t, &task, None).unwrap();
        assert_eq!(
            p.full_text,
            "Review: good Sentiment: positive\n\nReview: bad Sentiment: negative\n\nReview: fine Sentiment:"
        );
        let parts: Vec<&str> = p.full_text.split(&task.separator).collect();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[2], p.test_rendering);
    }

    #[test]
    fn overrides_win() {
        let task = sentiment();
        let d1 = ex("1", "good", Some("pos"));
        let d2 = ex("2", "bad", None);
        let t = ex("t", "fine", None);
        let all_neg: HashMap<String, Label> = [
            ("1".to_string(), Label::class("neg")),
            ("2".to_string(), Label::class("neg")),
        ]
        .into();
        let p = build_prompt(&[&d1, &d2], &t, &task, Some(&all_neg)).unwrap();
        assert!(p
            .demonstrations
            .iter()
            .all(|d| d.text.ends_with("negative")));
        assert!(build_prompt(&[&d2], &t, &task, None).is_err());
        let bogus: HashMap<String, Label> = [("1".to_string(), Label::class("meh"))].into();
        assert!(build_prompt(&[&d1], &t, &task, Some(&bogus)).is_err());
    }

    #[test]
    fn identity_override_is_byte_identical() {
        let task = sentiment();
        let d1 = ex("1", "good", Some("pos"));
        let d2 = ex("2", "bad", Some("neg"));
        let t = ex("t", "fine", None);
        let ident: HashMap<String, Label> = [&d1, &d2]
            .iter()
            .map(|e| (e.id.clone(), e.label.clone().unwrap()))
            .collect();
        assert_eq!(
            build_prompt(&[&d1, &d2], &t, &task, Some(&ident)).unwrap(),
            build_prompt(&[&d1, &d2], &t, &task, None).unwrap()
        );
    }

    #[test]
    fn detects_separator_in_fields() {
        let task = sentiment();
        let exs = vec![ex("ok", "fine", None), ex("bad", "two\n\nparas", None)];
        assert_eq!(separator_conflicts(&exs, &task), ["bad"]);
    }

    proptest! {
        #[test]
        fn split_recovers_segments(texts in prop::collection::vec("[a-z ]{1,12}", 1..6), labels in prop::collection::vec(any::<bool>(), 6)) {
            let task = sentiment();
            let demos: Vec<Example> = texts.iter().enumerate()
                .map(|(i, t)| ex(&i.to_string(), t, Some(if labels[i] { "pos" } else { "neg" })))
                .collect();
            let refs: Vec<&Example> = demos.iter().collect();
            let (last, init) = refs.split_last().unwrap();
            let p = build_prompt(init, last, &task, None).unwrap();
            let parts: Vec<&str> = p.full_text.split("\n\n").collect();
            prop_assert_eq!(parts.len(), init.len() + 1);
            for (part, d) in parts.iter().zip(&p.demonstrations) {
                prop_assert_eq!(*part, d.text.as_str());
            }
            prop_assert_eq!(*parts.last().unwrap(), p.test_rendering.as_str());
        }

        #[test]
        fn rendering_is_injective(a in "[a-z]{1,10}", b in "[a-z]{1,10}") {
            let task = sentiment();
            prop_assume!(a != b);
            let ra = render_example(&ex("x", &a, None), &task, false).unwrap();
            let rb = render_example(&ex("y", &b, None), &task, false).unwrap();
            prop_assert_ne!(ra, rb);
        }
    }
}
