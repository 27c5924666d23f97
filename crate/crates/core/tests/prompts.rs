mod common;

use mpfgvc_core::config::TemplateMode;
use mpfgvc_core::model::{Labels, Model, PROMPT};
use mpfgvc_core::text::PromptBank;
use mpfgvc_tensor::Graph;

fn model(template: TemplateMode) -> Model<f64> {
    let mut cfg = common::small_config(0);
    cfg.text.template = template;
    let labels = Labels {
        supercategory: "bird".into(),
        class_names: (0..4).map(|i| format!("species_{i}")).collect(),
    };
    Model::new(&cfg, labels).unwrap()
}

fn row(g: &Graph<f64>, v: mpfgvc_tensor::Var, pos: usize, d: usize) -> Vec<f64> {
    g.value(v).data()[pos * d..(pos + 1) * d].to_vec()
}

#[test]
fn every_prompt_ends_with_the_supercategory_word() {
    let m = model(TemplateMode::LearnedOnly);
    let d = m.cfg.vit.dim;
    let j = m.cfg.text.prompt_tokens;
    let mut g = Graph::inference();
    let word = g.param(&m.store, m.text.word("bird").unwrap());
    let word = g.value(word).data().to_vec();
    let x = m.store.get(m.bank.x.unwrap()).tensor.data().to_vec();
    for c in 0..4 {
        let p = m.bank.build_prompt(&mut g, &m.store, &m.text, c).unwrap();
        assert_eq!(g.shape(p), &[j + 1, d]);
        assert_eq!(row(&g, p, j, d), word);
        for t in 0..j {
            assert_eq!(row(&g, p, t, d), x[(c * j + t) * d..(c * j + t + 1) * d]);
        }
    }
}

#[test]
fn template_lengths_and_vocabulary() {
    let names: Vec<String> = vec!["x".into(), "y".into()];
    for (template, extra_words) in [
        (TemplateMode::LearnedOnly, 0),
        (TemplateMode::PrefixPhoto, 0),
        (TemplateMode::SubcategoryName, 2),
        (TemplateMode::Handcrafted, 2),
    ] {
        let vocab = PromptBank::vocabulary(template, "dog", &names);
        assert_eq!(vocab.len(), 4 + extra_words);
        let m = model(template);
        let j = m.cfg.text.prompt_tokens;
        let want = match template {
            TemplateMode::LearnedOnly => j + 1,
            TemplateMode::Handcrafted => 5,
            _ => j + 4,
        };
        assert_eq!(m.bank.prompt_len(), want);
        let mut g = Graph::inference();
        let p = m.bank.build(&mut g, &m.store, &m.text, &[0, 3]).unwrap();
        assert_eq!(g.shape(p), &[2, want, m.cfg.vit.dim]);
        assert_eq!(m.bank.x.is_some(), template.has_learned_tokens());
    }
}

#[test]
fn class_embeddings_are_distinct_per_class() {
    let m = model(TemplateMode::LearnedOnly);
    let mut g = Graph::inference();
    let et = m.encode_text(&mut g).unwrap();
    let t = g.value(et);
    assert_eq!(t.shape(), &[4, m.cfg.vit.dim]);
    for a in 0..4 {
        for b in a + 1..4 {
            assert_ne!(t.row(a), t.row(b));
        }
    }
}

#[test]
fn prompt_tokens_move_the_class_embedding() {
    let mut m = model(TemplateMode::LearnedOnly);
    let mut g = Graph::inference();
    let v = m.encode_text(&mut g).unwrap();
    let before = g.value(v).clone();
    let id = m.store.id_of("prompt.tokens").unwrap();
    let d = m.cfg.vit.dim;
    m.store.get_mut(id).tensor.data_mut()[..d].iter_mut().for_each(|v| *v += 0.5);
    let mut g = Graph::inference();
    let v = m.encode_text(&mut g).unwrap();
    let after = g.value(v).clone();
    assert_ne!(before.row(0), after.row(0));
    assert_eq!(before.row(1), after.row(1));
    assert!(m.snapshot(PROMPT).len() == 1);
}

#[test]
fn unknown_class_and_word_are_errors() {
    let m = model(TemplateMode::PrefixPhoto);
    let mut g = Graph::inference();
    assert!(m.bank.build(&mut g, &m.store, &m.text, &[4]).is_err());
    assert!(m.text.word("cat").is_err());
}
