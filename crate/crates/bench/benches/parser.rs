use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use divex_core::corpus::TaskType;
use divex_core::parser::{parse_completion, render_opinions, Opinion, Stance};

const REFERENCE_OUTPUT: &str = include_str!("../../core/testdata/reference/one_shot_output.txt");

fn parse(c: &mut Criterion) {
    c.bench_function("parse ten-opinion completion", |b| {
        b.iter(|| parse_completion(black_box(REFERENCE_OUTPUT), TaskType::Stance).unwrap())
    });

    let ops: Vec<Opinion> = (1..=20)
        .map(|i| {
            Opinion::new(
                i,
                Stance::Agree,
                &["trust", "safety"],
                &format!("Reason {i}, with \"quotes\" and commas."),
            )
        })
        .collect();
    let clean = render_opinions(&ops, true);
    let truncated = &clean[..clean.len() * 2 / 3];
    let curly = clean.replace('"', "\u{201c}");
    c.bench_function("parse 20 opinions", |b| {
        b.iter(|| parse_completion(black_box(&clean), TaskType::Stance).unwrap())
    });
    c.bench_function("parse truncated output", |b| {
        b.iter(|| parse_completion(black_box(truncated), TaskType::Stance).unwrap())
    });
    c.bench_function("parse curly-quoted output", |b| {
        b.iter(|| parse_completion(black_box(&curly), TaskType::Stance))
    });
}

criterion_group!(benches, parse);
criterion_main!(benches);
