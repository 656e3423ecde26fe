#![allow(dead_code)]

use std::time::Duration;

use mixmerge::{Tensor, TensorMap};
use proptest::prelude::*;

/// Prints the one-line verdict for an acceptance criterion, then fails the
/// test if it did not pass (including running over its time budget).
pub fn verdict(number: u32, title: &str, pass: bool, detail: &str, elapsed: Duration, budget: Duration) {
    let in_time = elapsed <= budget;
    let ok = pass && in_time;
    println!(
        "{} criterion {number:>2} {title}: {detail} [{:.2?} of {:.0?}]",
        if ok { "PASS" } else { "FAIL" },
        elapsed,
        budget
    );
    assert!(pass, "criterion {number} failed: {detail}");
    assert!(in_time, "criterion {number} exceeded its budget: {elapsed:?} > {budget:?}");
}

/// Names and shapes of a random map: 1 to 4 tensors, at most 4 dims, at
/// most 64 elements each. Rank-0 tensors hold one element.
pub fn layout() -> impl Strategy<Value = Vec<(String, Vec<usize>)>> {
    let shape = prop::collection::vec(1usize..5, 0..4)
        .prop_filter("at most 64 elements", |s| s.iter().product::<usize>() <= 64);
    prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9]{1,4})?", shape, 1..5)
        .prop_map(|m| m.into_iter().collect())
}

fn count(layout: &[(String, Vec<usize>)]) -> usize {
    layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

pub fn build(id: &str, layout: &[(String, Vec<usize>)], values: &[f32]) -> TensorMap {
    let mut m = TensorMap::new(id);
    let mut at = 0;
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        m.insert(name.clone(), Tensor::new(name, shape.clone(), values[at..at + n].to_vec()).unwrap());
        at += n;
    }
    m
}

/// Moderate-magnitude weights with exact zeros and negative zeros mixed in.
pub fn weight() -> BoxedStrategy<f32> {
    prop_oneof![
        8 => -100.0f32..100.0,
        1 => Just(0.0f32),
        1 => Just(-0.0f32),
    ]
    .boxed()
}

/// Any finite `f32`, including subnormals and the extremes.
pub fn any_finite() -> BoxedStrategy<f32> {
    prop_oneof![
        4 => proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO,
        1 => Just(f32::MAX),
        1 => Just(f32::MIN),
        1 => Just(f32::MIN_POSITIVE),
        1 => Just(-0.0f32),
    ]
    .boxed()
}

/// `k` congruent maps drawn with `values`.
pub fn congruent_maps<S>(k: usize, values: S) -> impl Strategy<Value = Vec<TensorMap>>
where
    S: Strategy<Value = f32> + Clone + 'static,
{
    layout().prop_flat_map(move |layout| {
        let n = count(&layout);
        prop::collection::vec(prop::collection::vec(values.clone(), n), k).prop_map(move |sets| {
            sets.iter()
                .enumerate()
                .map(|(i, v)| build(&format!("m{i}"), &layout, v))
                .collect()
        })
    })
}

pub fn flat(m: &TensorMap) -> Vec<f32> {
    m.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

pub fn bits(m: &TensorMap) -> Vec<u32> {
    flat(m).iter().map(|x| x.to_bits()).collect()
}
