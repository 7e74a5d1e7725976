//! Three small operations for the static demo page in `www/`.
//!
//! Each returns flat `f64`/`u32` buffers that the page draws onto canvases.

use pvfuse::head::{arcface_loss, ArcFaceHead};
use pvfuse::manifest::ViewInput;
use pvfuse::numkit::{ParamStore, Tape, Tensor};
use pvfuse::pointbranch::farthest_point_sample;
use pvfuse::trainer::{synthesize, Primitive, SyntheticSpec};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn one_object(shape: &str, points: usize, views: usize, resolution: usize, seed: u64) -> Result<pvfuse::manifest::LoadedObject, JsError> {
    let class: Primitive = shape.parse().map_err(js)?;
    let spec = SyntheticSpec {
        classes: vec![class],
        instances_per_class: 1,
        points_n: points,
        views_m: views,
        resolution,
        surface_samples: points.max(2048),
        seed,
        ..SyntheticSpec::default()
    };
    let mut objs = synthesize(&spec).map_err(js)?;
    Ok(objs.remove(0))
}

/// Depth images of a synthetic shape: `views × resolution × resolution`
/// values in [0, 1], view-major.
#[wasm_bindgen]
pub fn render_shape(shape: &str, views: usize, resolution: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let obj = one_object(shape, 256, views, resolution, seed)?;
    match obj.views {
        ViewInput::Images(stack) => Ok(stack.images().data().to_vec()),
        ViewInput::Features(_) => Err(JsError::new("expected rendered views")),
    }
}

/// A synthetic cloud of `points` points as flat `x y z` triples.
#[wasm_bindgen]
pub fn shape_cloud(shape: &str, points: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let obj = one_object(shape, points, 4, 8, seed)?;
    Ok(obj.cloud.points().iter().flatten().copied().collect())
}

/// Farthest-point sampling order over flat `x y z` triples.
#[wasm_bindgen]
pub fn fps_order(xyz: &[f64], k: usize) -> Result<Vec<u32>, JsError> {
    if !xyz.len().is_multiple_of(3) {
        return Err(JsError::new("coordinate buffer length must be a multiple of 3"));
    }
    let pts: Vec<[f64; 3]> = xyz.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let idx = farthest_point_sample(&pts, k).map_err(js)?;
    Ok(idx.into_iter().map(|i| i as u32).collect())
}

/// Angular-margin loss of one unit descriptor against two unit class
/// columns, with the true class at cosine `cos_true` and the other at
/// `cos_other`, for each margin in `margins`.
#[wasm_bindgen]
pub fn margin_curve(cos_true: f64, cos_other: f64, scale: f64, margins: &[f64]) -> Result<Vec<f64>, JsError> {
    if !(-1.0..=1.0).contains(&cos_true) || !(-1.0..=1.0).contains(&cos_other) {
        return Err(JsError::new("cosines must lie in [-1, 1]"));
    }
    let side = |c: f64| (1.0 - c * c).sqrt();
    margins
        .iter()
        .map(|&m| {
            let mut store = ParamStore::new();
            let head = ArcFaceHead::new(&mut store, "demo", 2, 2, m, scale, 0).map_err(js)?;
            store.get_mut(head.weight).value =
                Tensor::new(vec![2, 2], vec![cos_true, cos_other, side(cos_true), side(cos_other)]).map_err(js)?;
            let mut tape = Tape::new(&store);
            let f = tape.constant(Tensor::row(&[1.0, 0.0]));
            let loss = arcface_loss(&mut tape, f, &[0], &head).map_err(js)?;
            tape.value(loss).item().map_err(js)
        })
        .collect()
}
