//! wasm-bindgen bindings for the browser demo in `www/`.

pub mod demo;

use wasm_bindgen::prelude::*;

/// RGBA pixels of a partition's `dst` mask.
#[wasm_bindgen(js_name = partitionRgba)]
pub fn partition_rgba(scheme: &str, height: usize, width: usize, seed: u64, step: usize) -> Result<Vec<u8>, JsError> {
    demo::partition_rgba(scheme, height, width, seed, step).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct MergeView(demo::MergeView);

#[wasm_bindgen]
impl MergeView {
    #[wasm_bindgen(getter)]
    pub fn source(&self) -> Vec<u8> {
        self.0.source.clone()
    }

    #[wasm_bindgen(getter, js_name = mergeMap)]
    pub fn merge_map(&self) -> Vec<u8> {
        self.0.merge_map.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn reconstruction(&self) -> Vec<u8> {
        self.0.reconstruction.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn removed(&self) -> usize {
        self.0.removed
    }

    #[wasm_bindgen(getter, js_name = relativeError)]
    pub fn relative_error(&self) -> f64 {
        self.0.relative_error
    }
}

/// Merges or prunes a procedural scene and restores it.
#[wasm_bindgen(js_name = mergeView)]
pub fn merge_view(
    scheme: &str,
    ratio: f64,
    height: usize,
    width: usize,
    seed: u64,
    prune: bool,
) -> Result<MergeView, JsError> {
    demo::merge_view(scheme, ratio, height, width, seed, prune)
        .map(MergeView)
        .map_err(|e| JsError::new(&e))
}

/// Analytic speedup over a ratio grid.
#[wasm_bindgen(js_name = speedupCurve)]
pub fn speedup_curve(
    latent: usize,
    channels: usize,
    components: &str,
    scheme: &str,
    step: f64,
) -> Result<Vec<f64>, JsError> {
    demo::speedup_curve(latent, channels, components, scheme, step).map_err(|e| JsError::new(&e))
}
