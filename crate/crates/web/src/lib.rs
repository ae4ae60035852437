//! WebAssembly bindings for the static demo page in `www/`.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: usaad::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct BlurView(demo::BlurOutcome);

#[wasm_bindgen]
impl BlurView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.0.size
    }

    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.0.psnr
    }

    #[wasm_bindgen(getter)]
    pub fn support(&self) -> usize {
        self.0.support
    }

    pub fn sharp(&self) -> Vec<u8> {
        self.0.sharp.clone()
    }

    pub fn blurred(&self) -> Vec<u8> {
        self.0.blurred.clone()
    }

    pub fn kernel(&self) -> Vec<u8> {
        self.0.kernel.clone()
    }
}

/// Side of the square kernel preview returned by [`BlurView::kernel`].
#[wasm_bindgen]
pub fn kernel_view() -> usize {
    demo::KERNEL_VIEW
}

/// Blur a synthetic scene with a sampled camera-shake kernel.
#[wasm_bindgen]
pub fn blur_scene(scene_seed: u32, size: usize, kernel_seed: u32, kernel_size: usize, intensity: f64) -> Result<BlurView, JsError> {
    demo::blur_scene(scene_seed.into(), size, kernel_seed.into(), kernel_size, intensity).map(BlurView).map_err(js)
}

/// Attention weights for two equal-length descriptor vectors.
#[wasm_bindgen]
pub fn attention(v_hi: &[f64], v_lo: &[f64]) -> Result<Vec<f64>, JsError> {
    demo::attention(v_hi, v_lo).map_err(js)
}

#[wasm_bindgen]
pub struct Scores(demo::Quality);

#[wasm_bindgen]
impl Scores {
    #[wasm_bindgen(getter)]
    pub fn nr_score(&self) -> f64 {
        self.0.nr_score
    }

    /// `undefined` when the image is too small for PIQE.
    #[wasm_bindgen(getter)]
    pub fn piqe(&self) -> Option<f64> {
        self.0.piqe
    }
}

/// No-reference quality of canvas pixels (RGBA); lower is better.
#[wasm_bindgen]
pub fn quality(rgba: &[u8], width: usize, height: usize) -> Result<Scores, JsError> {
    demo::quality(rgba, width, height).map(Scores).map_err(js)
}
