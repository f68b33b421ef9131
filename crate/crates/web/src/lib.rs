//! WebAssembly bindings for the static demo page in `www/`.

use wasm_bindgen::prelude::*;

pub mod render;

use render::{Axis, Scene};

fn js(e: lobeseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn axis(v: u8) -> Result<Axis, JsError> {
    Axis::try_from(v).map_err(js)
}

#[wasm_bindgen]
pub struct Phantom {
    scene: Scene,
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(constructor)]
    pub fn new(
        size: usize,
        seed: u64,
        incompleteness: f64,
        noise_sigma: f64,
    ) -> Result<Phantom, JsError> {
        Ok(Phantom {
            scene: Scene::new(size, seed, incompleteness, noise_sigma).map_err(js)?,
        })
    }

    /// `[nx, ny, nz]`.
    pub fn dims(&self) -> Vec<usize> {
        self.scene.shape().dims().to_vec()
    }

    pub fn image_rgba(&self, axis_id: u8, index: usize, overlay: bool) -> Result<Vec<u8>, JsError> {
        self.scene
            .image_rgba(axis(axis_id)?, index, overlay)
            .map_err(js)
    }

    pub fn fissure_rgba(
        &self,
        axis_id: u8,
        index: usize,
        radius: usize,
        sharpness: f64,
        blur: f64,
    ) -> Result<Vec<u8>, JsError> {
        self.scene
            .fissure_rgba(axis(axis_id)?, index, radius, sharpness, blur)
            .map_err(js)
    }

    pub fn fissure_agreement(
        &self,
        radius: usize,
        sharpness: f64,
        blur: f64,
    ) -> Result<f64, JsError> {
        self.scene
            .fissure_agreement(radius, sharpness, blur)
            .map_err(js)
    }
}

#[wasm_bindgen]
pub fn ace_weights(
    alpha_max: f64,
    step: usize,
    total_steps: usize,
    samples: usize,
) -> Result<Vec<f64>, JsError> {
    render::ace_weights(alpha_max, step, total_steps, samples).map_err(js)
}

#[wasm_bindgen]
pub fn ace_terms(
    alpha_max: f64,
    step: usize,
    total_steps: usize,
    samples: usize,
) -> Result<Vec<f64>, JsError> {
    render::ace_terms(alpha_max, step, total_steps, samples).map_err(js)
}
