//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as 8-bit grayscale buffers, row major.

use p2v::masterprint::{crop_impression, distortion_to_warp, synth_master_print, tps_warp_image, DistortionSpec, IdentitySpec};
use p2v::metrics::ssim2d;
use p2v::phantom::{generate_phantom, PhantomParams};
use p2v::tensor_io::{extract_enface_layer, z_mean_projection, BinaryImage2D, Category, Image2D, Volume3D};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: p2v::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn gray(img: &Image2D) -> Vec<u8> {
    img.values().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn category(index: u32) -> Result<Category, JsError> {
    Category::ALL.get(index as usize).copied().ok_or_else(|| JsError::new("category index must be 0..4"))
}

/// Master print of identity `seed`, `size` x `size` pixels.
#[wasm_bindgen]
pub fn master_print(seed: u64, size: usize) -> Result<Vec<u8>, JsError> {
    let m = synth_master_print(&IdentitySpec::sample(seed), (size, size)).map_err(js_err)?;
    Ok(gray(&m.to_image()))
}

fn impression_of(seed: u64, size: usize, impression: u64, cat: u32, magnitude: f64) -> Result<BinaryImage2D, JsError> {
    let master = synth_master_print(&IdentitySpec::sample(seed), (size, size)).map_err(js_err)?;
    let mut r = ChaCha8Rng::seed_from_u64(impression);
    let dist = DistortionSpec::sample(&mut r, (size, size), category(cat)?);
    let warp = distortion_to_warp(&dist, magnitude).map_err(js_err)?;
    crop_impression(&tps_warp_image(&master, &warp).map_err(js_err)?, &dist, (size, size)).map_err(js_err)
}

/// One distorted partial impression: TPS warp of the master print, then
/// the crop of category `cat` (0 upper, 1 middle, 2 lower, 3 full).
#[wasm_bindgen]
pub fn impression(seed: u64, size: usize, impression: u64, cat: u32, magnitude: f64) -> Result<Vec<u8>, JsError> {
    Ok(gray(&impression_of(seed, size, impression, cat, magnitude)?.to_image()))
}

/// Phantom OCT volume built under an impression, with its views.
#[wasm_bindgen]
pub struct Phantom {
    volume: Volume3D,
    print: Image2D,
    junction: Image2D,
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, impression: u64, cat: u32, magnitude: f64, depth: usize) -> Result<Phantom, JsError> {
        let print = impression_of(seed, size, impression, cat, magnitude)?;
        let params = PhantomParams { depth, seed: impression, ..PhantomParams::default() };
        let (volume, truth) = generate_phantom(&print, &params).map_err(js_err)?;
        let junction = extract_enface_layer(&volume, &truth.junction_map, 1).map_err(js_err)?;
        Ok(Phantom { volume, print: print.to_image(), junction })
    }

    pub fn depth(&self) -> usize {
        self.volume.depth()
    }

    pub fn size(&self) -> usize {
        self.volume.width()
    }

    /// Cross-section at row `y`: depth rows by width columns.
    pub fn bscan(&self, y: usize) -> Result<Vec<u8>, JsError> {
        Ok(gray(&self.volume.bscan(y).map_err(js_err)?))
    }

    pub fn zmean(&self) -> Vec<u8> {
        gray(&z_mean_projection(&self.volume))
    }

    /// En-face image along the dermal junction (the internal print).
    pub fn junction(&self) -> Vec<u8> {
        gray(&self.junction)
    }

    /// SSIM of the junction en-face image against the impression.
    pub fn junction_ssim(&self) -> Result<f64, JsError> {
        ssim2d(&self.junction, &self.print).map_err(js_err)
    }
}
