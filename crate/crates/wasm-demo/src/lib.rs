//! Browser demo: three small views onto the convolutional SSM building blocks.
//!
//! * kernel growth: composing a 3×3 state kernel with itself widens it by 2
//!   per composition, which is why the efficient variant keeps it pointwise;
//! * the HiPPO-normal spectrum and the discrete eigenvalue moduli `|λ̄|`
//!   for a chosen step size;
//! * the impulse response of a diagonal recurrence computed by the scan.
//!
//! Each export wraps a plain Rust function so the logic is testable natively.

use convssm::scan::{diag_elements, scan_sequential};
use convssm::ssm_init::{discretize, hippo_eigen_half};
use convssm::tensor::{kernel_compose, ConvKernel, Tensor};
use num_complex::Complex64;
use wasm_bindgen::prelude::*;

/// Magnitudes of a square kernel, row-major, with its width.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct Footprint {
    width: usize,
    values: Vec<f64>,
}

#[wasm_bindgen]
impl Footprint {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }
}

/// The single-channel 3×3 diffusion-like state kernel used by the demo.
fn demo_kernel(centre: f64) -> Result<ConvKernel<Complex64>, String> {
    let side = (1.0 - centre) / 4.0;
    let taps = [0.0, side, 0.0, side, centre, side, 0.0, side, 0.0];
    ConvKernel::from_vec(1, 1, 3, taps.iter().map(|&v| Complex64::new(v, 0.0)).collect()).map_err(|e| e.to_string())
}

/// The kernel after `compositions` self-compositions of a 3×3 kernel.
pub fn kernel_footprint(compositions: usize, centre: f64) -> Result<Footprint, String> {
    if compositions > 64 {
        return Err("at most 64 compositions".into());
    }
    let base = demo_kernel(centre)?;
    let mut k = base.clone();
    for _ in 0..compositions {
        k = kernel_compose(&k, &base).map_err(|e| e.to_string())?;
    }
    Ok(Footprint { width: k.width(), values: k.data().iter().map(|z| z.norm()).collect() })
}

/// For each of the `p/2` HiPPO-normal eigenvalues with positive imaginary
/// part: `[Re λ, Im λ, |exp(λΔ)|]`, flattened.
pub fn spectrum(p: usize, dt: f64) -> Result<Vec<f64>, String> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(format!("step size must be positive, got {dt}"));
    }
    if p > 256 {
        return Err("at most 256 states".into());
    }
    let (lambda, _) = hippo_eigen_half(p).map_err(|e| e.to_string())?;
    let ones = vec![Complex64::new(1.0, 0.0); lambda.len()];
    let d = discretize(&lambda, &ones, &vec![dt; lambda.len()]);
    Ok(lambda.iter().zip(&d.lambda_bar).flat_map(|(l, lb)| [l.re, l.im, lb.norm()]).collect())
}

/// Output `y_k = 2 Re Σ_p x_k[p]` of the discretized HiPPO recurrence driven
/// by a unit impulse at step 0, for `steps` steps.
pub fn impulse(p: usize, dt: f64, steps: usize) -> Result<Vec<f64>, String> {
    if steps == 0 || steps > 4096 {
        return Err("steps must be in 1..=4096".into());
    }
    let (lambda, _) = hippo_eigen_half(p).map_err(|e| e.to_string())?;
    let half = lambda.len();
    let ones = vec![Complex64::new(1.0, 0.0); half];
    let d = discretize(&lambda, &ones, &vec![dt; half]);
    // a single pixel: inputs [L, 1, 1, 1, P/2]
    let bu = Tensor::from_fn(&[steps, 1, 1, 1, half], |i| if i < half { d.b_bar[i] } else { Complex64::new(0.0, 0.0) });
    let els = diag_elements(&d.lambda_bar, &bu).map_err(|e| e.to_string())?;
    let states = scan_sequential(&els, &Tensor::zeros(&[1, 1, 1, half])).map_err(|e| e.to_string())?;
    Ok(states.data().chunks(half).map(|x| 2.0 * x.iter().map(|z| z.re).sum::<f64>()).collect())
}

#[wasm_bindgen(js_name = kernelFootprint)]
pub fn kernel_footprint_js(compositions: usize, centre: f64) -> Result<Footprint, JsError> {
    kernel_footprint(compositions, centre).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = spectrum)]
pub fn spectrum_js(p: usize, dt: f64) -> Result<Vec<f64>, JsError> {
    spectrum(p, dt).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = impulseResponse)]
pub fn impulse_js(p: usize, dt: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    impulse(p, dt, steps).map_err(|e| JsError::new(&e))
}
