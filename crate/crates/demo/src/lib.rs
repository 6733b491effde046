//! Browser bindings: patch colouring, rotation resampling and MPP masks on
//! an icosphere. Inputs are clamped rather than rejected so the page never
//! has to handle errors.

use surfseq::data::{clean_field, CHANNELS};
use surfseq::geom::Icosphere;
use surfseq::model::plan_corruption;
use surfseq::patching::{build_ico_patch_table, PatchTable};
use surfseq::resample::{rotate_signal, Rotation};
use surfseq::{SeedStream, SurfaceSignal};
use wasm_bindgen::prelude::*;

pub const MAX_ORDER: u32 = 5;
/// Age in weeks of the synthetic field shown by the field view.
pub const DEMO_AGE: f64 = 35.0;

/// Patch state codes returned by [`Viewer::mpp_states`].
pub const UNTOUCHED: u8 = 0;
pub const MASKED: u8 = 1;
pub const SWAPPED: u8 = 2;
pub const KEPT: u8 = 3;

#[wasm_bindgen]
pub struct Viewer {
    grid: Icosphere,
    table: PatchTable,
    patch_order: u32,
    face_patch: Vec<u32>,
}

#[wasm_bindgen]
impl Viewer {
    /// Grid of order `order` (at most 5) cut into patches from the faces of
    /// an order-`patch_order` icosphere (below `order`).
    #[wasm_bindgen(constructor)]
    pub fn new(order: u32, patch_order: u32) -> Viewer {
        let order = order.clamp(1, MAX_ORDER);
        let patch_order = patch_order.min(order - 1);
        let grid = Icosphere::new(order);
        let table = build_ico_patch_table(&grid, &Icosphere::new(patch_order)).expect("orders are clamped");
        let face_patch = face_patches(&grid, &table);
        Viewer {
            grid,
            table,
            patch_order,
            face_patch,
        }
    }

    pub fn order(&self) -> u32 {
        self.grid.order
    }

    pub fn patch_order(&self) -> u32 {
        self.patch_order
    }

    pub fn vertex_count(&self) -> usize {
        self.grid.vertex_count()
    }

    pub fn patch_count(&self) -> usize {
        self.table.patch_count()
    }

    pub fn patch_size(&self) -> usize {
        self.table.patch_size()
    }

    /// Vertex coordinates, xyz interleaved.
    pub fn positions(&self) -> Vec<f32> {
        self.grid.vertices().iter().flat_map(|p| p.map(|x| x as f32)).collect()
    }

    /// Triangle corner indices, three per face.
    pub fn triangles(&self) -> Vec<u32> {
        self.grid.faces().iter().flatten().copied().collect()
    }

    /// The patch each face belongs to.
    pub fn face_patch(&self) -> Vec<u32> {
        self.face_patch.clone()
    }

    /// Names of the synthetic channels, comma separated.
    pub fn channels(&self) -> String {
        CHANNELS.join(",")
    }

    /// One synthetic channel rotated about `axis` ("x", "y" or "z") by
    /// `degrees` and resampled back onto the grid. An unknown axis or
    /// channel leaves the field unrotated or picks channel 0.
    pub fn rotated_field(&self, channel: usize, axis: &str, degrees: f64) -> Vec<f32> {
        let c = if channel < CHANNELS.len() { channel } else { 0 };
        let all = clean_field(&self.grid, DEMO_AGE);
        let data = all.chunks(CHANNELS.len()).map(|row| row[c] as f32).collect();
        let sig = SurfaceSignal::new(self.grid.vertex_count(), vec![CHANNELS[c].to_string()], data)
            .expect("one value per vertex");
        match format!("{axis}:{degrees}").parse::<Rotation>() {
            Ok(rot) => rotate_signal(&sig, &self.grid, rot).expect("signal matches grid").data().to_vec(),
            Err(_) => sig.data().to_vec(),
        }
    }

    /// Corruption state of every patch for one MPP draw.
    pub fn mpp_states(&self, seed: u64) -> Vec<u8> {
        let n = self.table.patch_count();
        let plan = plan_corruption(n, &mut SeedStream::new(seed)).expect("at least 20 patches");
        (0..n)
            .map(|i| match (plan.mask[i], plan.source[i]) {
                (false, _) => UNTOUCHED,
                (true, s) if s == n => MASKED,
                (true, s) if s == i => KEPT,
                _ => SWAPPED,
            })
            .collect()
    }
}

/// Each fine face lies inside exactly one coarse face, so exactly one patch
/// holds all three of its corners.
fn face_patches(grid: &Icosphere, table: &PatchTable) -> Vec<u32> {
    let mut member: Vec<Vec<u32>> = vec![Vec::new(); grid.vertex_count()];
    for p in 0..table.patch_count() {
        for &v in table.patch(p) {
            member[v as usize].push(p as u32);
        }
    }
    grid.faces()
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|v| &member[v as usize]);
            *a.iter().find(|p| b.contains(p) && c.contains(p)).expect("face inside a patch")
        })
        .collect()
}
