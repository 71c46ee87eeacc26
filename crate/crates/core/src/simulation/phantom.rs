use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::tensor_io::{AxisLabel, HyperTensor};

/// Geometric primitive of a phantom description. Coordinates are voxel
/// indices; a voxel belongs to a primitive when its center does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    /// Cylinder with its axis along the slice direction.
    Cylinder {
        material: String,
        /// `(row, col)` of the axis.
        center: [f64; 2],
        radius: f64,
        /// Half-open slice range.
        slices: [usize; 2],
    },
    /// Axis-aligned box, half-open `min..max` in `(slice, row, col)`.
    Box {
        material: String,
        min: [usize; 3],
        max: [usize; 3],
    },
}

impl Primitive {
    fn material(&self) -> &str {
        match self {
            Primitive::Cylinder { material, .. } | Primitive::Box { material, .. } => material,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `[slices, rows, cols]`.
    pub shape: [usize; 3],
    pub voxel_pitch: f64,
    pub materials: Vec<String>,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

/// Label volume; 0 is void and `m + 1` is `material_names[m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub label_volume: HyperTensor,
    pub material_names: Vec<String>,
    pub voxel_pitch: f64,
}

impl Phantom {
    pub fn shape(&self) -> [usize; 3] {
        let d = self.label_volume.dims();
        [d[0], d[1], d[2]]
    }

    /// 0/1 volume of material `m` (zero-based).
    pub fn indicator(&self, m: usize) -> HyperTensor {
        let target = (m + 1) as f64;
        HyperTensor::from_parts_unchecked(
            self.label_volume.dims().to_vec(),
            self.label_volume.labels().to_vec(),
            self.label_volume
                .data()
                .iter()
                .map(|&l| if l == target { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn labels_u8(&self) -> Vec<u8> {
        self.label_volume.data().iter().map(|&l| l as u8).collect()
    }
}

pub fn build_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let [n_s, n_r, n_c] = spec.shape;
    if n_s == 0 || n_r == 0 || n_c == 0 {
        return Err(AmdError::invalid("phantom shape has a zero axis"));
    }
    if !(spec.voxel_pitch > 0.0 && spec.voxel_pitch.is_finite()) {
        return Err(AmdError::invalid(format!(
            "voxel pitch must be positive, got {}",
            spec.voxel_pitch
        )));
    }
    if spec.materials.len() > 254 {
        return Err(AmdError::invalid("at most 254 materials"));
    }
    let mut data = vec![0.0; n_s * n_r * n_c];
    for prim in &spec.primitives {
        let id = spec
            .materials
            .iter()
            .position(|m| m == prim.material())
            .ok_or_else(|| AmdError::UnknownMaterial(prim.material().to_string()))?
            as f64
            + 1.0;
        match prim {
            Primitive::Cylinder {
                center,
                radius,
                slices,
                ..
            } => {
                let [cr, cc] = *center;
                if !(*radius > 0.0)
                    || cr - radius < -0.5
                    || cc - radius < -0.5
                    || cr + radius > n_r as f64 - 0.5
                    || cc + radius > n_c as f64 - 0.5
                    || slices[0] >= slices[1]
                    || slices[1] > n_s
                {
                    return Err(AmdError::invalid(format!(
                        "cylinder {prim:?} does not fit in volume {:?}",
                        spec.shape
                    )));
                }
                let r2 = radius * radius;
                for s in slices[0]..slices[1] {
                    for r in 0..n_r {
                        for c in 0..n_c {
                            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
                            if dr * dr + dc * dc <= r2 {
                                data[(s * n_r + r) * n_c + c] = id;
                            }
                        }
                    }
                }
            }
            Primitive::Box { min, max, .. } => {
                if (0..3).any(|a| min[a] >= max[a] || max[a] > spec.shape[a]) {
                    return Err(AmdError::invalid(format!(
                        "box {prim:?} does not fit in volume {:?}",
                        spec.shape
                    )));
                }
                for s in min[0]..max[0] {
                    for r in min[1]..max[1] {
                        for c in min[2]..max[2] {
                            data[(s * n_r + r) * n_c + c] = id;
                        }
                    }
                }
            }
        }
    }
    Ok(Phantom {
        label_volume: HyperTensor::from_parts_unchecked(
            spec.shape.to_vec(),
            vec![AxisLabel::Slice, AxisLabel::Row, AxisLabel::Col],
            data,
        ),
        material_names: spec.materials.clone(),
        voxel_pitch: spec.voxel_pitch,
    })
}

/// Two inner cylinders (materials 1 and 2) embedded in a larger cylinder of
/// material 3, scaled to the volume. Material names default to Ni, Cu, Al.
pub fn default_phantom_spec(shape: [usize; 3], voxel_pitch: f64) -> PhantomSpec {
    let [n_s, n_r, n_c] = shape;
    let n = n_r.min(n_c) as f64;
    let (cr, cc) = ((n_r as f64 - 1.0) / 2.0, (n_c as f64 - 1.0) / 2.0);
    let outer = 0.375 * n;
    let inner = 0.14 * n;
    let offset = 0.18 * n;
    let cut = |f: f64| ((n_s as f64 * f).round() as usize).min(n_s.saturating_sub(1));
    let (shell_lo, shell_hi) = (cut(0.1), (n_s - cut(0.1)).max(cut(0.1) + 1));
    let (core_lo, core_hi) = (cut(0.2), (n_s - cut(0.2)).max(cut(0.2) + 1));
    PhantomSpec {
        shape,
        voxel_pitch,
        materials: vec!["Ni".into(), "Cu".into(), "Al".into()],
        primitives: vec![
            Primitive::Cylinder {
                material: "Al".into(),
                center: [cr, cc],
                radius: outer,
                slices: [shell_lo, shell_hi],
            },
            Primitive::Cylinder {
                material: "Ni".into(),
                center: [cr, cc - offset],
                radius: inner,
                slices: [core_lo, core_hi],
            },
            Primitive::Cylinder {
                material: "Cu".into(),
                center: [cr, cc + offset],
                radius: inner,
                slices: [core_lo, core_hi],
            },
        ],
    }
}
