//! Graded ring meshes of star-shaped domains `{ρ < r₀(θ)}`.

use std::f64::consts::TAU;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::FemError;
use crate::mapping::NominalRadius;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradingKind {
    Uniform,
    /// Size proportional to the distance from the origin, floored.
    OriginLinear,
    /// Size proportional to the distance from the boundary, so the density
    /// grows like its inverse; floored at the boundary and capped inside.
    BoundaryInverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshParams {
    pub h_boundary: f64,
    pub grading: GradingKind,
    /// Exponent applied to the grading ratio; 1 gives the linear laws.
    pub grading_strength: f64,
    pub r_floor: f64,
    pub d_floor: f64,
    /// Upper bound on `h(x)/h_boundary` (and its inverse).
    pub cap: f64,
    pub vertex_budget: usize,
}

impl Default for MeshParams {
    fn default() -> Self {
        Self {
            h_boundary: 0.02,
            grading: GradingKind::OriginLinear,
            grading_strength: 1.0,
            r_floor: 0.05,
            d_floor: 0.02,
            cap: 16.0,
            vertex_budget: 5_000_000,
        }
    }
}

impl MeshParams {
    pub fn validate(&self) -> Result<(), FemError> {
        let bad = |m: String| Err(FemError::InvalidMesh(m));
        if !(self.h_boundary > 0.0 && self.h_boundary <= 0.5) {
            return bad(format!("h_boundary must lie in (0, 0.5], got {}", self.h_boundary));
        }
        if !(self.grading_strength >= 1.0) {
            return bad(format!("grading_strength must be ≥ 1, got {}", self.grading_strength));
        }
        if !(self.r_floor > 0.0 && self.r_floor <= 1.0) || !(self.d_floor > 0.0 && self.d_floor <= 1.0) {
            return bad("floors must lie in (0, 1]".into());
        }
        if !(self.cap >= 1.0) {
            return bad(format!("cap must be ≥ 1, got {}", self.cap));
        }
        Ok(())
    }

    /// Target edge length at normalized radius `s = ρ/r₀(θ)`.
    pub fn size_at(&self, s: f64) -> f64 {
        let g = self.grading_strength;
        let ratio = match self.grading {
            GradingKind::Uniform => 1.0,
            GradingKind::OriginLinear => s.max(self.r_floor).powf(g).max(1.0 / self.cap),
            GradingKind::BoundaryInverse => ((1.0 - s).max(self.d_floor) / self.d_floor).powf(g).min(self.cap),
        };
        self.h_boundary * ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshStats {
    pub vertices: usize,
    pub triangles: usize,
    pub rings: usize,
    pub min_angle_deg: f64,
    pub h_boundary: f64,
    pub h_origin: f64,
    pub area: f64,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[u32; 3]>,
    boundary: Vec<bool>,
    /// Vertex angles, used for boundary edge midpoints.
    angles: Vec<f64>,
    rings: usize,
    params: MeshParams,
    radius: NominalRadius,
}

/// Concentric rings of equally spaced vertices, stitched by a zipper that
/// alternates diagonals, closed by a fan around the origin.
pub fn build_graded_disk_mesh(params: &MeshParams, radius: &NominalRadius) -> Result<Mesh, FemError> {
    params.validate()?;
    radius.validate().map_err(|e| FemError::InvalidMesh(e.to_string()))?;
    let mean_r = {
        let n = 1024;
        (0..n).map(|i| radius.eval(TAU * i as f64 / n as f64).0).sum::<f64>() / n as f64
    };
    let perimeter = {
        let n = 4096;
        (0..n)
            .map(|i| {
                let (r, dr) = radius.eval(TAU * i as f64 / n as f64);
                r.hypot(dr) * TAU / n as f64
            })
            .sum::<f64>()
    };
    const SQRT3_2: f64 = 0.866_025_403_784_438_6;
    const MAX_DROP: f64 = 1.5;

    // (s, n, offset) per ring, outermost first.
    let mut rings: Vec<(f64, usize, f64)> = Vec::new();
    let mut s = 1.0;
    let mut n = ((perimeter / params.h_boundary).ceil() as usize).max(6);
    let mut offset = 0.0;
    let mut total = 0usize;
    loop {
        rings.push((s, n, offset));
        total += n;
        if total > params.vertex_budget {
            return Err(FemError::VertexBudget { budget: params.vertex_budget });
        }
        if n <= 8 {
            break;
        }
        let arc = TAU * s * mean_r / n as f64;
        let next_n = |s_next: f64| {
            let target = (TAU * s_next * mean_r / params.size_at(s_next)).ceil() as usize;
            let floor = (n as f64 / MAX_DROP).ceil() as usize;
            target.clamp(floor.max(6), n)
        };
        let mut s_next = s - SQRT3_2 * arc / mean_r;
        let mut n_next = next_n(s_next.max(0.0));
        for _ in 0..2 {
            let arc_next = TAU * s_next.max(0.0) * mean_r / n_next as f64;
            s_next = s - SQRT3_2 * 0.5 * (arc + arc_next) / mean_r;
            n_next = next_n(s_next.max(0.0));
        }
        if s_next <= 0.0 {
            break;
        }
        offset = if n_next == n { (offset + 0.5) % 1.0 } else { 0.0 };
        s = s_next;
        n = n_next;
    }

    let mut vertices = Vec::with_capacity(total + 1);
    let mut angles = Vec::with_capacity(total + 1);
    let mut boundary = Vec::with_capacity(total + 1);
    let mut starts = Vec::with_capacity(rings.len());
    for (k, &(s, n, off)) in rings.iter().enumerate() {
        starts.push(vertices.len());
        for i in 0..n {
            let phi = TAU * (i as f64 + off) / n as f64;
            let r = if k == 0 { radius.eval(phi).0 } else { s * radius.eval(phi).0 };
            vertices.push([r * phi.cos(), r * phi.sin()]);
            angles.push(phi);
            boundary.push(k == 0);
        }
    }
    let center = vertices.len();
    vertices.push([0.0, 0.0]);
    angles.push(0.0);
    boundary.push(false);

    let mut triangles = Vec::with_capacity(2 * total);
    for k in 0..rings.len() - 1 {
        let (_, na, oa) = rings[k];
        let (_, nb, ob) = rings[k + 1];
        let (sa, sb) = (starts[k], starts[k + 1]);
        let ang_a = |i: usize| (i as f64 + oa) / na as f64;
        let ang_b = |i: usize| (i as f64 + ob) / nb as f64;
        let (mut i, mut j) = (0, 0);
        while i < na || j < nb {
            let advance_a = if i == na {
                false
            } else if j == nb {
                true
            } else {
                ang_a(i + 1) <= ang_b(j + 1)
            };
            let a0 = (sa + i % na) as u32;
            let b0 = (sb + j % nb) as u32;
            if advance_a {
                triangles.push([b0, a0, (sa + (i + 1) % na) as u32]);
                i += 1;
            } else {
                triangles.push([b0, a0, (sb + (j + 1) % nb) as u32]);
                j += 1;
            }
        }
    }
    let (_, nl, _) = *rings.last().expect("at least one ring");
    let sl = *starts.last().expect("at least one ring");
    for i in 0..nl {
        triangles.push([center as u32, (sl + i) as u32, (sl + (i + 1) % nl) as u32]);
    }

    let mesh = Mesh { vertices, triangles, boundary, angles, rings: rings.len(), params: params.clone(), radius: radius.clone() };
    mesh.check()?;
    Ok(mesh)
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

fn min_angle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let angle = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        let u = [q[0] - p[0], q[1] - p[1]];
        let v = [r[0] - p[0], r[1] - p[1]];
        let cos = (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
        cos.clamp(-1.0, 1.0).acos()
    };
    angle(a, b, c).min(angle(b, c, a)).min(angle(c, a, b))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Mesh {
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn angle(&self, v: usize) -> f64 {
        self.angles[v]
    }

    pub fn params(&self) -> &MeshParams {
        &self.params
    }

    pub fn radius(&self) -> &NominalRadius {
        &self.radius
    }

    pub fn triangle_points(&self, t: usize) -> [[f64; 2]; 3] {
        self.triangles[t].map(|v| self.vertices[v as usize])
    }

    /// Area of the polygonal (straight-edged) mesh.
    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle_points(t);
                signed_area(a, b, c)
            })
            .sum()
    }

    fn check(&self) -> Result<(), FemError> {
        let mut worst = f64::INFINITY;
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle_points(t);
            if signed_area(a, b, c) <= 0.0 {
                return Err(FemError::InvalidMesh(format!("triangle {t} is not positively oriented")));
            }
            worst = worst.min(min_angle(a, b, c));
        }
        if worst.to_degrees() < 15.0 {
            return Err(FemError::InvalidMesh(format!("minimum angle {:.2}° below 15°", worst.to_degrees())));
        }
        Ok(())
    }

    pub fn stats(&self) -> MeshStats {
        let min_angle_deg = (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle_points(t);
                min_angle(a, b, c)
            })
            .fold(f64::INFINITY, f64::min)
            .to_degrees();
        let nb = self.boundary.iter().filter(|&&b| b).count();
        // Ring 0 is stored first and contiguously.
        let h_boundary = (0..nb).map(|i| dist(self.vertices[i], self.vertices[(i + 1) % nb])).sum::<f64>() / nb as f64;
        let center = self.vertices.len() - 1;
        let spokes: Vec<f64> = self
            .triangles
            .iter()
            .filter(|t| t[0] as usize == center)
            .map(|t| dist(self.vertices[t[1] as usize], self.vertices[t[2] as usize]))
            .collect();
        let h_origin = spokes.iter().sum::<f64>() / spokes.len().max(1) as f64;
        MeshStats {
            vertices: self.vertices.len(),
            triangles: self.triangles.len(),
            rings: self.rings,
            min_angle_deg,
            h_boundary,
            h_origin,
            area: self.area(),
        }
    }

    /// Plain-text OFF export.
    pub fn write_off<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "OFF")?;
        writeln!(out, "{} {} 0", self.vertices.len(), self.triangles.len())?;
        for v in &self.vertices {
            writeln!(out, "{:.17e} {:.17e} 0", v[0], v[1])?;
        }
        for t in &self.triangles {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}
